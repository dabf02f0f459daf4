import math

import pytest
import torch

from posefree3d.camera import CameraIntrinsics, CameraPose
from posefree3d.generator import PoseFreeGenerator
from posefree3d.inversion import (
    InversionConfig,
    azimuth_sweep,
    invert,
    novel_views,
    psnr,
    reconstruction_loss,
)

INTR = CameraIntrinsics(image_resolution=8)


def _gen():
    torch.manual_seed(0)
    g = PoseFreeGenerator(INTR, latent_dim=8, style_dim=8, pose_hidden_dim=16, n_samples=12, hidden_dim=16,
                          n_layers=2, n_bands=3)
    with torch.no_grad():
        g.pose_learner.fc2.weight.normal_(std=0.5)
    return g


def _target(g, seed=5):
    z = torch.randn(1, 8, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        out = g.generate(z)
    return out.image.image[0], out.pose


def test_reconstruction_loss_and_psnr():
    a = torch.zeros(1, 3, 8, 8)
    assert reconstruction_loss(a, a) == 0
    assert psnr(a, a) == math.inf
    # a constant offset survives every pooling level unchanged
    assert abs(reconstruction_loss(a + 0.1, a).item() - 3 * 0.01) < 1e-7
    assert abs(psnr(a + 0.2, a) - 10 * math.log10(4 / 0.04)) < 1e-4


def test_zero_iterations_returns_the_mean_style_rendering():
    g = _gen()
    image, _ = _target(g)
    res = invert(image, g, InversionConfig(stage1_steps=0, stage2_steps=0, mean_samples=64))
    mean = g.mean_style(64, 0)
    assert torch.equal(res.style, mean.reshape(1, -1))
    assert res.generator is g
    assert res.trace == []
    with torch.no_grad():
        expected = g.synthesize(mean.reshape(1, -1), g.pose_learner(mean.reshape(1, -1))).image
    assert abs(res.objective - reconstruction_loss(expected, image.unsqueeze(0)).item()) < 1e-7


@pytest.mark.parametrize("mode", ["A", "B"])
def test_trace_is_monotone_and_improves(mode):
    g = _gen()
    image, _ = _target(g)
    res = invert(image, g, InversionConfig(stage1_steps=30, stage2_steps=20, mean_samples=64, mode=mode))
    assert len(res.trace) == 50
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.objective <= res.trace[0]
    assert res.generator is not g
    # stage 2 tunes a copy, never the caller's generator
    assert all(not p.requires_grad for p in g.parameters())


def test_stage_two_leaves_input_generator_untouched():
    g = _gen()
    before = [p.detach().clone() for p in g.parameters()]
    image, _ = _target(g)
    invert(image, g, InversionConfig(stage1_steps=2, stage2_steps=5, mean_samples=64))
    assert all(torch.equal(a, b) for a, b in zip(before, g.parameters()))


def test_invalid_mode_and_resolution():
    with pytest.raises(ValueError):
        InversionConfig(mode="C")
    with pytest.raises(ValueError):
        invert(torch.zeros(3, 16, 16), _gen(), InversionConfig(stage1_steps=0, stage2_steps=0, mean_samples=8))


def test_inversion_is_deterministic():
    g = _gen()
    image, _ = _target(g)
    cfg = InversionConfig(stage1_steps=10, stage2_steps=5, mean_samples=64, mode="B")
    a = invert(image, g, cfg)
    b = invert(image, g, cfg)
    assert torch.equal(a.style, b.style)
    assert a.trace == b.trace


def test_novel_view_at_recovered_pose_reproduces_reconstruction():
    g = _gen()
    image, _ = _target(g)
    res = invert(image, g, InversionConfig(stage1_steps=10, stage2_steps=5, mean_samples=64))
    (view,) = novel_views(res, [res.pose])
    recon = res.generator.synthesize(res.style, res.pose).image
    assert torch.allclose(view.image, recon, atol=1e-6)
    views = novel_views(res, azimuth_sweep(res.pose, 5))
    assert len(views) == 5 and all(v.image.shape == (1, 3, 8, 8) for v in views)


def test_azimuth_sweep_is_centred_and_uniform():
    poses = azimuth_sweep(CameraPose(0.2, 0.1), 5, 0.4)
    az = [float(p.azimuth) for p in poses]
    assert az == pytest.approx([-0.2, 0.0, 0.2, 0.4, 0.6], abs=1e-12)
    assert all(float(p.elevation) == pytest.approx(0.1) for p in poses)


def test_mode_b_recovers_a_sample_from_its_own_latent():
    g = _gen()
    z = torch.randn(1, 8, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        out = g.generate(z)
    res = invert(out.image.image[0], g, InversionConfig(stage1_steps=0, stage2_steps=0, mode="B"),
                 init_style=out.style)
    assert res.objective == 0
    assert torch.allclose(res.pose.as_tensor(), out.pose.as_tensor())
