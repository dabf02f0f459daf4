import pytest
import torch

from posefree3d.camera import CameraPose
from posefree3d.discriminator import PoseAwareDiscriminator


def _disc(res=32, **kw):
    torch.manual_seed(0)
    return PoseAwareDiscriminator(res, base_channels=8, max_channels=16, pose_hidden_dim=32, **kw).double()


def _images(n=4, res=32, seed=0):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 2 - 1


@pytest.mark.parametrize("res", [32, 64, 128])
def test_features_are_4x4(res):
    d = _disc(res)
    assert d.extract_features(_images(1, res)).shape[-2:] == (4, 4)


def test_rejects_wrong_resolution():
    with pytest.raises(ValueError):
        _disc(32).extract_features(_images(1, 64))


def test_zero_image_features_are_deterministic_and_batch_equivariant():
    d = _disc()
    z = torch.zeros(2, 3, 32, 32, dtype=torch.float64)
    assert torch.equal(d.extract_features(z), d.extract_features(z))
    x = _images(4)
    perm = torch.tensor([3, 1, 0, 2])
    assert torch.allclose(d.extract_features(x)[perm], d.extract_features(x[perm]), atol=1e-12)


def test_zero_init_pose_head_is_canonical():
    d = _disc()
    p = d.predict_pose(d.extract_features(_images())).as_tensor()
    assert torch.equal(p, torch.zeros_like(p))


def test_predicted_pose_within_spans():
    d = _disc()
    with torch.no_grad():
        d.pose_head.fc2.weight.normal_(std=50.0)
    p = d.criticize(_images(16) * 10).predicted_pose.as_tensor()
    assert (p[:, 0].abs() <= 1.2).all() and (p[:, 1].abs() <= 0.6).all()


def test_zero_init_embedding_makes_score_pose_independent():
    d = _disc()
    x = _images()
    a = d.score(x, CameraPose(torch.zeros(4), torch.zeros(4)))
    b = d.score(x, CameraPose(torch.full((4,), 0.7), torch.full((4,), -0.3)))
    assert torch.equal(a, b)


def test_conditioning_is_live_once_the_embedding_moves():
    d = _disc()
    with torch.no_grad():
        d.embed[2].weight.normal_()
    x = _images()
    a = d.score(x, CameraPose(torch.zeros(4), torch.zeros(4)))
    b = d.score(x, CameraPose(torch.full((4,), 0.7), torch.full((4,), -0.3)))
    assert (a - b).abs().mean() > 0


def test_score_gradient_wrt_image_matches_central_differences():
    d = _disc()
    with torch.no_grad():
        d.embed[2].weight.normal_(std=0.1)
        d.pose_head.fc2.weight.normal_(std=0.1)
    x = _images(1, seed=5)
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(d(xr).sum(), xr)
    gen = torch.Generator().manual_seed(9)
    h = 1e-6
    for _ in range(10):
        idx = tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in x.shape)
        e = torch.zeros_like(x)
        e[idx] = h
        fd = ((d(x + e) - d(x - e)) / (2 * h)).item()
        assert abs(g[idx].item() - fd) <= 1e-2 * abs(fd) + 1e-9


def test_criticize_is_definitional():
    d = _disc()
    with torch.no_grad():
        d.pose_head.fc2.weight.normal_()
        d.embed[2].weight.normal_()
    x = _images()
    out = d.criticize(x)
    assert torch.equal(out.predicted_pose.as_tensor(), d.pose_head(d.extract_features(x).flatten(1)).as_tensor())
    assert torch.equal(out.score, d.score(x, out.predicted_pose))
    assert torch.equal(out.score, d.criticize(x).score)


def test_loop_back_gradient_reaches_embedding_and_pose_head():
    d = _disc()
    with torch.no_grad():
        d.pose_head.fc2.weight.normal_(std=0.1)
    d.criticize(_images()).score.sum().backward()
    assert d.embed[2].weight.grad.abs().sum() > 0
    d.zero_grad()
    with torch.no_grad():
        d.embed[2].weight.normal_(std=0.1)
    d.criticize(_images()).score.sum().backward()
    assert d.pose_head.fc2.weight.grad.abs().sum() > 0
    d.zero_grad()
    d.criticize(_images(), detach_condition=True).score.sum().backward()
    assert d.pose_head.fc2.weight.grad is None or d.pose_head.fc2.weight.grad.abs().sum() == 0


def test_ablation_switches():
    plain = _disc(pose_aware=False)
    assert plain.pose_head is None
    out = plain.criticize(_images())
    assert out.predicted_pose is None
    uncond = _disc(pose_condition=False)
    with torch.no_grad():
        uncond.embed[2].weight.normal_()
    x = _images()
    assert torch.equal(uncond.score(x, CameraPose(torch.zeros(4), torch.zeros(4))), uncond.score(x, None))
    assert uncond.criticize(x).predicted_pose is not None
