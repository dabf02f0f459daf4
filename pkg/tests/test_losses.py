import math

import pytest
import torch

from posefree3d.camera import CameraIntrinsics, CameraPose
from posefree3d.discriminator import PoseAwareDiscriminator
from posefree3d.generator import PoseFreeGenerator
from posefree3d.losses import (
    LOG2,
    LossReport,
    NonFiniteLossError,
    d_adv_from_logits,
    d_loss,
    ensure_finite,
    g_adv_from_logits,
    g_loss,
    gradient_penalty,
    pose_loss,
    symmetric_views,
    totals,
)


def test_zero_logits_give_log2_terms():
    zeros = torch.zeros(7, dtype=torch.float64)
    assert abs(d_adv_from_logits(zeros, zeros).item() - 2 * math.log(2)) < 1e-9
    assert abs(g_adv_from_logits(zeros).item() - math.log(2)) < 1e-9
    assert abs(LOG2 - 0.6931471805599453) < 1e-15


def test_adversarial_losses_match_log_sigmoid_form():
    g = torch.Generator().manual_seed(0)
    r = torch.randn(16, generator=g, dtype=torch.float64)
    f = torch.randn(16, generator=g, dtype=torch.float64)
    ref = -(torch.log(1 - torch.sigmoid(f)).mean() + torch.log(torch.sigmoid(r)).mean())
    assert abs(d_adv_from_logits(r, f).item() - ref.item()) < 1e-12
    assert abs(g_adv_from_logits(f).item() + torch.log(torch.sigmoid(f)).mean().item()) < 1e-12


class LinearCritic(torch.nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def criticize(self, image, detach_condition=False):
        from posefree3d.discriminator import CriticOutput

        return CriticOutput((image.flatten(1) * self.w).sum(-1), None, None)


def test_linear_critic_penalty_is_weight_norm():
    g = torch.Generator().manual_seed(1)
    w = torch.randn(3 * 8 * 8, generator=g, dtype=torch.float64)
    critic = LinearCritic(w)
    real = torch.randn(5, 3, 8, 8, generator=g, dtype=torch.float64).requires_grad_(True)
    pen = gradient_penalty(real, critic.criticize(real).score)
    assert abs(pen.item() - w.square().sum().item()) < 1e-9
    _, pen2, _, _ = d_loss(critic, real.detach(), real.detach(), penalty_weight=1.0)
    assert abs(pen2.item() - w.square().sum().item()) < 1e-9


def test_zero_penalty_weight_removes_the_penalty():
    critic = LinearCritic(torch.ones(3 * 8 * 8, dtype=torch.float64))
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    _, pen, _, _ = d_loss(critic, x, x, penalty_weight=0.0)
    assert pen.item() == 0
    r = LossReport(d_adv=1.0, d_grad_penalty=5.0)
    assert totals(r, 2.0, 0.0, True, True)[1] == 1.0


def test_untrained_critic_with_zero_head_scores_2log2():
    torch.manual_seed(0)
    d = PoseAwareDiscriminator(32, 8, 16, 32).double()
    torch.nn.init.zeros_(d.out.weight)
    torch.nn.init.zeros_(d.out.bias)
    x = torch.randn(3, 3, 32, 32, dtype=torch.float64)
    d_adv, _, _, _ = d_loss(d, x, x, 0.0)
    assert abs(d_adv.item() - 2 * math.log(2)) < 1e-9


def test_pose_loss_examples_and_loop_oracle():
    p = CameraPose(torch.tensor([0.1, -0.2, 0.3]), torch.tensor([0.0, 0.1, -0.1]))
    assert pose_loss(p, p).item() == 0
    shifted = CameraPose(p.azimuth + 0.25, p.elevation)
    assert abs(pose_loss(shifted, p).item() - 0.0625) < 1e-7
    g = torch.Generator().manual_seed(4)
    a = (torch.rand(37, 2, generator=g, dtype=torch.float64) - 0.5)
    b = (torch.rand(37, 2, generator=g, dtype=torch.float64) - 0.5)
    total = 0.0
    for i in range(37):
        total += (a[i, 0].item() - b[i, 0].item()) ** 2 + (a[i, 1].item() - b[i, 1].item()) ** 2
    assert abs(pose_loss(CameraPose.from_tensor(a), CameraPose.from_tensor(b)).item() - total / 37) < 1e-12


def _models():
    torch.manual_seed(0)
    intr = CameraIntrinsics(image_resolution=16)
    G = PoseFreeGenerator(intr, latent_dim=8, style_dim=8, pose_hidden_dim=16, n_samples=8, hidden_dim=16,
                          n_layers=2, n_bands=2).double()
    D = PoseAwareDiscriminator(16, 8, 16, 32).double()
    with torch.no_grad():
        G.pose_learner.fc2.weight.normal_(std=0.5)
        D.embed[2].weight.normal_(std=0.5)
        D.pose_head.fc2.weight.normal_(std=0.5)
    return G, D


def test_generator_loss_reaches_pose_learner_through_the_critic():
    G, D = _models()
    out = G.generate(torch.randn(4, 8, dtype=torch.float64))
    loss, _ = g_loss(D, out.image.image)
    loss.backward()
    assert G.pose_learner.fc2.weight.grad.abs().sum() > 0
    assert all(p.grad is not None for p in G.field.parameters())


def test_detaching_the_pose_cuts_the_pose_learner_gradient():
    G, D = _models()
    z = torch.randn(4, 8, dtype=torch.float64)
    w = G.map_latent(z)
    img = G.synthesize(w, G.pose_learner(w).detach()).image
    g_loss(D, img)[0].backward()
    assert G.pose_learner.fc2.weight.grad is None


def test_pose_loss_trains_only_the_pose_head():
    G, D = _models()
    out = G.generate(torch.randn(4, 8, dtype=torch.float64))
    fake = D.criticize(out.image.image.detach(), detach_condition=True)
    pose_loss(fake.predicted_pose, out.pose.detach()).backward()
    assert G.pose_learner.fc2.weight.grad is None
    assert D.pose_head.fc2.weight.grad.abs().sum() > 0
    assert D.embed[2].weight.grad is None


def test_symmetric_views_mirror_the_pose():
    G, _ = _models()
    z = torch.randn(5, 8, dtype=torch.float64)
    out = G.generate(z)
    sym, mirrored = symmetric_views(G, z)
    assert sym.image.shape == out.image.image.shape
    assert torch.equal(mirrored.azimuth, -out.pose.azimuth)
    assert torch.equal(mirrored.elevation, out.pose.elevation)
    assert torch.allclose(sym.image, G.synthesize(out.style, mirrored).image)


def test_totals_follow_switches():
    r = LossReport(g_adv=1.0, g_adv_sym=0.5, d_adv=2.0, d_adv_sym=0.25, d_grad_penalty=0.1, pose_loss=0.3)
    g, d = totals(r, pose_weight=2.0, penalty_weight=1.0, symmetry=True, pose_aware=True)
    assert g == 1.5 and abs(d - (2.25 + 0.1 + 0.6)) < 1e-12
    g, d = totals(r, 2.0, 1.0, symmetry=False, pose_aware=False)
    assert g == 1.0 and abs(d - 2.1) < 1e-12
    _, d = totals(r, 2.0, 1.0, True, True, penalty_scale=16)
    assert abs(d - (2.25 + 1.6 + 0.6)) < 1e-12


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteLossError):
        ensure_finite("x", torch.tensor(float("nan")))
