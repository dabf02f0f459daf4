"""Adversarial, gradient-penalty, pose and symmetric-view objectives."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .camera import CameraPose, mirror_pose


class NonFiniteLossError(FloatingPointError):
    pass


def ensure_finite(name: str, value: torch.Tensor):
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLossError(f"{name} is not finite: {value.detach().cpu().tolist()}")
    return value


@dataclass
class LossReport:
    g_adv: float = 0.0
    g_adv_sym: float = 0.0
    d_adv: float = 0.0
    d_adv_sym: float = 0.0
    d_grad_penalty: float = 0.0
    pose_loss: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def d_adv_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-E[log(1 - D(fake))] - E[log D(real)] with D = sigmoid(logit)."""
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def g_adv_from_logits(fake_logits: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    if saturating:
        # E[log(1 - D(fake))], minimised by G
        return -F.softplus(fake_logits).mean()
    return F.softplus(-fake_logits).mean()


def gradient_penalty(real_images: torch.Tensor, real_logits: torch.Tensor) -> torch.Tensor:
    """E[||d logit / d image||^2] at real images; ``real_images`` must require grad."""
    (grad,) = torch.autograd.grad(real_logits.sum(), real_images, create_graph=True)
    return grad.square().flatten(1).sum(dim=1).mean()


def d_loss(critic, real_images: torch.Tensor, fake_images: torch.Tensor, penalty_weight: float):
    """Discriminator adversarial loss plus R1 penalty.

    Returns ``(d_adv, penalty, real_out, fake_out)``; the penalty is only
    computed when ``penalty_weight > 0``. Conditions use the critic's own
    pose prediction, detached so only the pose loss trains the pose head.
    """
    fake_images = fake_images.detach()
    if penalty_weight > 0:
        real_images = real_images.detach().requires_grad_(True)
    real_out = critic.criticize(real_images, detach_condition=True)
    fake_out = critic.criticize(fake_images, detach_condition=True)
    d_adv = d_adv_from_logits(real_out.score, fake_out.score)
    if penalty_weight > 0:
        penalty = gradient_penalty(real_images, real_out.score)
    else:
        penalty = torch.zeros((), dtype=d_adv.dtype)
    return d_adv, penalty, real_out, fake_out


def g_loss(critic, fake_images: torch.Tensor, saturating: bool = False):
    """-E[log D(fake | pose predicted from fake)]; gradients reach the generator."""
    out = critic.criticize(fake_images)
    return g_adv_from_logits(out.score, saturating), out


def pose_loss(predicted: CameraPose, target: CameraPose) -> torch.Tensor:
    """Mean over the batch of squared azimuth plus squared elevation error."""
    p = predicted.as_tensor()
    t = target.as_tensor(dtype=p.dtype)
    return (p - t).square().sum(dim=-1).mean()


def symmetric_views(generator, z: torch.Tensor, stratified=False, rng=None, w=None, pose=None):
    """Render each latent's field from the yz-mirrored version of its own pose.

    Pass ``w``/``pose`` to reuse an already computed forward pass.
    """
    if w is None:
        w = generator.map_latent(z)
    if pose is None:
        pose = generator.pose_learner(w)
    mirrored = mirror_pose(pose)
    return generator.synthesize(w, mirrored, stratified, rng), mirrored


def totals(report: LossReport, pose_weight: float, penalty_weight: float, symmetry: bool, pose_aware: bool,
           penalty_scale: float = 1.0):
    """Weighted sums used by the generator and discriminator steps."""
    total_g = report.g_adv + (report.g_adv_sym if symmetry else 0.0)
    total_d = report.d_adv + (report.d_adv_sym if symmetry else 0.0)
    total_d += penalty_weight * penalty_scale * report.d_grad_penalty
    if pose_aware:
        total_d += pose_weight * report.pose_loss
    return total_g, total_d


LOG2 = math.log(2.0)
