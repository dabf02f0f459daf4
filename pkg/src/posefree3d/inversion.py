"""Invert a single image into (style code, pose) and optionally tune weights.

Stage 1 optimises w (starting from the mean style code) to reproduce the
image; the pose either follows the pose learner (mode "A") or is a free
variable initialised there (mode "B"). Stage 2 freezes w and the pose and
fine-tunes the field weights on a copy of the generator.

The reconstruction loss is pixel MSE plus MSE on a 3-level average-pooled
image pyramid.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .camera import CameraPose
from .generator import PoseFreeGenerator
from .losses import NonFiniteLossError
from .renderer import RenderOutput

MODES = ("A", "B")


@dataclass
class InversionConfig:
    stage1_steps: int = 400
    stage2_steps: int = 300
    lr_style: float = 0.02
    lr_pose: float = 0.01
    lr_tune: float = 1e-3
    mode: str = "A"
    pyramid_levels: int = 3
    mean_samples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"inversion mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class InversionResult:
    style: torch.Tensor  # (1, S)
    pose: CameraPose
    mode: str
    generator: PoseFreeGenerator  # the tuned copy after stage 2, else the input generator
    psnr: float
    objective: float
    trace: list = field(default_factory=list)  # best-so-far objective per iteration


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, levels: int = 3) -> torch.Tensor:
    loss = F.mse_loss(pred, target)
    for _ in range(1, levels):
        pred = F.avg_pool2d(pred, 2)
        target = F.avg_pool2d(target, 2)
        loss = loss + F.mse_loss(pred, target)
    return loss


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """PSNR in dB for images in [-1, 1] (peak-to-peak range 2)."""
    mse = F.mse_loss(pred, target).item()
    return float("inf") if mse == 0 else 10 * math.log10(4.0 / mse)


def _check(value: torch.Tensor, trace):
    if not bool(torch.isfinite(value)):
        raise NonFiniteLossError(f"inversion objective became non-finite; trace so far: {trace[-5:]}")


def invert(image: torch.Tensor, generator: PoseFreeGenerator, config: InversionConfig | None = None,
           init_style: torch.Tensor | None = None) -> InversionResult:
    config = config or InversionConfig()
    res = generator.intrinsics.image_resolution
    target = image if image.dim() == 4 else image.unsqueeze(0)
    if tuple(target.shape[-2:]) != (res, res):
        raise ValueError(f"image must be {res}x{res}, got {tuple(target.shape[-2:])}")
    dtype = next(generator.parameters()).dtype
    target = target.to(dtype)
    generator.requires_grad_(False)
    if init_style is None:
        init_style = generator.mean_style(config.mean_samples, config.seed)
    w = init_style.detach().clone().reshape(1, -1).requires_grad_(True)
    params = [{"params": [w], "lr": config.lr_style}]
    free_pose = None
    if config.mode == "B":
        free_pose = generator.pose_learner(w.detach()).as_tensor().detach().clone().requires_grad_(True)
        params.append({"params": [free_pose], "lr": config.lr_pose})

    def current_pose(style):
        return CameraPose.from_tensor(free_pose) if free_pose is not None else generator.pose_learner(style)

    trace: list[float] = []
    with torch.no_grad():
        best = reconstruction_loss(generator.synthesize(w, current_pose(w)).image, target, config.pyramid_levels).item()
    best_w, best_pose = w.detach().clone(), current_pose(w).detach()
    opt = torch.optim.Adam(params, betas=(0.9, 0.999))
    for _ in range(config.stage1_steps):
        pose = current_pose(w)
        loss = reconstruction_loss(generator.synthesize(w, pose).image, target, config.pyramid_levels)
        _check(loss, trace)
        if loss.item() < best:
            best, best_w, best_pose = loss.item(), w.detach().clone(), pose.detach()
        trace.append(best)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        pose = current_pose(w)
        final = reconstruction_loss(generator.synthesize(w, pose).image, target, config.pyramid_levels).item()
    if config.stage1_steps and final < best:
        best, best_w, best_pose = final, w.detach().clone(), pose.detach()

    tuned = generator
    if config.stage2_steps > 0:
        tuned = copy.deepcopy(generator)
        tune_params = list(tuned.field.backbone.parameters())
        for p in tune_params:
            p.requires_grad_(True)
        opt = torch.optim.Adam(tune_params, lr=config.lr_tune, betas=(0.9, 0.999))
        best_state = copy.deepcopy(tuned.field.backbone.state_dict())
        for _ in range(config.stage2_steps):
            loss = reconstruction_loss(tuned.synthesize(best_w, best_pose).image, target, config.pyramid_levels)
            _check(loss, trace)
            if loss.item() < best:
                best = loss.item()
                best_state = copy.deepcopy(tuned.field.backbone.state_dict())
            trace.append(best)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        with torch.no_grad():
            final = reconstruction_loss(tuned.synthesize(best_w, best_pose).image, target, config.pyramid_levels).item()
        if final < best:
            best = final
            best_state = copy.deepcopy(tuned.field.backbone.state_dict())
        tuned.field.backbone.load_state_dict(best_state)
        tuned.requires_grad_(False)

    with torch.no_grad():
        recon = tuned.synthesize(best_w, best_pose).image
    return InversionResult(best_w, best_pose, config.mode, tuned, psnr(recon, target), best, trace)


@torch.no_grad()
def novel_views(result: InversionResult, poses: list[CameraPose]) -> list[RenderOutput]:
    return [result.generator.synthesize(result.style, CameraPose.from_tensor(p.as_tensor().reshape(1, 2)))
            for p in poses]


def azimuth_sweep(center: CameraPose, n_views: int = 5, span: float = math.radians(23.0)) -> list[CameraPose]:
    """Poses with azimuth offsets uniformly spread over [-span, span] around ``center``."""
    offsets = torch.linspace(-span, span, n_views, dtype=torch.float64)
    c = center.as_tensor(dtype=torch.float64).reshape(-1)
    return [CameraPose(float(c[0] + o), float(c[1])) for o in offsets]
