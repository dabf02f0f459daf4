"""Differentiable volume rendering by ray quadrature."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .camera import CameraIntrinsics, CameraPose, RayBundle, generate_rays

DEPTH_EPS = 1e-10


class RenderOutput(NamedTuple):
    image: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    depth: torch.Tensor  # (B, H, W), 0 where nothing was hit
    alpha: torch.Tensor  # (B, H, W) in [0, 1]


@dataclass
class RenderOptions:
    n_samples: int = 48
    stratified: bool = False
    background: float = 1.0
    generator: torch.Generator | None = None


def sample_along_rays(
    rays: RayBundle,
    intrinsics: CameraIntrinsics,
    n_samples: int,
    stratified: bool = False,
    generator: torch.Generator | None = None,
):
    """Per-ray sample distances and the interval length each one represents.

    Returns ``(t, deltas)`` of shape ``rays.origins.shape[:-1] + (n_samples,)``.
    Interval boundaries sit halfway between neighbouring samples, with near
    and far as the outer boundaries, so the intervals tile [near, far].
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    near, far = intrinsics.near, intrinsics.far
    lead = rays.origins.shape[:-1]
    dtype, device = rays.origins.dtype, rays.origins.device
    edges = torch.linspace(near, far, n_samples + 1, dtype=dtype, device=device)
    lo, hi = edges[:-1], edges[1:]
    if stratified:
        u = torch.rand(lead + (n_samples,), generator=generator, dtype=dtype).to(device)
    else:
        u = torch.full(lead + (n_samples,), 0.5, dtype=dtype, device=device)
    t = lo + (hi - lo) * u
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    bounds = torch.cat(
        [torch.full(lead + (1,), near, dtype=dtype, device=device), mids, torch.full(lead + (1,), far, dtype=dtype, device=device)],
        dim=-1,
    )
    return t, bounds[..., 1:] - bounds[..., :-1]


def accumulate(colors: torch.Tensor, densities: torch.Tensor, t: torch.Tensor, deltas: torch.Tensor):
    """Alpha-composite samples along each ray.

    ``colors`` is ``(..., n, 3)``; ``densities``, ``t`` and ``deltas`` are
    ``(..., n)``. Returns ``(color, alpha, depth, weights)``.
    """
    tau = densities * deltas
    alphas = 1 - torch.exp(-tau)
    # transmittance before each sample: exp(-sum_{j<i} tau_j)
    shifted = torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], dim=-1)
    trans = torch.exp(-torch.cumsum(shifted, dim=-1))
    weights = trans * alphas
    color = (weights[..., None] * colors).sum(dim=-2)
    alpha = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) / alpha.clamp(min=DEPTH_EPS)
    return color, alpha, depth, weights


def render_rays(field, w: torch.Tensor, rays: RayBundle, intrinsics: CameraIntrinsics, options: RenderOptions):
    """Render a batch of ray bundles ``(B, H, W, 3)`` for style codes ``(B, S)``."""
    t, deltas = sample_along_rays(rays, intrinsics, options.n_samples, options.stratified, options.generator)
    b, h, wd = rays.origins.shape[:3]
    points = rays.origins[..., None, :] + rays.directions[..., None, :] * t[..., None]
    dirs = rays.directions[..., None, :].expand_as(points)
    sample = field.query(w, points.reshape(b, -1, 3), dirs.reshape(b, -1, 3))
    colors = sample.color.reshape(b, h, wd, -1, 3)
    densities = sample.density.reshape(b, h, wd, -1)
    color, alpha, depth, _ = accumulate(colors, densities, t, deltas)
    image = 2 * (color + (1 - alpha)[..., None] * options.background) - 1
    return RenderOutput(image.permute(0, 3, 1, 2), depth, alpha)


def render(field, w: torch.Tensor, pose: CameraPose, intrinsics: CameraIntrinsics, options: RenderOptions | None = None) -> RenderOutput:
    """Render style codes ``w`` (B, S) at poses with batch shape (B,)."""
    options = options or RenderOptions()
    rays = generate_rays(pose, intrinsics, dtype=w.dtype, device=w.device)
    if rays.origins.dim() == 3:
        rays = RayBundle(rays.origins.unsqueeze(0).expand(w.shape[0], -1, -1, -1), rays.directions.unsqueeze(0).expand(w.shape[0], -1, -1, -1))
    return render_rays(field, w, rays, intrinsics, options)
