"""Latent-conditioned radiance field: z -> w mapping and (c, sigma) queries."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class FieldSample(NamedTuple):
    color: torch.Tensor  # (..., 3) in [0, 1]
    density: torch.Tensor  # (...,) >= 0


def sample_latents(n: int, latent_dim: int, generator: torch.Generator | None = None, dtype=None) -> torch.Tensor:
    return torch.randn(n, latent_dim, generator=generator, dtype=dtype)


class MappingNetwork(nn.Module):
    """Pixel-normalized MLP from latent codes z to style codes w."""

    def __init__(self, latent_dim: int = 64, style_dim: int = 64, hidden_dim: int = 128, n_layers: int = 3):
        super().__init__()
        layers = []
        dims = [latent_dim] + [hidden_dim] * (n_layers - 1) + [style_dim]
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)
        for m in self.net:
            if isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
                nn.init.normal_(m.bias, std=0.1)
        self.latent_dim = latent_dim
        self.style_dim = style_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + 1e-8)
        return self.net(z)


def positional_encoding(x: torch.Tensor, n_bands: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_bands, dtype=x.dtype, device=x.device)) * math.pi
    angles = (x[..., None, :] * freqs[:, None]).flatten(-2)
    return torch.cat([x, torch.sin(angles), torch.cos(angles)], dim=-1)


class FiLMLinear(nn.Module):
    """Linear layer whose features are scaled and shifted per style code."""

    def __init__(self, in_dim: int, out_dim: int, style_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.affine = nn.Linear(style_dim, 2 * out_dim)
        nn.init.kaiming_normal_(self.linear.weight, a=0.2, nonlinearity="leaky_relu")
        nn.init.zeros_(self.linear.bias)
        nn.init.normal_(self.affine.weight, std=0.25 / math.sqrt(style_dim))
        nn.init.zeros_(self.affine.bias)

    def forward(self, h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        # h: (B, N, in), w: (B, style)
        scale, shift = self.affine(w).unsqueeze(1).chunk(2, dim=-1)
        return F.leaky_relu(self.linear(h) * (1 + scale) + shift, 0.2)


def _box_falloff(points: torch.Tensor, sharpness: float = 20.0) -> torch.Tensor:
    """Smoothly suppress density outside the [-1, 1]^3 scene box."""
    return torch.sigmoid(sharpness * (1 - points.square())).prod(dim=-1)


class ModulatedMLPField(nn.Module):
    """Coordinate MLP over positional encodings, modulated by the style code."""

    def __init__(
        self,
        style_dim: int = 64,
        hidden_dim: int = 64,
        n_layers: int = 4,
        n_bands: int = 6,
        view_dependent: bool = False,
        scene_scale: float = 1.0,
        density_scale: float = 10.0,
    ):
        super().__init__()
        self.n_bands = n_bands
        self.view_dependent = view_dependent
        self.scene_scale = scene_scale
        self.density_scale = density_scale
        in_dim = 3 + 6 * n_bands
        self.layers = nn.ModuleList(
            [FiLMLinear(in_dim if i == 0 else hidden_dim, hidden_dim, style_dim) for i in range(n_layers)]
        )
        self.density_out = nn.Linear(hidden_dim, 1)
        color_in = hidden_dim + (3 + 6 * 2 if view_dependent else 0)
        self.color_out = nn.Linear(color_in, 3)
        nn.init.normal_(self.density_out.weight, std=0.5 / math.sqrt(hidden_dim))
        nn.init.zeros_(self.density_out.bias)

    def forward(self, w, points, view_dirs) -> FieldSample:
        x = points / self.scene_scale
        h = positional_encoding(x, self.n_bands)
        for layer in self.layers:
            h = layer(h, w)
        raw_sigma = self.density_out(h).squeeze(-1)
        density = self.density_scale * F.softplus(raw_sigma) * _box_falloff(x)
        if self.view_dependent:
            h = torch.cat([h, positional_encoding(view_dirs, 2)], dim=-1)
        color = torch.sigmoid(self.color_out(h))
        return FieldSample(color, density)


class TriplaneField(nn.Module):
    """Low-resolution tri-plane decoded by a small MLP.

    The style code is projected to three axis-aligned feature planes
    (xy, xz, zy) of ``channels x plane_res x plane_res``; point features are
    the sum of bilinear lookups.
    """

    def __init__(
        self,
        style_dim: int = 64,
        channels: int = 16,
        plane_res: int = 32,
        hidden_dim: int = 64,
        view_dependent: bool = False,
        scene_scale: float = 1.0,
        density_scale: float = 10.0,
    ):
        super().__init__()
        if plane_res % 8:
            raise ValueError("plane_res must be a multiple of 8")
        self.channels = channels
        self.plane_res = plane_res
        self.view_dependent = view_dependent
        self.scene_scale = scene_scale
        self.density_scale = density_scale
        base = plane_res // 4
        self.to_planes = nn.Linear(style_dim, 3 * channels * base * base)
        self.up = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3),
            nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3),
        )
        self.decoder = nn.Sequential(nn.Linear(channels, hidden_dim), nn.Softplus())
        self.density_out = nn.Linear(hidden_dim, 1)
        self.color_out = nn.Linear(hidden_dim + (3 + 6 * 2 if view_dependent else 0), 3)

    def planes(self, w: torch.Tensor) -> torch.Tensor:
        base = self.plane_res // 4
        p = self.to_planes(w).view(w.shape[0], 3 * self.channels, base, base)
        return self.up(p).view(w.shape[0], 3, self.channels, self.plane_res, self.plane_res)

    def forward(self, w, points, view_dirs) -> FieldSample:
        x = points / self.scene_scale
        planes = self.planes(w)
        coords = torch.stack([x[..., [0, 1]], x[..., [0, 2]], x[..., [2, 1]]], dim=1)  # (B, 3, N, 2)
        b = x.shape[0]
        feats = F.grid_sample(
            planes.flatten(0, 1),
            coords.flatten(0, 1).unsqueeze(1),
            mode="bilinear",
            padding_mode="zeros",
            align_corners=False,
        )  # (B*3, C, 1, N)
        feats = feats.view(b, 3, self.channels, -1).sum(dim=1).transpose(1, 2)
        h = self.decoder(feats)
        density = self.density_scale * F.softplus(self.density_out(h).squeeze(-1)) * _box_falloff(x)
        if self.view_dependent:
            h = torch.cat([h, positional_encoding(view_dirs, 2)], dim=-1)
        color = torch.sigmoid(self.color_out(h))
        return FieldSample(color, density)


def check_finite(*tensors: torch.Tensor):
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise ValueError("field query received non-finite input")


class RadianceField(nn.Module):
    """Mapping network plus a field backbone.

    ``map_latent`` turns z into w; ``query`` evaluates color and density
    at a batch of points for a batch of style codes.
    """

    def __init__(
        self,
        latent_dim: int = 64,
        style_dim: int = 64,
        mapping_layers: int = 3,
        backbone: str = "mlp",
        hidden_dim: int = 64,
        n_layers: int = 4,
        n_bands: int = 6,
        view_dependent: bool = False,
        density_scale: float = 10.0,
        triplane_channels: int = 16,
        triplane_res: int = 32,
    ):
        super().__init__()
        self.mapping = MappingNetwork(latent_dim, style_dim, max(hidden_dim, style_dim), mapping_layers)
        if backbone == "mlp":
            self.backbone = ModulatedMLPField(
                style_dim, hidden_dim, n_layers, n_bands, view_dependent, density_scale=density_scale
            )
        elif backbone == "triplane":
            self.backbone = TriplaneField(
                style_dim, triplane_channels, triplane_res, hidden_dim, view_dependent, density_scale=density_scale
            )
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.latent_dim = latent_dim
        self.style_dim = style_dim

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def query(self, w: torch.Tensor, points: torch.Tensor, view_dirs: torch.Tensor) -> FieldSample:
        """Evaluate the field. ``points`` and ``view_dirs`` are ``(B, N, 3)``."""
        check_finite(w, points, view_dirs)
        return self.backbone(w, points, view_dirs)
