"""Pose-free generator: a latent code decides both the scene and the camera."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .camera import CameraIntrinsics, CameraPose
from .field import RadianceField, sample_latents
from .renderer import RenderOptions, RenderOutput, render


class GeneratorOutput(NamedTuple):
    image: RenderOutput
    pose: CameraPose
    style: torch.Tensor


class PoseHead(nn.Module):
    """Two linear layers with a leaky ReLU between, squashed into pose spans.

    The last layer starts at zero so every input initially maps to the
    canonical pose.
    """

    def __init__(self, in_dim: int, hidden_dim: int, max_azimuth: float, max_elevation: float,
                 canonical: tuple[float, float] = (0.0, 0.0)):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = nn.LeakyReLU(0.2)
        self.fc2 = nn.Linear(hidden_dim, 2)
        nn.init.kaiming_normal_(self.fc1.weight, a=0.2, nonlinearity="leaky_relu")
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)
        # float64 so the spans are exact bounds whatever the compute dtype
        self.register_buffer("spans", torch.tensor([max_azimuth, max_elevation], dtype=torch.float64))
        self.register_buffer("canonical", torch.tensor(canonical, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> CameraPose:
        raw = self.fc2(self.act(self.fc1(x)))
        angles = self.canonical.to(raw.dtype) + torch.tanh(raw) * self.spans.to(raw.dtype)
        return CameraPose(angles[..., 0], angles[..., 1])


class PoseFreeGenerator(nn.Module):
    """Maps z to (field, pose) and renders the field from that pose.

    There is no pose argument to :meth:`generate`; the only route from a
    latent code to a camera is ``pose_learner(map_latent(z))``.
    """

    def __init__(
        self,
        intrinsics: CameraIntrinsics,
        latent_dim: int = 64,
        style_dim: int = 64,
        pose_hidden_dim: int = 64,
        max_azimuth: float = 1.2,
        max_elevation: float = 0.6,
        n_samples: int = 48,
        background: float = 1.0,
        **field_kwargs,
    ):
        super().__init__()
        self.intrinsics = intrinsics
        self.field = RadianceField(latent_dim=latent_dim, style_dim=style_dim, **field_kwargs)
        self.pose_learner = PoseHead(style_dim, pose_hidden_dim, max_azimuth, max_elevation)
        self.latent_dim = latent_dim
        self.n_samples = n_samples
        self.background = background

    def field_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("pose_learner.")]

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.field.map_latent(z)

    def render_options(self, stratified=False, generator=None) -> RenderOptions:
        return RenderOptions(self.n_samples, stratified, self.background, generator)

    def synthesize(self, w: torch.Tensor, pose: CameraPose, stratified=False, generator=None) -> RenderOutput:
        return render(self.field, w, pose, self.intrinsics, self.render_options(stratified, generator))

    def generate(self, z: torch.Tensor, stratified=False, generator=None) -> GeneratorOutput:
        w = self.map_latent(z)
        pose = self.pose_learner(w)
        return GeneratorOutput(self.synthesize(w, pose, stratified, generator), pose, w)

    def generate_at(self, z: torch.Tensor, pose: CameraPose, stratified=False, generator=None) -> RenderOutput:
        return self.synthesize(self.map_latent(z), pose, stratified, generator)

    @torch.no_grad()
    def mean_style(self, n: int = 10000, seed: int = 0, chunk: int = 2048) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        dtype = next(self.parameters()).dtype
        total = 0
        for start in range(0, n, chunk):
            z = sample_latents(min(chunk, n - start), self.latent_dim, g, dtype=dtype)
            total = total + self.map_latent(z).sum(dim=0)
        return total / n
