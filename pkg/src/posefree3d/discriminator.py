"""Pose-aware discriminator: predicts a pose and scores realness conditioned on it."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraPose
from .generator import PoseHead


class CriticOutput(NamedTuple):
    score: torch.Tensor  # (B,) logits
    predicted_pose: CameraPose | None
    features: torch.Tensor  # (B, C, 4, 4)


class DownBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, in_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(in_ch, out_ch, 3, padding=1, stride=2)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=2, bias=False)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        return (y + self.skip(x)) / math.sqrt(2)


class PoseAwareDiscriminator(nn.Module):
    """Residual conv critic with a pose head and projection conditioning.

    ``pose_aware=False`` drops the pose head entirely (plain critic).
    ``pose_condition=False`` keeps the pose head but scores unconditionally.
    """

    def __init__(
        self,
        resolution: int = 64,
        base_channels: int = 32,
        max_channels: int = 128,
        pose_hidden_dim: int = 256,
        max_azimuth: float = 1.2,
        max_elevation: float = 0.6,
        pose_aware: bool = True,
        pose_condition: bool = True,
    ):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValueError("resolution must be a power of two >= 8")
        self.resolution = resolution
        self.pose_aware = pose_aware
        self.pose_condition = pose_aware and pose_condition
        n_blocks = int(math.log2(resolution)) - 2
        chans = [min(base_channels * 2 ** i, max_channels) for i in range(n_blocks + 1)]
        self.from_rgb = nn.Conv2d(3, chans[0], 1)
        self.blocks = nn.Sequential(*[DownBlock(chans[i], chans[i + 1]) for i in range(n_blocks)])
        c = chans[-1]
        self.channels = c
        self.fc = nn.Linear(c * 16, c)
        self.out = nn.Linear(c, 1)
        if pose_aware:
            self.pose_head = PoseHead(c * 16, pose_hidden_dim, max_azimuth, max_elevation)
        else:
            self.pose_head = None
        # pose embedding for projection conditioning; zero final layer
        self.embed = nn.Sequential(nn.Linear(4, c), nn.LeakyReLU(0.2), nn.Linear(c, c))
        nn.init.zeros_(self.embed[2].weight)
        nn.init.zeros_(self.embed[2].bias)

    def extract_features(self, image: torch.Tensor) -> torch.Tensor:
        if tuple(image.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(f"expected {self.resolution}x{self.resolution} images, got {tuple(image.shape[-2:])}")
        x = F.leaky_relu(self.from_rgb(image), 0.2)
        return self.blocks(x)

    def predict_pose(self, features: torch.Tensor) -> CameraPose:
        if self.pose_head is None:
            raise RuntimeError("discriminator was built without a pose head")
        return self.pose_head(features.flatten(1))

    def _pooled(self, features):
        return F.leaky_relu(self.fc(features.flatten(1)), 0.2)

    def embed_pose(self, pose: CameraPose, dtype=None) -> torch.Tensor:
        p = pose.as_tensor(dtype=dtype)
        return self.embed(torch.cat([torch.sin(p), torch.cos(p)], dim=-1))

    def score_features(self, features: torch.Tensor, condition: CameraPose | None) -> torch.Tensor:
        h = self._pooled(features)
        logit = self.out(h).squeeze(-1)
        if self.pose_condition and condition is not None:
            e = self.embed_pose(condition, dtype=h.dtype)
            logit = logit + (e * h).sum(-1) / math.sqrt(self.channels)
        return logit

    def score(self, image: torch.Tensor, condition_pose: CameraPose | None) -> torch.Tensor:
        return self.score_features(self.extract_features(image), condition_pose)

    def criticize(self, image: torch.Tensor, detach_condition: bool = False) -> CriticOutput:
        """Predict a pose from ``image`` and score the image conditioned on it."""
        feats = self.extract_features(image)
        pose = self.predict_pose(feats) if self.pose_head is not None else None
        cond = pose.detach() if (pose is not None and detach_condition) else pose
        return CriticOutput(self.score_features(feats, cond), pose, feats)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.criticize(image).score
