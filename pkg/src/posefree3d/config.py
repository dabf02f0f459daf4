"""Training configuration and its ``key = value`` file format.

Config files are INI-style: sections group keys for readability, but every
key names exactly one :class:`TrainConfig` field and section names carry no
meaning. Unknown keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from .camera import CameraIntrinsics


@dataclass
class TrainConfig:
    # optimisation
    lr_generator: float = 2.5e-3
    lr_pose_learner: float = 2.5e-5
    lr_discriminator: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    # per-tensor rate lr / sqrt(fan_in) for weights: Adam-equivalent of equalized-lr layers
    equalized_lr: bool = True
    equalized_pose_lr: bool = False
    mapping_lr_multiplier: float = 0.01
    penalty_weight: float = 1.0
    pose_weight: float = 2.0
    r1_interval: int = 16
    batch_size: int = 8
    total_images: int = 400_000
    ema_halflife_images: float = 10_000.0
    ema_rampup: float = 0.05
    seed: int = 0
    # resolutions and rendering
    resolution: int = 64
    n_samples: int = 48
    stratified: bool = True
    background: float = 1.0
    # camera
    fov_degrees: float = 30.0
    near: float = 2.25
    far: float = 3.3
    orbit_radius: float = 2.7
    max_azimuth: float = 1.2
    max_elevation: float = 0.6
    # generator
    latent_dim: int = 64
    style_dim: int = 64
    mapping_layers: int = 3
    backbone: str = "mlp"
    field_hidden: int = 64
    field_layers: int = 4
    n_bands: int = 6
    view_dependent: bool = False
    density_scale: float = 10.0
    triplane_channels: int = 16
    triplane_res: int = 32
    pose_hidden: int = 64
    # discriminator
    d_base_channels: int = 32
    d_max_channels: int = 128
    d_pose_hidden: int = 256
    # switches
    symmetry_enabled: bool = True
    pose_aware_d_enabled: bool = True
    pose_condition_enabled: bool = True
    symmetric_pose_loss: bool = True
    saturating_g: bool = False
    flip_augmentation: bool = False
    # schedule
    eval_every: int = 500
    checkpoint_every: int = 500
    log_every: int = 10
    eval_latents: int = 2000
    eval_real_images: int = 2000
    eval_reprojection_latents: int = 8
    eval_depth_images: int = 0
    hist_bins: int = 60

    def validate(self) -> "TrainConfig":
        for name in ("lr_generator", "lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_pose_learner < 0:
            raise ValueError("lr_pose_learner must be non-negative")
        if self.lr_pose_learner > self.lr_generator:
            warnings.warn("lr_pose_learner exceeds lr_generator; large pose rates tend to diverge", stacklevel=2)
        if self.flip_augmentation:
            raise ValueError("horizontal-flip augmentation is not allowed: it corrupts the pose distribution")
        if self.batch_size < 1 or self.total_images < 1 or self.r1_interval < 1:
            raise ValueError("batch_size, total_images and r1_interval must be positive")
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of two >= 8")
        if self.backbone not in ("mlp", "triplane"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if not (0 < self.max_azimuth <= math.pi and 0 < self.max_elevation < math.pi / 2):
            raise ValueError("pose spans out of range")
        self.intrinsics()
        return self

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(math.radians(self.fov_degrees), self.resolution, self.near, self.far, self.orbit_radius)

    @property
    def total_steps(self) -> int:
        return max(1, self.total_images // self.batch_size)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


SECTIONS = {
    "optim": ["lr_generator", "lr_pose_learner", "lr_discriminator", "adam_beta1", "adam_beta2", "equalized_lr",
              "equalized_pose_lr", "mapping_lr_multiplier", "penalty_weight",
              "pose_weight", "r1_interval", "batch_size", "total_images", "ema_halflife_images", "ema_rampup", "seed"],
    "render": ["resolution", "n_samples", "stratified", "background"],
    "camera": ["fov_degrees", "near", "far", "orbit_radius", "max_azimuth", "max_elevation"],
    "generator": ["latent_dim", "style_dim", "mapping_layers", "backbone", "field_hidden", "field_layers", "n_bands",
                  "view_dependent", "density_scale", "triplane_channels", "triplane_res", "pose_hidden"],
    "discriminator": ["d_base_channels", "d_max_channels", "d_pose_hidden"],
    "switches": ["symmetry_enabled", "pose_aware_d_enabled", "pose_condition_enabled", "symmetric_pose_loss",
                 "saturating_g", "flip_augmentation"],
    "schedule": ["eval_every", "checkpoint_every", "log_every", "eval_latents", "eval_real_images",
                 "eval_reprojection_latents", "eval_depth_images", "hist_bins"],
}

_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    if kind in ("bool", bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if kind in ("int", int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if kind in ("float", float):
        return float(text)
    return text


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(path)
    values = {}
    for section in parser.sections():
        for key, text in parser.items(section):
            values[key] = parse_value(key, text)
    for key, val in (overrides or {}).items():
        values[key] = parse_value(key, val) if isinstance(val, str) else val
    return TrainConfig.from_dict(values).validate()


def save_config(config: TrainConfig, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    d = config.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: str(d[k]) for k in keys}
    with open(path, "w") as f:
        parser.write(f)


assert {k for ks in SECTIONS.values() for k in ks} == set(_TYPES), "every config field needs a section"

SHIPPED = Path(__file__).parent / "configs"
