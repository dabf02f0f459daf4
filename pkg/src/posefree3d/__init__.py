"""Pose-free 3D-aware GAN: the generator infers its own camera from the latent
code and the discriminator learns to predict and condition on pose."""
from .camera import CameraIntrinsics, CameraPose, generate_rays, mirror_pose, warp_image
from .config import TrainConfig, load_config
from .discriminator import PoseAwareDiscriminator
from .generator import PoseFreeGenerator
from .renderer import RenderOptions, RenderOutput, render
from .trainer import Trainer, fit, load_models

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "PoseAwareDiscriminator",
    "PoseFreeGenerator",
    "RenderOptions",
    "RenderOutput",
    "TrainConfig",
    "Trainer",
    "fit",
    "generate_rays",
    "load_config",
    "load_models",
    "mirror_pose",
    "render",
    "warp_image",
]
