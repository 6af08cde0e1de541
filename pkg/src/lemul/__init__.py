"""Unsupervised single-view 3D reconstruction from multi-image collections."""

from .decomposer import Decomposer, DecomposerConfig, init_params, load_checkpoint, save_checkpoint
from .losses import LossWeights, total_loss
from .render import CameraIntrinsics, CanonicalModel, Lighting, Pose, render, warp

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CanonicalModel",
    "Decomposer",
    "DecomposerConfig",
    "Lighting",
    "LossWeights",
    "Pose",
    "init_params",
    "load_checkpoint",
    "render",
    "save_checkpoint",
    "total_loss",
    "warp",
]
