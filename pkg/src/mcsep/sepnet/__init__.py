"""Separation networks and their training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, full_scale
from .models import CascadeRefiner, FreqTCN, MaskEstimator, TasNet, build_model, cascaded_separate
from .train import grad_check, make_optimizer, set_determinism, train_step

__all__ = [
    "CascadeRefiner",
    "FreqTCN",
    "MaskEstimator",
    "ModelConfig",
    "TasNet",
    "build_model",
    "cascaded_separate",
    "grad_check",
    "load_checkpoint",
    "make_optimizer",
    "full_scale",
    "save_checkpoint",
    "set_determinism",
    "train_step",
]
