"""Residual attention U-Net for multi-class lung CT segmentation, on a small numpy autodiff engine."""

from .model import ModelConfig, ModelParams, forward, load_checkpoint, parameter_init, predict_mask, save_checkpoint
from .tensor import Tensor, no_grad, precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Tensor",
    "forward",
    "load_checkpoint",
    "no_grad",
    "parameter_init",
    "precision",
    "predict_mask",
    "save_checkpoint",
    "set_precision",
]
