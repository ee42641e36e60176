"""Dual-decoder shifted-window transformer segmentation toolkit."""

from .config import DataConfig, ModelConfig, TrainConfig, load_config, validate_shapes
from .model import DualPrediction, DualSwinUnet, load_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "ModelConfig",
    "TrainConfig",
    "load_config",
    "validate_shapes",
    "DualPrediction",
    "DualSwinUnet",
    "load_model",
    "save_checkpoint",
    "__version__",
]
