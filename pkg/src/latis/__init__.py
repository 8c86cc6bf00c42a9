"""LATIS: lightweight thermal image super-resolution built on a small numpy autograd engine."""

from .errors import (CheckpointError, ConfigError, DimensionError, DivergenceError, ImageFormatError,
                     ImageIOError, LatisError, UsageError)
from .layers import ModelConfig, init_params, latis_forward, model_info, parameter_shapes
from .losses import HistogramConfig, LossSchedule, combined_loss, patchwise_emd_loss, soft_histogram
from .metrics import bicubic_resize, psnr, ssim
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DimensionError", "DivergenceError", "HistogramConfig", "ImageFormatError",
    "ImageIOError", "LatisError", "LossSchedule", "ModelConfig", "Tensor", "UsageError", "bicubic_resize",
    "combined_loss", "init_params", "latis_forward", "model_info", "no_grad", "parameter_shapes",
    "patchwise_emd_loss", "precision", "psnr", "soft_histogram", "ssim", "__version__",
]
