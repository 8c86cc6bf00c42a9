"""Exception types raised across the package."""


class LatisError(Exception):
    """Base class for all package errors."""


class ConfigError(LatisError, ValueError):
    """Invalid hyperparameter or dataset configuration."""


class DimensionError(LatisError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class UsageError(LatisError, RuntimeError):
    """An API was called in a state where it is not allowed."""


class ImageFormatError(LatisError, ValueError):
    """The file is not a supported grayscale PGM/PNG image."""


class ImageIOError(LatisError, OSError):
    """The image file exists but could not be read completely."""


class CheckpointError(LatisError, ValueError):
    """A checkpoint file is corrupt, truncated or does not match."""


class DivergenceError(LatisError, FloatingPointError):
    """Training produced a non-finite value."""
