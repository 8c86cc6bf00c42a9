"""Input validation for user-supplied images and image collections."""

from __future__ import annotations

from typing import List, Sequence, Union

import numpy as np

from .errors import DimensionError

ImageLike = Union[np.ndarray, Sequence[Sequence[float]]]


def check_image(img: ImageLike, name: str = "image", min_size: int = 1) -> np.ndarray:
    """Return ``img`` as a finite 2-D float array with values in [0, 1].

    A trailing or leading singleton channel axis is dropped.
    """
    arr = np.asarray(img)
    if arr.dtype.kind not in "fiub":
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 3 and 1 in (arr.shape[0], arr.shape[-1]):
        arr = arr.reshape(arr.shape[1:] if arr.shape[0] == 1 else arr.shape[:-1])
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a single-channel 2-D image, got shape {arr.shape}")
    if min(arr.shape) < min_size:
        raise DimensionError(f"{name} must be at least {min_size}x{min_size}, got {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1] (got range [{arr.min():.4g}, {arr.max():.4g}])")
    return arr


def check_images(images, name: str = "X", min_size: int = 1) -> List[np.ndarray]:
    """Validate a collection of images: a list of 2-D arrays or an ``[N, H, W]`` / ``[N, 1, H, W]`` array."""
    if isinstance(images, np.ndarray):
        if images.ndim == 2:
            raise DimensionError(f"{name} must be a collection of images; wrap a single image in a list")
        if images.ndim == 4:
            if images.shape[1] != 1:
                raise DimensionError(f"{name} must be single-channel, got shape {images.shape}")
            images = images[:, 0]
        elif images.ndim != 3:
            raise DimensionError(f"{name} must be [N, H, W] or [N, 1, H, W], got shape {images.shape}")
    out = [check_image(img, f"{name}[{i}]", min_size) for i, img in enumerate(images)]
    if not out:
        raise ValueError(f"{name} is empty")
    return out
