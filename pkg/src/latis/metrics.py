"""Bicubic resampling and PSNR / SSIM for single-channel images in [0, 1]."""

from __future__ import annotations

import functools
import math

import numpy as np
from scipy import ndimage

from .errors import DimensionError

CUBIC_A = -0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@functools.lru_cache(maxsize=256)
def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense ``[out_size, in_size]`` resampling matrix along one axis.

    Half-pixel centres, edge-clamped taps, and a support widened by the
    reduction factor when downscaling.
    """
    if in_size < 1 or out_size < 1:
        raise DimensionError("image dimensions must be >= 1")
    scale = in_size / out_size
    support_scale = max(scale, 1.0)
    radius = 2.0 * support_scale
    mat = np.zeros((out_size, in_size))
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = int(math.floor(center - radius))
        hi = int(math.ceil(center + radius))
        taps = np.arange(lo, hi + 1)
        weights = cubic_kernel((taps + 0.5 - center) / support_scale)
        weights = weights / weights.sum()
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), weights)
    mat.setflags(write=False)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize of a 2-D image; output clipped to [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DimensionError(f"bicubic_resize expects a 2-D image, got shape {img.shape}")
    dtype = img.dtype if img.dtype.kind == "f" else np.dtype(np.float64)
    h, w = img.shape
    rows, cols = resize_matrix(h, out_h), resize_matrix(w, out_w)
    out = rows @ img.astype(np.float64) @ cols.T
    return np.clip(out, 0.0, 1.0).astype(dtype)


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; ``inf`` when identical."""
    a, b = _check_pair(a, b)
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@functools.lru_cache(maxsize=1)
def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter(x: np.ndarray) -> np.ndarray:
    g = _gaussian_window()
    x = ndimage.correlate1d(x, g, axis=0, mode="reflect")
    return ndimage.correlate1d(x, g, axis=1, mode="reflect")


def ssim(a, b, shave: int = 0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and reflected borders."""
    a, b = _check_pair(a, b)
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mu_a, mu_b = _filter(a), _filter(b)
    var_a = _filter(a * a) - mu_a * mu_a
    var_b = _filter(b * b) - mu_b * mu_b
    cov = _filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
