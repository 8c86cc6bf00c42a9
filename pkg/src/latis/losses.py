"""Content loss, differentiable patch histograms and the patch-wise EMD loss."""

from __future__ import annotations

import dataclasses
from typing import NamedTuple, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, make_result


@dataclasses.dataclass(frozen=True)
class HistogramConfig:
    """256 uniform bins on [0, 1]; ``bandwidth`` defaults to half a bin."""

    bins: int = 256
    bandwidth: Optional[float] = None
    patch_size: int = 8

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("need at least two histogram bins")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("histogram bandwidth must be positive")

    @property
    def bin_length(self) -> float:
        return 1.0 / self.bins

    @property
    def width(self) -> float:
        return self.bin_length / 2 if self.bandwidth is None else float(self.bandwidth)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.bins) + 0.5) * self.bin_length


@dataclasses.dataclass(frozen=True)
class LossSchedule:
    lambda_p: float = 0.125
    cutoff_epochs: int = 5

    def __post_init__(self):
        if self.lambda_p < 0 or self.cutoff_epochs < 0:
            raise ConfigError("lambda_p and cutoff_epochs must be non-negative")

    def weight(self, epoch: int) -> float:
        """Histogram-loss weight for a 0-based epoch index."""
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        return self.lambda_p if epoch < self.cutoff_epochs else 0.0


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _edge_responses(y: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    """Sigmoid step at each of the ``bins + 1`` bin edges, shape ``y.shape + (bins + 1,)``.

    Bin k responds with ``E[k] - E[k+1]``.  The outer edges are pinned to 1 and 0,
    which leaves the first and last bins open-ended: the responses of all bins
    sum to exactly one for any input value.
    """
    y = np.asarray(y)
    edges = (np.arange(cfg.bins + 1) * cfg.bin_length).astype(y.dtype)
    resp = _sig((y[..., None] - edges) / y.dtype.type(cfg.width))
    resp[..., 0] = 1.0
    resp[..., -1] = 0.0
    return resp


def bin_kernel(y: np.ndarray, cfg: HistogramConfig) -> np.ndarray:
    """Smoothed rectangle response of every bin, shape ``y.shape + (bins,)``."""
    resp = _edge_responses(np.asarray(y, dtype=np.float64), cfg)
    return resp[..., :-1] - resp[..., 1:]


def soft_histogram(patches, cfg: HistogramConfig = HistogramConfig()) -> Tensor:
    """Normalised differentiable histogram over the last axis.

    ``patches`` is ``[..., P]`` (P pixels per patch, values in [0, 1]);
    the result is ``[..., bins]``.
    """
    patches = as_tensor(patches)
    y = patches.data
    npix = y.shape[-1]
    resp = _edge_responses(y, cfg)
    hist = resp[..., :-1].mean(axis=-2) - resp[..., 1:].mean(axis=-2)

    def backward(g):
        slope = resp * (1 - resp)
        slope[..., 0] = 0.0
        slope[..., -1] = 0.0
        # d hist[k] / d y = (slope[k] - slope[k+1]) / (w P)
        coeff = np.zeros(g.shape[:-1] + (g.shape[-1] + 1,), dtype=g.dtype)
        coeff[..., :-1] += g
        coeff[..., 1:] -= g
        gy = np.einsum("...xj,...j->...x", slope, coeff) / (cfg.width * npix)
        return (gy.astype(y.dtype),)

    return make_result(hist.astype(y.dtype), (patches,), backward, "soft_histogram")


def hard_histogram(patch: np.ndarray, bins: int = 256) -> np.ndarray:
    """Integer-count histogram of values in [0, 1], normalised to sum 1."""
    patch = np.asarray(patch, dtype=np.float64).reshape(-1)
    idx = np.clip(np.floor(patch * bins).astype(int), 0, bins - 1)
    return np.bincount(idx, minlength=bins) / patch.size


def l1_content_loss(sr, hr) -> Tensor:
    """Mean absolute difference."""
    sr, hr = as_tensor(sr), as_tensor(hr)
    if sr.shape != hr.shape:
        raise DimensionError(f"SR shape {sr.shape} != HR shape {hr.shape}")
    return ops.reduce(ops.abs(ops.sub(sr, hr)), "mean")


def extract_patches(img, patch_size: int) -> Tensor:
    """``[N, 1, H, W]`` -> ``[N * H/p * W/p, p*p]`` after cropping the bottom/right remainder."""
    img = as_tensor(img)
    if img.ndim != 4 or img.shape[1] != 1:
        raise DimensionError(f"expected [N, 1, H, W], got {img.shape}")
    n, _, h, w = img.shape
    ph, pw = h // patch_size, w // patch_size
    if ph == 0 or pw == 0:
        raise DimensionError(f"image {h}x{w} smaller than patch size {patch_size}")
    if (ph * patch_size, pw * patch_size) != (h, w):
        img = ops.getitem(img, (slice(None), slice(None), slice(0, ph * patch_size), slice(0, pw * patch_size)))
    x = ops.reshape(img, (n, ph, patch_size, pw, patch_size))
    x = ops.transpose(x, (0, 1, 3, 2, 4))
    return ops.reshape(x, (n * ph * pw, patch_size * patch_size))


def patchwise_emd_loss(sr, hr, cfg: HistogramConfig = HistogramConfig()) -> Tensor:
    """Squared distance between per-patch cumulative soft histograms, per image pixel.

    Summed over patches and bins, divided by the pixel count of one image and
    averaged over the batch.
    """
    sr, hr = as_tensor(sr), as_tensor(hr)
    if sr.shape != hr.shape:
        raise DimensionError(f"SR shape {sr.shape} != HR shape {hr.shape}")
    n, _, h, w = sr.shape
    p = cfg.patch_size
    pixels = (h // p) * p * (w // p) * p
    cdfs = []
    for img in (sr, hr):
        patches = ops.clamp(extract_patches(img, p), 0.0, 1.0)
        cdfs.append(ops.cumsum(soft_histogram(patches, cfg), axis=-1))
    diff = ops.sub(cdfs[0], cdfs[1])
    return ops.scale(ops.reduce(ops.square(diff), "sum"), 1.0 / (n * pixels))


class LossTerms(NamedTuple):
    total: Tensor
    content: Tensor
    histogram: Optional[Tensor]
    weight: float


def combined_loss_terms(sr, hr, epoch: int, schedule: LossSchedule = LossSchedule(),
                        cfg: HistogramConfig = HistogramConfig()) -> LossTerms:
    content = l1_content_loss(sr, hr)
    weight = schedule.weight(epoch)
    if weight == 0.0:
        return LossTerms(content, content, None, 0.0)
    hist = patchwise_emd_loss(sr, hr, cfg)
    return LossTerms(ops.add(content, ops.scale(hist, weight)), content, hist, weight)


def combined_loss(sr, hr, epoch: int, schedule: LossSchedule = LossSchedule(),
                  cfg: HistogramConfig = HistogramConfig()) -> Tensor:
    """Content loss plus the epoch-gated histogram term; the latter is skipped once its weight is 0."""
    return combined_loss_terms(sr, hr, epoch, schedule, cfg).total
