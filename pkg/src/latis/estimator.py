"""scikit-learn style wrapper: ``fit`` on HR images, ``predict`` super-resolves LR images."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import layers
from .data import DEFAULT_CROP, Dataset
from .errors import DimensionError
from .layers import ModelConfig
from .losses import LossSchedule
from .metrics import psnr
from .tensor import Tensor, no_grad
from .training import DEFAULT_LR, Checkpoint, fit, load_checkpoint
from .validation import check_image, check_images


class LATISRegressor(BaseEstimator):
    """Single-image super-resolution model with estimator semantics.

    ``fit(X)`` trains on high-resolution images (LR inputs are synthesised by
    bicubic downscaling); ``predict(X)`` maps low-resolution images to
    ``scale``-times larger ones; ``score(X, y)`` is the mean PSNR in dB.
    """

    def __init__(self, scale: int = 2, channels: int = 32, num_lgfb: int = 3,
                 use_channel_shuffle: bool = True, use_cbam: bool = True, use_layer_norm: bool = True,
                 use_bicubic_residual: bool = True, use_emd: bool = True, lambda_p: float = 0.125,
                 emd_epochs: int = 5, epochs: int = 200, steps_per_epoch: int = 100,
                 batch_size: Optional[int] = None, crop: Optional[int] = None,
                 learning_rate: float = DEFAULT_LR, random_state: int = 0):
        self.scale = scale
        self.channels = channels
        self.num_lgfb = num_lgfb
        self.use_channel_shuffle = use_channel_shuffle
        self.use_cbam = use_cbam
        self.use_layer_norm = use_layer_norm
        self.use_bicubic_residual = use_bicubic_residual
        self.use_emd = use_emd
        self.lambda_p = lambda_p
        self.emd_epochs = emd_epochs
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.crop = crop
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        c = self.channels
        return ModelConfig(channels=c, num_lgfb=self.num_lgfb, heads=4, value_depth=c // 4, scale=self.scale,
                           use_channel_shuffle=self.use_channel_shuffle, use_cbam=self.use_cbam,
                           use_layer_norm=self.use_layer_norm, use_bicubic_residual=self.use_bicubic_residual)

    def _schedule(self) -> LossSchedule:
        return LossSchedule(self.lambda_p if self.use_emd else 0.0, self.emd_epochs)

    def fit(self, X, y=None):
        """Train on HR images ``X``; ``y`` is ignored (targets are the images themselves)."""
        images = check_images(X, "X", min_size=self.scale)
        config = self._model_config()
        crop = self.crop
        if crop is None:
            smallest = min(min(img.shape) for img in images)
            crop = DEFAULT_CROP[self.scale] if smallest >= DEFAULT_CROP[self.scale] else 0
        ds = Dataset(images, self.scale, crop=crop, seed=self.random_state)
        result = fit(ds, config, self._schedule(), epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
                     seed=self.random_state, batch=self.batch_size, lr=self.learning_rate)
        self._set_fitted(result.checkpoint)
        self.history_ = result.epochs
        self.loss_log_ = result.log_lines
        return self

    def _set_fitted(self, ckpt: Checkpoint) -> None:
        self.checkpoint_ = ckpt
        self.config_ = ckpt.config
        self.params_ = ckpt.tensors(np.float32)
        self.n_parameters_ = layers.count_parameters(self.params_)

    @classmethod
    def from_checkpoint(cls, path) -> "LATISRegressor":
        """Fitted estimator restored from a checkpoint file."""
        ckpt = load_checkpoint(path)
        cfg = ckpt.config
        est = cls(scale=cfg.scale, channels=cfg.channels, num_lgfb=cfg.num_lgfb,
                  use_channel_shuffle=cfg.use_channel_shuffle, use_cbam=cfg.use_cbam,
                  use_layer_norm=cfg.use_layer_norm, use_bicubic_residual=cfg.use_bicubic_residual,
                  random_state=ckpt.seed)
        est._set_fitted(ckpt)
        return est

    def predict_one(self, lr) -> np.ndarray:
        check_is_fitted(self, "params_")
        lr = check_image(lr, "LR image")
        with no_grad():
            sr = layers.latis_forward(Tensor(lr[None, None], dtype=np.float32), self.params_, self.config_)
        return np.clip(sr.data[0, 0].astype(np.float64), 0.0, 1.0)

    def predict(self, X) -> List[np.ndarray]:
        """Super-resolve each LR image; returns a list (images may differ in size)."""
        check_is_fitted(self, "params_")
        return [self.predict_one(img) for img in check_images(X, "X")]

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of ``predict(X)`` against the HR images ``y``."""
        preds = self.predict(X)
        targets = check_images(y, "y")
        if len(preds) != len(targets):
            raise ValueError(f"X has {len(preds)} images but y has {len(targets)}")
        values = []
        for i, (p, t) in enumerate(zip(preds, targets)):
            if p.shape != t.shape:
                raise DimensionError(f"prediction {i} has shape {p.shape}, target has {t.shape}")
            values.append(psnr(p, t))
        return float(np.mean(values))
