"""Adam, the epoch loop with the histogram-loss schedule, and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"LATC" | u32 version | u32 header length | header (UTF-8 canonical JSON)
    u32 tensor count, then per tensor:
        u32 name length | UTF-8 name | u32 rank | rank x u32 dims | float32 data

The header holds the model config, its hash, the epoch/step counters, the seed
and the optimizer hyperparameters.  Optimizer moments are stored as ordinary
tensors named ``adam.m.<param>`` and ``adam.v.<param>``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, TextIO

import numpy as np

from . import layers
from .data import Dataset, sample_batch
from .errors import CheckpointError, ConfigError, DivergenceError, UsageError
from .layers import ModelConfig
from .losses import HistogramConfig, LossSchedule, combined_loss_terms
from .metrics import psnr
from .tensor import Tensor, describe, find_nonfinite, no_grad

log = logging.getLogger(__name__)

MAGIC = b"LATC"
FORMAT_VERSION = 1
DEFAULT_LR = 1e-4
DEFAULT_BATCH = {2: 64, 3: 48, 4: 32}
DEFAULT_STEPS_PER_EPOCH = 100


# -- Adam ------------------------------------------------------------------------

@dataclasses.dataclass
class AdamState:
    """First/second moments per parameter name plus the shared step counter."""

    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        return cls(m, v, **hyper)

    def hyperparameters(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``.

    ``grads`` defaults to each parameter's ``.grad``.
    """
    missing = [k for k, p in params.items() if (grads[k] if grads is not None else p.grad) is None]
    if missing:
        raise UsageError(f"no gradient for parameter(s) {missing[:5]}; call backward() first")
    if set(params) != set(state.m):
        raise UsageError("optimizer state does not match the parameter set")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return state


# -- checkpoints --------------------------------------------------------------

@dataclasses.dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    adam: Optional[AdamState] = None
    epoch: int = 0
    step: int = 0
    seed: int = 0
    version: int = FORMAT_VERSION

    def tensors(self, dtype=np.float32) -> "OrderedDict[str, Tensor]":
        return layers.params_from_arrays(self.params, dtype=dtype)


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt``; tensors are stored as float32."""
    problem = layers.check_params(ckpt.params, ckpt.config)
    if problem:
        raise CheckpointError(f"parameters do not match the config: {problem}")
    header = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "adam": ckpt.adam.hyperparameters() if ckpt.adam is not None else None,
    }
    tensors = list(ckpt.params.items())
    if ckpt.adam is not None:
        tensors += [(f"adam.m.{k}", a) for k, a in ckpt.adam.m.items()]
        tensors += [(f"adam.v.{k}", a) for k, a in ckpt.adam.v.items()]
    buf = io.BytesIO()
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC + _u32(ckpt.version) + _u32(len(text)) + text + _u32(len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        raw = name.encode()
        buf.write(_u32(len(raw)) + raw + _u32(arr.ndim))
        buf.write(b"".join(_u32(d) for d in arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated while reading {what} "
                                  f"(needed {n} bytes at offset {self.pos}, file has {len(self.raw)})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint, verifying magic, version, config hash and tensor shapes.

    Nothing is returned unless the whole file validates.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    r = _Reader(raw, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode())
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("config_hash") != config.hash():
        raise CheckpointError(f"{path}: config hash mismatch (stored {header.get('config_hash')}, "
                              f"computed {config.hash()})")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise CheckpointError(f"{path}: checkpoint config {config.hash()[:12]} does not match the "
                              f"expected config {expected_config.hash()[:12]}")

    tensors: Dict[str, np.ndarray] = OrderedDict()
    count = r.u32("tensor count")
    for i in range(count):
        name = r.take(r.u32(f"name length of tensor #{i}"), f"name of tensor #{i}").decode()
        rank = r.u32(f"rank of tensor {name!r}")
        dims = tuple(r.u32(f"dims of tensor {name!r}") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * n, f"data of tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} unexpected trailing bytes")

    expected = layers.parameter_shapes(config)
    params = OrderedDict()
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        params[name] = tensors[name]

    adam = None
    if header.get("adam") is not None:
        meta = header["adam"]
        try:
            m = OrderedDict((k, tensors[f"adam.m.{k}"].copy()) for k in expected)
            v = OrderedDict((k, tensors[f"adam.v.{k}"].copy()) for k in expected)
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing optimizer tensor {exc.args[0]!r}") from None
        adam = AdamState(m, v, t=int(meta["t"]), lr=float(meta["lr"]), beta1=float(meta["beta1"]),
                         beta2=float(meta["beta2"]), eps=float(meta["eps"]))
    known = set(expected) | ({f"adam.{s}.{k}" for s in "mv" for k in expected} if adam else set())
    unknown = [k for k in tensors if k not in known]
    if unknown:
        raise CheckpointError(f"{path}: unexpected tensors {unknown[:3]}")
    return Checkpoint(config, params, adam, epoch=int(header["epoch"]), step=int(header["step"]),
                      seed=int(header["seed"]), version=version)


# -- training loop ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    loss_c: float
    loss_p: Optional[float]
    lr: float
    weight: float
    total: Optional[float] = None  # the loss value that was backpropagated

    def __post_init__(self):
        if self.total is None:
            total = self.loss_c + (self.weight * self.loss_p if self.loss_p is not None else 0.0)
            object.__setattr__(self, "total", total)

    def line(self) -> str:
        """``epoch,step,loss_c,loss_p,lr`` with exact float reprs; ``loss_p`` is 'skipped' when off."""
        lp = "skipped" if self.loss_p is None else repr(self.loss_p)
        return f"{self.epoch},{self.step},{self.loss_c!r},{lp},{self.lr!r}"


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    loss_c: float
    loss_p: Optional[float]
    val_psnr: Optional[float] = None


@dataclasses.dataclass
class FitResult:
    checkpoint: Checkpoint
    steps: List[StepRecord]
    epochs: List[EpochRecord]

    @property
    def log_lines(self) -> List[str]:
        return [s.line() for s in self.steps]


def validation_psnr(params, config: ModelConfig, ds: Dataset) -> float:
    """Mean PSNR of whole-image super-resolution over a dataset's pairs."""
    values = []
    with no_grad():
        for lr, hr in ds.pairs:
            sr = layers.latis_forward(Tensor(lr[None, None], dtype=np.float32), params, config)
            values.append(psnr(sr.data[0, 0], hr))
    return float(np.mean(values))


def _check_finite(loss: Tensor, params, step: int) -> None:
    if not math.isfinite(loss.item()):
        bad = find_nonfinite(loss)
        where = describe(bad) if bad is not None else "loss"
        raise DivergenceError(f"non-finite loss at step {step}; first non-finite tensor: {where}")
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient for parameter {name} at step {step}")


def fit(ds: Dataset, config: ModelConfig, schedule: LossSchedule = LossSchedule(), epochs: int = 200,
        steps_per_epoch: int = DEFAULT_STEPS_PER_EPOCH, seed: int = 0, batch: Optional[int] = None,
        lr: float = DEFAULT_LR, hist: HistogramConfig = HistogramConfig(),
        resume: Optional[Checkpoint] = None, val_ds: Optional[Dataset] = None,
        log_file: Optional[TextIO] = None,
        on_step: Optional[Callable[[StepRecord], None]] = None) -> FitResult:
    """Train from scratch (weights seeded by ``seed``) or continue from ``resume``.

    Global step ``t`` of the run draws its batch from ``(seed, t)``, so a resumed
    run sees exactly the batches the uninterrupted run would have seen.
    ``epochs`` counts total epochs, including those already in ``resume``.
    """
    config.validate()
    if ds.scale != config.scale:
        raise ConfigError(f"dataset scale {ds.scale} != model scale {config.scale}")
    if epochs < 0 or steps_per_epoch < 1:
        raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
    batch = DEFAULT_BATCH[config.scale] if batch is None else int(batch)

    if resume is not None:
        if resume.config.hash() != config.hash():
            raise CheckpointError("resume checkpoint was trained with a different model config")
        params = resume.tensors(np.float32)
        adam = resume.adam if resume.adam is not None else AdamState.zeros_like(params, lr=lr)
        start_epoch, step, seed = resume.epoch, resume.step, resume.seed
    else:
        params = layers.init_params(config, seed=seed, dtype=np.float32)
        adam = AdamState.zeros_like(params, lr=lr)
        start_epoch, step = 0, 0

    steps: List[StepRecord] = []
    summaries: List[EpochRecord] = []
    for epoch in range(start_epoch, epochs):
        epoch_steps = []
        for _ in range(steps_per_epoch):
            lr_img, hr_img = sample_batch(ds, batch, step, seed=seed)
            for p in params.values():
                p.zero_grad()
            sr = layers.latis_forward(lr_img, params, config)
            terms = combined_loss_terms(sr, hr_img, epoch, schedule, hist)
            terms.total.backward()
            _check_finite(terms.total, params, step)
            adam_step(params, None, adam)
            rec = StepRecord(epoch, step, float(terms.content.item()),
                             None if terms.histogram is None else float(terms.histogram.item()),
                             adam.lr, terms.weight, float(terms.total.item()))
            epoch_steps.append(rec)
            if log_file is not None:
                log_file.write(rec.line() + "\n")
                log_file.flush()
            if on_step is not None:
                on_step(rec)
            step += 1
        lp = [r.loss_p for r in epoch_steps if r.loss_p is not None]
        summary = EpochRecord(
            epoch,
            float(np.mean([r.total for r in epoch_steps])),
            float(np.mean([r.loss_c for r in epoch_steps])),
            float(np.mean(lp)) if lp else None,
            validation_psnr(params, config, val_ds) if val_ds is not None else None,
        )
        log.info("epoch %d: loss %.6f (L_C %.6f, L_P %s)%s", epoch, summary.loss, summary.loss_c,
                 "skipped" if summary.loss_p is None else f"{summary.loss_p:.6f}",
                 "" if summary.val_psnr is None else f", val PSNR {summary.val_psnr:.3f} dB")
        steps.extend(epoch_steps)
        summaries.append(summary)
        start_epoch = epoch + 1

    ckpt = Checkpoint(config, OrderedDict((k, p.data.copy()) for k, p in params.items()), adam,
                      epoch=max(start_epoch, resume.epoch if resume else 0), step=step, seed=seed)
    return FitResult(ckpt, steps, summaries)
