"""Grayscale image I/O, LR/HR pair synthesis and deterministic patch sampling."""

from __future__ import annotations

import os
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, ImageFormatError, ImageIOError
from .metrics import bicubic_resize
from .tensor import Tensor

PathLike = Union[str, os.PathLike]

IMAGE_SUFFIXES = (".pgm", ".png")
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
DEFAULT_CROP = {2: 64, 3: 96, 4: 128}
PATCH_SIZE = 8

_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def _read_pgm(raw: bytes, path) -> Tuple[np.ndarray, int]:
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ImageFormatError(f"{path}: malformed P5 header")
    w, h, maxval = (int(g) for g in m.groups())
    if not (0 < maxval < 65536) or w < 1 or h < 1:
        raise ImageFormatError(f"{path}: invalid PGM header values w={w} h={h} maxval={maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    body = raw[m.end():m.end() + need]
    if len(body) < need:
        raise ImageIOError(f"{path}: truncated PGM data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=dtype).reshape(h, w), maxval


def _read_png(raw: bytes, path) -> Tuple[np.ndarray, int]:
    if len(raw) < 29:
        raise ImageIOError(f"{path}: truncated PNG header")
    bit_depth, color_type = raw[24], raw[25]
    if color_type != 0 or bit_depth not in (8, 16):
        raise ImageFormatError(
            f"{path}: only 8/16-bit grayscale PNG without alpha is supported "
            f"(bit depth {bit_depth}, color type {color_type})")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise ImageIOError(f"{path}: could not decode PNG: {exc}") from exc
    return arr, (1 << bit_depth) - 1


def read_image(path: PathLike) -> Tuple[np.ndarray, int]:
    """Raw integer samples and maxval of a PGM (P5) or grayscale PNG file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from exc
    if raw.startswith(b"P5"):
        return _read_pgm(raw, path)
    if raw.startswith(PNG_MAGIC):
        return _read_png(raw, path)
    raise ImageFormatError(f"{path}: unsupported image format (magic bytes {raw[:8].hex(' ') or 'empty'}); "
                           "expected binary PGM 'P5' or PNG")


def load_image(path: PathLike) -> np.ndarray:
    """Load a grayscale image as float64 values in [0, 1], scaled by its own maxval."""
    arr, maxval = read_image(path)
    return arr.astype(np.float64) / maxval


def save_image(path: PathLike, img: np.ndarray, bits: int = 8) -> None:
    """Quantise an image in [0, 1] and write PGM or PNG (chosen by suffix)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        h, w = q.shape
        data = q.astype(">u2" if bits == 16 else np.uint8).tobytes()
        path.write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + data)
    elif suffix == ".png":
        Image.fromarray(q.astype(np.uint16 if bits == 16 else np.uint8)).save(path)
    else:
        raise ImageFormatError(f"{path}: output must end in .pgm or .png")


def list_images(source: PathLike) -> List[Path]:
    """Image paths from a directory (non-recursive, sorted) or a newline-separated manifest."""
    source = Path(source)
    if source.is_dir():
        return sorted(p for p in source.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if source.is_file():
        lines = [ln.strip() for ln in source.read_text().splitlines()]
        return [(source.parent / ln) if not os.path.isabs(ln) else Path(ln) for ln in lines if ln]
    raise FileNotFoundError(f"no such dataset directory or manifest: {source}")


def make_pair(hr: np.ndarray, s: int) -> Tuple[np.ndarray, np.ndarray]:
    """Crop HR to multiples of ``s`` (bottom/right) and bicubic-downscale it."""
    if s not in (2, 3, 4):
        raise ConfigError(f"unsupported scale {s}")
    hr = np.asarray(hr)
    h, w = (hr.shape[0] // s) * s, (hr.shape[1] // s) * s
    if h == 0 or w == 0:
        raise ConfigError(f"image {hr.shape} smaller than scale {s}")
    hr = hr[:h, :w]
    return bicubic_resize(hr, h // s, w // s), hr


class Dataset:
    """HR images with their bicubic LR counterparts, sampled by ``(seed, step)``.

    ``crop`` is the HR crop side (a multiple of 8 and of the scale); ``0`` uses
    whole images, which then must all share one size.
    """

    def __init__(self, images: Sequence[np.ndarray], scale: int, crop: Optional[int] = None,
                 seed: int = 0, names: Optional[Sequence[str]] = None):
        if not images:
            raise ConfigError("dataset is empty")
        if scale not in (2, 3, 4):
            raise ConfigError(f"unsupported scale {scale}")
        self.scale = scale
        self.seed = int(seed)
        self.crop = DEFAULT_CROP[scale] if crop is None else int(crop)
        self.names = list(names) if names is not None else [f"image{i}" for i in range(len(images))]
        self.pairs = []
        for img in images:
            lr, hr = make_pair(np.asarray(img, dtype=np.float32), scale)
            self.pairs.append((lr, hr))
        if self.crop:
            if self.crop % PATCH_SIZE or self.crop % scale:
                raise ConfigError(f"crop {self.crop} must be a multiple of {PATCH_SIZE} and of the scale {scale}")
            smallest = min(min(hr.shape) for _, hr in self.pairs)
            if self.crop > smallest:
                raise ConfigError(f"crop {self.crop} larger than the smallest image side {smallest}")
        elif len({hr.shape for _, hr in self.pairs}) != 1:
            raise ConfigError("whole-image batches (crop 0) need images of one size")

    @classmethod
    def from_paths(cls, paths: Sequence[PathLike], scale: int, crop: Optional[int] = None, seed: int = 0):
        paths = list(paths)
        if not paths:
            raise ConfigError("dataset is empty")
        return cls([load_image(p) for p in paths], scale, crop, seed, names=[Path(p).name for p in paths])

    @classmethod
    def from_source(cls, source: PathLike, scale: int, crop: Optional[int] = None, seed: int = 0):
        return cls.from_paths(list_images(source), scale, crop, seed)

    def __len__(self) -> int:
        return len(self.pairs)

    def window(self, step: int, batch: int, seed: Optional[int] = None):
        """Image indices and HR crop offsets ``(index, top, left)`` for one step."""
        rng = np.random.default_rng([self.seed if seed is None else int(seed), int(step)])
        picks = []
        for idx in rng.integers(0, len(self.pairs), size=batch):
            hr = self.pairs[idx][1]
            if not self.crop:
                picks.append((int(idx), 0, 0))
                continue
            s = self.scale
            top = int(rng.integers(0, (hr.shape[0] - self.crop) // s + 1)) * s
            left = int(rng.integers(0, (hr.shape[1] - self.crop) // s + 1)) * s
            picks.append((int(idx), top, left))
        return picks


def sample_batch(ds: Dataset, batch: int, step: int, seed: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """LR/HR crops for one training step; a pure function of ``(seed, step)``.

    ``seed`` defaults to the dataset's own seed.
    """
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    s = ds.scale
    lrs, hrs = [], []
    for idx, top, left in ds.window(step, batch, seed):
        lr, hr = ds.pairs[idx]
        if ds.crop:
            c = ds.crop
            hrs.append(hr[top:top + c, left:left + c])
            lrs.append(lr[top // s:(top + c) // s, left // s:(left + c) // s])
        else:
            hrs.append(hr)
            lrs.append(lr)
    lr_batch = np.stack(lrs)[:, None].astype(np.float32)
    hr_batch = np.stack(hrs)[:, None].astype(np.float32)
    return Tensor(lr_batch, dtype=np.float32), Tensor(hr_batch, dtype=np.float32)
