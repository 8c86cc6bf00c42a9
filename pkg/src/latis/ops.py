"""Differentiable operators on :class:`~latis.tensor.Tensor`.

Each function computes its forward result with numpy and registers a backward
closure through :func:`~latis.tensor.make_result`.  Image tensors are laid out
as ``[batch, channels, height, width]`` and convolutions are cross-correlations.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import next_fast_len

from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "scale", "silu", "sigmoid", "relu", "abs", "square", "clamp",
    "elementwise", "softmax", "layer_norm", "conv2d", "conv3d_lambda",
    "channel_shuffle", "pixel_shuffle", "contract", "reduce", "sum_axis",
    "reshape", "transpose", "concat", "cumsum", "getitem", "count_macs",
]

# -- multiply-accumulate accounting ------------------------------------------

_macs = threading.local()


@contextlib.contextmanager
def count_macs() -> Iterator[dict]:
    """Collect multiply-accumulate counts of convolutions and contractions.

    Yields a dict keyed by op name that fills up while the block runs.
    """
    counts: dict = {}
    old = getattr(_macs, "counts", None)
    _macs.counts = counts
    try:
        yield counts
    finally:
        _macs.counts = old


def _record_macs(op: str, n: int) -> None:
    counts = getattr(_macs, "counts", None)
    if counts is not None:
        counts[op] = counts.get(op, 0) + int(n)


# -- helpers ------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input magnitude
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    xd = x.data
    return make_result(xd * s, (x,), lambda g: (g * (s + xd * s * (1 - s)),), "silu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "silu": silu, "sigmoid": sigmoid, "relu": relu, "abs": abs, "square": square,
    "add": add, "sub": sub, "mul": mul, "scale": scale,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# -- normalisation -------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5, mode: str = "per_sample") -> Tensor:
    """Normalise each sample over (C, H, W) (or over C per pixel), then scale-shift per channel."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm expects [N,C,H,W] with [C] affine, got {x.shape}, {gamma.shape}")
    if mode == "per_sample":
        axes = (1, 2, 3)
    elif mode == "per_position":
        axes = (1,)
    else:
        raise ConfigError(f"unknown layer norm mode {mode!r}")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# -- convolution -------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via an explicit patch matrix (im2col) product."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError("conv2d kernel larger than padded input")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1:
        win = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    _record_macs("conv2d", n * ho * wo * cout * cin * kh * kw)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the output gradient with the flipped, transposed kernel
                q = kh - 1
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (kw - 1, kw - 1)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, cout * kh * kw)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * kh * kw, cin)
                gxp = (gcols @ wflip).reshape(n, hp, wp, cin).transpose(0, 3, 1, 2)
            else:
                dcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, padding:padding + h, padding:padding + w])
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def conv3d_lambda(values, kernel, bias=None) -> Tensor:
    """Position-lambda convolution over (v, H, W) with a ``1 x r x r`` kernel.

    ``values`` is ``[N, u, v, H, W]`` and ``kernel`` is ``[k, u, 1, r, r]``; the result
    is ``[N, k, v, H, W]`` with (v, H, W) preserved by zero padding ``(0, r//2, r//2)``.
    Evaluated as a zero-padded FFT product in float64 so that large receptive
    fields (r = 25) stay cheap.
    """
    values, kernel = as_tensor(values), as_tensor(kernel)
    bias = as_tensor(bias) if bias is not None else None
    if values.ndim != 5 or kernel.ndim != 5:
        raise DimensionError(f"conv3d_lambda expects 5-D tensors, got {values.shape}, {kernel.shape}")
    n, u, v, h, w = values.shape
    k, ku, depth, r, r2 = kernel.shape
    if ku != u or depth != 1 or r != r2:
        raise DimensionError(f"kernel {kernel.shape} incompatible with values {values.shape}")
    if r % 2 == 0:
        raise ConfigError(f"lambda convolution size must be odd, got {r}")
    p = r // 2
    fh, fw = next_fast_len(h + r - 1, real=True), next_fast_len(w + r - 1, real=True)
    fy = fw // 2 + 1
    dtype = values.dtype

    def to_freq_major(a):  # [..., fh, fy] -> [fh * fy, prod(...)]
        return np.ascontiguousarray(a.reshape(-1, fh * fy).T)

    def from_freq_major(a, lead):  # inverse of to_freq_major
        return np.ascontiguousarray(a.T).reshape(*lead, fh, fy)

    # channel mixing is one batched matmul per frequency
    xf = np.fft.rfft2(values.data.transpose(0, 2, 1, 3, 4).astype(np.float64), s=(fh, fw))
    xf = to_freq_major(xf).reshape(fh * fy, n * v, u)
    kf = np.fft.rfft2(kernel.data[:, :, 0, ::-1, ::-1].transpose(1, 0, 2, 3).astype(np.float64), s=(fh, fw))
    kf = to_freq_major(kf).reshape(fh * fy, u, k)
    yf = from_freq_major(np.matmul(xf, kf).reshape(fh * fy, -1), (n, v, k))
    full = np.fft.irfft2(yf, s=(fh, fw))[..., p:p + h, p:p + w]
    out = np.ascontiguousarray(full.transpose(0, 2, 1, 3, 4)).astype(dtype)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    _record_macs("conv3d_lambda", n * k * v * h * w * u * r * r)

    def backward(g):
        gpad = np.zeros((n, v, k, fh, fw))
        gpad[..., p:p + h, p:p + w] = g.transpose(0, 2, 1, 3, 4)
        gf = to_freq_major(np.fft.rfft2(gpad)).reshape(fh * fy, n * v, k)
        gx = gk = gb = None
        if values.requires_grad:
            dxf = np.matmul(gf, np.conj(kf).transpose(0, 2, 1)).reshape(fh * fy, -1)
            dx = np.fft.irfft2(from_freq_major(dxf, (n, v, u)), s=(fh, fw))[..., :h, :w]
            gx = np.ascontiguousarray(dx.transpose(0, 2, 1, 3, 4)).astype(dtype)
        if kernel.requires_grad:
            dkf = np.matmul(np.conj(xf).transpose(0, 2, 1), gf).reshape(fh * fy, -1)
            dk = np.fft.irfft2(from_freq_major(dkf, (u, k)), s=(fh, fw))[..., :r, :r]
            gk = np.ascontiguousarray(dk[..., ::-1, ::-1].transpose(1, 0, 2, 3))[:, :, None].astype(dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gk, gb

    parents = (values, kernel) if bias is None else (values, kernel, bias)
    return make_result(out, parents, backward, "conv3d_lambda")


# -- permutations --------------------------------------------------------------

def channel_shuffle(x, groups: int) -> Tensor:
    """Channel ``c`` moves to ``(c mod groups) * (C / groups) + c // groups``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible by shuffle groups {groups}")

    def shuffle(a, g):
        return a.reshape(n, c // g, g, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)

    return make_result(shuffle(x.data, groups), (x,), lambda g: (shuffle(g, c // groups),),
                       "channel_shuffle")


def pixel_shuffle(x, s: int) -> Tensor:
    """``out[n, c, s*h+dy, s*w+dx] = in[n, c*s*s + dy*s + dx, h, w]``."""
    x = as_tensor(x)
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise DimensionError(f"{cs} channels not divisible by scale^2 = {s * s}")
    c = cs // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def backward(g):
        return (g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, cs, h, w),)

    return make_result(out, (x,), backward, "pixel_shuffle")


# -- contraction & reductions ---------------------------------------------------

def contract(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum, e.g. ``contract("nukm,nuvm->nkv", keys, values)``."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        lhs, out_sub = subscripts.replace(" ", "").split("->")
        a_sub, b_sub = lhs.split(",")
    except ValueError:
        raise ValueError(f"contraction descriptor must look like 'ab,bc->ac', got {subscripts!r}") from None
    for sub_, t in ((a_sub, a), (b_sub, b)):
        if len(sub_) != t.ndim or len(set(sub_)) != len(sub_):
            raise DimensionError(f"subscripts {sub_!r} do not fit operand of shape {t.shape}")
    sizes = {}
    for sub_, t in ((a_sub, a), (b_sub, b)):
        for idx, dim in zip(sub_, t.shape):
            if sizes.setdefault(idx, dim) != dim:
                raise DimensionError(f"index {idx!r} has sizes {sizes[idx]} and {dim}")
    for idx in a_sub + b_sub:
        other = b_sub if idx in a_sub else a_sub
        if idx not in out_sub and idx not in other:
            raise ValueError(f"index {idx!r} is summed within one operand only")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)
    _record_macs("contract", int(np.prod([sizes[i] for i in set(a_sub + b_sub)])))

    def backward(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "contract")


def _max_reduce(x: Tensor, axis: int, op: str) -> Tensor:
    xd = x.data
    idx = np.expand_dims(np.argmax(xd, axis=axis), axis)  # first index on ties
    out = np.take_along_axis(xd, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_result(out, (x,), backward, op)


def reduce(x, kind: str) -> Tensor:
    """Reductions used by pooling and losses.

    ``sum``/``mean`` collapse everything to a scalar; ``*_spatial`` pool over
    (H, W) to ``[N, C, 1, 1]``; ``*_channel`` pool over C to ``[N, 1, H, W]``.
    """
    x = as_tensor(x)
    if kind == "sum":
        return make_result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    if kind == "mean":
        m = x.data.size
        return make_result(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / m, dtype=x.dtype),), "mean")
    if x.ndim != 4:
        raise DimensionError(f"{kind} expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if kind == "mean_spatial":
        return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                           lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), kind)
    if kind == "mean_channel":
        return make_result(x.data.mean(axis=1, keepdims=True), (x,),
                           lambda g: (np.broadcast_to(g / c, x.shape).copy(),), kind)
    if kind == "max_channel":
        return _max_reduce(x, 1, kind)
    if kind == "max_spatial":
        flat = reshape(x, (n, c, h * w))
        return reshape(_max_reduce(flat, 2, kind), (n, c, 1, 1))
    raise ValueError(f"unknown reduction {kind!r}")


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum_axis")


def cumsum(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_result(np.cumsum(x.data, axis=axis), (x,), backward, "cumsum")


# -- shape plumbing ------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def getitem(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward, "getitem")


def param(shape, data: Optional[np.ndarray] = None, name: Optional[str] = None, dtype=None) -> Tensor:
    """Leaf tensor that requires grad."""
    arr = np.zeros(shape) if data is None else data
    return Tensor(arr, requires_grad=True, name=name, dtype=dtype)
