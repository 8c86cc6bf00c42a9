"""Central-difference gradient checks for every operator and the full training loss.

Each suite entry builds random float64 inputs, reduces the op's output to a
scalar through a fixed random weighting (so every output element contributes
with a distinct coefficient), and compares the analytic gradient of every
input element with central differences.
"""

from __future__ import annotations

import dataclasses
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import layers, losses, ops
from .errors import ConfigError
from .layers import ModelConfig
from .metrics import bicubic_resize
from .tensor import Tensor, no_grad, precision

SMOOTH_TOL = 1e-6
MAX_TOL = 1e-3
EMD_TOL = 1e-4
NETWORK_TOL = 1e-3
DEFAULT_STEP = 1e-4
OP_STEP = 1e-3
OP_ORDER = 4


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, 1e-8)`` elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def finite_difference_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = DEFAULT_STEP,
                            indices: Optional[Sequence[Optional[np.ndarray]]] = None, order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor.  ``indices`` optionally restricts
    the check to the given flat element indices per input (``None`` = all).
    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error allows
    a larger step and hence less cancellation noise on small gradients.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    stencil = [(1, 0.5), (-1, -0.5)] if order == 2 else [(1, 2 / 3), (-1, -2 / 3), (2, -1 / 12), (-2, 1 / 12)]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    f(*inputs).backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        grad = np.zeros_like(t.data) if t.grad is None else t.grad
        picks = np.arange(flat.size) if indices is None or indices[i] is None else np.asarray(indices[i])
        numeric = np.empty(len(picks))
        with no_grad():
            for j, idx in enumerate(picks):
                orig = flat[idx]
                acc = 0.0
                for offset, coeff in stencil:
                    flat[idx] = orig + offset * h
                    acc += coeff * f(*inputs).item()
                flat[idx] = orig
                numeric[j] = acc / h
        if len(picks):
            worst = max(worst, float(relative_errors(grad.reshape(-1)[picks], numeric).max()))
    return worst


# -- direct-loop oracles -------------------------------------------------------

def direct_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None,
                  stride: int = 1, padding: int = 0) -> np.ndarray:
    """Nested-loop cross-correlation, the reference for the im2col path."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = (h + 2 * padding - kh) // stride + 1, (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for bi in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[bi, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[bi, o, i, j] = acc
    return out


def direct_conv3d_lambda(values: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Nested-loop ``1 x r x r`` convolution over (v, H, W) with zero padding."""
    n, u, v, h, w = values.shape
    k, _, _, r, _ = kernel.shape
    p = r // 2
    out = np.zeros((n, k, v, h, w))
    for bi in range(n):
        for o in range(k):
            for d in range(v):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0 if bias is None else float(bias[o])
                        for c in range(u):
                            for a in range(r):
                                for bb in range(r):
                                    y, x = i + a - p, j + bb - p
                                    if 0 <= y < h and 0 <= x < w:
                                        acc += values[bi, c, d, y, x] * kernel[o, c, 0, a, bb]
                        out[bi, o, d, i, j] = acc
    return out


# -- suite -----------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float
    oracle_error: Optional[float] = None

    @property
    def passed(self) -> bool:
        ok = self.error < self.threshold
        if self.oracle_error is not None:
            ok = ok and self.oracle_error < 1e-12
        return ok

    def row(self) -> str:
        oracle = "" if self.oracle_error is None else f"{self.oracle_error:.3e}"
        return (f"{self.name},{self.error:.3e},{self.threshold:.0e},{oracle},"
                f"{self.seconds:.2f},{'PASS' if self.passed else 'FAIL'}")



def _fd(f, inputs, h=None, indices=None, order=None):
    """Op checks default to the five-point stencil at a 1e-3 step."""
    return finite_difference_check(f, inputs, OP_STEP if h is None else h, indices,
                                   order=OP_ORDER if order is None else order)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.reduce(ops.mul(out, Tensor(weights)), "sum")


def _unary(op, shape=(2, 3, 4, 4), low=-2.0, high=2.0, avoid=None, h=None):
    """Check a one-input op; ``avoid`` pushes samples away from non-differentiable points."""
    def run(rng):
        x = rng.uniform(low, high, size=shape)
        if avoid is not None:
            for point in avoid:
                x = np.where(np.abs(x - point) < 0.05, x + 0.1, x)
        wt = rng.standard_normal(op(Tensor(x)).shape)
        return _fd(lambda a: _weighted(op(a), wt), [Tensor(x)], h=h), None
    return run


def _binary(op, shape_a, shape_b):
    def run(rng):
        a, b = rng.standard_normal(shape_a), rng.standard_normal(shape_b)
        wt = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        return _fd(lambda p, q: _weighted(op(p, q), wt), [Tensor(a), Tensor(b)]), None
    return run


def _check_conv2d(rng):
    errors, oracle = [], 0.0
    for stride, padding, ksize in ((1, 1, 3), (1, 3, 7), (2, 1, 3), (1, 0, 1)):
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, ksize, ksize))
        b = rng.standard_normal(4)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        oracle = max(oracle, float(np.abs(out.data - direct_conv2d(x, w, b, stride, padding)).max()))
        wt = rng.standard_normal(out.shape)
        errors.append(_fd(
            lambda p, q, r: _weighted(ops.conv2d(p, q, r, stride=stride, padding=padding), wt),
            [Tensor(x), Tensor(w), Tensor(b)]))
    return max(errors), oracle


def _check_conv3d(rng):
    x = rng.standard_normal((2, 2, 3, 5, 6))
    kern = rng.standard_normal((3, 2, 1, 5, 5))
    b = rng.standard_normal(3)
    out = ops.conv3d_lambda(Tensor(x), Tensor(kern), Tensor(b))
    oracle = float(np.abs(out.data - direct_conv3d_lambda(x, kern, b)).max())
    wt = rng.standard_normal(out.shape)
    err = _fd(lambda p, q, r: _weighted(ops.conv3d_lambda(p, q, r), wt),
                                  [Tensor(x), Tensor(kern), Tensor(b)])
    return err, oracle


def _check_layer_norm(mode):
    def run(rng):
        x = rng.standard_normal((2, 4, 3, 3))
        g, b = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
        wt = rng.standard_normal(x.shape)
        return _fd(lambda p, q, r: _weighted(ops.layer_norm(p, q, r, mode=mode), wt),
                                       [Tensor(x), Tensor(g), Tensor(b)]), None
    return run


def _check_concat(rng):
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))
    wt = rng.standard_normal((2, 5, 4, 4))
    return _fd(lambda p, q: _weighted(ops.concat([p, q], axis=1), wt),
                                   [Tensor(a), Tensor(b)]), None


def _check_histogram(rng):
    cfg = losses.HistogramConfig(bins=16)
    # keep samples a full bandwidth away from bin edges, where the response is steep
    q = rng.integers(0, 16, size=(3, 64))
    x = (q + rng.uniform(0.2, 0.8, size=q.shape)) / 16
    wt = rng.standard_normal((3, 16))
    return _fd(lambda p: _weighted(losses.soft_histogram(p, cfg), wt),
                                   [Tensor(x)], h=1e-6), None


def _check_emd(rng):
    sr = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
    hr = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
    # h = 1e-6: the half-bin sigmoid bandwidth makes the loss sharply curved,
    # so a 1e-4 step leaves a truncation error of the same order as the tolerance.
    return _fd(lambda p: losses.patchwise_emd_loss(p, Tensor(hr)), [Tensor(sr)], h=1e-6), None


def _check_l1(rng):
    sr, hr = rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))
    return _fd(lambda p: losses.l1_content_loss(p, Tensor(hr)), [Tensor(sr)]), None


def small_config(**changes) -> ModelConfig:
    """A miniature architecture that exercises every block, for exhaustive checks."""
    base = dict(channels=8, num_lgfb=1, shuffle_groups=2, qk_depth=4, value_depth=4, heads=2, kv_heads=2,
                lambda_conv_r=5, cbam_reduction=4, scale=2)
    base.update(changes)
    return ModelConfig(**base)


def _check_block(block):
    def run(rng):
        cfg = small_config()
        params = layers.init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        for name, p in params.items():
            if name.endswith(".bias") or name.endswith("norm.weight"):
                p.data += 0.1 * rng.standard_normal(p.shape)
        prefix = "lgfb0."
        names = [n for n in params if n.startswith(prefix + block + ".") or (block == "lgfb" and n.startswith(prefix))]
        x = rng.standard_normal((1, cfg.channels, 5, 6))
        fwd = {"csconv": layers.csconv_forward, "gfe": layers.gfe_forward,
               "cbam": layers.cbam_forward, "lgfb": layers.lgfb_forward}[block]
        wt = rng.standard_normal(x.shape)

        def f(xx, *ps):
            local = dict(params)
            local.update(zip(names, ps))
            return _weighted(fwd(xx, local, cfg, prefix), wt)
        # max pooling inside CBAM switches under large steps: use the plain stencil there
        step, order = (DEFAULT_STEP, 2) if block in ("cbam", "lgfb") else (None, None)
        return _fd(f, [Tensor(x)] + [params[n] for n in names], h=step, order=order), None
    return run


def _network_loss(cfg: ModelConfig, params, lr: np.ndarray, hr: np.ndarray, epoch: int = 0):
    names = list(params)

    def f(*ps):
        local = dict(zip(names, ps))
        sr = layers.latis_forward(Tensor(lr), local, cfg)
        return losses.combined_loss(sr, Tensor(hr), epoch)
    return f, [params[n] for n in names]


def _check_network(cfg: ModelConfig, per_tensor: Optional[int]):
    def run(rng):
        params = layers.init_params(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data += 0.05 * rng.standard_normal(p.shape)
        hr = rng.uniform(0.1, 0.9, size=(1, 1, 8 * cfg.scale, 8 * cfg.scale))
        lr = bicubic_resize(hr[0, 0], 8, 8)[None, None]
        f, inputs = _network_loss(cfg, params, lr, hr)
        indices = None
        if per_tensor is not None:
            indices = [rng.choice(t.size, size=min(per_tensor, t.size), replace=False) for t in inputs]
        return _fd(f, inputs, h=DEFAULT_STEP, indices=indices, order=2), None
    return run


def _suite() -> Dict[str, tuple]:
    return {
        "add": (_binary(ops.add, (2, 3, 4), (3, 4)), SMOOTH_TOL),
        "sub": (_binary(ops.sub, (2, 3, 4), (2, 1, 4)), SMOOTH_TOL),
        "mul": (_binary(ops.mul, (2, 3, 4), (1, 3, 1)), SMOOTH_TOL),
        "scale": (_unary(lambda x: ops.scale(x, 0.37)), SMOOTH_TOL),
        "sigmoid": (_unary(ops.sigmoid), SMOOTH_TOL),
        "silu": (_unary(ops.silu), SMOOTH_TOL),
        "relu": (_unary(ops.relu, avoid=(0.0,)), SMOOTH_TOL),
        "abs": (_unary(ops.abs, avoid=(0.0,)), SMOOTH_TOL),
        "square": (_unary(ops.square), SMOOTH_TOL),
        "clamp": (_unary(lambda x: ops.clamp(x, -1.0, 1.0), avoid=(-1.0, 1.0)), SMOOTH_TOL),
        "softmax": (_unary(lambda x: ops.softmax(x, axis=-1)), SMOOTH_TOL),
        "layer_norm": (_check_layer_norm("per_sample"), SMOOTH_TOL),
        "layer_norm_per_position": (_check_layer_norm("per_position"), SMOOTH_TOL),
        "conv2d": (_check_conv2d, SMOOTH_TOL),
        "conv3d_lambda": (_check_conv3d, SMOOTH_TOL),
        "channel_shuffle": (_unary(lambda x: ops.channel_shuffle(x, 2), shape=(2, 4, 3, 3)), SMOOTH_TOL),
        "pixel_shuffle": (_unary(lambda x: ops.pixel_shuffle(x, 2), shape=(2, 8, 3, 3)), SMOOTH_TOL),
        "contract": (_binary(lambda a, b: ops.contract("nhkm,nkv->nhvm", a, b), (2, 3, 4, 5), (2, 4, 3)),
                     SMOOTH_TOL),
        "sum": (_unary(lambda x: ops.reduce(x, "sum")), SMOOTH_TOL),
        "mean": (_unary(lambda x: ops.reduce(x, "mean")), SMOOTH_TOL),
        "mean_spatial": (_unary(lambda x: ops.reduce(x, "mean_spatial")), SMOOTH_TOL),
        "mean_channel": (_unary(lambda x: ops.reduce(x, "mean_channel")), SMOOTH_TOL),
        "max_channel": (_unary(lambda x: ops.reduce(x, "max_channel")), MAX_TOL),
        "max_spatial": (_unary(lambda x: ops.reduce(x, "max_spatial")), MAX_TOL),
        "sum_axis": (_unary(lambda x: ops.sum_axis(x, 1)), SMOOTH_TOL),
        "cumsum": (_unary(lambda x: ops.cumsum(x, axis=-1)), SMOOTH_TOL),
        "reshape": (_unary(lambda x: ops.reshape(x, (6, 16))), SMOOTH_TOL),
        "transpose": (_unary(lambda x: ops.transpose(x, (0, 2, 3, 1))), SMOOTH_TOL),
        "concat": (_check_concat, SMOOTH_TOL),
        "getitem": (_unary(lambda x: ops.getitem(x, (slice(None), slice(1, 3), slice(0, 3)))), SMOOTH_TOL),
        "soft_histogram": (_check_histogram, SMOOTH_TOL),
        "l1": (_check_l1, SMOOTH_TOL),
        "emd": (_check_emd, EMD_TOL),
        "csconv": (_check_block("csconv"), SMOOTH_TOL),
        "gfe": (_check_block("gfe"), SMOOTH_TOL),
        "cbam": (_check_block("cbam"), MAX_TOL),
        "lgfb": (_check_block("lgfb"), MAX_TOL),
        "network_small": (_check_network(small_config(), None), NETWORK_TOL),
        "network": (_check_network(ModelConfig(), 3), NETWORK_TOL),
    }


OPS = tuple(_suite())


def run_suite(only: Optional[Sequence[str]] = None, seed: int = 0,
              on_result: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    """Run (a subset of) the gradient checks in float64 and return one result per op."""
    suite = _suite()
    names = list(suite) if not only else list(only)
    unknown = [n for n in names if n not in suite]
    if unknown:
        raise ConfigError(f"unknown gradcheck op(s) {unknown}; choose from {', '.join(suite)}")
    results = []
    with precision(np.float64):
        for i, name in enumerate(names):
            fn, tol = suite[name]
            rng = np.random.default_rng([seed, list(suite).index(name)])
            start = time.perf_counter()
            err, oracle = fn(rng)
            res = CheckResult(name, err, tol, time.perf_counter() - start, oracle)
            results.append(res)
            if on_result is not None:
                on_result(res)
    return results
