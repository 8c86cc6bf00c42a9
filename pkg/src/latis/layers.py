"""LATIS network: CSConv, lambda-based global feature extraction, CBAM, reconstruction.

The model is functional: :func:`init_params` builds an ordered name -> Tensor map
and the ``*_forward`` functions read their weights from it by prefix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .metrics import bicubic_resize
from .tensor import Tensor, as_tensor, get_default_dtype

Parameters = "OrderedDict[str, Tensor]"

INFO_HEIGHT, INFO_WIDTH = 80, 64


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    num_lgfb: int = 3
    csconv_kernels: Tuple[int, int] = (3, 7)
    shuffle_groups: int = 4
    qk_depth: int = 16
    value_depth: int = 8
    heads: int = 4
    kv_heads: int = 4
    lambda_conv_r: int = 25
    scale: int = 2
    cbam_reduction: int = 8
    cbam_spatial_kernel: int = 7
    use_channel_shuffle: bool = True
    use_cbam: bool = True
    use_layer_norm: bool = True
    use_bicubic_residual: bool = True
    layer_norm_mode: str = "per_sample"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "csconv_kernels", tuple(int(k) for k in self.csconv_kernels))
        self.validate()

    def validate(self) -> None:
        c = self.channels
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"unsupported scale {self.scale}; expected 2, 3 or 4")
        if c < 2 or c % 2:
            raise ConfigError(f"channels must be even (CSConv halves them), got {c}")
        if self.heads * self.value_depth != c:
            raise ConfigError(f"heads * value_depth = {self.heads * self.value_depth} must equal channels {c}")
        if self.shuffle_groups < 1 or c % self.shuffle_groups:
            raise ConfigError(f"channels {c} not divisible by shuffle_groups {self.shuffle_groups}")
        if self.lambda_conv_r < 1 or self.lambda_conv_r % 2 == 0:
            raise ConfigError(f"lambda_conv_r must be odd, got {self.lambda_conv_r}")
        for k in (*self.csconv_kernels, self.cbam_spatial_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")
        if len(self.csconv_kernels) != 2:
            raise ConfigError("csconv_kernels needs exactly two sizes")
        if self.cbam_reduction < 1 or c % self.cbam_reduction:
            raise ConfigError(f"cbam_reduction {self.cbam_reduction} must divide channels {c}")
        if min(self.num_lgfb, self.qk_depth, self.value_depth, self.heads, self.kv_heads) < 1:
            raise ConfigError("num_lgfb, depths and head counts must be positive")
        if self.layer_norm_mode not in ("per_sample", "per_position"):
            raise ConfigError(f"unknown layer_norm_mode {self.layer_norm_mode!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["csconv_kernels"] = list(self.csconv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def upsample_stages(self) -> Tuple[int, ...]:
        return (2, 2) if self.scale == 4 else (self.scale,)


# -- parameters ---------------------------------------------------------------

def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Ordered name -> shape map; the order defines init, save and update order."""
    c, half = config.channels, config.channels // 2
    k1, k2 = config.csconv_kernels
    k, v, h, u, r = config.qk_depth, config.value_depth, config.heads, config.kv_heads, config.lambda_conv_r
    hidden = c // config.cbam_reduction
    ks = config.cbam_spatial_kernel

    shapes = OrderedDict()
    shapes["shallow.weight"] = (c, 1, 3, 3)
    shapes["shallow.bias"] = (c,)
    for i in range(config.num_lgfb):
        p = f"lgfb{i}."
        shapes[p + "csconv.conv1.weight"] = (half, c, k1, k1)
        shapes[p + "csconv.conv1.bias"] = (half,)
        shapes[p + "csconv.conv2.weight"] = (half, half, k2, k2)
        shapes[p + "csconv.conv2.bias"] = (half,)
        if config.use_layer_norm:
            shapes[p + "gfe.norm.weight"] = (c,)
            shapes[p + "gfe.norm.bias"] = (c,)
        shapes[p + "gfe.to_q.weight"] = (k * h, c, 1, 1)
        shapes[p + "gfe.to_k.weight"] = (k * u, c, 1, 1)
        shapes[p + "gfe.to_v.weight"] = (v * u, c, 1, 1)
        shapes[p + "gfe.pos_conv.weight"] = (k, u, 1, r, r)
        shapes[p + "gfe.pos_conv.bias"] = (k,)
        if config.use_cbam:
            shapes[p + "cbam.mlp1.weight"] = (hidden, c, 1, 1)
            shapes[p + "cbam.mlp1.bias"] = (hidden,)
            shapes[p + "cbam.mlp2.weight"] = (c, hidden, 1, 1)
            shapes[p + "cbam.mlp2.bias"] = (c,)
            shapes[p + "cbam.spatial.weight"] = (1, 2, ks, ks)
            shapes[p + "cbam.spatial.bias"] = (1,)
    for j, s in enumerate(config.upsample_stages):
        shapes[f"up{j}.weight"] = (s * s * c, c, 1, 1)
        shapes[f"up{j}.bias"] = (s * s * c,)
    shapes["tail.weight"] = (1, c, 3, 3)
    shapes["tail.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, zero: bool = False, dtype=None) -> Parameters:
    """Kaiming-uniform fan-in conv weights, zero biases, unit/zero norm affine.

    Weights use the ``a = sqrt(5)`` leaky-ReLU gain of the usual deep-learning
    default, i.e. ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if zero:
            data = np.zeros(shape)
        elif name.endswith("norm.weight"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return params


def count_parameters(params) -> int:
    return int(sum(t.size for t in params.values()))


# -- blocks --------------------------------------------------------------------

def _conv(x, params, name, padding=None):
    w = params[name + ".weight"]
    pad = (w.shape[-1] - 1) // 2 if padding is None else padding
    return ops.conv2d(x, w, params.get(name + ".bias"), stride=1, padding=pad)


def _named(t: Tensor, name: str) -> Tensor:
    t.name = name
    return t


def csconv_forward(x, params, config: ModelConfig, prefix: str = "") -> Tensor:
    f1 = ops.silu(_conv(x, params, prefix + "csconv.conv1"))
    f2 = ops.silu(_conv(f1, params, prefix + "csconv.conv2"))
    out = ops.concat([f1, f2], axis=1)
    if config.use_channel_shuffle:
        out = ops.channel_shuffle(out, config.shuffle_groups)
    return _named(out, prefix + "csconv")


def gfe_forward(x, params, config: ModelConfig, prefix: str = "") -> Tensor:
    """Lambda layer: content lambda from softmaxed keys, position lambda from a 3-D conv."""
    x = as_tensor(x)
    n, c, hh, ww = x.shape
    k, v, h, u = config.qk_depth, config.value_depth, config.heads, config.kv_heads
    m = hh * ww
    p = prefix + "gfe."
    if config.use_layer_norm:
        x = ops.layer_norm(x, params[p + "norm.weight"], params[p + "norm.bias"],
                           eps=config.layer_norm_eps, mode=config.layer_norm_mode)
    q = ops.reshape(ops.conv2d(x, params[p + "to_q.weight"]), (n, h, k, m))
    keys = ops.reshape(ops.conv2d(x, params[p + "to_k.weight"]), (n, u, k, m))
    vals = ops.reshape(ops.conv2d(x, params[p + "to_v.weight"]), (n, u, v, m))
    keys = ops.softmax(keys, axis=-1)

    content_lambda = _named(ops.contract("nukm,nuvm->nkv", keys, vals), p + "content_lambda")
    y_content = ops.contract("nhkm,nkv->nhvm", q, content_lambda)

    position_lambda = ops.conv3d_lambda(ops.reshape(vals, (n, u, v, hh, ww)),
                                        params[p + "pos_conv.weight"], params[p + "pos_conv.bias"])
    position_lambda = _named(ops.reshape(position_lambda, (n, k, v, m)), p + "position_lambda")
    y_position = ops.contract("nhkm,nkvm->nhvm", q, position_lambda)

    y = ops.add(y_content, y_position)
    return _named(ops.reshape(y, (n, h * v, hh, ww)), prefix + "gfe")


def cbam_forward(x, params, config: ModelConfig, prefix: str = "") -> Tensor:
    """Channel attention followed by spatial attention; identity when disabled."""
    x = as_tensor(x)
    if not config.use_cbam:
        return x
    p = prefix + "cbam."

    def mlp(z):
        return _conv(ops.relu(_conv(z, params, p + "mlp1")), params, p + "mlp2")

    channel_att = ops.sigmoid(ops.add(mlp(ops.reduce(x, "mean_spatial")), mlp(ops.reduce(x, "max_spatial"))))
    x = ops.mul(x, channel_att)
    pooled = ops.concat([ops.reduce(x, "mean_channel"), ops.reduce(x, "max_channel")], axis=1)
    spatial_att = ops.sigmoid(_conv(pooled, params, p + "spatial"))
    return _named(ops.mul(x, spatial_att), prefix + "cbam")


def lgfb_forward(x, params, config: ModelConfig, prefix: str = "") -> Tensor:
    x = csconv_forward(x, params, config, prefix)
    x = gfe_forward(x, params, config, prefix)
    return cbam_forward(x, params, config, prefix)


def bicubic_residual(lr: np.ndarray, s: int) -> np.ndarray:
    """Per-image bicubic upsampling of an ``[N, 1, H, W]`` array."""
    n, c, h, w = lr.shape
    out = np.empty((n, c, h * s, w * s), dtype=lr.dtype)
    for i in range(n):
        for j in range(c):
            out[i, j] = bicubic_resize(lr[i, j], h * s, w * s)
    return out


def latis_forward(lr, params, config: ModelConfig) -> Tensor:
    """Super-resolve ``[N, 1, H, W]`` to ``[N, 1, sH, sW]``."""
    lr = as_tensor(lr)
    if lr.ndim != 4 or lr.shape[1] != 1:
        raise ConfigError(f"expected a [N, 1, H, W] single-channel batch, got {lr.shape}")
    f = _named(_conv(lr, params, "shallow"), "shallow")
    for i in range(config.num_lgfb):
        f = lgfb_forward(f, params, config, prefix=f"lgfb{i}.")
    for j, s in enumerate(config.upsample_stages):
        f = _named(ops.pixel_shuffle(_conv(f, params, f"up{j}"), s), f"up{j}")
    out = _named(_conv(f, params, "tail"), "tail")
    if config.use_bicubic_residual:
        out = _named(ops.add(out, Tensor(bicubic_residual(lr.data, config.scale), dtype=lr.dtype)), "output")
    return out


# -- accounting -----------------------------------------------------------------

def model_macs(config: ModelConfig, height: int = INFO_HEIGHT, width: int = INFO_WIDTH) -> Dict[str, int]:
    """Multiply-accumulate counts per op family for one ``height x width`` input."""
    c, half = config.channels, config.channels // 2
    k1, k2 = config.csconv_kernels
    k, v, h, u, r = config.qk_depth, config.value_depth, config.heads, config.kv_heads, config.lambda_conv_r
    m = height * width
    hidden = c // config.cbam_reduction
    ks = config.cbam_spatial_kernel

    conv2d = 9 * c * m  # shallow
    conv3d = contract = 0
    for _ in range(config.num_lgfb):
        conv2d += (half * c * k1 * k1 + half * half * k2 * k2) * m
        conv2d += (k * h + k * u + v * u) * c * m
        conv3d += k * u * r * r * v * m
        contract += k * u * v * m + 2 * h * k * v * m
        if config.use_cbam:
            conv2d += 2 * (c * hidden + hidden * c)
            conv2d += 2 * ks * ks * m
    size = m
    for s in config.upsample_stages:
        conv2d += s * s * c * c * size
        size *= s * s
    conv2d += 9 * c * size
    return {"conv2d": conv2d, "conv3d_lambda": conv3d, "contract": contract}


def model_info(config: ModelConfig, height: int = INFO_HEIGHT, width: int = INFO_WIDTH) -> dict:
    """Parameter count and FLOPs (2 x MAC over all convolutions and contractions).

    ``conv2d_macs`` is reported separately: it is the count that lines up with
    the published figures, which leave out the position-lambda convolution and
    the lambda contractions.
    """
    param_count = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    macs = model_macs(config, height, width)
    total = sum(macs.values())
    return {
        "param_count": param_count,
        "flops": 2 * total,
        "macs": total,
        "conv2d_macs": macs["conv2d"],
        "conv3d_lambda_macs": macs["conv3d_lambda"],
        "contract_macs": macs["contract"],
        "input": (height, width),
    }


def zero_params(config: ModelConfig, dtype=None) -> Parameters:
    return init_params(config, zero=True, dtype=dtype)


def cast_params(params, dtype) -> Parameters:
    return OrderedDict((k, Tensor(t.data, requires_grad=True, dtype=dtype, name=k)) for k, t in params.items())


def params_from_arrays(arrays, dtype=None) -> Parameters:
    return OrderedDict((k, Tensor(a, requires_grad=True, dtype=dtype or a.dtype, name=k)) for k, a in arrays.items())


def check_params(params, config: ModelConfig) -> Optional[str]:
    """Return a description of the first mismatch between params and config, or None."""
    expected = parameter_shapes(config)
    if list(params) != list(expected):
        missing = [k for k in expected if k not in params]
        extra = [k for k in params if k not in expected]
        return f"parameter names differ (missing={missing[:3]}, unexpected={extra[:3]})"
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            return f"{name} has shape {tuple(params[name].shape)}, expected {shape}"
    return None
