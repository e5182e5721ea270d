"""Dense tensor primitives shared by every layer of the engine.

All activations are rank-4 ``float32`` arrays laid out as
``(batch, channels, height, width)``; a spiking network over ``T`` time
steps stacks the steps along the batch axis, time-major (row ``t * N + n``).

Every primitive is a pure function of its inputs.  Reductions that feed
normalisation statistics are taken along a single contiguous axis after an
explicit transpose, so the accumulation order (numpy's pairwise summation
over that axis) does not depend on how many channels or groups share the
array.  This keeps results bit-identical across thread counts and between
fused and unfused layer layouts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._validation import check_same_shape

DTYPE = np.float32
KERNEL = 3
PADDING = 1


class Param:
    """A trainable array with its gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, data: np.ndarray, name: str = ""):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.data.shape})"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give identical draws everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def he_normal(rng: np.random.Generator, shape, dtype=DTYPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """3x3 convolution weights, zero padding 1, no bias."""

    weight: Param
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
            raise ValueError(f"conv weight must be (out, in, 3, 3), got {w.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if w.shape[0] % self.groups:
            raise ValueError(f"{w.shape[0]} output channels not divisible by {self.groups} groups")

    @property
    def in_channels(self) -> int:
        return self.weight.data.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.data.shape[0]


def conv_output_size(size: int, stride: int) -> int:
    return (size + 2 * PADDING - KERNEL) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, c, KERNEL, KERNEL),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * KERNEL * KERNEL), ho, wo


def _conv_single(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n = x.shape[0]
    cols, ho, wo = _im2col(x, stride)
    out = cols @ w.reshape(w.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2))


def _conv_single_backward(dy, x, w, stride):
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols, ho, wo = _im2col(x, stride)
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    dcols = (dy2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, KERNEL, KERNEL)
    dxp = np.zeros((n, c, h + 2 * PADDING, wd + 2 * PADDING), dtype=dy.dtype)
    # fixed (i, j) scatter order keeps the overlap sums deterministic
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, PADDING:PADDING + h, PADDING:PADDING + wd], dw


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} vs weight shape "
            f"{params.weight.data.shape} (groups={params.groups})"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"conv2d needs spatial dims >= 1, got {x.shape}")


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlation with a 3x3 kernel, zero padding 1.

    Output shape is ``(N, out, ceil(H / stride), ceil(W / stride))``.  Grouped
    convolutions run one matrix product per group.
    """
    _check_conv_input(x, params)
    w = params.weight.data
    if params.groups == 1:
        return _conv_single(x, w, params.stride)
    cin = w.shape[1]
    cout = w.shape[0] // params.groups
    parts = [
        _conv_single(x[:, g * cin:(g + 1) * cin], w[g * cout:(g + 1) * cout], params.stride)
        for g in range(params.groups)
    ]
    return np.concatenate(parts, axis=1)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, params: ConvParams, need_input_grad=True):
    """Gradients of :func:`conv2d`; adds the weight gradient into ``params.weight.grad``."""
    w = params.weight.data
    if params.groups == 1:
        dx, dw = _conv_single_backward(dy, x, w, params.stride)
        params.weight.grad += dw
        return dx if need_input_grad else None
    cin = w.shape[1]
    cout = w.shape[0] // params.groups
    dxs = []
    for g in range(params.groups):
        dxg, dwg = _conv_single_backward(
            dy[:, g * cout:(g + 1) * cout], x[:, g * cin:(g + 1) * cin],
            w[g * cout:(g + 1) * cout], params.stride,
        )
        params.weight.grad[g * cout:(g + 1) * cout] += dwg
        dxs.append(dxg)
    return np.concatenate(dxs, axis=1) if need_input_grad else None


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def default_groups(channels: int) -> int:
    return gcd(channels, 8)


@dataclass
class NormParams:
    """Affine parameters and (batch-norm only) running statistics."""

    kind: str
    gain: Param
    bias: Param
    groups: int = 1
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("batch", "group"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        c = self.channels
        if self.kind == "group" and (self.groups < 1 or c % self.groups):
            raise ValueError(f"group count {self.groups} does not divide {c} channels")
        if self.kind == "batch":
            if self.running_mean is None:
                self.running_mean = np.zeros(c, dtype=self.gain.data.dtype)
            if self.running_var is None:
                self.running_var = np.ones(c, dtype=self.gain.data.dtype)

    @property
    def channels(self) -> int:
        return self.gain.data.shape[0]

    @classmethod
    def create(cls, kind: str, channels: int, *, groups=None, dtype=DTYPE, name=""):
        gain = Param(np.ones(channels, dtype=dtype), f"{name}.gain")
        bias = Param(np.zeros(channels, dtype=dtype), f"{name}.bias")
        if kind == "group" and groups is None:
            groups = default_groups(channels)
        return cls(kind, gain, bias, groups=groups or 1)


@dataclass
class NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)


def _channel_rows(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W), contiguous."""
    c = x.shape[1]
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)


def _broadcast_channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def batch_norm_forward(x, params: NormParams, training: bool, stats=None):
    """Per-channel normalisation over (batch, height, width).

    With ``training`` the statistics come from the batch, unless ``stats`` is
    given, in which case those previously recorded batch statistics are reused
    (the function is then the identical map it was when they were recorded).
    Returns ``(y, cache, (mean, var))``.
    """
    if training:
        if stats is None:
            rows = _channel_rows(x)
            if rows.shape[1] == 0:
                raise ValueError("batch norm over zero elements")
            mean = rows.mean(axis=1)
            var = ((rows - mean[:, None]) ** 2).mean(axis=1)
        else:
            mean, var = stats
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype)
    xhat = (x - _broadcast_channel(mean)) * _broadcast_channel(inv_std)
    y = xhat * _broadcast_channel(params.gain.data) + _broadcast_channel(params.bias.data)
    cache = NormCache(xhat, inv_std, training)
    return y, cache, (mean, var)


def batch_norm_backward(dy, cache: NormCache, params: NormParams):
    params.gain.grad += _channel_rows(dy * cache.xhat).sum(axis=1)
    params.bias.grad += _channel_rows(dy).sum(axis=1)
    dxhat = dy * _broadcast_channel(params.gain.data)
    inv = _broadcast_channel(cache.inv_std)
    if not cache.batch_stats:
        return dxhat * inv
    mean_d = _broadcast_channel(_channel_rows(dxhat).mean(axis=1))
    mean_dx = _broadcast_channel(_channel_rows(dxhat * cache.xhat).mean(axis=1))
    return inv * (dxhat - mean_d - cache.xhat * mean_dx)


def group_norm_forward(x, params: NormParams):
    n, c, h, w = x.shape
    g = params.groups
    rows = x.reshape(n * g, -1)
    if rows.shape[1] == 0:
        raise ValueError("group norm over zero-element groups")
    mean = rows.mean(axis=1, keepdims=True)
    var = ((rows - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(x.dtype)
    xhat = ((rows - mean) * inv_std).reshape(x.shape)
    y = xhat * _broadcast_channel(params.gain.data) + _broadcast_channel(params.bias.data)
    return y, NormCache(xhat, inv_std, True)


def group_norm_backward(dy, cache: NormCache, params: NormParams):
    n, c, h, w = dy.shape
    g = params.groups
    params.gain.grad += _channel_rows(dy * cache.xhat).sum(axis=1)
    params.bias.grad += _channel_rows(dy).sum(axis=1)
    dxhat = (dy * _broadcast_channel(params.gain.data)).reshape(n * g, -1)
    xhat = cache.xhat.reshape(n * g, -1)
    dx = cache.inv_std * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx.reshape(dy.shape)


def normalize(x: np.ndarray, params: NormParams, training: bool = True) -> np.ndarray:
    """Group or batch normalisation followed by the per-channel affine map."""
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ValueError(f"normalize: input shape {x.shape} does not match {params.channels} channels")
    if params.kind == "group":
        return group_norm_forward(x, params)[0]
    return batch_norm_forward(x, params, training)[0]


def update_running_stats(params: NormParams, stats) -> None:
    """Fold one batch's statistics into the running estimates (training loop only)."""
    mean, var = stats
    m = params.momentum
    params.running_mean[...] = (1 - m) * params.running_mean + m * mean
    params.running_var[...] = (1 - m) * params.running_var + m * var


# ---------------------------------------------------------------------------
# elementwise couplings
# ---------------------------------------------------------------------------


def _binary(a, b, op, name):
    if np.ndim(b) == 0:
        return op(a, b)
    check_same_shape(a, b, name)
    return op(a, b)


def add(a, b):
    return _binary(a, b, np.add, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, "sub")


def scale(a, s):
    return _binary(a, s, np.multiply, "scale")


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------


def avg_pool_global(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.size == 0:
        raise ValueError(f"avg_pool_global needs a non-empty rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).mean(axis=2).reshape(n, c, 1, 1)


def avg_pool_global_backward(dy: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return np.broadcast_to(dy.reshape(n, c, 1, 1) / (h * w), shape).astype(dy.dtype)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight + bias`` with ``x`` flattened to (batch, features)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: {x2.shape[1]} features vs weight shape {weight.shape}")
    return x2 @ weight + bias


def linear_backward(dy, x, weight: Param, bias: Param):
    x2 = x.reshape(x.shape[0], -1)
    weight.grad += x2.T @ dy
    bias.grad += dy.sum(axis=0)
    return (dy @ weight.data.T).reshape(x.shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its exact gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(n)
    loss = float(np.mean(logsum - z[idx, labels]))
    grad = softmax(logits)
    grad[idx, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
