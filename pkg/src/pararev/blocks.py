"""Residual functions and the reversible couplings built from them.

Two couplings of a stream pair are provided::

    baseline:  y1 = x1 + F(x2)      y2 = x2 + G(y1)
    pararev:   y1 = x2 + F(x1)      y2 = x1 + G(y1)

In a stack of pararev blocks, ``G`` of block ``k`` and ``F`` of block ``k + 1``
read the same tensor (``y1`` of block ``k``), so they can run side by side or
be merged into one wider module (:class:`FusedFn`).

The coupling helpers accept any callables, which keeps them testable with
scalar doubles.  The layer objects expose ``forward``/``backward`` over a
time-major stacked batch of ``T`` steps; :meth:`ResidualFn.bind` turns one
into a plain callable whose batch-norm statistics are frozen after the first
evaluation, so a forward pass and a later inverse evaluate the same map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import numeric as nm
from .neuron import SpikeAct

FLAVORS = ("baseline", "pararev", "pararev-fused")


def _check_pair(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: stream shapes differ, {np.shape(a)} vs {np.shape(b)}")


# ---------------------------------------------------------------------------
# couplings over plain callables
# ---------------------------------------------------------------------------


def rev_forward(x1, x2, F: Callable, G: Callable):
    _check_pair(x1, x2, "rev_forward")
    y1 = x1 + F(x2)
    y2 = x2 + G(y1)
    return y1, y2


def rev_inverse(y1, y2, F: Callable, G: Callable):
    _check_pair(y1, y2, "rev_inverse")
    x2 = y2 - G(y1)
    x1 = y1 - F(x2)
    return x1, x2


def pararev_forward(x1, x2, F: Callable, G: Callable):
    _check_pair(x1, x2, "pararev_forward")
    y1 = x2 + F(x1)
    y2 = x1 + G(y1)
    return y1, y2


def pararev_inverse(y1, y2, F: Callable, G: Callable):
    _check_pair(y1, y2, "pararev_inverse")
    x1 = y2 - G(y1)
    x2 = y1 - F(x1)
    return x1, x2


def pararev_forward_fused(x1, x2, F_first: Callable, M_list: Sequence[Callable], G_last: Callable):
    """Run ``len(M_list) + 1`` pararev blocks where each ``M`` returns ``(g, f)``.

    ``M_k(y1)`` stands for ``(G_k(y1), F_{k+1}(y1))``.  The additions happen in
    the same order as the unfused chain, so with bit-identical residual
    outputs the chains agree bit for bit.
    """
    if F_first is None or G_last is None:
        raise ValueError("fused chain needs a leading F and a trailing G")
    _check_pair(x1, x2, "pararev_forward_fused")
    prev, cur = x1, x2 + F_first(x1)
    for m in M_list:
        g, f = m(cur)
        _check_pair(g, cur, "fused module G-part")
        _check_pair(f, cur, "fused module F-part")
        prev, cur = cur, (prev + g) + f
    return cur, prev + G_last(cur)


def pararev_inverse_fused(y1, y2, F_first: Callable, M_list: Sequence[Callable], G_last: Callable):
    _check_pair(y1, y2, "pararev_inverse_fused")
    cur, nxt = y1, y2
    prev = nxt - G_last(cur)
    for m in reversed(M_list):
        g, f = m(prev)
        prev, cur = (cur - f) - g, prev
    # prev is x1 and cur is y1 of the first block
    return prev, cur - F_first(prev)


# ---------------------------------------------------------------------------
# residual functions
# ---------------------------------------------------------------------------


@dataclass
class FnCache:
    v1: np.ndarray
    s1: np.ndarray
    gn: nm.NormCache
    v2: np.ndarray
    s2: np.ndarray
    bn: nm.NormCache
    out: np.ndarray

    @property
    def nbytes(self) -> int:
        arrays = (self.v1, self.s1, self.gn.xhat, self.gn.inv_std, self.v2, self.s2,
                  self.bn.xhat, self.out)
        return int(sum(a.nbytes for a in arrays))


class _TwoStage:
    """act -> conv3x3 -> GN -> act -> conv3x3 -> BN, shared by F/G and M."""

    conv1: nm.ConvParams
    gn: nm.NormParams
    conv2: nm.ConvParams
    bn: nm.NormParams

    def __init__(self, act=None):
        self.act = act if act is not None else SpikeAct()

    def params(self) -> List[nm.Param]:
        return [self.conv1.weight, self.gn.gain, self.gn.bias,
                self.conv2.weight, self.bn.gain, self.bn.bias]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x, T, *, training=True, stats=None, keep=False):
        """Returns ``(y, cache_or_None, bn_stats)``."""
        s1, v1 = self.act.forward(x, T)
        h1 = nm.conv2d(s1, self.conv1)
        n1, gcache = nm.group_norm_forward(h1, self.gn)
        del h1
        s2, v2 = self.act.forward(n1, T)
        del n1
        h2 = nm.conv2d(s2, self.conv2)
        y, bcache, stats = nm.batch_norm_forward(h2, self.bn, training, stats)
        cache = FnCache(v1, s1, gcache, v2, s2, bcache, y) if keep else None
        return y, cache, stats

    def backward(self, dy, cache: FnCache, T):
        dh2 = nm.batch_norm_backward(dy, cache.bn, self.bn)
        ds2 = nm.conv2d_backward(dh2, cache.s2, self.conv2)
        dn1 = self.act.backward(ds2, cache.v2, T)
        dh1 = nm.group_norm_backward(dn1, cache.gn, self.gn)
        ds1 = nm.conv2d_backward(dh1, cache.s1, self.conv1)
        return self.act.backward(ds1, cache.v1, T)

    def bind(self, T: int, training: bool = True) -> "BoundFn":
        return BoundFn(self, T, training)


class ResidualFn(_TwoStage):
    """One residual function (an ``F`` or a ``G``); output shape equals input shape."""

    def __init__(self, channels: int, rng=None, *, act=None, gn_groups=None,
                 dtype=nm.DTYPE, name="fn", zero=False):
        super().__init__(act)
        self.channels = channels
        self.name = name
        shape = (channels, channels, 3, 3)

        def weight(tag):
            data = np.zeros(shape, dtype) if zero else nm.he_normal(rng, shape, dtype)
            return nm.Param(data, f"{name}.{tag}")

        self.conv1 = nm.ConvParams(weight("conv1"))
        self.gn = nm.NormParams.create("group", channels, groups=gn_groups, dtype=dtype, name=f"{name}.gn")
        self.conv2 = nm.ConvParams(weight("conv2"))
        self.bn = nm.NormParams.create("batch", channels, dtype=dtype, name=f"{name}.bn")

    def __repr__(self):
        return f"ResidualFn({self.name!r}, channels={self.channels})"


class FusedFn(_TwoStage):
    """``G`` of block ``k`` and ``F`` of block ``k + 1`` as one wider module.

    The shared first activation feeds one convolution producing ``2c``
    channels (``G`` rows first), group norm runs with twice the groups so no
    group straddles the two halves, and the second convolution is grouped
    (``groups=2``) so the halves stay independent.  Calling it returns
    ``(g_part, f_part)``.
    """

    def __init__(self, channels: int, rng=None, *, act=None, gn_groups=None,
                 dtype=nm.DTYPE, name="M", zero=False):
        super().__init__(act)
        g = ResidualFn(channels, rng, act=self.act, gn_groups=gn_groups, dtype=dtype,
                       name=f"{name}.G", zero=zero)
        f = ResidualFn(channels, rng, act=self.act, gn_groups=gn_groups, dtype=dtype,
                       name=f"{name}.F", zero=zero)
        self._adopt(g, f, name)

    @classmethod
    def from_pair(cls, G: ResidualFn, F: ResidualFn, name="M") -> "FusedFn":
        """Build a fused module holding copies of ``G``'s and ``F``'s weights."""
        if G.channels != F.channels:
            raise ValueError(f"cannot fuse widths {G.channels} and {F.channels}")
        if G.gn.groups != F.gn.groups:
            raise ValueError("fused halves need the same group-norm group count")
        obj = cls.__new__(cls)
        _TwoStage.__init__(obj, G.act)
        obj._adopt(G, F, name)
        return obj

    def _adopt(self, G: ResidualFn, F: ResidualFn, name):
        c = G.channels
        self.channels = c
        self.name = name

        def cat(a, b, tag):
            return nm.Param(np.concatenate([a.data, b.data]), f"{name}.{tag}")

        self.conv1 = nm.ConvParams(cat(G.conv1.weight, F.conv1.weight, "conv1"))
        self.gn = nm.NormParams("group", cat(G.gn.gain, F.gn.gain, "gn.gain"),
                                cat(G.gn.bias, F.gn.bias, "gn.bias"),
                                groups=2 * G.gn.groups, eps=G.gn.eps)
        self.conv2 = nm.ConvParams(cat(G.conv2.weight, F.conv2.weight, "conv2"), groups=2)
        self.bn = nm.NormParams(
            "batch", cat(G.bn.gain, F.bn.gain, "bn.gain"), cat(G.bn.bias, F.bn.bias, "bn.bias"),
            eps=G.bn.eps, momentum=G.bn.momentum,
            running_mean=np.concatenate([G.bn.running_mean, F.bn.running_mean]),
            running_var=np.concatenate([G.bn.running_var, F.bn.running_var]),
        )

    def split(self):
        """Standalone ``(G, F)`` copies of the two halves."""
        c = self.channels
        out = []
        for half, tag in ((slice(0, c), "G"), (slice(c, 2 * c), "F")):
            fn = ResidualFn.__new__(ResidualFn)
            _TwoStage.__init__(fn, self.act)
            fn.channels = c
            fn.name = f"{self.name}.{tag}"

            def part(p, suffix):
                return nm.Param(p.data[half].copy(), f"{fn.name}.{suffix}")

            fn.conv1 = nm.ConvParams(part(self.conv1.weight, "conv1"))
            fn.gn = nm.NormParams("group", part(self.gn.gain, "gn.gain"), part(self.gn.bias, "gn.bias"),
                                  groups=self.gn.groups // 2, eps=self.gn.eps)
            fn.conv2 = nm.ConvParams(part(self.conv2.weight, "conv2"))
            fn.bn = nm.NormParams("batch", part(self.bn.gain, "bn.gain"), part(self.bn.bias, "bn.bias"),
                                  eps=self.bn.eps, momentum=self.bn.momentum,
                                  running_mean=self.bn.running_mean[half].copy(),
                                  running_var=self.bn.running_var[half].copy())
            out.append(fn)
        return tuple(out)

    def __repr__(self):
        return f"FusedFn({self.name!r}, channels={self.channels})"


class BoundFn:
    """A residual function frozen to ``T`` steps and one set of batch statistics.

    The first training-mode evaluation records the batch-norm statistics;
    later evaluations reuse them, so re-running the function on the same
    input during an inverse reproduces the forward output exactly.
    """

    def __init__(self, fn: _TwoStage, T: int, training: bool = True, stats=None):
        self.fn = fn
        self.T = T
        self.training = training
        self.stats = stats

    def run(self, x, keep=False):
        y, cache, stats = self.fn.forward(x, self.T, training=self.training,
                                          stats=self.stats, keep=keep)
        if self.training and self.stats is None:
            self.stats = stats
        return y, cache

    def __call__(self, x):
        y = self.run(x)[0]
        if isinstance(self.fn, FusedFn):
            c = self.fn.channels
            return y[:, :c], y[:, c:]
        return y

    def backward(self, dy, cache):
        return self.fn.backward(dy, cache, self.T)


# ---------------------------------------------------------------------------
# downsampling between stages
# ---------------------------------------------------------------------------


@dataclass
class DownCache:
    v: np.ndarray
    s: np.ndarray
    bn: nm.NormCache

    @property
    def nbytes(self) -> int:
        return int(self.v.nbytes + self.s.nbytes + self.bn.xhat.nbytes)


class DownsampleBranch:
    """act -> conv3x3 stride 2 -> BN on one stream (not reversible)."""

    def __init__(self, c_in, c_out, rng=None, *, act=None, dtype=nm.DTYPE, name="down", zero=False):
        self.act = act if act is not None else SpikeAct()
        shape = (c_out, c_in, 3, 3)
        data = np.zeros(shape, dtype) if zero else nm.he_normal(rng, shape, dtype)
        self.conv = nm.ConvParams(nm.Param(data, f"{name}.conv"), stride=2)
        self.bn = nm.NormParams.create("batch", c_out, dtype=dtype, name=f"{name}.bn")

    def params(self):
        return [self.conv.weight, self.bn.gain, self.bn.bias]

    def forward(self, x, T, *, training=True, stats=None):
        s, v = self.act.forward(x, T)
        h = nm.conv2d(s, self.conv)
        y, bcache, stats = nm.batch_norm_forward(h, self.bn, training, stats)
        return y, DownCache(v, s, bcache), stats

    def backward(self, dy, cache: DownCache, T):
        dh = nm.batch_norm_backward(dy, cache.bn, self.bn)
        ds = nm.conv2d_backward(dh, cache.s, self.conv)
        return self.act.backward(ds, cache.v, T)


class Downsample:
    """Stage transition applied to both streams with separate weights."""

    def __init__(self, c_in, c_out, rng=None, *, act=None, dtype=nm.DTYPE, name="down", zero=False):
        self.c_in, self.c_out = c_in, c_out
        self.branches = (
            DownsampleBranch(c_in, c_out, rng, act=act, dtype=dtype, name=f"{name}.1", zero=zero),
            DownsampleBranch(c_in, c_out, rng, act=act, dtype=dtype, name=f"{name}.2", zero=zero),
        )

    def params(self):
        return [p for b in self.branches for p in b.params()]

    def forward(self, x1, x2, T, *, training=True):
        _check_pair(x1, x2, "downsample")
        if x1.shape[1] != self.c_in:
            raise ValueError(f"downsample expects {self.c_in} channels, got {x1.shape[1]}")
        outs = [b.forward(x, T, training=training) for b, x in zip(self.branches, (x1, x2))]
        (y1, c1, s1), (y2, c2, s2) = outs
        return (y1, y2), (c1, c2), (s1, s2)

    def backward(self, dy1, dy2, caches, T):
        return tuple(b.backward(d, c, T) for b, d, c in zip(self.branches, (dy1, dy2), caches))


def downsample_block(x1, x2, params: Downsample, T: int = 1, training: bool = True):
    """Both streams through their strided branch; returns ``(x1', x2')``."""
    return params.forward(x1, x2, T, training=training)[0]


# ---------------------------------------------------------------------------
# a stage's chain of blocks
# ---------------------------------------------------------------------------


class RevChain:
    """``B`` reversible blocks of one width in a given flavor.

    Unfused flavors hold ``F[k]`` and ``G[k]``.  The fused flavor holds
    ``F[0]``, ``M[0..B-2]`` and ``G[B-1]``; ``M[k]`` covers ``G[k]`` and
    ``F[k+1]``.
    """

    def __init__(self, channels: int, blocks: int, flavor: str = "pararev", rng=None, *,
                 act=None, dtype=nm.DTYPE, name="chain", zero=False):
        if flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
        if blocks < 1:
            raise ValueError("a chain needs at least one block")
        self.channels, self.blocks, self.flavor, self.name = channels, blocks, flavor, name
        self.act = act if act is not None else SpikeAct()
        kw = dict(act=self.act, dtype=dtype, zero=zero)
        # F and G are drawn in block order in every flavor so seeds line up
        F = []
        G = []
        for k in range(blocks):
            F.append(ResidualFn(channels, rng, name=f"{name}.F{k}", **kw))
            G.append(ResidualFn(channels, rng, name=f"{name}.G{k}", **kw))
        if flavor == "pararev-fused":
            self.F = [F[0]]
            self.G = [G[-1]]
            self.M = [FusedFn.from_pair(G[k], F[k + 1], name=f"{name}.M{k}") for k in range(blocks - 1)]
        else:
            self.F, self.G, self.M = F, G, []

    def fn(self, kind: str, block: int) -> _TwoStage:
        if kind == "M":
            return self.M[block]
        if self.flavor == "pararev-fused":
            if kind == "F" and block == 0:
                return self.F[0]
            if kind == "G" and block == self.blocks - 1:
                return self.G[0]
            raise KeyError(f"fused chain has no standalone {kind}{block}")
        return (self.F if kind == "F" else self.G)[block]

    def functions(self):
        """``(kind, block, fn)`` for every residual function, in a fixed order."""
        if self.flavor == "pararev-fused":
            out = [("F", 0, self.F[0])]
            out += [("M", k, m) for k, m in enumerate(self.M)]
            out.append(("G", self.blocks - 1, self.G[0]))
            return out
        out = []
        for k in range(self.blocks):
            out += [("F", k, self.F[k]), ("G", k, self.G[k])]
        return out

    def params(self):
        return [p for _, _, fn in self.functions() for p in fn.params()]

    def copy_from(self, other: "RevChain"):
        """Take weights from an unfused chain of the same shape (fused or not)."""
        if other.flavor == "pararev-fused":
            raise ValueError("copy_from expects an unfused source chain")
        if (other.channels, other.blocks) != (self.channels, self.blocks):
            raise ValueError("chain shapes differ")
        if self.flavor == "pararev-fused":
            self.F = [_clone(other.F[0])]
            self.G = [_clone(other.G[-1])]
            self.M = [FusedFn.from_pair(other.G[k], other.F[k + 1], name=f"{self.name}.M{k}")
                      for k in range(self.blocks - 1)]
        else:
            self.F = [_clone(f) for f in other.F]
            self.G = [_clone(g) for g in other.G]
        return self

    def bind_all(self, T, training=True):
        return {(kind, k): fn.bind(T, training) for kind, k, fn in self.functions()}

    def forward(self, x1, x2, T, training=True, bound=None):
        """Sequential reference forward; returns ``(y1, y2, bound_fns)``."""
        b = bound if bound is not None else self.bind_all(T, training)
        if self.flavor == "pararev-fused":
            y1, y2 = pararev_forward_fused(
                x1, x2, b["F", 0], [b["M", k] for k in range(self.blocks - 1)], b["G", self.blocks - 1])
            return y1, y2, b
        step = rev_forward if self.flavor == "baseline" else pararev_forward
        for k in range(self.blocks):
            x1, x2 = step(x1, x2, b["F", k], b["G", k])
        return x1, x2, b

    def inverse(self, y1, y2, bound):
        if self.flavor == "pararev-fused":
            return pararev_inverse_fused(
                y1, y2, bound["F", 0], [bound["M", k] for k in range(self.blocks - 1)],
                bound["G", self.blocks - 1])
        step = rev_inverse if self.flavor == "baseline" else pararev_inverse
        for k in reversed(range(self.blocks)):
            y1, y2 = step(y1, y2, bound["F", k], bound["G", k])
        return y1, y2

    def __repr__(self):
        return f"RevChain({self.flavor!r}, channels={self.channels}, blocks={self.blocks})"


def _clone(fn: ResidualFn) -> ResidualFn:
    out = ResidualFn.__new__(ResidualFn)
    _TwoStage.__init__(out, fn.act)
    out.channels, out.name = fn.channels, fn.name
    out.conv1 = nm.ConvParams(nm.Param(fn.conv1.weight.data.copy(), fn.conv1.weight.name))
    out.conv2 = nm.ConvParams(nm.Param(fn.conv2.weight.data.copy(), fn.conv2.weight.name))
    for tag in ("gn", "bn"):
        src: nm.NormParams = getattr(fn, tag)
        setattr(out, tag, nm.NormParams(
            src.kind, nm.Param(src.gain.data.copy(), src.gain.name), nm.Param(src.bias.data.copy(), src.bias.name),
            groups=src.groups, eps=src.eps, momentum=src.momentum,
            running_mean=None if src.running_mean is None else src.running_mean.copy(),
            running_var=None if src.running_var is None else src.running_var.copy()))
    return out


def clone_fn(fn: ResidualFn) -> ResidualFn:
    """Deep copy of a residual function's parameters and running statistics."""
    return _clone(fn)
