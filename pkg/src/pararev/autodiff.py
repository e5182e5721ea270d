"""Reverse-mode differentiation with two activation policies.

``store-all`` keeps every residual-function cache from the forward pass.
``recompute`` keeps only what cannot be rebuilt: stage outputs, the inputs of
the non-reversible stem/downsample/head layers and the batch-norm statistics
of each residual function.  During the backward pass each reversible chain is
walked from its output, inverting one coupling at a time and re-running the
residual function with a cache just long enough to take its local gradient.

Retained activation memory is tracked by :class:`MemoryMeter`, which counts
the payload bytes the engine itself registers.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numeric as nm
from .blocks import BoundFn, FusedFn, RevChain
from .scheduler import backward_plan, forward_plan, run_plan

POLICIES = ("store-all", "recompute")
CATEGORIES = ("interior", "stream", "boundary", "transition", "bookkeeping", "gradient")


@dataclass(frozen=True)
class ActivationPolicy:
    kind: str = "recompute"

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.kind!r}")

    @property
    def stores_interiors(self) -> bool:
        return self.kind == "store-all"

    @classmethod
    def coerce(cls, policy) -> "ActivationPolicy":
        return policy if isinstance(policy, cls) else cls(str(policy))


class MemoryMeter:
    """Thread-safe registry of retained activation bytes by category.

    Parameter bytes are reported alongside but never enter ``current`` or
    ``peak``: the meter measures activations only.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._live: Dict[object, tuple] = {}
        self.by_category = {c: 0 for c in CATEGORIES}
        self.current = 0
        self.peak = 0
        self.peak_by_category = dict(self.by_category)
        self.parameter_bytes = 0

    def retain(self, key, category: str, nbytes: int) -> None:
        if category not in self.by_category:
            raise ValueError(f"unknown memory category {category!r}")
        with self._lock:
            if key in self._live:
                raise KeyError(f"memory key {key!r} already retained")
            self._live[key] = (category, int(nbytes))
            self.by_category[category] += int(nbytes)
            self.current += int(nbytes)
            if self.current > self.peak:
                self.peak = self.current
                self.peak_by_category = dict(self.by_category)

    def release(self, key) -> None:
        with self._lock:
            category, nbytes = self._live.pop(key)
            self.by_category[category] -= nbytes
            self.current -= nbytes

    def release_all(self, prefix) -> None:
        """Release every key that is a tuple starting with ``prefix``."""
        with self._lock:
            keys = [k for k in self._live if isinstance(k, tuple) and k[:len(prefix)] == prefix]
        for k in keys:
            self.release(k)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "peak_bytes": self.peak,
                "current_bytes": self.current,
                "peak_by_category": dict(self.peak_by_category),
                "current_by_category": dict(self.by_category),
                "parameter_bytes": self.parameter_bytes,
            }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)


class _NullMeter:
    def retain(self, *a):
        pass

    def release(self, *a):
        pass

    def release_all(self, *a):
        pass


NULL_METER = _NullMeter()


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class TapeNode:
    """One recorded op.  ``backward`` maps output-slot grads to input-slot grads."""

    op: str
    inputs: tuple
    outputs: tuple
    backward: Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]] = field(repr=False)
    keys: List[object] = field(default_factory=list, repr=False)


class Tape:
    def __init__(self, policy: ActivationPolicy, T: int, meter=None, workers: int = 1):
        self.policy = policy
        self.T = T
        self.meter = meter or NULL_METER
        self.workers = workers
        self.nodes: List[TapeNode] = []
        self.norm_stats: List[tuple] = []  # (NormParams, (mean, var)) in forward order

    def record(self, node: TapeNode) -> TapeNode:
        self.nodes.append(node)
        return node

    def save(self, node: TapeNode, category: str, nbytes: int, tag="saved"):
        key = ("tape", id(self), len(self.nodes), node.op, tag)
        self.meter.retain(key, category, nbytes)
        node.keys.append(key)

    def release(self, node: TapeNode):
        for k in node.keys:
            self.meter.release(k)
        node.keys.clear()


class BackwardError(RuntimeError):
    pass


def backward(loss_grad: np.ndarray, network, policy) -> Dict[str, np.ndarray]:
    """Accumulate parameter gradients of the last recorded forward pass.

    Returns the gradients by parameter name (arrays owned by the parameters).
    """
    policy = ActivationPolicy.coerce(policy)
    tape: Optional[Tape] = getattr(network, "tape_", None)
    if tape is None:
        raise BackwardError("backward called before a recorded forward pass")
    if tape.policy != policy:
        raise BackwardError(
            f"policy mismatch: forward ran under {tape.policy.kind!r}, backward asked for {policy.kind!r}")
    network.tape_ = None
    grads: Dict[str, np.ndarray] = {tape.nodes[-1].outputs[0]: loss_grad}
    for node in reversed(tape.nodes):
        outs = {k: grads.pop(k) for k in node.outputs if k in grads}
        if outs:
            for k, g in node.backward(outs).items():
                grads[k] = g if k not in grads else grads[k] + g
        tape.release(node)
    return {p.name: p.grad for p in network.params()}


# ---------------------------------------------------------------------------
# reversible chains under a tape
# ---------------------------------------------------------------------------

_PLANS: Dict[tuple, object] = {}
_PLAN_LOCK = threading.Lock()


def _plan(direction, flavor, blocks):
    key = (direction, flavor, blocks)
    with _PLAN_LOCK:
        if key not in _PLANS:
            _PLANS[key] = (forward_plan if direction == "forward" else backward_plan)(flavor, blocks)
        return _PLANS[key]


def _stats_bytes(b: BoundFn) -> int:
    return 0 if b.stats is None else int(sum(np.asarray(s).nbytes for s in b.stats))


def chain_forward(chain: RevChain, x1, x2, T, *, training=True, tape: Optional[Tape] = None,
                  workers=1, name="chain"):
    """Run one chain through the dataflow executor; records a tape node if ``tape``."""
    bound = chain.bind_all(T, training)
    meter = tape.meter if tape is not None else NULL_METER
    store = tape is not None and tape.policy.stores_interiors
    caches: Dict[str, object] = {}
    ckey = ("cache", name, id(caches))

    def runner(task):
        b = bound[task.kind, task.block]
        fused = task.kind == "M"

        def run(x):
            y, cache = b.run(x, keep=store)
            if store:
                caches[task.name] = cache
                meter.retain(ckey + (task.name,), "interior", cache.nbytes)
            if fused:
                c = chain.channels
                return y[:, :c], y[:, c:]
            return (y,)

        return run

    out = run_plan(_plan("forward", chain.flavor, chain.blocks), {"x1": x1, "x2": x2}, runner,
                   workers=workers, meter=meter)
    y1, y2 = out["y1"], out["y2"]
    if tape is None:
        return y1, y2

    for kind, k, fn in chain.functions():
        b = bound[kind, k]
        if b.stats is not None:
            tape.norm_stats.append((fn.bn, b.stats))

    def back(grads):
        return chain_backward(chain, bound, caches, y1, y2, grads, tape, node, ckey)

    node = TapeNode(f"{name}", (f"{name}.x1", f"{name}.x2"), (f"{name}.y1", f"{name}.y2"), back)
    tape.record(node)
    tape.save(node, "boundary", y1.nbytes + y2.nbytes, "y")
    tape.save(node, "bookkeeping", sum(_stats_bytes(b) for b in bound.values()), "stats")
    # the cache keys were retained by the runner; hand their release to the node
    node.keys.extend(ckey + (n,) for n in caches)
    return y1, y2


def chain_backward(chain: RevChain, bound, caches, y1, y2, grads, tape: Tape, node, ckey):
    name = node.op
    g1 = grads.get(f"{name}.y1")
    g2 = grads.get(f"{name}.y2")
    g1 = np.zeros_like(y1) if g1 is None else g1
    g2 = np.zeros_like(y2) if g2 is None else g2
    meter = tape.meter
    store = tape.policy.stores_interiors
    c = chain.channels

    def runner(task):
        b = bound[task.kind, task.block]
        fused = task.kind == "M"

        def run(value, grad):
            if store:
                cache = caches.pop(task.name)
            else:
                _, cache = b.run(value, keep=True)
                key = ("recompute", name, task.name)
                meter.retain(key, "interior", cache.nbytes)
            y = cache.out
            if fused:
                dx = b.backward(np.concatenate([grad, grad], axis=1), cache)
            else:
                dx = b.backward(grad, cache)
            if store:
                meter.release(ckey + (task.name,))
                node.keys.remove(ckey + (task.name,))
            else:
                meter.release(key)
            if fused:
                return y[:, :c], y[:, c:], dx
            return y, dx

        return run

    out = run_plan(_plan("backward", chain.flavor, chain.blocks),
                   {"y1": y1, "y2": y2, "dy1": g1, "dy2": g2}, runner,
                   workers=tape.workers, meter=meter)
    return {f"{name}.x1": out["dx1"], f"{name}.x2": out["dx2"]}


def reconstruct_inputs(chain: RevChain, bound, y1, y2, workers=1):
    """Chain inputs rebuilt from its outputs with the forward's frozen statistics."""
    def runner(task):
        b = bound[task.kind, task.block]

        def run(value, grad):
            y = b.run(value)[0]
            if task.kind == "M":
                return y[:, :chain.channels], y[:, chain.channels:], grad
            return y, grad

        return run

    z = np.zeros_like(y1)
    out = run_plan(_plan("backward", chain.flavor, chain.blocks),
                   {"y1": y1, "y2": y2, "dy1": z, "dy2": z}, runner, workers=workers)
    return out["x1"], out["x2"]


# ---------------------------------------------------------------------------
# measurement and checking
# ---------------------------------------------------------------------------


def measure_peak_memory(network, X, policy, y=None, T=None) -> dict:
    """Peak retained activation bytes over one forward+backward pass.

    Runs single-worker so the figure is deterministic; parameters' gradients
    are left zeroed and running statistics untouched.
    """
    policy = ActivationPolicy.coerce(policy)
    meter = MemoryMeter()
    meter.parameter_bytes = int(sum(p.data.nbytes for p in network.params()))
    labels = np.zeros(len(X), dtype=np.int64) if y is None else y
    logits = network.forward(X, T=T, training=True, policy=policy, meter=meter, workers=1,
                             commit_stats=False)
    _, dlogits = nm.softmax_cross_entropy(logits, labels)
    backward(dlogits, network, policy)
    network.zero_grad()
    snap = meter.snapshot()
    snap["policy"] = policy.kind
    return snap


@dataclass
class GradcheckEntry:
    name: str
    rel_error: float
    analytic: float
    numeric: float
    ok: bool


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def failures(self) -> List[str]:
        return [f"{e.name}: analytic {e.analytic:.6g} vs numeric {e.numeric:.6g} "
                f"(rel {e.rel_error:.2e} > {self.tolerance:g})" for e in self.entries if not e.ok]


class Subnetwork:
    """A differentiable path: ``loss()`` evaluates, ``grad()`` fills parameter grads."""

    def __init__(self, params: Sequence[nm.Param], loss: Callable[[], float], grad: Callable[[], None]):
        self._params = list(params)
        self.loss = loss
        self.grad = grad

    def params(self):
        return self._params


def gradcheck_differentiable_path(subnetwork, *, step=1e-3, tolerance=1e-3, max_entries=24,
                                  seed=0) -> GradcheckReport:
    """Central differences against analytic gradients, per parameter.

    The relative error of a parameter is the largest absolute difference over
    the probed entries divided by the largest numeric gradient magnitude.
    Use float64 parameters; the step is too coarse for float32 round-off.
    """
    params = subnetwork.params()
    for p in params:
        p.zero_grad()
    subnetwork.grad()
    rng = np.random.default_rng(seed)
    entries = []
    for p in params:
        flat = p.data.reshape(-1)
        analytic_all = p.grad.reshape(-1).copy()
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = subnetwork.loss()
            flat[i] = orig - step
            down = subnetwork.loss()
            flat[i] = orig
            num[j] = (up - down) / (2 * step)
        ana = analytic_all[idx]
        diff = np.abs(ana - num)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
        w = int(diff.argmax())
        rel = float(diff[w] / scale)
        entries.append(GradcheckEntry(p.name, rel, float(ana[w]), float(num[w]), rel <= tolerance))
    return GradcheckReport(entries, tolerance)


def relative_difference(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|b|`` (0 when both vanish)."""
    scale = float(np.abs(b).max()) if b.size else 0.0
    diff = float(np.abs(a - b).max()) if a.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale
