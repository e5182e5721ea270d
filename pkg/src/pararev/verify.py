"""Self-checks of the engine's structural and numerical properties.

Each suite returns a list of :class:`Check` records with the measured value
next to its tolerance; the CLI prints them and exits nonzero on failure.
"""

from __future__ import annotations

import hashlib
import math
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import numeric as nm
from .autodiff import (MemoryMeter, Subnetwork, backward, gradcheck_differentiable_path,
                       measure_peak_memory, relative_difference)
from .bench import paired_step_times
from .blocks import (FusedFn, ResidualFn, RevChain, pararev_forward, pararev_forward_fused,
                     pararev_inverse, rev_forward, rev_inverse, DownsampleBranch)
from .network import ArchSpec, build
from .neuron import NeuronConfig, SmoothAct, SpikeAct
from .scheduler import build_graph, critical_path, simulate
from .training import TrainConfig, synth_task, train


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    relation: str  # "<=", "<", ">=", "==", "in"
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "INFO" if self.relation == "info" else ("PASS" if self.passed else "FAIL")
        m = self.measured
        ms = f"{m:.6g}" if isinstance(m, float) else str(m)
        ts = f"{self.tolerance:.6g}" if isinstance(self.tolerance, float) else str(self.tolerance)
        extra = f"  ({self.detail})" if self.detail else ""
        if self.relation == "info":
            return f"[{tag}] {self.name}: measured {ms}{extra}"
        return f"[{tag}] {self.name}: measured {ms} {self.relation} {ts}{extra}"


def _le(name, value, tol, detail=""):
    return Check(name, float(value), tol, "<=", bool(value <= tol), detail)


def _eq(name, value, target, detail=""):
    return Check(name, value, target, "==", value == target, detail)


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


def _random_neuron(rng) -> NeuronConfig:
    kind = "IF" if rng.random() < 0.5 else "LIF"
    return NeuronConfig(kind, threshold=float(rng.uniform(0.5, 1.5)), decay=float(rng.uniform(0.2, 0.9)),
                        surrogate="triangular" if rng.random() < 0.5 else "arctan")


def _perturb_norms(fn, rng):
    for norm in (fn.gn, fn.bn):
        norm.gain.data[...] = rng.uniform(0.5, 1.5, norm.channels)
        norm.bias.data[...] = rng.normal(0, 0.2, norm.channels)


def random_block(rng, flavor: str):
    """A random block of the given flavor with inputs; returns (x1, x2, F, G, T)."""
    c = int(rng.choice([2, 4, 8]))
    hw = int(rng.choice([2, 4, 6]))
    n = int(rng.integers(1, 3))
    T = int(rng.choice([1, 2, 4]))
    act = SpikeAct(_random_neuron(rng))
    F = ResidualFn(c, rng, act=act, name="F")
    G = ResidualFn(c, rng, act=act, name="G")
    _perturb_norms(F, rng)
    _perturb_norms(G, rng)
    s = float(rng.uniform(0.5, 2.0))
    x1 = (rng.standard_normal((T * n, c, hw, hw)) * s).astype(np.float32)
    x2 = (rng.standard_normal((T * n, c, hw, hw)) * s).astype(np.float32)
    return x1, x2, F.bind(T), G.bind(T), T


def inversion_roundtrip(configs: int = 500, seed: int = 0) -> Dict[str, float]:
    """Worst max-abs reconstruction error per flavor over random configurations."""
    rng = nm.make_rng(seed)
    worst = {"baseline": 0.0, "pararev": 0.0, "pararev-fused": 0.0}
    pairs = {"baseline": (rev_forward, rev_inverse), "pararev": (pararev_forward, pararev_inverse)}
    for i in range(configs):
        for flavor, (fwd, inv) in pairs.items():
            x1, x2, F, G, _ = random_block(rng, flavor)
            y1, y2 = fwd(x1, x2, F, G)
            r1, r2 = inv(y1, y2, F, G)
            worst[flavor] = max(worst[flavor], float(np.abs(r1 - x1).max()), float(np.abs(r2 - x2).max()))
        worst["pararev-fused"] = max(worst["pararev-fused"], _fused_roundtrip(rng))
    return worst


def _fused_roundtrip(rng) -> float:
    B = int(rng.integers(2, 5))
    T = int(rng.choice([1, 2, 4]))
    chain = RevChain(4, B, "pararev-fused", rng, act=SpikeAct(_random_neuron(rng)))
    x1 = rng.standard_normal((T, 4, 4, 4)).astype(np.float32)
    x2 = rng.standard_normal((T, 4, 4, 4)).astype(np.float32)
    y1, y2, bound = chain.forward(x1, x2, T)
    r1, r2 = chain.inverse(y1, y2, bound)
    return max(float(np.abs(r1 - x1).max()), float(np.abs(r2 - x2).max()))


def dyadic_block(rng, c=4, hw=4, n=2, T=2):
    """Block whose residual outputs are exact dyadic rationals.

    Weights are multiples of 1/8 and inputs multiples of 1/16; the final
    batch norm runs on running statistics with ``var + eps = 1/4``, so every
    F/G output, and hence every coupling sum, is exactly representable.
    """
    act = SpikeAct(NeuronConfig("IF", threshold=1.0))
    fns = []
    for name in ("F", "G"):
        fn = ResidualFn(c, act=act, name=name, zero=True)
        for conv in (fn.conv1, fn.conv2):
            conv.weight.data[...] = rng.integers(-4, 5, conv.weight.data.shape) / 8
        fn.bn.eps = 2.0 ** -10
        fn.bn.running_mean[...] = rng.integers(-4, 5, c) / 8
        fn.bn.running_var[...] = 0.25 - 2.0 ** -10
        fn.bn.gain.data[...] = rng.choice([0.5, 1.0], c)
        fn.bn.bias.data[...] = rng.integers(-4, 5, c) / 16
        fns.append(fn.bind(T, training=False))
    x1 = (rng.integers(-32, 33, (T * n, c, hw, hw)) / 16).astype(np.float32)
    x2 = (rng.integers(-32, 33, (T * n, c, hw, hw)) / 16).astype(np.float32)
    return x1, x2, fns[0], fns[1]


def dyadic_exact(configs: int = 50, seed: int = 1) -> bool:
    rng = nm.make_rng(seed)
    for _ in range(configs):
        x1, x2, F, G = dyadic_block(rng)
        for fwd, inv in ((rev_forward, rev_inverse), (pararev_forward, pararev_inverse)):
            y1, y2 = fwd(x1, x2, F, G)
            r1, r2 = inv(y1, y2, F, G)
            if not (np.array_equal(r1, x1) and np.array_equal(r2, x2)):
                return False
    return True


def suite_inversion(configs=500, seed=0) -> List[Check]:
    t0 = time.perf_counter()
    worst = inversion_roundtrip(configs, seed)
    checks = [_le(f"round-trip max-abs error, {f} ({configs} configs)", w, 1e-4) for f, w in worst.items()]
    exact = dyadic_exact()
    checks.append(Check("dyadic inputs invert bit-exactly", exact, True, "==", exact))
    el = time.perf_counter() - t0
    checks.append(_le("runtime seconds", el, 120.0))
    return checks


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _f64(rng, *shape):
    return rng.standard_normal(shape).astype(np.float64)


def gradcheck_cases(seed=0) -> Dict[str, Subnetwork]:
    rng = nm.make_rng(seed)
    cases = {}

    # linear + softmax cross-entropy
    x = _f64(rng, 6, 5)
    labels = rng.integers(0, 3, 6)
    W = nm.Param(_f64(rng, 5, 3), "linear.W")
    b = nm.Param(_f64(rng, 3), "linear.b")

    def lin_loss():
        return nm.softmax_cross_entropy(nm.linear(x, W.data, b.data), labels)[0]

    def lin_grad():
        _, d = nm.softmax_cross_entropy(nm.linear(x, W.data, b.data), labels)
        nm.linear_backward(d, x, W, b)

    cases["linear"] = Subnetwork([W, b], lin_loss, lin_grad)

    # conv -> GN -> conv s2 -> BN -> pool -> fc -> CE
    xi = _f64(rng, 3, 2, 6, 6)
    yl = rng.integers(0, 3, 3)
    c1 = nm.ConvParams(nm.Param(_f64(rng, 4, 2, 3, 3) * 0.5, "conv1.W"))
    gn = nm.NormParams.create("group", 4, groups=2, dtype=np.float64, name="gn")
    c2 = nm.ConvParams(nm.Param(_f64(rng, 4, 4, 3, 3) * 0.3, "conv2.W"), stride=2)
    bn = nm.NormParams.create("batch", 4, dtype=np.float64, name="bn")
    for p in (gn, bn):
        p.gain.data[...] = rng.uniform(0.5, 1.5, 4)
        p.bias.data[...] = rng.normal(0, 0.3, 4)
    fw = nm.Param(_f64(rng, 4, 3), "fc.W")
    fb = nm.Param(_f64(rng, 3), "fc.b")

    def stack(keep=False):
        h1 = nm.conv2d(xi, c1)
        g1, gc = nm.group_norm_forward(h1, gn)
        h2 = nm.conv2d(g1, c2)
        z, bc, _ = nm.batch_norm_forward(h2, bn, True)
        pooled = nm.avg_pool_global(z)
        logits = nm.linear(pooled, fw.data, fb.data)
        return (logits, (g1, gc, bc, pooled, z.shape)) if keep else logits

    def stack_grad():
        logits, (g1, gc, bc, pooled, zshape) = stack(True)
        _, d = nm.softmax_cross_entropy(logits, yl)
        dp = nm.linear_backward(d, pooled, fw, fb)
        dz = nm.avg_pool_global_backward(dp, zshape)
        dh2 = nm.batch_norm_backward(dz, bc, bn)
        dg1 = nm.conv2d_backward(dh2, g1, c2)
        dh1 = nm.group_norm_backward(dg1, gc, gn)
        nm.conv2d_backward(dh1, xi, c1, need_input_grad=False)

    cases["conv+group-norm stack"] = Subnetwork(
        [c1.weight, gn.gain, gn.bias, c2.weight, bn.gain, bn.bias, fw, fb],
        lambda: nm.softmax_cross_entropy(stack(), yl)[0], stack_grad)

    # downsample branch with a smooth activation
    xd = _f64(rng, 4, 2, 4, 4)
    wd = _f64(rng, 4, 4)
    br = DownsampleBranch(2, 3, rng, act=SmoothAct(), dtype=np.float64, name="down")

    def down_loss():
        return float((br.forward(xd, 2)[0] * wd[:, :3, None, None]).sum())

    def down_grad():
        y, cache, _ = br.forward(xd, 2)
        br.backward(np.broadcast_to(wd[:, :3, None, None], y.shape).copy(), cache, 2)

    cases["downsample branch (smooth)"] = Subnetwork(br.params(), down_loss, down_grad)

    # whole reversible networks with the spike replaced by tanh
    for flavor, policy in (("baseline", "recompute"), ("pararev", "recompute"),
                           ("pararev", "store-all"), ("pararev-fused", "recompute")):
        spec = ArchSpec(blocks=(2, 1), widths=(2, 4), timesteps=2, num_classes=3, activation="smooth",
                        flavor=flavor)
        net = build(spec, seed=seed + 7, dtype=np.float64)
        for st in net.stages:
            for _, _, fn in st.chain.functions():
                fn.gn.bias.data[...] = rng.normal(0, 0.2, fn.gn.channels)
                fn.bn.gain.data[...] = rng.uniform(0.5, 1.5, fn.bn.channels)
        xn = _f64(rng, 3, 3, 8, 8)
        yn = rng.integers(0, 3, 3)
        cases[f"{flavor} coupling network (smooth, {policy})"] = _network_subnet(net, xn, yn, policy)
    return cases


def _network_subnet(net, X, y, policy) -> Subnetwork:
    def loss():
        return nm.softmax_cross_entropy(net.forward(X, training=True, commit_stats=False), y)[0]

    def grad():
        logits = net.forward(X, policy=policy, commit_stats=False)
        _, d = nm.softmax_cross_entropy(logits, y)
        backward(d, net, policy)

    return Subnetwork(net.params(), loss, grad)


def suite_gradcheck(seed=0, max_entries=12) -> List[Check]:
    t0 = time.perf_counter()
    checks = []
    for name, sub in gradcheck_cases(seed).items():
        rep = gradcheck_differentiable_path(sub, step=1e-3, tolerance=1e-3, max_entries=max_entries, seed=seed)
        detail = "; ".join(rep.failures()[:3]) or f"{len(rep.entries)} parameters"
        checks.append(_le(f"gradcheck {name}", rep.worst, 1e-3, detail))
    # softmax cross-entropy gradient w.r.t. the logits themselves
    rng = nm.make_rng(seed + 1)
    logits = rng.standard_normal((5, 4)) * 2
    labels = rng.integers(0, 4, 5)
    _, g = nm.softmax_cross_entropy(logits, labels)
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = 1e-3
        num[idx] = (nm.softmax_cross_entropy(logits + e, labels)[0]
                    - nm.softmax_cross_entropy(logits - e, labels)[0]) / 2e-3
    checks.append(_le("gradcheck softmax cross-entropy logits", relative_difference(g, num), 1e-3))
    checks.append(_le("runtime seconds", time.perf_counter() - t0, 120.0))
    return checks


# ---------------------------------------------------------------------------
# policy equivalence
# ---------------------------------------------------------------------------


def random_network_spec(rng) -> ArchSpec:
    flavor = str(rng.choice(["baseline", "pararev", "pararev-fused"]))
    blocks = [(4,), (2, 2), (1, 3), (3, 1)][int(rng.integers(0, 4))]
    c = int(rng.choice([4, 8]))
    widths = (c,) if len(blocks) == 1 else (c, 2 * c)
    return ArchSpec(blocks=blocks, widths=widths, flavor=flavor, neuron=_random_neuron(rng),
                    timesteps=int(rng.integers(1, 5)), num_classes=int(rng.integers(2, 5)))


def policy_gradients(net, X, y, policy, workers=1):
    net.zero_grad()
    logits = net.forward(X, policy=policy, workers=workers, commit_stats=False)
    _, d = nm.softmax_cross_entropy(logits, y)
    grads = backward(d, net, policy)
    return {k: v.copy() for k, v in grads.items()}


def policy_equivalence(networks=50, seed=0):
    """Worst per-parameter relative gradient difference (store-all reference)."""
    rng = nm.make_rng(seed)
    worst, where = 0.0, ""
    for i in range(networks):
        spec = random_network_spec(rng)
        net = build(spec, rng)
        X = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, spec.num_classes, 2)
        ref = policy_gradients(net, X, y, "store-all")
        rec = policy_gradients(net, X, y, "recompute")
        for k in ref:
            r = relative_difference(rec[k], ref[k])
            if r > worst:
                worst, where = r, f"net {i} ({spec.flavor}, blocks={list(spec.blocks)}, T={spec.timesteps}) {k}"
    return worst, where


def suite_policy_equiv(networks=50, seed=0) -> List[Check]:
    t0 = time.perf_counter()
    worst, where = policy_equivalence(networks, seed)
    return [_le(f"store-all vs recompute gradients over {networks} random 4-block networks", worst, 1e-4, where),
            _le("runtime seconds", time.perf_counter() - t0, 300.0)]


# ---------------------------------------------------------------------------
# memory scaling
# ---------------------------------------------------------------------------


def memory_table(depths=(4, 8, 16), timesteps=(2, 4, 8), width=8, size=16, batch=2, seed=0):
    """Peak retained activation bytes by (policy, D) at T=2 and by T for recompute at D=4."""
    rng = nm.make_rng(seed)
    X = rng.standard_normal((batch, 3, size, size)).astype(np.float32)
    by_depth = {}
    for policy in ("store-all", "recompute"):
        for D in depths:
            net = build(ArchSpec(blocks=(D,), widths=(width,), timesteps=2, num_classes=4), seed=seed)
            by_depth[policy, D] = measure_peak_memory(net, X, policy)["peak_bytes"]
    by_T = {}
    for T in timesteps:
        net = build(ArchSpec(blocks=(depths[0],), widths=(width,), timesteps=T, num_classes=4), seed=seed)
        by_T[T] = measure_peak_memory(net, X, "recompute")["peak_bytes"]
    return by_depth, by_T


def suite_memory_scaling(seed=0) -> List[Check]:
    t0 = time.perf_counter()
    depths = (4, 8, 16)
    by_depth, by_T = memory_table(depths, seed=seed)
    checks = []
    rows = ", ".join(f"{p} D={d}: {b}" for (p, d), b in sorted(by_depth.items()))
    rec = [by_depth["recompute", d] for d in depths]
    var = max(rec) / min(rec) - 1
    checks.append(_le("recompute peak variation D=4..16", var, 0.10, rows))
    growth = by_depth["store-all", 16] / by_depth["store-all", 4]
    checks.append(Check("store-all growth D=4 -> D=16", growth, 3.0, ">=", growth >= 3.0))
    r = by_depth["store-all", 16] / by_depth["store-all", 8]
    checks.append(_le("store-all D=8 -> D=16 ratio deviation from 2", abs(r / 2 - 1), 0.15, f"ratio {r:.4f}"))
    r = by_depth["recompute", 16] / by_depth["recompute", 8]
    checks.append(_le("recompute D=8 -> D=16 ratio deviation from 1", abs(r - 1), 0.10, f"ratio {r:.4f}"))
    tr = by_T[8] / by_T[2]
    checks.append(_le("recompute T=2 -> T=8 ratio deviation from 4", abs(tr / 4 - 1), 0.15,
                      ", ".join(f"T={t}: {b}" for t, b in sorted(by_T.items()))))
    t2 = by_T[4] / by_T[2]
    checks.append(_le("recompute T=2 -> T=4 ratio deviation from 2", abs(t2 / 2 - 1), 0.15, f"ratio {t2:.4f}"))
    checks.append(_le("runtime seconds", time.perf_counter() - t0, 180.0))
    return checks


# ---------------------------------------------------------------------------
# critical path
# ---------------------------------------------------------------------------


def critical_path_table(Bs=(1, 2, 4, 8, 16, 32)):
    rows = []
    for B in Bs:
        row = {"B": B}
        for flavor in ("baseline", "pararev", "pararev-fused"):
            for direction in ("forward", "backward"):
                row[f"{flavor}/{direction}"] = critical_path(build_graph(B, flavor, direction)).length
        rows.append(row)
    return rows


def suite_critical_path(Bs=(1, 2, 4, 8, 16, 32)) -> List[Check]:
    checks = []
    for row in critical_path_table(Bs):
        B = row["B"]
        for key, v in row.items():
            if key == "B":
                continue
            want = 2 * B if key.startswith("baseline") else B + 1
            checks.append(_eq(f"B={B} {key} longest path", v, want))
    for B in (4, 16):
        nb = len(build_graph(B, "baseline"))
        np_ = len(build_graph(B, "pararev"))
        checks.append(_eq(f"B={B} work conservation (node count baseline vs pararev)", np_, nb))
    B = 16
    ratio = simulate(build_graph(B, "pararev"), 2).makespan / simulate(build_graph(B, "baseline"), 2).makespan
    target = (B + 1) / (2 * B)
    checks.append(_le(f"B={B}, 2 workers: simulated makespan ratio vs (B+1)/2B={target:.4f}",
                      abs(ratio / target - 1), 0.05, f"ratio {ratio:.4f}"))
    return checks


def format_critical_path_table(rows) -> str:
    keys = [k for k in rows[0] if k != "B"]
    out = ["B  " + "  ".join(keys)]
    for r in rows:
        out.append(f"{r['B']:<3}" + "  ".join(f"{r[k]:>{len(k)}}" for k in keys))
    return "\n".join(out)


# ---------------------------------------------------------------------------
# fused equivalence
# ---------------------------------------------------------------------------


def fused_equivalence(Bs=(2, 3, 4), trials=5, seed=0):
    """Worst max-abs difference between fused and unfused chains (outputs, then grads)."""
    rng = nm.make_rng(seed)
    out_worst = {B: 0.0 for B in Bs}
    grad_worst = 0.0
    for B in Bs:
        for _ in range(trials):
            T = int(rng.choice([1, 2, 4]))
            act = SpikeAct(_random_neuron(rng))
            un = RevChain(4, B, "pararev", rng, act=act)
            fu = RevChain(4, B, "pararev-fused", None, act=act, zero=True).copy_from(un)
            x1 = rng.standard_normal((2 * T, 4, 4, 4)).astype(np.float32)
            x2 = rng.standard_normal((2 * T, 4, 4, 4)).astype(np.float32)
            a = un.forward(x1, x2, T)
            b = fu.forward(x1, x2, T)
            out_worst[B] = max(out_worst[B], float(np.abs(a[0] - b[0]).max()), float(np.abs(a[1] - b[1]).max()))
        spec = ArchSpec(blocks=(B,), widths=(4,), timesteps=2, num_classes=3)
        X = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, 2)
        gu = policy_gradients(build(spec.with_(flavor="pararev"), seed=B), X, y, "recompute")
        gf = policy_gradients(build(spec.with_(flavor="pararev-fused"), seed=B), X, y, "recompute")
        for name in ("stem.conv", "head.fc.weight", "s0.F0.conv1"):
            grad_worst = max(grad_worst, relative_difference(gf[name], gu[name]))
    return out_worst, grad_worst


def suite_fused_equiv(seed=0) -> List[Check]:
    t0 = time.perf_counter()
    outs, g = fused_equivalence(seed=seed)
    checks = [_le(f"fused vs unfused chain outputs, B={B}", w, 1e-5) for B, w in outs.items()]
    checks.append(_le("fused vs unfused shared-parameter gradients (relative)", g, 1e-4))
    checks.append(_le("runtime seconds", time.perf_counter() - t0, 60.0))
    return checks


# ---------------------------------------------------------------------------
# parallel speedup and determinism
# ---------------------------------------------------------------------------


def speedup_measurement(B=16, workers=4, repeat=21, width=16, T=2, batch=8, size=16, seed=0):
    spec = ArchSpec(blocks=(B,), widths=(width,), timesteps=T, num_classes=10)
    times = paired_step_times(spec, ("baseline", "pararev", "pararev-fused"), workers, repeat,
                              batch=batch, size=size, seed=seed)
    return {f: statistics.median(v) for f, v in times.items()}


def suite_speedup(B=16, workers=4, repeat=21, seed=0) -> List[Check]:
    t0 = time.perf_counter()
    med = speedup_measurement(B, workers, repeat, seed=seed)
    red = 1 - med["pararev"] / med["baseline"]
    cores = os.cpu_count() or 1
    detail = (f"median step ms: baseline {med['baseline']:.2f}, pararev {med['pararev']:.2f}, "
              f"fused {med['pararev-fused']:.2f}; {cores} CPU core(s) available")
    checks = [
        Check(f"B={B}, {workers} workers: pararev wall-time reduction vs baseline", red, 0.0, ">", red > 0.0, detail),
        Check("target reduction 0.10", red, 0.10, "info", True,
              "met" if red >= 0.10 else "below target"),
        Check("fused realization wall-time reduction vs baseline", 1 - med["pararev-fused"] / med["baseline"],
              0.0, "info", True, "fewer, wider tasks; not a parallelism effect"),
    ]
    ratio = simulate(build_graph(B, "pararev"), 2).makespan / simulate(build_graph(B, "baseline"), 2).makespan
    target = (B + 1) / (2 * B)
    checks.append(_le("unit-cost simulated makespan ratio deviation", abs(ratio / target - 1), 0.05,
                      f"ratio {ratio:.4f} vs {target:.4f}"))
    checks.append(_le("runtime seconds", time.perf_counter() - t0, 180.0))
    return checks


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def determinism_digests(workers=(1, 2, 4), seed=0):
    """Hashes of logits, gradients and short-training parameters per worker count."""
    out = {}
    data = synth_task(nm.make_rng(seed), 2, 64)
    X = data.X[:4]
    y = data.y[:4]
    for w in workers:
        row = {}
        for flavor in ("baseline", "pararev", "pararev-fused"):
            spec = ArchSpec(blocks=(2, 2), widths=(8, 16), timesteps=2, num_classes=2, flavor=flavor)
            net = build(spec, seed=seed)
            logits = net.forward(X, workers=w)
            grads = policy_gradients(net, X, y, "recompute", workers=w)
            net2 = build(spec, seed=seed)
            train(net2, data, TrainConfig(epochs=1, batch_size=16, optimizer="adamw", seed=seed, workers=w))
            row[flavor] = (_digest([logits]), _digest(grads.values()), _digest(p.data for p in net2.params()))
        out[w] = row
    return out


def suite_determinism(workers=(1, 2, 4), seed=0) -> List[Check]:
    d = determinism_digests(workers, seed)
    ref = d[workers[0]]
    checks = []
    for w in workers[1:]:
        same = d[w] == ref
        checks.append(Check(f"logits/gradients/trained parameters identical, workers {workers[0]} vs {w}",
                            same, True, "==", same))
    again = determinism_digests(workers[:1], seed)[workers[0]] == ref
    checks.append(Check("repeat run identical", again, True, "==", again))
    return checks


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "inversion": suite_inversion,
    "gradcheck": suite_gradcheck,
    "policy-equiv": suite_policy_equiv,
    "memory-scaling": suite_memory_scaling,
    "critical-path": suite_critical_path,
    "fused-equiv": suite_fused_equiv,
    "speedup": suite_speedup,
    "determinism": suite_determinism,
}
