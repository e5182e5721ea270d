"""Wall-clock benchmarks of forward/backward passes per flavor and worker count."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from . import numeric as nm
from .autodiff import MemoryMeter, backward
from .network import ArchSpec, build

BENCH_COLUMNS = ["flavor", "workers", "fwd_ms", "bwd_ms", "step_ms", "peak_activation_bytes",
                 "speedup_vs_baseline"]


@dataclass
class Timing:
    fwd_ms: float
    bwd_ms: float
    step_ms: float
    peak_activation_bytes: int


def synthetic_batch(spec: ArchSpec, batch: int, size: int, seed: int = 0):
    rng = nm.make_rng(seed)
    X = rng.standard_normal((batch, spec.in_channels, size, size)).astype(np.float32)
    y = (np.arange(batch) % spec.num_classes).astype(np.int64)
    return X, y


def _one_pass(net, X, y, workers, policy, meter):
    t0 = time.perf_counter()
    logits = net.forward(X, policy=policy, meter=meter, workers=workers, commit_stats=False)
    t1 = time.perf_counter()
    _, d = nm.softmax_cross_entropy(logits, y)
    backward(d, net, policy)
    t2 = time.perf_counter()
    net.zero_grad()
    return t1 - t0, t2 - t1, t2 - t0


def _timing(runs, meter) -> Timing:
    med = statistics.median
    fwd, bwd, tot = zip(*runs)
    return Timing(1e3 * med(fwd), 1e3 * med(bwd), 1e3 * med(tot), meter.peak)


def time_passes(net, X, y, *, workers=1, repeat=5, policy="recompute", warmup=1) -> Timing:
    """Median forward, backward and total milliseconds over ``repeat`` runs."""
    meter = MemoryMeter()
    for _ in range(warmup):
        _one_pass(net, X, y, workers, policy, meter)
    return _timing([_one_pass(net, X, y, workers, policy, meter) for _ in range(repeat)], meter)


def interleaved_timings(spec: ArchSpec, flavors: Sequence[str], workers: int, repeat: int,
                        batch=8, size=16, seed=0, policy="recompute") -> Dict[str, Timing]:
    """Per-flavor medians with runs interleaved so drift affects every flavor alike."""
    X, y = synthetic_batch(spec, batch, size, seed)
    nets = {f: build(spec.with_(flavor=f), seed=seed) for f in flavors}
    meters = {f: MemoryMeter() for f in flavors}
    runs = {f: [] for f in flavors}
    for f in flavors:  # warm-up
        _one_pass(nets[f], X, y, workers, policy, meters[f])
    for _ in range(repeat):
        for f in flavors:
            runs[f].append(_one_pass(nets[f], X, y, workers, policy, meters[f]))
    return {f: _timing(runs[f], meters[f]) for f in flavors}


def paired_step_times(spec: ArchSpec, flavors: Sequence[str], workers: int, repeat: int,
                      batch=8, size=16, seed=0, policy="recompute") -> Dict[str, List[float]]:
    """Interleaved per-run step times in milliseconds."""
    X, y = synthetic_batch(spec, batch, size, seed)
    nets = {f: build(spec.with_(flavor=f), seed=seed) for f in flavors}
    meter = MemoryMeter()
    out = {f: [] for f in flavors}
    for f in flavors:  # warm-up
        _one_pass(nets[f], X, y, workers, policy, meter)
    for _ in range(repeat):
        for f in flavors:
            out[f].append(1e3 * _one_pass(nets[f], X, y, workers, policy, meter)[2])
    return out


def bench_table(spec: ArchSpec, flavors: Sequence[str], workers_list: Sequence[int], repeat: int = 5,
                batch: int = 8, size: int = 32, seed: int = 0, policy="recompute") -> List[dict]:
    """Rows with :data:`BENCH_COLUMNS`; speedup is relative to baseline at the same worker count."""
    rows = []
    for w in workers_list:
        timings = interleaved_timings(spec, flavors, w, repeat, batch, size, seed, policy)
        ref = timings["baseline"].step_ms if "baseline" in timings else timings[flavors[0]].step_ms
        for f in flavors:
            t = timings[f]
            rows.append({
                "flavor": f, "workers": w, "fwd_ms": round(t.fwd_ms, 3), "bwd_ms": round(t.bwd_ms, 3),
                "step_ms": round(t.step_ms, 3), "peak_activation_bytes": t.peak_activation_bytes,
                "speedup_vs_baseline": round(ref / t.step_ms, 4) if f != "baseline" else 1.0,
            })
    return rows


def rows_to_csv(rows: List[dict], columns=BENCH_COLUMNS) -> str:
    lines = [",".join(columns)]
    lines += [",".join(str(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"
