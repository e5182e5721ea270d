"""Task graphs of residual-function evaluations and a small parallel executor.

A stage's chain is described as a :class:`Plan`: tasks (one per ``F``, ``G``
or fused ``M`` evaluation) whose inputs are expressions over the plan inputs
and other tasks' outputs (``Add``/``Sub`` of stream tensors).  The edges of
the :class:`TaskGraph` are exactly the data dependencies of those
expressions, so the same plan drives execution and the critical-path
analysis.

Coupling additions run on the controller thread in a fixed order and every
task writes only its own outputs, so results do not depend on the number of
workers or on completion order.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from itertools import count
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

FUNCTION_KINDS = ("F", "G", "M")


class CycleError(ValueError):
    pass


class ExecutionError(RuntimeError):
    """A task raised inside the worker pool."""

    def __init__(self, task: str, cause: BaseException):
        super().__init__(f"task {task!r} failed: {type(cause).__name__}: {cause}")
        self.task = task


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


@dataclass
class Node:
    name: str
    kind: str = "F"
    block: int = 0
    t: Optional[int] = None  # None: the task covers all time steps at once
    cost: float = 1.0
    fn: Optional[Callable] = field(default=None, repr=False, compare=False)


class TaskGraph:
    def __init__(self, name: str = "graph"):
        self.name = name
        self.nodes: Dict[str, Node] = {}
        self._preds: Dict[str, List[str]] = {}
        self._succs: Dict[str, List[str]] = {}

    def add_node(self, name, kind="F", block=0, t=None, cost=1.0, fn=None) -> Node:
        if name in self.nodes:
            raise ValueError(f"duplicate node {name!r}")
        node = Node(name, kind, block, t, float(cost), fn)
        self.nodes[name] = node
        self._preds[name] = []
        self._succs[name] = []
        return node

    def add_edge(self, u: str, v: str) -> None:
        for n in (u, v):
            if n not in self.nodes:
                raise KeyError(f"unknown node {n!r}")
        if v not in self._succs[u]:
            self._succs[u].append(v)
            self._preds[v].append(u)

    def has_edge(self, u, v) -> bool:
        return v in self._succs.get(u, ())

    def preds(self, n) -> List[str]:
        return list(self._preds[n])

    def succs(self, n) -> List[str]:
        return list(self._succs[n])

    @property
    def edges(self) -> List[Tuple[str, str]]:
        return [(u, v) for u in self.nodes for v in self._succs[u]]

    def __len__(self):
        return len(self.nodes)

    def topo_order(self) -> List[str]:
        """Kahn's algorithm, ties broken by insertion order."""
        index = {n: i for i, n in enumerate(self.nodes)}
        indeg = {n: len(p) for n, p in self._preds.items()}
        ready = sorted((n for n, d in indeg.items() if d == 0), key=index.get)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            fresh = []
            for s in self._succs[n]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    fresh.append(s)
            ready = sorted(ready + fresh, key=index.get)
        if len(order) != len(self.nodes):
            raise CycleError(f"graph {self.name!r} has a cycle")
        return order

    def levels(self) -> Dict[str, int]:
        lvl = {}
        for n in self.topo_order():
            lvl[n] = 1 + max((lvl[p] for p in self._preds[n]), default=-1)
        return lvl

    def count(self, kinds: Iterable[str] = FUNCTION_KINDS) -> int:
        kinds = set(kinds)
        return sum(1 for n in self.nodes.values() if n.kind in kinds)

    # -- text form -----------------------------------------------------

    def to_edge_list(self) -> str:
        lines = [f"digraph {_quote(self.name)} {{"]
        for n in self.nodes.values():
            t = "" if n.t is None else f", t={n.t}"
            lines.append(f"  {n.name} [kind={n.kind}, block={n.block}{t}, cost={n.cost:g}];")
        for u, v in self.edges:
            lines.append(f"  {u} -> {v};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str) -> "TaskGraph":
        head = re.search(r"digraph\s+(\"[^\"]*\"|\S+)\s*\{", text)
        if head is None:
            raise ValueError("not a digraph edge list")
        g = cls(head.group(1).strip('"'))
        for raw in text[head.end():].splitlines():
            line = raw.strip().rstrip(";").strip()
            if not line or line == "}" or line.startswith("//"):
                continue
            m = re.fullmatch(r"(\S+)\s*->\s*(\S+)", line)
            if m:
                g.add_edge(m.group(1), m.group(2))
                continue
            m = re.fullmatch(r"(\S+)\s*\[(.*)\]", line)
            if not m:
                raise ValueError(f"cannot parse edge-list line: {raw!r}")
            attrs = dict(kv.split("=", 1) for kv in (a.strip() for a in m.group(2).split(",")) if kv)
            g.add_node(
                m.group(1), kind=attrs.get("kind", "F"), block=int(attrs.get("block", 0)),
                t=int(attrs["t"]) if "t" in attrs else None, cost=float(attrs.get("cost", 1.0)),
            )
        return g


def _quote(name: str) -> str:
    return name if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) else f'"{name}"'


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


@dataclass
class PathReport:
    length: int
    cost: float
    path: List[str]
    cost_path: List[str]

    def to_json(self, **extra) -> str:
        return json.dumps({"length": self.length, "cost": self.cost, "path": self.path,
                           "cost_path": self.cost_path, **extra}, indent=2)

    def __iter__(self):
        # allows ``length, cost = critical_path(g)``
        return iter((self.length, self.cost))


def _longest(graph: TaskGraph, weight: Callable[[Node], float]):
    best: Dict[str, float] = {}
    back: Dict[str, Optional[str]] = {}
    for n in graph.topo_order():
        w = weight(graph.nodes[n])
        prev = max(graph.preds(n), key=lambda p: best[p], default=None)
        best[n] = w + (best[prev] if prev is not None else 0.0)
        back[n] = prev
    if not best:
        return 0.0, []
    end = max(best, key=best.get)
    path = []
    cur: Optional[str] = end
    while cur is not None:
        path.append(cur)
        cur = back[cur]
    return best[end], path[::-1]


def critical_path(graph: TaskGraph, kinds: Iterable[str] = FUNCTION_KINDS) -> PathReport:
    """Longest path by count of function-evaluation nodes and by summed cost.

    Nodes of other kinds (stage transitions ``D``) contribute nothing to the
    count but their cost is included in the cost path.
    """
    kinds = set(kinds)
    length, path = _longest(graph, lambda n: 1.0 if n.kind in kinds else 0.0)
    cost, cost_path = _longest(graph, lambda n: n.cost)
    return PathReport(int(round(length)), float(cost), path, cost_path)


@dataclass
class Slot:
    task: str
    worker: int
    start: float
    finish: float


@dataclass
class Schedule:
    slots: List[Slot]
    workers: int

    @property
    def makespan(self) -> float:
        return max((s.finish for s in self.slots), default=0.0)

    def order(self) -> List[str]:
        return [s.task for s in sorted(self.slots, key=lambda s: (s.start, s.worker))]


def simulate(graph: TaskGraph, workers: int, cost: Optional[Callable[[Node], float]] = None) -> Schedule:
    """Greedy non-preemptive list scheduling, priority = (level, insertion order)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    cost = cost or (lambda n: n.cost)
    levels = graph.levels()
    index = {n: i for i, n in enumerate(graph.nodes)}
    waiting = {n: len(graph.preds(n)) for n in graph.nodes}
    ready = [n for n, d in waiting.items() if d == 0]
    free_at = [0.0] * workers
    running: List[Tuple[float, int, str]] = []
    slots = []
    now = 0.0
    while ready or running:
        ready.sort(key=lambda n: (levels[n], index[n]))
        idle = [w for w in range(workers) if free_at[w] <= now and all(r[1] != w for r in running)]
        while ready and idle:
            n = ready.pop(0)
            w = idle.pop(0)
            fin = now + cost(graph.nodes[n])
            running.append((fin, w, n))
            slots.append(Slot(n, w, now, fin))
            free_at[w] = fin
        running.sort()
        fin, w, n = running.pop(0)
        now = fin
        done = [(fin, w, n)]
        while running and running[0][0] == now:
            done.append(running.pop(0))
        for _, _, d in done:
            for s in graph.succs(d):
                waiting[s] -= 1
                if waiting[s] == 0:
                    ready.append(s)
    return Schedule(slots, workers)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _drive(order: Sequence[str], deps: Dict[str, Sequence[str]], launch: Callable[[str], Callable[[], object]],
           finish: Callable[[str, object], None], workers: int) -> None:
    """Run tasks respecting ``deps``; ``launch``/``finish`` run on the calling thread.

    ``launch(name)`` prepares a zero-argument job; the job itself runs on a
    worker.  Ready tasks are submitted in ``order`` priority.
    """
    rank = {n: i for i, n in enumerate(order)}
    waiting = {n: len(set(deps.get(n, ()))) for n in order}
    succs: Dict[str, List[str]] = {n: [] for n in order}
    for n in order:
        for d in set(deps.get(n, ())):
            succs[d].append(n)
    ready = sorted((n for n in order if waiting[n] == 0), key=rank.get)

    def complete(n):
        for s in succs[n]:
            waiting[s] -= 1
            if waiting[s] == 0:
                ready.append(s)
        ready.sort(key=rank.get)

    if workers <= 1:
        while ready:
            n = ready.pop(0)
            job = launch(n)
            try:
                result = job()
            except Exception as exc:  # noqa: BLE001 - rewrapped with the task name
                raise ExecutionError(n, exc) from exc
            finish(n, result)
            complete(n)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = {}
            while ready or pending:
                while ready and len(pending) < workers:
                    n = ready.pop(0)
                    pending[pool.submit(launch(n))] = n
                done, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: rank[pending[f]]):
                    n = pending.pop(fut)
                    exc = fut.exception()
                    if exc is not None:
                        for f in pending:
                            f.cancel()
                        raise ExecutionError(n, exc) from exc
                    finish(n, fut.result())
                    complete(n)
    left = [n for n in order if waiting[n] > 0]
    if left:
        raise CycleError(f"tasks never became ready: {left}")


def execute(graph: TaskGraph, workers: int = 1) -> Dict[str, object]:
    """Run every node's ``fn`` once its predecessors finish.

    Each ``fn`` receives a dict mapping predecessor names to their results.
    Returns all results by node name.
    """
    missing = [n.name for n in graph.nodes.values() if n.fn is None]
    if missing:
        raise ValueError(f"no task closure registered for {missing}")
    results: Dict[str, object] = {}
    order = graph.topo_order()

    def launch(n):
        args = {p: results[p] for p in graph.preds(n)}
        fn = graph.nodes[n].fn
        return lambda: fn(args)

    _drive(order, {n: graph.preds(n) for n in order}, launch, results.__setitem__, workers)
    return results


# ---------------------------------------------------------------------------
# dataflow plans
# ---------------------------------------------------------------------------

_ids = count()


class Expr:
    """A tensor-valued expression; ``cat`` is its memory-meter category."""

    __slots__ = ("cat", "uid")

    def __init__(self, cat):
        self.cat = cat
        self.uid = next(_ids)

    def children(self) -> Tuple["Expr", ...]:
        return ()


class Input(Expr):
    __slots__ = ("name",)

    def __init__(self, name, cat="stream"):
        super().__init__(cat)
        self.name = name

    def __repr__(self):
        return f"Input({self.name})"


class Out(Expr):
    __slots__ = ("task", "index")

    def __init__(self, task: "Task", index: int, cat="stream"):
        super().__init__(cat)
        self.task, self.index = task, index

    def __repr__(self):
        return f"{self.task.name}[{self.index}]"


class _Binary(Expr):
    __slots__ = ("a", "b")
    op = None
    sym = "?"

    def __init__(self, a: Expr, b: Expr, cat=None):
        super().__init__(cat or a.cat)
        self.a, self.b = a, b

    def children(self):
        return (self.a, self.b)

    def __repr__(self):
        return f"({self.a!r} {self.sym} {self.b!r})"


class Add(_Binary):
    op = staticmethod(np.add)
    sym = "+"


class Sub(_Binary):
    op = staticmethod(np.subtract)
    sym = "-"


class Task:
    def __init__(self, kind: str, block: int, inputs: Sequence[Expr], n_out: int, cats: Sequence[str]):
        self.kind, self.block = kind, block
        self.name = f"{kind}{block}"
        self.inputs = list(inputs)
        self.outs = [Out(self, i, c) for i, c in zip(range(n_out), cats)]

    def deps(self) -> List["Task"]:
        seen, out, stack = set(), [], list(self.inputs)
        while stack:
            e = stack.pop()
            if isinstance(e, Out):
                if e.task.name not in seen:
                    seen.add(e.task.name)
                    out.append(e.task)
            stack.extend(e.children())
        return sorted(out, key=lambda t: t.name)

    def __repr__(self):
        return f"Task({self.name})"


@dataclass
class Plan:
    """Tasks plus named output expressions for one chain pass."""

    flavor: str
    direction: str
    blocks: int
    tasks: List[Task]
    outputs: Dict[str, Expr]

    def graph(self, prefix: str = "", name=None) -> TaskGraph:
        g = TaskGraph(name or f"{self.flavor}_{self.direction}_B{self.blocks}")
        _add_plan(g, self, prefix)
        return g


def _add_plan(g: TaskGraph, plan: Plan, prefix: str) -> None:
    for t in plan.tasks:
        g.add_node(prefix + t.name, kind=t.kind, block=t.block)
    for t in plan.tasks:
        for d in t.deps():
            g.add_edge(prefix + d.name, prefix + t.name)


def _task(tasks, kind, block, inputs, n_out, cats):
    t = Task(kind, block, inputs, n_out, cats)
    tasks.append(t)
    return t.outs


def forward_plan(flavor: str, blocks: int) -> Plan:
    """Inputs ``x1, x2``; outputs ``y1, y2``.  Each task returns ``(fn(x),)``
    (fused ``M`` returns ``(g, f)``)."""
    _check_chain(flavor, blocks)
    tasks: List[Task] = []
    x1, x2 = Input("x1"), Input("x2")
    if flavor == "baseline":
        for k in range(blocks):
            (f,) = _task(tasks, "F", k, [x2], 1, ["stream"])
            y1 = Add(x1, f)
            (g,) = _task(tasks, "G", k, [y1], 1, ["stream"])
            x1, x2 = y1, Add(x2, g)
        return Plan(flavor, "forward", blocks, tasks, {"y1": x1, "y2": x2})
    # pararev: a[-1] = x2, a[0] = x1, a[k+1] = y1 of block k
    prev, cur = x2, x1
    (f,) = _task(tasks, "F", 0, [cur], 1, ["stream"])
    prev, cur = cur, Add(prev, f)
    for k in range(blocks - 1):
        if flavor == "pararev-fused":
            g, f = _task(tasks, "M", k, [cur], 2, ["stream", "stream"])
        else:
            (g,) = _task(tasks, "G", k, [cur], 1, ["stream"])
            (f,) = _task(tasks, "F", k + 1, [cur], 1, ["stream"])
        prev, cur = cur, Add(Add(prev, g), f)
    (g,) = _task(tasks, "G", blocks - 1, [cur], 1, ["stream"])
    return Plan(flavor, "forward", blocks, tasks, {"y1": cur, "y2": Add(prev, g)})


def backward_plan(flavor: str, blocks: int) -> Plan:
    """Inputs ``y1, y2, dy1, dy2``; outputs ``x1, x2, dx1, dx2``.

    Each task gets ``(value, grad)``, rebuilds its function output from
    ``value`` (needed to invert the coupling) and returns
    ``(fn(value), input_grad)``; fused ``M`` returns ``(g, f, input_grad)``
    with ``grad`` applied to both halves.
    """
    _check_chain(flavor, blocks)
    tasks: List[Task] = []
    y1, y2 = Input("y1"), Input("y2")
    dy1, dy2 = Input("dy1", "gradient"), Input("dy2", "gradient")
    two = ["stream", "gradient"]
    if flavor == "baseline":
        for k in reversed(range(blocks)):
            g, gG = _task(tasks, "G", k, [y1, dy2], 2, two)
            x2 = Sub(y2, g)
            d1 = Add(dy1, gG)
            f, gF = _task(tasks, "F", k, [x2, d1], 2, two)
            y1, y2 = Sub(y1, f), x2
            dy1, dy2 = d1, Add(dy2, gF)
        return Plan(flavor, "backward", blocks, tasks, {"x1": y1, "x2": y2, "dx1": dy1, "dx2": dy2})
    # walk a[B] -> a[0]; e_cur holds the total gradient of cur, e_skip that of nxt
    cur, nxt = y1, y2
    g, gG = _task(tasks, "G", blocks - 1, [cur, dy2], 2, two)
    prev = Sub(nxt, g)
    e_cur, e_skip = Add(dy1, gG), dy2
    for k in reversed(range(blocks - 1)):
        # cur = a[k+2], prev = a[k+1]
        if flavor == "pararev-fused":
            g, f, gM = _task(tasks, "M", k, [prev, e_cur], 3, ["stream", "stream", "gradient"])
            e_new = Add(e_skip, gM)
        else:
            f, gF = _task(tasks, "F", k + 1, [prev, e_cur], 2, two)
            g, gG = _task(tasks, "G", k, [prev, e_cur], 2, two)
            e_new = Add(Add(e_skip, gF), gG)
        cur, prev = prev, Sub(Sub(cur, f), g)
        e_skip, e_cur = e_cur, e_new
    f, gF = _task(tasks, "F", 0, [prev, e_cur], 2, two)
    x2 = Sub(cur, f)
    return Plan(flavor, "backward", blocks, tasks,
                {"x1": prev, "x2": x2, "dx1": Add(e_skip, gF), "dx2": e_cur})


def _check_chain(flavor, blocks):
    if flavor not in ("baseline", "pararev", "pararev-fused"):
        raise ValueError(f"unknown flavor {flavor!r}")
    if int(blocks) < 1:
        raise ValueError("a chain needs at least one block")


def run_plan(plan: Plan, inputs: Dict[str, np.ndarray], runner: Callable[[Task], Callable],
             workers: int = 1, meter=None) -> Dict[str, np.ndarray]:
    """Evaluate ``plan``; ``runner(task)`` returns a callable over input values.

    Intermediate values are freed (and released from ``meter``) as soon as
    their last consumer has used them.  Plan inputs are not metered here.
    """
    refs: Dict[int, int] = {}
    nodes: Dict[int, Expr] = {}

    def visit(e: Expr):
        refs[e.uid] = refs.get(e.uid, 0) + 1
        if e.uid in nodes:
            return
        nodes[e.uid] = e
        for c in e.children():
            visit(c)

    for t in plan.tasks:
        for e in t.inputs:
            visit(e)
        for o in t.outs:
            nodes[o.uid] = o
            refs.setdefault(o.uid, 0)
    for e in plan.outputs.values():
        visit(e)

    vals: Dict[int, np.ndarray] = {}

    def store(e: Expr, v):
        vals[e.uid] = v
        if meter is not None and not isinstance(e, Input):
            meter.retain(("plan", e.uid), e.cat, v.nbytes)

    def drop(e: Expr):
        refs[e.uid] -= 1
        if refs[e.uid] == 0 and e.uid in vals:
            del vals[e.uid]
            if meter is not None and not isinstance(e, Input):
                meter.release(("plan", e.uid))

    def value(e: Expr):
        if e.uid not in vals:
            if isinstance(e, Input):
                if e.name not in inputs:
                    raise KeyError(f"plan input {e.name!r} not supplied")
                store(e, inputs[e.name])
            elif isinstance(e, Out):
                raise RuntimeError(f"{e!r} used before its task ran")
            else:
                a, b = value(e.a), value(e.b)
                store(e, e.op(a, b))
                drop(e.a)
                drop(e.b)
        return vals[e.uid]

    by_name = {t.name: t for t in plan.tasks}

    def launch(name):
        t = by_name[name]
        args = [value(e) for e in t.inputs]
        fn = runner(t)
        return lambda: fn(*args)

    def finish(name, result):
        t = by_name[name]
        if not isinstance(result, tuple) or len(result) != len(t.outs):
            raise ExecutionError(name, TypeError(f"expected {len(t.outs)} outputs"))
        for o, v in zip(t.outs, result):
            store(o, v)
            if refs[o.uid] == 0:
                refs[o.uid] = 1
                drop(o)
        for e in t.inputs:
            drop(e)

    order = [t.name for t in plan.tasks]
    _drive(order, {t.name: [d.name for d in t.deps()] for t in plan.tasks}, launch, finish, workers)
    out = {k: value(e) for k, e in plan.outputs.items()}
    if meter is not None:
        for e in plan.outputs.values():
            if e.uid in vals and not isinstance(e, Input):
                meter.release(("plan", e.uid))
    return out


# ---------------------------------------------------------------------------
# whole-architecture graphs
# ---------------------------------------------------------------------------


def _stage_blocks(arch) -> List[int]:
    if isinstance(arch, int):
        return [arch]
    blocks = getattr(arch, "blocks", arch)
    return [int(b) for b in blocks]


def build_graph(arch, flavor: str, direction: str = "forward") -> TaskGraph:
    """Task graph for a block count ``B``, a list of stage counts, or an ArchSpec.

    Stages are separated by a ``D`` node (downsample) that every task of the
    next stage waits on, and that waits on the previous stage's final tasks.
    """
    stages = _stage_blocks(arch)
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    make = forward_plan if direction == "forward" else backward_plan
    g = TaskGraph(f"{flavor}_{direction}")
    order = list(range(len(stages)))
    if direction == "backward":
        order.reverse()
    prev_sinks: List[str] = []
    for pos, i in enumerate(order):
        prefix = f"s{i}." if len(stages) > 1 else ""
        plan = make(flavor, stages[i])
        _add_plan(g, plan, prefix)
        names = [prefix + t.name for t in plan.tasks]
        if pos > 0:
            d = g.add_node(f"D{max(i, order[pos - 1])}", kind="D", block=i, cost=1.0).name
            for s in prev_sinks:
                g.add_edge(s, d)
            for n in names:
                if not g.preds(n):
                    g.add_edge(d, n)
        prev_sinks = [n for n in names if not g.succs(n)]
    return g
