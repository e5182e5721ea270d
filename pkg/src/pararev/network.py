"""Spiking reversible residual networks built from a declarative spec.

Layout (time steps stacked time-major along the batch axis)::

    image --repeat T--> conv3x3 s2 -> BN -> split channels -> (x1, x2)
    stage 0:            chain of n_0 reversible blocks
    stage i > 0:        downsample both streams, then n_i blocks
    head:               concat(y1, y2) -> global avg pool -> fc -> mean over T

Layer count: one stem conv, one fc, one downsample layer per stage after the
first and four convolutions per block (two in ``F``, two in ``G``), so
``N = 2 + (S - 1) + 4 * sum(n_i)``, which is ``5 + 4 * sum(n_i)`` for four
stages.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import numeric as nm
from ._validation import check_images
from .autodiff import ActivationPolicy, Tape, TapeNode, chain_forward
from .blocks import FLAVORS, Downsample, RevChain
from .neuron import NeuronConfig, SmoothAct, SpikeAct

# named configurations: stage block counts
NAMED_ARCHS = {
    "revsresnet21": (1, 1, 1, 1),
    "revsresnet25": (2, 1, 1, 1),
    "revsresnet37": (2, 2, 2, 2),
    "revsresnet24": (1, 2, 2),
}
DEFAULT_WIDTHS = (64, 128, 256, 448)


@dataclass(frozen=True)
class ArchSpec:
    """Stage block counts, per-stream widths and run-time settings.

    ``stem_width`` must equal twice the first stage width, since the stem
    output is split into the two streams.
    """

    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    stem_width: Optional[int] = None
    flavor: str = "pararev"
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    timesteps: int = 4
    num_classes: int = 10
    in_channels: int = 3
    activation: str = "spike"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.blocks:
            raise ValueError("at least one stage is required")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"every stage needs >= 1 block, got {list(self.blocks)}")
        if len(self.widths) != len(self.blocks):
            raise ValueError(f"{len(self.blocks)} stages but {len(self.widths)} widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {list(self.widths)}")
        if self.stem_width is None:
            object.__setattr__(self, "stem_width", 2 * self.widths[0])
        if self.stem_width != 2 * self.widths[0]:
            raise ValueError(
                f"stem width {self.stem_width} must be twice the first stream width {self.widths[0]}")
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        if self.timesteps < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("timesteps >= 1, num_classes >= 2 and in_channels >= 1 are required")
        if self.activation not in ("spike", "smooth"):
            raise ValueError("activation must be 'spike' or 'smooth'")

    @property
    def stages(self) -> int:
        return len(self.blocks)

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.stages

    def with_(self, **kw) -> "ArchSpec":
        return replace(self, **kw)

    # -- key = value config ------------------------------------------------

    def to_config(self) -> str:
        n = self.neuron
        lines = [
            "[arch]",
            f"blocks = {','.join(map(str, self.blocks))}",
            f"widths = {','.join(map(str, self.widths))}",
            f"stem_width = {self.stem_width}",
            f"flavor = {self.flavor}",
            f"timesteps = {self.timesteps}",
            f"num_classes = {self.num_classes}",
            f"in_channels = {self.in_channels}",
            f"activation = {self.activation}",
            f"neuron = {n.kind}",
            f"threshold = {n.threshold!r}",
            f"decay = {n.decay!r}",
            f"surrogate = {n.surrogate}",
            f"surrogate_width = {n.surrogate_width!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config(cls, text: str, section: str = "arch") -> "ArchSpec":
        cp = configparser.ConfigParser()
        body = text if text.lstrip().startswith("[") else f"[{section}]\n{text}"
        cp.read_string(body)
        if not cp.has_section(section):
            raise ValueError(f"config has no [{section}] section")
        return cls.from_mapping(dict(cp[section]))

    @classmethod
    def from_mapping(cls, kv: dict) -> "ArchSpec":
        known = {"blocks", "widths", "stem_width", "flavor", "timesteps", "num_classes", "in_channels",
                 "activation", "neuron", "threshold", "decay", "surrogate", "surrogate_width"}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown arch keys: {sorted(unknown)}")
        ints = lambda s: tuple(int(v) for v in str(s).replace("-", ",").split(",") if v.strip())
        args = {}
        if "blocks" in kv:
            args["blocks"] = parse_blocks(kv["blocks"])
        if "widths" in kv:
            args["widths"] = ints(kv["widths"])
        for key in ("stem_width", "timesteps", "num_classes", "in_channels"):
            if key in kv:
                args[key] = int(kv[key])
        for key in ("flavor", "activation"):
            if key in kv:
                args[key] = kv[key].strip()
        ncfg = {}
        if "neuron" in kv:
            ncfg["kind"] = kv["neuron"].strip()
        for key in ("threshold", "decay", "surrogate_width"):
            if key in kv:
                ncfg[key] = float(kv[key])
        if "surrogate" in kv:
            ncfg["surrogate"] = kv["surrogate"].strip()
        if ncfg:
            args["neuron"] = NeuronConfig(**ncfg)
        if "blocks" in args and "widths" not in args:
            args["widths"] = default_widths(len(args["blocks"]))
        return cls(**args)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["neuron"] = NeuronConfig(**d.get("neuron", {}))
        return cls(**d)


def default_widths(stages: int) -> Tuple[int, ...]:
    if stages <= len(DEFAULT_WIDTHS):
        return DEFAULT_WIDTHS[:stages]
    return DEFAULT_WIDTHS + (DEFAULT_WIDTHS[-1],) * (stages - len(DEFAULT_WIDTHS))


def parse_blocks(text) -> Tuple[int, ...]:
    """``"1,1,1,1"``, ``"2-2-2-2"`` or a named config such as ``revsresnet37``."""
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    s = str(text).strip().lower()
    if s in NAMED_ARCHS:
        return NAMED_ARCHS[s]
    try:
        return tuple(int(v) for v in s.replace("-", ",").split(",") if v.strip())
    except ValueError:
        raise ValueError(f"cannot parse block counts {text!r}") from None


def count_layers(spec) -> int:
    """Weight layers: stem conv + fc + one per downsample + 4 per block."""
    blocks = spec.blocks if isinstance(spec, ArchSpec) else parse_blocks(spec)
    if not blocks or any(b < 1 for b in blocks):
        raise ValueError(f"invalid block counts {blocks}")
    return 2 + (len(blocks) - 1) + 4 * sum(blocks)


class Stage:
    def __init__(self, down: Optional[Downsample], chain: RevChain):
        self.down = down
        self.chain = chain

    def params(self):
        return (self.down.params() if self.down else []) + self.chain.params()


class Network:
    def __init__(self, spec: ArchSpec, rng=None, dtype=nm.DTYPE, zero=False):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else nm.make_rng(0)
        act = SpikeAct(spec.neuron) if spec.activation == "spike" else SmoothAct()
        self.act = act
        shape = (spec.stem_width, spec.in_channels, 3, 3)
        w = np.zeros(shape, dtype) if zero else nm.he_normal(rng, shape, dtype)
        self.stem_conv = nm.ConvParams(nm.Param(w, "stem.conv"), stride=2)
        self.stem_bn = nm.NormParams.create("batch", spec.stem_width, dtype=dtype, name="stem.bn")
        self.stages: List[Stage] = []
        c_prev = spec.widths[0]
        for i, (n, c) in enumerate(zip(spec.blocks, spec.widths)):
            down = None
            if i > 0:
                down = Downsample(c_prev, c, rng, act=act, dtype=dtype, name=f"s{i}.down", zero=zero)
            chain = RevChain(c, n, spec.flavor, rng, act=act, dtype=dtype, name=f"s{i}", zero=zero)
            self.stages.append(Stage(down, chain))
            c_prev = c
        feat = 2 * spec.widths[-1]
        fw = np.zeros((feat, spec.num_classes), dtype) if zero else (
            rng.standard_normal((feat, spec.num_classes)) * np.sqrt(1.0 / feat)).astype(dtype)
        self.fc_w = nm.Param(fw, "head.fc.weight")
        self.fc_b = nm.Param(np.zeros(spec.num_classes, dtype), "head.fc.bias")
        self.tape_: Optional[Tape] = None

    # -- parameters --------------------------------------------------------

    def params(self) -> List[nm.Param]:
        out = [self.stem_conv.weight, self.stem_bn.gain, self.stem_bn.bias]
        for st in self.stages:
            out += st.params()
        return out + [self.fc_w, self.fc_b]

    def norms(self) -> List[nm.NormParams]:
        """Batch-norm layers holding running statistics, in a fixed order."""
        out = [self.stem_bn]
        for st in self.stages:
            if st.down:
                out += [b.bn for b in st.down.branches]
            out += [fn.bn for _, _, fn in st.chain.functions()]
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_arrays(self):
        """``(name, array)`` for every parameter and running statistic."""
        out = [(p.name, p.data) for p in self.params()]
        for i, bn in enumerate(self.norms()):
            out.append((f"norm{i}.running_mean", bn.running_mean))
            out.append((f"norm{i}.running_var", bn.running_var))
        return out

    # -- forward -------------------------------------------------------------

    def _check_input(self, X):
        X = check_images(X, dtype=self.dtype)
        s = self.spec
        if X.shape[1] != s.in_channels:
            raise ValueError(f"input has {X.shape[1]} channels, network expects {s.in_channels}")
        f = s.downsample_factor
        if X.shape[2] % f or X.shape[3] % f:
            raise ValueError(f"input spatial size {X.shape[2:]} not divisible by {f}")
        return X

    def forward(self, X, T=None, *, training=False, policy=None, meter=None, workers=1,
                commit_stats=True):
        """Logits ``(N, num_classes)`` averaged over ``T`` steps.

        With ``policy`` set, a tape is recorded for :func:`autodiff.backward`.
        Batch statistics are used when ``training``; running statistics are
        then updated afterwards (in a fixed order) if ``commit_stats``.
        """
        X = self._check_input(X)
        T = int(T or self.spec.timesteps)
        tape = None
        if policy is not None:
            training = True
            tape = Tape(ActivationPolicy.coerce(policy), T, meter, workers)
        with threadpool_limits(limits=1):
            logits = self._forward(X, T, training, tape, workers)
        if tape is not None:
            self.tape_ = tape
        if training and commit_stats and tape is not None:
            for bn, stats in tape.norm_stats:
                nm.update_running_stats(bn, stats)
        return logits

    def _forward(self, X, T, training, tape: Optional[Tape], workers):
        n = X.shape[0]
        xs = np.ascontiguousarray(np.broadcast_to(X, (T,) + X.shape).reshape((T * n,) + X.shape[1:]))
        h = nm.conv2d(xs, self.stem_conv)
        z, bcache, stats = nm.batch_norm_forward(h, self.stem_bn, training)
        del h
        c = self.spec.widths[0]
        a, b = np.ascontiguousarray(z[:, :c]), np.ascontiguousarray(z[:, c:])
        if tape is not None:
            tape.norm_stats.append((self.stem_bn, stats))

            def stem_back(g):
                dz = np.concatenate([g["stem.a"], g["stem.b"]], axis=1)
                dh = nm.batch_norm_backward(dz, bcache, self.stem_bn)
                nm.conv2d_backward(dh, xs, self.stem_conv, need_input_grad=False)
                return {}

            node = tape.record(TapeNode("stem", ("input",), ("stem.a", "stem.b"), stem_back))
            tape.save(node, "transition", xs.nbytes + bcache.xhat.nbytes)
        prev = ("stem.a", "stem.b")
        for i, st in enumerate(self.stages):
            if st.down is not None:
                (a, b), caches, dstats = st.down.forward(a, b, T, training=training)
                if tape is not None:
                    for br, s in zip(st.down.branches, dstats):
                        tape.norm_stats.append((br.bn, s))
                    node = tape.record(TapeNode(
                        f"s{i}.down", prev, (f"s{i}.down.a", f"s{i}.down.b"),
                        _down_back(st.down, caches, T, prev, f"s{i}.down")))
                    tape.save(node, "transition", sum(cc.nbytes for cc in caches))
                    prev = (f"s{i}.down.a", f"s{i}.down.b")
                del caches
            name = f"s{i}.chain"
            a, b = chain_forward(st.chain, a, b, T, training=training, tape=tape, workers=workers, name=name)
            if tape is not None:
                _alias(tape, prev, (f"{name}.x1", f"{name}.x2"))
                prev = (f"{name}.y1", f"{name}.y2")
        feats = np.concatenate([a, b], axis=1)
        pooled = nm.avg_pool_global(feats)
        step_logits = nm.linear(pooled, self.fc_w.data, self.fc_b.data)
        logits = step_logits.reshape(T, n, -1).mean(axis=0)
        if tape is not None:
            shape = feats.shape
            c_last = a.shape[1]

            def head_back(g):
                d = g["logits"]
                dstep = np.broadcast_to(d / T, (T,) + d.shape).reshape(T * n, -1).astype(d.dtype)
                dpool = nm.linear_backward(dstep, pooled, self.fc_w, self.fc_b)
                dfeat = nm.avg_pool_global_backward(dpool, shape)
                return {prev[0]: np.ascontiguousarray(dfeat[:, :c_last]),
                        prev[1]: np.ascontiguousarray(dfeat[:, c_last:])}

            node = tape.record(TapeNode("head", prev, ("logits",), head_back))
            tape.save(node, "transition", pooled.nbytes)
        return logits

    def predict_logits(self, X, T=None, workers=1):
        return self.forward(X, T, training=False, workers=workers)

    def __repr__(self):
        s = self.spec
        return (f"Network({s.flavor}, blocks={list(s.blocks)}, widths={list(s.widths)}, "
                f"T={s.timesteps}, layers={count_layers(s)})")


def _down_back(down: Downsample, caches, T, in_slots, name):
    def back(g):
        d1, d2 = down.backward(g[f"{name}.a"], g[f"{name}.b"], caches, T)
        return {in_slots[0]: d1, in_slots[1]: d2}
    return back


def _alias(tape: Tape, src, dst):
    """Pass-through node: the chain input slots are the previous op's outputs."""
    def back(g):
        return {s: g[d] for s, d in zip(src, dst) if d in g}
    # inserted before the chain node so the reversed walk reaches it afterwards
    tape.nodes.insert(len(tape.nodes) - 1, TapeNode("alias", src, dst, back))


def build(spec: ArchSpec, rng=None, *, seed: int = 0, dtype=nm.DTYPE) -> Network:
    """A network with fan-in-scaled normal weights drawn from ``rng`` (or ``seed``)."""
    return Network(spec, rng if rng is not None else nm.make_rng(seed), dtype=dtype)


def forward(net: Network, X, T=None, workers=1) -> np.ndarray:
    return net.forward(X, T, training=False, workers=workers)


def count_params(net: Network) -> int:
    return int(sum(p.size for p in net.params()))


# ---------------------------------------------------------------------------
# checkpoints: flat little-endian float32 blob + JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(net: Network, path) -> Tuple[Path, Path]:
    path = Path(path)
    blob = path.with_suffix(".bin")
    manifest = path.with_suffix(".json")
    entries = []
    offset = 0
    with open(blob, "wb") as fh:
        for name, arr in net.state_arrays():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
            offset += data.nbytes
    meta = {"format": "pararev-checkpoint", "version": 1, "dtype": "float32-le",
            "spec": net.spec.to_dict(), "total_bytes": offset, "tensors": entries}
    manifest.write_text(json.dumps(meta, indent=2) + "\n")
    return blob, manifest


def load_checkpoint(path) -> Network:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("format") != "pararev-checkpoint":
        raise ValueError(f"{path.with_suffix('.json')} is not a checkpoint manifest")
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != meta["total_bytes"]:
        raise ValueError(f"checkpoint blob has {len(raw)} bytes, manifest expects {meta['total_bytes']}")
    net = Network(ArchSpec.from_dict(meta["spec"]), zero=True)
    arrays = dict(net.state_arrays())
    for e in meta["tensors"]:
        data = np.frombuffer(raw, dtype="<f4", count=e["count"], offset=e["offset"])
        target = arrays[e["name"]]
        if list(target.shape) != e["shape"]:
            raise ValueError(f"shape mismatch for {e['name']}: {target.shape} vs {e['shape']}")
        target[...] = data.reshape(target.shape)
    return net
