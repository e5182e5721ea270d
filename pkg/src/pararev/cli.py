"""Command-line entry point: ``pararev {train,eval,verify,bench,graph}``.

Exit codes: 0 success, 1 failed check or run failure, 2 usage error.
Settings resolve as built-in defaults < ``--config`` file < explicit flags.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import numeric as nm

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# settings resolution
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "arch": "1,1,1,1", "widths": None, "flavor": "pararev", "policy": "recompute", "data": "synth",
    "epochs": 1, "lr": None, "optimizer": "sgd", "batch_size": 32, "seed": 0, "workers": 1,
    "timesteps": 4, "neuron": "IF", "surrogate": "triangular", "classes": 2, "samples": 256,
    "image_size": None, "test_fraction": 0.25, "out": "runs/train",
}


def _read_config(path: Optional[str]) -> Dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    cp = configparser.ConfigParser()
    cp.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    out = {}
    for section in cp.sections():
        for k, v in cp[section].items():
            out[k.replace("-", "_")] = v
    return out


def _resolve(args, defaults: Dict[str, object]) -> Dict[str, object]:
    cfg = dict(defaults)
    from_file = _read_config(getattr(args, "config", None))
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for k, v in from_file.items():
        cfg[k] = _coerce(v, defaults[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _coerce(text: str, like):
    if isinstance(like, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        try:
            return int(text)
        except ValueError:
            try:
                return float(text)
            except ValueError:
                return text.strip()
    return text.strip()


def _print_config(name: str, cfg: Dict[str, object]) -> None:
    print(f"# {name} resolved config")
    for k in sorted(cfg):
        print(f"#   {k} = {cfg[k]}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in str(text).replace("-", ",").split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _spec(cfg, num_classes):
    from .network import ArchSpec, default_widths, parse_blocks
    from .neuron import NeuronConfig

    try:
        blocks = parse_blocks(cfg["arch"])
        widths = _int_list(cfg["widths"]) if cfg.get("widths") else default_widths(len(blocks))
        return ArchSpec(blocks=blocks, widths=tuple(widths), flavor=cfg["flavor"],
                        neuron=NeuronConfig(cfg.get("neuron", "IF"), surrogate=cfg.get("surrogate", "triangular")),
                        timesteps=int(cfg["timesteps"]), num_classes=num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_data(cfg, stages: int):
    """``(train, test)`` datasets from ``synth`` or CIFAR binary file(s)/directory."""
    from .training import load_cifar_binary, synth_task, train_test_split

    src = str(cfg["data"])
    if src == "synth":
        size = int(cfg.get("image_size") or max(8, 2 ** stages))
        data = synth_task(nm.make_rng(int(cfg["seed"])), int(cfg["classes"]), int(cfg["samples"]),
                          shape=(3, size, size))
        return train_test_split(data, float(cfg["test_fraction"]), seed=int(cfg["seed"]))
    p = Path(src)
    if p.is_dir():
        train_files = sorted(p.glob("data_batch_*.bin")) or sorted(p.glob("train.bin"))
        test_files = sorted(p.glob("test_batch.bin")) or sorted(p.glob("test.bin"))
        if not train_files:
            raise UsageError(f"no CIFAR training batches in {p}")
        lb = 2 if (p / "train.bin").exists() else 1
        raw = load_cifar_binary(train_files, label_bytes=lb, stats=((0, 0, 0), (1, 1, 1)))
        stats = (raw.X.mean(axis=(0, 2, 3)), raw.X.std(axis=(0, 2, 3)))
        train = load_cifar_binary(train_files, label_bytes=lb, seed=int(cfg["seed"]), stats=stats)
        test = load_cifar_binary(test_files, label_bytes=lb, stats=stats) if test_files else None
        return train, test
    if not p.is_file():
        raise UsageError(f"data source not found: {src}")
    data = load_cifar_binary(p, seed=int(cfg["seed"]))
    return train_test_split(data, float(cfg["test_fraction"]), seed=int(cfg["seed"]))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .network import build, count_layers, count_params, save_checkpoint
    from .training import TrainConfig, evaluate, train

    cfg = _resolve(args, TRAIN_DEFAULTS)
    _print_config("train", cfg)
    spec = _spec(cfg, 2)
    train_set, test_set = _load_data(cfg, spec.stages)
    spec = spec.with_(num_classes=train_set.num_classes)
    if train_set.X.shape[2] % spec.downsample_factor:
        raise UsageError(f"image size {train_set.X.shape[2]} not divisible by {spec.downsample_factor}")
    try:
        tcfg = TrainConfig(epochs=int(cfg["epochs"]), lr=cfg["lr"], optimizer=cfg["optimizer"],
                           batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]), policy=cfg["policy"],
                           workers=int(cfg["workers"]), timesteps=int(cfg["timesteps"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    net = build(spec, nm.make_rng(int(cfg["seed"])))
    print(f"# network: {net!r}, params={count_params(net)}, layers={count_layers(spec)}")

    def log(rec):
        test = "" if rec.test_acc is None else f" test_acc={rec.test_acc:.4f}"
        print(f"epoch {rec.epoch}: loss={rec.train_loss:.6f} train_acc={rec.train_acc:.4f}{test}")

    metrics = train(net, train_set, tcfg, test=test_set, log=log)
    eval_set = test_set if test_set is not None else train_set
    if metrics.final_test_acc is None:
        metrics.final_test_acc, metrics.latency_us_per_img = evaluate(net, eval_set, workers=tcfg.workers)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "checkpoint")
    _write(out / "metrics.csv", metrics.csv())
    summary = metrics.summary(net)
    summary["Mem (MB/img)"] = metrics.per_image_memory(tcfg.batch_size)
    summary["Layers"] = count_layers(spec)
    summary["config"] = {k: v for k, v in cfg.items()}
    _write(out / "summary.json", json.dumps(summary, indent=2, default=str) + "\n")
    _write(out / "arch.cfg", spec.to_config())
    print(f"eval accuracy {metrics.final_test_acc:.4f}, latency {metrics.latency_us_per_img:.1f} us/img")
    print(f"wrote {out / 'checkpoint.bin'}, {out / 'metrics.csv'}, {out / 'summary.json'}")
    return EXIT_OK


EVAL_DEFAULTS = {"checkpoint": None, "data": "synth", "seed": 0, "workers": 1, "batch_size": 64,
                 "classes": None, "samples": 256, "image_size": None, "test_fraction": 0.25}


def cmd_eval(args) -> int:
    from .network import load_checkpoint
    from .training import evaluate

    cfg = _resolve(args, EVAL_DEFAULTS)
    _print_config("eval", cfg)
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    ck = Path(cfg["checkpoint"])
    if ck.suffix in (".bin", ".json"):
        ck = ck.with_suffix("")
    if not ck.with_suffix(".json").is_file():
        raise UsageError(f"checkpoint manifest not found: {ck.with_suffix('.json')}")
    net = load_checkpoint(ck)
    cfg["classes"] = cfg["classes"] or net.spec.num_classes
    _, test = _load_data(cfg, net.spec.stages)
    acc, lat = evaluate(net, test, batch_size=int(cfg["batch_size"]), workers=int(cfg["workers"]))
    print(json.dumps({"Top1 acc(%)": round(100 * acc, 4), "Inference time(us/img)": lat,
                      "samples": len(test)}, indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify as V

    names = list(V.SUITES) if args.suite == "all" else [args.suite]
    print(f"# verify resolved config\n#   suite = {args.suite}\n#   seed = {args.seed}")
    failed = 0
    for name in names:
        print(f"== {name}")
        if name == "critical-path":
            print(V.format_critical_path_table(V.critical_path_table()))
            checks = V.suite_critical_path()
        elif name == "memory-scaling":
            by_depth, by_T = V.memory_table(seed=args.seed)
            print("policy      D   peak_bytes")
            for (p, d), b in sorted(by_depth.items()):
                print(f"{p:<10} {d:>3}  {b}")
            print("recompute   T   peak_bytes (D=4)")
            for t, b in sorted(by_T.items()):
                print(f"{'':<10} {t:>3}  {b}")
            checks = V.suite_memory_scaling(seed=args.seed)
        else:
            fn = V.SUITES[name]
            checks = fn(seed=args.seed) if "seed" in fn.__code__.co_varnames else fn()
        for c in checks:
            print(c.line())
        failed += sum(not c.passed for c in checks)
    print(f"{'all checks passed' if not failed else f'{failed} check(s) failed'}")
    return EXIT_OK if not failed else EXIT_FAIL


BENCH_DEFAULTS = {"arch": "8", "widths": None, "flavors": "baseline,pararev,pararev-fused",
                  "workers": "1,4", "repeat": 5, "timesteps": 2, "batch": 8, "image_size": 16,
                  "policy": "recompute", "seed": 0, "out": None}


def cmd_bench(args) -> int:
    from .bench import bench_table, rows_to_csv

    cfg = _resolve(args, BENCH_DEFAULTS)
    _print_config("bench", cfg)
    cfg.update(flavor="baseline", neuron="IF", surrogate="triangular")
    if not cfg["widths"]:
        from .network import parse_blocks
        try:
            cfg["widths"] = ",".join(["16"] * len(parse_blocks(cfg["arch"])))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    spec = _spec(cfg, 10)
    flavors = [f.strip() for f in str(cfg["flavors"]).split(",") if f.strip()]
    size = int(cfg["image_size"])
    if size % spec.downsample_factor:
        raise UsageError(f"image size {size} not divisible by {spec.downsample_factor}")
    rows = bench_table(spec, flavors, _int_list(cfg["workers"]), repeat=int(cfg["repeat"]),
                       batch=int(cfg["batch"]), size=size, seed=int(cfg["seed"]), policy=cfg["policy"])
    text = rows_to_csv(rows)
    print(text, end="")
    if cfg["out"]:
        _write(Path(cfg["out"]), text)
    return EXIT_OK


def cmd_graph(args) -> int:
    from .network import parse_blocks
    from .scheduler import TaskGraph, build_graph, critical_path

    print(f"# graph resolved config\n#   arch = {args.arch}\n#   flavor = {args.flavor}\n"
          f"#   direction = {args.direction}\n#   out = {args.out}")
    try:
        blocks = parse_blocks(args.arch)
        g = build_graph(list(blocks), args.flavor, args.direction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = g.to_edge_list()
    rep = critical_path(g)
    back = critical_path(TaskGraph.from_edge_list(text))
    if args.out:
        _write(Path(args.out), text)
    else:
        print(text, end="")
    print(rep.to_json(nodes=len(g), edges=len(g.edges), reimported_length=back.length))
    return EXIT_OK if back.length == rep.length else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .autodiff import POLICIES
    from .blocks import FLAVORS

    p = argparse.ArgumentParser(prog="pararev", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write checkpoint + metrics")
    t.add_argument("--config", help="key = value settings file; flags override it")
    t.add_argument("--arch", help="stage block counts, e.g. 1,1,1,1 or revsresnet37")
    t.add_argument("--widths", help="per-stream stage widths, e.g. 16,32")
    t.add_argument("--flavor", choices=FLAVORS)
    t.add_argument("--policy", choices=POLICIES)
    t.add_argument("--data", help="'synth', a CIFAR .bin file or a directory of batches")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "adamw"))
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--timesteps", type=int)
    t.add_argument("--neuron", choices=("IF", "LIF"))
    t.add_argument("--surrogate", choices=("triangular", "arctan"))
    t.add_argument("--classes", type=int, help="synthetic task classes")
    t.add_argument("--samples", type=int, help="synthetic task size")
    t.add_argument("--image-size", dest="image_size", type=int, help="synthetic image side")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--checkpoint", help="checkpoint path (without or with .bin/.json)")
    e.add_argument("--data")
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--batch-size", dest="batch_size", type=int)
    e.add_argument("--samples", type=int)
    e.add_argument("--image-size", dest="image_size", type=int)
    e.set_defaults(func=cmd_eval)

    from .verify import SUITES
    v = sub.add_parser("verify", help="run self-check suites")
    v.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time forward/backward per flavor and worker count")
    b.add_argument("--config")
    b.add_argument("--arch")
    b.add_argument("--widths")
    b.add_argument("--flavors")
    b.add_argument("--workers", help="comma-separated worker counts")
    b.add_argument("--repeat", type=int)
    b.add_argument("--timesteps", type=int)
    b.add_argument("--batch", type=int)
    b.add_argument("--image-size", dest="image_size", type=int)
    b.add_argument("--policy", choices=POLICIES)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("graph", help="write the task-graph edge list")
    g.add_argument("--arch", default="4")
    g.add_argument("--flavor", choices=FLAVORS, default="pararev")
    g.add_argument("--direction", choices=("forward", "backward"), default="forward")
    g.add_argument("--out")
    g.set_defaults(func=cmd_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pararev {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, never swallowed silently
        print(f"pararev {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
