"""Training and evaluation loops, optimizers and data feeds."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import numeric as nm
from ._validation import check_positive_int
from .autodiff import POLICIES, MemoryMeter, backward

OPTIMIZERS = ("sgd", "adamw")
DEFAULT_LR = {"sgd": 0.1, "adamw": 0.001}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} samples but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 1
    lr: Optional[float] = None
    optimizer: str = "sgd"
    batch_size: int = 32
    seed: int = 0
    policy: str = "recompute"
    workers: int = 1
    timesteps: Optional[int] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.workers, "workers")
        if self.timesteps is not None:
            check_positive_int(self.timesteps, "timesteps")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: Optional[float]
    lr: float

    def row(self):
        return [self.epoch, f"{self.train_loss:.8f}", f"{self.train_acc:.6f}",
                "" if self.test_acc is None else f"{self.test_acc:.6f}", f"{self.lr:.8g}"]


@dataclass
class RunMetrics:
    epochs: List[EpochRecord] = field(default_factory=list)
    train_time_s: float = 0.0
    compute_time_s: float = 0.0
    peak_activation_bytes: int = 0
    latency_us_per_img: Optional[float] = None
    final_test_acc: Optional[float] = None

    CSV_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "lr"]

    def csv(self) -> str:
        lines = [",".join(self.CSV_HEADER)]
        lines += [",".join(map(str, e.row())) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def summary(self, net=None) -> dict:
        """Final numbers under the column names of the benchmark table."""
        last = self.epochs[-1] if self.epochs else None
        acc = self.final_test_acc if self.final_test_acc is not None else (last.train_acc if last else None)
        out = {
            "Top1 acc(%)": None if acc is None else round(100 * acc, 4),
            "Train time(h)": self.train_time_s / 3600,
            "Compute time(h)": self.compute_time_s / 3600,
            "Inference time(us/img)": self.latency_us_per_img,
            "Mem (MB/img)": None,
            "peak_activation_bytes": self.peak_activation_bytes,
            "epochs": len(self.epochs),
        }
        if net is not None:
            from .network import count_params
            out["Para (M)"] = count_params(net) / 1e6
        return out

    def per_image_memory(self, batch_size: int):
        return self.peak_activation_bytes / batch_size / 2 ** 20


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr, self.momentum, self.wd = lr, momentum, weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, b in zip(self.params, self.buf):
            g = p.grad + self.wd * p.data if self.wd else p.grad
            b *= self.momentum
            b += g
            p.data -= np.asarray(lr, p.data.dtype) * b


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * (upd + self.wd * p.data)).astype(p.data.dtype)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_step(net, X, y, cfg: TrainConfig, opt, lr, meter=None):
    """One forward/backward/update; returns ``(loss, n_correct)``."""
    net.zero_grad()
    logits = net.forward(X, cfg.timesteps, policy=cfg.policy, meter=meter, workers=cfg.workers)
    loss, dlogits = nm.softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        net.tape_ = None
        raise TrainingDiverged(f"loss became {loss} (lr={lr:g})")
    backward(dlogits, net, cfg.policy)
    opt.step(lr)
    return loss, int((logits.argmax(axis=1) == y).sum())


def train(net, data: Dataset, cfg: TrainConfig, test: Optional[Dataset] = None,
          log=None) -> RunMetrics:
    """Mini-batch training; a pure function of (network init, data, cfg)."""
    if len(data) == 0:
        raise ValueError("empty training set")
    opt = make_optimizer(net.params(), cfg)
    rng = nm.make_rng(cfg.seed)
    meter = MemoryMeter()
    metrics = RunMetrics()
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        loss_sum, correct = 0.0, 0
        lr = cfg.lr
        for idx in _batches(len(data), cfg.batch_size, rng):
            lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            c0 = time.perf_counter()
            try:
                loss, ok = train_step(net, data.X[idx], data.y[idx], cfg, opt, lr, meter)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}") from None
            metrics.compute_time_s += time.perf_counter() - c0
            loss_sum += loss * len(idx)
            correct += ok
            step += 1
        test_acc = evaluate(net, test, workers=cfg.workers, T=cfg.timesteps)[0] if test is not None else None
        rec = EpochRecord(epoch, loss_sum / len(data), correct / len(data), test_acc, lr)
        metrics.epochs.append(rec)
        if log is not None:
            log(rec)
    metrics.train_time_s = time.perf_counter() - t0
    metrics.peak_activation_bytes = meter.peak
    if test is not None:
        metrics.final_test_acc, metrics.latency_us_per_img = evaluate(
            net, test, workers=cfg.workers, T=cfg.timesteps)
    return metrics


def predict_logits(net, X, batch_size=64, workers=1, T=None):
    out = [net.forward(X[i:i + batch_size], T, training=False, workers=workers)
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(net, data: Dataset, batch_size=64, workers=1, T=None):
    """``(top1 accuracy, microseconds per image)``; timing covers the forward only."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    elapsed = 0.0
    for idx in _batches(len(data), batch_size):
        t0 = time.perf_counter()
        logits = net.forward(data.X[idx], T, training=False, workers=workers)
        elapsed += time.perf_counter() - t0
        correct += int((logits.argmax(axis=1) == data.y[idx]).sum())
    return correct / len(data), 1e6 * elapsed / len(data)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32


def load_cifar_binary(paths, *, label_bytes: int = 1, label_index: Optional[int] = None,
                      seed: Optional[int] = None, stats=None) -> Dataset:
    """Read CIFAR binary batches (``label bytes + 3072`` pixel bytes per record).

    ``label_bytes=2`` reads the 100-class layout (coarse, fine); the fine label
    is used unless ``label_index=0``.  Pixels are scaled to [0, 1] and then
    normalised per channel with ``stats=(mean, std)`` or the data's own.
    A ``seed`` shuffles the records deterministically.
    """
    if label_bytes not in (1, 2):
        raise ValueError("label_bytes must be 1 or 2")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    rec = label_bytes + CIFAR_PIXELS
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % rec:
            n = max(1, round(len(raw) / rec))
            raise ValueError(
                f"{p}: truncated or malformed CIFAR file: expected a multiple of {rec} bytes "
                f"(e.g. {n * rec} for {n} records), got {len(raw)}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    table = np.concatenate(chunks)
    li = label_bytes - 1 if label_index is None else label_index
    y = table[:, li].astype(np.int64)
    X = table[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if stats is None:
        mean = X.mean(axis=(0, 2, 3))
        std = X.std(axis=(0, 2, 3))
    else:
        mean, std = (np.asarray(s, np.float32) for s in stats)
    X = (X - mean.reshape(1, 3, 1, 1)) / np.maximum(std, 1e-8).reshape(1, 3, 1, 1)
    classes = 10 if label_bytes == 1 else (20 if li == 0 else 100)
    if y.size and y.max() >= classes:
        raise ValueError(f"label {y.max()} out of range for {classes} classes")
    if seed is not None:
        order = nm.make_rng(seed).permutation(len(y))
        X, y = X[order], y[order]
    return Dataset(np.ascontiguousarray(X, dtype=np.float32), y, classes)


def synth_task(rng, classes: int = 2, size: int = 256, shape=(3, 8, 8), counts: int = 8,
               separation: float = 0.6) -> Dataset:
    """Spike-rate images: pixel ``i`` of class ``c`` is ``Binomial(counts, p_c[i]) / counts``.

    Class prototypes ``p_c`` are drawn in [0.2, 0.8] and pushed apart along
    one random direction each, so the classes are linearly separable with a
    wide margin for the default sizes.
    """
    if isinstance(rng, (int, np.integer)):
        rng = nm.make_rng(int(rng))
    check_positive_int(classes, "classes", minimum=2)
    check_positive_int(size, "size")
    d = int(np.prod(shape))
    base = rng.uniform(0.2, 0.8, size=d)
    dirs = rng.choice([-1.0, 1.0], size=(classes, d))
    protos = np.clip(base + 0.5 * separation * dirs * rng.uniform(0.5, 1.0, size=(classes, d)), 0.02, 0.98)
    y = np.arange(size) % classes
    y = y[rng.permutation(size)]
    X = rng.binomial(counts, protos[y]) / counts
    return Dataset(X.reshape((size,) + tuple(shape)).astype(np.float32), y.astype(np.int64), classes)


def train_test_split(data: Dataset, test_fraction=0.25, seed=0):
    order = nm.make_rng(seed).permutation(len(data))
    k = int(round(len(data) * (1 - test_fraction)))
    return data.subset(order[:k]), data.subset(order[k:])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
