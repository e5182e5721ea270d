"""Integrate-and-fire neurons over discrete time with surrogate gradients.

Forward dynamics per step::

    V_pre = V_prev + X            (IF)
    V_pre = decay * V_prev + X    (LIF)
    S     = 1 where V_pre >= threshold else 0
    V     = V_pre * (1 - S)       (hard reset)

The spike function has zero derivative almost everywhere, so the backward
pass substitutes a surrogate derivative evaluated at ``V_pre - threshold``.
The reset product is treated straight-through: ``S`` is held constant inside
``V_pre * (1 - S)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ._validation import check_same_shape

KINDS = ("IF", "LIF")
SURROGATES = ("triangular", "arctan")


@dataclass(frozen=True)
class NeuronConfig:
    kind: str = "IF"
    threshold: float = 1.0
    decay: float = 0.5
    surrogate: str = "triangular"
    surrogate_width: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"neuron kind must be one of {KINDS}, got {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.kind == "LIF" and not 0 < self.decay < 1:
            raise ValueError(f"LIF decay must lie in (0, 1), got {self.decay}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}, got {self.surrogate!r}")
        if not self.surrogate_width > 0:
            raise ValueError("surrogate_width must be positive")

    @property
    def leak(self) -> float:
        """Multiplier on the previous potential (1.0 for IF)."""
        return 1.0 if self.kind == "IF" else self.decay


@dataclass
class NeuronState:
    """Membrane potential after reset and the last emitted spike map."""

    V: np.ndarray
    S: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "NeuronState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def integrate(v_prev: np.ndarray, x: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    if cfg.kind == "IF":
        return v_prev + x
    return v_prev * np.asarray(cfg.decay, dtype=v_prev.dtype) + x


def leaky_integrate(v_prev: np.ndarray, x: np.ndarray, decay: float) -> np.ndarray:
    """LIF charging with an arbitrary decay (no range check); used to cross-check IF."""
    return v_prev * np.asarray(decay, dtype=v_prev.dtype) + x


def fire(v_pre: np.ndarray, threshold: float) -> np.ndarray:
    # H(0) = 1: a potential exactly at threshold spikes
    return (v_pre >= threshold).astype(v_pre.dtype)


def neuron_step(state: NeuronState, X: np.ndarray, cfg: NeuronConfig):
    """Advance one time step; returns ``(S, new_state)``."""
    check_same_shape(state.V, X, "neuron_step")
    v_pre = integrate(state.V, X, cfg)
    s = fire(v_pre, cfg.threshold)
    return s, NeuronState(v_pre * (1 - s), s)


def surrogate_grad(v_pre: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    """dS/dV stand-in, centred on the threshold."""
    d = v_pre - np.asarray(cfg.threshold, dtype=v_pre.dtype)
    w = np.asarray(cfg.surrogate_width, dtype=v_pre.dtype)
    if cfg.surrogate == "triangular":
        return np.maximum(0, 1 - np.abs(d) / w) / w
    return (w / np.pi) / (1 + (w * d) ** 2)


def neuron_backward(grad_S, grad_V_next, v_pre, cfg: NeuronConfig):
    """Backward of one step.

    ``grad_V_next`` is the gradient arriving at the post-reset potential from
    the following step.  Returns ``(grad_X, grad_V_prev)``.
    """
    if v_pre is None:
        raise ValueError("neuron_backward needs the saved pre-reset potential")
    check_same_shape(grad_S, v_pre, "neuron_backward")
    s = fire(v_pre, cfg.threshold)
    g_pre = grad_S * surrogate_grad(v_pre, cfg) + grad_V_next * (1 - s)
    leak = cfg.leak
    return g_pre, (g_pre if leak == 1.0 else g_pre * np.asarray(leak, dtype=g_pre.dtype))


def spike_sequence(x: np.ndarray, T: int, cfg: NeuronConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Run ``T`` steps from zero potential over a time-major stacked batch.

    Returns spikes and the per-step pre-reset potentials, both shaped like ``x``.
    """
    steps = x.reshape(T, -1)
    spikes = np.empty_like(steps)
    v_pres = np.empty_like(steps)
    v = np.zeros_like(steps[0])
    for t in range(T):
        v_pre = integrate(v, steps[t], cfg)
        s = fire(v_pre, cfg.threshold)
        v_pres[t] = v_pre
        spikes[t] = s
        v = v_pre * (1 - s)
    return spikes.reshape(x.shape), v_pres.reshape(x.shape)


def spike_sequence_backward(grad_spikes: np.ndarray, v_pres: np.ndarray, T: int, cfg: NeuronConfig):
    """BPTT through :func:`spike_sequence`, newest step first."""
    gs = grad_spikes.reshape(T, -1)
    vp = v_pres.reshape(T, -1)
    gx = np.empty_like(gs)
    g_next = np.zeros_like(gs[0])
    for t in range(T - 1, -1, -1):
        gx[t], g_next = neuron_backward(gs[t], g_next, vp[t], cfg)
    return gx.reshape(grad_spikes.shape)


class SpikeAct:
    """Spiking activation over a time-major stacked tensor.

    ``forward`` returns the spike tensor and the pre-reset potentials needed
    by ``backward``.
    """

    smooth = False

    def __init__(self, cfg: NeuronConfig = NeuronConfig()):
        self.cfg = cfg

    def forward(self, x, T):
        return spike_sequence(x, T, self.cfg)

    def backward(self, grad, saved, T):
        return spike_sequence_backward(grad, saved, T, self.cfg)

    def __repr__(self):
        return f"SpikeAct({self.cfg.kind}, threshold={self.cfg.threshold})"


class SmoothAct:
    """``tanh`` stand-in for the spike, so whole blocks can be finite-differenced."""

    smooth = True

    def forward(self, x, T):
        y = np.tanh(x)
        return y, y

    def backward(self, grad, saved, T):
        return grad * (1 - saved * saved)

    def __repr__(self):
        return "SmoothAct()"
