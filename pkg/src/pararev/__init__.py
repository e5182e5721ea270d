"""Reversible spiking residual networks with parallel-friendly couplings."""

from .autodiff import ActivationPolicy, MemoryMeter, backward, gradcheck_differentiable_path, measure_peak_memory
from .blocks import (FusedFn, ResidualFn, RevChain, downsample_block, pararev_forward, pararev_forward_fused,
                     pararev_inverse, rev_forward, rev_inverse)
from .estimator import ParaRevSNNClassifier
from .network import ArchSpec, Network, build, count_layers, count_params, forward
from .neuron import NeuronConfig, NeuronState, neuron_backward, neuron_step
from .scheduler import TaskGraph, build_graph, critical_path, execute, simulate
from .training import Dataset, RunMetrics, TrainConfig, evaluate, load_cifar_binary, synth_task, train

__version__ = "0.1.0"

__all__ = [
    "ActivationPolicy", "ArchSpec", "Dataset", "FusedFn", "MemoryMeter", "Network", "NeuronConfig",
    "NeuronState", "ParaRevSNNClassifier", "ResidualFn", "RevChain", "RunMetrics", "TaskGraph",
    "TrainConfig", "backward", "build", "build_graph", "count_layers", "count_params", "critical_path",
    "downsample_block", "evaluate", "execute", "forward", "gradcheck_differentiable_path",
    "load_cifar_binary", "measure_peak_memory", "neuron_backward", "neuron_step", "pararev_forward",
    "pararev_forward_fused", "pararev_inverse", "rev_forward", "rev_inverse", "simulate", "synth_task",
    "train",
]
