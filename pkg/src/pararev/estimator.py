"""scikit-learn style classifier wrapping network construction and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import numeric as nm
from ._validation import check_images, check_is_fitted, check_labels
from .network import ArchSpec, build, parse_blocks
from .neuron import NeuronConfig
from .training import Dataset, TrainConfig, predict_logits, train


class ParaRevSNNClassifier(ClassifierMixin, BaseEstimator):
    """Spiking reversible residual network classifier for ``(N, C, H, W)`` images.

    Parameters mirror :class:`ArchSpec` and :class:`TrainConfig`.  After
    ``fit`` the trained network is in ``network_`` and per-epoch metrics in
    ``metrics_``.
    """

    def __init__(self, blocks=(1, 1), widths=(16, 32), flavor="pararev", timesteps=4,
                 neuron="IF", threshold=1.0, decay=0.5, surrogate="triangular",
                 epochs=5, lr=None, optimizer="adamw", batch_size=32, policy="recompute",
                 workers=1, random_state=0):
        self.blocks = blocks
        self.widths = widths
        self.flavor = flavor
        self.timesteps = timesteps
        self.neuron = neuron
        self.threshold = threshold
        self.decay = decay
        self.surrogate = surrogate
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.policy = policy
        self.workers = workers
        self.random_state = random_state

    def _spec(self, in_channels, n_classes):
        return ArchSpec(
            blocks=parse_blocks(self.blocks), widths=tuple(self.widths), flavor=self.flavor,
            neuron=NeuronConfig(self.neuron, self.threshold, self.decay, self.surrogate),
            timesteps=self.timesteps, num_classes=max(n_classes, 2), in_channels=in_channels,
        )

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, lr=self.lr, optimizer=self.optimizer,
                           batch_size=self.batch_size, seed=self.random_state,
                           policy=self.policy, workers=self.workers)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        spec = self._spec(X.shape[1], len(self.classes_))
        self.network_ = build(spec, nm.make_rng(self.random_state))
        self.metrics_ = train(self.network_, Dataset(X, encoded.astype(np.int64), len(self.classes_)),
                              self._train_config())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_images(X)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features per sample, "
                             f"expected {self.n_features_in_}")
        return predict_logits(self.network_, X, self.batch_size, self.workers)[:, :len(self.classes_)]

    def predict_proba(self, X):
        return nm.softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
