"""scikit-learn compatible wrappers around the federated runners.

Hospitals are given per sample through ``groups`` in :meth:`fit`, the same
convention scikit-learn's group splitters use.  Without ``groups`` every
sample belongs to a single hospital.
"""
from __future__ import annotations

import warnings
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, validate_data

from .data import Dataset, default_class_names
from .metrics import ConvergenceSettings, detect_convergence
from .model import ModelSpec, TrainSettings, init_params, predict_proba, pretrain_base
from .protocol import HospitalNode, run_cfl, run_fedavg, run_ftl


def _hospitals(X, y, groups, names):
    if groups is None:
        groups = np.zeros(len(y), dtype=np.int64)
    groups = np.asarray(groups)
    if groups.shape != (len(y),):
        raise ValueError(f"groups must have shape ({len(y)},), got {groups.shape}")
    nodes = []
    for i, g in enumerate(np.unique(groups)):
        mask = groups == g
        nodes.append(HospitalNode(i, Dataset(X[mask], y[mask], names)))
    return nodes, {g: i for i, g in enumerate(np.unique(groups))}


class _FederatedClassifierBase(ClassifierMixin, BaseEstimator):
    def __init__(
        self,
        hidden_dim=16,
        learning_rate=0.1,
        local_epochs=1,
        batch_size=32,
        max_rounds=50,
        loss_epsilon=1e-3,
        accuracy_epsilon=1e-3,
        patience=3,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.max_rounds = max_rounds
        self.loss_epsilon = loss_epsilon
        self.accuracy_epsilon = accuracy_epsilon
        self.patience = patience
        self.random_state = random_state

    def _seed(self) -> int:
        if self.random_state is None:
            raise ValueError("random_state must be an integer; runs are always seeded")
        return int(self.random_state)

    def _prepare(self, X, y, groups):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        names = default_class_names(len(self.classes_))
        self.spec_ = ModelSpec(X.shape[1], int(self.hidden_dim), len(self.classes_))
        self.settings_ = TrainSettings(
            float(self.learning_rate), int(self.local_epochs), int(self.batch_size), self._seed()
        )
        self.convergence_ = ConvergenceSettings(self.loss_epsilon, self.accuracy_epsilon, int(self.patience))
        nodes, self.group_index_ = _hospitals(X, y_enc, groups, names)
        return X, y_enc, nodes

    def _finish(self, trace):
        self.trace_ = trace
        self.convergence_round_ = detect_convergence(trace, self.convergence_)
        self.n_rounds_ = trace.rounds_completed

    def _proba(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return predict_proba(self.params_, self.spec_, X)

    def predict_proba(self, X):
        return self._proba(X)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class FedAvgClassifier(_FederatedClassifierBase):
    """Federated averaging from a seeded random initialisation."""

    def fit(self, X, y, groups=None):
        X, y, nodes = self._prepare(X, y, groups)
        init = init_params(self.spec_, self._seed())
        self.params_, trace = run_fedavg(nodes, self.spec_, self.settings_, init,
                                         int(self.max_rounds), self.convergence_)
        self._finish(trace)
        return self


class FederatedTransferClassifier(_FederatedClassifierBase):
    """Weighted cycling federated transfer learning.

    The base layer is pretrained on ``(X_source, y_source)`` and frozen;
    hospitals then take turns fine-tuning the head.  When no source data is
    passed the pooled training data is used for pretraining, which gives up
    the privacy property and is only meant for quick experiments.
    """

    def __init__(self, hidden_dim=16, learning_rate=0.1, local_epochs=1, batch_size=32,
                 max_rounds=50, loss_epsilon=1e-3, accuracy_epsilon=1e-3, patience=3,
                 random_state=0, pretrain_epochs=30):
        super().__init__(hidden_dim, learning_rate, local_epochs, batch_size, max_rounds,
                         loss_epsilon, accuracy_epsilon, patience, random_state)
        self.pretrain_epochs = pretrain_epochs

    def fit(self, X, y, groups=None, X_source=None, y_source=None):
        X, y_enc, nodes = self._prepare(X, y, groups)
        if X_source is None:
            warnings.warn("no source data given; pretraining on the pooled training data", stacklevel=2)
            source = Dataset(X, y_enc, default_class_names(len(self.classes_)))
        else:
            Xs, ys = check_X_y(X_source, y_source, dtype=np.float64)
            if Xs.shape[1] != X.shape[1]:
                raise ValueError("source data must have the same number of features as X")
            src_classes, ys_enc = np.unique(ys, return_inverse=True)
            source = Dataset(Xs, ys_enc, default_class_names(max(len(src_classes), 2)))
        pre_settings = replace(self.settings_, local_epochs=int(self.pretrain_epochs))
        self.pretrained_ = pretrain_base(self.spec_, source, pre_settings)
        self.params_, trace = run_ftl(nodes, self.spec_, self.settings_, self.pretrained_,
                                      int(self.max_rounds), self.convergence_)
        self._finish(trace)
        return self


class ClusteredFederatedClassifier(_FederatedClassifierBase):
    """Per-cluster FedAvg after k-means on hospital label histograms.

    ``predict_proba`` mixes cluster models by their share of training samples,
    unless ``groups`` names the hospital each row comes from, in which case that
    hospital's cluster model is used.
    """

    def __init__(self, n_clusters=2, hidden_dim=16, learning_rate=0.1, local_epochs=1,
                 batch_size=32, max_rounds=50, loss_epsilon=1e-3, accuracy_epsilon=1e-3,
                 patience=3, random_state=0):
        super().__init__(hidden_dim, learning_rate, local_epochs, batch_size, max_rounds,
                         loss_epsilon, accuracy_epsilon, patience, random_state)
        self.n_clusters = n_clusters

    def fit(self, X, y, groups=None):
        X, y, nodes = self._prepare(X, y, groups)
        init = init_params(self.spec_, self._seed())
        self.cluster_params_, self.assignment_, trace = run_cfl(
            nodes, self.spec_, self.settings_, init, int(self.n_clusters), int(self.max_rounds),
            self.convergence_, seed=self._seed())
        sizes = np.zeros(self.assignment_.num_clusters)
        for node in nodes:
            sizes[self.assignment_.mapping[node.id]] += node.sample_count
        self.cluster_weights_ = sizes / sizes.sum()
        self._finish(trace)
        return self

    def predict_proba(self, X, groups=None):
        check_is_fitted(self)
        X = validate_data(self, X, reset=False, dtype=np.float64)
        probs = [predict_proba(p, self.spec_, X) for p in self.cluster_params_]
        if groups is None:
            return sum(w * p for w, p in zip(self.cluster_weights_, probs))
        groups = check_array(np.asarray(groups).reshape(-1, 1), dtype=None).ravel()
        out = np.empty_like(probs[0])
        for row, g in enumerate(groups):
            if g not in self.group_index_:
                raise ValueError(f"unknown group {g!r}")
            out[row] = probs[self.assignment_.mapping[self.group_index_[g]]][row]
        return out

    def predict(self, X, groups=None):
        return self.classes_[self.predict_proba(X, groups).argmax(axis=1)]
