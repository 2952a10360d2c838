"""Small tanh-base / softmax-head classifier trained with deterministic SGD.

Parameters live in one flat vector split into a ``base`` segment (the dense
feature layer) and a ``head`` segment (the linear softmax layer).  Freezing
the base turns training into head-only fine-tuning on fixed features.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .data import Dataset

PROB_FLOOR = 1e-12
INIT_SCALE = 0.05

# Nominal throughput for the simulated clock: 1 MFLOP per millisecond.
FLOPS_PER_MS = 1e6


class ContractError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass(frozen=True)
class Layout:
    base: tuple[int, int]
    head: tuple[int, int]

    def __post_init__(self):
        b0, b1 = self.base
        h0, h1 = self.head
        if not (b0 == 0 and b0 <= b1 and b1 == h0 and h0 <= h1):
            raise ContractError(f"invalid layout {self.base}/{self.head}")

    @property
    def size(self) -> int:
        return self.head[1]

    @property
    def base_slice(self) -> slice:
        return slice(*self.base)

    @property
    def head_slice(self) -> slice:
        return slice(*self.head)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Immutable flat parameter vector with a base/head partition."""

    values: np.ndarray
    layout: Layout
    frozen_base: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.size != self.layout.size:
            raise ContractError(
                f"parameter length {values.size} does not match layout size {self.layout.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("parameters contain non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    @property
    def base(self) -> np.ndarray:
        return self.values[self.layout.base_slice]

    @property
    def head(self) -> np.ndarray:
        return self.values[self.layout.head_slice]

    def with_values(self, values) -> ParameterVector:
        return ParameterVector(values, self.layout, self.frozen_base)

    def with_frozen_base(self, frozen: bool = True) -> ParameterVector:
        return replace(self, frozen_base=frozen)

    def equals(self, other: ParameterVector) -> bool:
        """Bitwise equality of values, layout and freeze flag."""
        return (
            self.layout == other.layout
            and self.frozen_base == other.frozen_base
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int
    num_classes: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be at least 2")
        if self.activation != "tanh":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def base_size(self) -> int:
        return self.hidden_dim * self.input_dim + self.hidden_dim

    @property
    def head_size(self) -> int:
        return self.num_classes * self.hidden_dim + self.num_classes

    @property
    def n_params(self) -> int:
        return self.base_size + self.head_size

    def layout(self) -> Layout:
        return Layout((0, self.base_size), (self.base_size, self.n_params))

    def unpack(self, params: ParameterVector):
        """Return ``(W1, b1, W2, b2)`` views into ``params``."""
        check_params(params, self)
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        v = params.values
        i = 0
        W1 = v[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = v[i : i + h]
        i += h
        W2 = v[i : i + k * h].reshape(k, h)
        i += k * h
        b2 = v[i : i + k]
        return W1, b1, W2, b2

    def pack(self, W1, b1, W2, b2, frozen_base: bool = False) -> ParameterVector:
        values = np.concatenate([np.ravel(W1), np.ravel(b1), np.ravel(W2), np.ravel(b2)])
        return ParameterVector(values, self.layout(), frozen_base)


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ContractError(f"learning_rate must be a finite non-negative number, got {self.learning_rate!r}")
        if self.local_epochs < 1:
            raise ContractError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass(frozen=True)
class FitStats:
    loss_before: float
    loss_after: float
    accuracy_after: float
    flops: float

    @property
    def improved(self) -> bool:
        return self.loss_after <= self.loss_before

    @property
    def simulated_ms(self) -> float:
        return self.flops / FLOPS_PER_MS


def check_params(params: ParameterVector, spec: ModelSpec) -> None:
    if params.layout != spec.layout():
        raise ContractError(
            f"parameter layout {params.layout} inconsistent with model spec {spec}"
        )


def init_params(spec: ModelSpec, seed: int, frozen_base: bool = False) -> ParameterVector:
    """Uniform [-0.05, 0.05] init; head biases start at zero."""
    rng = np.random.default_rng(seed)
    values = rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.n_params)
    values[spec.n_params - spec.num_classes :] = 0.0
    return ParameterVector(values, spec.layout(), frozen_base)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_2d(features, spec: ModelSpec) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractError(
            f"expected features of length {spec.input_dim}, got shape {np.shape(features)}"
        )
    return X


def predict_proba(params: ParameterVector, spec: ModelSpec, X) -> np.ndarray:
    """Class probabilities for a batch of feature rows."""
    X = _as_2d(X, spec)
    W1, b1, W2, b2 = spec.unpack(params)
    Z = np.tanh(X @ W1.T + b1)
    return _softmax(Z @ W2.T + b2)


def forward(params: ParameterVector, spec: ModelSpec, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ContractError("forward expects a single feature vector")
    return predict_proba(params, spec, features)[0]


def loss(probs, label: int) -> float:
    """Cross-entropy of one prediction, floored at ``PROB_FLOOR``."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.size:
        raise ContractError(f"label {label} out of range for {probs.size} classes")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def batch_losses(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def mean_loss(params: ParameterVector, spec: ModelSpec, X, y) -> float:
    probs = predict_proba(params, spec, X)
    return float(batch_losses(probs, np.asarray(y)).mean())


def loss_and_grad(params: ParameterVector, spec: ModelSpec, X, y, head_only: bool = False):
    """Mean cross-entropy over a batch and its gradient w.r.t. the flat params.

    With ``head_only`` the base segment of the gradient is left at zero and the
    base backward pass is skipped.
    """
    X = _as_2d(X, spec)
    y = np.asarray(y, dtype=np.intp)
    b = X.shape[0]
    W1, b1, W2, b2 = spec.unpack(params)

    Z = np.tanh(X @ W1.T + b1)
    P = _softmax(Z @ W2.T + b2)
    value = float(batch_losses(P, y).mean())

    dlogits = P.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    grad = np.zeros(spec.n_params)
    h0 = spec.base_size
    k, h = spec.num_classes, spec.hidden_dim
    grad[h0 : h0 + k * h] = (dlogits.T @ Z).ravel()
    grad[h0 + k * h :] = dlogits.sum(axis=0)
    if not head_only:
        dA = (dlogits @ W2) * (1.0 - Z * Z)
        d = spec.input_dim
        grad[: h * d] = (dA.T @ X).ravel()
        grad[h * d : h0] = dA.sum(axis=0)
    return value, grad


def _step_flops(spec: ModelSpec, batch: int, head_only: bool) -> float:
    d, h, k = spec.input_dim, spec.hidden_dim, spec.num_classes
    fwd = 2 * d * h + h + 2 * h * k + 3 * k
    bwd_head = 2 * h * k + k
    bwd_base = 2 * h * k + 2 * h + 2 * d * h
    per_sample = fwd + bwd_head + (0 if head_only else bwd_base)
    return float(batch * per_sample)


def _effective_batch(settings: TrainSettings, n: int) -> int:
    if settings.batch_size > n:
        warnings.warn(
            f"batch_size {settings.batch_size} exceeds local dataset size {n}; clamped to {n}",
            stacklevel=3,
        )
        return n
    return settings.batch_size


def fine_tune_with_stats(
    params: ParameterVector, spec: ModelSpec, dataset: Dataset, settings: TrainSettings
) -> tuple[ParameterVector, FitStats]:
    """Mini-batch SGD on ``dataset``; returns new params and run statistics."""
    check_params(params, spec)
    if len(dataset) == 0:
        raise ContractError("no local data")
    X, y = dataset.X, dataset.y
    if X.shape[1] != spec.input_dim:
        raise ContractError(f"dataset has {X.shape[1]} features, model expects {spec.input_dim}")
    if y.size and y.max() >= spec.num_classes:
        raise ContractError(f"dataset label {int(y.max())} out of range for {spec.num_classes} classes")

    n = len(dataset)
    batch = _effective_batch(settings, n)
    head_only = params.frozen_base
    rng = np.random.default_rng(settings.seed)
    loss_before = mean_loss(params, spec, X, y)

    values = params.values.copy()
    flops = 0.0
    current = params
    for epoch in range(settings.local_epochs):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, batch)):
            idx = order[start : start + batch]
            value, grad = loss_and_grad(current, spec, X[idx], y[idx], head_only=head_only)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            flops += _step_flops(spec, len(idx), head_only)
            if settings.learning_rate == 0:
                continue
            if head_only:
                values[spec.base_size :] -= settings.learning_rate * grad[spec.base_size :]
            else:
                values -= settings.learning_rate * grad
            if not np.all(np.isfinite(values)):
                raise TrainingError(f"non-finite parameters at epoch {epoch}, batch {bi}")
            current = params.with_values(values)

    probs = predict_proba(current, spec, X)
    loss_after = float(batch_losses(probs, y).mean())
    if not np.isfinite(loss_after):
        raise TrainingError("non-finite loss after training")
    accuracy = float(np.mean(probs.argmax(axis=1) == y))
    return current, FitStats(loss_before, loss_after, accuracy, flops)


def fine_tune(
    params: ParameterVector, spec: ModelSpec, dataset: Dataset, settings: TrainSettings
) -> ParameterVector:
    return fine_tune_with_stats(params, spec, dataset, settings)[0]


def pretrain_base(spec: ModelSpec, source_dataset: Dataset, settings: TrainSettings) -> ParameterVector:
    """Train a full model on ``source_dataset`` and keep only its base.

    The source label space may differ from ``spec.num_classes``; a temporary
    head sized to the source classes is trained and then discarded.  The
    returned vector has a freshly initialised head and ``frozen_base=True``.
    """
    source_classes = max(len(source_dataset.class_names), 2)
    source_spec = replace(spec, num_classes=source_classes)
    start = init_params(source_spec, settings.seed)
    trained = fine_tune(start, source_spec, source_dataset, settings)

    fresh_head = init_params(spec, settings.seed + 1).head
    values = np.concatenate([trained.base, fresh_head])
    return ParameterVector(values, spec.layout(), frozen_base=True)


def predict(params: ParameterVector, spec: ModelSpec, X) -> np.ndarray:
    return predict_proba(params, spec, X).argmax(axis=1)
