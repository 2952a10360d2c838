"""Confusion matrices, one-vs-rest classification metrics and convergence detection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .model import ContractError


class Ratio(NamedTuple):
    value: float
    undefined: bool


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] == 0:
            raise ContractError(f"confusion matrix must be square and non-empty, got {counts.shape}")
        if np.any(counts < 0):
            raise ContractError("confusion counts must be non-negative")
        names = tuple(self.class_names) or tuple(f"class_{c}" for c in range(counts.shape[0]))
        if len(names) != counts.shape[0]:
            raise ContractError("class_names length must match matrix size")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fn - self.fp

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(predictions, labels, n: int, class_names: Sequence[str] = ()) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.size != labels.size:
        raise ContractError(f"{predictions.size} predictions but {labels.size} labels")
    if labels.size == 0:
        raise ContractError("empty evaluation")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.min() < 0 or arr.max() >= n:
            raise ContractError(f"{name} index out of range for {n} classes")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def _check_counts(**counts) -> None:
    for name, value in counts.items():
        if value < 0:
            raise ContractError(f"{name} must be non-negative, got {value}")


def precision(tp: int, fp: int) -> Ratio:
    _check_counts(tp=tp, fp=fp)
    if tp + fp == 0:
        return Ratio(0.0, True)
    return Ratio(tp / (tp + fp), False)


def recall(tp: int, fn: int) -> Ratio:
    _check_counts(tp=tp, fn=fn)
    if tp + fn == 0:
        return Ratio(0.0, True)
    return Ratio(tp / (tp + fn), False)


def f1(p: float, r: float) -> float:
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise ContractError(f"precision and recall must lie in [0, 1], got {p}, {r}")
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def class_accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    _check_counts(tp=tp, tn=tn, fp=fp, fn=fn)
    total = tp + tn + fp + fn
    if total == 0:
        raise ContractError("class_accuracy of zero samples")
    return (tp + tn) / total


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ContractError("empty confusion matrix")
    return int(np.trace(cm.counts)) / total


@dataclass(frozen=True)
class MetricsReport:
    class_names: tuple[str, ...]
    support: tuple[int, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    accuracy: tuple[float, ...]
    overall_accuracy: float
    precision_undefined: tuple[bool, ...]
    recall_undefined: tuple[bool, ...]

    def rows(self):
        for c, name in enumerate(self.class_names):
            yield name, self.support[c], self.precision[c], self.recall[c], self.f1[c], self.accuracy[c]


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest metrics plus overall accuracy."""
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    prec, rec, f1s, acc = [], [], [], []
    p_undef, r_undef = [], []
    for c in range(cm.n):
        p = precision(int(tp[c]), int(fp[c]))
        r = recall(int(tp[c]), int(fn[c]))
        prec.append(p.value)
        rec.append(r.value)
        p_undef.append(p.undefined)
        r_undef.append(r.undefined)
        f1s.append(f1(p.value, r.value))
        acc.append(class_accuracy(int(tp[c]), int(tn[c]), int(fp[c]), int(fn[c])))
    return MetricsReport(
        class_names=cm.class_names,
        support=tuple(int(s) for s in cm.support),
        precision=tuple(prec),
        recall=tuple(rec),
        f1=tuple(f1s),
        accuracy=tuple(acc),
        overall_accuracy=overall_accuracy(cm),
        precision_undefined=tuple(p_undef),
        recall_undefined=tuple(r_undef),
    )


@dataclass(frozen=True)
class ConvergenceSettings:
    loss_epsilon: float = 1e-3
    accuracy_epsilon: float = 1e-3
    patience: int = 3

    def __post_init__(self):
        if not self.loss_epsilon > 0 or not self.accuracy_epsilon > 0:
            raise ContractError("convergence epsilons must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")


def detect_convergence_series(losses, accuracies, settings: ConvergenceSettings) -> int | None:
    """First index ``r`` whose ``patience`` preceding step pairs are all quiet.

    A step ``t-1 -> t`` is quiet when ``|loss_t - loss_{t-1}| < loss_epsilon``
    and ``acc_t - acc_{t-1} < accuracy_epsilon``; accuracy drops count as quiet.
    """
    losses = np.asarray(losses, dtype=np.float64)
    accuracies = np.asarray(accuracies, dtype=np.float64)
    if losses.size != accuracies.size:
        raise ContractError("loss and accuracy series differ in length")
    if losses.size < 2:
        raise ContractError("need at least 2 evaluation records to detect convergence")
    run = 0
    for t in range(1, losses.size):
        quiet = (
            abs(losses[t] - losses[t - 1]) < settings.loss_epsilon
            and accuracies[t] - accuracies[t - 1] < settings.accuracy_epsilon
        )
        run = run + 1 if quiet else 0
        if run >= settings.patience:
            return t
    return None


def detect_convergence(trace, settings: ConvergenceSettings) -> int | None:
    """Convergence round of a :class:`~fedtwin.protocol.TrainingTrace`, or ``None``."""
    evals = trace.evaluations()
    r = detect_convergence_series([e.loss for e in evals], [e.accuracy for e in evals], settings)
    return None if r is None else evals[r].round_index


def convergence_time_ms(trace, round_index: int) -> float:
    """Summed elapsed time of evaluation rounds ``1..round_index``."""
    return float(sum(e.elapsed_ms for e in trace.evaluations() if 1 <= e.round_index <= round_index))
