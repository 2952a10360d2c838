"""Datasets, the synthetic CT-feature generator, Dirichlet label-skew
partitioning and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .model import ContractError

CT_CLASSES = (
    "Adenocarcinoma",
    "Large Cell Carcinoma",
    "Normal",
    "Squamous Cell Carcinoma",
)
# Test-set class supports of the chest CT benchmark.
CT_TEST_COUNTS = (120, 51, 54, 90)


class Sample(NamedTuple):
    features: np.ndarray
    label: int


def default_class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(CT_CLASSES):
        return CT_CLASSES
    return tuple(f"class_{c}" for c in range(num_classes))


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_names: tuple[str, ...] = CT_CLASSES
    provenance: str = "synthetic"

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True).ravel()
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        if X.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ContractError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        names = tuple(self.class_names)
        if y.size and (y.min() < 0 or y.max() >= len(names)):
            raise ContractError(f"labels must lie in [0, {len(names)})")
        if self.provenance not in ("synthetic", "csv"):
            raise ContractError(f"unknown provenance {self.provenance!r}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "class_names", names)

    def __len__(self):
        return self.y.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return list(iter(self))

    def __iter__(self) -> Iterator[Sample]:
        for row, label in zip(self.X, self.y):
            yield Sample(row, int(label))

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.X[indices].reshape(len(indices), self.input_dim), self.y[indices],
                       self.class_names, self.provenance)

    def extend(self, samples: Sequence[Sample]) -> Dataset:
        if not samples:
            return self
        X_new = np.vstack([np.asarray(s.features, dtype=np.float64) for s in samples])
        y_new = np.array([s.label for s in samples], dtype=np.int64)
        return Dataset(np.vstack([self.X, X_new]), np.concatenate([self.y, y_new]),
                       self.class_names, self.provenance)

    def equals(self, other: Dataset) -> bool:
        return (
            self.class_names == other.class_names
            and self.X.shape == other.X.shape
            and self.X.tobytes() == other.X.tobytes()
            and self.y.tobytes() == other.y.tobytes()
        )


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian-blob generator settings.

    ``mean_seed`` controls the class geometry separately from ``seed`` (which
    draws the samples) so train, test and source sets can share class means.
    """

    class_counts: tuple[int, ...] = CT_TEST_COUNTS
    input_dim: int = 16
    class_separation: float = 3.0
    noise_std: float = 1.0
    seed: int = 0
    mean_seed: int | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.class_counts) < 2:
            raise ContractError("need at least 2 classes")
        if any(c < 0 for c in self.class_counts):
            raise ContractError("class counts must be non-negative")
        if sum(self.class_counts) == 0:
            raise ContractError("class counts are all zero")
        if self.input_dim < 1:
            raise ContractError("input_dim must be positive")
        if not self.class_separation > 0 or not self.noise_std > 0:
            raise ContractError("class_separation and noise_std must be positive")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ContractError("class_names length must equal number of classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    def names(self) -> tuple[str, ...]:
        return tuple(self.class_names) if self.class_names else default_class_names(self.num_classes)


def class_means(config: SynthConfig) -> np.ndarray:
    """Class means at pairwise distance ``class_separation``.

    Uses scaled orthonormal directions when ``input_dim >= num_classes``;
    otherwise falls back to random unit directions scaled the same way.
    """
    seed = config.seed if config.mean_seed is None else config.mean_seed
    rng = np.random.default_rng([seed, 0x6D65616E])
    k, d = config.num_classes, config.input_dim
    G = rng.standard_normal((d, k))
    if d >= k:
        Q, R = np.linalg.qr(G)
        Q = Q * np.sign(np.diag(R))
        directions = Q.T
    else:
        directions = (G / np.linalg.norm(G, axis=0)).T
    return directions * (config.class_separation / np.sqrt(2.0))


def draw_samples(config: SynthConfig, labels, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    means = class_means(config)
    noise = rng.standard_normal((labels.size, config.input_dim)) * config.noise_std
    return means[labels] + noise


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Class-blocked samples: all of class 0, then class 1, and so on."""
    labels = np.repeat(np.arange(config.num_classes), config.class_counts)
    rng = np.random.default_rng(config.seed)
    X = draw_samples(config, labels, rng)
    return Dataset(X, labels, config.names(), "synthetic")


def _repair_empty(shards: list[list[int]]) -> None:
    while True:
        empty = [h for h, s in enumerate(shards) if not s]
        if not empty:
            return
        sizes = [len(s) for s in shards]
        donor = int(np.argmax(sizes))
        moved = min(shards[donor])
        shards[donor].remove(moved)
        shards[empty[0]].append(moved)


def partition_dirichlet(dataset: Dataset, num_hospitals: int, alpha: float, seed: int) -> list[Dataset]:
    """Label-skewed split: each class is divided across hospitals by Dirichlet(alpha) shares.

    Classes are processed in ascending order.  For each, its sample indices
    are permuted, a share vector is drawn, and the permuted indices are cut at
    ``floor(cumsum(share) * n_c)``.  Shards keep the input's sample order.
    Any empty shard takes the lowest-index sample of the largest shard.
    """
    if num_hospitals < 1:
        raise ContractError("num_hospitals must be >= 1")
    if not alpha > 0:
        raise ContractError("alpha must be positive")
    if len(dataset) == 0:
        raise ContractError("cannot partition an empty dataset")
    if num_hospitals > len(dataset):
        raise ContractError(
            f"num_hospitals {num_hospitals} exceeds dataset size {len(dataset)}"
        )
    if num_hospitals == 1:
        return [dataset]

    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(num_hospitals)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(num_hospitals, alpha))
        cuts = (np.cumsum(shares)[:-1] * idx.size).astype(int)
        for h, part in enumerate(np.split(idx, cuts)):
            shards[h].extend(int(i) for i in part)

    _repair_empty(shards)
    return [dataset.subset(sorted(s)) for s in shards]


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ContractError("test_fraction must lie in (0, 1)")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise ContractError(f"dataset of {n} rows too small for a {test_fraction} split")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


class CSVFormatError(ContractError):
    pass


def load_csv(path, num_classes: int, class_names: Sequence[str] | None = None) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows. Row numbers in errors are 1-based file lines."""
    path = Path(path)
    names = tuple(class_names) if class_names else default_class_names(num_classes)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CSVFormatError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise CSVFormatError(f"{path}: line 1: missing 'label' column")
        d = len(header) - 1
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 1:
                raise CSVFormatError(f"{path}: line {line_no}: expected {d + 1} fields, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise CSVFormatError(f"{path}: line {line_no}: non-numeric feature ({exc})") from None
            try:
                label = int(row[-1].strip(), 10)
            except ValueError:
                raise CSVFormatError(f"{path}: line {line_no}: label {row[-1]!r} is not an integer") from None
            if not 0 <= label < num_classes:
                raise CSVFormatError(
                    f"{path}: line {line_no}: label {label} out of range for {num_classes} classes"
                )
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), names, "csv")


def write_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.X, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
