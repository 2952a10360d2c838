"""Federated orchestration: cycling weighted FTL, FedAvg and clustered FedAvg.

All three runners share the same round skeleton.  Round 0 is an evaluation of
the starting model; rounds ``1..max_rounds`` each train every hospital once
and end with one evaluation record.  Per-round client seeds depend only on the
round number, so results never depend on scheduling or thread count.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset, Sample
from .metrics import ConvergenceSettings, detect_convergence
from .model import (
    ContractError,
    FitStats,
    ModelSpec,
    ParameterVector,
    TrainSettings,
    batch_losses,
    check_params,
    fine_tune_with_stats,
    predict_proba,
)

logger = logging.getLogger(__name__)

SERVER_ID = -1
TIMINGS = ("simulated", "wall")
ROUTINGS = ("hospital", "mixture", "label")

StreamFn = Callable[[int, "HospitalNode"], Sequence[Sample]]


class ProtocolError(RuntimeError):
    """A hospital's local step failed; carries the hospital id and round."""

    def __init__(self, message: str, hospital_id: int | None = None, round_index: int | None = None):
        super().__init__(message)
        self.hospital_id = hospital_id
        self.round_index = round_index


@dataclass
class HospitalNode:
    """One client site and the digital twin attached to its scanner."""

    id: int
    local_data: Dataset
    twin_params: ParameterVector | None = None
    twin_buffer: tuple[Sample, ...] = ()

    @property
    def sample_count(self) -> int:
        return len(self.local_data)


@dataclass(frozen=True)
class GlobalModelState:
    w_global: ParameterVector
    round_index: int = 0
    remaining: tuple[int, ...] = ()
    cumulative_weight: float = 0.0

    def __post_init__(self):
        if len(set(self.remaining)) != len(self.remaining):
            raise ContractError(f"duplicate hospital ids in remaining set {self.remaining}")

    def eliminate(self, hospital_id: int) -> GlobalModelState:
        if hospital_id not in self.remaining:
            raise ContractError(f"hospital {hospital_id} is not in the remaining set")
        return replace(self, remaining=tuple(h for h in self.remaining if h != hospital_id))


@dataclass(frozen=True)
class ClusterAssignment:
    mapping: dict[int, int]
    num_clusters: int

    def members(self, cluster: int) -> list[int]:
        return sorted(h for h, c in self.mapping.items() if c == cluster)


@dataclass(frozen=True)
class TraceRecord:
    round_index: int
    method: str
    actor_id: int
    loss: float
    accuracy: float
    elapsed_ms: float
    kind: str = "update"
    improved: bool = True


@dataclass
class TrainingTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.round_index < self.records[-1].round_index:
            raise ContractError("trace round_index must be non-decreasing")
        if record.kind == "eval" and any(
            r.kind == "eval" and r.round_index == record.round_index for r in self.records
        ):
            raise ContractError(f"round {record.round_index} already has an evaluation record")
        self.records.append(record)

    def evaluations(self) -> list[TraceRecord]:
        return [r for r in self.records if r.kind == "eval"]

    def updates(self, round_index: int | None = None) -> list[TraceRecord]:
        return [
            r for r in self.records
            if r.kind == "update" and (round_index is None or r.round_index == round_index)
        ]

    @property
    def rounds_completed(self) -> int:
        evals = self.evaluations()
        return evals[-1].round_index if evals else 0

    def rows(self) -> list[tuple]:
        """``(round, actor_id, loss, accuracy, elapsed_ms)`` tuples in record order."""
        return [(r.round_index, r.actor_id, r.loss, r.accuracy, r.elapsed_ms) for r in self.records]


def _sorted_nodes(hospitals: Iterable[HospitalNode]) -> list[HospitalNode]:
    nodes = [replace(h) for h in hospitals]
    if not nodes:
        raise ContractError("at least one hospital is required")
    ids = [h.id for h in nodes]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate hospital ids {ids}")
    for h in nodes:
        if h.sample_count == 0:
            raise ContractError(f"hospital {h.id} has no local data")
    return sorted(nodes, key=lambda h: h.id)


def _round_settings(settings: TrainSettings, round_index: int) -> TrainSettings:
    return replace(settings, seed=settings.seed + round_index - 1)


def twin_sync(node: HospitalNode, new_samples: Sequence[Sample]) -> HospitalNode:
    """Queue freshly scanned samples on the twin; merged at the next cycle boundary."""
    if not new_samples:
        return node
    d = node.local_data.input_dim
    k = node.local_data.num_classes
    for s in new_samples:
        if np.asarray(s.features).shape != (d,):
            raise ContractError(f"hospital {node.id}: sample has shape {np.shape(s.features)}, expected ({d},)")
        if not 0 <= s.label < k:
            raise ContractError(f"hospital {node.id}: label {s.label} out of range")
    return replace(node, twin_buffer=node.twin_buffer + tuple(new_samples))


def apply_cycle_boundary(node: HospitalNode) -> HospitalNode:
    """Merge the twin buffer into the hospital's local data."""
    if not node.twin_buffer:
        return node
    return replace(node, local_data=node.local_data.extend(node.twin_buffer), twin_buffer=())


def _local_update(node: HospitalNode, w_minus: ParameterVector, spec: ModelSpec,
                  settings: TrainSettings, timing: str = "simulated") -> tuple[ParameterVector, FitStats, float]:
    if node.sample_count == 0:
        raise ProtocolError(f"hospital {node.id}: no local data", node.id)
    # hospital server -> digital twin
    node.twin_params = w_minus
    start = time.perf_counter()
    try:
        w_plus, stats = fine_tune_with_stats(node.twin_params, spec, node.local_data, settings)
    except (ContractError, RuntimeError) as exc:
        raise ProtocolError(f"hospital {node.id}: {exc}", node.id) from exc
    wall_ms = (time.perf_counter() - start) * 1e3
    # digital twin -> hospital server -> central server
    elapsed = stats.simulated_ms if timing == "simulated" else wall_ms
    return w_plus, stats, elapsed


def local_update(node: HospitalNode, w_minus: ParameterVector, spec: ModelSpec,
                 settings: TrainSettings) -> ParameterVector:
    """Hospital-side step: relay ``w_minus`` to the twin, fine-tune there, relay back."""
    return _local_update(node, w_minus, spec, settings)[0]


def _running_mean(current: ParameterVector, weight: float, update: ParameterVector,
                  n: float) -> ParameterVector:
    if current.layout != update.layout:
        raise ContractError("parameter layout mismatch")
    if weight == 0:
        return update.with_frozen_base(current.frozen_base)
    # Incremental form keeps fixed points exact: an update equal to the
    # current mean leaves it bit-identical.
    a, b = current.values, update.values
    mixed = a + (n / (weight + n)) * (b - a)
    mixed = np.clip(mixed, np.minimum(a, b), np.maximum(a, b))
    return current.with_values(mixed)


def f_weight(state: GlobalModelState, w_plus: ParameterVector, n_i: int) -> GlobalModelState:
    """Fold one hospital's result into the cycle's sample-weighted running average.

    ``w <- (C*w + n_i*w_plus) / (C + n_i)`` and ``C <- C + n_i``.  With
    ``C == 0`` the incoming parameters replace ``w`` outright.
    """
    if n_i < 1:
        raise ContractError(f"n_i must be >= 1, got {n_i}")
    merged = _running_mean(state.w_global, state.cumulative_weight, w_plus, n_i)
    return replace(state, w_global=merged, cumulative_weight=state.cumulative_weight + n_i)


def fedavg_aggregate(updates: Sequence[tuple[ParameterVector, int]]) -> ParameterVector:
    """Sample-weighted mean of client parameters, accumulated in list order."""
    if not updates:
        raise ContractError("no client updates to aggregate")
    acc, total = updates[0][0], 0.0
    for params, n in updates:
        if n < 1:
            raise ContractError(f"client weight must be >= 1, got {n}")
        acc = _running_mean(acc, total, params, n)
        total += n
    return acc


def _weighted_train_loss(models: dict[int, ParameterVector], nodes: Sequence[HospitalNode],
                         spec: ModelSpec) -> float:
    total, n = 0.0, 0
    for node in nodes:
        probs = predict_proba(models[node.id], spec, node.local_data.X)
        total += float(batch_losses(probs, node.local_data.y).sum())
        n += node.sample_count
    return total / n


def _accuracy(params: ParameterVector, spec: ModelSpec, data: Dataset) -> float:
    return float(np.mean(predict_proba(params, spec, data.X).argmax(axis=1) == data.y))


def _eval_pool(nodes: Sequence[HospitalNode], test: Dataset | None) -> Dataset:
    if test is not None:
        return test
    pool = nodes[0].local_data
    for node in nodes[1:]:
        pool = pool.extend(node.local_data.samples)
    return pool


def ftl_cycle(w_global: ParameterVector, nodes: Sequence[HospitalNode], spec: ModelSpec,
              settings: TrainSettings, round_index: int = 1, timing: str = "simulated"):
    """One pass of the weighted cycling update over every hospital.

    Returns the end-of-cycle :class:`GlobalModelState` and a list of
    ``(hospital_id, FitStats, elapsed_ms)`` in visiting order.
    """
    by_id = {n.id: n for n in nodes}
    state = GlobalModelState(w_global, round_index, tuple(sorted(by_id)), 0.0)
    visits = []
    while state.remaining:
        i = state.remaining[0]
        node = by_id[i]
        w_minus = state.w_global
        try:
            w_plus, stats, ms = _local_update(node, w_minus, spec, settings, timing)
        except ProtocolError as exc:
            exc.round_index = round_index
            raise
        state = f_weight(state, w_plus, node.sample_count).eliminate(i)
        visits.append((i, stats, ms))
    return state, visits


def _check_timing(timing: str) -> None:
    if timing not in TIMINGS:
        raise ContractError(f"timing must be one of {TIMINGS}, got {timing!r}")


def _stream_into(nodes: list[HospitalNode], stream: StreamFn | None, round_index: int) -> list[HospitalNode]:
    if stream is None:
        return nodes
    return [twin_sync(n, list(stream(round_index, n))) for n in nodes]


def _converged(trace: TrainingTrace, convergence: ConvergenceSettings | None) -> bool:
    if convergence is None or len(trace.evaluations()) < 2:
        return False
    return detect_convergence(trace, convergence) is not None


def run_ftl(hospitals: Sequence[HospitalNode], spec: ModelSpec, settings: TrainSettings,
            pretrained: ParameterVector, max_cycles: int,
            convergence: ConvergenceSettings | None = ConvergenceSettings(), *,
            test: Dataset | None = None, stream: StreamFn | None = None,
            timing: str = "simulated", method: str = "ftl",
            on_cycle: Callable[[int, ParameterVector], None] | None = None,
            ) -> tuple[ParameterVector, TrainingTrace]:
    """Cycle through hospitals in ascending id order until convergence or ``max_cycles``.

    Each cycle re-opens the full hospital set, resets the cumulative weight and
    visits every hospital once.  ``test`` is the held-out evaluation set; when
    omitted the pooled hospital data is used.  ``on_cycle(r, w_global)`` is
    called after every cycle, for monitoring.
    """
    _check_timing(timing)
    check_params(pretrained, spec)
    if not pretrained.frozen_base:
        raise ContractError("run_ftl expects a pretrained model with frozen_base=True")
    if max_cycles < 1:
        raise ContractError("max_cycles must be >= 1")
    nodes = _sorted_nodes(hospitals)

    trace = TrainingTrace()
    w_global = pretrained
    trace.append(TraceRecord(
        0, method, SERVER_ID, _weighted_train_loss({n.id: w_global for n in nodes}, nodes, spec),
        _accuracy(w_global, spec, _eval_pool(nodes, test)), 0.0, "eval"))

    for r in range(1, max_cycles + 1):
        nodes = [apply_cycle_boundary(n) for n in nodes]
        state, visits = ftl_cycle(w_global, nodes, spec, _round_settings(settings, r), r, timing)
        w_global = state.w_global
        if on_cycle is not None:
            on_cycle(r, w_global)
        for hid, stats, ms in visits:
            trace.append(TraceRecord(r, method, hid, stats.loss_after, stats.accuracy_after, ms,
                                     "update", stats.improved))
        trace.append(TraceRecord(
            r, method, SERVER_ID, _weighted_train_loss({n.id: w_global for n in nodes}, nodes, spec),
            _accuracy(w_global, spec, _eval_pool(nodes, test)), sum(v[2] for v in visits), "eval"))
        nodes = _stream_into(nodes, stream, r)
        if _converged(trace, convergence):
            logger.info("%s converged after cycle %d", method, r)
            break
    return w_global, trace


def _train_clients(nodes: Sequence[HospitalNode], starts: dict[int, ParameterVector], spec: ModelSpec,
                   settings: TrainSettings, round_index: int, timing: str, workers: int):
    def work(node):
        try:
            return _local_update(node, starts[node.id], spec, settings, timing)
        except ProtocolError as exc:
            exc.round_index = round_index
            raise

    if workers > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, nodes))
    return [work(n) for n in nodes]


def _run_grouped(nodes: list[HospitalNode], groups: dict[int, int], inits: list[ParameterVector],
                 spec: ModelSpec, settings: TrainSettings, max_rounds: int,
                 convergence: ConvergenceSettings | None, test: Dataset | None,
                 stream: StreamFn | None, timing: str, workers: int, method: str,
                 route: Callable[[Dataset, list[ParameterVector], list[HospitalNode]], np.ndarray]):
    """FedAvg rounds run independently inside each group of hospitals."""
    models = list(inits)
    trace = TrainingTrace()

    def evaluate(r, elapsed):
        per_node = {n.id: models[groups[n.id]] for n in nodes}
        pool = _eval_pool(nodes, test)
        preds = route(pool, models, nodes)
        trace.append(TraceRecord(r, method, SERVER_ID, _weighted_train_loss(per_node, nodes, spec),
                                 float(np.mean(preds == pool.y)), elapsed, "eval"))

    evaluate(0, 0.0)
    for r in range(1, max_rounds + 1):
        nodes = [apply_cycle_boundary(n) for n in nodes]
        starts = {n.id: models[groups[n.id]] for n in nodes}
        results = _train_clients(nodes, starts, spec, _round_settings(settings, r), r, timing, workers)
        for g in range(len(models)):
            updates = [(res[0], n.sample_count) for n, res in zip(nodes, results) if groups[n.id] == g]
            if updates:
                models[g] = fedavg_aggregate(updates)
        for n, (_, stats, ms) in zip(nodes, results):
            trace.append(TraceRecord(r, method, n.id, stats.loss_after, stats.accuracy_after, ms,
                                     "update", stats.improved))
        evaluate(r, sum(res[2] for res in results))
        nodes = _stream_into(nodes, stream, r)
        if _converged(trace, convergence):
            logger.info("%s converged after round %d", method, r)
            break
    return models, trace


def _single_model_route(pool: Dataset, models: list[ParameterVector], spec: ModelSpec) -> np.ndarray:
    return predict_proba(models[0], spec, pool.X).argmax(axis=1)


def run_fedavg(hospitals: Sequence[HospitalNode], spec: ModelSpec, settings: TrainSettings,
               init: ParameterVector, max_rounds: int,
               convergence: ConvergenceSettings | None = ConvergenceSettings(), *,
               test: Dataset | None = None, stream: StreamFn | None = None,
               timing: str = "simulated", workers: int = 1,
               method: str = "fl") -> tuple[ParameterVector, TrainingTrace]:
    """Broadcast, local training at every hospital, sample-weighted average."""
    _check_timing(timing)
    check_params(init, spec)
    if max_rounds < 1:
        raise ContractError("max_rounds must be >= 1")
    nodes = _sorted_nodes(hospitals)
    groups = {n.id: 0 for n in nodes}
    models, trace = _run_grouped(
        nodes, groups, [init], spec, settings, max_rounds, convergence, test, stream, timing,
        workers, method, lambda pool, ms, _nodes: _single_model_route(pool, ms, spec))
    return models[0], trace


def label_histogram(node: HospitalNode) -> np.ndarray:
    counts = node.local_data.label_counts().astype(np.float64)
    return counts / counts.sum()


def cluster_clients(hospitals: Sequence[HospitalNode], k: int, seed: int = 0,
                    max_iter: int = 100) -> ClusterAssignment:
    """Seeded k-means over normalised per-hospital label histograms.

    Centres start from a farthest-first traversal anchored at a seeded random
    hospital.  Empty clusters steal the point farthest from its centre among
    clusters with more than one member.  Cluster ids are renumbered in order of
    first appearance by ascending hospital id.
    """
    nodes = sorted(hospitals, key=lambda h: h.id)
    m = len(nodes)
    if not 1 <= k <= m:
        raise ContractError(f"k must lie in [1, {m}], got {k}")
    H = np.vstack([label_histogram(n) for n in nodes])

    rng = np.random.default_rng(seed)
    centres_idx = [int(rng.integers(m))]
    dist = np.sum((H - H[centres_idx[0]]) ** 2, axis=1)
    while len(centres_idx) < k:
        dist_masked = dist.copy()
        dist_masked[centres_idx] = -1.0
        nxt = int(np.argmax(dist_masked))
        centres_idx.append(nxt)
        dist = np.minimum(dist, np.sum((H - H[nxt]) ** 2, axis=1))
    centres = H[centres_idx].copy()

    labels = np.full(m, -1)
    for _ in range(max_iter):
        d2 = ((H[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for c in range(k):
            if np.any(new == c):
                continue
            sizes = np.bincount(new, minlength=k)
            own = d2[np.arange(m), new]
            own = np.where(sizes[new] > 1, own, -1.0)
            donor = int(np.argmax(own))
            new[donor] = c
        if np.array_equal(new, labels):
            break
        labels = new
        centres = np.vstack([H[labels == c].mean(axis=0) for c in range(k)])

    renumber: dict[int, int] = {}
    for lab in labels:
        renumber.setdefault(int(lab), len(renumber))
    mapping = {n.id: renumber[int(lab)] for n, lab in zip(nodes, labels)}
    return ClusterAssignment(mapping, k)


def assign_test_sites(test: Dataset, hospitals: Sequence[HospitalNode], seed: int) -> np.ndarray:
    """Draw the hospital each held-out sample was scanned at.

    A sample of class ``c`` lands at hospital ``h`` with probability
    proportional to ``h``'s training count of ``c`` (uniform if no hospital
    holds the class), so every site's test mix follows its training mix.
    """
    nodes = sorted(hospitals, key=lambda h: h.id)
    ids = np.array([n.id for n in nodes])
    counts = np.vstack([n.local_data.label_counts() for n in nodes]).astype(np.float64)
    rng = np.random.default_rng([seed, 0x73697465])
    sites = np.empty(len(test), dtype=np.int64)
    for i, label in enumerate(test.y):
        col = counts[:, label]
        p = col / col.sum() if col.sum() > 0 else np.full(len(nodes), 1.0 / len(nodes))
        sites[i] = ids[rng.choice(len(nodes), p=p)]
    return sites


def cluster_routes(hospitals: Sequence[HospitalNode], assignment: ClusterAssignment) -> np.ndarray:
    """For each true class, the cluster whose label centroid is nearest its one-hot vector."""
    nodes = sorted(hospitals, key=lambda h: h.id)
    H = {n.id: label_histogram(n) for n in nodes}
    num_classes = nodes[0].local_data.num_classes
    centroids = np.vstack([
        np.mean([H[h] for h in assignment.members(c)], axis=0) for c in range(assignment.num_clusters)
    ])
    onehots = np.eye(num_classes)
    d2 = ((onehots[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def cfl_predict(models: Sequence[ParameterVector], assignment: ClusterAssignment,
                hospitals: Sequence[HospitalNode], spec: ModelSpec, data: Dataset,
                routing: str = "hospital", seed: int = 0,
                test_sites: np.ndarray | None = None) -> np.ndarray:
    """Predict ``data`` with per-cluster models under one of :data:`ROUTINGS`.

    ``"hospital"``
        each sample is scored by the cluster model of the hospital it was
        scanned at.  ``test_sites`` gives that hospital id per sample; when
        omitted it is drawn with :func:`assign_test_sites`.
    ``"mixture"``
        average of the cluster models' probabilities weighted by each
        cluster's share of training samples.  Uses no test labels.
    ``"label"``
        each sample goes to the cluster whose training-label centroid is
        nearest the sample's one-hot *true* label.  This reads the test label,
        so its accuracy can exceed the Bayes rate; kept for ablations only.
    """
    if routing not in ROUTINGS:
        raise ContractError(f"routing must be one of {ROUTINGS}, got {routing!r}")
    nodes = sorted(hospitals, key=lambda h: h.id)
    preds = np.empty(len(data), dtype=np.int64)

    if routing == "mixture":
        sizes = np.zeros(len(models))
        for n in nodes:
            sizes[assignment.mapping[n.id]] += n.sample_count
        shares = sizes / sizes.sum()
        probs = shares[0] * predict_proba(models[0], spec, data.X)
        for share, model in zip(shares[1:], models[1:]):
            probs = probs + share * predict_proba(model, spec, data.X)
        return probs.argmax(axis=1)

    if routing == "label":
        chosen = cluster_routes(nodes, assignment)[data.y]
    else:
        sites = assign_test_sites(data, nodes, seed) if test_sites is None else np.asarray(test_sites)
        if sites.shape != (len(data),):
            raise ContractError(f"test_sites must have one entry per sample ({len(data)})")
        if not np.all(np.isin(sites, [n.id for n in nodes])):
            raise ContractError("test_sites names hospitals that are not participating")
        chosen = np.array([assignment.mapping[int(h)] for h in sites], dtype=np.int64)

    for c, model in enumerate(models):
        mask = chosen == c
        if np.any(mask):
            preds[mask] = predict_proba(model, spec, data.X[mask]).argmax(axis=1)
    return preds


def run_cfl(hospitals: Sequence[HospitalNode], spec: ModelSpec, settings: TrainSettings,
            init: ParameterVector, k: int, max_rounds: int,
            convergence: ConvergenceSettings | None = ConvergenceSettings(), *,
            test: Dataset | None = None, stream: StreamFn | None = None,
            timing: str = "simulated", workers: int = 1, seed: int = 0,
            routing: str = "hospital", test_sites: np.ndarray | None = None,
            method: str = "cfl") -> tuple[list[ParameterVector], ClusterAssignment, TrainingTrace]:
    """Cluster hospitals by label mix, then run FedAvg independently per cluster.

    Held-out evaluation uses :func:`cfl_predict` with ``routing``.  Clusters,
    routing tables and test sites are fixed from the hospitals' data at the
    start of the run.
    """
    _check_timing(timing)
    if routing not in ROUTINGS:
        raise ContractError(f"routing must be one of {ROUTINGS}, got {routing!r}")
    check_params(init, spec)
    if max_rounds < 1:
        raise ContractError("max_rounds must be >= 1")
    nodes = _sorted_nodes(hospitals)
    assignment = cluster_clients(nodes, k, seed)
    sites = test_sites
    if routing == "hospital" and sites is None and test is not None:
        sites = assign_test_sites(test, nodes, seed)

    def route(pool: Dataset, models: list[ParameterVector], current: list[HospitalNode]) -> np.ndarray:
        pool_sites = sites
        if test is None:
            # pooled training data: each sample's site is the hospital holding it
            pool_sites = np.repeat([n.id for n in current], [n.sample_count for n in current])
        return cfl_predict(models, assignment, nodes, spec, pool, routing, seed, pool_sites)

    models, trace = _run_grouped(
        nodes, dict(assignment.mapping), [init] * k, spec, settings, max_rounds, convergence,
        test, stream, timing, workers, method, route)
    return models, assignment, trace
