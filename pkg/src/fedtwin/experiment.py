"""End-to-end experiment driver: data, hospitals, runs, reports and output files."""
from __future__ import annotations

import csv
import logging
import platform
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import METHODS, ExperimentConfig
from .data import (
    Dataset,
    Sample,
    SynthConfig,
    default_class_names,
    draw_samples,
    generate_synthetic,
    load_csv,
    partition_dirichlet,
    train_test_split,
)
from .metrics import (
    ConfusionMatrix,
    ConvergenceSettings,
    MetricsReport,
    confusion_matrix,
    convergence_time_ms,
    detect_convergence,
    report,
)
from .model import ModelSpec, ParameterVector, TrainSettings, init_params, predict, pretrain_base
from .protocol import (
    HospitalNode,
    TrainingTrace,
    cfl_predict,
    label_histogram,
    run_cfl,
    run_fedavg,
    run_ftl,
)

logger = logging.getLogger(__name__)

# Sub-seed tags; every random stream is derived from (seed, tag).
_TRAIN, _TEST, _SOURCE, _PARTITION, _PRETRAIN, _INIT, _LOCAL, _CLUSTER, _STREAM, _SPLIT = range(1, 11)


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class MethodResult:
    method: str
    trace: TrainingTrace
    confusion: ConfusionMatrix
    report: MetricsReport
    convergence_round: int | None
    convergence_ms: float | None

    @property
    def rounds_run(self) -> int:
        return self.trace.rounds_completed

    @property
    def total_ms(self) -> float:
        return convergence_time_ms(self.trace, self.rounds_run)


@dataclass
class Benchmark:
    spec: ModelSpec
    hospitals: list[HospitalNode]
    test: Dataset
    source: Dataset | None
    synth: SynthConfig | None


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    s = cfg.seed
    names = default_class_names(cfg.num_classes)
    if cfg.csv_path is None:
        base = SynthConfig(
            class_counts=cfg.train_class_counts, input_dim=cfg.input_dim,
            class_separation=cfg.class_separation, noise_std=cfg.noise_std,
            seed=derive_seed(s, _TRAIN), mean_seed=s, class_names=names,
        )
        train = generate_synthetic(base)
        test = generate_synthetic(replace(base, class_counts=cfg.test_class_counts,
                                          seed=derive_seed(s, _TEST)))
        source = generate_synthetic(replace(base, class_counts=cfg.source_class_counts,
                                            seed=derive_seed(s, _SOURCE)))
        input_dim, synth = cfg.input_dim, base
    else:
        data = load_csv(cfg.csv_path, cfg.num_classes, names)
        train, test = train_test_split(data, cfg.test_fraction, derive_seed(s, _SPLIT))
        source = None
        if cfg.source_csv is not None:
            src = load_csv(cfg.source_csv, max(cfg.num_classes, 2))
            if src.input_dim != data.input_dim:
                raise ValueError("source_csv feature count differs from csv_path")
            source = src
        input_dim, synth = data.input_dim, None

    shards = partition_dirichlet(train, cfg.num_hospitals, cfg.dirichlet_alpha, derive_seed(s, _PARTITION))
    hospitals = [HospitalNode(i, shard) for i, shard in enumerate(shards)]
    spec = ModelSpec(input_dim, cfg.hidden_dim, cfg.num_classes)
    return Benchmark(spec, hospitals, test, source, synth)


def _stream_fn(cfg: ExperimentConfig, synth: SynthConfig | None):
    if not cfg.stream_per_cycle or synth is None:
        return None

    def stream(round_index: int, node: HospitalNode) -> list[Sample]:
        rng = np.random.default_rng([cfg.seed, _STREAM, round_index, node.id])
        labels = rng.choice(synth.num_classes, size=cfg.stream_per_cycle, p=label_histogram(node))
        X = draw_samples(synth, labels, rng)
        return [Sample(x, int(c)) for x, c in zip(X, labels)]

    return stream


def run_method(method: str, cfg: ExperimentConfig, bench: Benchmark,
               pretrained: ParameterVector | None = None) -> MethodResult:
    s = cfg.seed
    spec = bench.spec
    settings = TrainSettings(cfg.learning_rate, cfg.local_epochs, cfg.batch_size, derive_seed(s, _LOCAL))
    conv = ConvergenceSettings(cfg.loss_epsilon, cfg.accuracy_epsilon, cfg.patience)
    common = dict(test=bench.test, stream=_stream_fn(cfg, bench.synth), timing=cfg.timing)

    if method in ("fl", "cfl"):
        if cfg.baseline_pretrained:
            init = pretrained.with_frozen_base(False)
        else:
            init = init_params(spec, derive_seed(s, _INIT))
    if method == "ftl":
        params, trace = run_ftl(bench.hospitals, spec, settings, pretrained, cfg.max_rounds, conv, **common)
        preds = predict(params, spec, bench.test.X)
    elif method == "fl":
        params, trace = run_fedavg(bench.hospitals, spec, settings, init, cfg.max_rounds, conv,
                                   workers=cfg.workers, **common)
        preds = predict(params, spec, bench.test.X)
    elif method == "cfl":
        cseed = derive_seed(s, _CLUSTER)
        models, assignment, trace = run_cfl(
            bench.hospitals, spec, settings, init, cfg.clusters, cfg.max_rounds, conv,
            workers=cfg.workers, seed=cseed, routing=cfg.cfl_routing, **common)
        preds = cfl_predict(models, assignment, bench.hospitals, spec, bench.test, cfg.cfl_routing, cseed)
    else:
        raise ValueError(f"unknown method {method!r}")

    cm = confusion_matrix(preds, bench.test.y, spec.num_classes, bench.test.class_names)
    r = detect_convergence(trace, conv)
    return MethodResult(method, trace, cm, report(cm), r,
                        None if r is None else convergence_time_ms(trace, r))


def run_methods(cfg: ExperimentConfig) -> list[MethodResult]:
    bench = build_benchmark(cfg)
    pretrained = None
    if "ftl" in cfg.methods() or cfg.baseline_pretrained:
        if bench.source is None:
            raise ValueError("no source data available for pretraining")
        pre_settings = TrainSettings(cfg.learning_rate, cfg.pretrain_epochs, cfg.batch_size,
                                     derive_seed(cfg.seed, _PRETRAIN))
        pretrained = pretrain_base(bench.spec, bench.source, pre_settings)
    results = []
    for method in cfg.methods():
        logger.info("running %s", method)
        try:
            results.append(run_method(method, cfg, bench, pretrained))
        except Exception as exc:
            exc.method = method
            raise
    return results


# ---- formatting -----------------------------------------------------------

def fmt4(x: float) -> str:
    """Four decimals, halves rounded away from zero."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP))


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


_LABELS = {"fl": "FL", "cfl": "CFL", "ftl": "FTL"}


def compare_report(results: Sequence[MethodResult]) -> tuple[str, list[list[str]]]:
    """Method comparison as aligned text plus CSV rows (header first).

    Sections are ordered fl, cfl, ftl whatever the input order.
    """
    if not results:
        raise ValueError("compare_report needs at least one method result")
    ordered = sorted(results, key=lambda r: METHODS.index(r.method))

    header = ["method", "class", "support", "precision", "recall", "f1", "accuracy",
              "overall_accuracy", "convergence_round", "convergence_ms", "rounds_run"]
    rows = [header]
    name_w = max(len(n) for r in ordered for n in r.report.class_names)
    name_w = max(name_w, len("Classes"))
    lines = [
        f"{'Method':<6}  {'Classes':<{name_w}}  {'# of Images':>11}  {'Precision':>9}  "
        f"{'Recall':>9}  {'F1-Score':>9}  {'Accuracy':>9}"
    ]
    rule = "-" * len(lines[0])
    lines.insert(0, rule)
    lines.append(rule)
    for res in ordered:
        rep = res.report
        conv_round = "" if res.convergence_round is None else str(res.convergence_round)
        conv_ms = "" if res.convergence_ms is None else fmt4(res.convergence_ms)
        for c, (name, support, p, rc, f, acc) in enumerate(rep.rows()):
            label = _LABELS[res.method] if c == 0 else ""
            lines.append(f"{label:<6}  {name:<{name_w}}  {support:>11}  {fmt4(p):>9}  "
                         f"{fmt4(rc):>9}  {fmt4(f):>9}  {fmt4(acc):>9}")
            rows.append([res.method, name, str(support), fmt4(p), fmt4(rc), fmt4(f), fmt4(acc),
                         fmt4(rep.overall_accuracy), conv_round, conv_ms, str(res.rounds_run)])
        lines.append(f"{'':<6}  {'Overall accuracy':<{name_w}}  {'':>11}  {'':>9}  {'':>9}  "
                     f"{'':>9}  {fmt4(rep.overall_accuracy):>9}")
        lines.append(rule)

    lines += ["", "Convergence", rule]
    lines.append(f"{'Method':<6}  {'Converged at round':>18}  {'Convergence ms':>14}  "
                 f"{'Rounds run':>10}  {'Total ms':>12}")
    for res in ordered:
        conv_round = "-" if res.convergence_round is None else str(res.convergence_round)
        conv_ms = "-" if res.convergence_ms is None else fmt4(res.convergence_ms)
        lines.append(f"{_LABELS[res.method]:<6}  {conv_round:>18}  {conv_ms:>14}  "
                     f"{res.rounds_run:>10}  {fmt4(res.total_ms):>12}")
    lines.append(rule)
    return "\n".join(lines) + "\n", rows


# ---- output files ---------------------------------------------------------

def _write_rows(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_method_files(res: MethodResult, out: Path) -> list[Path]:
    trace_rows = [["round", "actor_id", "loss", "accuracy", "elapsed_ms"]]
    trace_rows += [[str(r), str(a), _fmt(l), _fmt(acc), _fmt(ms)] for r, a, l, acc, ms in res.trace.rows()]
    cm = res.confusion
    cm_rows = [["true\\predicted", *cm.class_names]]
    cm_rows += [[name, *(str(v) for v in row)] for name, row in zip(cm.class_names, cm.counts)]
    rep = res.report
    m_rows = [["class", "support", "precision", "recall", "f1", "accuracy",
               "precision_undefined", "recall_undefined"]]
    for c, (name, support, p, rc, f, acc) in enumerate(rep.rows()):
        m_rows.append([name, str(support), _fmt(p), _fmt(rc), _fmt(f), _fmt(acc),
                       str(rep.precision_undefined[c]).lower(), str(rep.recall_undefined[c]).lower()])
    m_rows.append(["overall", str(sum(rep.support)), "", "", "", _fmt(rep.overall_accuracy), "", ""])

    paths = [out / f"trace_{res.method}.csv", out / f"confusion_{res.method}.csv",
             out / f"metrics_{res.method}.csv"]
    for path, rows in zip(paths, (trace_rows, cm_rows, m_rows)):
        _write_rows(path, rows)
    return paths


def write_manifest(cfg: ExperimentConfig, out: Path, files: Sequence[Path]) -> Path:
    path = out / "manifest.txt"
    lines = [
        f"config_sha256 = {cfg.digest()}",
        f"seed = {cfg.seed}",
        f"methods = {','.join(cfg.methods())}",
        f"fedtwin = {__version__}",
        f"numpy = {np.__version__}",
        f"python = {platform.python_version()}",
        "files = " + ",".join(sorted(p.name for p in files)),
        "",
        "[config]",
        cfg.canonical_text(),
    ]
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def run_experiment(cfg: ExperimentConfig) -> list[MethodResult]:
    """Run every requested method and write all output files to ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_methods(cfg)
    files: list[Path] = []
    for res in results:
        files += write_method_files(res, out)
    text, rows = compare_report(results)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    _write_rows(out / "summary.csv", rows)
    files += [out / "summary.txt", out / "summary.csv"]
    write_manifest(cfg, out, files)
    return results
