"""Flat ``key = value`` experiment configuration files."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

METHODS = ("fl", "cfl", "ftl")
METHOD_CHOICES = METHODS + ("all",)


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries file and line."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    method: str = "all"
    out_dir: str = "results"

    # data source: synthetic unless csv_path is set
    csv_path: str | None = None
    source_csv: str | None = None
    test_fraction: float = 0.2
    train_class_counts: tuple[int, ...] = (240, 102, 108, 180)
    test_class_counts: tuple[int, ...] = (120, 51, 54, 90)
    source_class_counts: tuple[int, ...] = (10000, 10000, 10000, 10000)
    class_separation: float = 3.0
    noise_std: float = 1.0

    num_hospitals: int = 4
    dirichlet_alpha: float = 0.5

    input_dim: int = 128
    hidden_dim: int = 16
    num_classes: int = 4

    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    pretrain_epochs: int = 5

    clusters: int = 2
    cfl_routing: str = "hospital"
    max_rounds: int = 50

    loss_epsilon: float = 1e-3
    accuracy_epsilon: float = 1e-3
    patience: int = 3

    stream_per_cycle: int = 0
    baseline_pretrained: bool = False
    workers: int = 1
    timing: str = "simulated"

    def methods(self) -> tuple[str, ...]:
        return METHODS if self.method == "all" else (self.method,)

    def canonical_text(self, exclude: tuple[str, ...] = ()) -> str:
        lines = []
        for f in fields(self):
            if f.name in exclude:
                continue
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every setting that can change results (``out_dir`` cannot)."""
        return hashlib.sha256(self.canonical_text(exclude=("out_dir",)).encode()).hexdigest()


_SYNTH_KEYS = {"train_class_counts", "test_class_counts", "source_class_counts",
               "class_separation", "noise_std"}

_PARSERS = {}
for _f in fields(ExperimentConfig):
    _t = _f.type
    if _t in ("int",):
        _PARSERS[_f.name] = int
    elif _t == "float":
        _PARSERS[_f.name] = float
    elif _t == "bool":
        _PARSERS[_f.name] = _bool
    elif _t.startswith("tuple"):
        _PARSERS[_f.name] = _ints
    else:
        _PARSERS[_f.name] = str


def validate(cfg: ExperimentConfig, where: dict[str, str] | None = None) -> ExperimentConfig:
    """Cross-field checks. ``where`` maps keys to ``file:line`` for messages."""
    where = where or {}

    def fail(key, message):
        loc = where.get(key)
        raise ConfigError(f"{loc}: {message}" if loc else f"{key}: {message}")

    if cfg.method not in METHOD_CHOICES:
        fail("method", f"unknown method {cfg.method!r}; choose one of {', '.join(METHOD_CHOICES)}")
    if cfg.csv_path is not None:
        clash = sorted(k for k in _SYNTH_KEYS if k in where)
        if clash:
            fail(clash[0], "synthetic data keys cannot be combined with csv_path")
        if cfg.stream_per_cycle:
            fail("stream_per_cycle", "twin streaming needs the synthetic generator")
        if "ftl" in cfg.methods() and cfg.source_csv is None:
            fail("csv_path", "ftl on csv data needs source_csv for pretraining")
    elif cfg.source_csv is not None:
        fail("source_csv", "source_csv is only valid together with csv_path")
    synth_counts = () if cfg.csv_path else ("train_class_counts", "test_class_counts", "source_class_counts")
    for key in synth_counts:
        counts = getattr(cfg, key)
        if len(counts) != cfg.num_classes:
            fail(key, f"expected {cfg.num_classes} counts, got {len(counts)}")
        if any(c < 0 for c in counts) or sum(counts) == 0:
            fail(key, "counts must be non-negative and not all zero")
    positive_ints = ("num_hospitals", "input_dim", "hidden_dim", "local_epochs", "batch_size",
                     "pretrain_epochs", "clusters", "max_rounds", "patience", "workers")
    for key in positive_ints:
        if getattr(cfg, key) < 1:
            fail(key, "must be >= 1")
    if cfg.num_classes < 2:
        fail("num_classes", "must be >= 2")
    for key in ("dirichlet_alpha", "learning_rate", "class_separation", "noise_std",
                "loss_epsilon", "accuracy_epsilon"):
        if not getattr(cfg, key) > 0:
            fail(key, "must be > 0")
    if not 0 < cfg.test_fraction < 1:
        fail("test_fraction", "must lie in (0, 1)")
    if cfg.clusters > cfg.num_hospitals:
        fail("clusters", f"cannot exceed num_hospitals ({cfg.num_hospitals})")
    if cfg.stream_per_cycle < 0:
        fail("stream_per_cycle", "must be >= 0")
    if cfg.cfl_routing not in ("hospital", "mixture", "label"):
        fail("cfl_routing", f"unknown routing {cfg.cfl_routing!r}")
    if cfg.timing not in ("simulated", "wall"):
        fail("timing", f"unknown timing {cfg.timing!r}")
    return cfg


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a config file; ``overrides`` (e.g. from CLI flags) win over file values."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None

    values: dict[str, object] = {}
    where: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        loc = f"{path}:{line_no}"
        if "=" not in line:
            raise ConfigError(f"{loc}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"{loc}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{loc}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{loc}: bad value for {key!r}: {exc}") from None
        where[key] = loc

    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
            where[key] = f"--{key.replace('_', '-')}"
    if "seed" not in values:
        raise ConfigError(f"{path}: 'seed' is required")
    return validate(ExperimentConfig(**values), where)


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return validate(replace(cfg, **changes))


def as_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
