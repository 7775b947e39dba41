"""Experiment configuration: TOML/JSON parsing, defaults and validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

OPTIMIZERS = ("dsgd", "dsgdm", "qg_dsgdm_n")
TOPOLOGIES = ("ring", "chain", "florentine", "complete")
ISO_MODES = ("iso_epoch", "iso_iteration")

# learning rate / weight decay per optimizer when not given explicitly
DEFAULT_LR = {"qg_dsgdm_n": 0.5, "dsgd": 0.1, "dsgdm": 0.1}
DEFAULT_WEIGHT_DECAY = {"qg_dsgdm_n": 1e-4, "dsgd": 5e-4, "dsgdm": 5e-4}


@dataclass(frozen=True)
class TopologyConfig:
    name: str = "ring"
    n_nodes: int = 16


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "synthetic"          # synthetic | idx | csv
    alpha: float = 0.1
    num_classes: int = 10
    val_fraction: float = 0.1
    seed: int = 0                       # dataset generation; run seeds drive partition and init
    # synthetic mixture
    dims: int = 32
    train_per_class: int = 300
    test_per_class: int = 200
    spread: float = 1.0
    scale: float = 1.0
    # files (idx / csv)
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    label_column: str = "label"
    max_train: int | None = None
    # public set: slice (held-out slice of the training source), mixture, uniform
    public: str = "slice"
    public_size: int = 2000
    public_shift: float = 0.0
    calibration: str = "public"         # public | uniform


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "qg_dsgdm_n"
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float | None = None
    batch_size: int = 32
    lr_decay_points: tuple[float, ...] = (0.6, 0.8)
    lr_decay_factor: float = 0.1

    @property
    def resolved_lr(self) -> float:
        return DEFAULT_LR[self.name] if self.lr is None else self.lr

    @property
    def resolved_weight_decay(self) -> float:
        return DEFAULT_WEIGHT_DECAY[self.name] if self.weight_decay is None else self.weight_decay


@dataclass(frozen=True)
class IdkdConfig:
    enabled: bool = True
    exchange_start_epoch: int | None = None   # default: 80% of total_epochs
    exchange_period: int | None = None        # default: total_epochs (one exchange)
    tau: float = 10.0
    plateau_detection: bool = False
    plateau_window: int = 5
    plateau_tol: float = 1e-3
    soft_private_targets: bool = False


@dataclass(frozen=True)
class RunConfig:
    total_epochs: int = 30
    iso: str = "iso_epoch"
    iteration_budget: int | None = None
    seeds: tuple[int, ...] = (4, 34, 5)
    workers: int = 1
    eval_every: int = 0
    dtype: str = "float32"


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    idkd: IdkdConfig = field(default_factory=IdkdConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def n_nodes(self) -> int:
        return 15 if self.topology.name == "florentine" else self.topology.n_nodes

    @property
    def exchange_start_epoch(self) -> int:
        s = self.idkd.exchange_start_epoch
        return int(math.floor(0.8 * self.run.total_epochs)) if s is None else s

    @property
    def exchange_period(self) -> int:
        k = self.idkd.exchange_period
        return self.run.total_epochs if k is None else k

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(optimizer={"lr": 0.05})`` returns a validated copy."""
        updates = {}
        for name, changes in sections.items():
            updates[name] = dataclasses.replace(getattr(self, name), **changes)
        out = dataclasses.replace(self, **updates)
        validate(out)
        return out

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    t, d, m, o, k, r = cfg.topology, cfg.data, cfg.model, cfg.optimizer, cfg.idkd, cfg.run
    checks = [
        ("topology.name", t.name in TOPOLOGIES, f"must be one of {TOPOLOGIES}"),
        ("topology.n_nodes", t.n_nodes >= 1, "must be >= 1"),
        ("data.dataset", d.dataset in ("synthetic", "idx", "csv"), "must be synthetic, idx or csv"),
        ("data.alpha", d.alpha > 0, "must be positive"),
        ("data.num_classes", d.num_classes >= 2, "must be >= 2"),
        ("data.val_fraction", 0 <= d.val_fraction < 1, "must lie in [0, 1)"),
        ("data.dims", d.dims >= 1, "must be positive"),
        ("data.train_per_class", d.train_per_class >= 1, "must be positive"),
        ("data.test_per_class", d.test_per_class >= 1, "must be positive"),
        ("data.spread", d.spread >= 0, "must be non-negative"),
        ("data.public", d.public in ("slice", "mixture", "uniform"), "must be slice, mixture or uniform"),
        ("data.public_size", d.public_size >= 1, "must be positive"),
        ("data.calibration", d.calibration in ("public", "uniform"), "must be public or uniform"),
        ("model.hidden", all(h >= 1 for h in m.hidden), "hidden sizes must be positive"),
        ("model.activation", m.activation in ("relu", "tanh"), "must be relu or tanh"),
        ("optimizer.name", o.name in OPTIMIZERS, f"must be one of {OPTIMIZERS}"),
        ("optimizer.lr", o.lr is None or o.lr > 0, "must be positive"),
        ("optimizer.momentum", 0 <= o.momentum < 1, "must lie in [0, 1)"),
        ("optimizer.weight_decay", o.weight_decay is None or o.weight_decay >= 0, "must be non-negative"),
        ("optimizer.batch_size", o.batch_size >= 1, "must be positive"),
        ("optimizer.lr_decay_points", all(0 < p < 1 for p in o.lr_decay_points), "fractions must lie in (0, 1)"),
        ("optimizer.lr_decay_factor", 0 < o.lr_decay_factor <= 1, "must lie in (0, 1]"),
        ("idkd.exchange_period", k.exchange_period is None or k.exchange_period >= 1, "must be >= 1"),
        ("idkd.exchange_start_epoch", k.exchange_start_epoch is None or k.exchange_start_epoch >= 1, "must be >= 1"),
        ("idkd.tau", k.tau > 0, "must be positive"),
        ("idkd.plateau_window", k.plateau_window >= 1, "must be >= 1"),
        ("run.total_epochs", r.total_epochs >= 1, "must be >= 1"),
        ("run.iso", r.iso in ISO_MODES, f"must be one of {ISO_MODES}"),
        ("run.iteration_budget", r.iteration_budget is None or r.iteration_budget >= 1, "must be positive"),
        ("run.seeds", len(r.seeds) >= 1, "need at least one seed"),
        ("run.workers", r.workers >= 1, "must be >= 1"),
        ("run.eval_every", r.eval_every >= 0, "must be >= 0"),
        ("run.dtype", r.dtype in ("float32", "float64"), "must be float32 or float64"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(key, msg)
    if d.dataset == "idx" and not d.train_images:
        raise ConfigError("data.train_images", "required for idx datasets")
    if d.dataset == "csv" and not d.train_csv:
        raise ConfigError("data.train_csv", "required for csv datasets")
    if r.iso == "iso_iteration" and r.iteration_budget is None:
        raise ConfigError("run.iteration_budget", "required in iso_iteration mode")
    return cfg


_SECTION_TYPES = {
    "topology": TopologyConfig, "data": DataConfig, "model": ModelConfig,
    "optimizer": OptimizerConfig, "idkd": IdkdConfig, "run": RunConfig,
}


def _coerce(key: str, value, default, annotation: str):
    if isinstance(default, bool) or annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if annotation.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        elem = float if "float" in annotation else int
        return tuple(_coerce(f"{key}[{i}]", v, elem(0), elem.__name__) for i, v in enumerate(value))
    if value is None:
        if "None" in annotation:
            return None
        raise ConfigError(key, "may not be null")
    if annotation.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if annotation.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported field type {annotation}")


def config_from_dict(doc: dict) -> ExperimentConfig:
    sections = {}
    for name, body in doc.items():
        if name not in _SECTION_TYPES:
            raise ConfigError(name, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(name, "section must be a table")
        cls = _SECTION_TYPES[name]
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}", "unknown key")
            kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key), str(known[key].type))
        sections[name] = cls(**kwargs)
    return validate(ExperimentConfig(**sections))


def parse_config(path) -> ExperimentConfig:
    """Read a TOML (or ``.json``) experiment file; unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file {path} not found")
    raw = path.read_bytes()
    try:
        if path.suffix == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from None
    return config_from_dict(doc)


def config_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
