"""Experiment configuration, seeding, method dispatch and result summaries.

A config is a TOML file::

    method = "virtual"          # virtual | fedavg | local | global
    seed = 0                    # master seed
    reps = 5
    out = "metrics.csv"
    widths = [100, 100]
    dropout = 0.3
    epochs = 60                 # per-client epoch budget (optional)

    [dataset]
    source = "idx"              # idx | csv | synthetic
    images = "train-images-idx3-ubyte"
    labels = "train-labels-idx1-ubyte"
    num_clients = 10
    transform = "permute"

    [virtual]                   # refinement and initialisation options
    [fedavg]                    # client_fraction, local_epochs, lr, batch_size, rounds
    [sgd]                       # lr, batch_size for local and global

Relative paths are resolved against the config file's directory. The
per-client epoch budget is shared by all methods: VIRTUAL spreads it evenly
over its refinements, so it must be a multiple of ``refinements_per_client``.
"""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import baselines
from .data import DatasetSpec, build_dataset
from .metrics import MetricsRecord
from .virtual import RefinementConfig, VirtualConfig, run_virtual, save_checkpoint

log = logging.getLogger(__name__)

METHODS = ("virtual", "fedavg", "local", "global")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    dataset: DatasetSpec
    widths: tuple[int, ...] = (100, 100)
    dropout: float = 0.3
    virtual: VirtualConfig = field(default_factory=VirtualConfig)
    fedavg: baselines.FedAvgConfig = field(default_factory=baselines.FedAvgConfig)
    sgd: baselines.SGDConfig = field(default_factory=baselines.SGDConfig)
    reps: int = 5
    seed: int = 0
    out: str | None = None
    checkpoint: str | None = None
    record_wallclock: bool = False  # off keeps output bytes a pure function of the config

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive integers")

    @property
    def epochs(self) -> int:
        """Per-client epoch budget shared by every method."""
        return self.virtual.epochs_per_client

    def with_method(self, method: str) -> "ExperimentConfig":
        return replace(self, method=method)


# --------------------------------------------------------------------------
# loading


_TOP_KEYS = {"method", "seed", "reps", "out", "widths", "dropout", "epochs", "checkpoint", "record_wallclock",
             "dataset", "virtual", "fedavg", "sgd"}
_REFINEMENT_KEYS = {f.name for f in dataclasses.fields(RefinementConfig)}
_VIRTUAL_KEYS = {f.name for f in dataclasses.fields(VirtualConfig)} - {"refinement"}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _resolve(path: str | None, base: Path) -> str | None:
    if path is None:
        return None
    p = Path(path).expanduser()
    return str(p if p.is_absolute() else base / p)


def _dataset_from_arg(value: str, current: dict) -> dict:
    """``--dataset`` override: ``synthetic``, a ``.csv`` file or a directory of IDX files."""
    keep = {k: v for k, v in current.items() if k not in {"source", "images", "labels", "path", "synthetic", "name"}}
    if value == "synthetic":
        return {**keep, "source": "synthetic", "synthetic": current.get("synthetic", {})}
    p = Path(value).expanduser()
    if p.suffix.lower() == ".csv":
        return {**keep, "source": "csv", "path": str(p), "name": p.stem}
    if p.is_dir():
        images = sorted(p.glob("*images-idx3-ubyte"))
        labels = sorted(p.glob("*labels-idx1-ubyte"))
        if len(images) != 1 or len(labels) != 1:
            raise ConfigError(f"{p}: expected exactly one *images-idx3-ubyte and one *labels-idx1-ubyte file")
        return {**keep, "source": "idx", "images": str(images[0]), "labels": str(labels[0]), "name": p.name}
    raise ConfigError(f"--dataset must be 'synthetic', a .csv file or a directory of IDX files; got {value!r}")


def config_from_dict(raw: dict, base_dir=".", overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from parsed TOML; ``overrides`` (CLI flags) win over file values."""
    base = Path(base_dir)
    raw = dict(raw)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(raw, _TOP_KEYS, "config")
    dataset_override = overrides.pop("dataset", None)
    raw.update(overrides)
    try:
        ds_raw = dict(raw.get("dataset", {}))
        for key in ("images", "labels", "path"):
            ds_raw[key] = _resolve(ds_raw.get(key), base)
        if dataset_override is not None:
            ds_raw = _dataset_from_arg(dataset_override, ds_raw)
        if "source" not in ds_raw:
            raise ConfigError("[dataset] needs a 'source'")
        _check_keys(ds_raw, {f.name for f in dataclasses.fields(DatasetSpec)}, "[dataset]")
        ds_raw.setdefault("seed", int(raw.get("seed", 0)))
        dataset = DatasetSpec(**{k: v for k, v in ds_raw.items() if v is not None})

        v_raw = dict(raw.get("virtual", {}))
        _check_keys(v_raw, _VIRTUAL_KEYS | _REFINEMENT_KEYS, "[virtual]")
        refinement = RefinementConfig(**{k: v for k, v in v_raw.items() if k in _REFINEMENT_KEYS})
        virtual = VirtualConfig(refinement=refinement, **{k: v for k, v in v_raw.items() if k in _VIRTUAL_KEYS})
        if "epochs" in raw:
            budget = int(raw["epochs"])
            r = virtual.refinements_per_client
            if budget < r or budget % r:
                raise ConfigError(f"epochs ({budget}) must be a positive multiple of refinements_per_client ({r})")
            virtual = replace(virtual, refinement=replace(refinement, epochs=budget // r))

        f_raw = dict(raw.get("fedavg", {}))
        _check_keys(f_raw, {f.name for f in dataclasses.fields(baselines.FedAvgConfig)}, "[fedavg]")
        f_raw.setdefault("dropout", raw.get("dropout", 0.3))
        fedavg = baselines.FedAvgConfig(**f_raw)

        s_raw = dict(raw.get("sgd", {}))
        _check_keys(s_raw, {"lr", "batch_size"}, "[sgd]")
        sgd = baselines.SGDConfig(dropout=float(raw.get("dropout", 0.3)), **s_raw)

        return ExperimentConfig(
            method=str(raw.get("method", "virtual")),
            dataset=dataset,
            widths=tuple(int(w) for w in raw.get("widths", (100, 100))),
            dropout=float(raw.get("dropout", 0.3)),
            virtual=virtual,
            fedavg=fedavg,
            sgd=sgd,
            reps=int(raw.get("reps", 5)),
            seed=int(raw.get("seed", 0)),
            out=raw.get("out"),
            checkpoint=raw.get("checkpoint"),
            record_wallclock=bool(raw.get("record_wallclock", False)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent, overrides)


def check_inputs(cfg: ExperimentConfig) -> None:
    """Dry-run checks beyond parsing: input files exist."""
    ds = cfg.dataset
    for p in (ds.images, ds.labels, ds.path):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")


# --------------------------------------------------------------------------
# running


def repetition_seed(master: int, r: int) -> int:
    """Distinct, reproducible 32-bit seed for repetition ``r``."""
    return int(np.random.SeedSequence((master, r)).generate_state(1)[0])


@dataclass
class MethodOutcome:
    accuracies: list[float]
    client_epochs: list[float]

    @property
    def epochs_per_client(self) -> float:
        return float(np.mean(self.client_epochs))


def dispatch(cfg: ExperimentConfig, ds, rng: np.random.Generator, checkpoint: str | None = None) -> MethodOutcome:
    budget = cfg.epochs
    if cfg.method == "virtual":
        res = run_virtual(ds, cfg.virtual, rng, widths=cfg.widths, dropout=cfg.dropout)
        if checkpoint:
            save_checkpoint(checkpoint, res.server, res.clients)
        return MethodOutcome(res.accuracies, res.epochs_per_client)
    if cfg.method == "fedavg":
        res = baselines.run_fedavg(ds, cfg.fedavg, budget, rng, cfg.widths)
    elif cfg.method == "local":
        res = baselines.run_local(ds, cfg.sgd, budget, rng, cfg.widths)
    else:
        res = baselines.run_global(ds, cfg.sgd, budget, rng, cfg.widths)
    return MethodOutcome(res.accuracies, res.client_epochs)


@dataclass
class Summary:
    mean: float
    std: float
    completed: int
    failed: int


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    outcomes: list[MethodOutcome]
    failures: list[tuple[int, str]]
    summary: Summary


def _checkpoint_path(path: str | None, r: int, reps: int) -> str | None:
    if path is None or reps == 1:
        return path
    p = Path(path)
    return str(p.with_name(f"{p.stem}.r{r}{p.suffix}"))


def summarize(records: list[MetricsRecord], failed: int = 0) -> Summary:
    """Mean and sample standard deviation of the multi-task average; std is 0 for one record."""
    avgs = np.array([r.average for r in records])
    if len(avgs) == 0:
        return Summary(float("nan"), float("nan"), 0, failed)
    std = float(np.std(avgs, ddof=1)) if len(avgs) > 1 else 0.0
    return Summary(float(np.mean(avgs)), std, len(avgs), failed)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    records, outcomes, failures = [], [], []
    for r in range(cfg.reps):
        seed = repetition_seed(cfg.seed, r)
        start = time.perf_counter()
        try:
            ds = build_dataset(cfg.dataset, split_seed=seed)
            outcome = dispatch(cfg, ds, np.random.default_rng((seed, 1)), _checkpoint_path(cfg.checkpoint, r, cfg.reps))
        except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
            log.error("repetition %d (seed %d) failed: %s", r, seed, exc)
            failures.append((r, f"{type(exc).__name__}: {exc}"))
            continue
        seconds = time.perf_counter() - start if cfg.record_wallclock else 0.0
        records.append(
            MetricsRecord(
                cfg.method, ds.name, seed, [s.client_id for s in ds], list(outcome.accuracies),
                seconds, outcome.epochs_per_client,
            )
        )
        outcomes.append(outcome)
        log.info("%s rep %d: average accuracy %.4f", cfg.method, r, records[-1].average)
    if failures:
        warnings.warn(
            f"{len(failures)} of {cfg.reps} repetitions failed; summary uses the {len(records)} completed",
            RuntimeWarning,
            stacklevel=2,
        )
    return ExperimentResult(records, outcomes, failures, summarize(records, len(failures)))


def compare_methods(cfg: ExperimentConfig, methods=METHODS) -> dict[str, ExperimentResult]:
    """Run the same config under several methods (same seeds, same splits)."""
    return {m: run_experiment(cfg.with_method(m)) for m in methods}


def epoch_parity_gap(results: dict[str, ExperimentResult]) -> float:
    """Largest spread, in epochs per client, of recorded budgets across methods within a repetition."""
    per_rep = [[r.epochs for r in res.records] for res in results.values()]
    n = min(len(x) for x in per_rep)
    if n == 0:
        raise ValueError("no completed repetitions to compare")
    return max(max(x[i] for x in per_rep) - min(x[i] for x in per_rep) for i in range(n))
