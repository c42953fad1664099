"""Budgeted random hyperparameter search scored by stratified k-fold log loss."""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from geoact.activities import N_CLASSES
from geoact.errors import BudgetExhaustedError
from geoact.models.base import FAMILIES, ModelSpec, TrainedModel


class FoldDegeneracyWarning(UserWarning):
    """A cross-validation fold is missing one or more classes."""


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.log and self.lo <= 0:
            raise ValueError("log scale needs a positive range")

    def sample(self, rng: np.random.Generator) -> float:
        if self.log:
            return float(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi))))
        return float(rng.uniform(self.lo, self.hi))

    def contains(self, v) -> bool:
        return isinstance(v, (int, float)) and self.lo <= v <= self.hi

    def to_dict(self) -> dict:
        return {"type": "continuous", "lo": self.lo, "hi": self.hi, "log": self.log}


@dataclass(frozen=True)
class Integer:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))

    def contains(self, v) -> bool:
        return isinstance(v, (int, np.integer)) and self.lo <= v <= self.hi

    def to_dict(self) -> dict:
        return {"type": "integer", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Nominal:
    values: tuple

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("nominal descriptor needs at least one value")

    def sample(self, rng: np.random.Generator):
        v = self.values[int(rng.integers(len(self.values)))]
        return v.item() if isinstance(v, np.generic) else v

    def contains(self, v) -> bool:
        return v in self.values

    def to_dict(self) -> dict:
        return {"type": "nominal", "values": list(self.values)}


@dataclass(frozen=True)
class Binary:
    def sample(self, rng: np.random.Generator) -> bool:
        return bool(rng.integers(2))

    def contains(self, v) -> bool:
        return isinstance(v, (bool, np.bool_))

    def to_dict(self) -> dict:
        return {"type": "binary"}


Descriptor = Continuous | Integer | Nominal | Binary


def descriptor_from_dict(d: dict) -> Descriptor:
    kind = d["type"]
    if kind == "continuous":
        return Continuous(float(d["lo"]), float(d["hi"]), bool(d.get("log", False)))
    if kind == "integer":
        return Integer(int(d["lo"]), int(d["hi"]))
    if kind == "nominal":
        return Nominal(tuple(d["values"]))
    if kind == "binary":
        return Binary()
    raise ValueError(f"unknown descriptor type {kind!r}")


@dataclass
class SearchSpace:
    """Per-hyperparameter descriptors plus fixed overrides for one family.

    Parameters are sampled in the sorted order of their names so a space
    read back from a file draws the same configs as the original.
    """

    family: str
    params: dict[str, Descriptor]
    fixed: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")

    def sample(self, rng: np.random.Generator) -> dict:
        cfg = {name: self.params[name].sample(rng) for name in sorted(self.params)}
        cfg.update(self.fixed)
        return cfg

    def contains(self, config: dict) -> bool:
        return all(name in config and d.contains(config[name]) for name, d in self.params.items())

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "params": {k: self.params[k].to_dict() for k in sorted(self.params)},
            "fixed": dict(self.fixed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(
            d["family"],
            {k: descriptor_from_dict(v) for k, v in d["params"].items()},
            dict(d.get("fixed", {})),
        )


_MLP_PARAMS: dict[str, Descriptor] = {
    "hidden_layers": Nominal((3, 6, 9)),
    "units": Nominal((128, 256, 512)),
    "learning_rate": Continuous(1e-3, 1e-1, log=True),
}

DEFAULT_SPACES: dict[str, SearchSpace] = {
    "knn": SearchSpace("knn", {"k": Integer(1, 33), "metric": Nominal(("L1", "L2"))}),
    "gbt": SearchSpace(
        "gbt",
        {
            "eta": Continuous(1e-3, 1.0, log=True),
            "lambda": Continuous(1e-10, 1.0, log=True),
            "alpha": Continuous(1e-10, 1.0, log=True),
            "gamma": Continuous(0.1, 1.0, log=True),
            "num_round": Integer(1, 100),
            "max_depth": Integer(1, 20),
            "max_delta_step": Integer(0, 10),
            "min_child_weight": Continuous(0.1, 20.0, log=True),
            "subsample": Continuous(0.01, 1.0),
            "colsample_bylevel": Continuous(0.1, 1.0),
            "colsample_bynode": Continuous(0.1, 1.0),
            "colsample_bytree": Continuous(0.5, 1.0),
        },
    ),
    "mlp": SearchSpace("mlp", dict(_MLP_PARAMS)),
    "rmlp": SearchSpace(
        "rmlp",
        {
            **_MLP_PARAMS,
            "dropout_rate": Continuous(0.0, 0.5),
            "weight_decay": Continuous(1e-6, 1e-1, log=True),
            # listed as log scale but the range includes 0, so drawn linearly
            "stddev": Continuous(0.0, 0.5),
            "skip": Binary(),
            "swa": Binary(),
        },
    ),
}


def default_space(family: str) -> SearchSpace:
    return SearchSpace.from_dict(DEFAULT_SPACES[family].to_dict())


def load_spaces(path: str | Path) -> dict[str, SearchSpace]:
    """Read search spaces from a YAML/JSON mapping family -> space description."""
    raw = yaml.safe_load(Path(path).read_text())
    return {fam: SearchSpace.from_dict({"family": fam, **d}) for fam, d in raw.items()}


def sample_config(space: SearchSpace, seed: int | np.random.Generator, model_seed: int = 0) -> ModelSpec:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ModelSpec(space.family, space.sample(rng), model_seed)


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold index per row; each class is shuffled then dealt round-robin."""
    if k < 2:
        raise ValueError("k must be >= 2")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        # rotate the deal so small classes do not all land in fold 0
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    return folds


@dataclass
class TrialRecord:
    trial: int
    config: dict
    fold_losses: list[float]
    mean: float
    std: float
    duration: float
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_losses(cls, trial: int, spec: ModelSpec, losses: Sequence[float], duration: float, notes=()):
        arr = np.asarray(losses, dtype=np.float64)
        return cls(trial, spec.to_dict(), [float(v) for v in arr], float(arr.mean()), float(arr.std()), duration, list(notes))

    def to_dict(self) -> dict:
        return {
            "trial": self.trial,
            "config": self.config,
            "fold_losses": self.fold_losses,
            "mean": self.mean,
            "std": self.std,
            "duration": self.duration,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(**d)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.config)


FitFn = Callable[[ModelSpec, np.ndarray, np.ndarray], TrainedModel]


def _default_fit(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> TrainedModel:
    from geoact.models import fit

    return fit(spec, X, y)


def cross_validate(
    spec: ModelSpec,
    X: np.ndarray,
    y: np.ndarray,
    k: int = 3,
    seed: int = 0,
    fit_fn: FitFn | None = None,
    trial: int = 0,
    n_classes: int = N_CLASSES,
) -> TrialRecord:
    """Held-out log loss of ``spec`` on each of ``k`` stratified folds."""
    from geoact.evaluation import log_loss

    fit_fn = fit_fn or _default_fit
    y = np.asarray(y)
    folds = stratified_folds(y, k, seed)
    present = set(np.unique(y).tolist())
    losses, notes = [], []
    start = time.perf_counter()
    for f in range(k):
        held = folds == f
        missing = sorted(present - set(np.unique(y[~held]).tolist()))
        if missing:
            msg = f"fold {f}: classes {missing} absent from the training portion"
            warnings.warn(msg, FoldDegeneracyWarning, stacklevel=2)
            notes.append(msg)
        model = fit_fn(spec, X[~held], y[~held])
        losses.append(log_loss(model.predict_proba(X[held]), y[held]))
    return TrialRecord.from_losses(trial, spec, losses, time.perf_counter() - start, notes)


@dataclass(frozen=True)
class Budget:
    max_trials: int | None = 100
    max_wall_clock: float | None = 48 * 3600.0  # seconds

    def __post_init__(self) -> None:
        if self.max_trials is None and self.max_wall_clock is None:
            raise ValueError("a budget needs at least one finite bound")
        if self.max_trials is not None and self.max_trials < 0:
            raise ValueError("max_trials must be >= 0")
        if self.max_wall_clock is not None and self.max_wall_clock < 0:
            raise ValueError("max_wall_clock must be >= 0")


@dataclass
class SearchResult:
    best: TrialRecord
    trials: list[TrialRecord]

    def running_best(self) -> list[float]:
        return np.minimum.accumulate([t.mean for t in self.trials]).tolist()


def select_best(trials: Sequence[TrialRecord]) -> TrialRecord:
    """Lowest mean loss; the earliest trial wins ties. Non-finite means never win."""
    best = None
    for t in sorted(trials, key=lambda t: t.trial):
        if not math.isfinite(t.mean):
            continue
        if best is None or t.mean < best.mean:
            best = t
    if best is None:
        raise BudgetExhaustedError("no trial finished with a finite loss")
    return best


def search(
    space: SearchSpace,
    X: np.ndarray,
    y: np.ndarray,
    budget: Budget = Budget(),
    seed: int = 0,
    k: int = 3,
    fit_fn: FitFn | None = None,
    candidates: Sequence[dict] | None = None,
    log_path: str | Path | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> SearchResult:
    """Random search under ``budget``.

    ``candidates`` are evaluated before any sampled config. A trial that has
    started always finishes; the wall-clock bound is checked between trials.
    Every trial uses the same folds and model seed, so configs are compared
    on equal footing.
    """
    from geoact.errors import TrainingDivergedError

    rng = np.random.default_rng(seed)
    queue = list(candidates or [])
    trials: list[TrialRecord] = []
    start = clock()
    log = open(log_path, "w") if log_path is not None else None
    try:
        while True:
            if budget.max_trials is not None and len(trials) >= budget.max_trials:
                break
            if budget.max_wall_clock is not None and clock() - start >= budget.max_wall_clock:
                break
            cfg = queue.pop(0) if queue else space.sample(rng)
            spec = ModelSpec(space.family, cfg, seed)
            try:
                rec = cross_validate(spec, X, y, k=k, seed=seed, fit_fn=fit_fn, trial=len(trials))
            except TrainingDivergedError as exc:
                rec = TrialRecord(len(trials), spec.to_dict(), [], math.inf, math.nan, 0.0, [f"diverged: {exc}"])
            trials.append(rec)
            if log is not None:
                log.write(json.dumps(_log_row(rec), sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    if not trials:
        raise BudgetExhaustedError("budget allowed no trials")
    return SearchResult(select_best(trials), trials)


def _log_row(rec: TrialRecord) -> dict:
    d = rec.to_dict()
    d["mean"] = d["mean"] if math.isfinite(d["mean"]) else None
    d["std"] = d["std"] if math.isfinite(d["std"]) else None
    return d


def read_trial_log(path: str | Path) -> list[TrialRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            d["mean"] = math.inf if d["mean"] is None else d["mean"]
            d["std"] = math.nan if d["std"] is None else d["std"]
            out.append(TrialRecord.from_dict(d))
    return out
