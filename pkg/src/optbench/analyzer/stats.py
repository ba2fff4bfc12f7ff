"""Seed statistics, convergence thresholds and the speed measure."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..runner import METRICS, TrainingLog
from ..versioning import require_compatible

BASELINE_OPTIMIZERS = ("sgd", "momentum", "adam")


class AnalysisError(ValueError):
    pass


class MixedConfigError(AnalysisError):
    pass


class MissingBaselineError(AnalysisError):
    pass


class DivergedBaselineError(AnalysisError):
    pass


def criterion_metric(criterion: str) -> str:
    """``test_accuracy`` -> ``test_accuracies``; ``test_loss`` -> ``test_losses``."""
    return {"test_accuracy": "test_accuracies", "test_loss": "test_losses"}[criterion]


@dataclass
class AggregateCurve:
    problem: str
    optimizer: str
    hyperparams: dict[str, float]
    epochs: int
    batch_size: int
    iterations_per_epoch: int
    criterion: str
    version: str
    seeds: list[int]
    diverged_seeds: list[int]
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    # the criterion curve of every seed, for the per-seed speed measure
    per_seed: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def seed_count(self) -> int:
        return len(self.seeds)

    @property
    def diverged_count(self) -> int:
        return len(self.diverged_seeds)

    @property
    def metric_mode(self) -> str:
        return "max_accuracy" if self.criterion == "test_accuracy" else "min_loss"

    @property
    def final_mean(self) -> float:
        return float(self.mean[criterion_metric(self.criterion)][-1])

    @property
    def final_std(self) -> float:
        return float(self.std[criterion_metric(self.criterion)][-1])

    def to_dict(self) -> dict:
        def enc(a):
            return [float(x) if math.isfinite(x) else None for x in a]
        return {
            "version": self.version,
            "problem": self.problem,
            "optimizer": self.optimizer,
            "hyperparams": self.hyperparams,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "iterations_per_epoch": self.iterations_per_epoch,
            "criterion": self.criterion,
            "seeds": self.seeds,
            "diverged_seeds": self.diverged_seeds,
            "mean": {k: enc(v) for k, v in self.mean.items()},
            "std": {k: enc(v) for k, v in self.std.items()},
            "per_seed": {str(s): enc(v) for s, v in self.per_seed.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> AggregateCurve:
        def dec(a):
            return np.array([math.nan if x is None else x for x in a], dtype=np.float64)
        return cls(d["problem"], d["optimizer"], dict(d["hyperparams"]), d["epochs"], d["batch_size"],
                   d["iterations_per_epoch"], d["criterion"], d["version"], list(d["seeds"]),
                   list(d["diverged_seeds"]), {k: dec(v) for k, v in d["mean"].items()},
                   {k: dec(v) for k, v in d["std"].items()},
                   {int(s): dec(v) for s, v in d["per_seed"].items()})

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> AggregateCurve:
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_compatible(logs: Sequence[TrainingLog]) -> None:
    """All logs share MAJOR.MINOR with the first one."""
    for log in logs[1:]:
        require_compatible(log.version, logs[0].version, f"log (seed {log.seed})")


def aggregate(logs: Iterable[TrainingLog]) -> AggregateCurve:
    """Per-epoch mean and unbiased standard deviation over seeds.

    Diverged seeds are left out of the moments but listed.  A single usable
    seed gets standard deviation 0; no usable seed gives NaN moments.
    """
    logs = sorted(logs, key=lambda l: l.seed)
    if not logs:
        raise AnalysisError("aggregate needs at least one log")
    check_compatible(logs)
    first = logs[0]
    for log in logs[1:]:
        if log.config_key != first.config_key:
            raise MixedConfigError(
                f"logs differ in more than the seed: {first.config_key} vs {log.config_key}")
    seeds = [l.seed for l in logs]
    if len(set(seeds)) != len(seeds):
        raise MixedConfigError(f"duplicate seeds among logs: {seeds}")
    usable = [l for l in logs if not l.diverged]
    mean, std = {}, {}
    for m in METRICS:
        if getattr(first, m) is None:
            continue
        n = first.epochs + 1
        if usable:
            stack = np.stack([l.metric(m) for l in usable])
            mean[m] = stack.mean(axis=0)
            std[m] = stack.std(axis=0, ddof=1) if len(usable) > 1 else np.zeros(n)
        else:
            mean[m] = np.full(n, math.nan)
            std[m] = np.full(n, math.nan)
    crit = criterion_metric(first.criterion)
    return AggregateCurve(first.problem, first.optimizer, dict(first.hyperparams), first.epochs,
                          first.batch_size, first.iterations_per_epoch, first.criterion, first.version,
                          seeds, [l.seed for l in logs if l.diverged], mean, std,
                          {l.seed: l.metric(crit) for l in logs})


@dataclass(frozen=True)
class ConvergenceThreshold:
    problem: str
    metric: str
    value: float
    direction: str
    provenance: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.provenance:
            raise AnalysisError("threshold provenance must be nonempty")
        if not math.isfinite(self.value):
            raise AnalysisError(f"threshold must be finite, got {self.value}")
        if self.direction not in (">=", "<="):
            raise AnalysisError(f"bad direction {self.direction!r}")

    def satisfied(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            return values >= self.value if self.direction == ">=" else values <= self.value

    def to_dict(self) -> dict:
        return {"problem": self.problem, "metric": self.metric, "value": self.value,
                "direction": self.direction,
                "provenance": [{"optimizer": o, "final_mean": v} for o, v in self.provenance]}

    @classmethod
    def from_dict(cls, d: dict) -> ConvergenceThreshold:
        return cls(d["problem"], d["metric"], d["value"], d["direction"],
                   tuple((p["optimizer"], p["final_mean"]) for p in d["provenance"]))


def derive_thresholds(baselines: Mapping[str, AggregateCurve]) -> ConvergenceThreshold:
    """The least favourable final mean criterion among the tuned baselines:
    the lowest accuracy or the highest loss.  Every baseline reaches it."""
    missing = [o for o in BASELINE_OPTIMIZERS if o not in baselines]
    if missing:
        raise MissingBaselineError(f"missing baseline(s): {', '.join(missing)}")
    chosen = [baselines[o] for o in BASELINE_OPTIMIZERS]
    problems = {a.problem for a in chosen}
    if len(problems) != 1:
        raise AnalysisError(f"baselines come from different problems: {sorted(problems)}")
    for a in chosen[1:]:
        require_compatible(a.version, chosen[0].version, f"{a.optimizer} baseline")
    for a in chosen:
        if not math.isfinite(a.final_mean):
            raise DivergedBaselineError(
                f"{a.optimizer} diverged at its tuned setting on {a.problem}; re-tune it "
                f"before deriving thresholds")
    criterion = chosen[0].criterion
    finals = [(a.optimizer, a.final_mean) for a in chosen]
    if criterion == "test_accuracy":
        value, direction = min(v for _, v in finals), ">="
    else:
        value, direction = max(v for _, v in finals), "<="
    return ConvergenceThreshold(chosen[0].problem, criterion, value, direction, tuple(finals))


def _crossing(values: np.ndarray, threshold: ConvergenceThreshold, budget: int) -> int:
    hits = np.flatnonzero(threshold.satisfied(values))
    return int(hits[0]) if hits.size else budget


def speed_per_seed(source, threshold: ConvergenceThreshold) -> dict[int, float]:
    """First epoch (0-based, epoch 0 counts) meeting the threshold, per seed.

    Seeds that never cross, and diverged seeds, count the epoch budget.
    """
    metric = criterion_metric(threshold.metric)
    if isinstance(source, AggregateCurve):
        budget = source.epochs
        return {s: float(budget if s in source.diverged_seeds else _crossing(v, threshold, budget))
                for s, v in source.per_seed.items()}
    logs = [source] if isinstance(source, TrainingLog) else list(source)
    out = {}
    for log in logs:
        values = log.metric(metric)
        if values is None:
            raise AnalysisError(f"log of {log.problem} has no {metric}")
        out[log.seed] = float(log.epochs if log.diverged else _crossing(values, threshold, log.epochs))
    return out


def speed(source, threshold: ConvergenceThreshold) -> float:
    """Mean over seeds of :func:`speed_per_seed`.  ``source`` is a log, a list
    of logs or an :class:`AggregateCurve`."""
    per_seed = speed_per_seed(source, threshold)
    if not per_seed:
        raise AnalysisError("speed needs at least one seed")
    return float(np.mean(list(per_seed.values())))
