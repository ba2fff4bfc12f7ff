"""Learning-rate tuning: screen a log grid on one seed, then rerun the winner
on ten seeds."""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import HARNESS_VERSION, optimizers
from .optimizers import HyperParams
from .problems import lookup
from .runner import RunConfig, TrainingLog, run_many, seed_range
from .versioning import require_compatible

logger = logging.getLogger(__name__)

RERUN_SEEDS = 10


class TuningError(ValueError):
    pass


class NoStableSettingError(TuningError):
    pass


@dataclass(frozen=True)
class GridSpec:
    alpha_min: float = 1e-5
    alpha_max: float = 1e2
    count: int = 36

    def __post_init__(self):
        if self.count < 1:
            raise TuningError(f"grid count must be >= 1, got {self.count}")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise TuningError(f"need 0 < alpha_min <= alpha_max, got {self.alpha_min}, {self.alpha_max}")
        if self.count == 1 and self.alpha_min != self.alpha_max:
            raise TuningError("a one-point grid needs alpha_min == alpha_max")


def make_grid(spec: GridSpec = GridSpec()) -> list[float]:
    """Log-uniform points from ``alpha_min`` to ``alpha_max`` inclusive.

    The endpoints are the given values exactly, not round-trips through log10.
    """
    if spec.count == 1:
        return [float(spec.alpha_min)]
    lo, hi = math.log10(spec.alpha_min), math.log10(spec.alpha_max)
    step = (hi - lo) / (spec.count - 1)
    grid = [10.0 ** (lo + k * step) for k in range(spec.count)]
    grid[0], grid[-1] = float(spec.alpha_min), float(spec.alpha_max)
    return grid


@dataclass(frozen=True)
class GridPoint:
    hyperparams: dict[str, float]
    final: float | None
    diverged: bool
    seed: int

    @property
    def learning_rate(self) -> float:
        return self.hyperparams["learning_rate"]

    @property
    def usable(self) -> bool:
        return not self.diverged and self.final is not None and math.isfinite(self.final)


@dataclass
class TuningResult:
    problem: str
    optimizer: str
    criterion: str
    metric_mode: str
    grid: GridSpec
    points: list[GridPoint]
    winner: int | None
    tuning_seed: int
    epochs: int
    batch_size: int
    version: str = HARNESS_VERSION

    @property
    def stable(self) -> bool:
        return self.winner is not None

    @property
    def selected(self) -> HyperParams:
        if self.winner is None:
            raise NoStableSettingError(
                f"no stable setting: every grid point diverged for {self.optimizer} on {self.problem}")
        return optimizers.get(self.optimizer).hyperparams(**self.points[self.winner].hyperparams)

    @property
    def budget(self) -> dict[str, int]:
        """Screening cost: runs and total training epochs."""
        return {"runs": len(self.points), "epochs": len(self.points) * self.epochs}

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "problem": self.problem,
            "optimizer": self.optimizer,
            "criterion": self.criterion,
            "metric_mode": self.metric_mode,
            "status": "ok" if self.stable else "no_stable_setting",
            "tuning_seed": self.tuning_seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "grid": {"alpha_min": self.grid.alpha_min, "alpha_max": self.grid.alpha_max,
                     "count": self.grid.count, "values": make_grid(self.grid)},
            "points": [{"hyperparams": p.hyperparams,
                        "final": p.final if p.usable else None,
                        "diverged": p.diverged, "seed": p.seed} for p in self.points],
            "winner": None if self.winner is None else {
                "index": self.winner, "hyperparams": self.points[self.winner].hyperparams},
            "budget": self.budget,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> TuningResult:
        g = d["grid"]
        points = [GridPoint(dict(p["hyperparams"]), p["final"], p["diverged"], p["seed"]) for p in d["points"]]
        winner = d["winner"]["index"] if d["winner"] is not None else None
        return cls(d["problem"], d["optimizer"], d["criterion"], d["metric_mode"],
                   GridSpec(g["alpha_min"], g["alpha_max"], g["count"]), points, winner,
                   d["tuning_seed"], d["epochs"], d["batch_size"], d["version"])

    @classmethod
    def load(cls, path: str | os.PathLike, expected_version: str = HARNESS_VERSION) -> TuningResult:
        result = cls.from_dict(json.loads(Path(path).read_text()))
        require_compatible(result.version, expected_version, f"tuning result {path}")
        return result

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def final_criterion(log: TrainingLog) -> float:
    values = log.test_accuracies if log.test_accuracies is not None else log.test_losses
    return float(values[-1])


def select_winner(finals: Sequence[float], mode: str, order: Sequence | None = None,
                  diverged: Sequence[bool] | None = None) -> int | None:
    """Index of the best final value; non-finite or diverged entries never win.

    ``mode`` is ``"max_accuracy"`` or ``"min_loss"``.  Ties go to the smallest
    ``order`` key (the learning rate by default: pass the grid ordering).
    """
    if mode not in ("max_accuracy", "min_loss"):
        raise TuningError(f"unknown metric mode {mode!r}")
    order = list(range(len(finals))) if order is None else list(order)
    diverged = diverged or [False] * len(finals)
    best = None
    for i, v in enumerate(finals):
        if diverged[i] or v is None or not math.isfinite(v):
            continue
        key = (-v if mode == "max_accuracy" else v, order[i])
        if best is None or key < best[0]:
            best = (key, i)
    return None if best is None else best[1]


def search_space(optimizer: str, grid: GridSpec = GridSpec(), fixed: Mapping[str, float] | None = None
                 ) -> list[HyperParams]:
    """All hyperparameter settings screened for ``optimizer``.

    The learning rate follows ``grid``.  Further tunable schema fields (from
    plug-ins) get their own log grids; the result is the Cartesian product,
    ordered by learning rate first.
    """
    desc = optimizers.get(optimizer)
    fixed = dict(fixed or {})
    axes: list[tuple[str, list[float]]] = []
    for f in desc.tunable:
        if f.name in fixed:
            continue
        if f.name == "learning_rate":
            axes.append((f.name, make_grid(grid)))
        else:
            if f.low is None or f.high is None:
                raise TuningError(f"{optimizer}: tunable field {f.name!r} needs low and high bounds")
            axes.append((f.name, make_grid(GridSpec(f.low, f.high, f.grid_count or grid.count))))
    names = [n for n, _ in axes]
    return [desc.hyperparams(**fixed, **dict(zip(names, combo)))
            for combo in itertools.product(*(values for _, values in axes))]


def tune(problem: str, optimizer: str, grid: GridSpec = GridSpec(), tuning_seed: int = 0,
         epochs: int | None = None, *, out: str | os.PathLike | None = None,
         fixed: Mapping[str, float] | None = None, parallelism: int = 1, batch_size: int | None = None,
         cache_dir=None, invocation: str | None = None, on_result=None) -> TuningResult:
    """Screen every grid setting with one run at ``tuning_seed`` and pick the best
    by final test accuracy (test loss when the problem has no accuracy).

    With ``out`` set, screening logs go to ``<out>/screening/...`` and the
    result to ``<out>/<problem>/<optimizer>/tuning.json``.
    """
    spec = lookup(problem)
    settings = search_space(optimizer, grid, fixed)
    screening_dir = None if out is None else Path(out) / "screening"
    configs = [RunConfig(problem, optimizer, hp, tuning_seed, epochs=epochs, batch_size=batch_size,
                         output_dir=screening_dir, invocation=invocation, cache_dir=cache_dir)
               for hp in settings]
    logs = run_many(configs, parallelism, on_result)
    points = [GridPoint(log.hyperparams, final_criterion(log), log.diverged, tuning_seed) for log in logs]
    # ties go to the smaller learning rate, then smaller values of other fields
    order = [(hp.learning_rate, *(v for k, v in hp.values if k != "learning_rate")) for hp in settings]
    winner = select_winner([p.final for p in points], spec.metric_mode, order,
                           [p.diverged for p in points])
    result = TuningResult(problem, optimizer, spec.criterion, spec.metric_mode, grid, points, winner,
                          tuning_seed, logs[0].epochs, logs[0].batch_size)
    if winner is None:
        logger.warning("no stable setting for %s on %s: all %d grid points diverged",
                       optimizer, problem, len(points))
    if out is not None:
        result.save(Path(out) / problem / optimizer / "tuning.json")
    return result


def rerun_best(result: TuningResult, seeds: int = RERUN_SEEDS, seed_base: int = 0, *,
               epochs: int | None = None, out: str | os.PathLike | None = None, parallelism: int = 1,
               record_wall_clock: bool = False, cache_dir=None, invocation: str | None = None,
               on_result=None) -> list[TrainingLog]:
    """Run the winning setting on seeds ``seed_base .. seed_base + seeds - 1``."""
    hp = result.selected
    configs = [RunConfig(result.problem, result.optimizer, hp, s, epochs=epochs or result.epochs,
                         batch_size=result.batch_size, output_dir=out, record_wall_clock=record_wall_clock,
                         invocation=invocation, cache_dir=cache_dir)
               for s in seed_range(seed_base, seeds)]
    return run_many(configs, parallelism, on_result)


@dataclass(frozen=True)
class TunabilityCurve:
    """Relative final performance against learning rate; NaN marks a gap."""

    problem: str
    optimizer: str
    alphas: tuple[float, ...]
    relative: tuple[float, ...]
    winner_alpha: float | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)

    def points(self) -> list[tuple[float, float]]:
        return [(a, r) for a, r in zip(self.alphas, self.relative) if math.isfinite(r)]


def tunability_curve(result: TuningResult) -> TunabilityCurve:
    """Winner maps to 1.0: accuracy/best for accuracy, best/loss for loss.

    When extra fields were tuned, each learning rate shows its best setting.
    """
    if result.winner is None:
        logger.warning("tunability curve of %s on %s is empty: no stable setting",
                       result.optimizer, result.problem)
        return TunabilityCurve(result.problem, result.optimizer, (), (), None, ("no stable setting",))
    best = result.points[result.winner].final
    by_alpha: dict[float, float] = {}
    for p in result.points:
        rel = math.nan
        if p.usable:
            if result.metric_mode == "max_accuracy":
                rel = p.final / best if best > 0 else (1.0 if p.final == best else 0.0)
            else:
                rel = best / p.final if p.final > 0 else (1.0 if p.final == best else math.nan)
        prev = by_alpha.get(p.learning_rate, math.nan)
        by_alpha[p.learning_rate] = rel if math.isnan(prev) else max(prev, rel) if math.isfinite(rel) else prev
    alphas = tuple(sorted(by_alpha))
    rel = tuple(by_alpha[a] for a in alphas)
    return TunabilityCurve(result.problem, result.optimizer, alphas, rel,
                           result.points[result.winner].learning_rate)


def relative_spacing(grid: Sequence[float]) -> np.ndarray:
    """Successive log10 gaps of ``grid``; constant for a log-uniform grid."""
    return np.diff(np.log10(np.asarray(grid, dtype=np.float64)))
