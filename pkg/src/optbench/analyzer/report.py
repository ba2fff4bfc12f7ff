"""Performance, speed and tunability of baselines and candidate optimizers."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .. import HARNESS_VERSION, optimizers
from ..problems import PROBLEM_IDS
from ..runner import TrainingLog
from ..tuner import TuningResult
from ..versioning import require_compatible
from .stats import BASELINE_OPTIMIZERS, AggregateCurve, ConvergenceThreshold, aggregate, speed
from .store import BaselineStore

logger = logging.getLogger(__name__)


@dataclass
class ReportEntry:
    problem: str
    optimizer: str
    source: str  # "baseline" or "candidate"
    criterion: str
    performance_mean: float
    performance_std: float
    seed_count: int
    diverged_count: int
    speed: float | None
    epochs: int
    iterations_per_epoch: int
    hyperparams: dict[str, float]
    tuned_fields: tuple[str, ...] = ("learning_rate",)
    budget: dict[str, int] | None = None
    overhead: float | None = None

    @property
    def label(self) -> str:
        return self.optimizer if self.source == "baseline" else f"{self.optimizer} (candidate)"

    @property
    def speed_iterations(self) -> float | None:
        return None if self.speed is None else self.speed * self.iterations_per_epoch


@dataclass
class BenchmarkReport:
    version: str
    entries: list[ReportEntry]
    thresholds: dict[str, ConvergenceThreshold] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def problems(self) -> list[str]:
        seen = {e.problem for e in self.entries}
        known = [p for p in PROBLEM_IDS if p in seen]
        return known + sorted(seen - set(known))

    def labels(self) -> list[str]:
        labels = []
        for e in self.entries:
            if e.label not in labels:
                labels.append(e.label)
        return labels

    def entry(self, problem: str, label: str) -> ReportEntry | None:
        for e in self.entries:
            if e.problem == problem and e.label == label:
                return e
        return None

    def __bool__(self) -> bool:
        return bool(self.entries)


def _entry(agg: AggregateCurve, source: str, threshold: ConvergenceThreshold | None,
           tuning: TuningResult | None, overhead: float | None) -> ReportEntry:
    try:
        tuned = tuple(f.name for f in optimizers.get(agg.optimizer).tunable)
    except KeyError:
        tuned = ("learning_rate",)
    return ReportEntry(
        problem=agg.problem, optimizer=agg.optimizer, source=source, criterion=agg.criterion,
        performance_mean=agg.final_mean, performance_std=agg.final_std, seed_count=agg.seed_count,
        diverged_count=agg.diverged_count,
        speed=None if threshold is None else speed(agg, threshold),
        epochs=agg.epochs, iterations_per_epoch=agg.iterations_per_epoch,
        hyperparams=dict(agg.hyperparams), tuned_fields=tuned,
        budget=None if tuning is None else tuning.budget, overhead=overhead)


def build_report(store: BaselineStore | None, candidates: Iterable[TrainingLog] = (), *,
                 tuning: Iterable[TuningResult] = (), overhead: Mapping[str, float] | None = None
                 ) -> BenchmarkReport:
    """Rows for every stored baseline plus every candidate (problem, optimizer).

    Candidate logs are grouped by problem, optimizer and hyperparameters and
    aggregated over seeds.  Problems without stored baselines are listed in
    ``missing``; their candidate rows have no speed.
    """
    overhead = dict(overhead or {})
    tuning_by_key = {(t.problem, t.optimizer): t for t in tuning}
    entries: list[ReportEntry] = []
    thresholds: dict[str, ConvergenceThreshold] = {}
    version = store.version if store is not None else None
    stored_problems: list[str] = []
    if store is not None:
        store.check()
        thresholds = store.thresholds()
        stored_problems = store.problems()
        for problem in stored_problems:
            stored = store.optimizers(problem)
            ordered = [o for o in BASELINE_OPTIMIZERS if o in stored] + \
                      [o for o in stored if o not in BASELINE_OPTIMIZERS]
            for opt in ordered:
                entries.append(_entry(store.aggregate(problem, opt), "baseline", thresholds.get(problem),
                                      store.tuning(problem, opt), overhead.get(opt)))

    groups: dict[tuple, list[TrainingLog]] = defaultdict(list)
    for log in candidates:
        if version is None:
            version = log.version
        require_compatible(log.version, version, f"candidate log {log.problem}/{log.optimizer}")
        groups[(log.problem, log.optimizer, tuple(sorted(log.hyperparams.items())))].append(log)
    missing = []
    for (problem, opt, _), logs in groups.items():
        if problem not in stored_problems and problem not in missing:
            missing.append(problem)
        entries.append(_entry(aggregate(logs), "candidate", thresholds.get(problem),
                              tuning_by_key.get((problem, opt)), overhead.get(opt)))
    if missing:
        logger.warning("no stored baselines for: %s", ", ".join(missing))
    order = {p: i for i, p in enumerate(PROBLEM_IDS)}
    entries.sort(key=lambda e: (order.get(e.problem, len(order)), e.problem))
    return BenchmarkReport(version or HARNESS_VERSION, entries, thresholds, missing)

