"""On-disk baseline results, one directory tree per MAJOR.MINOR series.

    <root>/<MAJOR.MINOR>/<problem>/<optimizer>/tuning.json
    <root>/<MAJOR.MINOR>/<problem>/<optimizer>/seed_<s>.json
    <root>/<MAJOR.MINOR>/<problem>/<optimizer>/aggregate.json
    <root>/<MAJOR.MINOR>/thresholds.json
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Iterable, Mapping

from .. import HARNESS_VERSION
from ..runner import TrainingLog
from ..tuner import TuningResult
from ..versioning import IncompatibleVersionError, parse_version, require_compatible
from .stats import AggregateCurve, ConvergenceThreshold

_SERIES = re.compile(r"^\d+\.\d+$")


class BaselineStore:
    def __init__(self, root: str | os.PathLike, version: str = HARNESS_VERSION):
        self.root = Path(root)
        self.version = version
        self.series = parse_version(version).series

    @property
    def path(self) -> Path:
        return self.root / self.series

    def available_series(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and _SERIES.match(p.name))

    def check(self) -> None:
        """Raise when the store only holds results of other MAJOR.MINOR series."""
        series = self.available_series()
        if series and self.series not in series:
            raise IncompatibleVersionError(
                f"baseline store {self.root} holds series {', '.join(series)}; harness {self.version} "
                f"needs {self.series}")

    def entry(self, problem: str, optimizer: str) -> Path:
        return self.path / problem / optimizer

    # -- writing --------------------------------------------------------------------
    def save_tuning(self, result: TuningResult) -> Path:
        self._accept(result.version, "tuning result")
        return result.save(self.entry(result.problem, result.optimizer) / "tuning.json")

    def save_logs(self, logs: Iterable[TrainingLog]) -> list[Path]:
        paths = []
        for log in logs:
            self._accept(log.version, "log")
            paths.append(log.save(self.entry(log.problem, log.optimizer) / f"seed_{log.seed}.json",
                                  include_wall_clock=False))
        return paths

    def save_aggregate(self, agg: AggregateCurve) -> Path:
        self._accept(agg.version, "aggregate")
        return agg.save(self.entry(agg.problem, agg.optimizer) / "aggregate.json")

    def save_threshold(self, threshold: ConvergenceThreshold) -> Path:
        """Insert or replace the threshold of one problem in thresholds.json."""
        current = self.thresholds()
        current[threshold.problem] = threshold
        path = self.path / "thresholds.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"version": self.version,
                   "thresholds": {p: t.to_dict() for p, t in sorted(current.items())}}
        path.write_text(json.dumps(payload, indent=1, allow_nan=False) + "\n")
        return path

    def _accept(self, version: str, what: str) -> None:
        require_compatible(version, self.version, what)

    # -- reading --------------------------------------------------------------------
    def problems(self) -> list[str]:
        if not self.path.is_dir():
            return []
        return sorted(p.name for p in self.path.iterdir() if p.is_dir())

    def optimizers(self, problem: str) -> list[str]:
        d = self.path / problem
        if not d.is_dir():
            return []
        return sorted(p.name for p in d.iterdir() if (p / "aggregate.json").is_file())

    def aggregate(self, problem: str, optimizer: str) -> AggregateCurve:
        agg = AggregateCurve.load(self.entry(problem, optimizer) / "aggregate.json")
        self._accept(agg.version, f"stored aggregate {problem}/{optimizer}")
        return agg

    def tuning(self, problem: str, optimizer: str) -> TuningResult | None:
        path = self.entry(problem, optimizer) / "tuning.json"
        return TuningResult.load(path, self.version) if path.is_file() else None

    def logs(self, problem: str, optimizer: str) -> list[TrainingLog]:
        paths = sorted(self.entry(problem, optimizer).glob("seed_*.json"),
                       key=lambda p: int(p.stem.split("_")[1]))
        logs = [TrainingLog.load(p) for p in paths]
        for log in logs:
            self._accept(log.version, f"stored log {problem}/{optimizer}/seed_{log.seed}")
        return logs

    def thresholds(self) -> dict[str, ConvergenceThreshold]:
        path = self.path / "thresholds.json"
        if not path.is_file():
            return {}
        payload = json.loads(path.read_text())
        self._accept(payload["version"], "thresholds file")
        return {p: ConvergenceThreshold.from_dict(d) for p, d in payload["thresholds"].items()}

    def baselines(self, problem: str) -> Mapping[str, AggregateCurve]:
        return {o: self.aggregate(problem, o) for o in self.optimizers(problem)}
