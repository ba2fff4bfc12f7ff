"""Training runs: one (problem, optimizer, hyperparameters, seed) at a time.

Every epoch the parameters are evaluated on the train-eval subset and the
test set (epoch 0 is the untrained model).  Mini-batch losses are never used
as the reported training loss.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import HARNESS_VERSION, optimizers
from .data import BatchStream, batches
from .optimizers import HyperParams
from .problems import ProblemInstance, lookup
from .tensor import Tensor, backward, forward
from .versioning import parse_version

logger = logging.getLogger(__name__)

METRICS = ("train_losses", "test_losses", "train_accuracies", "test_accuracies")
MIN_MEASURABLE_SECONDS = 0.05


class RunError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problem: str
    optimizer: str
    hyperparams: HyperParams | Mapping[str, float]
    seed: int
    epochs: int | None = None
    batch_size: int | None = None
    output_dir: str | os.PathLike | None = None
    record_wall_clock: bool = False
    invocation: str | None = None
    cache_dir: str | os.PathLike | None = None

    def __post_init__(self):
        if not isinstance(self.hyperparams, HyperParams):
            hp = optimizers.get(self.optimizer).hyperparams(**dict(self.hyperparams))
            object.__setattr__(self, "hyperparams", hp)
        elif self.hyperparams.schema != self.optimizer:
            raise RunError(f"hyperparameters belong to {self.hyperparams.schema!r}, not {self.optimizer!r}")
        if self.epochs is not None and self.epochs < 1:
            raise RunError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise RunError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise RunError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def resolved_epochs(self) -> int:
        return self.epochs or lookup(self.problem).default_epochs

    @property
    def resolved_batch_size(self) -> int:
        return self.batch_size or lookup(self.problem).batch_size

    def with_seed(self, seed: int) -> RunConfig:
        return RunConfig(**{**self.__dict__, "seed": seed})

    def log_path(self) -> Path | None:
        if self.output_dir is None:
            return None
        return Path(self.output_dir) / self.problem / self.optimizer / hyperparam_dirname(self.hyperparams) / f"seed_{self.seed}.json"


def hyperparam_dirname(hp: HyperParams) -> str:
    """``lr_<alpha>``, plus ``__<field>_<value>`` for other tunable fields."""
    name = f"lr_{hp['learning_rate']:.6e}"
    desc = optimizers.get(hp.schema)
    for f in desc.tunable:
        if f.name != "learning_rate":
            name += f"__{f.name}_{hp[f.name]:.6g}"
    return name


def seed_range(base: int, count: int) -> list[int]:
    """Seeds used for ``count`` repetitions: ``base, base+1, ..., base+count-1``."""
    return list(range(base, base + count))


@dataclass
class TrainingLog:
    problem: str
    optimizer: str
    hyperparams: dict[str, float]
    seed: int
    epochs: int
    batch_size: int
    iterations_per_epoch: int
    criterion: str
    train_losses: list[float]
    test_losses: list[float]
    train_accuracies: list[float] | None
    test_accuracies: list[float] | None
    wall_clock_seconds: list[float] | None
    diverged: bool = False
    diverged_epoch: int | None = None
    version: str = HARNESS_VERSION
    invocation: str | None = None

    def __post_init__(self):
        parse_version(self.version)

    def metric(self, name: str) -> np.ndarray | None:
        """Per-epoch array for ``train_loss``/``test_accuracy``/... (or the plural field name)."""
        key = name if name in METRICS else _plural(name)
        values = getattr(self, key)
        return None if values is None else np.asarray(values, dtype=np.float64)

    @property
    def config_key(self) -> tuple:
        """Everything that must agree between logs of one setting except the seed."""
        return (self.problem, self.optimizer, tuple(sorted(self.hyperparams.items())),
                self.epochs, self.batch_size)

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        return {
            "version": self.version,
            "config": {
                "problem": self.problem,
                "optimizer": self.optimizer,
                "hyperparams": self.hyperparams,
                "seed": self.seed,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
            },
            "iterations_per_epoch": self.iterations_per_epoch,
            "criterion": self.criterion,
            "train_losses": _encode(self.train_losses),
            "test_losses": _encode(self.test_losses),
            "train_accuracies": _encode(self.train_accuracies),
            "test_accuracies": _encode(self.test_accuracies),
            "wall_clock_seconds": _encode(self.wall_clock_seconds) if include_wall_clock else None,
            "diverged": self.diverged,
            "diverged_epoch": self.diverged_epoch,
            "invocation": self.invocation,
        }

    def to_json(self, include_wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_clock), indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> TrainingLog:
        c = d["config"]
        return cls(
            problem=c["problem"], optimizer=c["optimizer"], hyperparams=dict(c["hyperparams"]),
            seed=c["seed"], epochs=c["epochs"], batch_size=c["batch_size"],
            iterations_per_epoch=d["iterations_per_epoch"], criterion=d["criterion"],
            train_losses=_decode(d["train_losses"]), test_losses=_decode(d["test_losses"]),
            train_accuracies=_decode(d["train_accuracies"]), test_accuracies=_decode(d["test_accuracies"]),
            wall_clock_seconds=_decode(d["wall_clock_seconds"]), diverged=d["diverged"],
            diverged_epoch=d.get("diverged_epoch"), version=d["version"], invocation=d.get("invocation"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> TrainingLog:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | os.PathLike, include_wall_clock: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(include_wall_clock))
        return path


def _plural(name: str) -> str:
    if name.endswith("loss"):
        return name + "es"
    if name.endswith("accuracy"):
        return name[:-1] + "ies"
    raise KeyError(name)


def _encode(values):
    if values is None:
        return None
    return [float(v) if math.isfinite(v) else None for v in values]


def _decode(values):
    if values is None:
        return None
    return [math.nan if v is None else float(v) for v in values]


# -- single runs --------------------------------------------------------------------

_INSTANCES: dict[tuple, ProblemInstance] = {}


def problem_instance(problem: str, cache_dir=None) -> ProblemInstance:
    """Load (once per process) the dataset and model of ``problem``."""
    key = (problem, str(cache_dir))
    if key not in _INSTANCES:
        _INSTANCES[key] = lookup(problem).load(cache_dir)
    return _INSTANCES[key]


def _all_finite(loss: float, grads: Sequence[np.ndarray]) -> bool:
    if not math.isfinite(loss):
        return False
    with np.errstate(over="ignore", invalid="ignore"):
        return all(math.isfinite(float(np.sum(g))) for g in grads)


def run(config: RunConfig, instance: ProblemInstance | None = None) -> TrainingLog:
    """Train once and return the per-epoch log; also written to disk when
    ``config.output_dir`` is set.  Deterministic in ``config``."""
    problem = lookup(config.problem)
    desc = optimizers.get(config.optimizer)
    if instance is None:
        instance = problem_instance(config.problem, config.cache_dir)
    epochs, batch_size = config.resolved_epochs, config.resolved_batch_size
    hp = config.hyperparams
    dataset = instance.dataset

    params = instance.init_params(config.seed)
    names = list(params)
    arrays = [params[n] for n in names]
    state = desc.init_state(arrays)
    stream = BatchStream(dataset, batch_size, config.seed)

    metrics: dict[str, list[float]] = {m: [] for m in METRICS}
    wall = [0.0]
    diverged_epoch: int | None = None

    def record(arrays, epoch):
        nonlocal diverged_epoch
        current = dict(zip(names, arrays))
        tr = instance.evaluate(current, "train_eval")
        te = instance.evaluate(current, "test")
        if not (math.isfinite(tr.loss) and math.isfinite(te.loss)):
            diverged_epoch = epoch
            record_nan()
            return
        metrics["train_losses"].append(tr.loss)
        metrics["test_losses"].append(te.loss)
        metrics["train_accuracies"].append(tr.accuracy)
        metrics["test_accuracies"].append(te.accuracy)

    def record_nan():
        for m in METRICS:
            metrics[m].append(math.nan)

    record(arrays, 0)
    for epoch in range(1, epochs + 1):
        if diverged_epoch is not None:
            record_nan()
            wall.append(0.0)
            continue
        start = time.perf_counter()
        for idx in batches(stream, epoch):
            x = dataset.train_inputs[idx]
            y = None if dataset.train_labels is None else dataset.train_labels[idx]
            tparams = {n: Tensor(a, requires_grad=True) for n, a in zip(names, arrays)}
            with np.errstate(all="ignore"):
                loss = forward(instance.batch_loss, tparams, x, y)
                backward(loss)
            grads = [tparams[n].grad for n in names]
            if not _all_finite(loss.item(), grads):
                diverged_epoch = epoch
                break
            with np.errstate(all="ignore"):
                arrays, state = desc.step(arrays, grads, state, hp)
        wall.append(round(time.perf_counter() - start, 6))
        if diverged_epoch is not None:
            record_nan()
        else:
            record(arrays, epoch)

    log = TrainingLog(
        problem=config.problem, optimizer=config.optimizer, hyperparams=hp.to_dict(),
        seed=config.seed, epochs=epochs, batch_size=batch_size,
        iterations_per_epoch=stream.batches_per_epoch, criterion=problem.criterion,
        train_losses=metrics["train_losses"], test_losses=metrics["test_losses"],
        train_accuracies=metrics["train_accuracies"] if problem.has_accuracy else None,
        test_accuracies=metrics["test_accuracies"] if problem.has_accuracy else None,
        wall_clock_seconds=wall, diverged=diverged_epoch is not None,
        diverged_epoch=diverged_epoch, invocation=config.invocation,
    )
    path = config.log_path()
    if path is not None:
        log.save(path, include_wall_clock=config.record_wall_clock)
    return log


# -- many runs ----------------------------------------------------------------------

class RunManyError(RuntimeError):
    """Some runs failed; ``results`` keeps the successful logs (``None`` elsewhere)."""

    def __init__(self, results: list[TrainingLog | None], errors: dict[int, BaseException]):
        self.results = results
        self.errors = errors
        lines = [f"  run {i}: {type(e).__name__}: {e}" for i, e in sorted(errors.items())]
        super().__init__(f"{len(errors)} of {len(results)} runs failed:\n" + "\n".join(lines))


def _run_safely(config: RunConfig):
    try:
        return run(config), None
    except Exception as exc:  # noqa: BLE001 - reported per run
        return None, exc


def run_many(configs: Sequence[RunConfig], parallelism: int = 1,
             on_result: Callable[[int, TrainingLog | None, BaseException | None], None] | None = None
             ) -> list[TrainingLog]:
    """Execute ``configs``; the result equals sequential execution for any
    ``parallelism``.  Results are returned in input order.  ``on_result`` is
    called in the parent process as each run finishes."""
    configs = list(configs)
    if parallelism < 1:
        raise RunError("parallelism must be >= 1")
    paths = [c.log_path() for c in configs if c.output_dir is not None]
    if len(set(paths)) != len(paths):
        raise RunError("run configurations must have pairwise distinct output paths")
    outcomes: list[tuple] = [(None, None)] * len(configs)

    def done(i, outcome):
        outcomes[i] = outcome
        if on_result is not None:
            on_result(i, *outcome)

    if parallelism == 1 or len(configs) <= 1:
        for i, c in enumerate(configs):
            done(i, _run_safely(c))
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(parallelism, len(configs)), mp_context=ctx) as pool:
            futures = {pool.submit(_run_safely, c): i for i, c in enumerate(configs)}
            for fut in as_completed(futures):
                done(futures[fut], fut.result())
    results = [r for r, _ in outcomes]
    errors = {i: e for i, (_, e) in enumerate(outcomes) if e is not None}
    if errors:
        raise RunManyError(results, errors)
    return results


# -- runtime overhead -------------------------------------------------------------------

class TimerResolutionError(RunError):
    pass


@dataclass
class OverheadEstimate:
    optimizer: str
    ratio: float
    optimizer_seconds: list[float]
    sgd_seconds: list[float]
    warmup_runs: int = 1
    problem: str = "mnist_mlp"
    epochs: int = 3
    details: dict = field(default_factory=dict)


def _train_seconds(log: TrainingLog) -> float:
    return float(sum(log.wall_clock_seconds or ()))


def estimate_overhead(new_optimizer: str, hp: HyperParams | Mapping[str, float], runs: int = 5,
                      epochs: int = 3, problem: str = "mnist_mlp", *,
                      sgd_learning_rate: float = 0.01, seed: int = 0, cache_dir=None) -> OverheadEstimate:
    """Ratio of mean training wall-clock time of ``new_optimizer`` to SGD.

    Runs alternate SGD / candidate on the same machine, sequentially.  The
    first run of each optimizer is a warm-up and is excluded from the means.
    Only the training part of each epoch is timed, not evaluation.
    """
    if runs < 2:
        raise RunError("need at least 2 runs (the first one is a warm-up)")
    instance = problem_instance(problem, cache_dir)
    sgd_hp = optimizers.get("sgd").hyperparams(learning_rate=sgd_learning_rate)
    sgd_times, new_times = [], []
    for i in range(runs):
        base = RunConfig(problem, "sgd", sgd_hp, seed + i, epochs=epochs)
        sgd_times.append(_train_seconds(run(base, instance)))
        cand = RunConfig(problem, new_optimizer, hp, seed + i, epochs=epochs)
        new_times.append(_train_seconds(run(cand, instance)))
        logger.info("overhead run %d: sgd %.3fs, %s %.3fs", i, sgd_times[-1], new_optimizer, new_times[-1])
    sgd_mean = float(np.mean(sgd_times[1:]))
    if sgd_mean < MIN_MEASURABLE_SECONDS:
        raise TimerResolutionError(
            f"SGD runs took only {sgd_mean:.4f}s on average; too short to time reliably, "
            f"increase the number of epochs")
    ratio = float(np.mean(new_times[1:])) / sgd_mean
    return OverheadEstimate(new_optimizer, ratio, new_times, sgd_times, 1, problem, epochs)
