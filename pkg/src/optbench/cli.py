"""``optbench`` command line.

Exit status: 0 on success, 1 on usage errors, 2 when execution fails.
Progress goes to stderr as one JSON object per line; results go to stdout.
"""

from __future__ import annotations

import argparse
import importlib
import importlib.util
import json
import os
import shlex
import sys
from pathlib import Path

from . import HARNESS_VERSION, optimizers
from .analyzer import (BASELINE_OPTIMIZERS, BaselineStore, aggregate, build_report, derive_thresholds,
                       emit_learning_curves, emit_table, emit_tunability_plot, summary_lines)
from .data import DATASET_IDS, SYNTHETIC, DataError, fetch
from .optimizers import OptimizerError
from .problems import PROBLEM_IDS, UnknownProblemError, lookup
from .runner import RunConfig, RunError, TrainingLog, estimate_overhead, run_many, seed_range
from .tuner import GridSpec, TuningError, TuningResult, rerun_best, tune
from .versioning import VersionError

EXIT_OK, EXIT_USAGE, EXIT_ERROR = 0, 1, 2
REAL_DATASETS = tuple(d for d in DATASET_IDS if d not in SYNTHETIC)
# flags that do not change results and are left out of recorded invocations
_UNRECORDED = {"jobs", "cache", "out", "baseline_store", "config"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage().rstrip()}")


def progress(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr, flush=True)


# -- parser --------------------------------------------------------------------------

def _common(p, *, problem_required=True, optimizer=True, hp=True):
    p.add_argument("--config", metavar="FILE", help="JSON file of flag values (flags take precedence)")
    p.add_argument("--plugin", action="append", default=[], metavar="MODULE",
                   help="import a module or .py file that registers optimizers (repeatable)")
    p.add_argument("--problem", choices=PROBLEM_IDS, required=False,
                   help="test problem id" + (" (required)" if problem_required else ""))
    if optimizer:
        p.add_argument("--optimizer", help="optimizer name (built-in or plug-in)")
    if hp:
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--hp", action="append", default=[], metavar="NAME=VALUE",
                       help="other hyperparameter value (repeatable)")
    p.add_argument("--epochs", type=int, help="training epochs (default: the problem's budget)")
    p.add_argument("--cache", help="dataset cache directory (default: $OPTBENCH_CACHE or ~/.cache/optbench)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs; results do not depend on it")


def _grid(p):
    p.add_argument("--grid-min", type=float, default=GridSpec.alpha_min, help="smallest learning rate")
    p.add_argument("--grid-max", type=float, default=GridSpec.alpha_max, help="largest learning rate")
    p.add_argument("--grid-count", type=int, default=GridSpec.count, help="number of grid points")
    p.add_argument("--tuning-seed", type=int, default=0, help="seed of the screening runs")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="optbench", description="Benchmark stochastic optimizers on fixed test problems.",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"optbench {HARNESS_VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs = {}

    def add(name, help_):
        subs[name] = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        return subs[name]

    p = add("fetch", "download and verify datasets into the cache")
    p.add_argument("--dataset", action="append", choices=REAL_DATASETS, default=[],
                   help="dataset to fetch (repeatable; default: all)")
    p.add_argument("--problem", action="append", choices=PROBLEM_IDS, default=[],
                   help="fetch the dataset of this problem (repeatable)")
    p.add_argument("--cache", help="dataset cache directory")

    p = add("run", "train one setting on several seeds and write one log per seed")
    _common(p)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed-base", type=int, default=0, help="first seed; seeds are base..base+N-1")
    p.add_argument("--batch-size", type=int, help="override the problem's batch size")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--record-wall-clock", action="store_true",
                   help="store per-epoch wall-clock seconds in the logs (makes them machine dependent)")

    p = add("tune", "screen a learning-rate grid on one seed, then rerun the winner on several seeds")
    _common(p, hp=False)
    _grid(p)
    p.add_argument("--hp", action="append", default=[], metavar="NAME=VALUE",
                   help="fix a hyperparameter instead of tuning it (repeatable)")
    p.add_argument("--seeds", type=int, default=10, help="seeds for the winner (0: screening only)")
    p.add_argument("--seed-base", type=int, default=0, help="first rerun seed")
    p.add_argument("--out", default="results", help="output directory")

    p = add("baseline", "tune and rerun SGD, Momentum and Adam on one problem and store the results")
    _common(p, optimizer=False, hp=False)
    _grid(p)
    p.add_argument("--seeds", type=int, default=10, help="seeds for each winner")
    p.add_argument("--seed-base", type=int, default=0, help="first rerun seed")
    p.add_argument("--baseline-store", default="baselines", help="baseline store directory")
    p.add_argument("--out", help="also keep screening logs here")

    p = add("estimate-runtime", "ratio of training wall-clock time of an optimizer to SGD")
    _common(p, problem_required=False)
    p.add_argument("--runs", type=int, default=5, help="runs per optimizer (the first is a warm-up)")
    p.add_argument("--sgd-lr", type=float, default=0.01, help="learning rate of the SGD reference")
    p.set_defaults(problem="mnist_mlp", epochs=3)

    p = add("analyze", "aggregate logs and emit the table, learning curves and tunability plots")
    p.add_argument("--config", metavar="FILE", help="JSON file of flag values")
    p.add_argument("--plugin", action="append", default=[], metavar="MODULE", help="optimizer plug-in module")
    p.add_argument("--logs", action="append", default=[], metavar="DIR",
                   help="directory of candidate logs, searched recursively (repeatable)")
    p.add_argument("--baseline-store", help="baseline store directory")
    p.add_argument("--out", default="report", help="destination of the emitted files")

    p = add("list", "list test problems and optimizers")
    p.add_argument("--plugin", action="append", default=[], metavar="MODULE", help="optimizer plug-in module")
    return parser, subs


# -- helpers -------------------------------------------------------------------------

def load_plugin(spec: str) -> None:
    if spec.endswith(".py") or os.sep in spec:
        path = Path(spec)
        name = f"optbench_plugin_{path.stem}"
        if name in sys.modules:  # already registered in this process
            return
        mod_spec = importlib.util.spec_from_file_location(name, path)
        if mod_spec is None or not path.is_file():
            raise UsageError(f"--plugin: cannot load {spec!r}")
        module = importlib.util.module_from_spec(mod_spec)
        sys.modules[mod_spec.name] = module
        mod_spec.loader.exec_module(module)
    else:
        try:
            importlib.import_module(spec)
        except ImportError as exc:
            raise UsageError(f"--plugin: cannot import {spec!r}: {exc}") from None


def _hp_pairs(items) -> dict[str, float]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--hp expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--hp {name}: {value!r} is not a number") from None
    return out


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command}: missing required flag --{n.replace('_', '-')}")


def _positive(args, *names):
    for n in names:
        v = getattr(args, n, None)
        if v is not None and v < 1:
            raise UsageError(f"--{n.replace('_', '-')} must be >= 1, got {v}")


def canonical(args, subparser, recorded: bool = False) -> str:
    """Flag-for-flag invocation equivalent to the effective configuration."""
    parts = ["optbench", args.command]
    for action in subparser._actions:
        dest = action.dest
        if not action.option_strings or dest in ("help", "config"):
            continue
        if recorded and dest in _UNRECORDED:
            continue
        value = getattr(args, dest, None)
        flag = action.option_strings[0]
        if value is None or value is False or value == []:
            continue
        if value is True:
            parts.append(flag)
        elif isinstance(value, list):
            for v in value:
                parts += [flag, str(v)]
        else:
            parts += [flag, repr(value) if isinstance(value, float) else str(value)]
    return shlex.join(parts)


def _grid_spec(args) -> GridSpec:
    try:
        return GridSpec(args.grid_min, args.grid_max, args.grid_count)
    except TuningError as exc:
        raise UsageError(str(exc)) from None


def _hyperparams(args):
    _require(args, "optimizer", "lr")
    try:
        desc = optimizers.get(args.optimizer)
        return desc.hyperparams(learning_rate=args.lr, **_hp_pairs(args.hp))
    except OptimizerError as exc:
        raise UsageError(str(exc)) from None


def _report_run(prefix):
    def on_result(i, log, exc):
        if exc is not None:
            progress(f"{prefix}_failed", index=i, error=f"{type(exc).__name__}: {exc}")
        else:
            progress(f"{prefix}_finished", index=i, seed=log.seed, hyperparams=log.hyperparams,
                     diverged=log.diverged, final_test_loss=_json_float(log.test_losses[-1]))
    return on_result


def _json_float(x):
    return x if x == x and abs(x) != float("inf") else None


# -- commands ------------------------------------------------------------------------

def cmd_list(args, sub) -> int:
    print("problems")
    for pid in PROBLEM_IDS:
        p = lookup(pid)
        print(f"  {pid:16s} {p.criterion:14s} {p.default_epochs:4d} epochs  batch {p.batch_size}  {p.description}")
    print("optimizers")
    for name in optimizers.names():
        d = optimizers.get(name)
        fields = ", ".join(f"{f.name}" + ("" if f.default is None else f"={f.default:g}") for f in d.schema)
        print(f"  {name:16s} {fields}")
    return EXIT_OK


def cmd_fetch(args, sub) -> int:
    names = list(dict.fromkeys(args.dataset + [lookup(p).dataset_id for p in args.problem]))
    if not names:
        names = list(REAL_DATASETS)
    for name in names:
        progress("fetch_started", dataset=name)
        paths = fetch(name, args.cache)
        progress("fetch_finished", dataset=name, files=len(paths))
        for path in paths:
            print(path)
    return EXIT_OK


def cmd_run(args, sub) -> int:
    _require(args, "problem")
    _positive(args, "epochs", "seeds", "jobs", "batch_size")
    hp = _hyperparams(args)
    invocation = canonical(args, sub, recorded=True)
    configs = [RunConfig(args.problem, args.optimizer, hp, s, epochs=args.epochs, batch_size=args.batch_size,
                         output_dir=args.out, record_wall_clock=args.record_wall_clock,
                         invocation=invocation, cache_dir=args.cache)
               for s in seed_range(args.seed_base, args.seeds)]
    run_many(configs, args.jobs, _report_run("run"))
    for c in configs:
        print(c.log_path())
    return EXIT_OK


def cmd_tune(args, sub) -> int:
    _require(args, "problem", "optimizer")
    _positive(args, "epochs", "jobs")
    grid = _grid_spec(args)
    try:
        optimizers.get(args.optimizer)
        fixed = _hp_pairs(args.hp)
    except OptimizerError as exc:
        raise UsageError(str(exc)) from None
    invocation = canonical(args, sub, recorded=True)
    result = tune(args.problem, args.optimizer, grid, args.tuning_seed, args.epochs, out=args.out,
                  fixed=fixed, parallelism=args.jobs, cache_dir=args.cache, invocation=invocation,
                  on_result=_report_run("screening"))
    tuning_path = Path(args.out) / args.problem / args.optimizer / "tuning.json"
    progress("tuning_finished", path=str(tuning_path), stable=result.stable)
    if not result.stable:
        print(f"no stable setting: all {len(result.points)} grid points diverged ({tuning_path})")
        return EXIT_OK
    print(f"winner: {json.dumps(result.selected.to_dict())} ({tuning_path})")
    if args.seeds > 0:
        logs = rerun_best(result, args.seeds, args.seed_base, out=args.out, parallelism=args.jobs,
                          cache_dir=args.cache, invocation=invocation, on_result=_report_run("rerun"))
        print(f"{len(logs)} seed logs written")
    return EXIT_OK


def cmd_baseline(args, sub) -> int:
    _require(args, "problem")
    _positive(args, "epochs", "seeds", "jobs")
    grid = _grid_spec(args)
    store = BaselineStore(args.baseline_store)
    invocation = canonical(args, sub, recorded=True)
    baselines = {}
    for opt in BASELINE_OPTIMIZERS:
        progress("baseline_tuning", optimizer=opt, problem=args.problem)
        result = tune(args.problem, opt, grid, args.tuning_seed, args.epochs, out=args.out,
                      parallelism=args.jobs, cache_dir=args.cache, invocation=invocation,
                      on_result=_report_run("screening"))
        store.save_tuning(result)
        if not result.stable:
            progress("baseline_failed", optimizer=opt, reason="no stable setting")
            print(f"{opt}: no stable setting on {args.problem}; widen the grid", file=sys.stderr)
            return EXIT_ERROR
        logs = rerun_best(result, args.seeds, args.seed_base, parallelism=args.jobs, cache_dir=args.cache,
                          invocation=invocation, on_result=_report_run("rerun"))
        store.save_logs(logs)
        baselines[opt] = aggregate(logs)
        store.save_aggregate(baselines[opt])
    threshold = derive_thresholds(baselines)
    path = store.save_threshold(threshold)
    progress("baseline_finished", problem=args.problem, thresholds=str(path))
    print(f"{args.problem}: threshold {threshold.metric} {threshold.direction} {threshold.value!r} ({store.path})")
    return EXIT_OK


def cmd_estimate_runtime(args, sub) -> int:
    _positive(args, "epochs", "runs")
    if args.runs < 2:
        raise UsageError("--runs must be >= 2 (the first run is a warm-up)")
    hp = _hyperparams(args)
    progress("overhead_started", optimizer=args.optimizer, problem=args.problem, runs=args.runs,
             epochs=args.epochs)
    est = estimate_overhead(args.optimizer, hp, args.runs, args.epochs, args.problem,
                            sgd_learning_rate=args.sgd_lr, cache_dir=args.cache)
    print(json.dumps({"optimizer": est.optimizer, "problem": est.problem, "epochs": est.epochs,
                      "ratio": est.ratio, "optimizer_seconds": est.optimizer_seconds,
                      "sgd_seconds": est.sgd_seconds, "warmup_runs": est.warmup_runs}, indent=1))
    return EXIT_OK


def _find(dirs, pattern):
    found = []
    for d in dirs:
        root = Path(d)
        if not root.is_dir():
            raise UsageError(f"--logs: {d} is not a directory")
        found += [p for p in sorted(root.rglob(pattern)) if "screening" not in p.relative_to(root).parts]
    return found


def cmd_analyze(args, sub) -> int:
    store = BaselineStore(args.baseline_store) if args.baseline_store else None
    if store is None and not args.logs:
        raise UsageError("analyze: give --baseline-store and/or --logs")
    logs = [TrainingLog.load(p) for p in _find(args.logs, "seed_*.json")]
    tunings = [TuningResult.load(p) for p in _find(args.logs, "tuning.json")]
    report = build_report(store, logs, tuning=tunings)
    if not report:
        print("nothing to analyze: no stored baselines and no logs", file=sys.stderr)
        return EXIT_ERROR
    dest = Path(args.out)
    written = emit_table(report, dest)
    curves = []
    if store is not None:
        for problem in store.problems():
            curves += [(o, store.aggregate(problem, o)) for o in store.optimizers(problem)]
            tunings += [t for o in store.optimizers(problem) if (t := store.tuning(problem, o)) is not None]
    groups: dict[tuple, list[TrainingLog]] = {}
    for log in logs:
        groups.setdefault(log.config_key, []).append(log)
    curves += [(f"{g[0].optimizer} (candidate)" if store else g[0].optimizer, aggregate(g))
               for g in groups.values()]
    written += emit_learning_curves(curves, dest)
    written += emit_tunability_plot(tunings, dest)
    for line in summary_lines(report):
        print(line)
    if report.missing:
        print(f"no stored baselines for: {', '.join(report.missing)}")
    progress("analyze_finished", files=[str(p) for p in written])
    return EXIT_OK


COMMANDS = {"list": cmd_list, "fetch": cmd_fetch, "run": cmd_run, "tune": cmd_tune, "baseline": cmd_baseline,
            "estimate-runtime": cmd_estimate_runtime, "analyze": cmd_analyze}


def _parse(parser, subs, argv):
    args, extra = parser.parse_known_args(argv)
    if args.command is None:
        raise UsageError(f"optbench: error: missing command\n{parser.format_usage().rstrip()}")
    if extra:
        sub = subs[args.command]
        raise UsageError(f"optbench {args.command}: error: unrecognized arguments: {' '.join(extra)}\n"
                         f"{sub.format_usage().rstrip()}")
    return args


def parse(argv, parser, subs):
    args = _parse(parser, subs, argv)
    sub = subs[args.command]
    config = getattr(args, "config", None)
    if config:
        try:
            values = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"--config: cannot read {config}: {exc}") from None
        dests = {a.dest for a in sub._actions if a.option_strings} - {"help", "config"}
        unknown = set(values) - dests
        if unknown:
            raise UsageError(f"--config: unknown keys {sorted(unknown)}; valid keys: {sorted(dests)}")
        sub.set_defaults(**values)
        args = _parse(parser, subs, argv)
    return args, sub


def main(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args, sub = parse(argv, parser, subs)
        for plugin in getattr(args, "plugin", []):
            load_plugin(plugin)
        progress("invocation", canonical=canonical(args, sub))
        return COMMANDS[args.command](args, sub)
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except (UsageError, UnknownProblemError) as exc:
        print(str(exc).strip("'\""), file=sys.stderr)
        return EXIT_USAGE
    except (RunError, TuningError, OptimizerError, DataError, VersionError, OSError, ValueError,
            RuntimeError) as exc:
        progress("error", type=type(exc).__name__, message=str(exc))
        print(f"optbench: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
