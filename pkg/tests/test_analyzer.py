import csv
import itertools
import logging
import math

import numpy as np
import pytest

from optbench.analyzer import emit
from optbench.analyzer.emit import (emit_learning_curves, emit_table, emit_tunability_plot, format_accuracy,
                                    format_loss, latex_escape, render_table)
from optbench.analyzer.report import build_report
from optbench.analyzer.stats import (AnalysisError, ConvergenceThreshold, DivergedBaselineError,
                                     MissingBaselineError, MixedConfigError, aggregate, derive_thresholds,
                                     speed, speed_per_seed)
from optbench.analyzer.store import BaselineStore
from optbench.runner import TrainingLog
from optbench.tuner import GridPoint, GridSpec, TuningResult, make_grid, select_winner
from optbench.versioning import IncompatibleVersionError

LR = {"sgd": {"learning_rate": 0.1}, "momentum": {"learning_rate": 0.01, "momentum": 0.99},
      "adam": {"learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}}


def make_log(losses, seed=0, optimizer="sgd", problem="quadratic_deep", accuracies=None, diverged=False,
             version="1.0.0", hyperparams=None):
    losses = [float(v) for v in losses]
    acc = None if accuracies is None else [float(v) for v in accuracies]
    return TrainingLog(problem, optimizer, dict(hyperparams or LR[optimizer]), seed, len(losses) - 1, 128,
                       10, "test_loss" if acc is None else "test_accuracy", list(losses), list(losses),
                       acc, acc, None, diverged, None, version)


def nan_log(n, **kw):
    log = make_log([1.0] * n, diverged=True, **kw)
    log.train_losses = log.test_losses = [1.0] + [math.nan] * (n - 1)
    return log


# -- aggregate -----------------------------------------------------------------------------------

def test_aggregate_three_seeds():
    agg = aggregate([make_log([4, v], seed=s) for s, v in enumerate([1, 2, 3])])
    assert agg.final_mean == 2.0 and agg.final_std == 1.0
    assert agg.seed_count == 3 and agg.diverged_count == 0
    assert np.std([1, 2, 3], ddof=1) == agg.final_std


def test_aggregate_single_seed_has_zero_std():
    agg = aggregate([make_log([4, 1.5])])
    assert agg.seed_count == 1 and agg.final_std == 0.0 and agg.final_mean == 1.5


def test_aggregate_leaves_out_diverged_seeds():
    agg = aggregate([make_log([4, 1], seed=0), make_log([4, 3], seed=1), nan_log(2, seed=2)])
    assert agg.diverged_count == 1 and agg.diverged_seeds == [2] and agg.seed_count == 3
    assert agg.final_mean == 2.0 and agg.final_std == pytest.approx(math.sqrt(2))


def test_aggregate_ignores_log_order():
    logs = [make_log([5, v], seed=s) for s, v in enumerate([0.3, 1.7, 0.9, 2.2])]
    first = aggregate(logs).to_dict()
    for perm in itertools.permutations(logs):
        assert aggregate(perm).to_dict() == first


def test_aggregate_rejects_mixed_configs():
    with pytest.raises(MixedConfigError):
        aggregate([make_log([1, 2]), make_log([1, 2], seed=1, hyperparams={"learning_rate": 0.2})])
    with pytest.raises(MixedConfigError):
        aggregate([make_log([1, 2]), make_log([1, 2, 3], seed=1)])
    with pytest.raises(MixedConfigError):
        aggregate([make_log([1, 2]), make_log([1, 2])])
    with pytest.raises(AnalysisError):
        aggregate([])


def test_version_gate_on_aggregate():
    with pytest.raises(IncompatibleVersionError):
        aggregate([make_log([1, 2], version="1.0.0"), make_log([1, 2], seed=1, version="1.1.0")])
    agg = aggregate([make_log([1, 2], version="1.1.0"), make_log([1, 2], seed=1, version="1.1.3")])
    assert agg.seed_count == 2


def test_aggregate_round_trips_through_json(tmp_path):
    agg = aggregate([make_log([4, 1], seed=0), make_log([4, 3], seed=1), nan_log(2, seed=2)])
    back = type(agg).load(agg.save(tmp_path / "agg.json"))
    assert back.to_dict() == agg.to_dict()


# -- thresholds -------------------------------------------------------------------------------------

def _baselines(finals, accuracy):
    out = {}
    for opt, v in zip(("sgd", "momentum", "adam"), finals):
        acc = [0.1, v] if accuracy else None
        out[opt] = aggregate([make_log([3.0, 1.0 if accuracy else v], optimizer=opt, accuracies=acc)])
    return out


def test_threshold_from_accuracies_is_the_minimum():
    t = derive_thresholds(_baselines([0.92, 0.95, 0.93], accuracy=True))
    assert (t.value, t.direction, t.metric) == (0.92, ">=", "test_accuracy")
    assert dict(t.provenance) == {"sgd": 0.92, "momentum": 0.95, "adam": 0.93}


def test_threshold_from_losses_is_the_maximum():
    t = derive_thresholds(_baselines([1.2, 0.9, 1.0], accuracy=False))
    assert (t.value, t.direction) == (1.2, "<=")


def test_threshold_ignores_baseline_order():
    b = _baselines([1.2, 0.9, 1.0], accuracy=False)
    assert derive_thresholds(dict(reversed(list(b.items())))) == derive_thresholds(b)


def test_every_baseline_reaches_its_threshold():
    b = _baselines([1.2, 0.9, 1.0], accuracy=False)
    t = derive_thresholds(b)
    assert all(t.satisfied([a.final_mean])[0] for a in b.values())


def test_diverged_baseline_demands_retuning():
    b = _baselines([1.2, 0.9, 1.0], accuracy=False)
    b["adam"] = aggregate([nan_log(2, optimizer="adam")])
    with pytest.raises(DivergedBaselineError, match="re-tune"):
        derive_thresholds(b)


def test_missing_baseline():
    b = _baselines([1.2, 0.9, 1.0], accuracy=False)
    del b["momentum"]
    with pytest.raises(MissingBaselineError, match="momentum"):
        derive_thresholds(b)


# -- speed ----------------------------------------------------------------------------------------

def _loss_threshold(value):
    return ConvergenceThreshold("quadratic_deep", "test_loss", value, "<=", (("sgd", value),))


def test_speed_first_crossing():
    assert speed(make_log([5, 3, 1]), _loss_threshold(2.0)) == 2.0
    assert speed(make_log([5, 3, 1]), _loss_threshold(5.0)) == 0.0


def test_speed_never_crossing_counts_the_budget():
    assert speed(make_log([5, 3, 1]), _loss_threshold(0.5)) == 2.0
    assert speed(nan_log(4), _loss_threshold(2.0)) == 3.0


def test_speed_is_the_mean_over_seeds():
    a = make_log([9, 9, 9, 1, 1, 1], seed=0)
    b = make_log([9, 9, 9, 9, 9, 1], seed=1)
    t = _loss_threshold(2.0)
    assert speed_per_seed([a, b], t) == {0: 3.0, 1: 5.0}
    assert speed([a, b], t) == 4.0
    assert speed(aggregate([a, b]), t) == 4.0


def test_speed_is_monotone_in_the_threshold():
    rng = np.random.default_rng(1)
    losses = np.cumsum(rng.uniform(-1, 0.2, 30)) + 40
    log = make_log(losses)
    values = [speed(log, _loss_threshold(v)) for v in np.linspace(losses.min() - 1, losses.max() + 1, 50)]
    assert values == sorted(values, reverse=True)


def test_accuracy_speed():
    t = ConvergenceThreshold("p", "test_accuracy", 0.9, ">=", (("sgd", 0.9),))
    assert speed(make_log([3, 2, 1, 0.5], accuracies=[0.1, 0.85, 0.91, 0.95]), t) == 2.0


def test_threshold_validation():
    with pytest.raises(AnalysisError):
        ConvergenceThreshold("p", "test_loss", math.nan, "<=", (("sgd", 1.0),))
    with pytest.raises(AnalysisError):
        ConvergenceThreshold("p", "test_loss", 1.0, "<=", ())


# -- store ----------------------------------------------------------------------------------------

def _tuning(problem, optimizer, finals, mode="min_loss", version="1.0.0"):
    grid = GridSpec(1e-3, 1e-1, len(finals))
    points = [GridPoint({**LR[optimizer], "learning_rate": a}, f, not math.isfinite(f), 0)
              for a, f in zip(make_grid(grid), finals)]
    criterion = "test_accuracy" if mode == "max_accuracy" else "test_loss"
    return TuningResult(problem, optimizer, criterion, mode, grid, points,
                        select_winner(finals, mode), 0, 1, 128, version)


@pytest.fixture
def store(tmp_path):
    """quadratic_deep baselines with a derived threshold."""
    s = BaselineStore(tmp_path / "baselines", "1.0.0")
    aggs = {}
    for opt, offset in (("sgd", 0.0), ("momentum", 0.5), ("adam", -0.2)):
        logs = [make_log([6, 4, 2 + offset + 0.1 * k, 1 + offset + 0.1 * k], seed=k, optimizer=opt)
                for k in range(3)]
        s.save_logs(logs)
        aggs[opt] = aggregate(logs)
        s.save_aggregate(aggs[opt])
        s.save_tuning(_tuning("quadratic_deep", opt, [3.0, 1.0, math.nan]))
    s.save_threshold(derive_thresholds(aggs))
    return s


def test_store_layout(store):
    root = store.root / "1.0"
    assert (root / "thresholds.json").is_file()
    for opt in ("sgd", "momentum", "adam"):
        d = root / "quadratic_deep" / opt
        assert {p.name for p in d.iterdir()} == {"tuning.json", "aggregate.json", "seed_0.json",
                                                  "seed_1.json", "seed_2.json"}
    assert store.problems() == ["quadratic_deep"]
    assert store.optimizers("quadratic_deep") == ["adam", "momentum", "sgd"]
    assert [l.seed for l in store.logs("quadratic_deep", "sgd")] == [0, 1, 2]
    assert store.thresholds()["quadratic_deep"].value == pytest.approx(1.6)


def test_store_rejects_other_series(store):
    with pytest.raises(IncompatibleVersionError):
        store.save_logs([make_log([1, 2], version="1.1.0")])
    with pytest.raises(IncompatibleVersionError):
        BaselineStore(store.root, "1.1.0").check()
    with pytest.raises(IncompatibleVersionError):
        build_report(BaselineStore(store.root, "2.0.0"))
    BaselineStore(store.root, "1.0.9").check()
    assert BaselineStore(store.root, "1.0.9").problems() == ["quadratic_deep"]


# -- report ----------------------------------------------------------------------------------------

def test_baselines_only_report(store):
    report = build_report(store)
    assert [e.optimizer for e in report.entries] == ["sgd", "momentum", "adam"]
    assert all(e.source == "baseline" for e in report.entries) and report.missing == []
    sgd = report.entry("quadratic_deep", "sgd")
    assert sgd.performance_mean == pytest.approx(1.1) and sgd.performance_std == pytest.approx(0.1)
    # threshold 1.6 (momentum mean); sgd gets there in epoch 3, momentum in epoch 3
    assert sgd.speed == 3.0 and sgd.speed_iterations == 30.0
    assert sgd.budget == {"runs": 3, "epochs": 3}


def test_candidate_equal_to_sgd_reproduces_the_sgd_row(store):
    logs = store.logs("quadratic_deep", "sgd")
    report = build_report(store, logs)
    base = report.entry("quadratic_deep", "sgd")
    cand = report.entry("quadratic_deep", "sgd (candidate)")
    assert cand.source == "candidate"
    for field in ("performance_mean", "performance_std", "seed_count", "diverged_count", "speed",
                  "epochs", "iterations_per_epoch", "hyperparams"):
        assert getattr(cand, field) == getattr(base, field), field


def test_candidate_without_baselines_is_listed_as_missing(store, caplog):
    with caplog.at_level(logging.WARNING):
        report = build_report(store, [make_log([2, 1], problem="other")])
    assert report.missing == ["other"] and "other" in caplog.text
    assert report.entry("other", "sgd (candidate)").speed is None


def test_report_rejects_candidate_of_other_series(store):
    with pytest.raises(IncompatibleVersionError):
        build_report(store, [make_log([2, 1], version="1.1.0")])


# -- emitters ----------------------------------------------------------------------------------------

def test_learning_curves_two_optimizers(tmp_path):
    aggs = [aggregate([make_log([3, 2, 1], seed=s, optimizer=o, accuracies=[0.1, 0.5, 0.9]) for s in (0, 1)])
            for o in ("sgd", "adam")]
    paths = emit_learning_curves(aggs, tmp_path)
    tex = (tmp_path / "quadratic_deep_curves.tex").read_text()
    panels = tex.split(r"\nextgroupplot")[1:]
    assert len(panels) == 4
    for panel in panels:
        assert panel.count(r"\addlegendentry") == 2
        assert panel.count("thick") == 2
    assert sorted(p.name for p in paths) == ["quadratic_deep_curves.csv", "quadratic_deep_curves.tex"]
    rows = list(csv.reader((tmp_path / "quadratic_deep_curves.csv").open()))
    assert len(rows) == 1 + 3 and len(rows[0]) == 1 + 2 * 4 * 2


def test_learning_curves_without_accuracy_have_two_panels(tmp_path):
    agg = aggregate([make_log([3, 2, 1], seed=s) for s in (0, 1, 2)])
    emit_learning_curves([agg], tmp_path)
    tex = (tmp_path / "quadratic_deep_curves.tex").read_text()
    assert tex.count(r"\nextgroupplot") == 2 and "accuracy" not in tex.split(r"\begin{tikzpicture}")[1]
    rows = list(csv.DictReader((tmp_path / "quadratic_deep_curves.csv").open()))
    assert len(rows) == agg.epochs + 1
    for epoch, row in enumerate(rows):
        assert float(row["sgd_test_losses_mean"]) == agg.mean["test_losses"][epoch]
        assert float(row["sgd_test_losses_std"]) == agg.std["test_losses"][epoch]


def test_tunability_plot(tmp_path):
    finals = [math.nan if k > 30 else 1.0 + (k - 12) ** 2 for k in range(36)]
    points = [GridPoint({"learning_rate": a}, f, not math.isfinite(f), 0) for a, f in zip(make_grid(), finals)]
    result = TuningResult("quadratic_deep", "sgd", "test_loss", "min_loss", GridSpec(), points,
                          select_winner(finals, "min_loss"), 0, 1, 128, "1.0.0")
    emit_tunability_plot([result], tmp_path)
    rows = list(csv.DictReader((tmp_path / "quadratic_deep_tuning.csv").open()))
    assert len(rows) == 31 <= 36
    winners = [r for r in rows if r["winner"] == "1"]
    assert len(winners) == 1 and float(winners[0]["relative"]) == 1.0
    assert float(winners[0]["alpha"]) == make_grid()[12]
    tex = (tmp_path / "quadratic_deep_tuning.tex").read_text()
    assert "xmode=log" in tex and tex.count(r"\addlegendentry") == 1


def test_tunability_plot_with_no_results(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert emit_tunability_plot([], tmp_path) == []
    assert "no tuning results" in caplog.text and list(tmp_path.iterdir()) == []


def test_number_formats():
    assert format_accuracy(0.9234) == "92.34 %"
    assert format_accuracy(0.1) == "10.00 %"
    assert format_loss(1.234567) == "1.23"
    assert format_loss(0.001234) == "1.23e-03"
    assert format_loss(math.nan) == "nan"


def test_table_one_problem_three_optimizers(store, tmp_path):
    report = build_report(store)
    tex = render_table(report)
    perf = [l for l in tex.splitlines() if "Performance" in l]
    assert len(perf) == 1 and perf[0].count(r"$\pm$") == 3
    assert "1.10 $\\pm$ 0.10" in perf[0]
    assert r"$\beta_1$: 0.9" in tex and r"$\epsilon$: 1e-08" in tex and r"$\mu$: 0.99" in tex
    emit_table(report, tmp_path)
    assert (tmp_path / "benchmark_table.tex").read_text() == tex


def test_accuracy_cells_render_as_percent():
    logs = [make_log([2, 1], seed=s, problem="mnist_logreg", accuracies=[0.1, v])
            for s, v in enumerate([0.9134, 0.9334])]
    report = build_report(None, logs)
    entry = report.entries[0]
    assert entry.performance_mean == aggregate(logs).final_mean
    assert emit.format_performance_plain(entry).startswith("92.34 % ± ")
    assert r"92.34 \%" in render_table(report)


def test_table_csv_matches_recomputation(store, tmp_path):
    report = build_report(store)
    emit_table(report, tmp_path)
    rows = list(csv.DictReader((tmp_path / "benchmark_table.csv").open()))
    assert len(rows) == 3
    threshold = store.thresholds()["quadratic_deep"]
    for row in rows:
        finals = [l.test_losses[-1] for l in store.logs("quadratic_deep", row["optimizer"])]
        assert float(row["performance_mean"]) == pytest.approx(np.mean(finals), abs=1e-9)
        assert float(row["performance_std"]) == pytest.approx(np.std(finals, ddof=1), abs=1e-9)
        per_seed = []
        for l in store.logs("quadratic_deep", row["optimizer"]):
            hits = [i for i, v in enumerate(l.test_losses) if v <= threshold.value]
            per_seed.append(hits[0] if hits else l.epochs)
        assert float(row["speed_epochs"]) == pytest.approx(np.mean(per_seed), abs=1e-9)


def test_empty_report_cannot_be_tabled(tmp_path):
    with pytest.raises(ValueError):
        emit_table(build_report(None), tmp_path)


def test_latex_escape():
    assert latex_escape("a_b & 50% #1") == r"a\_b \& 50\% \#1"
    assert latex_escape("x^2~{y}") == r"x\textasciicircum{}2\textasciitilde{}\{y\}"
    assert latex_escape("c:\\") == r"c:\textbackslash{}"
