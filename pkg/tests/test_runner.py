import json
import math
import re

import numpy as np
import pytest

from optbench import HARNESS_VERSION, optimizers
from optbench.optimizers import HyperParam, OptimizerDescriptor
from optbench.problems import UnknownProblemError
from optbench.runner import (METRICS, RunConfig, RunError, RunManyError, TimerResolutionError, TrainingLog,
                             estimate_overhead, hyperparam_dirname, problem_instance, run, run_many,
                             seed_range)
from optbench.tuner import GridSpec, make_grid

MID_GRID_LR = make_grid(GridSpec())[18]


def quad(seed=0, lr=0.01, epochs=3, **kw):
    return RunConfig("quadratic_deep", "sgd", {"learning_rate": lr}, seed, epochs=epochs, **kw)


# -- configuration ------------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs, message", [
    ({"epochs": 0}, "epochs"),
    ({"epochs": -2}, "epochs"),
    ({"batch_size": 0}, "batch_size"),
    ({"seed": -1}, "seed"),
    ({"seed": 2 ** 64}, "seed"),
])
def test_config_validation(kwargs, message):
    base = {"problem": "quadratic_deep", "optimizer": "sgd", "hyperparams": {"learning_rate": 0.1}, "seed": 0}
    with pytest.raises(RunError, match=message):
        RunConfig(**{**base, **kwargs})


def test_config_rejects_foreign_hyperparameters():
    hp = optimizers.get("adam").hyperparams(learning_rate=0.1)
    with pytest.raises(RunError, match="adam"):
        RunConfig("quadratic_deep", "sgd", hp, 0)
    with pytest.raises(optimizers.OptimizerError):
        RunConfig("quadratic_deep", "sgd", {"learning_rate": 0.1, "beta1": 0.9}, 0)


def test_config_defaults_and_largest_seed():
    c = RunConfig("mnist_mlp", "adam", {"learning_rate": 1e-3}, 2 ** 64 - 1)
    assert c.resolved_epochs == 50 and c.resolved_batch_size == 128
    assert c.with_seed(5).seed == 5 and c.with_seed(5).hyperparams == c.hyperparams


def test_unknown_problem_and_optimizer():
    with pytest.raises(UnknownProblemError):
        run(RunConfig("imagenet", "sgd", {"learning_rate": 0.1}, 0, epochs=1))
    with pytest.raises(optimizers.UnknownOptimizerError):
        RunConfig("quadratic_deep", "lbfgs", {"learning_rate": 0.1}, 0)


def test_log_path_layout(tmp_path):
    c = quad(seed=7, lr=0.0251188643150958, output_dir=tmp_path)
    assert c.log_path() == tmp_path / "quadratic_deep" / "sgd" / "lr_2.511886e-02" / "seed_7.json"
    assert quad().log_path() is None


def test_dirname_includes_extra_tunable_fields(temporary_optimizer):
    temporary_optimizer(OptimizerDescriptor(
        "two_knobs", (HyperParam("learning_rate", None, tunable=True, low=1e-5, high=1e2),
                      HyperParam("gamma", 0.5, tunable=True, low=0.1, high=0.9), HyperParam("fixed", 3.0)),
        lambda p, g, s, hp: (optimizers.sgd_step(p, g, hp), s)))
    hp = optimizers.get("two_knobs").hyperparams(learning_rate=0.1, gamma=0.25)
    assert hyperparam_dirname(hp) == "lr_1.000000e-01__gamma_0.25"


def test_seed_range():
    assert seed_range(42, 10) == list(range(42, 52))
    assert seed_range(0, 0) == []


# -- single runs ---------------------------------------------------------------------------------

def test_same_config_gives_byte_identical_logs(tmp_path):
    a = run(quad(seed=3, output_dir=tmp_path / "a"))
    b = run(quad(seed=3, output_dir=tmp_path / "b"))
    pa, pb = quad(seed=3, output_dir=tmp_path / "a").log_path(), quad(seed=3, output_dir=tmp_path / "b").log_path()
    assert pa.read_bytes() == pb.read_bytes()
    assert a.to_json(include_wall_clock=False) == b.to_json(include_wall_clock=False)


def test_log_shape_and_contents(tmp_path):
    log = run(quad(seed=11, epochs=4, output_dir=tmp_path, invocation="optbench run ..."))
    for m in ("train_losses", "test_losses"):
        assert len(getattr(log, m)) == 5
    assert log.train_accuracies is None and log.test_accuracies is None
    assert log.iterations_per_epoch == 1000 // 128 and log.criterion == "test_loss"
    assert re.fullmatch(r"\d+\.\d+\.\d+", log.version) and log.version == HARNESS_VERSION
    stored = json.loads(quad(seed=11, epochs=4, output_dir=tmp_path).log_path().read_text())
    assert {"train_losses", "test_losses", "train_accuracies", "test_accuracies", "wall_clock_seconds",
            "diverged", "version"} <= set(stored)
    assert stored["config"] == {"problem": "quadratic_deep", "optimizer": "sgd",
                                "hyperparams": {"learning_rate": 0.01}, "seed": 11, "epochs": 4,
                                "batch_size": 128}
    assert stored["wall_clock_seconds"] is None and stored["invocation"] == "optbench run ..."
    assert TrainingLog.load(quad(seed=11, epochs=4, output_dir=tmp_path).log_path()).test_losses == log.test_losses


def test_wall_clock_is_recorded_on_request(tmp_path):
    cfg = quad(epochs=2, output_dir=tmp_path, record_wall_clock=True)
    log = run(cfg)
    assert len(log.wall_clock_seconds) == 3 and log.wall_clock_seconds[0] == 0.0
    assert all(t > 0 for t in log.wall_clock_seconds[1:])
    assert all(round(t, 6) == t for t in log.wall_clock_seconds)
    assert json.loads(cfg.log_path().read_text())["wall_clock_seconds"] == log.wall_clock_seconds


def test_epoch_zero_is_the_initial_model():
    inst = problem_instance("quadratic_deep")
    log = run(quad(seed=5))
    init = inst.init_params(5)
    assert log.train_losses[0] == inst.evaluate(init, "train_eval").loss
    assert log.test_losses[0] == inst.evaluate(init, "test").loss


def test_reported_train_loss_is_a_full_evaluation():
    inst = problem_instance("quadratic_deep")
    cfg = quad(seed=2, epochs=1)
    log = run(cfg)
    # replay the run by hand and evaluate the final parameters on the train-eval subset
    from optbench.data import BatchStream, batches
    from optbench.tensor import Tensor, backward, forward
    params = inst.init_params(2)
    stream = BatchStream(inst.dataset, 128, 2)
    for idx in batches(stream, 1):
        t = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        backward(forward(inst.batch_loss, t, inst.dataset.train_inputs[idx], None))
        params = {k: params[k] - np.float32(0.01) * t[k].grad for k in params}
    assert log.train_losses[1] == inst.evaluate(params, "train_eval").loss


def test_divergence_keeps_logs_rectangular(tmp_path):
    cfg = quad(lr=100.0, epochs=5, output_dir=tmp_path)
    log = run(cfg)
    assert log.diverged and log.diverged_epoch is not None and log.diverged_epoch <= 2
    for m in ("train_losses", "test_losses"):
        values = getattr(log, m)
        assert len(values) == 6
        assert all(math.isnan(v) for v in values[log.diverged_epoch:])
        assert all(math.isfinite(v) for v in values[:log.diverged_epoch])
    stored = json.loads(cfg.log_path().read_text())
    assert stored["diverged"] is True and stored["test_losses"][-1] is None
    assert math.isnan(TrainingLog.load(cfg.log_path()).test_losses[-1])


def test_plugin_wrapping_sgd_reproduces_builtin_sgd(temporary_optimizer):
    temporary_optimizer(OptimizerDescriptor(
        "my_sgd", (HyperParam("learning_rate", None, tunable=True, low=1e-5, high=1e2),),
        lambda p, g, s, hp: (optimizers.sgd_step(p, g, hp), s)))
    a = run(quad(seed=4))
    b = run(RunConfig("quadratic_deep", "my_sgd", {"learning_rate": 0.01}, 4, epochs=3))
    assert a.train_losses == b.train_losses and a.test_losses == b.test_losses


def test_logreg_smoke_train_loss_decreases(mnist):
    inst = problem_instance("mnist_logreg")
    logs = [run(RunConfig("mnist_logreg", "sgd", {"learning_rate": MID_GRID_LR}, s, epochs=3), inst)
            for s in range(10)]
    decreasing = [all(b < a for a, b in zip(log.train_losses, log.train_losses[1:])) for log in logs]
    assert sum(decreasing) >= 9
    finals = [log.test_accuracies[-1] for log in logs]
    assert len(set(finals)) > 1  # seeds matter
    assert all(0 <= a <= 1 for log in logs for a in log.test_accuracies)
    again = run(RunConfig("mnist_logreg", "sgd", {"learning_rate": MID_GRID_LR}, 3, epochs=3), inst)
    assert again.to_json(False) == logs[3].to_json(False)


# -- many runs -----------------------------------------------------------------------------------

def _without_wall_clock(logs):
    return [log.to_json(include_wall_clock=False) for log in logs]


def test_run_many_is_independent_of_parallelism(tmp_path):
    configs = [quad(seed=s, output_dir=tmp_path / "seq") for s in seed_range(100, 6)]
    seq = run_many(configs, parallelism=1)
    par = run_many([quad(seed=s, output_dir=tmp_path / "par") for s in seed_range(100, 6)], parallelism=4)
    assert _without_wall_clock(seq) == _without_wall_clock(par)
    assert [log.seed for log in par] == list(range(100, 106))
    for s in range(100, 106):
        assert (quad(seed=s, output_dir=tmp_path / "seq").log_path().read_bytes()
                == quad(seed=s, output_dir=tmp_path / "par").log_path().read_bytes())


def test_run_many_empty():
    assert run_many([], parallelism=4) == []


def test_run_many_requires_distinct_paths(tmp_path):
    with pytest.raises(RunError, match="distinct"):
        run_many([quad(output_dir=tmp_path), quad(output_dir=tmp_path)])


@pytest.mark.parametrize("parallelism", [1, 3])
def test_run_many_keeps_partial_results(parallelism):
    configs = [quad(seed=0), RunConfig("no_such_problem", "sgd", {"learning_rate": 0.1}, 0, epochs=1), quad(seed=2)]
    seen = []
    with pytest.raises(RunManyError) as info:
        run_many(configs, parallelism=parallelism, on_result=lambda i, log, err: seen.append(i))
    err = info.value
    assert err.results[0].seed == 0 and err.results[1] is None and err.results[2].seed == 2
    assert list(err.errors) == [1] and isinstance(err.errors[1], UnknownProblemError)
    assert sorted(seen) == [0, 1, 2]
    assert "1 of 3 runs failed" in str(err)


def test_run_many_rejects_bad_parallelism():
    with pytest.raises(RunError):
        run_many([quad()], parallelism=0)


def test_metric_accessor():
    log = run(quad(epochs=1))
    assert np.array_equal(log.metric("test_loss"), np.asarray(log.test_losses))
    assert log.metric("test_accuracy") is None
    assert set(METRICS) == {"train_losses", "test_losses", "train_accuracies", "test_accuracies"}
    with pytest.raises(KeyError):
        log.metric("perplexity")


# -- overhead estimation -----------------------------------------------------------------------------

def test_overhead_rejects_too_short_runs():
    with pytest.raises(TimerResolutionError, match="epochs"):
        estimate_overhead("sgd", {"learning_rate": 0.01}, runs=2, epochs=1, problem="beale")


def test_overhead_needs_a_warmup_and_a_measured_run():
    with pytest.raises(RunError):
        estimate_overhead("sgd", {"learning_rate": 0.01}, runs=1, problem="beale")


def test_overhead_of_sgd_against_itself(mnist):
    est = estimate_overhead("sgd", {"learning_rate": 0.01}, runs=5, epochs=1, problem="mnist_logreg")
    assert 0.8 <= est.ratio <= 1.25
    assert len(est.sgd_seconds) == len(est.optimizer_seconds) == 5 and est.warmup_runs == 1
    assert est.ratio == pytest.approx(np.mean(est.optimizer_seconds[1:]) / np.mean(est.sgd_seconds[1:]))


def test_overhead_of_a_sleeping_plugin(mnist, delayed_sgd):
    hp = {"learning_rate": 0.01, "delay": 0.001}
    est = estimate_overhead("delayed_sgd", hp, runs=2, epochs=1, problem="mnist_logreg")
    assert est.ratio > 1.0


def test_overhead_of_adam_on_the_mlp(mnist):
    est = estimate_overhead("adam", {"learning_rate": 1e-3}, runs=2, epochs=1, problem="mnist_mlp")
    assert est.ratio >= 1.0
