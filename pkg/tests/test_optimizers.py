import copy
import math

import numpy as np
import pytest

from optbench import optimizers
from optbench.optimizers import (AdamState, DuplicateOptimizerError, HyperParam, MomentumState,
                                 OptimizerDescriptor, OptimizerError, UnknownOptimizerError)
from optbench.problems import QUADRATIC_SPEC

from _oracles import RTOL, run_oracle_cases


def _step(name, params, grads, state=None, **hp):
    desc = optimizers.get(name)
    state = desc.init_state(params) if state is None else state
    return desc.step(params, grads, state, desc.hyperparams(**hp))


@pytest.mark.parametrize("name", ["sgd", "momentum", "adam"])
def test_matches_straight_line_oracle(name):
    assert run_oracle_cases(name) < RTOL


# -- SGD ----------------------------------------------------------------------------------

def test_sgd_examples():
    new, _ = _step("sgd", [np.array([1.0])], [np.array([0.5])], learning_rate=0.1)
    assert new[0][0] == pytest.approx(0.95)
    p = [np.arange(4.0)]
    new, _ = _step("sgd", p, [np.zeros(4)], learning_rate=3.0)
    assert np.array_equal(new[0], p[0])


@pytest.mark.parametrize("lam, lr", [(1.0, 1.9), (50.0, 0.03), (0.1, 5.0)])
def test_sgd_contracts_on_scalar_quadratic(lam, lr):
    theta = np.array([3.0])
    for _ in range(20):
        new, _ = _step("sgd", [theta], [lam * theta], learning_rate=lr)
        assert abs(new[0][0]) < abs(theta[0])
        theta = new[0]


def test_sgd_monotone_on_deterministic_quadratic():
    q = QUADRATIC_SPEC.hessian()
    lr = 1 / np.linalg.eigvalsh(q).max()
    theta = np.full(100, 10.0)
    loss = 0.5 * theta @ q @ theta
    for _ in range(100):
        (theta,), _ = _step("sgd", [theta], [q @ theta], learning_rate=lr)
        new_loss = 0.5 * theta @ q @ theta
        assert new_loss <= loss
        loss = new_loss


# -- Momentum -------------------------------------------------------------------------------

def test_momentum_without_momentum_is_sgd():
    rng = np.random.default_rng(0)
    p, state = [rng.standard_normal(5)], None
    for _ in range(4):
        g = [rng.standard_normal(5)]
        (new_p,), state = _step("momentum", p, g, state, learning_rate=0.3, momentum=0.0)
        (sgd_p,), _ = _step("sgd", p, g, learning_rate=0.3)
        assert np.array_equal(new_p, sgd_p)
        p = [new_p]


def test_momentum_first_step_equals_sgd():
    p, g = [np.array([1.0, -2.0])], [np.array([0.3, 0.7])]
    new, state = _step("momentum", p, g, learning_rate=0.1)
    assert np.array_equal(new[0], _step("sgd", p, g, learning_rate=0.1)[0][0])
    assert np.array_equal(state.velocity[0], g[0])


def _constant_gradient_velocity(k, mu, g=1.0):
    p, state = [np.zeros(1)], None
    for _ in range(k):
        p, state = _step("momentum", p, [np.array([g])], state, learning_rate=0.01, momentum=mu)
    return state.velocity[0][0], p[0][0]


def test_momentum_geometric_series():
    mu, k, lr = 0.99, 5, 0.01
    v, theta = _constant_gradient_velocity(k, mu)
    assert v == pytest.approx((1 - mu ** k) / (1 - mu), rel=1e-6)
    assert theta == pytest.approx(-lr * sum((1 - mu ** j) / (1 - mu) for j in range(1, k + 1)), rel=1e-6)


def test_momentum_reaches_terminal_velocity():
    v, _ = _constant_gradient_velocity(600, 0.99)
    assert v == pytest.approx(100.0, rel=0.01)
    assert _constant_gradient_velocity(458, 0.99)[0] < 99.0  # (1 - 0.99^k) >= 0.99 needs k >= 459


# -- Adam ----------------------------------------------------------------------------------------

def test_adam_zero_gradient_first_step_is_no_op():
    p = [np.array([1.5, -2.0])]
    new, state = _step("adam", p, [np.zeros(2)], learning_rate=0.1)
    assert np.array_equal(new[0], p[0]) and state.t == 1


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(3)
    g = rng.standard_normal(50) * 10.0 ** rng.uniform(-3, 2, 50)
    p = rng.standard_normal(50)
    lr, eps = 0.01, 1e-8
    (new,), _ = _step("adam", [p], [g], learning_rate=lr)
    np.testing.assert_allclose(p - new, lr * g / (np.abs(g) + eps), rtol=1e-9)
    assert np.all(np.sign(new - p) == -np.sign(g))


def test_adam_first_step_is_scale_invariant():
    p = [np.zeros(3)]
    (a,), _ = _step("adam", p, [np.ones(3)], learning_rate=0.1)
    (b,), _ = _step("adam", p, [10 * np.ones(3)], learning_rate=0.1)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_adam_counter_increments_and_slot_shapes():
    p = [np.ones((2, 3)), np.ones(4)]
    state = None
    for t in range(1, 4):
        p, state = _step("adam", p, [np.ones((2, 3)), np.ones(4)], state, learning_rate=0.1)
        assert state.t == t
        assert [m.shape for m in state.m] == [(2, 3), (4,)] == [v.shape for v in state.v]


def test_float32_parameters_stay_float32():
    p = [np.ones(3, np.float32)]
    g = [np.full(3, 0.5, np.float32)]
    for name in ("sgd", "momentum", "adam"):
        new, _ = _step(name, p, g, learning_rate=0.1)
        assert new[0].dtype == np.float32


# -- purity -----------------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["sgd", "momentum", "adam"])
def test_steps_are_pure(name):
    rng = np.random.default_rng(9)
    p = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
    g = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
    desc = optimizers.get(name)
    state = desc.init_state(p)
    hp = desc.hyperparams(learning_rate=0.05)
    for _ in range(2):
        state = desc.step(p, g, state, hp)[1]
    snapshot = copy.deepcopy((p, g, state))
    out1 = desc.step(p, g, state, hp)
    out2 = desc.step(copy.deepcopy(p), copy.deepcopy(g), copy.deepcopy(state), hp)
    for a, b in zip(out1[0], out2[0]):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(p + g, snapshot[0] + snapshot[1]):
        assert np.array_equal(a, b)
    if isinstance(state, (MomentumState, AdamState)):
        assert repr(state) == repr(snapshot[2])


# -- hyperparameters and registry --------------------------------------------------------------

def test_defaults_follow_the_published_baselines():
    assert optimizers.get("momentum").hyperparams(learning_rate=1).to_dict() == {
        "learning_rate": 1.0, "momentum": 0.99}
    assert optimizers.get("adam").hyperparams(learning_rate=1).to_dict() == {
        "learning_rate": 1.0, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}
    assert [f.name for f in optimizers.get("adam").tunable] == ["learning_rate"]


@pytest.mark.parametrize("name, values, message", [
    ("sgd", {}, "no value"),
    ("sgd", {"learning_rate": 0.0}, "positive"),
    ("sgd", {"learning_rate": -1.0}, "positive"),
    ("sgd", {"learning_rate": math.inf}, "finite"),
    ("sgd", {"learning_rate": 0.1, "momentum": 0.9}, "unknown hyperparameters"),
    ("momentum", {"learning_rate": 0.1, "momentum": 1.0}, "momentum"),
    ("momentum", {"learning_rate": 0.1, "momentum": -0.1}, "momentum"),
    ("adam", {"learning_rate": 0.1, "beta2": 1.0}, "beta2"),
    ("adam", {"learning_rate": 0.1, "epsilon": 0.0}, "epsilon"),
])
def test_hyperparameter_validation(name, values, message):
    with pytest.raises(OptimizerError, match=message):
        optimizers.get(name).hyperparams(**values)


def test_hyperparams_mapping_behaviour():
    hp = optimizers.get("momentum").hyperparams(learning_rate=0.5)
    assert dict(hp) == {"learning_rate": 0.5, "momentum": 0.99}
    assert hp.learning_rate == 0.5 and hp.replace(learning_rate=2.0)["learning_rate"] == 2.0
    assert hp.schema == "momentum"
    with pytest.raises(KeyError):
        hp["beta1"]


@pytest.fixture
def plugin():
    created = []

    def make(name, schema=(HyperParam("learning_rate", None, tunable=True, low=1e-5, high=1e2),), step=None):
        desc = OptimizerDescriptor(name, tuple(schema), step or (lambda p, g, s, hp: (optimizers.sgd_step(p, g, hp), s)))
        optimizers.register_plugin(desc)
        created.append(name)
        return desc

    yield make
    for name in created:
        optimizers.unregister(name)


def test_registering_a_duplicate_fails(plugin):
    with pytest.raises(DuplicateOptimizerError):
        optimizers.register_plugin(optimizers.SGD)
    plugin("mine")
    with pytest.raises(DuplicateOptimizerError):
        plugin("mine")


@pytest.mark.parametrize("field", ["seed", "epochs", "problem", "batch_size"])
def test_reserved_schema_names_are_rejected(plugin, field):
    with pytest.raises(OptimizerError, match="reserved"):
        plugin("bad", schema=(HyperParam(field, 1.0),))
    assert "bad" not in optimizers.names()


def test_duplicate_schema_fields_are_rejected(plugin):
    with pytest.raises(OptimizerError, match="duplicate"):
        plugin("bad", schema=(HyperParam("a", 1.0), HyperParam("a", 2.0)))


def test_unknown_optimizer_lists_registered_names():
    with pytest.raises(UnknownOptimizerError) as info:
        optimizers.get("lbfgs")
    assert "sgd" in str(info.value) and "adam" in str(info.value)
    assert isinstance(info.value, KeyError)


def test_builtins_cannot_be_unregistered():
    with pytest.raises(OptimizerError):
        optimizers.unregister("sgd")


def test_plugin_is_usable_by_name(plugin):
    desc = plugin("sgd_copy")
    assert optimizers.get("sgd_copy") is desc and "sgd_copy" in optimizers.names()
    new, _ = desc.step([np.ones(2)], [np.ones(2)], None, desc.hyperparams(learning_rate=0.5))
    assert np.array_equal(new[0], [0.5, 0.5])


def test_oracle_detects_a_missing_bias_correction(monkeypatch):
    def no_correction(params, grads, state, hp):
        new, st = optimizers.adam_step(params, grads, state, hp)
        lr, eps = hp["learning_rate"], hp["epsilon"]
        return [p - lr * m / (np.sqrt(v) + eps) for p, m, v in zip(params, st.m, st.v)], st

    monkeypatch.setitem(optimizers._REGISTRY, "adam",
                        OptimizerDescriptor("adam", optimizers.ADAM.schema, no_correction, optimizers.adam_init))
    assert run_oracle_cases("adam", cases=50) > 1e-3
