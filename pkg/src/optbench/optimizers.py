"""Reference optimizers and the plug-in registry.

A step function has the signature ``step(params, grads, state, hp) ->
(new_params, new_state)``.  ``params`` and ``grads`` are lists of arrays,
``state`` is whatever the optimizer's ``init_state`` returned and ``hp`` a
:class:`HyperParams`.  Steps never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

RESERVED_NAMES = frozenset({"name", "optimizer", "problem", "seed", "epochs", "batch_size", "schema"})


class OptimizerError(ValueError):
    pass


class DuplicateOptimizerError(OptimizerError):
    pass


class UnknownOptimizerError(OptimizerError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class HyperParam:
    """One schema field.

    Tunable fields are searched on a log grid over ``[low, high]`` with
    ``grid_count`` points (``None``: the tuner's count).  ``valid`` is an
    optional predicate on the value, described by ``valid_text``.
    """

    name: str
    default: float | None = None
    kind: type = float
    tunable: bool = False
    low: float | None = None
    high: float | None = None
    grid_count: int | None = None
    valid: Callable[[float], bool] | None = field(default=None, compare=False)
    valid_text: str = ""


@dataclass(frozen=True)
class HyperParams(Mapping[str, float]):
    """An assignment of hyperparameter values for one optimizer schema."""

    schema: str
    values: tuple[tuple[str, float], ...]

    def __getitem__(self, key: str) -> float:
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self.values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def learning_rate(self) -> float:
        return self["learning_rate"]

    def to_dict(self) -> dict[str, float]:
        return dict(self.values)

    def replace(self, **changes) -> HyperParams:
        return get(self.schema).hyperparams(**{**self.to_dict(), **changes})


@dataclass(frozen=True)
class OptimizerDescriptor:
    name: str
    schema: tuple[HyperParam, ...]
    step: Callable
    init_state: Callable[[Sequence[np.ndarray]], Any] = field(default=lambda params: None)
    description: str = ""

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.schema)

    @property
    def tunable(self) -> tuple[HyperParam, ...]:
        return tuple(f for f in self.schema if f.tunable)

    def hyperparams(self, **values) -> HyperParams:
        """Fill in defaults and validate against the schema."""
        unknown = set(values) - set(self.field_names)
        if unknown:
            raise OptimizerError(f"{self.name}: unknown hyperparameters {sorted(unknown)}; "
                                 f"schema fields are {list(self.field_names)}")
        out = []
        for f in self.schema:
            v = values.get(f.name, f.default)
            if v is None:
                raise OptimizerError(f"{self.name}: hyperparameter {f.name!r} has no value")
            v = f.kind(v)
            if isinstance(v, float) and not math.isfinite(v):
                raise OptimizerError(f"{self.name}: {f.name} must be finite")
            if f.valid is not None and not f.valid(v):
                raise OptimizerError(f"{self.name}: {f.name}={v!r} must satisfy {f.valid_text}")
            out.append((f.name, v))
        hp = HyperParams(self.name, tuple(out))
        if "learning_rate" in hp and not hp["learning_rate"] > 0:
            raise OptimizerError(f"{self.name}: learning_rate must be positive")
        return hp


# -- reference update rules ------------------------------------------------------------

def sgd_step(params, grads, hp):
    """theta <- theta - lr * g"""
    lr = hp["learning_rate"]
    return [p - lr * g for p, g in zip(params, grads)]


@dataclass(frozen=True)
class MomentumState:
    velocity: tuple[np.ndarray, ...]


def momentum_init(params) -> MomentumState:
    return MomentumState(tuple(np.zeros_like(p) for p in params))


def momentum_step(params, grads, state: MomentumState, hp):
    """Heavy-ball: ``v <- mu v + g``, ``theta <- theta - lr v``."""
    lr, mu = hp["learning_rate"], hp["momentum"]
    velocity = tuple(mu * v + g for v, g in zip(state.velocity, grads))
    return [p - lr * v for p, v in zip(params, velocity)], MomentumState(velocity)


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0


def adam_init(params) -> AdamState:
    zeros = tuple(np.zeros_like(p) for p in params)
    return AdamState(zeros, zeros, 0)


def adam_step(params, grads, state: AdamState, hp):
    lr, b1, b2, eps = hp["learning_rate"], hp["beta1"], hp["beta2"], hp["epsilon"]
    t = state.t + 1
    m = tuple(b1 * m + (1 - b1) * g for m, g in zip(state.m, grads))
    v = tuple(b2 * v + (1 - b2) * (g * g) for v, g in zip(state.v, grads))
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


_LR = HyperParam("learning_rate", None, float, tunable=True, low=1e-5, high=1e2)


def _unit(name: str, default: float) -> HyperParam:
    return HyperParam(name, default, valid=lambda v: 0.0 <= v < 1.0, valid_text="0 <= value < 1")


SGD = OptimizerDescriptor("sgd", (_LR,), lambda p, g, s, hp: (sgd_step(p, g, hp), s),
                          description="stochastic gradient descent")
MOMENTUM = OptimizerDescriptor("momentum", (_LR, _unit("momentum", 0.99)), momentum_step,
                               momentum_init, description="heavy-ball momentum")
ADAM = OptimizerDescriptor("adam", (_LR, _unit("beta1", 0.9), _unit("beta2", 0.999),
                                    HyperParam("epsilon", 1e-8, valid=lambda v: v > 0, valid_text="value > 0")),
                           adam_step, adam_init, description="Adam")

BUILTINS = ("sgd", "momentum", "adam")
_REGISTRY: dict[str, OptimizerDescriptor] = {d.name: d for d in (SGD, MOMENTUM, ADAM)}


def register_plugin(descriptor: OptimizerDescriptor) -> OptimizerDescriptor:
    """Make ``descriptor`` available to the runner and tuner under its name."""
    if descriptor.name in _REGISTRY:
        raise DuplicateOptimizerError(f"optimizer {descriptor.name!r} is already registered")
    names = descriptor.field_names
    clash = RESERVED_NAMES.intersection(names)
    if clash:
        raise OptimizerError(f"{descriptor.name}: schema uses reserved names {sorted(clash)}")
    if len(set(names)) != len(names):
        raise OptimizerError(f"{descriptor.name}: duplicate schema fields")
    _REGISTRY[descriptor.name] = descriptor
    return descriptor


def unregister(name: str) -> None:
    if name in BUILTINS:
        raise OptimizerError(f"cannot unregister built-in optimizer {name!r}")
    _REGISTRY.pop(name, None)


def get(name: str) -> OptimizerDescriptor:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownOptimizerError(
            f"unknown optimizer {name!r}; registered: {', '.join(_REGISTRY)}") from None


def names() -> list[str]:
    return list(_REGISTRY)
