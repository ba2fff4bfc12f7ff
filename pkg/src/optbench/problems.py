"""Test problems: a dataset paired with a model that defines a stochastic loss.

Problem ids (stable, part of the CLI contract), in registry order::

    quadratic_deep, beale, branin, rosenbrock,
    mnist_logreg, mnist_mlp, fmnist_2c2d, cifar10_3c3d
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np

from . import data
from .rng import generator
from .tensor import Tensor, ops


class UnknownProblemError(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown problem {name!r}; valid ids: {', '.join(PROBLEM_IDS)}")

    def __str__(self) -> str:
        return self.args[0]


# -- synthetic problem specs -------------------------------------------------------

@dataclass(frozen=True)
class QuadraticSpec:
    """Spectrum and rotation of the ill-conditioned quadratic."""

    dimension: int = 100
    low_fraction: float = 0.9
    low_range: tuple[float, float] = (0.0, 1.0)
    high_range: tuple[float, float] = (30.0, 60.0)
    hessian_seed: int = 42

    def __post_init__(self):
        if self.dimension < 1 or not 0 <= self.low_fraction <= 1:
            raise ValueError(f"invalid quadratic spec: {self}")

    @property
    def n_low(self) -> int:
        return int(round(self.low_fraction * self.dimension))

    def eigenvalues(self) -> np.ndarray:
        rng = generator(self.hessian_seed, "quadratic/spectrum")
        low = rng.uniform(*self.low_range, size=self.n_low)
        high = rng.uniform(*self.high_range, size=self.dimension - self.n_low)
        return np.concatenate([low, high])

    def rotation(self) -> np.ndarray:
        g = generator(self.hessian_seed, "quadratic/rotation").standard_normal((self.dimension,) * 2)
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))

    def hessian(self) -> np.ndarray:
        """``R diag(eigenvalues) R^T`` in float64, exactly symmetric."""
        rot = self.rotation()
        h = (rot * self.eigenvalues()) @ rot.T
        return 0.5 * (h + h.T)


def beale(x, y):
    xy = x * y
    return (ops.square(1.5 - x + xy) + ops.square(2.25 - x + xy * y)
            + ops.square(2.625 - x + xy * y * y))


def branin(x, y):
    b, c = 5.1 / (4 * math.pi ** 2), 5 / math.pi
    s, t = 10.0, 1 / (8 * math.pi)
    return ops.square(y - b * ops.square(x) + c * x - 6.0) + s * (1 - t) * ops.cos(x) + s


def rosenbrock(x, y):
    return ops.square(1.0 - x) + 100.0 * ops.square(y - ops.square(x))


TWO_D_FUNCTIONS: dict[str, Callable] = {"beale": beale, "branin": branin, "rosenbrock": rosenbrock}


@dataclass(frozen=True)
class Noisy2DSpec:
    function: str
    initial_point: tuple[float, float]
    noise_sigma: float = 0.2

    def __post_init__(self):
        if self.function not in TWO_D_FUNCTIONS:
            raise ValueError(f"unknown 2-D function {self.function!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


# -- models -------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def truncated_normal(rng: np.random.Generator, shape, stddev: float) -> np.ndarray:
    """Normal draws with anything beyond two standard deviations redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * stddev).astype(np.float32)


@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int
    relu: bool = True

    def init(self, rng):
        return {f"{self.name}/w": xavier_uniform(rng, self.n_in, self.n_out, (self.n_in, self.n_out)),
                f"{self.name}/b": np.zeros(self.n_out, np.float32)}

    def apply(self, p, x):
        y = ops.affine(x, p[f"{self.name}/w"], p[f"{self.name}/b"])
        return ops.relu(y) if self.relu else y


@dataclass(frozen=True)
class Conv:
    name: str
    size: int
    c_in: int
    c_out: int
    stddev: float = 0.05

    def init(self, rng):
        return {f"{self.name}/w": truncated_normal(rng, (self.size, self.size, self.c_in, self.c_out), self.stddev),
                f"{self.name}/b": np.zeros(self.c_out, np.float32)}

    def apply(self, p, x):
        return ops.relu(ops.add_bias(ops.conv2d(x, p[f"{self.name}/w"]), p[f"{self.name}/b"]))


@dataclass(frozen=True)
class Pool:
    size: int = 2

    def init(self, rng):
        return {}

    def apply(self, p, x):
        return ops.maxpool2d(x, self.size)


@dataclass(frozen=True)
class Flatten:
    def init(self, rng):
        return {}

    def apply(self, p, x):
        return ops.flatten(x)


class Classifier:
    """Sequential network producing logits."""

    has_accuracy = True

    def __init__(self, layers, num_classes: int = 10):
        self.layers = tuple(layers)
        self.num_classes = num_classes

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = generator(seed, "init")
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            params.update(layer.init(rng))
        return params

    @property
    def weight_names(self) -> tuple[str, ...]:
        names = []
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv)):
                names.append(f"{layer.name}/w")
        return tuple(names)

    def outputs(self, params: Mapping[str, Tensor], inputs: np.ndarray) -> Tensor:
        x = Tensor(inputs.astype(_dtype_of(params), copy=False))
        for layer in self.layers:
            x = layer.apply(params, x)
        return x


class QuadraticModel:
    """Per-sample loss ``0.5 (theta - x)^T Q (theta - x)``."""

    has_accuracy = False
    weight_names: tuple[str, ...] = ()

    def __init__(self, spec: QuadraticSpec, initial_value: float = 10.0):
        self.spec = spec
        self.hessian = spec.hessian().astype(np.float32)
        self.initial_value = initial_value

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return {"theta": np.full(self.spec.dimension, self.initial_value, np.float32)}

    def outputs(self, params, inputs):
        theta = params["theta"]
        d = ops.sub(theta, Tensor(inputs.astype(_dtype_of(params), copy=False)))
        dq = ops.matmul(d, self.hessian.astype(d.dtype, copy=False))
        return 0.5 * ops.sum(ops.mul(d, dq), axis=1)


class Noisy2DModel:
    """Per-sample loss ``f(point + noise)``."""

    has_accuracy = False
    weight_names: tuple[str, ...] = ()

    def __init__(self, spec: Noisy2DSpec):
        self.spec = spec
        self.function = TWO_D_FUNCTIONS[spec.function]

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return {"point": np.asarray(self.spec.initial_point, np.float32)}

    def outputs(self, params, inputs):
        z = ops.add(params["point"], Tensor(inputs.astype(_dtype_of(params), copy=False)))
        return self.function(z[:, 0], z[:, 1])


def _dtype_of(params: Mapping[str, Tensor]) -> np.dtype:
    for t in params.values():
        return t.dtype if isinstance(t, Tensor) else np.asarray(t).dtype
    return np.dtype(np.float32)


# -- problems -----------------------------------------------------------------------

@dataclass(frozen=True)
class TestProblem:
    __test__ = False  # keep pytest from collecting this class

    name: str
    dataset_id: str
    model_factory: Callable[[], object] = field(repr=False)
    batch_size: int
    default_epochs: int
    l2: float = 0.0
    has_accuracy: bool = False
    eval_chunk: int = 1000
    description: str = ""

    def __post_init__(self):
        if self.batch_size <= 0 or self.default_epochs <= 0:
            raise ValueError(f"{self.name}: batch_size and default_epochs must be positive")

    @property
    def metric_mode(self) -> str:
        return "max_accuracy" if self.has_accuracy else "min_loss"

    @property
    def criterion(self) -> str:
        """Metric used for tuning and the performance column."""
        return "test_accuracy" if self.has_accuracy else "test_loss"

    def model(self):
        return self.model_factory()

    def load(self, cache_dir=None, download: bool = True) -> ProblemInstance:
        return ProblemInstance(self, load_dataset(self.dataset_id, self, cache_dir, download), self.model())


QUADRATIC_SPEC = QuadraticSpec()
QUADRATIC_SPLIT_SEED = 1729
TWO_D_SPLIT_SEED = 1730
TWO_D_SPECS = {
    "beale": Noisy2DSpec("beale", (-1.0, 1.0)),
    "branin": Noisy2DSpec("branin", (2.0, 7.0)),
    "rosenbrock": Noisy2DSpec("rosenbrock", (-0.5, 1.5)),
}


def mnist_logreg_model():
    return Classifier([Flatten(), Dense("fc", 784, 10, relu=False)])


def mnist_mlp_model():
    return Classifier([Flatten(), Dense("fc1", 784, 1000), Dense("fc2", 1000, 500),
                       Dense("fc3", 500, 100), Dense("fc4", 100, 10, relu=False)])


def two_c_two_d_model():
    return Classifier([Conv("conv1", 5, 1, 32), Pool(), Conv("conv2", 5, 32, 64), Pool(), Flatten(),
                       Dense("fc1", 7 * 7 * 64, 1024), Dense("fc2", 1024, 10, relu=False)])


def three_c_three_d_model():
    return Classifier([Conv("conv1", 5, 3, 64), Pool(), Conv("conv2", 3, 64, 96), Pool(),
                       Conv("conv3", 3, 96, 128), Pool(), Flatten(),
                       Dense("fc1", 4 * 4 * 128, 512), Dense("fc2", 512, 256),
                       Dense("fc3", 256, 10, relu=False)])


def build_quadratic_deep() -> TestProblem:
    return TestProblem("quadratic_deep", "quadratic", lambda: QuadraticModel(QUADRATIC_SPEC),
                       batch_size=128, default_epochs=100,
                       description="100-dimensional ill-conditioned noisy quadratic")


def build_noisy_2d(function: str) -> TestProblem:
    spec = TWO_D_SPECS[function]
    return TestProblem(function, "two_d", lambda: Noisy2DModel(spec), batch_size=128,
                       default_epochs=100, description=f"noisy {function} function")


def build_mnist_logreg() -> TestProblem:
    return TestProblem("mnist_logreg", "mnist", mnist_logreg_model, batch_size=128, default_epochs=50,
                       has_accuracy=True, eval_chunk=5000, description="logistic regression on MNIST")


def build_mnist_mlp() -> TestProblem:
    return TestProblem("mnist_mlp", "mnist", mnist_mlp_model, batch_size=128, default_epochs=50,
                       has_accuracy=True, eval_chunk=2000,
                       description="784-1000-500-100-10 ReLU network on MNIST")


def build_fmnist_2c2d() -> TestProblem:
    return TestProblem("fmnist_2c2d", "fmnist", two_c_two_d_model, batch_size=128, default_epochs=100,
                       has_accuracy=True, eval_chunk=250,
                       description="two conv + two dense layers on Fashion-MNIST")


def build_cifar10_3c3d() -> TestProblem:
    return TestProblem("cifar10_3c3d", "cifar10", three_c_three_d_model, batch_size=128,
                       default_epochs=100, l2=5e-4, has_accuracy=True, eval_chunk=250,
                       description="three conv + three dense layers on CIFAR-10, L2 5e-4")


_BUILDERS: dict[str, Callable[[], TestProblem]] = {
    "quadratic_deep": build_quadratic_deep,
    "beale": lambda: build_noisy_2d("beale"),
    "branin": lambda: build_noisy_2d("branin"),
    "rosenbrock": lambda: build_noisy_2d("rosenbrock"),
    "mnist_logreg": build_mnist_logreg,
    "mnist_mlp": build_mnist_mlp,
    "fmnist_2c2d": build_fmnist_2c2d,
    "cifar10_3c3d": build_cifar10_3c3d,
}
PROBLEM_IDS = tuple(_BUILDERS)


@lru_cache(maxsize=None)
def lookup(name: str) -> TestProblem:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise UnknownProblemError(name) from None


def registry() -> list[TestProblem]:
    return [lookup(n) for n in PROBLEM_IDS]


def load_dataset(dataset_id: str, problem: TestProblem | None = None, cache_dir=None,
                 download: bool = True) -> data.Dataset:
    if dataset_id == "quadratic":
        return data.synthetic_quadratic(QUADRATIC_SPEC, QUADRATIC_SPLIT_SEED)
    if dataset_id == "two_d":
        sigma = TWO_D_SPECS[problem.name].noise_sigma if problem is not None else 0.2
        return data.synthetic_noise_2d(sigma, TWO_D_SPLIT_SEED)
    if dataset_id in ("mnist", "fmnist"):
        return data.load_mnist_like(dataset_id, cache_dir, download)
    if dataset_id == "cifar10":
        return data.load_cifar10(cache_dir, download)
    raise data.MissingDatasetError(f"unknown dataset {dataset_id!r}")


# -- instances and evaluation -------------------------------------------------------

@dataclass
class EvalResult:
    loss: float
    accuracy: float | None = None


class ProblemInstance:
    """A problem bound to its loaded dataset and a model object."""

    def __init__(self, problem: TestProblem, dataset: data.Dataset, model):
        self.problem = problem
        self.dataset = dataset
        self.model = model

    @property
    def name(self) -> str:
        return self.problem.name

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return self.model.init_params(seed)

    def regularizer(self, params: Mapping[str, Tensor]) -> Tensor | None:
        if not self.problem.l2:
            return None
        return ops.l2_penalty([params[n] for n in self.model.weight_names], self.problem.l2)

    def batch_loss(self, params: Mapping[str, Tensor], inputs: np.ndarray,
                   labels: np.ndarray | None) -> Tensor:
        """Mean mini-batch loss including the regularizer; records when inside forward()."""
        out = self.model.outputs(params, inputs)
        loss = ops.softmax_cross_entropy(out, labels) if self.problem.has_accuracy else ops.mean(out)
        reg = self.regularizer(params)
        return loss if reg is None else ops.add(loss, reg)

    def loss_fn(self, inputs: np.ndarray, labels: np.ndarray | None):
        """Closure over a fixed batch, as expected by the gradient checker."""
        return lambda params: self.batch_loss(params, inputs, labels)

    def evaluate(self, params: Mapping[str, np.ndarray], split: str) -> EvalResult:
        return evaluate(self, params, split)


def evaluate(instance: ProblemInstance, params: Mapping[str, np.ndarray], split: str) -> EvalResult:
    """Full-split mean loss (regularizer included) and accuracy if defined.

    Nothing is recorded; non-finite values are returned as they are.
    """
    if split == "train_eval":
        stream = data.train_eval_view(instance.dataset)
    elif split == "test":
        stream = data.test_view(instance.dataset)
    else:
        raise ValueError(f"split must be 'train_eval' or 'test', got {split!r}")
    tparams = {k: Tensor(v) for k, v in params.items()}
    n = len(stream)
    total, correct = 0.0, 0
    with np.errstate(all="ignore"):
        for inputs, labels in stream.chunks(instance.problem.eval_chunk):
            out = instance.model.outputs(tparams, inputs).data
            if instance.problem.has_accuracy:
                logp = ops.log_softmax(out.astype(np.float64))
                total += float(-logp[np.arange(len(labels)), labels].sum())
                correct += int((out.argmax(axis=1) == labels).sum())
            else:
                total += float(out.astype(np.float64).sum())
        loss = total / n
        reg = instance.regularizer(tparams)
        if reg is not None:
            loss += float(reg.item())
    accuracy = correct / n if instance.problem.has_accuracy else None
    return EvalResult(loss, accuracy)
