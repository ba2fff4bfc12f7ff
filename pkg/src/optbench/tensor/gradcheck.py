"""Central finite-difference verification of analytic gradients (in float64)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .engine import Tensor, backward, forward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    nonfinite: bool = False
    worst: tuple[str, int] | None = None
    errors: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros comparable."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-3,
    *,
    coords: int | None = 100,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare backward() against central differences, both in 64-bit.

    ``loss_fn`` receives a dict of float64 tensors and must build a scalar.
    When the parameters hold more than ``coords`` entries a random subset is
    checked, spread evenly over the parameter tensors.  ``coords=None`` checks
    every entry.
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if not p64 or all(v.size == 0 for v in p64.values()):
        return GradCheckReport(0.0, 0, tolerance)

    def evaluate(arrays):
        return float(forward(loss_fn, {k: Tensor(v) for k, v in arrays.items()}).item())

    tensors = {k: Tensor(v, requires_grad=True) for k, v in p64.items()}
    loss = forward(loss_fn, tensors)
    if not math.isfinite(loss.item()):
        return GradCheckReport(math.inf, 0, tolerance, nonfinite=True)
    backward(loss)
    analytic = {k: t.grad for k, t in tensors.items()}

    rng = np.random.default_rng(seed)
    names = [k for k, v in p64.items() if v.size]
    total = sum(p64[k].size for k in names)
    plan: dict[str, np.ndarray] = {}
    if coords is None or total <= coords:
        plan = {k: np.arange(p64[k].size) for k in names}
    else:
        # equal shares; what small tensors cannot use goes to the larger ones
        quota = dict.fromkeys(names, 0)
        left = coords
        while left > 0:
            open_ = [k for k in names if quota[k] < p64[k].size]
            share = max(1, left // len(open_))
            for k in open_:
                take = min(share, p64[k].size - quota[k], left)
                quota[k] += take
                left -= take
        for k in names:
            plan[k] = np.sort(rng.choice(p64[k].size, size=quota[k], replace=False))

    worst, worst_at, checked, nonfinite = 0.0, None, 0, False
    errors = {}
    for k, idx in plan.items():
        flat = p64[k].reshape(-1)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate(p64)
            flat[i] = orig - h
            down = evaluate(p64)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic[k].reshape(-1)[idx]
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(a))):
            nonfinite = True
        err = relative_error(a, numeric, floor)
        errors[k] = err
        checked += idx.size
        if err.size and float(np.nanmax(err)) > worst:
            j = int(np.nanargmax(err))
            worst, worst_at = float(err[j]), (k, int(idx[j]))
    return GradCheckReport(worst, checked, tolerance, nonfinite, worst_at, errors)
