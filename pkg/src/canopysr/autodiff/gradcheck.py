"""Central finite-difference gradient checking (run it in float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from canopysr.autodiff.tensor import Tensor

REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, index, rel_step: float = 1e-5) -> float:
    orig = x.data[index]
    h = rel_step * max(1.0, abs(float(orig)))
    x.data[index] = orig + h
    fp = float(fn().data)
    x.data[index] = orig - h
    fm = float(fn().data)
    x.data[index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], name: str = "",
              rtol: float = 1e-4, max_points: int | None = None,
              rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``inputs`` must be float64 leaves with ``requires_grad``. When
    ``max_points`` is set, that many coordinates per input are sampled.
    """
    for x in inputs:
        x.zero_grad()
    fn().backward()
    analytic = [x.grad.copy() for x in inputs]

    worst, count = 0.0, 0
    for x, ga in zip(inputs, analytic):
        flat = list(np.ndindex(x.shape)) if x.ndim else [()]
        if max_points is not None and len(flat) > max_points:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(flat), size=max_points, replace=False)
            flat = [flat[i] for i in sorted(picks)]
        for idx in flat:
            err = relative_error(float(ga[idx]), numerical_grad(fn, x, idx))
            worst = max(worst, err)
            count += 1
    return GradCheckResult(name, worst, count, worst < rtol)
