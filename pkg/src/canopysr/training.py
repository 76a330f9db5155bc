"""Shared optimisation loop with a divergence guard and a loss curve."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from canopysr.autodiff import AdamW, Tensor
from canopysr.errors import NumericalError
from canopysr.nn import Module


@dataclass
class LossCurve:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    HEADER = ("step", "loss", "seconds")

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def window_means(self, width: int = 100) -> np.ndarray:
        x = self.losses
        n = len(x) // width
        return x[: n * width].reshape(n, width).mean(axis=1)


@dataclass
class OptimConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0


def run_training(module: Module, batch_loss: Callable[[np.random.Generator, int], Tensor],
                 cfg: OptimConfig, curve: LossCurve | None = None,
                 rng: np.random.Generator | None = None) -> LossCurve:
    """Minimise ``batch_loss(rng, step)`` over ``module``'s parameters with AdamW.

    A non-finite loss or gradient restores the last good parameters and raises
    ``NumericalError`` carrying them as ``last_good_state``.
    """
    opt = AdamW(module.named_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    curve = curve if curve is not None else LossCurve()
    start = time.perf_counter()
    for step in range(cfg.steps):
        good = module.state_dict()
        opt.zero_grad()
        loss = batch_loss(rng, step)
        value = loss.item()
        try:
            if not math.isfinite(value):
                raise NumericalError(f"loss became {value} at step {step}")
            loss.backward()
            opt.step()
        except NumericalError as exc:
            module.load_state_dict(good)
            exc.last_good_state = good
            exc.step = step
            raise
        curve.rows.append((step, value, time.perf_counter() - start))
    return curve
