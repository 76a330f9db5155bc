from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from canopysr.autodiff.tensor import Tensor
from canopysr.errors import NumericalError, UsageError


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns new parameter arrays; ``state`` is advanced in place. Any
    non-finite gradient rejects the whole update before anything changes.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; update rejected")
        if g.shape != params[name].shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        out[name] = (p - state.lr * update).astype(p.dtype)
    return out, state


class AdamW:
    """Stateful wrapper that updates ``Tensor`` parameters in place."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params: dict[str, Tensor] = dict(named_params)
        for name, p in self.params.items():
            if p.frozen:
                raise UsageError(f"parameter {name!r} is frozen and cannot be optimized")
            if not p.requires_grad:
                raise UsageError(f"parameter {name!r} does not require gradients")
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.frozen:
                raise UsageError(f"parameter {name!r} was frozen after registration")
        new, _ = adamw_step({k: p.data for k, p in self.params.items()},
                            {k: p.grad for k, p in self.params.items()}, self.state)
        for name, p in self.params.items():
            p.data = new[name]
