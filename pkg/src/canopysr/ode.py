"""Explicit Runge-Kutta integration of dz/dt = f(z, t) over t in [0, 1].

The default is a fixed uniform grid of Dormand-Prince 5(4) steps: the
embedded error estimate is recorded but never used to reject a step, so the
number of velocity evaluations is fixed and the result is bit-reproducible.
An adaptive accept/reject mode with PI step control is kept for diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from canopysr.errors import ConfigError, IntegrationError, RangeError

VelocityFn = Callable[[np.ndarray, float], np.ndarray]

# Dormand & Prince (1980) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class IntegratorConfig:
    method: str = "dopri5"
    steps: int = 100
    mode: str = "fixed"
    atol: float = 1e-6
    rtol: float = 1e-3
    clamp_conditioning: bool = False

    def __post_init__(self):
        if self.method not in ("dopri5", "rk4"):
            raise ConfigError(f"unknown integrator method {self.method!r}")
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown integrator mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("integrator steps must be >= 1")
        if self.mode == "adaptive" and (self.atol <= 0 or self.rtol <= 0):
            raise ConfigError("adaptive tolerances must be positive")
        if self.mode == "adaptive" and self.method != "dopri5":
            raise ConfigError("adaptive mode requires dopri5")


@dataclass
class TrajectoryRecord:
    t: list[float] = field(default_factory=lambda: [0.0])
    error_norms: list[float] = field(default_factory=list)
    n_evals: int = 0
    rejected: int = 0
    conditioning_drift: float | None = None

    @property
    def max_error(self) -> float:
        return max(self.error_norms, default=0.0)


def _eval(f: VelocityFn, z: np.ndarray, t: float) -> np.ndarray:
    out = np.asarray(f(z, t))
    if out.shape != z.shape:
        raise IntegrationError(f"velocity shape {out.shape} does not match state {z.shape}", t)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite velocity", t)
    return out


def _dopri5(f: VelocityFn, z, t, h, k1=None):
    k = [k1 if k1 is not None else _eval(f, z, t)]
    for s in range(1, 7):
        dz = sum(a * ki for a, ki in zip(_A[s], k) if a != 0.0)
        k.append(_eval(f, z + h * dz, t + _C[s] * h))
    # stage 7 is evaluated at the 5th-order solution itself (FSAL)
    z_next = z + h * sum(b * ki for b, ki in zip(_B5, k) if b != 0.0)
    err = h * sum(e * ki for e, ki in zip(_E, k) if e != 0.0)
    return z_next, err, k[6]


def dopri5_step(f: VelocityFn, z: np.ndarray, t: float, h: float):
    """One Dormand-Prince step; returns ``(z_next, error_estimate)``."""
    if h <= 0:
        raise RangeError(f"step size must be positive, got {h}")
    if t < 0 or t + h > 1 + 1e-12:
        raise RangeError(f"step [{t}, {t + h}] leaves [0, 1]")
    z_next, err, _ = _dopri5(f, np.asarray(z), t, h)
    return z_next, err


def rk4_step(f: VelocityFn, z, t, h):
    k1 = _eval(f, z, t)
    k2 = _eval(f, z + 0.5 * h * k1, t + 0.5 * h)
    k3 = _eval(f, z + 0.5 * h * k2, t + 0.5 * h)
    k4 = _eval(f, z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _error_norm(err, z, z_next, atol, rtol) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_next))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate(f: VelocityFn, z0: np.ndarray, cfg: IntegratorConfig | None = None):
    """Integrate from t=0 to t=1; returns ``(z1, TrajectoryRecord)``."""
    cfg = cfg or IntegratorConfig()
    z = np.array(z0, copy=True)
    if not np.all(np.isfinite(z)):
        raise IntegrationError("non-finite initial state", 0.0)
    rec = TrajectoryRecord()
    if cfg.mode == "adaptive":
        return _integrate_adaptive(f, z, cfg, rec)

    n = cfg.steps
    k1 = None
    for i in range(n):
        t, t_next = i / n, (i + 1) / n
        h = t_next - t
        if cfg.method == "rk4":
            z = rk4_step(f, z, t, h)
            rec.n_evals += 4
        else:
            z_next, err, k7 = _dopri5(f, z, t, h, k1)
            rec.n_evals += 7 if k1 is None else 6
            rec.error_norms.append(_error_norm(err, z, z_next, cfg.atol, cfg.rtol))
            z, k1 = z_next, k7
        rec.t.append(t_next)
    return z, rec


def _integrate_adaptive(f, z, cfg, rec):
    safety, min_fac, max_fac = 0.9, 0.2, 10.0
    alpha, beta = 0.7 / 5, 0.4 / 5
    budget = 10 * cfg.steps
    t, h = 0.0, 1.0 / cfg.steps
    prev_err = 1.0
    k1 = _eval(f, z, t)
    rec.n_evals += 1
    attempts = 0
    while t < 1.0:
        if attempts >= budget:
            raise IntegrationError(f"adaptive integration did not reach t=1 in {budget} steps", t)
        attempts += 1
        h = min(h, 1.0 - t)
        z_next, err, k7 = _dopri5(f, z, t, h, k1)
        rec.n_evals += 6
        e = max(_error_norm(err, z, z_next, cfg.atol, cfg.rtol), 1e-10)
        if e <= 1.0:
            t = 1.0 if 1.0 - (t + h) < 1e-14 else t + h
            z, k1 = z_next, k7
            rec.t.append(t)
            rec.error_norms.append(e)
            fac = safety * e ** -alpha * prev_err ** beta
            prev_err = e
        else:
            rec.rejected += 1
            fac = safety * e ** -alpha
        h *= min(max_fac, max(min_fac, fac))
    return z, rec
