"""Self-checks behind the ``grad-check`` and ``solver-check`` commands."""
from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from canopysr import autodiff as ad
from canopysr.autodiff import Tensor, gradcheck
from canopysr.ode import IntegratorConfig, integrate
from canopysr.uvit import UViT, UViTConfig

SMALLEST_UVIT = UViTConfig(state_channels=3, grid=(2, 2), depth=2, heads=2, width=8, time_dim=8)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_cases(rng):
    """(name, inputs, scalar function) for every differentiable op."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    m1, m2 = _leaf(rng, 3, 5), _leaf(rng, 5, 4)
    b1, b2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
    x, g, be = _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)
    s = _leaf(rng, 3, 5)
    c1, c2 = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    e = _leaf(rng, 1, 10)
    p = _leaf(rng, 2, 3, 4)
    y = _leaf(rng, 3, 4)
    w = {k: Tensor(rng.standard_normal(sh)) for k, sh in
         {"ab": (3, 4), "mm": (3, 4), "bmm": (2, 3, 3), "ln": (4, 6), "sm": (3, 5),
          "cat": (2, 5), "sl": (2, 2), "ex": (3, 10), "rs": (4, 3), "pm": (4, 2, 3),
          "sum": (4,), "mean": (3,)}.items()}

    def probe(out, key):
        # fixed random weights make every output element matter
        return ad.sum_(ad.mul(out, w[key]))

    return [
        ("add", [a, b], lambda: probe(ad.add(a, b), "ab")),
        ("sub", [a, b], lambda: probe(ad.sub(a, b), "ab")),
        ("mul", [a, b], lambda: probe(ad.mul(a, b), "ab")),
        ("scale", [a], lambda: probe(ad.scale(a, -1.7), "ab")),
        ("gelu", [a], lambda: probe(ad.gelu(a), "ab")),
        ("matmul", [m1, m2], lambda: probe(ad.matmul(m1, m2), "mm")),
        ("matmul-batched", [b1, b2], lambda: probe(ad.matmul(b1, b2), "bmm")),
        ("layernorm", [x, g, be], lambda: probe(ad.layernorm(x, g, be), "ln")),
        ("softmax", [s], lambda: probe(ad.softmax(s), "sm")),
        ("reshape", [a], lambda: probe(ad.reshape(a, (4, 3)), "rs")),
        ("permute", [p], lambda: probe(ad.permute(p, (2, 0, 1)), "pm")),
        ("concat", [c1, c2], lambda: probe(ad.concat([c1, c2], axis=1), "cat")),
        ("slice", [s], lambda: probe(ad.slice_(s, (slice(0, 2), slice(1, 3))), "sl")),
        ("expand", [e], lambda: probe(ad.expand(e, (3, 10)), "ex")),
        ("sum", [a], lambda: probe(ad.sum_(a, axis=0), "sum")),
        ("mean", [a], lambda: probe(ad.mean(a, axis=1), "mean")),
        ("mse", [a, y], lambda: ad.mse(a, y)),
    ]


def run_op_gradchecks(seed: int = 0, points: int = 10, rtol: float = 1e-4):
    rng = np.random.default_rng(seed)
    return [gradcheck(fn, inputs, name=name, rtol=rtol, max_points=points, rng=rng)
            for name, inputs, fn in op_cases(rng)]


def run_uvit_gradcheck(seed: int = 0, points: int = 10, rtol: float = 1e-4,
                       cfg: UViTConfig = SMALLEST_UVIT):
    """One result per parameter tensor of the smallest U-ViT, in float64."""
    rng = np.random.default_rng(seed)
    model = UViT(cfg).astype(np.float64)
    z = Tensor(rng.standard_normal((2, cfg.state_channels, *cfg.grid)))
    target = Tensor(rng.standard_normal(z.shape))
    t = np.array([0.25, 0.8])

    def loss():
        return ad.mse(model(z, t), target)

    return [gradcheck(loss, [p], name=f"uvit.{name}", rtol=rtol, max_points=points, rng=rng)
            for name, p in model.named_parameters()]


def gradcheck_report(seed: int = 0) -> dict:
    results = run_op_gradchecks(seed) + run_uvit_gradcheck(seed)
    rows = [asdict(r) for r in results]
    return {"uvit_config": asdict(SMALLEST_UVIT), "checks": rows,
            "max_rel_error": max(r.max_rel_error for r in results),
            "passed": all(r.passed for r in results)}


# -- integrator ---------------------------------------------------------------------------

def _exp_error(steps: int) -> float:
    z1, _ = integrate(lambda z, t: z, np.array([1.0]), IntegratorConfig(steps=steps))
    return abs(float(z1[0]) - math.e)


def solver_report() -> dict:
    checks = []

    err = _exp_error(100)
    checks.append({"name": "exp-growth-100-steps", "value": err, "bound": 1e-10, "passed": err < 1e-10})

    c = np.array([0.3, -1.2, 2.5])
    z0 = np.array([1.0, 2.0, -0.5])
    z1, rec = integrate(lambda z, t: c, z0, IntegratorConfig())
    dev = float(np.max(np.abs(z1 - (z0 + c))))
    checks.append({"name": "constant-velocity", "value": dev, "bound": 1e-13, "passed": dev < 1e-13})
    checks.append({"name": "evaluation-count", "value": rec.n_evals, "bound": 601,
                   "passed": rec.n_evals == 601})

    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    z1, _ = integrate(lambda z, t: A @ z, np.array([1.0, 0.0]), IntegratorConfig())
    dev = float(np.max(np.abs(z1 - np.array([math.cos(1.0), -math.sin(1.0)]))))
    checks.append({"name": "rotation", "value": dev, "bound": 1e-8, "passed": dev < 1e-8})

    steps = (8, 16, 32, 64)
    errs = [_exp_error(n) for n in steps]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    slope = float(np.polyfit(np.log([1 / n for n in steps]), np.log(errs), 1)[0])
    checks.append({"name": "halving-ratios", "value": ratios, "bound": [24, 40],
                   "passed": all(24 <= r <= 40 for r in ratios)})
    checks.append({"name": "convergence-order", "value": slope, "bound": [4.7, 5.3],
                   "passed": abs(slope - 5) <= 0.3})
    return {"checks": checks, "passed": all(ch["passed"] for ch in checks)}
