"""Fast oracle checks runnable from the command line.

Each check compares a library routine against an independent reference
computation and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion import make_schedule, map_M_to_Tprime, posterior_coefficients
from .layout import GradientVector, LayerLayout, adjust, grid_side, restore
from .nets import ModelSpec, build_model, loss_and_grad_params
from .perturb import FlTopology, PerturbationSpec, clip_gradient, server_sigma
from .rng import Rng


def check_dp_calibration():
    worst = 0.0
    for eps in (0.1, 0.5, 1.0):
        for delta in (1e-5, 1e-3):
            spec = PerturbationSpec("gaussian-dp", eps, delta, 1.5, 100)
            ref = (2 * 1.5 / 100) * math.sqrt(2 * math.log(1.25 / delta)) / eps
            worst = max(worst, abs(spec.sigma - ref) / ref)
        lap = PerturbationSpec("laplace-dp", eps, 0.0, 1.5, 100).sigma
        worst = max(worst, abs(lap - 0.03 / eps) / (0.03 / eps))
    zero = server_sigma(FlTopology(10, 5, 5), 1.0, 100, 1.0, 1.0)
    return "dp-calibration", worst < 1e-12 and zero == 0.0, f"max rel err {worst:.2e}"


def check_clipping():
    rng = Rng(1)
    layout = LayerLayout.single(50)
    worst = 0.0
    for _ in range(200):
        g = GradientVector((rng.normal(50) * 10 * rng.uniform(1)[0]).astype(np.float32), layout)
        worst = max(worst, float(np.linalg.norm(clip_gradient(g, 1.0).values.astype(np.float64))))
    return "clipping", worst <= 1.0, f"max norm {worst!r}"


def check_adjust_roundtrip():
    rng = Rng(2)
    bad = 0
    for _ in range(200):
        n = 1 + int(rng.integers(3000, 1)[0])
        layout = LayerLayout.single(n)
        g = GradientVector((rng.normal(n) * 0.01).astype(np.float32), layout)
        grid = adjust(g)
        side = grid_side(n)
        ok = side * side > n >= (side - 1) ** 2
        bad += not (ok and np.array_equal(restore(grid, layout).values, g.values))
    return "adjust-roundtrip", bad == 0, f"{bad} failures"


def check_posterior():
    sched = make_schedule()
    worst = 0.0
    for t in (2, 10, 500, 1000):
        a, g, gp = sched.alpha[t], sched.gamma[t], sched.gamma[t - 1]
        # joint of (X_{t-1}, X_t) given X_0 = x0: condition on X_t
        var_prev, var_t, cov = 1 - gp, 1 - g, math.sqrt(a) * (1 - gp)
        k = cov / var_t
        ref = (math.sqrt(gp) - k * math.sqrt(g), k, var_prev - cov * k)
        got = posterior_coefficients(t, sched)
        worst = max(worst, max(abs(x - y) for x, y in zip(got, ref)))
    return "posterior", worst < 1e-10, f"max abs err {worst:.2e}"


def check_tprime():
    sched = make_schedule()
    t = map_M_to_Tprime(0.1, sched)[2]
    ref = int(np.argmax(np.cumprod(1 - np.linspace(1e-4, 0.02, 1000)) <= 1 / 1.01)) + 1
    return "M-mapping", abs(t - ref) <= 1 and map_M_to_Tprime(0.0, sched)[2] == 0, f"T'={t}, oracle {ref}"


def check_param_gradient():
    spec = ModelSpec.mlp((6,), [4], 3)
    rng = Rng(3)
    model = build_model(spec, rng)
    x, y = rng.uniform(6), 1
    _, g = loss_and_grad_params(model, x, y)
    from .nets import loss_value

    h = 1e-6
    fd = np.empty(spec.num_params)
    for i in range(spec.num_params):
        plus, minus = model.copy(), model.copy()
        plus.params[i] += h
        minus.params[i] -= h
        fd[i] = (loss_value(plus, x, y) - loss_value(minus, x, y)) / (2 * h)
    err = float(np.linalg.norm(g.values - fd) / np.linalg.norm(fd))
    return "param-gradient", err < 1e-4, f"rel err {err:.2e}"


CHECKS = (check_dp_calibration, check_clipping, check_adjust_roundtrip, check_posterior, check_tprime,
          check_param_gradient)


def run_selftest() -> list[tuple[str, bool, str]]:
    return [check() for check in CHECKS]
