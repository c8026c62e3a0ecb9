"""Noise-scale-adaptive entry and ancestral reverse sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import LayoutError, ParameterError, UsageError
from ..layout import AdjustedGrid, GradientVector, adjust, normalize, restore
from ..rng import Rng
from .schedule import NoiseSchedule, map_M_to_Tprime, tprime_for_gamma


@dataclass
class DenoiseRequest:
    input: AdjustedGrid
    M: float | None = None
    c_override: float | None = None
    T_prime: int | None = None  # forces the start step (non-adaptive runs)

    def __post_init__(self):
        entry_scale(self.M, self.c_override)

    @property
    def c(self) -> float:
        return entry_scale(self.M, self.c_override)


def entry_scale(M: float | None, c: float | None) -> float:
    """The input scaling c, from a known noise scale M or given directly."""
    if (M is None) == (c is None):
        raise ParameterError("give exactly one of M and c_override")
    if M is not None:
        if not M >= 0:
            raise ParameterError("M must be non-negative")
        return 1.0 / math.sqrt(1.0 + M * M)
    if not 0.0 < c < 1.0:
        raise ParameterError(f"c must lie in (0, 1), got {c}")
    return float(c)


def entry_point(req: DenoiseRequest, sched: NoiseSchedule) -> tuple[np.ndarray, int]:
    """Scaled start state ``c * grid`` and the step the reverse chain starts from."""
    if req.T_prime is not None:
        t_prime = sched.check_step(req.T_prime, low=0)
    elif req.M is not None:
        t_prime = map_M_to_Tprime(req.M, sched)[2]
    else:
        t_prime = tprime_for_gamma(req.c_override ** 2, sched)
    req.T_prime = t_prime
    return req.c * req.input.flat(), t_prime


def sample_reverse(x_start, T_prime: int, predictor: Callable, sched: NoiseSchedule, rng: Rng,
                   condition=None, stochastic: bool = True) -> np.ndarray:
    """Run ``T_prime`` reverse steps from ``x_start`` and return the X_0 estimate.

    Fresh noise is added on every step except the last one.
    """
    T_prime = sched.check_step(T_prime, low=0)
    if getattr(predictor, "conditional", False) and condition is None:
        raise UsageError("conditional predictor needs a condition grid")
    x = np.array(x_start, dtype=np.float64).reshape(-1)
    for t in range(T_prime, 0, -1):
        a, g = sched.alpha[t], sched.gamma[t]
        if condition is None:
            eps = predictor(x, t)
        else:
            eps = predictor(x, t, condition)
        x = (x - (1.0 - a) / math.sqrt(1.0 - g) * np.asarray(eps, dtype=np.float64)) / math.sqrt(a)
        if t > 1 and stochastic:
            x = x + math.sqrt(1.0 - a) * rng.normal(x.size)
    return x


def denoise(gradient: GradientVector, predictor, rng: Rng, *, M: float | None = None,
            c: float | None = None, T_prime: int | None = None, stochastic: bool = True,
            schedule: NoiseSchedule | None = None) -> GradientVector:
    """Recover a clean gradient estimate from a perturbed one.

    The perturbed vector is expressed in clean-signal units (its spread
    divided by sqrt(1+M^2)), placed on the grid, scaled by c, pushed through
    the reverse chain and mapped back to the original layout.
    """
    sched = schedule or predictor.schedule
    scale_c = entry_scale(M, c)
    _, s_noisy, offset = normalize(gradient.values)
    grid = adjust(gradient, scale=scale_c * s_noisy, offset=offset)
    if grid.side != predictor.side:
        raise LayoutError(f"gradient grid side {grid.side} does not match predictor side {predictor.side}")
    req = DenoiseRequest(grid, M=M, c_override=c, T_prime=T_prime)
    x_start, t_prime = entry_point(req, sched)
    condition = grid.flat() if getattr(predictor, "conditional", False) else None
    x0 = sample_reverse(x_start, t_prime, predictor, sched, rng, condition, stochastic)
    out = restore(grid.with_grid(x0), gradient.layout, "recovered")
    m_used = math.sqrt(max(1.0 / (scale_c * scale_c) - 1.0, 0.0))
    out.meta.update(gradient.meta)
    out.meta.update(M=m_used, c=scale_c, T_prime=t_prime)
    return out
