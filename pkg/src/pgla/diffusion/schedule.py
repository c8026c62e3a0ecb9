"""Noise schedule and closed-form Gaussian diffusion identities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by step, with index 0 = no noise.

    ``alpha[t] = 1 - beta[t]`` and ``gamma[t] = prod_{s<=t} alpha[s]`` for
    ``t = 1..T``; ``beta[0] = 0`` and ``gamma[0] = 1`` by convention.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    def check_step(self, t: int, low: int = 1) -> int:
        t = int(t)
        if not low <= t <= self.T:
            raise ParameterError(f"step {t} outside [{low}, {self.T}]")
        return t


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParameterError("T must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alpha = 1.0 - beta
    gamma = np.cumprod(alpha)
    for arr in (beta, alpha, gamma):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, gamma)


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Draw from q(X_t | X_0) given the standard normal ``eps``."""
    t = sched.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParameterError("eps must have the shape of x0")
    g = sched.gamma[t]
    return math.sqrt(g) * x0 + math.sqrt(1.0 - g) * eps


def q_step(x_prev, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """One forward transition q(X_t | X_{t-1})."""
    t = sched.check_step(t)
    a = sched.alpha[t]
    return math.sqrt(a) * np.asarray(x_prev, dtype=np.float64) + math.sqrt(1.0 - a) * np.asarray(eps)


@dataclass
class PosteriorParams:
    mu: np.ndarray
    sigma_sq: float


def posterior_coefficients(t: int, sched: NoiseSchedule, as_printed: bool = False):
    """``(coef_x0, coef_xt, sigma_sq)`` of q(X_{t-1} | X_0, X_t).

    ``as_printed`` swaps sqrt(alpha_t) for alpha_t on the X_t coefficient,
    reproducing a common misprint of this formula; it is not a valid posterior.
    """
    t = sched.check_step(t)
    a, g, g_prev = sched.alpha[t], sched.gamma[t], sched.gamma[t - 1]
    coef_x0 = math.sqrt(g_prev) * (1.0 - a) / (1.0 - g)
    coef_xt = (a if as_printed else math.sqrt(a)) * (1.0 - g_prev) / (1.0 - g)
    sigma_sq = (1.0 - g_prev) * (1.0 - a) / (1.0 - g)
    return coef_x0, coef_xt, sigma_sq


def posterior_params(x0, xt, t: int, sched: NoiseSchedule, as_printed: bool = False) -> PosteriorParams:
    cx0, cxt, var = posterior_coefficients(t, sched, as_printed)
    mu = cx0 * np.asarray(x0, dtype=np.float64) + cxt * np.asarray(xt, dtype=np.float64)
    return PosteriorParams(mu, var)


def tprime_for_gamma(target: float, sched: NoiseSchedule) -> int:
    """Smallest step whose cumulative retention has dropped to ``target``."""
    below = np.flatnonzero(sched.gamma <= target)
    return int(below[0]) if below.size else sched.T


def map_M_to_Tprime(M: float, sched: NoiseSchedule) -> tuple[int, int, int]:
    """Start step for noise scale ``M``: returns ``(t_lo, t_hi, t_prime)``.

    ``t_prime`` is the first step with gamma <= 1/(1+M^2); the bracket
    ``(t_prime - 1, t_prime)`` straddles the target when t_prime is interior.
    """
    if not M >= 0:
        raise ParameterError(f"M must be non-negative, got {M}")
    t_prime = tprime_for_gamma(1.0 / (1.0 + M * M), sched)
    return max(t_prime - 1, 0), t_prime, t_prime


def loss_weights(sched: NoiseSchedule) -> np.ndarray:
    """Per-step weights of the variational bound form of the noise loss.

    The t=1 posterior variance is zero, so it is clipped to the t=2 value;
    weights are rescaled to average one.
    """
    t = np.arange(1, sched.T + 1)
    a, g, g_prev = sched.alpha[t], sched.gamma[t], sched.gamma[t - 1]
    var = (1.0 - g_prev) * (1.0 - a) / (1.0 - g)
    if sched.T > 1:
        var[0] = var[1]
    else:
        var[0] = 1.0 - a[0]
    w = (1.0 - a) ** 2 / (2.0 * var * a * (1.0 - g))
    out = np.zeros(sched.T + 1)
    out[1:] = w / w.mean()
    return out
