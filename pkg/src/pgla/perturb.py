"""Perturbation-protected gradient sharing (FL-DP / FL-PP threat model).

Clients clip their local gradient, add calibrated noise and upload the
result; the round loop also keeps the clean gradients, which only the
evaluation code is allowed to look at.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LayoutError, ParameterError
from .layout import GradientVector, normalize
from .nets import ModelInstance, loss_and_grad_params
from .rng import Rng, sample_gaussian, sample_laplace

log = logging.getLogger(__name__)

MECHANISMS = ("gaussian-dp", "laplace-dp", "per-layer-random")


def sensitivity(clip: float, m: int) -> float:
    return 2.0 * clip / m


def gaussian_factor(delta: float) -> float:
    """The sqrt(2 ln(1.25/delta)) multiplier of the Gaussian mechanism."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"Gaussian mechanism needs delta in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log(1.25 / delta))


@dataclass(frozen=True)
class PerturbationSpec:
    mechanism: str = "gaussian-dp"
    epsilon: float = 1.0
    delta: float = 1e-5
    clip: float = 1.0
    min_dataset_size: int = 1
    sigma_override: float | None = None  # only for non-DP perturbation experiments

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ParameterError(f"unknown mechanism {self.mechanism!r}")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ParameterError("delta must lie in [0, 1)")
        if not self.clip > 0:
            raise ParameterError("clip threshold must be positive")
        if self.min_dataset_size < 1:
            raise ParameterError("min_dataset_size must be at least 1")
        if self.sigma_override is not None and self.sigma_override < 0:
            raise ParameterError("sigma_override must be non-negative")
        if self.mechanism == "gaussian-dp" and self.extended_range:
            log.warning("epsilon=%g lies outside (0, 1]; Gaussian calibration used in extended range",
                        self.epsilon)

    @property
    def extended_range(self) -> bool:
        return self.epsilon > 1.0

    @property
    def sigma(self) -> float:
        if self.sigma_override is not None:
            return float(self.sigma_override)
        return client_sigma(self)

    def for_mechanism(self, mechanism: str) -> "PerturbationSpec":
        return PerturbationSpec(mechanism, self.epsilon, self.delta, self.clip,
                                self.min_dataset_size, self.sigma_override)


@dataclass(frozen=True)
class FlTopology:
    clients: int = 1
    aggregation_times: int = 1
    exposures: int = 1

    def __post_init__(self):
        if min(self.clients, self.aggregation_times, self.exposures) < 1:
            raise ParameterError("topology counts must all be at least 1")


@dataclass
class PrivacyAccountant:
    entries: list = field(default_factory=list)

    def record(self, epsilon: float, delta: float) -> None:
        self.entries.append((float(epsilon), float(delta)))

    def merge(self, other: "PrivacyAccountant") -> None:
        self.entries.extend(other.entries)


def compose(acct: PrivacyAccountant) -> tuple[float, float]:
    """Simple composition: budgets add up. ``fsum`` keeps it order-independent."""
    return (math.fsum(e for e, _ in acct.entries), math.fsum(d for _, d in acct.entries))


def client_sigma(spec: PerturbationSpec) -> float:
    sens = sensitivity(spec.clip, spec.min_dataset_size)
    if spec.mechanism == "laplace-dp":
        return sens / spec.epsilon
    if spec.mechanism in ("gaussian-dp", "per-layer-random"):
        return sens * gaussian_factor(spec.delta) / spec.epsilon
    raise ParameterError(f"no calibration for {spec.mechanism!r}")


def server_sigma(topo: FlTopology, clip: float, m: int, epsilon: float, c_dp: float) -> float:
    """Noise std added to the aggregate before broadcast (zero below the threshold)."""
    n = topo.clients
    if topo.aggregation_times <= topo.exposures * math.sqrt(n):
        return 0.0
    spread = math.sqrt(topo.aggregation_times ** 2 - topo.exposures ** 2 * n)
    return c_dp * sensitivity(clip, m) * spread / n / epsilon


def noise_std(mechanism: str, scale: float) -> float:
    """Per-coordinate standard deviation of a mechanism with the given scale."""
    return math.sqrt(2.0) * scale if mechanism == "laplace-dp" else scale


def clip_gradient(g: GradientVector, clip: float) -> GradientVector:
    if not clip > 0:
        raise ParameterError("clip threshold must be positive")
    norm = math.sqrt(float(np.dot(g.values.astype(np.float64), g.values.astype(np.float64))))
    if norm <= clip:
        return g.with_values(g.values.copy())
    factor = clip / norm
    clipped = (g.values.astype(np.float64) * factor).astype(np.float32)
    # float32 rounding may leave the norm a hair above the threshold
    while math.sqrt(float(np.sum(clipped.astype(np.float64) ** 2))) > clip:
        factor *= 1 - 1e-7
        clipped = (g.values.astype(np.float64) * factor).astype(np.float32)
    return g.with_values(clipped)


def _noise(rng: Rng, mechanism: str, scale: float, n: int) -> np.ndarray:
    if mechanism == "laplace-dp":
        return sample_laplace(rng, scale, n)
    return sample_gaussian(rng, scale, n)


def perturb(g: GradientVector, spec: PerturbationSpec, rng: Rng) -> GradientVector:
    """Add i.i.d. noise of the spec's scale to every coordinate."""
    if spec.mechanism == "per-layer-random":
        return perturb_per_layer(g, random_layer_specs(len(g.layout), spec, rng), rng)
    sigma = spec.sigma
    noise = _noise(rng, spec.mechanism, sigma, len(g))
    out = (g.values.astype(np.float64) + noise).astype(np.float32)
    return g.with_values(out, role="perturbed", mechanism=spec.mechanism, sigma=sigma,
                         noise_std=noise_std(spec.mechanism, sigma))


def random_layer_specs(n_layers: int, spec: PerturbationSpec, rng: Rng) -> list[PerturbationSpec]:
    """Pick Gaussian or Laplace calibration independently for each layer."""
    picks = rng.integers(2, n_layers)
    return [spec.for_mechanism("gaussian-dp" if p == 0 else "laplace-dp") for p in picks]


def perturb_per_layer(g: GradientVector, specs: Sequence[PerturbationSpec], rng: Rng) -> GradientVector:
    if len(specs) != len(g.layout):
        raise LayoutError(f"{len(specs)} perturbation specs for {len(g.layout)} layers")
    out = g.values.astype(np.float64).copy()
    record = []
    variance = 0.0
    for entry, spec in zip(g.layout.entries, specs):
        sigma = spec.sigma
        sl = slice(entry.offset, entry.offset + entry.length)
        out[sl] += _noise(rng, spec.mechanism, sigma, entry.length)
        record.append((entry.name, spec.mechanism, sigma))
        variance += entry.length * noise_std(spec.mechanism, sigma) ** 2
    return g.with_values(out.astype(np.float32), role="perturbed", layers=record,
                         noise_std=math.sqrt(variance / len(g)))


def estimate_noise_scale(perturbed: GradientVector, noise_sd: float) -> float:
    """Noise scale M in clean-signal units, from attacker-visible data only.

    The clean signal's spread is estimated as sqrt(var(v') - sd^2), so M is
    the noise std divided by that spread.
    """
    if noise_sd < 0:
        raise ParameterError("noise std must be non-negative")
    if noise_sd == 0:
        return 0.0
    _, s_noisy, _ = normalize(perturbed.values)
    clean_var = s_noisy ** 2 - noise_sd ** 2
    floor = 1e-3 * s_noisy
    s_clean = math.sqrt(max(clean_var, floor * floor))
    return noise_sd / s_clean


@dataclass
class Client:
    model: ModelInstance
    samples: list  # [(x, y), ...]


def local_gradient(client: Client) -> GradientVector:
    """Gradient of the mean loss over the client's local samples."""
    acc = None
    for x, y in client.samples:
        _, g = loss_and_grad_params(client.model, x, y)
        acc = g.values.astype(np.float64) if acc is None else acc + g.values
    return GradientVector((acc / len(client.samples)).astype(np.float32), client.model.layout, "clean")


@dataclass
class RoundResult:
    shared: list
    clean: list
    aggregate: GradientVector | None = None
    server_sigma: float = 0.0


def simulate_round(clients: Sequence[Client], spec: PerturbationSpec, topo: FlTopology, rng: Rng,
                   round_index: int = 0, accountant: PrivacyAccountant | None = None,
                   server_noise: bool = False, c_dp: float | None = None) -> RoundResult:
    """One FedSGD round: local gradient, clip, perturb, upload.

    Returns the intercepted uploads and the post-clip clean gradients. Each
    client draws from the stream ``rng.derive(round_index, client_id)``.
    """
    if not clients:
        raise ParameterError("at least one client is required")
    shared, clean = [], []
    local = PrivacyAccountant()
    for cid, client in enumerate(clients):
        stream = rng.derive(round_index, cid)
        g = clip_gradient(local_gradient(client), spec.clip)
        clean.append(g)
        shared.append(perturb(g, spec, stream))
        local.record(spec.epsilon, spec.delta if spec.mechanism != "laplace-dp" else 0.0)
    if accountant is not None:
        accountant.merge(local)
    result = RoundResult(shared, clean)
    if server_noise:
        mean = np.mean([s.values.astype(np.float64) for s in shared], axis=0)
        if c_dp is None:
            c_dp = gaussian_factor(spec.delta)
        sd = server_sigma(topo, spec.clip, spec.min_dataset_size, spec.epsilon, c_dp)
        stream = rng.derive(round_index, len(clients))
        noisy = mean + (sd * stream.normal(mean.size) if sd > 0 else 0.0)
        result.aggregate = shared[0].with_values(noisy.astype(np.float32), role="perturbed", sigma=sd)
        result.server_sigma = sd
    return result
