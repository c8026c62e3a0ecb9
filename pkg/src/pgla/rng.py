"""Counter-based random streams.

Every random draw in the testbed goes through :class:`Rng`, a thin wrapper
around numpy's Philox4x64 bit generator. Only raw 64-bit words are pulled
from the generator; uniforms, normals (Box-Muller) and Laplace variates
(inverse CDF) are derived here so that the consumed word count, and thus
the stream position, is exact and reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


class Rng:
    """A seeded stream with an explicit position counter.

    ``Rng(seed, position)`` always yields the same next output, and
    :meth:`derive` gives an independent child stream keyed by integers,
    e.g. ``rng.derive(round_idx, client_id)``.
    """

    def __init__(self, seed: int = 0, position: int = 0, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) <= _MASK64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._bits = np.random.Philox(seq)
        self.position = 0
        if position:
            self.skip(position)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key}, position={self.position})"

    def derive(self, *key: int) -> "Rng":
        return Rng(self.seed, key=self.key + tuple(key))

    def state(self) -> tuple[int, tuple[int, ...], int]:
        return self.seed, self.key, self.position

    def skip(self, n: int) -> None:
        while n > 0:
            chunk = min(n, 1 << 20)
            self._bits.random_raw(chunk)
            self.position += chunk
            n -= chunk

    def raw(self, n: int) -> np.ndarray:
        out = self._bits.random_raw(int(n))
        self.position += int(n)
        return np.asarray(out, dtype=np.uint64).reshape(-1)

    def uniform(self, n: int) -> np.ndarray:
        """Float64 uniforms on the open interval (0, 1)."""
        k = (self.raw(n) >> np.uint64(11)).astype(np.float64)
        return (k + 0.5) * _INV_2_53

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in ``[0, high)``."""
        if high < 1:
            raise ParameterError("high must be positive")
        u = self.uniform(n)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals in float64 via the Box-Muller transform."""
        n = int(n)
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        radius = np.sqrt(-2.0 * np.log(u[:half]))
        angle = 2.0 * np.pi * u[half:]
        z = np.empty(2 * half)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def laplace(self, n: int) -> np.ndarray:
        """Unit-scale Laplace variates via the inverse CDF."""
        u = self.uniform(n) - 0.5
        return -np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def torch_seed(self) -> int:
        """A 63-bit seed for torch generators that must be reproducible."""
        return int(self.raw(1)[0] >> np.uint64(1))


def as_rng(rng: "Rng | int | None") -> Rng:
    if isinstance(rng, Rng):
        return rng
    return Rng(0 if rng is None else int(rng))


def sample_gaussian(rng: Rng, sigma: float, n: int) -> np.ndarray:
    """``n`` i.i.d. N(0, sigma^2) draws as float32."""
    if sigma < 0 or not np.isfinite(sigma):
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if n < 1:
        raise ParameterError("n must be at least 1")
    return (sigma * rng.normal(n)).astype(np.float32)


def sample_laplace(rng: Rng, b: float, n: int) -> np.ndarray:
    """``n`` i.i.d. Laplace(0, b) draws as float32; ``b`` is the scale, not the std."""
    if b < 0 or not np.isfinite(b):
        raise ParameterError(f"Laplace scale must be non-negative, got {b}")
    if n < 1:
        raise ParameterError("n must be at least 1")
    return (b * rng.laplace(n)).astype(np.float32)
