"""Layered gradient vectors and the square-grid adjustment used by the denoiser.

A gradient of total length L is flattened in layout order, standardized and
zero-padded to a ``1 x g x g`` grid where g is the smallest integer with
``g**2 > L``. The grid is held in float64; the few entries that still fail
to round back to their float32 source (values tiny next to the offset) are
kept in a side table, so :func:`restore` undoes :func:`adjust` bit-exactly
as long as those grid entries are left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import LayoutError, ParameterError

ROLES = ("clean", "perturbed", "recovered", "surrogate", "params", "image")
NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class LayerEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int


@dataclass(frozen=True)
class LayerLayout:
    entries: tuple[LayerEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise LayoutError("layout needs at least one layer")
        pos = 0
        for e in self.entries:
            if e.offset != pos or e.length != math.prod(e.shape) or e.length <= 0:
                raise LayoutError(f"layer {e.name!r} is not contiguous or has bad size")
            pos += e.length

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, Sequence[int]]]) -> "LayerLayout":
        entries, pos = [], 0
        for name, shape in shapes:
            shape = tuple(int(d) for d in shape)
            if any(d <= 0 for d in shape):
                raise LayoutError(f"layer {name!r} has a non-positive dimension")
            n = math.prod(shape)
            entries.append(LayerEntry(name, shape, pos, n))
            pos += n
        return cls(tuple(entries))

    @classmethod
    def single(cls, length: int, name: str = "values") -> "LayerLayout":
        return cls.from_shapes([(name, (length,))])

    @property
    def total(self) -> int:
        last = self.entries[-1]
        return last.offset + last.length

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [e.shape for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def slices(self):
        return [slice(e.offset, e.offset + e.length) for e in self.entries]


@dataclass
class GradientVector:
    values: np.ndarray
    layout: LayerLayout
    role: str = "clean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if self.values.size != self.layout.total:
            raise LayoutError(
                f"{self.values.size} values do not fit a layout of length {self.layout.total}"
            )
        if self.role not in ROLES:
            raise ParameterError(f"unknown gradient role {self.role!r}")

    def __len__(self):
        return self.values.size

    def layer(self, i: int) -> np.ndarray:
        e = self.layout.entries[i]
        return self.values[e.offset:e.offset + e.length].reshape(e.shape)

    def layers(self) -> list[np.ndarray]:
        return [self.layer(i) for i in range(len(self.layout))]

    def with_values(self, values, role: str | None = None, **meta) -> "GradientVector":
        merged = {**self.meta, **meta}
        return GradientVector(values, self.layout, role or self.role, merged)


@dataclass
class AdjustedGrid:
    grid: np.ndarray  # (1, g, g) float64
    length: int
    scale: float
    offset: float
    # entries whose float64 standardized value does not round back to the
    # float32 source: index -> (grid value, exact value)
    exact: dict = field(default_factory=dict, repr=False)

    @property
    def side(self) -> int:
        return self.grid.shape[-1]

    @property
    def padding(self) -> int:
        return self.side * self.side - self.length

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)

    def with_grid(self, grid) -> "AdjustedGrid":
        grid = np.asarray(grid, dtype=np.float64).reshape(1, self.side, self.side)
        return AdjustedGrid(grid, self.length, self.scale, self.offset, dict(self.exact))


def grid_side(length: int, strict: bool = True) -> int:
    """Smallest g with ``g*g > length`` (or ``>=`` when ``strict`` is False)."""
    if length < 1:
        raise ParameterError("length must be at least 1")
    g = math.isqrt(length)
    if g * g < length or (strict and g * g == length):
        g += 1
    return g


def normalize(v, floor: float = NORM_FLOOR):
    """Standardize ``v``: returns ``(scaled, scale, offset)`` in float64."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ParameterError("cannot normalize an empty vector")
    offset = float(np.mean(v))
    scale = max(float(np.std(v)), floor)
    return (v - offset) / scale, scale, offset


def denormalize(scaled, scale: float, offset: float) -> np.ndarray:
    return np.asarray(scaled, dtype=np.float64) * scale + offset


def adjust(g: GradientVector, *, scale: float | None = None, offset: float | None = None,
           strict: bool = True) -> AdjustedGrid:
    """Flatten, standardize and zero-pad a gradient onto its square grid.

    ``scale``/``offset`` override the per-gradient statistics, which the
    denoiser uses to express a perturbed gradient in clean-signal units.
    """
    v = g.values.astype(np.float64)
    if scale is None or offset is None:
        _, s, o = normalize(v)
        scale = s if scale is None else scale
        offset = o if offset is None else offset
    if not scale > 0:
        raise ParameterError("normalization scale must be positive")
    side = grid_side(v.size, strict)
    flat = np.zeros(side * side)
    body = (v - offset) / scale
    flat[:v.size] = body
    back = denormalize(body, scale, offset).astype(np.float32)
    lossy = np.flatnonzero(back != g.values)
    exact = {int(i): (float(body[i]), g.values[i]) for i in lossy}
    return AdjustedGrid(flat.reshape(1, side, side), v.size, float(scale), float(offset), exact)


def restore(grid: AdjustedGrid, layout: LayerLayout, role: str = "recovered") -> GradientVector:
    if layout.total != grid.length:
        raise LayoutError(f"grid holds {grid.length} values but layout needs {layout.total}")
    body = grid.flat()[:grid.length]
    values = denormalize(body, grid.scale, grid.offset).astype(np.float32)
    for i, (z, exact) in grid.exact.items():
        if body[i] == z:
            values[i] = exact
    return GradientVector(values, layout, role)


def stack_grids(grids: Sequence[AdjustedGrid]) -> np.ndarray:
    """(n, g*g) float32 matrix for batched network input."""
    return np.stack([gr.flat() for gr in grids]).astype(np.float32)
