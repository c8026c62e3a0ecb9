"""On-disk formats: gradient files, predictor checkpoints, metric CSVs.

All binary numbers are little-endian. Every file carries the 32-byte config
digest and the seed of the run that produced it.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingArtifactError
from .layout import ROLES, GradientVector, LayerLayout

GRADIENT_MAGIC = b"PGRD"
CHECKPOINT_MAGIC = b"PGDM"
GRADIENT_VERSION = 1
CHECKPOINT_VERSION = 1
DIGEST_BYTES = 32
NO_DIGEST = bytes(DIGEST_BYTES)

_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_artifact(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"required artifact {str(path)!r} does not exist")
    return path.read_bytes()


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.what} truncated", self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what} truncated", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, n: int) -> np.ndarray:
        need = 4 * n
        if len(self.buf) - self.pos != need:
            raise FormatError(f"{self.what} payload holds {len(self.buf) - self.pos} bytes, "
                              f"expected {need}", self.pos)
        return np.frombuffer(self.buf, dtype="<f4", count=n, offset=self.pos).astype(np.float32)


@dataclass
class GradientFile:
    """One or more vectors sharing a layout and role."""

    layout: LayerLayout
    role: str
    values: np.ndarray  # (count, L) float32
    digest: bytes = NO_DIGEST
    seed: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim == 1:
            self.values = self.values[None]
        if self.values.shape[1] != self.layout.total:
            raise FormatError(f"vectors of length {self.values.shape[1]} do not fit the layout")
        if self.role not in ROLES:
            raise FormatError(f"unknown role {self.role!r}")
        if len(self.digest) != DIGEST_BYTES:
            raise FormatError("config digest must be 32 bytes")

    @classmethod
    def from_vectors(cls, vectors, digest: bytes = NO_DIGEST, seed: int = 0) -> "GradientFile":
        vectors = list(vectors)
        if not vectors:
            raise FormatError("no vectors to store")
        first = vectors[0]
        for v in vectors[1:]:
            if v.layout != first.layout or v.role != first.role:
                raise FormatError("all vectors in one file must share layout and role")
        return cls(first.layout, first.role, np.stack([v.values for v in vectors]), digest, seed)

    def __len__(self):
        return self.values.shape[0]

    def vector(self, i: int) -> GradientVector:
        return GradientVector(self.values[i].copy(), self.layout, self.role)

    def vectors(self) -> list[GradientVector]:
        return [self.vector(i) for i in range(len(self))]

    def to_bytes(self) -> bytes:
        parts = [GRADIENT_MAGIC, struct.pack("<HI", GRADIENT_VERSION, len(self.layout))]
        for e in self.layout.entries:
            name = e.name.encode("utf-8")
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack(f"<B{len(e.shape)}I", len(e.shape), *e.shape))
        parts.append(struct.pack("<BI", ROLES.index(self.role), len(self)))
        parts.append(self.digest)
        parts.append(struct.pack("<Q", self.seed))
        parts.append(self.values.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GradientFile":
        r = _Reader(buf, "gradient file")
        if r.bytes(4) != GRADIENT_MAGIC:
            raise FormatError("bad gradient file magic", 0)
        version, n_layers = r.take("<HI")
        if version != GRADIENT_VERSION:
            raise FormatError(f"unsupported gradient file version {version}", 4)
        shapes = []
        for _ in range(n_layers):
            (name_len,) = r.take("<H")
            name = r.bytes(name_len).decode("utf-8")
            (rank,) = r.take("<B")
            shapes.append((name, r.take(f"<{rank}I")))
        at = r.pos
        role, count = r.take("<BI")
        if role >= len(ROLES):
            raise FormatError(f"unknown role byte {role}", at)
        digest = r.bytes(DIGEST_BYTES)
        (seed,) = r.take("<Q")
        try:
            layout = LayerLayout.from_shapes(shapes)
        except ValueError as exc:
            raise FormatError(f"invalid layer table: {exc}", 10) from exc
        values = r.floats(count * layout.total).reshape(count, layout.total)
        return cls(layout, ROLES[role], values, digest, seed)

    def save(self, path) -> Path:
        return atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "GradientFile":
        return cls.from_bytes(read_artifact(path))


@dataclass
class Checkpoint:
    side: int
    conditional: bool
    T: int
    beta_start: float
    beta_end: float
    width: int
    blocks: int
    time_dim: int
    params: np.ndarray
    digest: bytes = NO_DIGEST
    seed: int = 0

    _HEAD = "<HIBIddIII"

    def to_bytes(self) -> bytes:
        params = np.ascontiguousarray(self.params, dtype="<f4")
        head = struct.pack(self._HEAD, CHECKPOINT_VERSION, self.side, int(self.conditional), self.T,
                           self.beta_start, self.beta_end, self.width, self.blocks, self.time_dim)
        return b"".join([CHECKPOINT_MAGIC, head, self.digest, struct.pack("<QQ", self.seed, params.size),
                         params.tobytes()])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        r = _Reader(buf, "checkpoint")
        if r.bytes(4) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic", 0)
        version, side, cond, T, b0, b1, width, blocks, time_dim = r.take(cls._HEAD)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        digest = r.bytes(DIGEST_BYTES)
        seed, count = r.take("<QQ")
        params = r.floats(count)
        return cls(side, bool(cond), T, b0, b1, width, blocks, time_dim, params, digest, seed)

    def save(self, path) -> Path:
        return atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(read_artifact(path))


def save_predictor(predictor, path, digest: bytes = NO_DIGEST, seed: int = 0) -> Path:
    s = predictor.schedule
    ckpt = Checkpoint(predictor.side, predictor.conditional, s.T, s.beta_start, s.beta_end,
                      predictor.width, predictor.blocks, predictor.time_dim,
                      predictor.parameters_flat(), digest, seed)
    return ckpt.save(path)


def load_predictor(path):
    """Rebuild a predictor from a checkpoint; returns ``(predictor, checkpoint)``."""
    from .diffusion import NoisePredictor, TrainConfig, make_schedule

    ckpt = Checkpoint.load(path)
    sched = make_schedule(ckpt.T, ckpt.beta_start, ckpt.beta_end)
    cfg = TrainConfig(width=ckpt.width, blocks=ckpt.blocks, time_dim=ckpt.time_dim)
    predictor = NoisePredictor.create(ckpt.side, sched, cfg, ckpt.conditional, seed=0)
    predictor.load_flat(ckpt.params)
    return predictor, ckpt
