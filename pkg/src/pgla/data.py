"""Private client data and attacker probe data."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .rng import Rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class ProbeDataset:
    images: np.ndarray  # (n, prod(shape)) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    shape: tuple[int, ...]
    source: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32).reshape(len(self.images), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.images) == 0:
            raise InputError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.shape[1] != math.prod(self.shape):
            raise InputError(f"images do not match shape {self.shape}")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    def check_classes(self, classes: int) -> None:
        if self.labels.min() < 0 or self.labels.max() >= classes:
            raise InputError(f"labels outside [0, {classes})")


def _read_header(buf: bytes, magic: int, what: str):
    if len(buf) < 8:
        raise FormatError(f"{what} file too short for an IDX header", len(buf))
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise FormatError(f"bad {what} magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise FormatError(f"{what} header truncated", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, need


def load_idx_dataset(images_path, labels_path, classes: int = 10, limit: int | None = None) -> ProbeDataset:
    """Read an MNIST-style pair of IDX files (unsigned bytes), scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (n, h, w), off = _read_header(img, IDX_IMAGES, "image")
    (m,), loff = _read_header(lab, IDX_LABELS, "label")
    if n != m:
        raise InputError(f"image file holds {n} items but label file holds {m}")
    if len(img) < off + n * h * w:
        raise FormatError("image payload truncated", len(img))
    if len(lab) < loff + m:
        raise FormatError("label payload truncated", len(lab))
    count = n if limit is None else min(n, int(limit))
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * h * w, offset=off)
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=loff).astype(np.int64)
    data = ProbeDataset(pixels.reshape(count, h * w).astype(np.float32) / 255.0, labels,
                        (1, h, w), "idx-file")
    data.check_classes(classes)
    return data


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx_dataset` for (n, h, w) uint8 images."""
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, h, w) + images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, labels.size) + labels.tobytes())


def _smooth_field(rng: Rng, h: int, w: int, passes: int = 3) -> np.ndarray:
    f = rng.uniform((h + 4) * (w + 4)).reshape(h + 4, w + 4)
    for _ in range(passes):
        f = (f + np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1)) / 5.0
    f = f[2:h + 2, 2:w + 2]
    return (f - f.min()) / (f.max() - f.min())


def synthetic_dataset(n: int, shape=(1, 16, 16), classes: int = 10, seed: int = 0,
                      noise: float = 0.1) -> ProbeDataset:
    """Seeded stand-in for an image dataset: one smooth template per class plus noise."""
    if n < 1:
        raise InputError("n must be positive")
    c, h, w = shape
    base = Rng(seed).derive(0x5EED)
    templates = np.stack([
        np.stack([_smooth_field(base.derive(k, ch), h, w) for ch in range(c)]).reshape(-1)
        for k in range(classes)
    ])
    draw = base.derive(1 << 20)
    labels = draw.integers(classes, n)
    jitter = noise * draw.normal(n * c * h * w).reshape(n, -1)
    images = np.clip(templates[labels] + jitter, 0.0, 1.0)
    return ProbeDataset(images, labels, tuple(shape), "synthetic")


def random_probe_dataset(n: int, shape, classes: int, rng: Rng) -> ProbeDataset:
    """Uniform-noise images with uniform labels; needs no outside data."""
    size = math.prod(shape)
    images = rng.uniform(n * size).reshape(n, size)
    labels = rng.integers(classes, n)
    return ProbeDataset(images, labels, tuple(shape), "uniform")
