"""Similarity and fidelity metrics used in every report."""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError

PSNR_CAP_DB = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("cosine similarity of a zero-norm vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def mse(reference, test) -> float:
    a, b = _pair(reference, test)
    return float(np.mean((a - b) ** 2))


def psnr(reference, test, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    if not peak > 0:
        raise ParameterError(f"peak must be positive, got {peak}")
    err = mse(reference, test)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / err))


def gradient_peak(reference) -> float:
    """Dynamic range of a gradient, used as the PSNR peak for gradient signals."""
    ref = np.asarray(reference, dtype=np.float64)
    peak = float(ref.max() - ref.min())
    if peak <= 0.0:
        raise UndefinedMetricError("constant reference has no dynamic range")
    return peak


def psnr_gradient(reference, test) -> float:
    return psnr(reference, test, gradient_peak(reference))


def label_accuracy(predicted, truth) -> float:
    p = np.asarray(predicted).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError("label count mismatch")
    if p.size == 0:
        raise UndefinedMetricError("no labels to compare")
    return float(np.mean(p == t))
