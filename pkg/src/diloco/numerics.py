"""Flat parameter-vector arithmetic.

Every piece of training state (parameters, outer gradients, optimizer
moments) is a 1-D float64 numpy array; these helpers are the shared
vocabulary for combining them.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class UndefinedSimilarityError(ValueError):
    pass


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a flat vector, got shape {v.shape}")
    return v


def _check_same(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def axpy(y, a: float, x) -> np.ndarray:
    """Return ``y + a * x`` as a new vector."""
    y, x = as_vector(y), as_vector(x)
    _check_same(y, x)
    return y + float(a) * x


def weighted_mean(vs: Sequence, ws: Sequence[float]) -> np.ndarray:
    """``sum(w_i * v_i) / sum(w_i)``, accumulated in ascending index order."""
    if len(vs) == 0:
        raise ValueError("weighted_mean of an empty sequence")
    if len(vs) != len(ws):
        raise ValueError(f"{len(vs)} vectors but {len(ws)} weights")
    weights = [float(w) for w in ws]
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ValueError("weights must be finite and nonnegative")
    total = 0.0
    for w in weights:
        total += w
    if total <= 0:
        raise ValueError("weights sum to zero")
    first = as_vector(vs[0])
    acc = weights[0] * first
    for w, v in zip(weights[1:], vs[1:]):
        v = as_vector(v)
        _check_same(first, v)
        acc += w * v
    return acc / total


def dot(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    return kernels.dot(np.ascontiguousarray(x), np.ascontiguousarray(y))


def l2_norm(x) -> float:
    x = as_vector(x)
    return math.sqrt(kernels.dot(np.ascontiguousarray(x), np.ascontiguousarray(x)))


def cosine_similarity(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    _check_same(x, y)
    nx, ny = l2_norm(x), l2_norm(y)
    if nx == 0.0 or ny == 0.0:
        raise UndefinedSimilarityError("cosine similarity with a zero vector")
    c = dot(x, y) / (nx * ny)
    return min(1.0, max(-1.0, c))


def all_finite(x) -> bool:
    return bool(np.isfinite(x).all())
