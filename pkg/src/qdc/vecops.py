"""Vector primitives shared by every other module.

All internal arithmetic is float64; float32 appears only at index storage
time. Zero vectors are hard errors everywhere: they indicate upstream
tokenization bugs, never data worth normalizing.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimMismatchError, EmptyListError, ZeroVectorError

ZERO_NORM_EPS = 1e-12


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimMismatchError(f"expected 1-d vector, got shape {arr.shape}")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm. Raises ZeroVectorError below 1e-12."""
    arr = _as_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm}")
    return arr / norm


def cosine_sim(a, b) -> float:
    """Cosine similarity a.b / (|a||b|); both inputs must be nonzero."""
    va = _as_vector(a)
    vb = _as_vector(b)
    if va.shape != vb.shape:
        raise DimMismatchError(f"dims differ: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.dot(va, vb) / (na * nb))


def mean_embedding(vs: Sequence) -> np.ndarray:
    """Component-wise mean, accumulated left to right over the given list.

    The fixed summation order makes downstream drift estimates reproducible
    bit for bit. Output is NOT re-normalized.
    """
    if len(vs) == 0:
        raise EmptyListError("mean of an empty list of vectors")
    first = _as_vector(vs[0])
    acc = first.copy()
    for v in vs[1:]:
        arr = _as_vector(v)
        if arr.shape != first.shape:
            raise DimMismatchError(
                f"dims differ: {arr.shape[0]} vs {first.shape[0]}"
            )
        acc += arr
    return acc / len(vs)
