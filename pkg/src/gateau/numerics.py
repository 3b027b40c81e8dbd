"""Shared numeric primitives: stable softmax, cosine similarity, quantiles."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def softmax(values: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """Softmax with max-shift stabilization.

    Large spreads saturate the output toward 0/1 in float64; that is the
    correct limit of the formula, not an error. temperature rescales inputs
    before exponentiation (1.0 leaves the formula untouched).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax requires finite inputs")
    scaled = arr / temperature
    shifted = scaled - scaled.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape or va.ndim != 1:
        raise ValueError("cosine similarity requires two equal-length vectors")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(va, vb) / (na * nb))


def round_half_away_from_zero(x: float) -> int:
    """round() half-away-from-zero; Python's builtin rounds half to even."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def nearest_rank_quantiles(values: Sequence[float], qs: Sequence[float]) -> list[float]:
    """Nearest-rank quantiles (no interpolation): q-th value at ceil(q*n), 1-based."""
    if len(values) == 0:
        raise ValueError("quantiles of an empty sequence")
    ordered = sorted(values)
    n = len(ordered)
    out = []
    for q in qs:
        if not 0.0 <= q <= 1.0:
            raise ValueError(f"quantile must be in [0,1], got {q}")
        idx = max(1, math.ceil(q * n))
        out.append(ordered[idx - 1])
    return out
