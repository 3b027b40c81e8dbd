"""Contextual awareness measurement over context segments.

The context is cut into fixed-length token segments. Two sample-local vectors
are compared: importance (softmax over per-segment response perplexities;
high perplexity conditioned on a segment alone means the segment mattered
little) and attention (softmax over per-segment mean attention from response
tokens). A high cosine between them means attention concentrates on segments
the response did not need, i.e. the model reads the long context poorly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gateau.errors import SelectionError
from gateau.numerics import cosine_similarity, softmax


@dataclass(frozen=True)
class CamProfile:
    """Per-sample segment profile and its awareness score."""

    sample_id: str
    segment_length: int
    n_segments: int
    importance: tuple[float, ...]
    attention: tuple[float, ...]
    cas: float

    def __post_init__(self) -> None:
        if self.n_segments <= 0:
            raise SelectionError(f"sample {self.sample_id}: n_segments must be positive")
        if len(self.importance) != self.n_segments or len(self.attention) != self.n_segments:
            raise SelectionError(
                f"sample {self.sample_id}: importance/attention must have {self.n_segments} entries"
            )


def importance_vector(segment_ppls: Sequence[float]) -> np.ndarray:
    """Softmax over per-segment perplexities of the response.

    The inputs are perplexities (exp of mean NLL), not NLLs; wide perplexity
    spreads legitimately saturate the softmax.
    """
    if len(segment_ppls) == 0:
        raise SelectionError("importance requires at least one segment")
    for v in segment_ppls:
        if not math.isfinite(v) or v <= 0:
            raise SelectionError(f"segment perplexities must be finite and positive, got {v}")
    return softmax(segment_ppls)


def attention_vector(segment_attention_means: Sequence[float]) -> np.ndarray:
    """Softmax over per-segment mean attention weights."""
    if len(segment_attention_means) == 0:
        raise SelectionError("attention requires at least one segment")
    for v in segment_attention_means:
        if not math.isfinite(v) or v < 0:
            raise SelectionError(f"attention means must be finite and nonnegative, got {v}")
    return softmax(segment_attention_means)


def contextual_awareness(importance: Sequence[float], attention: Sequence[float]) -> float:
    """Cosine of the two softmax-normalized vectors; in (0, 1] by positivity."""
    value = cosine_similarity(importance, attention)
    assert value > 0.0, "softmax outputs are strictly positive; cosine must be too"
    return min(value, 1.0)


def build_profile(
    sample_id: str,
    segment_length: int,
    segment_ppls: Sequence[float],
    segment_attention_means: Sequence[float],
) -> CamProfile:
    if len(segment_ppls) != len(segment_attention_means):
        raise SelectionError(
            f"sample {sample_id}: {len(segment_ppls)} segment perplexities vs "
            f"{len(segment_attention_means)} attention means"
        )
    importance = importance_vector(segment_ppls)
    attention = attention_vector(segment_attention_means)
    return CamProfile(
        sample_id=sample_id,
        segment_length=segment_length,
        n_segments=len(segment_ppls),
        importance=tuple(float(v) for v in importance),
        attention=tuple(float(v) for v in attention),
        cas=contextual_awareness(importance, attention),
    )
