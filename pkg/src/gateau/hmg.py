"""Homologous-pair perplexity guidance.

Two backends sharing one token space but differing in visible context window
score the same responses. A sample whose response the short-window model
struggles with, but the long-window model handles, depends on distant context;
the normalized perplexity difference ranks exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from gateau.errors import ConfigError, SelectionError
from gateau.numerics import softmax
from gateau.protocol import BackendDescriptor


@dataclass(frozen=True)
class HmgRecord:
    """Per-sample guidance ledger for one homologous pair."""

    sample_id: str
    ppl_a: float
    ppl_b: float
    norm_a: float
    norm_b: float
    hmp: float


def perplexity(mean_nll: float) -> float:
    """exp of the mean per-token NLL of the response."""
    if not math.isfinite(mean_nll):
        raise ValueError(f"mean_nll must be finite, got {mean_nll}")
    return math.exp(mean_nll)


def check_homologous(weak: BackendDescriptor, strong: BackendDescriptor) -> None:
    """The pair must share a token space, with the weak window strictly shorter.

    Perplexities from different tokenizers are not comparable, and a weak
    backend seeing at least as much context as the strong one measures nothing.
    """
    if weak.tokenizer_fingerprint != strong.tokenizer_fingerprint:
        raise ConfigError(
            "backends are not homologous: tokenizer fingerprints differ "
            f"({weak.tokenizer_fingerprint!r} vs {strong.tokenizer_fingerprint!r})"
        )
    if weak.context_window >= strong.context_window:
        raise ConfigError(
            "backends are not homologous: weak backend window "
            f"{weak.context_window} is not smaller than strong backend window "
            f"{strong.context_window}"
        )


def compute_hmg(
    ppls: Mapping[str, tuple[float, float]],
    *,
    temperature: float = 1.0,
    no_norm: bool = False,
) -> list[HmgRecord]:
    """Turn {sample_id: (ppl_weak, ppl_strong)} into guidance records.

    Normalization is a softmax over the whole scored population per backend,
    so records are only meaningful relative to the population they were
    computed with. With no_norm the raw perplexities stand in for the
    normalized values (an ablation switch); the hmp = norm_a - norm_b
    identity still holds, but values leave (0, 1).

    Output is ordered by ascending sample id.
    """
    if not ppls:
        raise SelectionError("no scored samples to normalize")
    ids = sorted(ppls)
    ppl_a = [ppls[i][0] for i in ids]
    ppl_b = [ppls[i][1] for i in ids]
    for sid, a, b in zip(ids, ppl_a, ppl_b):
        if not (math.isfinite(a) and math.isfinite(b)) or a <= 0 or b <= 0:
            raise SelectionError(f"sample {sid}: perplexities must be finite and positive")
    if no_norm:
        norm_a, norm_b = ppl_a, ppl_b
    else:
        norm_a = softmax(ppl_a, temperature=temperature).tolist()
        norm_b = softmax(ppl_b, temperature=temperature).tolist()
    return [
        HmgRecord(
            sample_id=sid,
            ppl_a=pa,
            ppl_b=pb,
            norm_a=na,
            norm_b=nb,
            hmp=na - nb,
        )
        for sid, pa, pb, na, nb in zip(ids, ppl_a, ppl_b, norm_a, norm_b)
    ]


def ppl_guidance_scores(ppl_b: Mapping[str, float]) -> list[tuple[str, float]]:
    """Baseline scoring: the strong backend's raw perplexity per sample.

    Higher perplexity means a more challenging sample; ranking happens
    downstream. Ordered by ascending sample id.
    """
    if not ppl_b:
        raise SelectionError("no scored samples")
    out = []
    for sid in sorted(ppl_b):
        v = ppl_b[sid]
        if not math.isfinite(v) or v <= 0:
            raise SelectionError(f"sample {sid}: perplexity must be finite and positive")
        out.append((sid, v))
    return out
