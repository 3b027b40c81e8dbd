"""CopyLM: a deterministic closed-form language model used as a scoring backend.

CopyLM exists so the whole pipeline can be verified end to end without a real
model. It behaves like a causal LM with a controllable ability to "copy" from
recent input:

  P(v | prefix) = (1 + beta * [v in window]) / (V + beta * M)

where `window` is the last W tokens of the prefix (the whole prefix when W is
unbounded) and M is the number of distinct tokens in that window. Every
response token is scored against the prefix (context + instruction + earlier
response tokens), so the mean response NLL has an exact closed form that tests
can recompute independently.

The mock attention profile is similarly exact: for each response token, the
unnormalized weight on a context position is 1 + gamma when the context token
equals the response token and 1 otherwise, normalized over context positions
only, then averaged over response positions. The visibility window W does not
affect attention.

Token space is whitespace-separated non-negative integers, one token each;
every token must be < V so the distribution sums to exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from gateau.errors import ProtocolError

# Stand-in for an unbounded visibility window in integer-valued descriptors.
UNBOUNDED_WINDOW = 2**31


@dataclass(frozen=True)
class CopyLMParams:
    """Closed-form model parameters.

    window=None means the whole prefix is visible.
    """

    vocab_size: int
    copy_bonus: float = 0.0
    window: int | None = None
    attention_bonus: float = 0.0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.copy_bonus < 0:
            raise ValueError("copy_bonus must be >= 0")
        if self.attention_bonus < 0:
            raise ValueError("attention_bonus must be >= 0")
        if self.window is not None and self.window <= 0:
            raise ValueError("window must be a positive integer or None")

    @property
    def context_window(self) -> int:
        return self.window if self.window is not None else UNBOUNDED_WINDOW


class TokenizeError(ProtocolError):
    """Text is not valid whitespace-separated integer tokens."""


def tokenize(text: str) -> list[int]:
    """Split text into integer tokens; empty/whitespace-only text is zero tokens."""
    tokens: list[int] = []
    for piece in text.split():
        try:
            value = int(piece)
        except ValueError:
            raise TokenizeError(f"not an integer token: {piece!r}") from None
        if value < 0:
            raise TokenizeError(f"negative token: {piece!r}")
        tokens.append(value)
    return tokens


def detokenize(tokens: list[int]) -> str:
    return " ".join(str(t) for t in tokens)


def tokenizer_fingerprint(vocab_size: int) -> str:
    """Identity of the mock token space; backends sharing a vocab are comparable."""
    return f"ws-int:{vocab_size}"


def _check_vocab(params: CopyLMParams, tokens: list[int], what: str) -> None:
    for t in tokens:
        if t >= params.vocab_size:
            raise TokenizeError(
                f"{what} token {t} outside vocabulary of size {params.vocab_size}"
            )


def _token_prob_unchecked(params: CopyLMParams, prefix: list[int], token: int) -> float:
    window = prefix if params.window is None else prefix[-params.window :]
    distinct = set(window)
    numer = 1.0 + (params.copy_bonus if token in distinct else 0.0)
    denom = params.vocab_size + params.copy_bonus * len(distinct)
    return numer / denom


def token_prob(params: CopyLMParams, prefix: list[int], token: int) -> float:
    """P(token | prefix) under the copy model."""
    # Out-of-vocabulary tokens would silently break the sum-to-one property.
    _check_vocab(params, prefix, "prefix")
    _check_vocab(params, [token], "target")
    return _token_prob_unchecked(params, prefix, token)


def response_mean_nll(params: CopyLMParams, prefix: list[int], response: list[int]) -> float:
    """Mean negative log-probability of the response given a fixed prefix.

    Each response token is conditioned on prefix + the response tokens before
    it, matching teacher-forced scoring.
    """
    if not response:
        raise ValueError("cannot score an empty response")
    _check_vocab(params, prefix, "prefix")
    _check_vocab(params, response, "response")
    total = 0.0
    running = list(prefix)
    for y in response:
        total += -math.log(_token_prob_unchecked(params, running, y))
        running.append(y)
    return total / len(response)


def attention_segment_means(
    params: CopyLMParams,
    context: list[int],
    response: list[int],
    segment_ranges: list[tuple[int, int]],
) -> list[float]:
    """Per-segment attention means, pre-normalization.

    For response token y: weight on context position j is
    (1 + gamma * [c_j == y]) / Z with Z summing over all context positions.
    Entry i is the mean over positions in segment i of the weights averaged
    over response positions.
    """
    if not context:
        raise ValueError("attention undefined for empty context")
    if not response:
        raise ValueError("attention undefined for empty response")
    _check_vocab(params, context, "context")
    _check_vocab(params, response, "response")

    gamma = params.attention_bonus
    # Averaged over response positions, one weight per context position.
    mean_weights = [0.0] * len(context)
    for y in response:
        raw = [1.0 + (gamma if c == y else 0.0) for c in context]
        z = sum(raw)
        for j, w in enumerate(raw):
            mean_weights[j] += (w / z) / len(response)

    means: list[float] = []
    for start, end in segment_ranges:
        chunk = mean_weights[start:end]
        means.append(sum(chunk) / len(chunk))
    return means
