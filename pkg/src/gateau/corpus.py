"""Corpus ingestion, validation, scoring-time truncation, and training-set mixing.

Record format: one JSON object per line with fields
{id, context, instruction, response, meta}. Short multi-turn data may instead
carry a `turns` array, which is flattened deterministically on ingestion
(instruction = prior turns joined with role tags, response = final assistant
turn).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence, TYPE_CHECKING

from gateau.errors import CorpusError

if TYPE_CHECKING:
    from gateau.ranker import SelectionManifest

KINDS = ("long", "short")


@dataclass(frozen=True)
class Sample:
    """One instruction-following record: long context, instruction, response."""

    id: str
    context: str
    instruction: str
    response: str
    kind: str
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("sample id must be nonempty")
        if self.kind not in KINDS:
            raise CorpusError(f"sample {self.id}: kind must be one of {KINDS}, got {self.kind!r}")
        if not self.response:
            raise CorpusError(f"sample {self.id}: response must be nonempty")
        if self.kind == "long" and not self.context:
            raise CorpusError(f"sample {self.id}: long samples require a nonempty context")


@dataclass(frozen=True)
class TruncationPolicy:
    max_tokens: int
    side: str = "left"
    unit: str = "backend_tokens"

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise CorpusError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.side not in ("left", "right"):
            raise CorpusError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.unit != "backend_tokens":
            raise CorpusError(f"unsupported truncation unit: {self.unit!r}")

    def tag(self) -> str:
        """Stable identity used in cache keys and fingerprints."""
        return f"{self.side}:{self.max_tokens}"


@dataclass(frozen=True)
class MixSpec:
    """How to mix selected long samples with a short corpus."""

    short_source: str
    short_fraction: float
    long_ratio: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.short_fraction <= 1.0):
            raise CorpusError(f"short_fraction must be in [0,1], got {self.short_fraction}")
        if self.long_ratio is not None and not (0.0 < self.long_ratio <= 1.0):
            raise CorpusError(f"long_ratio must be in (0,1], got {self.long_ratio}")


def flatten_turns(turns: Sequence[dict]) -> tuple[str, str]:
    """Flatten a multi-turn conversation to (instruction, response).

    The final turn must be an assistant turn and becomes the response; all
    prior turns are joined with role tags in order.
    """
    if not turns:
        raise CorpusError("turns must be nonempty")
    parts = []
    for turn in turns:
        role = turn.get("role")
        text = turn.get("text")
        if not isinstance(role, str) or not isinstance(text, str):
            raise CorpusError("each turn requires string fields 'role' and 'text'")
        parts.append((role, text))
    last_role, last_text = parts[-1]
    if last_role != "assistant":
        raise CorpusError(f"final turn must have role 'assistant', got {last_role!r}")
    instruction = "\n".join(f"{role}: {text}" for role, text in parts[:-1])
    return instruction, last_text


def _parse_record(obj: dict, kind: str) -> Sample:
    if "id" not in obj or not isinstance(obj["id"], str):
        raise CorpusError("record requires a string 'id'")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in meta.items()
    ):
        raise CorpusError(f"record {obj['id']}: meta must be a string-to-string map")
    if "turns" in obj and "instruction" not in obj and "response" not in obj:
        instruction, response = flatten_turns(obj["turns"])
    else:
        instruction = obj.get("instruction", "")
        response = obj.get("response", "")
        if not isinstance(instruction, str) or not isinstance(response, str):
            raise CorpusError(f"record {obj['id']}: instruction/response must be strings")
    context = obj.get("context", "")
    if not isinstance(context, str):
        raise CorpusError(f"record {obj['id']}: context must be a string")
    return Sample(
        id=obj["id"],
        context=context,
        instruction=instruction,
        response=response,
        kind=kind,
        meta={str(k): str(v) for k, v in meta.items()},
    )


def load_corpus(
    path: str | Path,
    kind: str,
    *,
    strict: bool = False,
    skip_log: str | Path | None = None,
) -> Iterator[Sample]:
    """Stream validated Samples from a record file, in file order.

    Empty-response records are always skipped (counted in the skip log).
    Other malformed lines are skipped with a report, or fatal when strict.
    Duplicate ids are always fatal.
    """
    path = Path(path)
    if kind not in KINDS:
        raise CorpusError(f"kind must be one of {KINDS}, got {kind!r}")
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")

    skips: list[str] = []
    seen: dict[str, int] = {}
    try:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj: object = None
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise CorpusError("record is not an object")
                    sample = _parse_record(obj, kind)
                except (json.JSONDecodeError, CorpusError) as exc:
                    empty_response = (
                        isinstance(obj, dict)
                        and isinstance(obj.get("id"), str)
                        and obj.get("response", "") == ""
                        and "turns" not in obj
                    )
                    if not empty_response and strict:
                        raise CorpusError(f"{path}:{lineno}: {exc}") from None
                    reason = "empty response" if empty_response else str(exc)
                    skips.append(f"{path}:{lineno}: skipped: {reason}")
                    continue
                if sample.id in seen:
                    raise CorpusError(
                        f"duplicate id {sample.id!r} at {path}:{lineno} "
                        f"(first seen at line {seen[sample.id]})"
                    )
                seen[sample.id] = lineno
                yield sample
    finally:
        if skips and skip_log is not None:
            with Path(skip_log).open("a", encoding="utf-8") as log:
                for entry in skips:
                    log.write(entry + "\n")


class TokenizerInfo(Protocol):
    """Token-space operations supplied by (or derived from) a scoring backend."""

    def count_tokens(self, text: str) -> int: ...

    def keep_trailing_tokens(self, text: str, n: int) -> str:
        """Return a suffix of text whose token count is <= n (exact when possible)."""
        ...


class WhitespaceTokenizerInfo:
    """Exact token operations for the whitespace-integer token space."""

    def count_tokens(self, text: str) -> int:
        return len(text.split())

    def keep_trailing_tokens(self, text: str, n: int) -> str:
        # Returns a literal character suffix so the result can be reproduced
        # from the original text plus one cached offset.
        if n <= 0:
            return ""
        starts = [m.start() for m in re.finditer(r"\S+", text)]
        if len(starts) <= n:
            return text
        return text[starts[len(starts) - n]:]


@dataclass(frozen=True)
class TruncationOutcome:
    sample: Sample | None
    dropped_context_tokens: int
    unscoreable_reason: str | None = None

    @property
    def unscoreable(self) -> bool:
        return self.unscoreable_reason is not None


def truncate_for_scoring(
    sample: Sample,
    policy: TruncationPolicy,
    tokenizer_info: TokenizerInfo,
) -> TruncationOutcome:
    """Left-truncate the context so the full sample fits the token budget.

    Instruction and response text are never altered. A sample whose
    instruction + response alone exceed the budget is flagged unscoreable.
    """
    if policy.side != "left":
        raise CorpusError("scoring-time truncation requires side=left")
    n_ctx = tokenizer_info.count_tokens(sample.context)
    n_other = tokenizer_info.count_tokens(sample.instruction) + tokenizer_info.count_tokens(
        sample.response
    )
    if n_ctx + n_other <= policy.max_tokens:
        return TruncationOutcome(sample=sample, dropped_context_tokens=0)
    if n_other > policy.max_tokens:
        return TruncationOutcome(
            sample=None,
            dropped_context_tokens=0,
            unscoreable_reason=(
                f"instruction+response span {n_other} tokens, over the "
                f"{policy.max_tokens}-token budget"
            ),
        )
    keep = policy.max_tokens - n_other
    new_context = tokenizer_info.keep_trailing_tokens(sample.context, keep)
    # keep_trailing_tokens may be approximate for non-local tokenizers; trim
    # further (never below zero kept tokens) until the budget holds.
    n_new = tokenizer_info.count_tokens(new_context)
    while n_new > keep:
        new_context = tokenizer_info.keep_trailing_tokens(new_context, n_new - 1)
        n_new = tokenizer_info.count_tokens(new_context)
    truncated = Sample(
        id=sample.id,
        context=new_context,
        instruction=sample.instruction,
        response=sample.response,
        kind=sample.kind,
        meta=sample.meta,
    )
    return TruncationOutcome(sample=truncated, dropped_context_tokens=n_ctx - n_new)


def sample_to_record(sample: Sample) -> str:
    obj = {
        "id": sample.id,
        "context": sample.context,
        "instruction": sample.instruction,
        "response": sample.response,
        "meta": sample.meta,
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class MixSummary:
    long_count: int
    short_count: int

    @property
    def total(self) -> int:
        return self.long_count + self.short_count


def mix_training_set(
    manifest: "SelectionManifest",
    long_corpus: str | Path,
    spec: MixSpec,
    out: str | Path,
    *,
    strict: bool = False,
) -> MixSummary:
    """Emit the selected long samples plus a prefix fraction of the short corpus.

    Output order is deterministic: long samples by rank, then short samples in
    file order. Every record is tagged with its origin.
    """
    if spec.long_ratio is not None and not math.isclose(spec.long_ratio, manifest.cut_ratio):
        raise CorpusError(
            f"mix long_ratio {spec.long_ratio} does not match manifest cut_ratio "
            f"{manifest.cut_ratio}"
        )
    by_id = {s.id: s for s in load_corpus(long_corpus, "long", strict=strict)}
    for sid in manifest.selected_ids:
        if sid not in by_id:
            raise CorpusError(f"manifest id {sid!r} not found in long corpus {long_corpus}")

    short_samples = list(load_corpus(spec.short_source, "short", strict=strict))
    n_short = math.floor(spec.short_fraction * len(short_samples))

    out = Path(out)
    with out.open("w", encoding="utf-8") as fh:
        for rank, sid in enumerate(manifest.selected_ids, start=1):
            s = by_id[sid]
            tagged = Sample(
                id=s.id,
                context=s.context,
                instruction=s.instruction,
                response=s.response,
                kind=s.kind,
                meta={**s.meta, "origin": "long", "rank": str(rank)},
            )
            fh.write(sample_to_record(tagged) + "\n")
        for s in short_samples[:n_short]:
            tagged = Sample(
                id=s.id,
                context=s.context,
                instruction=s.instruction,
                response=s.response,
                kind=s.kind,
                meta={**s.meta, "origin": "short"},
            )
            fh.write(sample_to_record(tagged) + "\n")
    return MixSummary(long_count=len(manifest.selected_ids), short_count=n_short)
