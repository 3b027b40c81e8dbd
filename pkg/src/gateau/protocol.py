"""Wire protocol between the pipeline and scoring backends.

One UTF-8 JSON object per line. Three message types, discriminated by a
`type` field:

  descriptor  - handshake; the backend announces itself before any scoring
  request     - pipeline -> backend
  response    - backend -> pipeline; errors are carried in-band

Encoding is canonical (sorted keys, compact separators, raw UTF-8) so that
decode followed by encode reproduces a canonical line byte for byte. Absent
optional fields are omitted, not null. Unknown fields are ignored on decode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from gateau.errors import ProtocolError

MODES = ("full_ppl", "segment_ppl", "attention_profile", "tokenize_info")

# Error codes a backend may return in-band.
ERR_BAD_REQUEST = "bad_request"
ERR_INVALID_SEGMENT = "invalid_segment_index"
ERR_UNSCOREABLE = "unscoreable"
ERR_UNSUPPORTED = "unsupported"
ERR_INTERNAL = "internal"


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    context_window: int
    supports_attention: bool
    tokenizer_fingerprint: str

    def __post_init__(self) -> None:
        if self.context_window <= 0:
            raise ProtocolError(f"context_window must be positive, got {self.context_window}")


@dataclass(frozen=True)
class ScoringRequest:
    request_id: str
    mode: str
    context: str = ""
    instruction: str = ""
    response: str = ""
    segment_length: int | None = None
    segment_index: int | None = None

    def __post_init__(self) -> None:
        if not self.request_id:
            raise ProtocolError("request_id must be a non-empty string")
        if self.mode not in MODES:
            raise ProtocolError(f"unknown mode: {self.mode!r}")
        if self.mode in ("segment_ppl", "attention_profile"):
            if self.segment_length is None or self.segment_length <= 0:
                raise ProtocolError(f"mode {self.mode} requires a positive segment_length")
        if self.mode == "segment_ppl":
            if self.segment_index is None or self.segment_index < 0:
                raise ProtocolError("mode segment_ppl requires a non-negative segment_index")


@dataclass(frozen=True)
class ScoringError:
    code: str
    message: str


@dataclass(frozen=True)
class ScoringResponse:
    request_id: str
    token_count_context: int | None = None
    token_count_response: int | None = None
    mean_response_nll: float | None = None
    per_segment_attention: tuple[float, ...] | None = None
    error: ScoringError | None = None

    def __post_init__(self) -> None:
        for label, count in (
            ("token_count_context", self.token_count_context),
            ("token_count_response", self.token_count_response),
        ):
            if count is not None and count < 0:
                raise ProtocolError(f"{label} must be >= 0, got {count}")
        if self.error is None:
            if self.mean_response_nll is not None:
                if not math.isfinite(self.mean_response_nll) or self.mean_response_nll < 0:
                    raise ProtocolError(
                        f"mean_response_nll must be finite and >= 0, got {self.mean_response_nll}"
                    )
            if self.per_segment_attention is not None:
                for a in self.per_segment_attention:
                    if not math.isfinite(a) or a < 0:
                        raise ProtocolError(f"attention entry must be finite and >= 0, got {a}")

    @property
    def ok(self) -> bool:
        return self.error is None


Message = BackendDescriptor | ScoringRequest | ScoringResponse


def _encode_payload(msg: Message) -> dict:
    if isinstance(msg, BackendDescriptor):
        return {
            "type": "descriptor",
            "name": msg.name,
            "context_window": msg.context_window,
            "supports_attention": msg.supports_attention,
            "tokenizer_fingerprint": msg.tokenizer_fingerprint,
        }
    if isinstance(msg, ScoringRequest):
        out = {
            "type": "request",
            "request_id": msg.request_id,
            "mode": msg.mode,
            "context": msg.context,
            "instruction": msg.instruction,
            "response": msg.response,
        }
        if msg.segment_length is not None:
            out["segment_length"] = msg.segment_length
        if msg.segment_index is not None:
            out["segment_index"] = msg.segment_index
        return out
    if isinstance(msg, ScoringResponse):
        out = {"type": "response", "request_id": msg.request_id}
        if msg.token_count_context is not None:
            out["token_count_context"] = msg.token_count_context
        if msg.token_count_response is not None:
            out["token_count_response"] = msg.token_count_response
        if msg.mean_response_nll is not None:
            out["mean_response_nll"] = msg.mean_response_nll
        if msg.per_segment_attention is not None:
            out["per_segment_attention"] = list(msg.per_segment_attention)
        if msg.error is not None:
            out["error"] = {"code": msg.error.code, "message": msg.error.message}
        return out
    raise ProtocolError(f"cannot encode object of type {type(msg).__name__}")


def encode_message(msg: Message) -> str:
    """Canonical single-line encoding, no trailing newline."""
    return json.dumps(_encode_payload(msg), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _require(obj: dict, key: str, kinds: type | tuple) -> object:
    if key not in obj:
        raise ProtocolError(f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kinds) or isinstance(value, bool) and kinds is not bool:
        raise ProtocolError(f"field {key!r} has wrong type: {value!r}")
    return value


def decode_message(line: str) -> Message:
    line = line.strip()
    if not line:
        raise ProtocolError("empty message line")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("message is not an object")

    kind = obj.get("type")
    if kind == "descriptor":
        return BackendDescriptor(
            name=str(_require(obj, "name", str)),
            context_window=int(_require(obj, "context_window", int)),
            supports_attention=bool(_require(obj, "supports_attention", bool)),
            tokenizer_fingerprint=str(_require(obj, "tokenizer_fingerprint", str)),
        )
    if kind == "request":
        seg_len = obj.get("segment_length")
        seg_idx = obj.get("segment_index")
        return ScoringRequest(
            request_id=str(_require(obj, "request_id", str)),
            mode=str(_require(obj, "mode", str)),
            context=str(obj.get("context", "")),
            instruction=str(obj.get("instruction", "")),
            response=str(obj.get("response", "")),
            segment_length=int(seg_len) if seg_len is not None else None,
            segment_index=int(seg_idx) if seg_idx is not None else None,
        )
    if kind == "response":
        error = None
        if "error" in obj and obj["error"] is not None:
            err = obj["error"]
            if not isinstance(err, dict):
                raise ProtocolError("error field must be an object")
            error = ScoringError(code=str(err.get("code", ERR_INTERNAL)), message=str(err.get("message", "")))
        attn = obj.get("per_segment_attention")
        nll = obj.get("mean_response_nll")
        tcc = obj.get("token_count_context")
        tcr = obj.get("token_count_response")
        return ScoringResponse(
            request_id=str(_require(obj, "request_id", str)),
            token_count_context=int(tcc) if tcc is not None else None,
            token_count_response=int(tcr) if tcr is not None else None,
            mean_response_nll=float(nll) if nll is not None else None,
            per_segment_attention=tuple(float(a) for a in attn) if attn is not None else None,
            error=error,
        )
    raise ProtocolError(f"unknown message type: {kind!r}")


def error_response(request_id: str, code: str, message: str) -> ScoringResponse:
    return ScoringResponse(request_id=request_id, error=ScoringError(code=code, message=message))


def segment_bounds(token_count: int, segment_length: int) -> list[tuple[int, int]]:
    """Half-open [start, end) token ranges of consecutive context segments.

    Segments have segment_length tokens each; the final segment keeps whatever
    remains and may be shorter. Both sides of the wire must agree on this rule.
    """
    if segment_length <= 0:
        raise ProtocolError(f"segment_length must be positive, got {segment_length}")
    if token_count < 0:
        raise ProtocolError(f"token_count must be nonnegative, got {token_count}")
    return [
        (start, min(start + segment_length, token_count))
        for start in range(0, token_count, segment_length)
    ]
