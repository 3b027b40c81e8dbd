"""Line-protocol codec for talking to the sample-scoring pipeline.

This package is a standalone server; its only coupling to the pipeline is
this wire format, so the codec is implemented here independently. One UTF-8
JSON object per line, `type` field selects the message kind:

  descriptor  - the server announces itself as its first line
  request     - client -> server
  response    - server -> client, errors carried in-band

Lines are canonical JSON (sorted keys, compact separators, raw UTF-8), absent
optional fields are omitted, and unknown fields are ignored on decode, so a
decode/encode round trip of any canonical line is byte-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass


class WireError(Exception):
    """A message violated the wire contract."""


REQUEST_MODES = ("full_ppl", "segment_ppl", "attention_profile", "tokenize_info")

ERR_BAD_REQUEST = "bad_request"
ERR_INVALID_SEGMENT = "invalid_segment_index"
ERR_UNSCOREABLE = "unscoreable"
ERR_UNSUPPORTED = "unsupported"
ERR_INTERNAL = "internal"


@dataclass(frozen=True)
class Descriptor:
    name: str
    context_window: int
    supports_attention: bool
    tokenizer_fingerprint: str

    def __post_init__(self) -> None:
        if self.context_window <= 0:
            raise WireError(f"context_window must be positive, got {self.context_window}")


@dataclass(frozen=True)
class Request:
    request_id: str
    mode: str
    context: str = ""
    instruction: str = ""
    response: str = ""
    segment_length: int | None = None
    segment_index: int | None = None

    def __post_init__(self) -> None:
        if not self.request_id:
            raise WireError("request_id must be a non-empty string")
        if self.mode not in REQUEST_MODES:
            raise WireError(f"unknown mode: {self.mode!r}")
        if self.mode in ("segment_ppl", "attention_profile"):
            if self.segment_length is None or self.segment_length <= 0:
                raise WireError(f"mode {self.mode} requires a positive segment_length")
        if self.mode == "segment_ppl":
            if self.segment_index is None or self.segment_index < 0:
                raise WireError("mode segment_ppl requires a non-negative segment_index")


@dataclass(frozen=True)
class WireFault:
    code: str
    message: str


@dataclass(frozen=True)
class Response:
    request_id: str
    token_count_context: int | None = None
    token_count_response: int | None = None
    mean_response_nll: float | None = None
    per_segment_attention: tuple[float, ...] | None = None
    error: WireFault | None = None

    def __post_init__(self) -> None:
        for label, count in (
            ("token_count_context", self.token_count_context),
            ("token_count_response", self.token_count_response),
        ):
            if count is not None and count < 0:
                raise WireError(f"{label} must be >= 0, got {count}")
        if self.error is None:
            if self.mean_response_nll is not None and (
                not math.isfinite(self.mean_response_nll) or self.mean_response_nll < 0
            ):
                raise WireError(
                    f"mean_response_nll must be finite and >= 0, got {self.mean_response_nll}"
                )
            for a in self.per_segment_attention or ():
                if not math.isfinite(a) or a < 0:
                    raise WireError(f"attention entry must be finite and >= 0, got {a}")

    @property
    def ok(self) -> bool:
        return self.error is None


Message = Descriptor | Request | Response


def fault(request_id: str, code: str, message: str) -> Response:
    return Response(request_id=request_id, error=WireFault(code=code, message=message))


def _payload(msg: Message) -> dict:
    if isinstance(msg, Descriptor):
        return {
            "type": "descriptor",
            "name": msg.name,
            "context_window": msg.context_window,
            "supports_attention": msg.supports_attention,
            "tokenizer_fingerprint": msg.tokenizer_fingerprint,
        }
    if isinstance(msg, Request):
        out: dict[str, object] = {
            "type": "request",
            "request_id": msg.request_id,
            "mode": msg.mode,
            "context": msg.context,
            "instruction": msg.instruction,
            "response": msg.response,
        }
        for key in ("segment_length", "segment_index"):
            value = getattr(msg, key)
            if value is not None:
                out[key] = value
        return out
    if isinstance(msg, Response):
        out = {"type": "response", "request_id": msg.request_id}
        for key in ("token_count_context", "token_count_response", "mean_response_nll"):
            value = getattr(msg, key)
            if value is not None:
                out[key] = value
        if msg.per_segment_attention is not None:
            out["per_segment_attention"] = list(msg.per_segment_attention)
        if msg.error is not None:
            out["error"] = {"code": msg.error.code, "message": msg.error.message}
        return out
    raise WireError(f"cannot encode object of type {type(msg).__name__}")


def encode(msg: Message) -> str:
    """One canonical line, no trailing newline."""
    return json.dumps(_payload(msg), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _field(obj: dict, key: str, kind: type) -> object:
    if key not in obj:
        raise WireError(f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or (isinstance(value, bool) and kind is not bool):
        raise WireError(f"field {key!r} has wrong type: {value!r}")
    return value


def decode(line: str) -> Message:
    line = line.strip()
    if not line:
        raise WireError("empty message line")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise WireError("message is not an object")

    kind = obj.get("type")
    if kind == "descriptor":
        return Descriptor(
            name=str(_field(obj, "name", str)),
            context_window=int(_field(obj, "context_window", int)),
            supports_attention=bool(_field(obj, "supports_attention", bool)),
            tokenizer_fingerprint=str(_field(obj, "tokenizer_fingerprint", str)),
        )
    if kind == "request":
        seg_len = obj.get("segment_length")
        seg_idx = obj.get("segment_index")
        return Request(
            request_id=str(_field(obj, "request_id", str)),
            mode=str(_field(obj, "mode", str)),
            context=str(obj.get("context", "")),
            instruction=str(obj.get("instruction", "")),
            response=str(obj.get("response", "")),
            segment_length=int(seg_len) if seg_len is not None else None,
            segment_index=int(seg_idx) if seg_idx is not None else None,
        )
    if kind == "response":
        error = None
        if obj.get("error") is not None:
            err = obj["error"]
            if not isinstance(err, dict):
                raise WireError("error field must be an object")
            error = WireFault(
                code=str(err.get("code", ERR_INTERNAL)), message=str(err.get("message", ""))
            )
        nll = obj.get("mean_response_nll")
        attn = obj.get("per_segment_attention")
        tcc = obj.get("token_count_context")
        tcr = obj.get("token_count_response")
        return Response(
            request_id=str(_field(obj, "request_id", str)),
            token_count_context=int(tcc) if tcc is not None else None,
            token_count_response=int(tcr) if tcr is not None else None,
            mean_response_nll=float(nll) if nll is not None else None,
            per_segment_attention=tuple(float(a) for a in attn) if attn is not None else None,
            error=error,
        )
    raise WireError(f"unknown message type: {kind!r}")


def segment_ranges(token_count: int, segment_length: int) -> list[tuple[int, int]]:
    """Half-open [start, end) ranges cutting the context into segments.

    Every segment holds segment_length tokens except possibly the last, which
    keeps the remainder. Both ends of the wire must agree on this rule.
    """
    if segment_length <= 0:
        raise WireError(f"segment_length must be positive, got {segment_length}")
    if token_count < 0:
        raise WireError(f"token_count must be nonnegative, got {token_count}")
    return [
        (lo, min(lo + segment_length, token_count))
        for lo in range(0, token_count, segment_length)
    ]
