"""Run configuration: declarative JSON file, flag overrides, config fingerprint.

The fingerprint hashes every setting that can change a score or a rank
(backends, mode, segment length, alpha, temperature, truncation, no_norm), so
a manifest carries proof of the configuration that produced it. Settings that
only affect which artifacts get written (paths, concurrency, cut_ratio) stay
out of the fingerprint; cut_ratio is recorded on the manifest itself.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from gateau.corpus import MixSpec, TruncationPolicy
from gateau.errors import ConfigError
from gateau.ranker import RUN_MODES

BACKEND_KINDS = ("mock", "spawn", "tcp")


@dataclass(frozen=True)
class BackendSpec:
    """How to reach (or build) one scoring backend.

    name must match the descriptor the backend announces; cache entries are
    keyed by it, so selection can run offline against the cache.
    """

    name: str
    kind: str
    vocab_size: int | None = None
    copy_bonus: float | None = None
    window: int | None = None
    attention_bonus: float | None = None
    argv: tuple[str, ...] = ()
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("backend name must be nonempty")
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "mock":
            if self.vocab_size is None:
                raise ConfigError(f"backend {self.name}: mock backends require vocab_size")
            if self.window is not None and self.window <= 0:
                raise ConfigError(f"backend {self.name}: window must be positive or null")
        if self.kind == "spawn" and not self.argv:
            raise ConfigError(f"backend {self.name}: spawn backends require argv")
        if self.kind == "tcp" and not (0 < self.port < 65536):
            raise ConfigError(f"backend {self.name}: tcp backends require a port in 1..65535")

    def payload(self) -> dict:
        """Identity for fingerprinting; includes only score-relevant settings."""
        out: dict[str, object] = {"name": self.name, "kind": self.kind}
        if self.kind == "mock":
            out.update(
                vocab_size=self.vocab_size,
                copy_bonus=self.copy_bonus,
                window=self.window,
                attention_bonus=self.attention_bonus,
            )
        elif self.kind == "spawn":
            out["argv"] = list(self.argv)
        else:
            out.update(host=self.host, port=self.port)
        return out


def _backend_from_obj(obj: dict, where: str) -> BackendSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: backend spec must be an object")
    known = {f.name for f in fields(BackendSpec)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"{where}: unknown backend fields {sorted(unknown)}")
    kwargs = dict(obj)
    if "argv" in kwargs:
        kwargs["argv"] = tuple(str(a) for a in kwargs["argv"])
    try:
        return BackendSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    corpus: str = ""
    mode: str = "gateau"
    backend_a: BackendSpec | None = None
    backend_b: BackendSpec | None = None
    segment_length: int = 128
    alpha: float = 0.8
    temperature: float = 1.0
    max_tokens: int = 65536
    cut_ratio: float = 0.1
    cache: str = "scores.cache.jsonl"
    manifest: str = "manifest.jsonl"
    out: str = "training_set.jsonl"
    mix: MixSpec | None = None
    strict: bool = False
    no_norm: bool = False
    concurrency: int = 8
    skip_log: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.segment_length <= 0:
            raise ConfigError(f"segment_length must be positive, got {self.segment_length}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 < self.cut_ratio <= 1.0:
            raise ConfigError(f"cut_ratio must be in (0,1], got {self.cut_ratio}")
        if self.concurrency < 1:
            raise ConfigError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.max_tokens <= 0:
            raise ConfigError(f"max_tokens must be positive, got {self.max_tokens}")

    def require_backends(self) -> None:
        """Mode-specific presence checks, applied before any scoring starts."""
        needs_a = self.mode in ("gateau", "hmg_only")
        if needs_a and self.backend_a is None:
            raise ConfigError(f"mode {self.mode} requires backend_a (the short-window model)")
        if self.backend_b is None:
            raise ConfigError(f"mode {self.mode} requires backend_b (the long-window model)")

    @property
    def truncation(self) -> TruncationPolicy:
        return TruncationPolicy(max_tokens=self.max_tokens, side="left")

    def fingerprint_payload(self) -> dict:
        return {
            "mode": self.mode,
            "backend_a": self.backend_a.payload() if self.backend_a else None,
            "backend_b": self.backend_b.payload() if self.backend_b else None,
            "segment_length": self.segment_length,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "truncation": self.truncation.tag(),
            "no_norm": self.no_norm,
        }

    def fingerprint(self) -> str:
        canonical = json.dumps(
            self.fingerprint_payload(), sort_keys=True, separators=(",", ":"), ensure_ascii=False
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


_SCALAR_FIELDS = {
    "corpus": str,
    "mode": str,
    "segment_length": int,
    "alpha": float,
    "temperature": float,
    "max_tokens": int,
    "cut_ratio": float,
    "cache": str,
    "manifest": str,
    "out": str,
    "strict": bool,
    "no_norm": bool,
    "concurrency": int,
    "skip_log": str,
}


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus override values.

    Overrides use the same keys as the file and win over it; None overrides
    are ignored so absent CLI flags fall through to the file or defaults.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: malformed JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    known = set(_SCALAR_FIELDS) | {"backend_a", "backend_b", "mix"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    kwargs: dict = {}
    for key, kind in _SCALAR_FIELDS.items():
        if key in raw and raw[key] is not None:
            value = raw[key]
            if kind is bool and not isinstance(value, bool):
                raise ConfigError(f"config key {key} must be a boolean")
            try:
                kwargs[key] = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key} has invalid value {value!r}") from None
    for key in ("backend_a", "backend_b"):
        if raw.get(key) is not None:
            spec = raw[key]
            kwargs[key] = spec if isinstance(spec, BackendSpec) else _backend_from_obj(spec, key)
    if raw.get("mix") is not None:
        m = raw["mix"]
        if isinstance(m, MixSpec):
            kwargs["mix"] = m
        elif isinstance(m, dict):
            try:
                kwargs["mix"] = MixSpec(
                    short_source=str(m["short_source"]),
                    short_fraction=float(m["short_fraction"]),
                    long_ratio=float(m["long_ratio"]) if m.get("long_ratio") is not None else None,
                )
            except KeyError as exc:
                raise ConfigError(f"mix spec missing key {exc}") from None
        else:
            raise ConfigError("mix must be an object")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
