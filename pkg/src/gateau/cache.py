"""Append-only JSONL cache of raw backend measurements.

Only raw quantities are cached: mean response NLLs, per-segment attention
means, token counts, and truncation offsets. Anything derived from the whole
dataset (normalized scores, softmax values, ranks) is recomputed every run.

Each put appends one line and flushes, so an interrupted run resumes from the
records that made it to disk. Keys carry every input that can change a raw
measurement; the same key must always map to the same value.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

from gateau.errors import CacheError

RAW_TRUNCATION = "raw"

_KEY_FIELDS = (
    "sample_id",
    "backend",
    "mode",
    "truncation",
    "tokenizer",
    "segment_length",
    "segment_index",
)


@dataclass(frozen=True)
class CacheKey:
    sample_id: str
    backend: str
    mode: str
    truncation: str
    tokenizer: str
    segment_length: int | None = None
    segment_index: int | None = None


Value = dict[str, object]


class ScoreCache:
    """Thread-safe in-memory map over a JSONL file of {key, value} records."""

    def __init__(self, path: str | Path) -> None:
        self._path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[CacheKey, Value] = {}
        self._hits = 0
        self._misses = 0
        self._fh = None
        self._load()

    def _load(self) -> None:
        if not self._path.is_file():
            return
        with self._path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    key = CacheKey(**{f: obj["key"].get(f) for f in _KEY_FIELDS})
                    value = obj["value"]
                except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
                    continue  # torn tail from an interrupted append
                if not isinstance(value, dict):
                    continue
                self._entries[key] = value

    def _handle(self):
        if self._fh is None:
            # Repair a torn final line so the next append starts fresh.
            if self._path.exists() and self._path.stat().st_size > 0:
                with self._path.open("rb") as fh:
                    fh.seek(-1, 2)
                    needs_newline = fh.read(1) != b"\n"
                if needs_newline:
                    with self._path.open("a", encoding="utf-8") as fh:
                        fh.write("\n")
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self._path.open("a", encoding="utf-8")
        return self._fh

    def get(self, key: CacheKey) -> Value | None:
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self._misses += 1
            else:
                self._hits += 1
            return value

    def put(self, key: CacheKey, value: Value) -> None:
        record = json.dumps(
            {"key": {k: v for k, v in asdict(key).items() if v is not None}, "value": value},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )
        # Round-trip so stored and loaded values compare equal (tuples become lists).
        value = json.loads(json.dumps(value))
        with self._lock:
            existing = self._entries.get(key)
            if existing is not None:
                if existing == value:
                    return
                raise CacheError(
                    f"cache key {key} already holds a different value; "
                    "delete the cache file if inputs legitimately changed"
                )
            self._entries[key] = value
            fh = self._handle()
            fh.write(record + "\n")
            fh.flush()

    @property
    def stats(self) -> dict[str, int]:
        with self._lock:
            return {"entries": len(self._entries), "hits": self._hits, "misses": self._misses}

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "ScoreCache":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
