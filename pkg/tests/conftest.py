"""Shared fixtures and corpus builders for the test suite."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # expose tests/oracle.py as `oracle`

from gateau.config import load_config


def int_text(tokens) -> str:
    """Render an integer token sequence in the whitespace token space."""
    return " ".join(str(t) for t in tokens)


def write_records(path: Path, rows: list[dict]) -> Path:
    path.write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8"
    )
    return path


def make_record(sample_id: str, context, instruction, response, **meta) -> dict:
    return {
        "id": sample_id,
        "context": int_text(context),
        "instruction": int_text(instruction),
        "response": int_text(response),
        "meta": {str(k): str(v) for k, v in meta.items()},
    }


def mock_backend(name: str, vocab_size: int, copy_bonus: float, window: int | None,
                 attention_bonus: float) -> dict:
    return {
        "name": name,
        "kind": "mock",
        "vocab_size": vocab_size,
        "copy_bonus": copy_bonus,
        "window": window,
        "attention_bonus": attention_bonus,
    }


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    return tmp_path


def build_config(tmp_path: Path, **overrides):
    """RunConfig with per-test artifact paths and mock backends by default."""
    values = {
        "corpus": str(tmp_path / "long.jsonl"),
        "cache": str(tmp_path / "cache.jsonl"),
        "manifest": str(tmp_path / "manifest.jsonl"),
        "out": str(tmp_path / "train.jsonl"),
        "backend_a": mock_backend("copy-a", 16, 8.0, 4, 4.0),
        "backend_b": mock_backend("copy-b", 16, 8.0, None, 4.0),
        "segment_length": 4,
        "alpha": 0.8,
        "max_tokens": 4096,
        "cut_ratio": 0.5,
    }
    values.update(overrides)
    return load_config(None, values)
