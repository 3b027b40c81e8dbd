"""Append-only measurement cache: durability, idempotence, conflict detection."""

from __future__ import annotations

import json

import pytest

from gateau.cache import RAW_TRUNCATION, CacheKey, ScoreCache
from gateau.errors import CacheError


def key(sid="s1", backend="copy-b", mode="full_ppl", segment_length=None, segment_index=None):
    return CacheKey(
        sample_id=sid,
        backend=backend,
        mode=mode,
        truncation="left:4096",
        tokenizer="ws-int:16",
        segment_length=segment_length,
        segment_index=segment_index,
    )


class TestRoundTrip:
    def test_put_then_get_in_same_instance(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            cache.put(key(), {"mean_response_nll": 1.25, "token_count_response": 3})
            assert cache.get(key()) == {"mean_response_nll": 1.25, "token_count_response": 3}

    def test_entries_survive_reopen(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key("a"), {"v": 1})
            cache.put(key("b"), {"v": 2})
        with ScoreCache(path) as cache:
            assert cache.get(key("a")) == {"v": 1}
            assert cache.get(key("b")) == {"v": 2}

    def test_distinct_segment_indices_are_distinct_keys(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            cache.put(key(mode="segment_ppl", segment_length=4, segment_index=0), {"v": 1})
            cache.put(key(mode="segment_ppl", segment_length=4, segment_index=1), {"v": 2})
            assert cache.get(key(mode="segment_ppl", segment_length=4, segment_index=0)) == {
                "v": 1
            }
            assert cache.get(key(mode="segment_ppl", segment_length=4, segment_index=1)) == {
                "v": 2
            }

    def test_tuple_values_round_trip_as_lists(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key(mode="attention_profile"), {"attention": (0.25, 0.75)})
            assert cache.get(key(mode="attention_profile")) == {"attention": [0.25, 0.75]}
        with ScoreCache(path) as cache:
            assert cache.get(key(mode="attention_profile")) == {"attention": [0.25, 0.75]}

    def test_miss_returns_none(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            assert cache.get(key("absent")) is None


class TestIdempotenceAndConflicts:
    def test_identical_put_is_a_no_op(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key(), {"v": 1.5})
            cache.put(key(), {"v": 1.5})
        assert len(path.read_text().splitlines()) == 1

    def test_identical_put_accepts_tuple_list_equivalence(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            cache.put(key(), {"attention": (0.5, 0.5)})
            cache.put(key(), {"attention": [0.5, 0.5]})

    def test_conflicting_put_is_fatal(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            cache.put(key(), {"v": 1.0})
            with pytest.raises(CacheError, match="different value"):
                cache.put(key(), {"v": 2.0})

    def test_conflict_across_reopen_is_fatal(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key(), {"v": 1.0})
        with ScoreCache(path) as cache:
            with pytest.raises(CacheError, match="delete the cache file"):
                cache.put(key(), {"v": 2.0})


class TestInterruptedWrites:
    def test_torn_final_line_is_dropped_on_load(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key("whole"), {"v": 1})
        # Simulate a crash mid-append: a truncated record with no newline.
        with path.open("a", encoding="utf-8") as fh:
            fh.write('{"key":{"sample_id":"torn","backend":"copy-b","mo')
        with ScoreCache(path) as cache:
            assert cache.get(key("whole")) == {"v": 1}
            assert cache.get(key("torn")) is None

    def test_appends_after_torn_line_start_on_fresh_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key("whole"), {"v": 1})
        with path.open("a", encoding="utf-8") as fh:
            fh.write('{"key":{"sample_id":"torn"')
        with ScoreCache(path) as cache:
            cache.put(key("next"), {"v": 2})
        with ScoreCache(path) as cache:
            assert cache.get(key("whole")) == {"v": 1}
            assert cache.get(key("next")) == {"v": 2}

    def test_blank_lines_are_tolerated(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key("a"), {"v": 1})
        with path.open("a", encoding="utf-8") as fh:
            fh.write("\n\n")
        with ScoreCache(path) as cache:
            assert cache.get(key("a")) == {"v": 1}


class TestFileFormat:
    def test_records_are_canonical_json_lines(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key(), {"mean_response_nll": 0.5})
        [line] = path.read_text().splitlines()
        assert line == json.dumps(
            json.loads(line), sort_keys=True, separators=(",", ":"), ensure_ascii=False
        )
        obj = json.loads(line)
        assert obj["key"]["sample_id"] == "s1"
        assert obj["value"] == {"mean_response_nll": 0.5}

    def test_none_key_fields_are_omitted_from_disk(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with ScoreCache(path) as cache:
            cache.put(key(), {"v": 1})
        obj = json.loads(path.read_text())
        assert "segment_length" not in obj["key"]
        assert "segment_index" not in obj["key"]

    def test_raw_truncation_tag_constant(self):
        assert RAW_TRUNCATION == "raw"


class TestStats:
    def test_hits_misses_and_entry_count(self, tmp_path):
        with ScoreCache(tmp_path / "c.jsonl") as cache:
            cache.put(key("a"), {"v": 1})
            cache.get(key("a"))
            cache.get(key("a"))
            cache.get(key("absent"))
            stats = cache.stats
        assert stats == {"entries": 1, "hits": 2, "misses": 1}

    def test_missing_file_starts_empty(self, tmp_path):
        with ScoreCache(tmp_path / "never-written.jsonl") as cache:
            assert cache.stats == {"entries": 0, "hits": 0, "misses": 0}
        assert not (tmp_path / "never-written.jsonl").exists()
