"""End-to-end stage orchestration: score, select, emit, resume, offline select."""

from __future__ import annotations

import json
import math
import threading

import numpy as np
import pytest

import oracle
from gateau import pipeline
from gateau.cache import CacheKey, ScoreCache
from gateau.errors import BackendError, ConfigError, SelectionError
from gateau.gateway import Backend
from gateau.pipeline import (
    close_backends,
    make_backend,
    open_backends,
    plan_sample,
    run_emit,
    run_score,
    run_select,
)
from gateau.protocol import BackendDescriptor
from gateau.ranker import read_manifest

from conftest import build_config, int_text, make_record, mock_backend, write_records

silent = lambda msg: None


def write_long_corpus(tmp_path, contexts, name="long.jsonl"):
    """One long sample per context token list; response copies its last token."""
    rows = []
    for i, ctx in enumerate(contexts):
        rows.append(make_record(f"s{i:02d}", ctx, [15], [ctx[-1] if ctx else 0, 1]))
    return write_records(tmp_path / name, rows)


def expected_requests(contexts, segment_length=4):
    """(requests to A, requests to B) for combined-mode scoring."""
    n = len(contexts)
    segments = sum(math.ceil(len(c) / segment_length) for c in contexts)
    return n, n + segments + n


class TestRunScore:
    def test_combined_mode_issues_one_request_per_measurement(self, tmp_path):
        contexts = [[1, 2, 3, 4, 5], [6, 7, 8, 9, 10, 11, 12, 13], [14, 15, 1]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path)
        stats = run_score(config, log=silent)
        want_a, want_b = expected_requests(contexts)
        assert stats.requests_issued == {"copy-a": want_a, "copy-b": want_b}
        assert stats.total == 3
        assert stats.scoreable == 3
        assert stats.excluded == []

    def test_warm_rerun_issues_zero_requests(self, tmp_path):
        contexts = [[1, 2, 3, 4, 5], [6, 7, 8]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path)
        run_score(config, log=silent)
        stats = run_score(config, log=silent)
        assert stats.requests_issued == {"copy-a": 0, "copy-b": 0}

    def test_guidance_baseline_scores_only_the_strong_backend(self, tmp_path):
        contexts = [[1, 2, 3], [4, 5, 6]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, mode="ppl_guidance", backend_a=None)
        stats = run_score(config, log=silent)
        assert stats.requests_issued == {"copy-b": 2}

    def test_guidance_only_mode_skips_segment_scoring(self, tmp_path):
        contexts = [[1, 2, 3, 4, 5, 6, 7, 8]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, mode="hmg_only")
        stats = run_score(config, log=silent)
        assert stats.requests_issued == {"copy-a": 1, "copy-b": 1}

    def test_awareness_only_mode_skips_the_weak_backend(self, tmp_path):
        contexts = [[1, 2, 3, 4, 5]]  # 2 segments
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, mode="cam_only", backend_a=None)
        stats = run_score(config, log=silent)
        assert stats.requests_issued == {"copy-b": 2 + 1}  # segments + attention

    def test_over_budget_sample_is_excluded_not_scored(self, tmp_path):
        rows = [
            make_record("fits", [1, 2, 3], [4], [5]),
            make_record("huge", [1], list(range(8)), list(range(8))),
        ]
        write_records(tmp_path / "long.jsonl", rows)
        config = build_config(tmp_path, max_tokens=10)
        stats = run_score(config, log=silent)
        assert stats.scoreable == 1
        [(sid, reason)] = stats.excluded
        assert sid == "huge"
        assert "over the 10-token budget" in reason

    def test_zero_token_context_is_excluded_in_awareness_modes(self, tmp_path):
        rows = [
            make_record("ok", [1, 2, 3], [4], [5]),
            {"id": "blank", "context": "   ", "instruction": "4", "response": "5"},
        ]
        write_records(tmp_path / "long.jsonl", rows)
        config = build_config(tmp_path)
        stats = run_score(config, log=silent)
        [(sid, reason)] = stats.excluded
        assert sid == "blank"
        assert "no tokens" in reason

    def test_zero_token_context_is_fine_for_guidance_modes(self, tmp_path):
        rows = [{"id": "blank", "context": " ", "instruction": "4", "response": "5"}]
        write_records(tmp_path / "long.jsonl", rows)
        config = build_config(tmp_path, mode="hmg_only")
        stats = run_score(config, log=silent)
        assert stats.excluded == []
        assert stats.requests_issued == {"copy-a": 1, "copy-b": 1}

    def test_unscoreable_response_is_cached_not_fatal(self, tmp_path):
        rows = [
            make_record("good", [1, 2, 3], [4], [5]),
            make_record("alien", [1, 2, 3], [4], [99]),  # 99 outside vocab 16
        ]
        write_records(tmp_path / "long.jsonl", rows)
        config = build_config(tmp_path)
        stats = run_score(config, log=silent)
        assert stats.scoreable == 2  # truncation sees only whitespace counts
        with ScoreCache(config.cache) as cache:
            key = CacheKey("alien", "copy-a", "full_ppl", "left:4096", "ws-int:16")
            value = cache.get(key)
        assert value["error"] == "unscoreable"

    def test_truncation_drops_left_context_tokens(self, tmp_path):
        ctx = list(range(12))
        write_long_corpus(tmp_path, [ctx])
        config = build_config(tmp_path, max_tokens=8)
        run_score(config, log=silent)
        with ScoreCache(config.cache) as cache:
            trunc = cache.get(CacheKey("s00", "", "truncation", "left:8", "ws-int:16"))
        # 1 instruction + 2 response tokens leaves 5 of 12 context tokens.
        assert trunc["dropped_tokens"] == 7
        offset = trunc["char_offset"]
        assert int_text(ctx)[offset:] == int_text(ctx[7:])

    def test_empty_corpus_is_fatal(self, tmp_path):
        write_records(tmp_path / "long.jsonl", [])
        config = build_config(tmp_path)
        with pytest.raises(Exception, match="no usable samples"):
            run_score(config, log=silent)


class TestResume:
    def flaky_factory(self, fail_after):
        """Wrap real backends so that scoring dies after N total submits."""
        budget = {"left": fail_after}
        lock = threading.Lock()

        class FlakyBackend(Backend):
            def __init__(self, inner):
                self._inner = inner

            def descriptor(self):
                return self._inner.descriptor()

            def submit(self, request):
                with lock:
                    if budget["left"] <= 0:
                        raise BackendError("injected fault: backend went away")
                    budget["left"] -= 1
                return self._inner.submit(request)

            @property
            def requests_issued(self):
                return self._inner.requests_issued

            def close(self):
                self._inner.close()

        return lambda spec: FlakyBackend(make_backend(spec))

    def test_interrupted_run_resumes_without_rescoring(self, tmp_path, monkeypatch):
        contexts = [[(i + j) % 16 for j in range(6)] for i in range(8)]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, concurrency=2)

        monkeypatch.setattr(pipeline, "make_backend", self.flaky_factory(fail_after=9))
        with pytest.raises(BackendError, match="injected fault"):
            run_score(config, log=silent)
        monkeypatch.undo()

        resumed = run_score(config, log=silent)
        want_a, want_b = expected_requests(contexts)
        total_wanted = want_a + want_b
        resumed_total = sum(resumed.requests_issued.values())
        assert 0 < resumed_total < total_wanted  # partial progress survived

        run_select(config, log=silent)
        interrupted_manifest = (tmp_path / "manifest.jsonl").read_bytes()

        clean_dir = tmp_path / "clean"
        clean_dir.mkdir()
        write_long_corpus(clean_dir, contexts)
        clean_config = build_config(clean_dir, concurrency=2)
        run_score(clean_config, log=silent)
        run_select(clean_config, log=silent)
        assert (clean_dir / "manifest.jsonl").read_bytes() == interrupted_manifest


class TestRunSelect:
    def test_select_reads_only_cache_and_corpus(self, tmp_path, monkeypatch):
        write_long_corpus(tmp_path, [[1, 2, 3, 4, 5], [6, 7, 8]])
        config = build_config(tmp_path)
        run_score(config, log=silent)

        def refuse(spec):
            raise AssertionError("selection must not open a backend")

        monkeypatch.setattr(pipeline, "make_backend", refuse)
        manifest = run_select(config, log=silent)
        assert len(manifest.records) == 2

    def test_alpha_and_cut_changes_need_no_rescoring(self, tmp_path, monkeypatch):
        write_long_corpus(tmp_path, [[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12]])
        config = build_config(tmp_path)
        run_score(config, log=silent)
        monkeypatch.setattr(
            pipeline, "make_backend", lambda spec: pytest.fail("no backend traffic allowed")
        )
        first = run_select(config, log=silent)
        retuned = build_config(tmp_path, alpha=0.2, cut_ratio=1.0)
        second = run_select(retuned, log=silent)
        assert len(first.selected_ids) == 2  # round(0.5 * 3)
        assert len(second.selected_ids) == 3
        assert first.fingerprint != second.fingerprint

    def test_manifest_is_byte_identical_across_selects(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12]])
        config = build_config(tmp_path)
        run_score(config, log=silent)
        run_select(config, log=silent)
        first = (tmp_path / "manifest.jsonl").read_bytes()
        run_select(config, log=silent)
        assert (tmp_path / "manifest.jsonl").read_bytes() == first

    def test_select_before_score_is_fatal(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3]])
        config = build_config(tmp_path)
        with pytest.raises(SelectionError, match="run the score stage first"):
            run_select(config, log=silent)

    def test_partial_cache_is_fatal_with_remedy(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3, 4, 5]])
        narrow = build_config(tmp_path, mode="hmg_only")
        run_score(narrow, log=silent)
        combined = build_config(tmp_path)  # needs segment + attention entries too
        with pytest.raises(SelectionError, match="run the score stage to completion"):
            run_select(combined, log=silent)

    def test_new_corpus_sample_invalidates_selection(self, tmp_path):
        path = write_long_corpus(tmp_path, [[1, 2, 3]])
        config = build_config(tmp_path)
        run_score(config, log=silent)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(make_record("added", [4, 5, 6], [7], [8])) + "\n")
        with pytest.raises(SelectionError, match="cache is missing"):
            run_select(config, log=silent)

    def test_backend_error_values_become_exclusions(self, tmp_path):
        rows = [
            make_record("good", [1, 2, 3], [4], [5]),
            make_record("alien", [1, 2, 3], [4], [99]),
        ]
        write_records(tmp_path / "long.jsonl", rows)
        config = build_config(tmp_path)
        run_score(config, log=silent)
        manifest = run_select(config, log=silent)
        assert [r.sample_id for r in manifest.records] == ["good"]
        [(sid, reason)] = manifest.excluded
        assert sid == "alien"
        assert reason.startswith("backend could not score:")

    def test_stats_sidecar_holds_timings_not_the_manifest(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3]])
        config = build_config(tmp_path)
        run_score(config, log=silent)
        run_select(config, log=silent)
        sidecar = json.loads((tmp_path / "manifest.jsonl.stats.json").read_text())
        assert sidecar["select_seconds"] >= 0.0
        assert "cache" in sidecar
        assert "seconds" not in (tmp_path / "manifest.jsonl").read_text()


class TestScoreValues:
    def test_manifest_scores_match_oracle_end_to_end(self, tmp_path):
        contexts = [[1, 2, 3, 4, 5, 6, 7, 8], [8, 7, 6, 5], [2, 4, 6, 8, 10, 12]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, cut_ratio=1.0)
        run_score(config, log=silent)
        manifest = run_select(config, log=silent)

        ids = sorted(f"s{i:02d}" for i in range(len(contexts)))
        by_index = {f"s{i:02d}": ctx for i, ctx in enumerate(contexts)}
        ppl_a, ppl_b, cas = [], [], []
        for sid in ids:
            ctx = by_index[sid]
            instruction, response = [15], [ctx[-1], 1]
            ppl_a.append(oracle.perplexity(16, 8.0, 4, ctx, instruction, response))
            ppl_b.append(oracle.perplexity(16, 8.0, None, ctx, instruction, response))
            cas.append(
                oracle.contextual_awareness(16, 8.0, None, 4.0, ctx, instruction, response, 4)
            )
        hmp = oracle.hmp_scores(ppl_a, ppl_b)
        norm_hmp = oracle.softmax(hmp)
        norm_cas = oracle.softmax(cas)
        expected = {
            sid: 0.8 * nh + 0.2 * nc for sid, nh, nc in zip(ids, norm_hmp, norm_cas)
        }
        got = {r.sample_id: r.final for r in manifest.records}
        for sid in ids:
            np.testing.assert_allclose(got[sid], expected[sid], rtol=1e-9)

    def test_guidance_mode_ranks_by_raw_strong_perplexity(self, tmp_path):
        contexts = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]]
        write_long_corpus(tmp_path, contexts)
        config = build_config(tmp_path, mode="ppl_guidance", backend_a=None, cut_ratio=1.0)
        run_score(config, log=silent)
        manifest = run_select(config, log=silent)
        finals = [r.final for r in manifest.records]
        assert finals == sorted(finals, reverse=True)
        for r in manifest.records:
            ctx = contexts[int(r.sample_id[1:])]
            expected = oracle.perplexity(16, 8.0, None, ctx, [15], [ctx[-1], 1])
            np.testing.assert_allclose(r.final, expected, rtol=1e-9)


class TestOpenBackends:
    def stub_factory(self, descriptors, closed):
        class StubBackend(Backend):
            def __init__(self, name):
                self._name = name

            def descriptor(self):
                return descriptors[self._name]

            def submit(self, request):
                raise NotImplementedError

            @property
            def requests_issued(self):
                return 0

            def close(self):
                closed.append(self._name)

        return lambda spec: StubBackend(spec.name)

    def descriptor(self, name, window, attention=True, fingerprint="ws-int:16"):
        return BackendDescriptor(
            name=name,
            context_window=window,
            supports_attention=attention,
            tokenizer_fingerprint=fingerprint,
        )

    def test_rejects_non_homologous_pair(self, tmp_path, monkeypatch):
        closed: list[str] = []
        descriptors = {
            "copy-a": self.descriptor("copy-a", 1024),
            "copy-b": self.descriptor("copy-b", 1024),
        }
        monkeypatch.setattr(pipeline, "make_backend", self.stub_factory(descriptors, closed))
        config = build_config(tmp_path)
        with pytest.raises(ConfigError, match="not homologous"):
            open_backends(config)
        assert sorted(closed) == ["copy-a", "copy-b"]

    def test_rejects_mismatched_tokenizers(self, tmp_path, monkeypatch):
        closed: list[str] = []
        descriptors = {
            "copy-a": self.descriptor("copy-a", 4, fingerprint="ws-int:8"),
            "copy-b": self.descriptor("copy-b", 1024, fingerprint="ws-int:16"),
        }
        monkeypatch.setattr(pipeline, "make_backend", self.stub_factory(descriptors, closed))
        with pytest.raises(ConfigError, match="fingerprints differ"):
            open_backends(build_config(tmp_path))

    def test_awareness_mode_requires_attention_support(self, tmp_path, monkeypatch):
        closed: list[str] = []
        descriptors = {
            "copy-a": self.descriptor("copy-a", 4),
            "copy-b": self.descriptor("copy-b", 1024, attention=False),
        }
        monkeypatch.setattr(pipeline, "make_backend", self.stub_factory(descriptors, closed))
        with pytest.raises(ConfigError, match="does not support attention"):
            open_backends(build_config(tmp_path))
        assert "copy-b" in closed

    def test_guidance_mode_tolerates_missing_attention(self, tmp_path, monkeypatch):
        closed: list[str] = []
        descriptors = {
            "copy-a": self.descriptor("copy-a", 4),
            "copy-b": self.descriptor("copy-b", 1024, attention=False),
        }
        monkeypatch.setattr(pipeline, "make_backend", self.stub_factory(descriptors, closed))
        backends = open_backends(build_config(tmp_path, mode="hmg_only"))
        assert set(backends) == {"a", "b"}
        close_backends(backends)

    def test_missing_backend_for_mode_is_fatal(self, tmp_path):
        config = build_config(tmp_path, backend_a=None)
        with pytest.raises(ConfigError, match="backend_a"):
            open_backends(config)


class TestPlanSample:
    def test_request_ids_are_unique_and_deterministic(self, tmp_path):
        from gateau.corpus import Sample

        config = build_config(tmp_path)
        sample = Sample(
            id="s1", context=int_text(range(9)), instruction="1", response="2", kind="long"
        )
        names = {"a": "copy-a", "b": "copy-b"}
        plan1 = plan_sample(config, sample, 9, "ws-int:16", names)
        plan2 = plan_sample(config, sample, 9, "ws-int:16", names)
        ids = [m.request.request_id for m in plan1]
        assert len(set(ids)) == len(ids)
        assert ids == [m.request.request_id for m in plan2]
        # 2 full + 3 segments (9 tokens, length 4) + 1 attention
        assert len(plan1) == 6

    def test_cache_keys_carry_every_scoring_input(self, tmp_path):
        from gateau.corpus import Sample

        config = build_config(tmp_path)
        sample = Sample(id="s1", context="1 2 3", instruction="4", response="5", kind="long")
        plan = plan_sample(config, sample, 3, "ws-int:16", {"a": "copy-a", "b": "copy-b"})
        for m in plan:
            assert m.key.sample_id == "s1"
            assert m.key.truncation == "left:4096"
            assert m.key.tokenizer == "ws-int:16"
            if m.key.mode in ("segment_ppl", "attention_profile"):
                assert m.key.segment_length == 4


class TestRunEmit:
    def test_emit_after_select_mixes_corpora(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]])
        short_rows = [
            {"id": f"short{i}", "instruction": "q", "response": "a"} for i in range(4)
        ]
        write_records(tmp_path / "short.jsonl", short_rows)
        config = build_config(
            tmp_path,
            cut_ratio=1.0,
            mix={
                "short_source": str(tmp_path / "short.jsonl"),
                "short_fraction": 0.5,
                "long_ratio": 1.0,
            },
        )
        run_score(config, log=silent)
        run_select(config, log=silent)
        summary = run_emit(config, log=silent)
        assert summary.long_count == 3
        assert summary.short_count == 2
        rows = [json.loads(l) for l in (tmp_path / "train.jsonl").read_text().splitlines()]
        assert [r["meta"]["origin"] for r in rows] == ["long"] * 3 + ["short"] * 2

    def test_emit_without_mix_spec_is_fatal(self, tmp_path):
        write_long_corpus(tmp_path, [[1, 2, 3]])
        config = build_config(tmp_path)
        with pytest.raises(ConfigError, match="mix"):
            run_emit(config, log=silent)
