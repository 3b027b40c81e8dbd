"""Stage orchestration: score (expensive, cached, resumable), select, emit.

Scoring talks to backends under bounded parallelism and appends raw
measurements to the cache as they arrive, so an interrupted run loses at most
in-flight requests. Selection is pure: it reads the cache and the corpus,
never a backend, and rebuilds the same manifest byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from gateau.cache import RAW_TRUNCATION, CacheKey, ScoreCache
from gateau.cam import CamProfile, build_profile
from gateau.config import BackendSpec, RunConfig
from gateau.copylm import CopyLMParams
from gateau.corpus import (
    MixSummary,
    Sample,
    TokenizerInfo,
    load_corpus,
    mix_training_set,
    truncate_for_scoring,
)
from gateau.errors import BackendError, ConfigError, CorpusError, SelectionError
from gateau.gateway import (
    Backend,
    InProcessCopyBackend,
    LineProtocolBackend,
    tokenizer_info_for,
)
from gateau.hmg import check_homologous, compute_hmg, perplexity, ppl_guidance_scores
from gateau.protocol import ERR_UNSCOREABLE, ScoringRequest, segment_bounds
from gateau.ranker import (
    SelectionManifest,
    combine,
    guidance_records,
    read_manifest,
    select,
    write_manifest,
)

META_MODE = "backend_meta"


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def make_backend(spec: BackendSpec) -> Backend:
    if spec.kind == "mock":
        params = CopyLMParams(
            vocab_size=spec.vocab_size or 0,
            copy_bonus=spec.copy_bonus or 0.0,
            window=spec.window,
            attention_bonus=spec.attention_bonus or 0.0,
        )
        return InProcessCopyBackend(params, name=spec.name)
    try:
        if spec.kind == "spawn":
            backend = LineProtocolBackend.spawn(list(spec.argv))
        else:
            backend = LineProtocolBackend.connect(spec.host, spec.port)
    except OSError as exc:
        raise BackendError(f"cannot reach backend {spec.name!r}: {exc}") from None
    announced = backend.descriptor().name
    if announced != spec.name:
        backend.close()
        raise ConfigError(
            f"backend announced name {announced!r} but config expects {spec.name!r}"
        )
    return backend


def open_backends(config: RunConfig) -> dict[str, Backend]:
    """Open the backends the mode needs and run the handshake checks."""
    config.require_backends()
    backends: dict[str, Backend] = {}
    try:
        assert config.backend_b is not None
        backends["b"] = make_backend(config.backend_b)
        if config.mode in ("gateau", "hmg_only"):
            assert config.backend_a is not None
            backends["a"] = make_backend(config.backend_a)
            check_homologous(backends["a"].descriptor(), backends["b"].descriptor())
        if config.mode in ("gateau", "cam_only"):
            if not backends["b"].descriptor().supports_attention:
                raise ConfigError(
                    f"mode {config.mode} needs attention profiles, but backend "
                    f"{backends['b'].name} does not support attention"
                )
        return backends
    except BaseException:
        for b in backends.values():
            b.close()
        raise


def close_backends(backends: dict[str, Backend]) -> None:
    for b in backends.values():
        b.close()


def _meta_key(backend_name: str) -> CacheKey:
    return CacheKey(
        sample_id="", backend=backend_name, mode=META_MODE, truncation=RAW_TRUNCATION, tokenizer=""
    )


@dataclass(frozen=True)
class Resolution:
    """Outcome of turning one raw sample into its scoreable (truncated) form."""

    sample: Sample | None = None
    n_context_tokens: int = 0
    excluded_reason: str | None = None
    missing: tuple[CacheKey, ...] = ()


def _resolve(
    sample: Sample,
    cache: ScoreCache,
    fp: str,
    config: RunConfig,
    tok_info: TokenizerInfo | None,
) -> Resolution:
    """Resolve truncation from cache, computing (and caching) it when allowed.

    tok_info=None means read-only: cache misses come back as missing keys
    instead of backend traffic (the selection stage must never score).
    """
    policy = config.truncation
    counts_key = CacheKey(sample.id, "", "token_counts", RAW_TRUNCATION, fp)
    counts = cache.get(counts_key)
    if counts is None:
        if tok_info is None:
            return Resolution(missing=(counts_key,))
        counts = {
            "context": tok_info.count_tokens(sample.context),
            "instruction": tok_info.count_tokens(sample.instruction),
            "response": tok_info.count_tokens(sample.response),
        }
        cache.put(counts_key, counts)
    n_other = int(counts["instruction"]) + int(counts["response"])
    if n_other > policy.max_tokens:
        return Resolution(
            excluded_reason=(
                f"instruction+response span {n_other} tokens, over the "
                f"{policy.max_tokens}-token budget"
            )
        )
    trunc_key = CacheKey(sample.id, "", "truncation", policy.tag(), fp)
    trunc = cache.get(trunc_key)
    if trunc is None:
        if tok_info is None:
            return Resolution(missing=(trunc_key,))
        if int(counts["context"]) + n_other <= policy.max_tokens:
            trunc = {"char_offset": 0, "dropped_tokens": 0}
        else:
            outcome = truncate_for_scoring(sample, policy, tok_info)
            assert outcome.sample is not None  # n_other fits, so truncation succeeds
            trunc = {
                "char_offset": len(sample.context) - len(outcome.sample.context),
                "dropped_tokens": outcome.dropped_context_tokens,
            }
        cache.put(trunc_key, trunc)
    context = sample.context[int(trunc["char_offset"]):]
    resolved = dataclasses.replace(sample, context=context)
    n_ctx = int(counts["context"]) - int(trunc["dropped_tokens"])
    return Resolution(sample=resolved, n_context_tokens=n_ctx)


@dataclass(frozen=True)
class Measurement:
    """One backend request plus the cache slot its raw result lands in."""

    key: CacheKey
    backend_role: str
    request: ScoringRequest
    extract: Callable[[object], dict]
    expected_segments: int | None = None


def _extract_full(resp) -> dict:
    if resp.mean_response_nll is None:
        raise BackendError(f"{resp.request_id}: response carries no mean_response_nll")
    return {
        "mean_nll": resp.mean_response_nll,
        "token_count_context": resp.token_count_context,
        "token_count_response": resp.token_count_response,
    }


def _extract_segment(resp) -> dict:
    if resp.mean_response_nll is None:
        raise BackendError(f"{resp.request_id}: response carries no mean_response_nll")
    return {"mean_nll": resp.mean_response_nll}


def _make_extract_attention(expected: int):
    def _extract(resp) -> dict:
        attn = resp.per_segment_attention
        if attn is None:
            raise BackendError(f"{resp.request_id}: response carries no per_segment_attention")
        if len(attn) != expected:
            raise BackendError(
                f"{resp.request_id}: expected {expected} attention segments, got {len(attn)}"
            )
        return {"per_segment_attention": list(attn)}

    return _extract


def plan_sample(
    config: RunConfig,
    resolved: Sample,
    n_context_tokens: int,
    fp: str,
    backend_names: dict[str, str],
) -> list[Measurement]:
    """Measurements the mode needs for one resolved sample, in a fixed order."""
    tag = config.truncation.tag()
    sid = resolved.id
    plan: list[Measurement] = []

    def full(role: str) -> Measurement:
        name = backend_names[role]
        return Measurement(
            key=CacheKey(sid, name, "full_ppl", tag, fp),
            backend_role=role,
            request=ScoringRequest(
                request_id=f"{sid}|{name}|full_ppl",
                mode="full_ppl",
                context=resolved.context,
                instruction=resolved.instruction,
                response=resolved.response,
            ),
            extract=_extract_full,
        )

    if config.mode in ("gateau", "hmg_only"):
        plan.append(full("a"))
        plan.append(full("b"))
    elif config.mode == "ppl_guidance":
        plan.append(full("b"))

    if config.mode in ("gateau", "cam_only"):
        name = backend_names["b"]
        n_segments = len(segment_bounds(n_context_tokens, config.segment_length))
        for i in range(n_segments):
            plan.append(
                Measurement(
                    key=CacheKey(
                        sid, name, "segment_ppl", tag, fp, config.segment_length, i
                    ),
                    backend_role="b",
                    request=ScoringRequest(
                        request_id=f"{sid}|{name}|segment_ppl|{config.segment_length}|{i}",
                        mode="segment_ppl",
                        context=resolved.context,
                        instruction=resolved.instruction,
                        response=resolved.response,
                        segment_length=config.segment_length,
                        segment_index=i,
                    ),
                    extract=_extract_segment,
                )
            )
        plan.append(
            Measurement(
                key=CacheKey(sid, name, "attention_profile", tag, fp, config.segment_length),
                backend_role="b",
                request=ScoringRequest(
                    request_id=f"{sid}|{name}|attention_profile|{config.segment_length}",
                    mode="attention_profile",
                    context=resolved.context,
                    instruction=resolved.instruction,
                    response=resolved.response,
                    segment_length=config.segment_length,
                ),
                extract=_make_extract_attention(n_segments),
                expected_segments=n_segments,
            )
        )
    return plan


@dataclass
class ScoreStats:
    total: int
    scoreable: int
    excluded: list[tuple[str, str]]
    requests_issued: dict[str, int]
    cache: dict[str, int]
    seconds: float


def run_score(config: RunConfig, *, log: Callable[[str], None] = _log) -> ScoreStats:
    """Populate the cache with every raw measurement the mode needs."""
    started = time.monotonic()
    samples = list(
        load_corpus(config.corpus, "long", strict=config.strict, skip_log=config.skip_log)
    )
    if not samples:
        raise CorpusError(f"no usable samples in {config.corpus}")
    backends = open_backends(config)
    try:
        with ScoreCache(config.cache) as cache:
            for backend in backends.values():
                desc = backend.descriptor()
                cache.put(
                    _meta_key(desc.name),
                    {
                        "tokenizer_fingerprint": desc.tokenizer_fingerprint,
                        "context_window": desc.context_window,
                        "supports_attention": desc.supports_attention,
                    },
                )
            fp = backends["b"].descriptor().tokenizer_fingerprint
            tok_info = tokenizer_info_for(backends["b"])
            backend_names = {role: b.name for role, b in backends.items()}

            excluded: list[tuple[str, str]] = []
            tasks: list[Measurement] = []
            for sample in samples:
                res = _resolve(sample, cache, fp, config, tok_info)
                assert not res.missing  # tok_info was provided
                if res.excluded_reason is not None:
                    excluded.append((sample.id, res.excluded_reason))
                    continue
                assert res.sample is not None
                if config.mode in ("gateau", "cam_only") and res.n_context_tokens == 0:
                    excluded.append((sample.id, "context has no tokens; awareness undefined"))
                    continue
                for m in plan_sample(config, res.sample, res.n_context_tokens, fp, backend_names):
                    if cache.get(m.key) is None:
                        tasks.append(m)

            log(
                f"scoring {len(samples) - len(excluded)} of {len(samples)} samples: "
                f"{len(tasks)} requests to issue ({cache.stats['hits']} cache hits)"
            )
            _run_tasks(tasks, backends, cache, config.concurrency)
            stats = ScoreStats(
                total=len(samples),
                scoreable=len(samples) - len(excluded),
                excluded=excluded,
                requests_issued={b.name: b.requests_issued for b in backends.values()},
                cache=cache.stats,
                seconds=time.monotonic() - started,
            )
            log(
                "scored: "
                + ", ".join(f"{k}={v} requests" for k, v in stats.requests_issued.items())
                + f"; cache entries={stats.cache['entries']}"
            )
            return stats
    finally:
        close_backends(backends)


def _run_tasks(
    tasks: list[Measurement],
    backends: dict[str, Backend],
    cache: ScoreCache,
    concurrency: int,
) -> None:
    def work(task: Measurement) -> None:
        backend = backends[task.backend_role]
        resp = backend.submit(task.request)
        err = resp.error
        if err is not None:
            if err.code == ERR_UNSCOREABLE:
                cache.put(task.key, {"error": err.code, "message": err.message})
                return
            raise BackendError(
                f"{task.request.request_id}: {err.message}",
                code=err.code,
                request_id=task.request.request_id,
            )
        cache.put(task.key, task.extract(resp))

    pool = ThreadPoolExecutor(max_workers=concurrency)
    try:
        futures = [pool.submit(work, t) for t in tasks]
        for fut in futures:
            fut.result()
    finally:
        pool.shutdown(wait=True, cancel_futures=True)


def _require_meta(cache: ScoreCache, name: str) -> dict:
    meta = cache.get(_meta_key(name))
    if meta is None:
        raise SelectionError(
            f"cache has no metadata for backend {name!r}; run the score stage first"
        )
    return meta


def run_select(config: RunConfig, *, log: Callable[[str], None] = _log) -> SelectionManifest:
    """Build, write, and return the manifest from cache and corpus alone."""
    started = time.monotonic()
    config.require_backends()
    samples = list(
        load_corpus(config.corpus, "long", strict=config.strict, skip_log=config.skip_log)
    )
    if not samples:
        raise CorpusError(f"no usable samples in {config.corpus}")
    assert config.backend_b is not None
    with ScoreCache(config.cache) as cache:
        meta_b = _require_meta(cache, config.backend_b.name)
        fp = str(meta_b["tokenizer_fingerprint"])
        backend_names = {"b": config.backend_b.name}
        if config.mode in ("gateau", "hmg_only"):
            assert config.backend_a is not None
            _require_meta(cache, config.backend_a.name)
            backend_names["a"] = config.backend_a.name

        excluded: list[tuple[str, str]] = []
        missing: list[CacheKey] = []
        values: dict[str, dict[CacheKey, dict]] = {}
        plans: dict[str, list[Measurement]] = {}
        for sample in samples:
            res = _resolve(sample, cache, fp, config, None)
            if res.missing:
                missing.extend(res.missing)
                continue
            if res.excluded_reason is not None:
                excluded.append((sample.id, res.excluded_reason))
                continue
            assert res.sample is not None
            if config.mode in ("gateau", "cam_only") and res.n_context_tokens == 0:
                excluded.append((sample.id, "context has no tokens; awareness undefined"))
                continue
            plan = plan_sample(config, res.sample, res.n_context_tokens, fp, backend_names)
            got: dict[CacheKey, dict] = {}
            reason = None
            for m in plan:
                value = cache.get(m.key)
                if value is None:
                    missing.append(m.key)
                elif "error" in value:
                    reason = str(value.get("message", value["error"]))
                else:
                    got[m.key] = value
            if reason is not None:
                excluded.append((sample.id, f"backend could not score: {reason}"))
            elif len(got) == len(plan):
                values[sample.id] = got
                plans[sample.id] = plan
        if missing:
            preview = ", ".join(
                f"{k.sample_id}/{k.backend or '-'}/{k.mode}"
                + (f"[{k.segment_index}]" if k.segment_index is not None else "")
                for k in missing[:5]
            )
            raise SelectionError(
                f"cache is missing {len(missing)} entries (e.g. {preview}); "
                "run the score stage to completion first"
            )

        records = _records_for_mode(config, values, plans)
        manifest = select(
            records,
            config.cut_ratio,
            fingerprint=config.fingerprint(),
            config=config.fingerprint_payload(),
            excluded=excluded,
        )
        write_manifest(manifest, config.manifest)
        _write_stats_sidecar(
            config.manifest,
            {"select_seconds": time.monotonic() - started, "cache": cache.stats},
        )
        log(
            f"manifest written to {config.manifest}: "
            f"{len(manifest.selected_ids)} of {len(manifest.records)} selected, "
            f"{len(manifest.excluded)} excluded"
        )
        return manifest


def _records_for_mode(
    config: RunConfig,
    values: dict[str, dict[CacheKey, dict]],
    plans: dict[str, list[Measurement]],
):
    def value_for(sid: str, mode: str, role: str, segment_index: int | None = None):
        for m in plans[sid]:
            if m.key.mode == mode and m.backend_role == role and (
                segment_index is None or m.key.segment_index == segment_index
            ):
                return values[sid][m.key]
        raise SelectionError(f"sample {sid}: no cached {mode} measurement")

    if config.mode == "ppl_guidance":
        scores = {
            sid: perplexity(float(value_for(sid, "full_ppl", "b")["mean_nll"]))
            for sid in values
        }
        return guidance_records(ppl_guidance_scores(scores))

    cam_profiles: dict[str, CamProfile] | None = None
    if config.mode in ("gateau", "cam_only"):
        cam_profiles = {}
        for sid, plan in plans.items():
            seg_nlls = [
                float(values[sid][m.key]["mean_nll"])
                for m in plan
                if m.key.mode == "segment_ppl"
            ]
            attn = next(
                values[sid][m.key]["per_segment_attention"]
                for m in plan
                if m.key.mode == "attention_profile"
            )
            cam_profiles[sid] = build_profile(
                sid,
                config.segment_length,
                [math.exp(v) for v in seg_nlls],
                [float(a) for a in attn],
            )

    hmg_records = []
    if config.mode in ("gateau", "hmg_only"):
        ppls = {
            sid: (
                perplexity(float(value_for(sid, "full_ppl", "a")["mean_nll"])),
                perplexity(float(value_for(sid, "full_ppl", "b")["mean_nll"])),
            )
            for sid in values
        }
        hmg_records = compute_hmg(
            ppls, temperature=config.temperature, no_norm=config.no_norm
        )

    return combine(
        hmg_records,
        cam_profiles,
        alpha=config.alpha,
        temperature=config.temperature,
        mode=config.mode,
    )


def _write_stats_sidecar(manifest_path: str | Path, stats: dict) -> None:
    # Timings live beside the manifest, never in it: manifests must be
    # byte-identical across reruns.
    sidecar = Path(str(manifest_path) + ".stats.json")
    sidecar.write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def run_emit(config: RunConfig, *, log: Callable[[str], None] = _log) -> MixSummary:
    """Mix the selected long samples with the short corpus into the training set."""
    if config.mix is None:
        raise ConfigError("emit requires a mix spec (short_source, short_fraction)")
    manifest = read_manifest(config.manifest)
    summary = mix_training_set(
        manifest, config.corpus, config.mix, config.out, strict=config.strict
    )
    log(
        f"training set written to {config.out}: {summary.long_count} long + "
        f"{summary.short_count} short = {summary.total} samples"
    )
    return summary
