"""Final score combination, ranking, top-ratio selection, and the run manifest."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from gateau.cam import CamProfile
from gateau.errors import SelectionError
from gateau.hmg import HmgRecord
from gateau.numerics import nearest_rank_quantiles, round_half_away_from_zero, softmax

RUN_MODES = ("gateau", "hmg_only", "cam_only", "ppl_guidance")


@dataclass(frozen=True)
class FinalScoreRecord:
    """One sample's combined score; rank is assigned at selection time."""

    sample_id: str
    final: float
    hmp: float | None = None
    cas: float | None = None
    norm_hmp: float | None = None
    norm_cas: float | None = None
    alpha: float | None = None
    ppl_a: float | None = None
    ppl_b: float | None = None
    rank: int = 0


def combine(
    hmg_records: Sequence[HmgRecord],
    cam_profiles: Mapping[str, CamProfile] | None,
    *,
    alpha: float,
    temperature: float = 1.0,
    mode: str = "gateau",
) -> list[FinalScoreRecord]:
    """Blend guidance and awareness into one score per sample.

    Both components are softmax-normalized across the whole scored population
    before blending, so every record must come from the same population. In
    combined mode a partial awareness set is fatal rather than imputed:
    normalizing over a mixed population silently distorts every rank.

    Output is ordered by ascending sample id.
    """
    if mode not in ("gateau", "hmg_only", "cam_only"):
        raise SelectionError(f"combine does not handle mode {mode!r}")
    if not 0.0 <= alpha <= 1.0:
        raise SelectionError(f"alpha must be in [0,1], got {alpha}")

    if mode == "cam_only" and not hmg_records:
        if not cam_profiles:
            raise SelectionError("no scored samples to combine")
        ids = sorted(cam_profiles)
        cas_values = [cam_profiles[i].cas for i in ids]
        norm_cas = softmax(cas_values, temperature=temperature)
        return [
            FinalScoreRecord(
                sample_id=sid,
                final=float(nc),
                cas=cv,
                norm_cas=float(nc),
                alpha=0.0,
            )
            for sid, cv, nc in zip(ids, cas_values, norm_cas)
        ]

    if not hmg_records:
        raise SelectionError("no scored samples to combine")
    by_id = {r.sample_id: r for r in hmg_records}
    if len(by_id) != len(hmg_records):
        raise SelectionError("duplicate sample ids among guidance records")
    ids = sorted(by_id)
    hmp_values = [by_id[i].hmp for i in ids]
    norm_hmp = softmax(hmp_values, temperature=temperature)

    if mode == "hmg_only":
        return [
            FinalScoreRecord(
                sample_id=sid,
                final=float(nh),
                hmp=hv,
                norm_hmp=float(nh),
                alpha=1.0,
                ppl_a=by_id[sid].ppl_a,
                ppl_b=by_id[sid].ppl_b,
            )
            for sid, hv, nh in zip(ids, hmp_values, norm_hmp)
        ]

    cam_profiles = cam_profiles or {}
    missing = [i for i in ids if i not in cam_profiles]
    extra = [i for i in cam_profiles if i not in by_id]
    if missing or extra:
        raise SelectionError(
            "awareness profiles do not cover the guidance population exactly: "
            f"{len(missing)} missing, {len(extra)} extra "
            f"(first missing: {missing[:3]}, first extra: {sorted(extra)[:3]})"
        )
    cas_values = [cam_profiles[i].cas for i in ids]
    norm_cas = softmax(cas_values, temperature=temperature)

    if mode == "cam_only":
        return [
            FinalScoreRecord(
                sample_id=sid,
                final=float(nc),
                hmp=hv,
                cas=cv,
                norm_hmp=float(nh),
                norm_cas=float(nc),
                alpha=0.0,
                ppl_a=by_id[sid].ppl_a,
                ppl_b=by_id[sid].ppl_b,
            )
            for sid, hv, cv, nh, nc in zip(ids, hmp_values, cas_values, norm_hmp, norm_cas)
        ]

    return [
        FinalScoreRecord(
            sample_id=sid,
            final=float(alpha * nh + (1.0 - alpha) * nc),
            hmp=hv,
            cas=cv,
            norm_hmp=float(nh),
            norm_cas=float(nc),
            alpha=alpha,
            ppl_a=by_id[sid].ppl_a,
            ppl_b=by_id[sid].ppl_b,
        )
        for sid, hv, cv, nh, nc in zip(ids, hmp_values, cas_values, norm_hmp, norm_cas)
    ]


def guidance_records(scores: Sequence[tuple[str, float]]) -> list[FinalScoreRecord]:
    """Baseline records ranking by the strong backend's raw perplexity."""
    if not scores:
        raise SelectionError("no scored samples")
    return [
        FinalScoreRecord(sample_id=sid, final=float(ppl), ppl_b=float(ppl))
        for sid, ppl in sorted(scores)
    ]


@dataclass(frozen=True)
class SelectionManifest:
    """The reproducible output of a run: ranked records plus the chosen subset."""

    fingerprint: str
    config: dict
    cut_ratio: float
    records: tuple[FinalScoreRecord, ...]
    selected_ids: tuple[str, ...]
    excluded: tuple[tuple[str, str], ...] = ()


def select(
    records: Sequence[FinalScoreRecord],
    cut_ratio: float,
    *,
    fingerprint: str = "",
    config: dict | None = None,
    excluded: Sequence[tuple[str, str]] = (),
) -> SelectionManifest:
    """Rank by final score descending (ties by ascending id) and keep the top ratio.

    The kept count is round(cut_ratio * M) with half away from zero.
    """
    if not records:
        raise SelectionError("cannot select from an empty record set")
    if not 0.0 < cut_ratio <= 1.0:
        raise SelectionError(f"cut_ratio must be in (0,1], got {cut_ratio}")
    for r in records:
        if not math.isfinite(r.final):
            raise SelectionError(f"sample {r.sample_id}: final score must be finite")
    ordered = sorted(records, key=lambda r: (-r.final, r.sample_id))
    ranked = tuple(replace(r, rank=i) for i, r in enumerate(ordered, start=1))
    n_keep = round_half_away_from_zero(cut_ratio * len(ranked))
    return SelectionManifest(
        fingerprint=fingerprint,
        config=dict(config or {}),
        cut_ratio=cut_ratio,
        records=ranked,
        selected_ids=tuple(r.sample_id for r in ranked[:n_keep]),
        excluded=tuple(sorted(excluded)),
    )


_RECORD_FIELDS = ("hmp", "cas", "norm_hmp", "norm_cas", "alpha", "ppl_a", "ppl_b")


def write_manifest(manifest: SelectionManifest, path: str | Path) -> None:
    """One header line, then ranked records, then exclusions; byte-stable."""
    lines = []
    header = {
        "type": "header",
        "fingerprint": manifest.fingerprint,
        "config": manifest.config,
        "cut_ratio": manifest.cut_ratio,
        "total": len(manifest.records),
        "selected_count": len(manifest.selected_ids),
    }
    lines.append(header)
    cutoff = len(manifest.selected_ids)
    for r in manifest.records:
        row: dict[str, object] = {
            "type": "record",
            "rank": r.rank,
            "sample_id": r.sample_id,
            "final": r.final,
            "selected": r.rank <= cutoff,
        }
        for field in _RECORD_FIELDS:
            value = getattr(r, field)
            if value is not None:
                row[field] = value
        lines.append(row)
    for sid, reason in manifest.excluded:
        lines.append({"type": "excluded", "sample_id": sid, "reason": reason})
    text = "".join(
        json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n"
        for obj in lines
    )
    Path(path).write_text(text, encoding="utf-8")


def read_manifest(path: str | Path) -> SelectionManifest:
    path = Path(path)
    if not path.is_file():
        raise SelectionError(f"manifest not found: {path}")
    header = None
    records: list[FinalScoreRecord] = []
    excluded: list[tuple[str, str]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SelectionError(f"{path}:{lineno}: malformed manifest line: {exc}") from None
            kind = obj.get("type")
            if kind == "header":
                header = obj
            elif kind == "record":
                records.append(
                    FinalScoreRecord(
                        sample_id=obj["sample_id"],
                        final=obj["final"],
                        rank=obj["rank"],
                        **{f: obj.get(f) for f in _RECORD_FIELDS},
                    )
                )
            elif kind == "excluded":
                excluded.append((obj["sample_id"], obj["reason"]))
            else:
                raise SelectionError(f"{path}:{lineno}: unknown manifest line type {kind!r}")
    if header is None:
        raise SelectionError(f"{path}: manifest has no header line")
    records.sort(key=lambda r: r.rank)
    n = int(header["selected_count"])
    return SelectionManifest(
        fingerprint=header.get("fingerprint", ""),
        config=header.get("config", {}),
        cut_ratio=float(header["cut_ratio"]),
        records=tuple(records),
        selected_ids=tuple(r.sample_id for r in records[:n]),
        excluded=tuple(excluded),
    )


def report(manifest: SelectionManifest, stage_seconds: Mapping[str, float] | None = None) -> str:
    """Human-readable run summary: counts, score spread, exclusions, timings."""
    finals = [r.final for r in manifest.records]
    qs = nearest_rank_quantiles(finals, [0.0, 0.25, 0.5, 0.75, 1.0])
    out = [
        "selection summary",
        f"  scored samples: {len(manifest.records)}",
        f"  selected: {len(manifest.selected_ids)} (cut_ratio {manifest.cut_ratio})",
        f"  config fingerprint: {manifest.fingerprint or '(none)'}",
        "score distribution (final)",
        f"  min {qs[0]:.6g}  p25 {qs[1]:.6g}  median {qs[2]:.6g}  p75 {qs[3]:.6g}  max {qs[4]:.6g}",
    ]
    if manifest.excluded:
        out.append(f"exclusions ({len(manifest.excluded)})")
        for sid, reason in manifest.excluded:
            out.append(f"  {sid}: {reason}")
    if stage_seconds:
        out.append("stage timings")
        for stage, seconds in stage_seconds.items():
            out.append(f"  {stage}: {seconds:.2f}s")
    return "\n".join(out) + "\n"
