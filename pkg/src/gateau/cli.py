"""Command-line surface: score, select, emit, report, serve-mock.

Exit codes: 0 success, 1 user error (config, corpus, incomplete cache),
2 backend or wire-protocol failure. Logs go to standard error; data artifacts
(cache, manifest, training set) go to files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from gateau.config import load_config
from gateau.copylm import CopyLMParams
from gateau.errors import BackendError, ConfigError, GateauError, ProtocolError
from gateau.gateway import make_tcp_server, serve_stream
from gateau.pipeline import run_emit, run_score, run_select
from gateau.ranker import read_manifest, report


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--corpus", help="long-sample record file (JSONL)")
    p.add_argument("--mode", choices=("gateau", "hmg_only", "cam_only", "ppl_guidance"))
    p.add_argument("--backend-a", metavar="JSON", help="short-window backend spec as JSON")
    p.add_argument("--backend-b", metavar="JSON", help="long-window backend spec as JSON")
    p.add_argument("--segment-length", type=int, help="context segment length in tokens")
    p.add_argument("--alpha", type=float, help="guidance/awareness blend weight in [0,1]")
    p.add_argument("--tau", type=float, dest="temperature", help="softmax temperature > 0")
    p.add_argument("--max-tokens", type=int, help="scoring token budget per sample")
    p.add_argument("--cut-ratio", type=float, help="fraction of ranked samples to keep")
    p.add_argument("--cache", help="score cache path (JSONL, append-only)")
    p.add_argument("--manifest", help="selection manifest path")
    p.add_argument("--out", help="training set output path")
    p.add_argument("--skip-log", help="file receiving skipped-record reports")
    p.add_argument("--concurrency", type=int, help="max in-flight backend requests")
    p.add_argument("--strict", action="store_const", const=True, default=None,
                   help="treat malformed corpus records as fatal")
    p.add_argument("--no-norm", action="store_const", const=True, default=None,
                   dest="no_norm", help="use raw perplexity differences (skip softmax)")


def _backend_json(text: str | None, which: str) -> dict | None:
    if text is None:
        return None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--{which} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"--{which} must be a JSON object")
    return obj


def _config_from_args(args: argparse.Namespace):
    overrides = {
        "corpus": args.corpus,
        "mode": args.mode,
        "backend_a": _backend_json(args.backend_a, "backend-a"),
        "backend_b": _backend_json(args.backend_b, "backend-b"),
        "segment_length": args.segment_length,
        "alpha": args.alpha,
        "temperature": args.temperature,
        "max_tokens": args.max_tokens,
        "cut_ratio": args.cut_ratio,
        "cache": args.cache,
        "manifest": args.manifest,
        "out": args.out,
        "skip_log": args.skip_log,
        "concurrency": args.concurrency,
        "strict": args.strict,
        "no_norm": args.no_norm,
    }
    return load_config(args.config, overrides)


def _cmd_score(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.corpus:
        raise ConfigError("score requires a corpus (--corpus or config file)")
    run_score(config)
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.corpus:
        raise ConfigError("select requires a corpus (--corpus or config file)")
    manifest = run_select(config)
    print(report(manifest), file=sys.stderr, end="")
    return 0


def _cmd_emit(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.corpus:
        raise ConfigError("emit requires a corpus (--corpus or config file)")
    run_emit(config)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    stage_seconds = None
    sidecar = Path(str(args.manifest) + ".stats.json")
    if sidecar.is_file():
        try:
            stats = json.loads(sidecar.read_text(encoding="utf-8"))
            stage_seconds = {
                k: float(v) for k, v in stats.items() if isinstance(v, (int, float))
            }
        except (json.JSONDecodeError, ValueError):
            stage_seconds = None
    sys.stdout.write(report(manifest, stage_seconds or None))
    return 0


def _cmd_serve_mock(args: argparse.Namespace) -> int:
    params = CopyLMParams(
        vocab_size=args.vocab_size,
        copy_bonus=args.copy_bonus,
        window=args.window,
        attention_bonus=args.attention_bonus,
    )
    if args.tcp is not None:
        host, _, port_text = args.tcp.rpartition(":")
        host = host or "127.0.0.1"
        try:
            port = int(port_text)
        except ValueError:
            raise ConfigError(f"--tcp expects HOST:PORT or PORT, got {args.tcp!r}") from None
        server = make_tcp_server(params, host, port, name=args.name)
        bound = server.server_address
        print(f"serving on {bound[0]}:{bound[1]}", file=sys.stderr)
        try:
            server.serve_forever()
        finally:
            server.server_close()
        return 0
    serve_stream(params, sys.stdin, sys.stdout, name=args.name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gateau",
        description=(
            "Rank long instruction-following samples by long-range dependency "
            "richness and emit a mixed training set."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="populate the score cache (resumable)")
    _add_config_flags(p_score)
    p_score.set_defaults(func=_cmd_score)

    p_select = sub.add_parser("select", help="rank from cache and write the manifest")
    _add_config_flags(p_select)
    p_select.set_defaults(func=_cmd_select)

    p_emit = sub.add_parser("emit", help="mix selected long samples with short data")
    _add_config_flags(p_emit)
    p_emit.set_defaults(func=_cmd_emit)

    p_report = sub.add_parser("report", help="print a summary of an existing manifest")
    p_report.add_argument("--manifest", required=True)
    p_report.set_defaults(func=_cmd_report)

    p_serve = sub.add_parser("serve-mock", help="serve the deterministic mock backend")
    p_serve.add_argument("--vocab-size", type=int, required=True)
    p_serve.add_argument("--copy-bonus", type=float, default=0.0)
    p_serve.add_argument("--window", type=int, default=None,
                         help="visible prefix window in tokens (omit for unbounded)")
    p_serve.add_argument("--attention-bonus", type=float, default=0.0)
    p_serve.add_argument("--name", default="copy-lm")
    p_serve.add_argument("--tcp", metavar="HOST:PORT",
                         help="serve over TCP instead of stdio (port 0 picks one)")
    p_serve.set_defaults(func=_cmd_serve_mock)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BackendError, ProtocolError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except GateauError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
