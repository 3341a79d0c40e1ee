"""Command-line entry point.

Subcommands: ingest, extract, verify, score, metrics, evaluate, stats,
report. Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import jsonio
from .agreement import (
    DegenerateInputError,
    InsufficientOverlapError,
    MissingCellsError,
    NoPairsError,
    PreferencePair,
    ScoreMatrix,
    correlation_by_pooling,
    icc,
    krippendorff_alpha,
    pairwise_agreement,
)
from .config import ConfigError, load_config
from .pipeline import MissingUpstreamError, Runner, StageFailure, render_summary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

# CLI verbs covering more than one internal stage
_COMMAND_STAGES = {
    "ingest": ("ingest",),
    "extract": ("extract", "backtrack"),
    "verify": ("fetch", "verify"),
    "metrics": ("metrics",),
    "score": ("judge",),
}


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path, help="run config JSON")
    parser.add_argument("--run-dir", type=Path, default=None, help="existing or new run directory")
    parser.add_argument("--gateway", choices=["live", "record", "replay"], default=None)
    parser.add_argument("--retrieval", choices=["on", "off"], default=None)
    parser.add_argument("--top-n", type=int, default=None)
    parser.add_argument("--chunk-tokens", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--group-size", type=int, default=None)
    parser.add_argument("--tau", type=float, default=None)


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.gateway:
        overrides.setdefault("gateway", {})["mode"] = args.gateway
    retrieval: dict = {}
    if args.retrieval:
        retrieval["enabled"] = args.retrieval == "on"
    if args.top_n is not None:
        retrieval["top_n"] = args.top_n
    if args.chunk_tokens is not None:
        retrieval["chunk_tokens"] = args.chunk_tokens
    if retrieval:
        overrides["retrieval"] = retrieval
    for key in ("batch_size", "group_size", "tau"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return overrides


def _print_launch_defaults(config) -> None:
    snapshot = config.snapshot()
    retrieval = snapshot["retrieval"]
    print(
        "launch parameters: "
        f"batch_size={snapshot['batch_size']} group_size={snapshot['group_size']} "
        f"tau={snapshot['tau']} retrieval={'on' if retrieval['enabled'] else 'off'} "
        f"top_n={retrieval['top_n']} chunk_tokens={retrieval['chunk_tokens']} "
        f"gateway={snapshot['gateway']['mode']}"
    )


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest at {path}; run `evaluate` or `ingest` first")
    return jsonio.load(path)


def _cmd_pipeline(command: str, args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides_from_args(args))
    _print_launch_defaults(config)

    if command == "evaluate":
        runner = Runner(config, run_dir=args.run_dir)
        manifest = runner.run_evaluate()
        summary = runner.write_summary(manifest)
        print(f"manifest: {runner.manifest_path()}")
        print(f"summary: {summary}")
        return EXIT_OK

    stages = _COMMAND_STAGES[command]
    if args.run_dir and (args.run_dir / "manifest.json").exists():
        runner = Runner(config, run_dir=args.run_dir)
        manifest = _load_manifest(args.run_dir)
    else:
        runner = Runner(config, run_dir=args.run_dir)
        manifest = runner.new_manifest()
    for stage in stages:
        manifest = runner.run_stage(stage, manifest)
    # keep aggregates in sync when both inputs exist
    if command in ("metrics", "score") and all(s in manifest["stages"] for s in ("metrics", "judge")):
        manifest = runner.run_stage("aggregate", manifest)
        runner.write_summary(manifest)
    print(f"manifest: {runner.manifest_path()}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    manifest = _load_manifest(args.run_dir)
    text = render_summary(manifest)
    out = args.run_dir / "summary.md"
    out.write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    try:
        payload = jsonio.load(args.input)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(f"cannot read stats input {args.input}: {exc}")

    results: dict = {}
    try:
        if "correlations" in payload:
            records = [
                (str(r.get("task", "")), float(r["judge"]), float(r["human"])) for r in payload["correlations"]
            ]
            pearson_r, spearman_rho = correlation_by_pooling(records, pooling=args.pooling)
            results["pearson_r"] = pearson_r
            results["spearman_rho"] = spearman_rho
        if "pairs" in payload:
            pairs = [
                PreferencePair(judge=p["judge"], human=p["human"], task=str(p.get("task", "")))
                for p in payload["pairs"]
            ]
            if args.pooling == "per-task" and any(p.task for p in pairs):
                by_task: dict[str, list[PreferencePair]] = {}
                for pair in pairs:
                    by_task.setdefault(pair.task, []).append(pair)
                values = []
                for group in by_task.values():
                    try:
                        values.append(pairwise_agreement(group))
                    except NoPairsError:
                        continue
                if not values:
                    raise NoPairsError("no task yields a defined agreement")
                results["pairwise_agreement"] = sum(values) / len(values)
            else:
                results["pairwise_agreement"] = pairwise_agreement(pairs)
        if "matrix" in payload:
            m = payload["matrix"]
            matrix = ScoreMatrix.from_rows(m["raters"], m["items"], m["values"])
            results["krippendorff_alpha"] = krippendorff_alpha(matrix)
            if matrix.complete():
                results["icc_2_1"] = icc(matrix, "two_way_random_single")
                results["icc_2_k"] = icc(matrix, "two_way_random_mean")
            else:
                results["icc_2_1"] = None
                results["icc_2_k"] = None
    except (DegenerateInputError, InsufficientOverlapError, MissingCellsError, NoPairsError, KeyError, ValueError) as exc:
        print(f"stats error: {exc}", file=sys.stderr)
        return EXIT_STAGE

    text = jsonio.dumps_canonical(results)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reportcheck", description="Report verification and scoring engine")
    sub = parser.add_subparsers(dest="command", required=True)

    for command in ("ingest", "extract", "verify", "score", "metrics", "evaluate"):
        p = sub.add_parser(command, help=f"run the {command} stage(s)")
        _add_pipeline_args(p)

    p_stats = sub.add_parser("stats", help="agreement statistics over score matrices / preference pairs")
    p_stats.add_argument("--input", required=True, type=Path, help="stats input JSON")
    p_stats.add_argument("--output", type=Path, default=None)
    p_stats.add_argument("--pooling", choices=["global", "per-task"], default="global")

    p_report = sub.add_parser("report", help="re-render summary.md from a manifest")
    p_report.add_argument("--run-dir", required=True, type=Path)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_pipeline(args.command, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingUpstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
