"""Operator entry point.

Subcommands: run (full pipeline), plan (perception and planning only,
no tool touched), bench (corpus evaluation), profiles (catalog), tools
and metrics (registry listings; metrics also scores a single image).

Exit codes: 0 success, 1 usage error, 2 pipeline failure, 3 worker or
connectivity failure. Diagnostics go to standard error; machine-readable
output goes to standard output. PIXELPLAN_WORKERS names a worker
manifest when --workers is not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import run_bench
from .engine import load_bindings, plan_run, run_image
from .errors import (
    AllToolsFailed,
    DetectorUnavailable,
    PixelplanError,
    PlanExhausted,
    ProtocolError,
    WorkerError,
    WorkerUnreachable,
)
from .imagecore import load_image, save_image
from .metrics import MetricKind
from .profiles import PRESETS, load_profile, preset_names
from .restoration import (
    SELECTION_FIRST_ACCEPTABLE,
    SELECTION_QMOE,
    write_trace,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_WORKER = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _connectivity_exit(exc: PixelplanError) -> int:
    if isinstance(exc, (WorkerUnreachable, WorkerError, ProtocolError,
                        DetectorUnavailable)):
        return EXIT_WORKER
    if isinstance(exc, AllToolsFailed) and exc.unreachable:
        return EXIT_WORKER
    if isinstance(exc, PlanExhausted):
        cause = exc.__cause__
        if isinstance(cause, AllToolsFailed) and cause.unreachable:
            return EXIT_WORKER
    return EXIT_PIPELINE


def _bindings(args):
    path = args.workers or os.environ.get("PIXELPLAN_WORKERS")
    return load_bindings(path)


def _add_workers_flag(p):
    p.add_argument("--workers", metavar="MANIFEST", default=None,
                   help="worker manifest path (default: $PIXELPLAN_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixelplan",
                     description="agentic image restoration pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="restore one image end to end")
    p_run.add_argument("-i", "--input", required=True)
    p_run.add_argument("-o", "--output", required=True)
    p_run.add_argument("--profile", required=True,
                       help="preset nickname or profile file")
    p_run.add_argument("--fast4k", action="store_true",
                       help="drop slow tools on large working images")
    p_run.add_argument("--trace", metavar="PATH", default=None,
                       help="write the run trace as JSONL")
    p_run.add_argument("--selection",
                       choices=[SELECTION_QMOE, SELECTION_FIRST_ACCEPTABLE],
                       default=SELECTION_QMOE,
                       help="candidate selection policy")
    _add_workers_flag(p_run)

    p_plan = sub.add_parser("plan", help="print the plan without touching tools")
    p_plan.add_argument("-i", "--input", required=True)
    p_plan.add_argument("--profile", required=True)
    _add_workers_flag(p_plan)

    p_bench = sub.add_parser("bench", help="evaluate a corpus")
    p_bench.add_argument("--corpus", required=True)
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--profile", required=True)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--limit", type=int, default=None)
    p_bench.add_argument("--fast4k", action="store_true")
    p_bench.add_argument("--no-figures", action="store_true",
                         help="skip chart rendering")
    _add_workers_flag(p_bench)

    p_prof = sub.add_parser("profiles", help="preset catalog")
    prof_sub = p_prof.add_subparsers(dest="action", required=True)
    prof_sub.add_parser("list")
    p_show = prof_sub.add_parser("show")
    p_show.add_argument("name")

    p_tools = sub.add_parser("tools", help="list the tool registry")
    _add_workers_flag(p_tools)

    p_metrics = sub.add_parser("metrics", help="list metrics or score an image")
    p_metrics.add_argument("-i", "--input", default=None,
                           help="image to score with every available metric")
    _add_workers_flag(p_metrics)
    return parser


def _cmd_run(args) -> int:
    bindings = _bindings(args)
    profile = load_profile(args.profile)
    img = load_image(args.input)
    events = []
    try:
        result = run_image(
            img, profile, bindings,
            selection=args.selection,
            fast4k=args.fast4k,
            image_path=args.input,
            trace=events,
        )
    except PixelplanError as exc:
        if args.trace:
            write_trace(events, args.trace)
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return _connectivity_exit(exc)
    save_image(args.output, result.image)
    if args.trace:
        write_trace(events, args.trace)
    print(json.dumps({
        "output": str(args.output),
        "width": result.image.width,
        "height": result.image.height,
        "scale": result.scale,
        "plan": [s.task.value for s in result.plan.steps],
        "sr_step_survived": result.sr_step_survived,
        "trace": str(args.trace) if args.trace else None,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_plan(args) -> int:
    bindings = _bindings(args)
    profile = load_profile(args.profile)
    img = load_image(args.input)
    plan, cfg, description, degradations, _ = plan_run(img, profile, bindings)
    print(json.dumps({
        "plan": [{"task": s.task.value, "params": s.params}
                 for s in plan.steps],
        "provenance": plan.provenance,
        "scale": cfg.scale,
        "description": description,
        "degradations": sorted(d.value for d in degradations),
    }, sort_keys=True))
    return EXIT_OK


def _cmd_bench(args) -> int:
    bindings = _bindings(args)
    profile = load_profile(args.profile)
    report = run_bench(
        Path(args.corpus), profile, bindings, Path(args.out),
        seed=args.seed, limit=args.limit, fast4k=args.fast4k,
        figures=not args.no_figures,
    )
    failed = [r for r in report.rows if r.status != "ok"]
    for row in failed:
        print(f"{row.id}: {row.status}", file=sys.stderr)
    print(json.dumps(report.aggregate, sort_keys=True))
    return EXIT_OK if not failed else EXIT_PIPELINE


def _cmd_profiles(args) -> int:
    if args.action == "list":
        print(json.dumps(preset_names()))
        return EXIT_OK
    if args.name not in PRESETS:
        print(f"unknown preset {args.name!r}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(PRESETS[args.name].to_json_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_tools(args) -> int:
    bindings = _bindings(args)
    print(json.dumps(bindings.tools.to_manifest(), sort_keys=True))
    return EXIT_OK


def _cmd_metrics(args) -> int:
    bindings = _bindings(args)
    bound = {k.value for k in bindings.metrics.bound_kinds}
    if args.input is None:
        listing = {}
        for kind in MetricKind:
            if kind.value in bound:
                status = "remote"
            elif kind is MetricKind.NIQE:
                status = "native"
            elif kind.full_reference:
                status = "native (needs reference)"
            else:
                status = "unbound"
            listing[kind.value] = status
        print(json.dumps(listing, sort_keys=True))
        return EXIT_OK
    img = load_image(args.input)
    wanted = [k for k in MetricKind if not k.full_reference]
    report = bindings.metrics.report(img, wanted)
    print(json.dumps({k.value: report.score(k) for k in wanted},
                     sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "plan": _cmd_plan,
    "bench": _cmd_bench,
    "profiles": _cmd_profiles,
    "tools": _cmd_tools,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PixelplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _connectivity_exit(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
