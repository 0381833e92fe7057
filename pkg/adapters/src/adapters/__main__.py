"""Command-line entry point: start one worker and serve until killed.

On a successful bind, exactly one line of JSON is printed to stdout —
``{"port": ..., "bindings": {...}}`` — so a supervisor can read the
chosen port before wiring the worker into an engine manifest.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ModelLoadError, PortInUse
from .model import WorkerConfig, serve_model_worker
from .toy import TOY_KINDS, serve_toy_worker


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelplan-worker",
        description="Serve one restoration tool or quality metric over "
                    "the worker protocol.")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("serve-toy", help="serve a deterministic toy worker")
    toy.add_argument("--kind", required=True,
                     choices=[k.replace("_", "-") for k in TOY_KINDS])
    toy.add_argument("--task", default=None,
                     help="task to serve (apply kinds only)")
    toy.add_argument("--metric", default="musiq",
                     help="metric to serve (fixed-score only)")
    toy.add_argument("--value", type=float, default=0.5,
                     help="score returned by fixed-score")
    toy.add_argument("--port", type=int, default=0,
                     help="port to bind (0 picks a free one)")

    model = sub.add_parser("serve-model", help="serve a loaded model")
    model.add_argument("--model-id", required=True)
    model.add_argument("--loader", required=True,
                       help="dotted reference package.module:attribute")
    bind = model.add_mutually_exclusive_group(required=True)
    bind.add_argument("--task", default=None)
    bind.add_argument("--metric", default=None)
    model.add_argument("--device", default="cpu")
    model.add_argument("--port", type=int, default=0)
    model.add_argument("--scales", type=int, nargs="*", default=[],
                       help="upscale factors the model accepts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve-toy":
            server = serve_toy_worker(
                args.kind.replace("-", "_"), port=args.port, task=args.task,
                metric=args.metric, value=args.value)
        else:
            server = serve_model_worker(WorkerConfig(
                model_id=args.model_id, loader=args.loader, task=args.task,
                metric=args.metric, device=args.device, port=args.port,
                scales=tuple(args.scales)))
    except (PortInUse, ModelLoadError, ValueError) as exc:
        print(f"pixelplan-worker: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(server.readiness(), sort_keys=True), flush=True)
    server.serve_until_interrupted()
    return 0


if __name__ == "__main__":
    sys.exit(main())
