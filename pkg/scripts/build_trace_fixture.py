"""Regenerate the golden pipeline trace under tests/golden/.

The scenario is a two-step plan where the first task always produces a
candidate scoring at 0.45 (below the 0.5 threshold) and the second always
clears it: the run must roll the first step back, replan, accept the
second step, and finish the first under the compromise pass. The trace of
that run, serialized as JSON lines, is the fixture;
tests/test_restoration.py rebuilds the identical scenario and compares
bytes.

Scoring is keyed off a marker the failing tool leaves in the image (red
plane forced to 1.0), so every value in the trace is reproducible.

Usage: python scripts/build_trace_fixture.py
"""
from pathlib import Path

import numpy as np

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def tint_red(img, params, context):
    planes = img.planes.copy()
    planes[0] = 1.0
    from pixelplan.imagecore import ImageBuf

    return ImageBuf(planes)


def marker_niqe(img, context) -> float:
    return 9.0 if float(img.planes[0].min()) > 0.99 else 1.0


def build_scenario(worker):
    from pixelplan.metrics import MetricKind, MetricRegistry, RemoteScorer
    from pixelplan.perception import AgendaStep, Plan
    from pixelplan.restoration import RunDeps, make_state
    from pixelplan.synthimg import synth_pristine
    from pixelplan.toolbox import (
        Cost,
        Preference,
        RemoteBackend,
        TaskKind,
        ToolRegistry,
        ToolSpec,
    )

    tools = ToolRegistry()
    for tool_id, task in (
        ("tinter", TaskKind.DENOISING),
        ("upscaler", TaskKind.SUPER_RESOLUTION),
    ):
        tools.register(ToolSpec(
            id=tool_id, task=task, preference=Preference.PERCEPTION,
            cost=Cost.FAST, backend=RemoteBackend(worker.endpoint),
        ))
    metrics = MetricRegistry()
    for kind in (MetricKind.NIQE, MetricKind.MUSIQ, MetricKind.MANIQA,
                 MetricKind.CLIPIQA):
        metrics.bind(RemoteScorer(endpoint=worker.endpoint, metric=kind))

    plan = Plan(
        steps=(
            AgendaStep(TaskKind.DENOISING),
            AgendaStep(TaskKind.SUPER_RESOLUTION, {"scale": 2}),
        ),
        provenance="rule-based",
    )
    state = make_state(synth_pristine(2001, 64, 64), plan)
    deps = RunDeps(tools=tools, metrics=metrics, description="test scene")
    return state, deps


def main():
    from pixelplan.restoration import dump_trace, run_pipeline
    from pixelplan.workerproto.testing import StubWorker, const_scorer, upscale_tool

    worker = StubWorker(
        tools={"tinter": tint_red, "upscaler": upscale_tool()},
        metrics={
            "niqe": marker_niqe,
            "musiq": const_scorer(60.0),
            "maniqa": const_scorer(0.5),
            "clipiqa": const_scorer(0.6),
        },
    )
    GOLDEN.mkdir(parents=True, exist_ok=True)
    with worker:
        state, deps = build_scenario(worker)
        final, trace = run_pipeline(state, deps)
    assert final.width == 128 and final.height == 128
    assert np.all(final.planes[0] == 1.0)
    (GOLDEN / "trace_rollback.jsonl").write_text(dump_trace(trace))
    print(f"wrote {GOLDEN / 'trace_rollback.jsonl'} ({len(trace)} events)")


if __name__ == "__main__":
    main()
