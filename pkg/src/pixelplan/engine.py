"""End-to-end orchestration: bind workers, perceive, plan, run the
restoration loop, refine faces.

This is the layer the CLI and the bench harness share. It owns the
manifest that attaches remote workers (tools, scorers, perception
endpoints, face detector/embedder) and the policy glue between a profile
and the pipeline modules: which reasoning backend runs, what the agenda
looks like, and whether the face stage is armed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import PixelplanError, RegistryInvalid
from .facepipe import (
    FaceWeights,
    RemoteDetector,
    RemoteEmbedder,
    TestDetector,
    TestEmbedder,
    restore_faces,
)
from .imagecore import ImageBuf
from .metrics import MetricKind, MetricRegistry, RemoteScorer
from .perception import (
    ExperienceRules,
    Plan,
    RemoteLLM,
    RemoteVLM,
    RuleBased,
    analyze_iqa,
    configure_upscale,
    default_rules,
    plan_tasks,
    reason_degradations,
)
from .profiles import (
    EffectiveConfig,
    Profile,
    RULE_BASED_BACKEND,
    effective_config,
    resolve_agenda,
)
from .restoration import (
    QmoeWeights,
    RunDeps,
    SELECTION_QMOE,
    TRACE_VERSION,
    make_state,
    run_pipeline,
)
from .toolbox import TaskKind, ToolRegistry, default_registry

log = logging.getLogger(__name__)

# DepictQA is an IQA specialist; profiles that reason with it delegate
# plan scheduling to a general LLM slot instead.
_PLANNER_FOR_REASONER = {"depictqa": "gpt-4"}


@dataclass
class WorkerBindings:
    """Everything the engine may call out to. With no manifest, the
    native toolbox and scorers serve alone."""

    tools: ToolRegistry = field(default_factory=default_registry)
    metrics: MetricRegistry = field(default_factory=MetricRegistry)
    perception: dict = field(default_factory=dict)  # endpoint id -> URL
    detector_url: str | None = None
    embedder_url: str | None = None


def load_bindings(path=None) -> WorkerBindings:
    """Read a worker manifest. The document extends the tool-registry
    manifest with optional sections:

        {"tools": [...], "fast4k_threshold": N,         # tool registry
         "metrics": {"musiq": "http://...", ...},       # remote scorers
         "perception": {"depictqa": "http://...", ...}, # reasoner/planner
         "detector": "http://...", "embedder": "http://..."}

    Every section is optional; omitted ones fall back to the natives.
    """
    if path is None:
        return WorkerBindings()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RegistryInvalid(f"cannot read worker manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise RegistryInvalid(f"worker manifest {path} must hold an object")

    tools = (ToolRegistry.from_manifest(doc) if "tools" in doc
             else default_registry())

    metrics = MetricRegistry()
    for name, url in dict(doc.get("metrics", {})).items():
        try:
            kind = MetricKind(name)
        except ValueError as exc:
            raise RegistryInvalid(f"unknown metric {name!r} in manifest") from exc
        metrics.bind(RemoteScorer(endpoint=url, metric=kind))

    perception = {str(k): str(v) for k, v in dict(doc.get("perception", {})).items()}
    return WorkerBindings(
        tools=tools,
        metrics=metrics,
        perception=perception,
        detector_url=doc.get("detector"),
        embedder_url=doc.get("embedder"),
    )


@dataclass
class RunResult:
    image: ImageBuf
    trace: list
    plan: Plan
    scale: int | None
    description: str
    degradations: frozenset
    sr_step_survived: bool


def _engine_event(phase: str, decision: dict) -> dict:
    return {"v": TRACE_VERSION, "phase": phase, "step": 0, "task": None,
            "tool_id": None, "scores": None, "decision": decision}


def _reasoner_for(profile: Profile, bindings: WorkerBindings, brightening: bool):
    """The reasoning backend plus a fallback note when the profile asked
    for an endpoint nobody bound."""
    backend_id = profile.perception_backend
    if backend_id == RULE_BASED_BACKEND:
        return RuleBased(brightening_enabled=brightening), None
    url = bindings.perception.get(backend_id)
    if url is None:
        return (RuleBased(brightening_enabled=brightening),
                f"no endpoint bound for {backend_id!r}; using rule-based")
    return RemoteVLM(endpoint=url, brightening_enabled=brightening), None


def _planner_for(profile: Profile, bindings: WorkerBindings):
    planner_id = _PLANNER_FOR_REASONER.get(
        profile.perception_backend, profile.perception_backend)
    url = bindings.perception.get(planner_id)
    if url is None:
        return RuleBased()
    return RemoteLLM(endpoint=url)


def perceive(img: ImageBuf, profile: Profile, bindings: WorkerBindings,
             cfg: EffectiveConfig, trace: list):
    """Description, degradations, and the planned agenda for the input.

    An explicit restore option skips degradation reasoning outright. A
    remote reasoner that fails falls back to the rule-based one; both the
    fallback and the outcome land in the trace.
    """
    if cfg.skip_reasoning:
        base = resolve_agenda(cfg, [])
        trace.append(_engine_event("perceive", {
            "outcome": "skipped", "reason": "explicit restore option",
            "tasks": [s.task.value for s in base.steps]}))
        return "", frozenset(), base

    backend, warning = _reasoner_for(profile, bindings, cfg.brightening)
    if warning is not None:
        trace.append(_engine_event("perceive", {
            "outcome": "backend-fallback", "reason": warning}))
    q = analyze_iqa(img, bindings.metrics)
    try:
        result = reason_degradations(backend, img, q)
        provenance = ("rule-based" if isinstance(backend, RuleBased)
                      else "remote-vlm")
    except PixelplanError as exc:
        rb = RuleBased(brightening_enabled=cfg.brightening)
        trace.append(_engine_event("perceive", {
            "outcome": "backend-fallback",
            "reason": f"{exc.__class__.__name__}: {exc}"}))
        result = reason_degradations(rb, img, q)
        provenance = "rule-based-fallback"

    base = resolve_agenda(cfg, [s.task for s in result.initial_agenda.steps])
    trace.append(_engine_event("perceive", {
        "outcome": "ok",
        "provenance": provenance,
        "degradations": sorted(d.value for d in result.degradations),
        "description": result.description,
        "tasks": [s.task.value for s in base.steps]}))
    return result.description, result.degradations, base


def plan_run(img: ImageBuf, profile: Profile, bindings: WorkerBindings,
             *, rules: ExperienceRules | None = None, trace: list | None = None):
    """Perception and planning only: the ordered plan plus everything the
    restoration loop would need. No tool is applied."""
    trace = trace if trace is not None else []
    rules = rules or default_rules()
    cfg = effective_config(profile, img.width, img.height)
    description, degradations, base = perceive(img, profile, bindings, cfg, trace)

    scale_policy = Profile(upscale_to_4k=False, scale_factor=cfg.scale)
    agenda, total = configure_upscale(base, img.width, img.height, scale_policy)

    if not len(agenda):
        # clean input, no upscale wanted: nothing to schedule
        plan = Plan(steps=(), provenance="rule-based")
        trace.append(_engine_event("plan", {
            "outcome": "empty", "provenance": plan.provenance,
            "scale": total, "order": []}))
        return plan, cfg, description, degradations, trace

    planner = _planner_for(profile, bindings)
    plan = plan_tasks(planner, description, degradations, agenda, rules, [])
    trace.append(_engine_event("plan", {
        "outcome": "ok",
        "provenance": plan.provenance,
        "scale": total,
        "order": [s.task.value for s in plan.steps]}))
    return plan, cfg, description, degradations, trace


def run_image(img: ImageBuf, profile: Profile, bindings: WorkerBindings,
              *,
              weights: QmoeWeights = QmoeWeights(),
              face_weights: FaceWeights = FaceWeights(),
              rules: ExperienceRules | None = None,
              selection: str = SELECTION_QMOE,
              fast4k: bool = False,
              image_path=None,
              timeout_ms: int = 120_000,
              trace: list | None = None) -> RunResult:
    """The full pipeline: perceive, plan, execute with rollback, refine
    faces. ``image_path`` lets the face stage find sidecar annotations
    when no remote detector is bound. Passing ``trace`` hands ownership of
    the event list to the caller, which keeps the events gathered so far
    when the run dies mid-way.
    """
    rules = rules or default_rules()
    events = trace if trace is not None else []
    plan, cfg, description, degradations, _ = plan_run(
        img, profile, bindings, rules=rules, trace=events)

    state = make_state(img, plan)
    state.trace = events

    if plan.steps:
        deps = RunDeps(
            tools=bindings.tools,
            metrics=bindings.metrics,
            weights=weights,
            preference=cfg.preference,
            fast4k=fast4k,
            selection=selection,
            planner=_planner_for(profile, bindings),
            rules=rules,
            description=description,
            degradations=degradations,
            tool_timeout_ms=timeout_ms,
        )
        run_pipeline(state, deps)

    if cfg.face_stage:
        face_tools = bindings.tools.tools_for(
            TaskKind.FACE_RESTORATION, cfg.preference,
            image_max_side=max(state.current.width, state.current.height),
            fast4k=fast4k,
        )
        if bindings.detector_url is not None:
            detector = RemoteDetector(bindings.detector_url)
        elif image_path is not None:
            detector = TestDetector(image_path=image_path)
        else:
            detector = None
        embedder = (RemoteEmbedder(bindings.embedder_url)
                    if bindings.embedder_url is not None else TestEmbedder())
        restore_faces(
            state, face_tools, embedder, face_weights, bindings.metrics,
            detector=detector, qmoe_weights=weights, timeout_ms=timeout_ms,
        )

    return RunResult(
        image=state.current,
        trace=state.trace,
        plan=plan,
        scale=cfg.scale,
        description=description,
        degradations=degradations,
        sr_step_survived=state.sr_step_survived,
    )
