"""Restoration stage: per-step tool fan-out, quality-weighted candidate
selection, and the rollback/compromise state machine.

Each plan step runs every eligible tool, scores every survivor with the
no-reference metric blend (plus the preference model when a scorer is
bound), and keeps the argmax. A chosen score at or below eta fails the
step: the pipeline records the failure, asks the planner to reorder the
remaining agenda with failed tasks barred from the front, and tries the
new head. When every remaining task has already failed, the compromise
pass re-executes them in original plan order and accepts the best
candidate regardless of eta.

The trace is an append-only list of fixed-schema events; writing it as
JSON lines gives a replayable record of every decision.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .errors import (
    AllToolsFailed,
    NoToolAvailable,
    PixelplanError,
    PlanExhausted,
    WorkerUnreachable,
)
from .imagecore import ImageBuf
from .metrics import MetricKind, MetricRegistry
from .perception import (
    Agenda,
    AgendaStep,
    ExperienceRules,
    FailureNote,
    Plan,
    RuleBased,
    default_rules,
    plan_tasks,
)
from .toolbox import Preference, TaskKind, ToolRegistry, apply_tool

log = logging.getLogger(__name__)

TRACE_VERSION = 1

REFLECT_KINDS = (
    MetricKind.NIQE,
    MetricKind.MUSIQ,
    MetricKind.MANIQA,
    MetricKind.CLIPIQA,
)

SELECTION_QMOE = "qmoe"
SELECTION_FIRST_ACCEPTABLE = "first-acceptable"


@dataclass(frozen=True)
class QmoeWeights:
    w_niqe: float = 1.0
    w_musiq: float = 0.01
    w_maniqa: float = 1.0
    w_clipiqa: float = 1.0
    eta: float = 0.5

    def __post_init__(self):
        for name in ("w_niqe", "w_musiq", "w_maniqa", "w_clipiqa"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class QualityScores:
    """Per-candidate record: raw metric values (None when unavailable),
    the blended no-reference score, the preference score, and their
    combination."""

    tool_id: str
    raw: dict
    q_nr: float
    h: float
    q_s: float

    def to_json_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "raw": dict(self.raw),
            "q_nr": self.q_nr,
            "h": self.h,
            "q_s": self.q_s,
        }


@dataclass(frozen=True)
class Candidate:
    tool_id: str
    image: ImageBuf


@dataclass
class StepOutcome:
    candidates: list
    scores: list
    chosen: int
    rolled_back: bool


@dataclass
class PipelineState:
    """Mutable run state. ``plan`` keeps the original order (the
    compromise pass reverts to it); ``remaining`` is the still-pending
    suffix in its current, possibly replanned, order. ``original`` is the
    untouched input, kept as the identity reference for the face stage."""

    current: ImageBuf
    plan: Plan
    remaining: list = field(default_factory=list)
    step_index: int = 0
    history: list = field(default_factory=list)  # of (image, tool_id, q_s)
    failure_notes: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    sr_step_survived: bool = False
    original: ImageBuf | None = None


def make_state(image: ImageBuf, plan: Plan) -> PipelineState:
    return PipelineState(current=image, plan=plan, remaining=list(plan.steps),
                         original=image)


class ToolPolicy(Protocol):
    """What execute_step needs to know about the run configuration."""

    preference: Preference
    fast4k: bool


@dataclass
class RunDeps:
    """Everything run_pipeline consumes besides the state itself."""

    tools: ToolRegistry
    metrics: MetricRegistry
    weights: QmoeWeights = QmoeWeights()
    preference: Preference = Preference.PERCEPTION
    fast4k: bool = False
    selection: str = SELECTION_QMOE
    planner: object = None  # RuleBased | RemoteLLM; default rule-based
    rules: ExperienceRules | None = None
    description: str = ""
    degradations: frozenset = frozenset()
    tool_timeout_ms: int = 120_000

    def __post_init__(self):
        if self.selection not in (SELECTION_QMOE, SELECTION_FIRST_ACCEPTABLE):
            raise ValueError(f"unknown selection policy {self.selection!r}")
        if self.planner is None:
            self.planner = RuleBased()
        if self.rules is None:
            self.rules = default_rules()


def _event(phase: str, step: int, task=None, tool_id=None, scores=None,
           decision=None) -> dict:
    return {
        "v": TRACE_VERSION,
        "phase": phase,
        "step": step,
        "task": task,
        "tool_id": tool_id,
        "scores": scores,
        "decision": decision,
    }


def dump_trace(trace: Sequence) -> str:
    """Trace as JSON lines, one event per line, canonical key order."""
    return "".join(
        json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n"
        for event in trace
    )


def write_trace(trace: Sequence, path: str | Path) -> None:
    Path(path).write_text(dump_trace(trace))


# --- execution ---------------------------------------------------------------

def execute_step(state: PipelineState, step: AgendaStep, reg: ToolRegistry,
                 policy: ToolPolicy, *, context: str | None = None,
                 timeout_ms: int = 120_000) -> list:
    """Fan the current image out through every eligible tool. Failed tools
    are dropped with a trace entry; the step survives as long as one
    candidate does."""
    img = state.current
    specs = reg.tools_for(
        step.task, policy.preference,
        image_max_side=max(img.width, img.height),
        fast4k=policy.fast4k,
    )
    if not specs:
        raise NoToolAvailable(
            f"no {policy.preference.value} tools registered for {step.task.value}"
        )
    candidates = []
    failures = []
    unreachable = []
    for spec in specs:
        try:
            out = apply_tool(
                spec, img,
                scale=step.params.get("scale"),
                context=context,
                timeout_ms=timeout_ms,
            )
        except PixelplanError as exc:
            failures.append(f"{spec.id}: {exc.__class__.__name__}: {exc}")
            # apply_tool wraps transport errors in ToolFailed; the cause
            # chain still says whether the worker was down
            cause = exc if isinstance(exc, WorkerUnreachable) else exc.__cause__
            if isinstance(cause, WorkerUnreachable) and not spec.is_native:
                unreachable.append(spec.backend.endpoint)
            state.trace.append(_event(
                "execute", state.step_index, task=step.task.value,
                tool_id=spec.id,
                decision={"outcome": "tool-failed",
                          "error": f"{exc.__class__.__name__}: {exc}"},
            ))
            continue
        state.trace.append(_event(
            "execute", state.step_index, task=step.task.value, tool_id=spec.id,
            decision={"outcome": "ok"},
        ))
        candidates.append(Candidate(tool_id=spec.id, image=out))
    if not candidates:
        raise AllToolsFailed(
            f"every tool failed for task {step.task.value} "
            f"({'; '.join(failures)})",
            unreachable=unreachable,
        )
    return candidates


# --- reflection --------------------------------------------------------------

def recompute_qnr(raw: dict, weights: QmoeWeights) -> float:
    """Blend a raw-value record into q_nr; absent metrics contribute 0."""
    total = 0.0
    niqe = raw.get(MetricKind.NIQE.wire_name)
    if niqe is not None:
        total += weights.w_niqe * (1.0 - min(niqe, 10.0) / 10.0)
    musiq = raw.get(MetricKind.MUSIQ.wire_name)
    if musiq is not None:
        total += weights.w_musiq * musiq
    maniqa = raw.get(MetricKind.MANIQA.wire_name)
    if maniqa is not None:
        total += weights.w_maniqa * maniqa
    clipiqa = raw.get(MetricKind.CLIPIQA.wire_name)
    if clipiqa is not None:
        total += weights.w_clipiqa * clipiqa
    return total


def reflect(candidates: Sequence, c: str, weights: QmoeWeights,
            metrics: MetricRegistry) -> list:
    """Score every candidate: the four no-reference metrics blend into
    q_nr, the preference model contributes h when a scorer is bound (0
    otherwise), and q_s = h + q_nr / 4. Metric failures degrade to
    absence, never abort."""
    if not candidates:
        raise ValueError("reflect needs at least one candidate")
    has_pref = MetricKind.HPSV2 in metrics.bound_kinds
    wanted = list(REFLECT_KINDS) + ([MetricKind.HPSV2] if has_pref else [])
    out = []
    for cand in candidates:
        report = metrics.report(cand.image, wanted, context=c)
        raw = {kind.wire_name: report.score(kind) for kind in REFLECT_KINDS}
        q_nr = recompute_qnr(raw, weights)
        h = report.score(MetricKind.HPSV2) if has_pref else None
        h = 0.0 if h is None else h
        out.append(QualityScores(
            tool_id=cand.tool_id, raw=raw, q_nr=q_nr, h=h, q_s=h + q_nr / 4.0,
        ))
    return out


# --- selection ---------------------------------------------------------------

def select_best(scores: Sequence) -> int:
    """Argmax of q_s; ties keep the earliest candidate, which is registry
    order."""
    if not scores:
        raise ValueError("select_best needs at least one score")
    best = 0
    for i in range(1, len(scores)):
        if scores[i].q_s > scores[best].q_s:
            best = i
    return best


def _choose(scores: Sequence, selection: str, eta: float) -> int:
    if selection == SELECTION_FIRST_ACCEPTABLE:
        for i, score in enumerate(scores):
            if score.q_s > eta:
                return i
    return select_best(scores)


# --- the pipeline loop -------------------------------------------------------

def run_pipeline(state: PipelineState, deps: RunDeps) -> tuple:
    """Run the full execute/reflect/select loop with rollback.

    Returns (final image, trace). The trace lists every event; the state
    carries history and the sr_step_survived flag for the face stage.
    """
    if not state.remaining:
        raise ValueError("plan is empty")
    failed_tasks = {note.task for note in state.failure_notes}

    while state.remaining:
        if all(step.task in failed_tasks for step in state.remaining):
            _run_compromise(state, deps)
            break
        step = state.remaining[0]
        outcome = _attempt(state, step, deps)
        chosen = outcome.scores[outcome.chosen]
        if not outcome.rolled_back:
            _accept(state, step, outcome, compromise=False)
            continue
        # failure: keep the current image, bar the task from the front,
        # and ask the planner for a new order over what is left
        state.failure_notes.append(FailureNote(
            task=step.task,
            note=f"best candidate {chosen.tool_id} scored "
                 f"q_s={chosen.q_s:.4f} <= eta={deps.weights.eta}",
        ))
        failed_tasks.add(step.task)
        if all(s.task in failed_tasks for s in state.remaining):
            continue  # the loop head enters the compromise pass
        new_plan = plan_tasks(
            deps.planner, deps.description, deps.degradations,
            Agenda(list(state.remaining)), deps.rules,
            state.failure_notes,
        )
        state.remaining = list(new_plan.steps)
        state.trace.append(_event(
            "replan", state.step_index,
            decision={
                "outcome": "replan",
                "provenance": new_plan.provenance,
                "order": [s.task.value for s in new_plan.steps],
            },
        ))
    return state.current, state.trace


def _attempt(state: PipelineState, step: AgendaStep, deps: RunDeps,
             *, compromise: bool = False) -> StepOutcome:
    candidates = execute_step(
        state, step, deps.tools, deps,
        context=deps.description or None,
        timeout_ms=deps.tool_timeout_ms,
    )
    scores = reflect(candidates, deps.description, deps.weights, deps.metrics)
    state.trace.append(_event(
        "reflect", state.step_index, task=step.task.value,
        scores=[s.to_json_dict() for s in scores],
    ))
    chosen = _choose(scores, deps.selection, deps.weights.eta)
    rolled_back = scores[chosen].q_s <= deps.weights.eta and not compromise
    state.trace.append(_event(
        "select", state.step_index, task=step.task.value,
        tool_id=scores[chosen].tool_id,
        decision={
            "outcome": "rollback" if rolled_back else "accept",
            "q_s": scores[chosen].q_s,
            "params": dict(step.params),
            "compromise": compromise,
        },
    ))
    return StepOutcome(
        candidates=candidates, scores=scores, chosen=chosen,
        rolled_back=rolled_back,
    )


def _accept(state: PipelineState, step: AgendaStep, outcome: StepOutcome,
            *, compromise: bool) -> None:
    chosen = outcome.scores[outcome.chosen]
    state.current = outcome.candidates[outcome.chosen].image
    state.history.append((state.current, chosen.tool_id, chosen.q_s))
    state.step_index += 1
    state.remaining.remove(step)
    if step.task is TaskKind.SUPER_RESOLUTION:
        state.sr_step_survived = True


def _run_compromise(state: PipelineState, deps: RunDeps) -> None:
    """Execute what is left in original plan order, accepting the best
    candidate of each step even below eta."""
    order = _original_order(state)
    state.trace.append(_event(
        "compromise", state.step_index,
        decision={"outcome": "compromise",
                  "order": [s.task.value for s in order]},
    ))
    for step in order:
        try:
            outcome = _attempt(state, step, deps, compromise=True)
        except AllToolsFailed as exc:
            raise PlanExhausted(
                f"compromise pass could not execute {step.task.value}: {exc}"
            ) from exc
        _accept(state, step, outcome, compromise=True)


def _original_order(state: PipelineState) -> list:
    """The remaining steps, ordered as the original plan had them."""
    pending = list(state.remaining)
    ordered = []
    for step in state.plan.steps:
        if step in pending:
            pending.remove(step)
            ordered.append(step)
    ordered.extend(pending)  # steps injected after planning, if any
    return ordered
