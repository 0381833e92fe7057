"""Perception stage: IQA analysis, degradation reasoning, upscale factor
configuration, and task planning under precedence rules.

Reasoning and planning each come in two backends: a native rule-based one
(threshold detectors, stable topological sort) and a remote one speaking
the worker protocol's reason/plan actions. Remote planners that misbehave
fall back to the rule-based path with a logged warning; remote reasoner
failures propagate so the caller can apply its own fallback policy.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

from .errors import (
    CyclicRules,
    LlmMalformedReply,
    ProtocolError,
    UnsupportedScale,
    VlmMalformedReply,
    WorkerError,
    WorkerUnreachable,
)
from .imagecore import ImageBuf, rgb_to_luma
from .metrics import MetricKind, MetricRegistry, MetricReport
from .toolbox import TaskKind
from .workerproto.client import DEFAULT_TIMEOUT_MS, call_plan, call_reason
from .workerproto.schema import VALID_SCALES, PlanRequest, ReasonRequest, image_to_b64

log = logging.getLogger(__name__)


class DegradationKind(Enum):
    NOISE = "noise"
    MOTION_BLUR = "motion-blur"
    DEFOCUS_BLUR = "defocus-blur"
    HAZE = "haze"
    RAIN = "rain"
    JPEG_ARTIFACT = "jpeg-artifact"
    LOW_LIGHT = "low-light"

    @classmethod
    def parse(cls, text: str) -> "DegradationKind":
        normalized = text.strip().lower().replace("_", "-").replace(" ", "-")
        for kind in cls:
            if kind.value == normalized:
                return kind
        raise ValueError(f"unknown degradation kind {text!r}")


TASK_FOR_DEGRADATION = {
    DegradationKind.NOISE: TaskKind.DENOISING,
    DegradationKind.MOTION_BLUR: TaskKind.MOTION_DEBLUR,
    DegradationKind.DEFOCUS_BLUR: TaskKind.DEFOCUS_DEBLUR,
    DegradationKind.HAZE: TaskKind.DEHAZING,
    DegradationKind.RAIN: TaskKind.DERAINING,
    DegradationKind.JPEG_ARTIFACT: TaskKind.JPEG_CAR,
    DegradationKind.LOW_LIGHT: TaskKind.BRIGHTENING,
}


@dataclass(frozen=True)
class AgendaStep:
    task: TaskKind
    params: dict = field(default_factory=dict)


@dataclass
class Agenda:
    """Ordered multiset of restoration steps."""

    steps: list = field(default_factory=list)

    @classmethod
    def from_tasks(cls, tasks) -> "Agenda":
        return cls([AgendaStep(task) for task in tasks])

    def tasks(self) -> list:
        return [step.task for step in self.steps]

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


@dataclass(frozen=True)
class PerceptionResult:
    description: str
    degradations: frozenset
    initial_agenda: Agenda


@dataclass(frozen=True)
class FailureNote:
    task: TaskKind
    note: str


@dataclass(frozen=True)
class Plan:
    steps: tuple
    provenance: str  # "rule-based" | "remote-llm" | "remote-llm-fallback"
    failures: tuple = ()  # failure notes carried for the next replan


# --- experience rules --------------------------------------------------------

@dataclass(frozen=True)
class ExperienceRules:
    """Precedence pairs (before, after); the induced relation must be a DAG."""

    pairs: tuple

    def __post_init__(self):
        cycle = _find_cycle_tasks(self.pairs)
        if cycle:
            names = ", ".join(task.value for task in cycle)
            raise CyclicRules(f"precedence rules contain a cycle among: {names}")

    @classmethod
    def load(cls, path) -> "ExperienceRules":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(_parse_rule_pairs(doc))

    def before(self, a: TaskKind, b: TaskKind) -> bool:
        return (a, b) in set(self.pairs)


def _parse_rule_pairs(doc) -> tuple:
    if not isinstance(doc, list):
        raise ValueError("rules file must be a JSON list of [before, after] pairs")
    pairs = []
    for i, entry in enumerate(doc):
        if (not isinstance(entry, list) or len(entry) != 2
                or not all(isinstance(x, str) for x in entry)):
            raise ValueError(f"rule #{i} is not a [before, after] string pair")
        try:
            pairs.append((TaskKind.parse(entry[0]), TaskKind.parse(entry[1])))
        except ValueError as exc:
            raise ValueError(f"rule #{i}: {exc}") from exc
    return tuple(pairs)


def _find_cycle_tasks(pairs) -> list:
    """Tasks left over after peeling indegree-zero nodes; empty iff DAG."""
    nodes = {task for pair in pairs for task in pair}
    succ = {task: set() for task in nodes}
    indeg = {task: 0 for task in nodes}
    for a, b in set(pairs):
        if b not in succ[a]:
            succ[a].add(b)
            indeg[b] += 1
    queue = deque(sorted((t for t in nodes if indeg[t] == 0), key=lambda t: t.value))
    seen = 0
    while queue:
        node = queue.popleft()
        seen += 1
        for nxt in succ[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if seen == len(nodes):
        return []
    return sorted((t for t in nodes if indeg[t] > 0), key=lambda t: t.value)


@lru_cache(maxsize=1)
def default_rules() -> ExperienceRules:
    """The shipped precedence file: brighten first, clean before upscale,
    super-resolution last."""
    path = Path(__file__).resolve().parent / "data" / "experience_rules.json"
    return ExperienceRules.load(path)


# --- backends ----------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds for the rule-based detectors. ``texture_floor`` gates the
    blur detectors: an image with no mid-band texture at all (a flat or
    constant-gradient field) carries no evidence of lost sharpness, only
    absence of content."""

    noise_sigma: float = 0.02
    blur_lap_var: float = 1e-3
    blur_anisotropy: float = 2.0
    blockiness_ratio: float = 1.15
    dark_channel_mean: float = 0.6
    low_light_luma: float = 0.25
    texture_floor: float = 1e-5


@dataclass(frozen=True)
class RuleBased:
    config: DetectorConfig = DetectorConfig()
    brightening_enabled: bool = False


@dataclass(frozen=True)
class RemoteVLM:
    endpoint: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    brightening_enabled: bool = False


@dataclass(frozen=True)
class RemoteLLM:
    endpoint: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS


# --- IQA analysis ------------------------------------------------------------

_ANALYSIS_KINDS = (MetricKind.CLIPIQA, MetricKind.TOPIQ, MetricKind.MUSIQ)


def analyze_iqa(img: ImageBuf, registry: MetricRegistry) -> MetricReport:
    """No-reference quality report for the input: native NIQE always, the
    remote analysis metrics iff their scorers are bound. A metric that
    cannot be computed is flagged unavailable, never defaulted; analysis
    does not abort on scorer failure."""
    wanted = [MetricKind.NIQE]
    wanted.extend(k for k in _ANALYSIS_KINDS if k in registry.bound_kinds)
    report = registry.report(img, wanted)
    for kind in wanted:
        if not report.available(kind):
            log.warning("IQA metric %s unavailable for this input", kind.wire_name)
    return report


# --- degradation reasoning ---------------------------------------------------

@dataclass(frozen=True)
class DetectorStats:
    """Raw statistics the rule-based detectors threshold on."""

    lap_var: float
    noise_sigma: float
    anisotropy: float
    texture_var: float
    blockiness: float
    dark_channel: float
    mean_luma: float


def detector_stats(img: ImageBuf) -> DetectorStats:
    luma = rgb_to_luma(img).astype(np.float64)

    lap = cv2.Laplacian(luma, cv2.CV_64F, ksize=1)
    lap_var = float(np.var(lap))
    # MAD of the Laplacian response, scaled by the kernel's noise gain
    # (sum of squared coefficients is 20) and the normal-consistency
    # constant, estimates the additive-noise sigma.
    mad = float(np.median(np.abs(lap - np.median(lap))))
    noise_sigma = mad / 0.6745 / math.sqrt(20.0)

    gx = cv2.Sobel(luma, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(luma, cv2.CV_64F, 0, 1, ksize=3)
    jxx = float((gx * gx).sum())
    jxy = float((gx * gy).sum())
    jyy = float((gy * gy).sum())
    half_trace = (jxx + jyy) / 2.0
    disc = math.sqrt(max(half_trace * half_trace - (jxx * jyy - jxy * jxy), 0.0))
    anisotropy = (half_trace + disc) / max(half_trace - disc, 1e-12)

    band = cv2.GaussianBlur(luma, (0, 0), 1.0) - cv2.GaussianBlur(luma, (0, 0), 4.0)
    texture_var = float(np.var(band))

    blockiness = _grid_blockiness(luma)

    hwc = img.to_hwc().astype(np.float64)
    dark = cv2.erode(hwc.min(axis=2), np.ones((15, 15), np.uint8))

    return DetectorStats(
        lap_var=lap_var,
        noise_sigma=noise_sigma,
        anisotropy=anisotropy,
        texture_var=texture_var,
        blockiness=blockiness,
        dark_channel=float(dark.mean()),
        mean_luma=float(luma.mean()),
    )


def _grid_blockiness(luma: np.ndarray) -> float:
    """Mean luma step across 8-pixel grid seams over the mean step elsewhere.
    Reads 1.0 on seam-free content."""
    h, w = luma.shape
    if h < 9 or w < 9:
        return 1.0
    dcol = np.abs(np.diff(luma, axis=1))
    drow = np.abs(np.diff(luma, axis=0))
    cols = np.arange(w - 1)
    rows = np.arange(h - 1)
    on_grid = (cols + 1) % 8 == 0
    on = float(dcol[:, on_grid].mean()) + float(drow[(rows + 1) % 8 == 0].mean())
    off = float(dcol[:, ~on_grid].mean()) + float(drow[(rows + 1) % 8 != 0].mean())
    return on / max(off, 1e-12)


def _agenda_for(degradations) -> Agenda:
    ordered = [kind for kind in DegradationKind if kind in degradations]
    return Agenda.from_tasks(TASK_FOR_DEGRADATION[kind] for kind in ordered)


def _reason_rule_based(backend: RuleBased, img: ImageBuf) -> PerceptionResult:
    cfg = backend.config
    stats = detector_stats(img)
    found = set()
    if stats.noise_sigma > cfg.noise_sigma:
        found.add(DegradationKind.NOISE)
    # blur calls need texture: a featureless field has nothing to have
    # blurred, and its gradient statistics are dominated by the DC ramp
    if stats.texture_var > cfg.texture_floor and stats.lap_var < cfg.blur_lap_var:
        if stats.anisotropy >= cfg.blur_anisotropy:
            found.add(DegradationKind.MOTION_BLUR)
        else:
            found.add(DegradationKind.DEFOCUS_BLUR)
    if stats.blockiness > cfg.blockiness_ratio:
        found.add(DegradationKind.JPEG_ARTIFACT)
    if stats.dark_channel > cfg.dark_channel_mean:
        found.add(DegradationKind.HAZE)
    if backend.brightening_enabled and stats.mean_luma < cfg.low_light_luma:
        found.add(DegradationKind.LOW_LIGHT)
    description = (
        f"unlabeled scene, {img.width}x{img.height} px, "
        f"mean luminance {stats.mean_luma:.2f}"
    )
    return PerceptionResult(
        description=description,
        degradations=frozenset(found),
        initial_agenda=_agenda_for(found),
    )


def _reason_remote(backend: RemoteVLM, img: ImageBuf,
                   q: MetricReport) -> PerceptionResult:
    req = ReasonRequest(image=image_to_b64(img), metrics=q.to_json_dict())
    raw = call_reason(backend.endpoint, req, timeout_ms=backend.timeout_ms)
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VlmMalformedReply(f"reasoner reply is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise VlmMalformedReply("reasoner reply is not a JSON object")
    if "degradations" not in doc or "image_description" not in doc:
        raise VlmMalformedReply(
            "reasoner reply must have keys 'degradations' and 'image_description'"
        )
    names = doc["degradations"]
    description = doc["image_description"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise VlmMalformedReply("'degradations' must be a list of strings")
    if not isinstance(description, str):
        raise VlmMalformedReply("'image_description' must be a string")
    found = set()
    for name in names:
        try:
            found.add(DegradationKind.parse(name))
        except ValueError as exc:
            raise VlmMalformedReply(str(exc)) from exc
    if not backend.brightening_enabled:
        found.discard(DegradationKind.LOW_LIGHT)
    return PerceptionResult(
        description=description,
        degradations=frozenset(found),
        initial_agenda=_agenda_for(found),
    )


def reason_degradations(backend, img: ImageBuf, q: MetricReport) -> PerceptionResult:
    """Detect degradations and describe the input.

    The rule-based backend thresholds measured statistics; the remote
    backend ships the image and metric report to a reasoner endpoint and
    parses its strict-JSON reply (unknown degradation names are rejected).
    Low-light participates only when the backend has brightening enabled.
    """
    if isinstance(backend, RuleBased):
        return _reason_rule_based(backend, img)
    if isinstance(backend, RemoteVLM):
        return _reason_remote(backend, img, q)
    raise TypeError(f"unknown reasoning backend {type(backend).__name__}")


# --- upscale configuration ---------------------------------------------------

class UpscalePolicy(Protocol):
    """The two profile fields configure_upscale reads."""

    upscale_to_4k: bool
    scale_factor: int | None


_SR_FACTORS = {16: (4, 4), 8: (4, 2), 4: (4,), 2: (2,)}


def upscale_factor(max_side: int) -> int:
    """Smallest scale in {2,4,8,16} that reaches 4000 px on the longer
    side, else 16."""
    for s in (2, 4, 8, 16):
        if max_side * s >= 4000:
            return s
    return 16


def configure_upscale(agenda: Agenda, img_w: int, img_h: int,
                      profile: UpscalePolicy) -> tuple:
    """Append super-resolution steps to a copy of the agenda.

    An explicit profile scale wins; otherwise the 4K target picks the
    factor from the image's longer side; with neither, the agenda is
    returned unchanged with scale None. The factor is decomposed over
    {4, 2} largest-first, so every step is a scale a tool can serve.
    """
    explicit = getattr(profile, "scale_factor", None)
    if explicit is not None:
        s = int(explicit)
        if s not in VALID_SCALES:
            raise UnsupportedScale(f"profile scale {s} not in {list(VALID_SCALES)}")
    elif getattr(profile, "upscale_to_4k", False):
        s = upscale_factor(max(img_w, img_h))
    else:
        return Agenda(list(agenda.steps)), None
    steps = list(agenda.steps)
    steps.extend(
        AgendaStep(TaskKind.SUPER_RESOLUTION, {"scale": f}) for f in _SR_FACTORS[s]
    )
    return Agenda(steps), s


# --- task planning -----------------------------------------------------------

def plan_tasks(backend, c: str, d, agenda: Agenda, rules: ExperienceRules,
               failures: Sequence = ()) -> Plan:
    """Order the agenda into a plan.

    The output is always a permutation of the agenda. Rule-based planning
    is a stable topological sort under the precedence rules; a task named
    in ``failures`` is kept out of position 0, breaking a precedence rule
    if that is the only way. Remote planners are validated against the
    same contract and fall back to rule-based when they misbehave.
    Single-step agendas short-circuit: there is only one permutation.
    """
    if not len(agenda):
        raise ValueError("agenda is empty")
    failed_tasks = {note.task for note in failures}
    notes = tuple(f"{note.task.value}: {note.note}" for note in failures)

    if len(agenda) == 1:
        only = agenda.steps[0]
        if only.task in failed_tasks:
            log.warning(
                "single-task agenda: %s leads despite earlier failure",
                only.task.value,
            )
        return Plan(steps=(only,), provenance="rule-based", failures=notes)

    provenance = "rule-based"
    if isinstance(backend, RemoteLLM):
        try:
            steps = _plan_remote(backend, c, d, agenda, rules, failed_tasks)
            return Plan(steps=steps, provenance="remote-llm", failures=notes)
        except (LlmMalformedReply, WorkerUnreachable, WorkerError,
                ProtocolError) as exc:
            log.warning("planner endpoint misbehaved (%s); using rule-based", exc)
            provenance = "remote-llm-fallback"
    elif not isinstance(backend, RuleBased):
        raise TypeError(f"unknown planning backend {type(backend).__name__}")

    steps = _plan_toposort(agenda, rules, failed_tasks)
    return Plan(steps=steps, provenance=provenance, failures=notes)


def _plan_toposort(agenda: Agenda, rules: ExperienceRules, failed_tasks) -> tuple:
    pair_set = set(rules.pairs)
    steps = list(agenda.steps)
    n = len(steps)
    preds = [
        {j for j in range(n) if j != i and (steps[j].task, steps[i].task) in pair_set}
        for i in range(n)
    ]
    remaining = list(range(n))
    out = []
    while remaining:
        left = set(remaining)
        ready = [i for i in remaining if not (preds[i] & left)]
        if not out:
            pick = next((i for i in ready if steps[i].task not in failed_tasks), None)
            if pick is None:
                # honoring failed-not-first outranks the precedence rules;
                # take the first non-failed step even if its predecessors
                # have not run
                pick = next(
                    (i for i in remaining if steps[i].task not in failed_tasks), None
                )
                if pick is None:
                    pick = ready[0]
                    log.warning(
                        "every agenda task failed earlier; %s leads anyway",
                        steps[pick].task.value,
                    )
                else:
                    log.warning(
                        "precedence rules would put failed task %s first; "
                        "%s leads instead",
                        steps[ready[0]].task.value, steps[pick].task.value,
                    )
        else:
            pick = ready[0]
        remaining.remove(pick)
        out.append(steps[pick])
    return tuple(out)


def _plan_remote(backend: RemoteLLM, c: str, d, agenda: Agenda,
                 rules: ExperienceRules, failed_tasks) -> tuple:
    req = PlanRequest(
        description=c,
        degradations=tuple(sorted(kind.value for kind in d)),
        tasks=tuple(step.task.value for step in agenda.steps),
        failed=tuple(sorted(task.value for task in failed_tasks)),
        rules=tuple((a.value, b.value) for a, b in rules.pairs),
    )
    raw = call_plan(backend.endpoint, req, timeout_ms=backend.timeout_ms)
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LlmMalformedReply(f"planner reply is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or "plan" not in doc:
        raise LlmMalformedReply("planner reply must be an object with key 'plan'")
    names = doc["plan"]
    if not isinstance(names, list) or not all(isinstance(x, str) for x in names):
        raise LlmMalformedReply("'plan' must be a list of task names")
    try:
        ordered = [TaskKind.parse(name) for name in names]
    except ValueError as exc:
        raise LlmMalformedReply(str(exc)) from exc
    if Counter(ordered) != Counter(step.task for step in agenda.steps):
        raise LlmMalformedReply("planner reply is not a permutation of the agenda")
    if ordered and ordered[0] in failed_tasks:
        raise LlmMalformedReply(
            f"planner put failed task {ordered[0].value} at position 0"
        )
    pools = {}
    for step in agenda.steps:
        pools.setdefault(step.task, deque()).append(step)
    return tuple(pools[task].popleft() for task in ordered)
