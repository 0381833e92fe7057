"""Face refinement stage: detect faces before and after upscaling, fan
each post-upscale face out through the face restorers plus an identity
candidate, pick per face by an identity-aware quality score, and paste
the winners back with a feathered seam.

The stage is a strict no-op unless the run upscaled (an SR step in the
plan whose output was applied) and the detector finds the same number of
faces before and after; mismatched counts mean detections cannot be put
in correspondence, so the whole stage steps aside rather than guess.

The per-candidate score combines identity preservation (cosine over face
embeddings against the pre-pipeline crop) with the same no-reference
blend the restoration stage uses plus a dedicated face-quality slot:
q_sf = w_ip * ip + w_iqa * (q_nr / 4 + q_cf).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DetectorUnavailable, PixelplanError, ProtocolError
from .imagecore import (
    ImageBuf,
    PixelRect,
    ResampleKernel,
    crop_region,
    paste_region,
    resize,
    rgb_to_luma,
)
from .metrics import MetricKind, MetricRegistry
from .restoration import (
    PipelineState,
    QmoeWeights,
    REFLECT_KINDS,
    TRACE_VERSION,
    recompute_qnr,
)
from .toolbox import TaskKind, apply_tool
from .workerproto.client import DEFAULT_TIMEOUT_MS, call_detect, call_embed
from .workerproto.schema import DetectRequest, EmbedRequest, image_to_b64

log = logging.getLogger(__name__)

PASTE_FEATHER = 3
EMBED_CROP_SIZE = 112
IDENTITY_TOOL_ID = "identity"


@dataclass(frozen=True)
class FaceWeights:
    w_ip: float = 0.001
    w_iqa: float = 1.0

    def __post_init__(self):
        if self.w_ip < 0 or self.w_iqa < 0:
            raise ValueError("face score weights must be >= 0")


@dataclass(frozen=True)
class FaceCandidateScore:
    """Per-candidate record: identity preservation, the no-reference
    blend, the face-quality slot, and their weighted combination."""

    tool_id: str
    ip: float
    q_nr: float
    q_cf: float
    q_sf: float

    def to_json_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "ip": self.ip,
            "q_nr": self.q_nr,
            "q_cf": self.q_cf,
            "q_sf": self.q_sf,
        }


def face_qsf(ip: float, q_nr: float, q_cf: float,
             weights: FaceWeights = FaceWeights()) -> float:
    return weights.w_ip * ip + weights.w_iqa * (q_nr / 4.0 + q_cf)


@dataclass(frozen=True)
class FaceSet:
    """Detections on the pipeline input (pre_sr) and output (post_sr),
    each a tuple of (rect, crop) in raster order."""

    pre_sr: tuple
    post_sr: tuple

    def __post_init__(self):
        for rect, crop in (*self.pre_sr, *self.post_sr):
            if (crop.width, crop.height) != (rect.w, rect.h):
                raise ValueError(
                    f"crop {crop.width}x{crop.height} does not match rect {rect}"
                )

    @property
    def count_pre(self) -> int:
        return len(self.pre_sr)

    @property
    def count_post(self) -> int:
        return len(self.post_sr)

    @property
    def matched(self) -> bool:
        return self.count_pre == self.count_post


# --- detection ----------------------------------------------------------------

@dataclass(frozen=True)
class TestDetector:
    """Fixture-driven detector. Rects come from an explicit list or from
    the image's sidecar annotation file (``<image path>.faces.json``, a
    JSON list of {x, y, w, h}); a missing sidecar means no faces."""

    __test__ = False  # despite the name, not a pytest class

    image_path: str | Path | None = None
    rects: tuple = ()

    def rects_for(self, img: ImageBuf) -> list:
        if self.rects:
            return list(self.rects)
        if self.image_path is None:
            return []
        sidecar = Path(f"{self.image_path}.faces.json")
        if not sidecar.exists():
            return []
        doc = json.loads(sidecar.read_text())
        return [_parse_rect(entry) for entry in doc]


@dataclass(frozen=True)
class RemoteDetector:
    endpoint: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS


def _parse_rect(entry) -> PixelRect:
    if not isinstance(entry, dict):
        raise ProtocolError(f"face entry must be an object, got {type(entry).__name__}")
    try:
        return PixelRect(x=int(entry["x"]), y=int(entry["y"]),
                         w=int(entry["w"]), h=int(entry["h"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed face rect {entry!r}: {exc}") from exc


def detect_faces(img: ImageBuf, backend) -> list:
    """Detected faces as (rect, crop) pairs in raster order (by rect
    origin, top-left first). A None backend detects nothing."""
    if backend is None:
        return []
    if isinstance(backend, TestDetector):
        rects = backend.rects_for(img)
    elif isinstance(backend, RemoteDetector):
        try:
            raw = call_detect(backend.endpoint, DetectRequest(image_to_b64(img)),
                              timeout_ms=backend.timeout_ms)
        except PixelplanError as exc:
            raise DetectorUnavailable(f"face detector failed: {exc}") from exc
        rects = _parse_detect_reply(raw)
    else:
        raise TypeError(f"unknown detector backend {type(backend).__name__}")
    rects.sort(key=lambda r: (r.y, r.x))
    return [(rect, crop_region(img, rect)) for rect in rects]


def _parse_detect_reply(raw: bytes) -> list:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"detect reply is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("faces"), list):
        raise ProtocolError("detect reply must be {\"faces\": [...]}")
    return [_parse_rect(entry) for entry in doc["faces"]]


# --- identity embedding --------------------------------------------------------

@dataclass(frozen=True)
class TestEmbedder:
    """Deterministic stand-in embedding: 32x32 grayscale resample of the
    crop, zero-mean, unit-norm. Good enough to rank identity drift in
    tests, no model involved."""

    __test__ = False  # despite the name, not a pytest class

    size: int = 32

    def embed(self, img: ImageBuf) -> np.ndarray:
        small = resize(img, self.size, self.size, ResampleKernel.BILINEAR)
        vec = rgb_to_luma(small).ravel().astype(np.float64)
        vec -= vec.mean()
        return _unit(vec)


@dataclass(frozen=True)
class RemoteEmbedder:
    endpoint: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    def embed(self, img: ImageBuf) -> np.ndarray:
        raw = call_embed(self.endpoint, EmbedRequest(image_to_b64(img)),
                         timeout_ms=self.timeout_ms)
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"embed reply is not JSON: {exc}") from exc
        vec = doc.get("embedding") if isinstance(doc, dict) else None
        if (not isinstance(vec, list) or not vec
                or not all(isinstance(v, (int, float)) for v in vec)):
            raise ProtocolError("embed reply must be {\"embedding\": [numbers]}")
        arr = np.asarray(vec, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ProtocolError("embedding values must be finite")
        return _unit(arr)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:  # featureless crop; cosine against it reads 0
        return np.zeros_like(vec)
    return vec / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# --- the face stage -------------------------------------------------------------

def restore_faces(
    state: PipelineState,
    face_tools,
    embedder,
    weights: FaceWeights,
    metrics: MetricRegistry,
    *,
    detector=None,
    qmoe_weights: QmoeWeights = QmoeWeights(),
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> ImageBuf:
    """Refine faces in state.current and return the patched image.

    No-op (input returned untouched) unless the plan upscaled, the SR
    output was applied, and pre/post face counts agree. Never raises:
    degraded detection or embedding downgrades to skipping or to weaker
    scores, with the reason in the trace.
    """
    skip = _gate_reason(state)
    if skip is None:
        try:
            faces = FaceSet(
                pre_sr=tuple(detect_faces(state.original, detector)),
                post_sr=tuple(detect_faces(state.current, detector)),
            )
        except (PixelplanError, ValueError) as exc:
            faces = None
            skip = f"detector failed: {exc}"
        if faces is not None and not faces.matched:
            skip = (f"face counts differ: {faces.count_pre} before, "
                    f"{faces.count_post} after")
        elif faces is not None and faces.count_post == 0:
            skip = "no faces detected"

    if skip is not None:
        state.trace.append(_face_event(
            "face-skip", state.step_index, decision={"outcome": "skip",
                                                     "reason": skip},
        ))
        return state.current

    out = state.current
    for index, ((_, ref_crop), (rect, crop)) in enumerate(
            zip(faces.pre_sr, faces.post_sr)):
        candidates = _face_candidates(state, index, crop, face_tools, timeout_ms)
        scores = _score_candidates(
            candidates, ref_crop, embedder, weights, qmoe_weights, metrics)
        state.trace.append(_face_event(
            "face-reflect", state.step_index,
            scores=[s.to_json_dict() for s in scores],
            decision={"face": index},
        ))
        best = 0
        for i in range(1, len(scores)):
            if scores[i].q_sf > scores[best].q_sf:
                best = i
        out = paste_region(out, candidates[best][1], rect, feather=PASTE_FEATHER)
        state.trace.append(_face_event(
            "face-select", state.step_index, tool_id=scores[best].tool_id,
            decision={
                "outcome": "paste",
                "face": index,
                "rect": {"x": rect.x, "y": rect.y, "w": rect.w, "h": rect.h},
                "q_sf": scores[best].q_sf,
            },
        ))
    state.current = out
    return out


def _gate_reason(state: PipelineState) -> str | None:
    """Why the stage must not run, or None when it may."""
    if state.original is None:
        return "no pre-pipeline image on the state"
    if not any(s.task is TaskKind.SUPER_RESOLUTION for s in state.plan.steps):
        return "plan has no super-resolution step"
    if not state.sr_step_survived:
        return "super-resolution output was not applied"
    return None


def _face_candidates(state, index, crop, face_tools, timeout_ms):
    """(tool_id, image) pairs: the crop itself first, then every face
    tool that completes; failures only shrink the list."""
    candidates = [(IDENTITY_TOOL_ID, crop)]
    for spec in face_tools:
        try:
            candidates.append(
                (spec.id, apply_tool(spec, crop, timeout_ms=timeout_ms)))
        except PixelplanError as exc:
            state.trace.append(_face_event(
                "face-execute", state.step_index, tool_id=spec.id,
                decision={"outcome": "tool-failed", "face": index,
                          "error": f"{exc.__class__.__name__}: {exc}"},
            ))
    return candidates


def _score_candidates(candidates, ref_crop, embedder, weights, qmoe_weights,
                      metrics):
    ref_vec = _safe_embed(embedder, ref_crop)
    has_cf = MetricKind.CLIB_FIQA in metrics.bound_kinds
    wanted = list(REFLECT_KINDS) + ([MetricKind.CLIB_FIQA] if has_cf else [])
    scores = []
    for tool_id, img in candidates:
        report = metrics.report(img, wanted)
        raw = {kind.wire_name: report.score(kind) for kind in REFLECT_KINDS}
        q_nr = recompute_qnr(raw, qmoe_weights)
        q_cf = report.score(MetricKind.CLIB_FIQA) if has_cf else None
        q_cf = 0.0 if q_cf is None else q_cf
        if ref_vec is None:
            ip = 0.0
        else:
            vec = _safe_embed(embedder, img)
            ip = 0.0 if vec is None else cosine_similarity(ref_vec, vec)
        scores.append(FaceCandidateScore(
            tool_id=tool_id, ip=ip, q_nr=q_nr, q_cf=q_cf,
            q_sf=face_qsf(ip, q_nr, q_cf, weights),
        ))
    return scores


def _safe_embed(embedder, img: ImageBuf):
    """Embedding of the 112x112-normalized crop, or None when the
    embedder is absent or failing (identity term degrades to 0)."""
    if embedder is None:
        return None
    try:
        prepared = resize(img, EMBED_CROP_SIZE, EMBED_CROP_SIZE)
        return embedder.embed(prepared)
    except (PixelplanError, ValueError) as exc:
        log.warning("face embedding failed, identity term drops to 0: %s", exc)
        return None


def _face_event(phase: str, step: int, task: str = TaskKind.FACE_RESTORATION.value,
                tool_id=None, scores=None, decision=None) -> dict:
    return {
        "v": TRACE_VERSION,
        "phase": phase,
        "step": step,
        "task": task,
        "tool_id": tool_id,
        "scores": scores,
        "decision": decision,
    }
