"""Wire types for the worker protocol, version 1.

Transport is HTTP/1.1 POST with JSON bodies at /v1/apply, /v1/score and
/v1/health, plus the perception actions at /v1/reason and /v1/plan and
the face-stage actions at /v1/detect and /v1/embed. Images travel as
base64 PNG. The JSON forms produced by ``to_wire`` are canonical (sorted
keys, compact separators) so fixtures can be byte-compared.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

from ..errors import ProtocolError
from ..imagecore import ImageBuf, decode_image, encode_png

PROTOCOL_VERSION = 1
MAX_REQUEST_BYTES = 256 * 1024 * 1024
VALID_SCALES = (2, 4, 8, 16)
ERROR_CODES = ("bad_request", "unsupported", "internal", "overloaded")

APPLY_PATH = "/v1/apply"
SCORE_PATH = "/v1/score"
HEALTH_PATH = "/v1/health"
REASON_PATH = "/v1/reason"
PLAN_PATH = "/v1/plan"
DETECT_PATH = "/v1/detect"
EMBED_PATH = "/v1/embed"


def image_to_b64(img: ImageBuf) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def b64_to_image(data: str) -> ImageBuf:
    try:
        raw = base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"invalid base64 image: {exc}") from exc
    return decode_image(raw)


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _require(doc: dict, key: str, kinds) -> object:
    if key not in doc:
        raise ProtocolError(f"missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kinds):
        raise ProtocolError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _check_version(doc: dict) -> None:
    version = _require(doc, "protocol_version", int)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported version {version}")


@dataclass(frozen=True)
class ApplyRequest:
    """Apply call payload. The scale-in-{2,4,8,16} invariant is enforced
    by the worker (bad_request), so invalid requests stay constructible
    for testing that path."""

    task: str
    tool_id: str
    image: str  # base64 PNG
    params: dict = field(default_factory=dict)
    context: str | None = None

    def to_wire(self) -> bytes:
        doc = {
            "protocol_version": PROTOCOL_VERSION,
            "task": self.task,
            "tool_id": self.tool_id,
            "image": self.image,
            "params": self.params,
        }
        if self.context is not None:
            doc["context"] = self.context
        return _canonical(doc)

    @classmethod
    def from_wire(cls, raw: bytes) -> "ApplyRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        ctx = doc.get("context")
        if ctx is not None and not isinstance(ctx, str):
            raise ProtocolError("field 'context' has wrong type")
        return cls(
            task=_require(doc, "task", str),
            tool_id=_require(doc, "tool_id", str),
            image=_require(doc, "image", str),
            params=_require(doc, "params", dict),
            context=ctx,
        )


@dataclass(frozen=True)
class ApplyResponse:
    image: str
    elapsed_ms: int
    meta: dict = field(default_factory=dict)

    def to_wire(self) -> bytes:
        return _canonical(
            {"image": self.image, "elapsed_ms": self.elapsed_ms, "meta": self.meta}
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "ApplyResponse":
        doc = _parse_json(raw)
        elapsed = _require(doc, "elapsed_ms", int)
        if elapsed < 0:
            raise ProtocolError("elapsed_ms negative")
        return cls(
            image=_require(doc, "image", str),
            elapsed_ms=elapsed,
            meta=_require(doc, "meta", dict),
        )


@dataclass(frozen=True)
class ScoreRequest:
    metric: str
    image: str
    context: str | None = None

    def to_wire(self) -> bytes:
        doc = {
            "protocol_version": PROTOCOL_VERSION,
            "metric": self.metric,
            "image": self.image,
        }
        if self.context is not None:
            doc["context"] = self.context
        return _canonical(doc)

    @classmethod
    def from_wire(cls, raw: bytes) -> "ScoreRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        ctx = doc.get("context")
        if ctx is not None and not isinstance(ctx, str):
            raise ProtocolError("field 'context' has wrong type")
        return cls(
            metric=_require(doc, "metric", str),
            image=_require(doc, "image", str),
            context=ctx,
        )


@dataclass(frozen=True)
class ScoreResponse:
    score: float

    def to_wire(self) -> bytes:
        return _canonical({"score": self.score})

    @classmethod
    def from_wire(cls, raw: bytes) -> "ScoreResponse":
        doc = _parse_json(raw)
        score = _require(doc, "score", (int, float))
        return cls(score=float(score))

    @property
    def finite(self) -> bool:
        return math.isfinite(self.score)


@dataclass(frozen=True)
class ReasonRequest:
    """Degradation-reasoning call: the image plus its metric report.

    The reply is a bare JSON object with exactly the keys `degradations`
    (list of degradation names) and `image_description` (string); reply
    validation lives with the perception stage, which knows the legal
    degradation vocabulary.
    """

    image: str  # base64 PNG
    metrics: dict  # MetricReport.to_json_dict() form

    def to_wire(self) -> bytes:
        return _canonical(
            {
                "protocol_version": PROTOCOL_VERSION,
                "action": "reason",
                "image": self.image,
                "metrics": self.metrics,
            }
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "ReasonRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        action = _require(doc, "action", str)
        if action != "reason":
            raise ProtocolError(f"expected action 'reason', got {action!r}")
        return cls(
            image=_require(doc, "image", str),
            metrics=_require(doc, "metrics", dict),
        )


@dataclass(frozen=True)
class DetectRequest:
    """Face-detection call. The reply is a bare JSON object
    {"faces": [{"x", "y", "w", "h"}, ...]}; the face stage validates it."""

    image: str  # base64 PNG

    def to_wire(self) -> bytes:
        return _canonical(
            {
                "protocol_version": PROTOCOL_VERSION,
                "action": "detect",
                "image": self.image,
            }
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "DetectRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        action = _require(doc, "action", str)
        if action != "detect":
            raise ProtocolError(f"expected action 'detect', got {action!r}")
        return cls(image=_require(doc, "image", str))


@dataclass(frozen=True)
class EmbedRequest:
    """Identity-embedding call. The reply is a bare JSON object
    {"embedding": [floats]}; the face stage normalizes and validates it."""

    image: str  # base64 PNG

    def to_wire(self) -> bytes:
        return _canonical(
            {
                "protocol_version": PROTOCOL_VERSION,
                "action": "embed",
                "image": self.image,
            }
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "EmbedRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        action = _require(doc, "action", str)
        if action != "embed":
            raise ProtocolError(f"expected action 'embed', got {action!r}")
        return cls(image=_require(doc, "image", str))


@dataclass(frozen=True)
class PlanRequest:
    """Task-ordering call: everything the planner needs to order the agenda.

    `tasks` is the agenda in input order with multiplicity; `failed` lists
    task names that must not come first; `rules` holds (before, after)
    precedence pairs. The reply is a bare JSON object {"plan": [...]} whose
    list must be a permutation of `tasks`.
    """

    description: str
    degradations: tuple = ()
    tasks: tuple = ()
    failed: tuple = ()
    rules: tuple = ()  # of (before, after) name pairs

    def to_wire(self) -> bytes:
        return _canonical(
            {
                "protocol_version": PROTOCOL_VERSION,
                "action": "plan",
                "description": self.description,
                "degradations": list(self.degradations),
                "tasks": list(self.tasks),
                "failed": list(self.failed),
                "rules": [list(pair) for pair in self.rules],
            }
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "PlanRequest":
        doc = _parse_json(raw)
        _check_version(doc)
        action = _require(doc, "action", str)
        if action != "plan":
            raise ProtocolError(f"expected action 'plan', got {action!r}")
        degradations = _require(doc, "degradations", list)
        tasks = _require(doc, "tasks", list)
        failed = _require(doc, "failed", list)
        if not all(isinstance(x, str) for x in degradations + tasks + failed):
            raise ProtocolError("degradation/task names must be strings")
        rules = _require(doc, "rules", list)
        pairs = []
        for pair in rules:
            if (not isinstance(pair, list) or len(pair) != 2
                    or not all(isinstance(x, str) for x in pair)):
                raise ProtocolError("rules must be [before, after] string pairs")
            pairs.append((pair[0], pair[1]))
        return cls(
            description=_require(doc, "description", str),
            degradations=tuple(degradations),
            tasks=tuple(tasks),
            failed=tuple(failed),
            rules=tuple(pairs),
        )


@dataclass(frozen=True)
class ErrorEnvelope:
    code: str
    message: str

    def __post_init__(self):
        if self.code not in ERROR_CODES:
            raise ValueError(f"unknown error code {self.code!r}")

    def to_wire(self) -> bytes:
        return _canonical({"code": self.code, "message": self.message})

    @classmethod
    def from_wire(cls, raw: bytes) -> "ErrorEnvelope":
        doc = _parse_json(raw)
        code = _require(doc, "code", str)
        if code not in ERROR_CODES:
            raise ProtocolError(f"unknown error code {code!r}")
        return cls(code=code, message=_require(doc, "message", str))


@dataclass(frozen=True)
class HealthInfo:
    protocol_version: int
    supported_tasks: tuple
    supported_metrics: tuple

    def to_wire(self) -> bytes:
        return _canonical(
            {
                "protocol_version": self.protocol_version,
                "supported_tasks": list(self.supported_tasks),
                "supported_metrics": list(self.supported_metrics),
            }
        )

    @classmethod
    def from_wire(cls, raw: bytes) -> "HealthInfo":
        doc = _parse_json(raw)
        tasks = _require(doc, "supported_tasks", list)
        metrics = _require(doc, "supported_metrics", list)
        if not all(isinstance(t, str) for t in tasks + metrics):
            raise ProtocolError("task/metric names must be strings")
        return cls(
            protocol_version=_require(doc, "protocol_version", int),
            supported_tasks=tuple(tasks),
            supported_metrics=tuple(metrics),
        )


def scale_error(params: dict) -> str | None:
    """Server-side check of the scale invariant; None when fine."""
    scale = params.get("scale")
    if scale is not None and scale not in VALID_SCALES:
        return f"scale must be one of {list(VALID_SCALES)}, got {scale!r}"
    return None


def _parse_json(raw: bytes) -> dict:
    if len(raw) > MAX_REQUEST_BYTES:
        raise ProtocolError(f"body exceeds {MAX_REQUEST_BYTES} bytes")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("body is not a JSON object")
    return doc
