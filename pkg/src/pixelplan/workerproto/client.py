"""HTTP client for worker endpoints.

Error mapping is strict and attributable: transport failures raise
WorkerUnreachable, malformed or mismatched replies raise ProtocolError,
and well-formed error envelopes (or invalid payload values such as a
non-finite score) raise WorkerError. Apply calls are never retried;
tools may be nondeterministic.
"""
from __future__ import annotations

import requests

from ..errors import ProtocolError, WorkerError, WorkerUnreachable
from .schema import (
    APPLY_PATH,
    DETECT_PATH,
    EMBED_PATH,
    HEALTH_PATH,
    MAX_REQUEST_BYTES,
    PLAN_PATH,
    PROTOCOL_VERSION,
    REASON_PATH,
    SCORE_PATH,
    ApplyRequest,
    ApplyResponse,
    DetectRequest,
    EmbedRequest,
    ErrorEnvelope,
    HealthInfo,
    PlanRequest,
    ReasonRequest,
    ScoreRequest,
    ScoreResponse,
    b64_to_image,
)

DEFAULT_TIMEOUT_MS = 30_000


def _post(endpoint: str, path: str, body: bytes, *, timeout_ms: int,
          subject: str) -> bytes:
    if len(body) > MAX_REQUEST_BYTES:
        raise ProtocolError(
            f"request body {len(body)} bytes exceeds cap {MAX_REQUEST_BYTES}",
            endpoint=endpoint, subject=subject,
        )
    url = endpoint.rstrip("/") + path
    try:
        reply = requests.post(
            url, data=body, timeout=timeout_ms / 1000.0,
            headers={"Content-Type": "application/json"},
        )
    except (requests.Timeout, requests.ConnectionError) as exc:
        raise WorkerUnreachable(
            f"worker unreachable at {url}: {exc.__class__.__name__}",
            endpoint=endpoint, subject=subject,
        ) from exc
    except requests.RequestException as exc:
        raise ProtocolError(
            f"transport failure at {url}: {exc}", endpoint=endpoint, subject=subject
        ) from exc

    if reply.status_code != 200:
        try:
            envelope = ErrorEnvelope.from_wire(reply.content)
        except ProtocolError:
            raise ProtocolError(
                f"HTTP {reply.status_code} with unparseable error body",
                endpoint=endpoint, subject=subject,
            ) from None
        raise WorkerError(
            envelope.message, endpoint=endpoint, subject=subject, code=envelope.code
        )
    return reply.content


def _post_health(endpoint: str, *, timeout_ms: int) -> bytes:
    url = endpoint.rstrip("/") + HEALTH_PATH
    try:
        reply = requests.post(
            url, data=b"{}", timeout=timeout_ms / 1000.0,
            headers={"Content-Type": "application/json"},
        )
    except (requests.Timeout, requests.ConnectionError) as exc:
        raise WorkerUnreachable(
            f"worker unreachable at {url}: {exc.__class__.__name__}",
            endpoint=endpoint, subject="health",
        ) from exc
    except requests.RequestException as exc:
        raise ProtocolError(
            f"transport failure at {url}: {exc}", endpoint=endpoint, subject="health"
        ) from exc
    if reply.status_code != 200:
        raise ProtocolError(
            f"health probe returned HTTP {reply.status_code}",
            endpoint=endpoint, subject="health",
        )
    return reply.content


def call_apply(endpoint: str, req: ApplyRequest, *,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ApplyResponse:
    raw = _post(endpoint, APPLY_PATH, req.to_wire(), timeout_ms=timeout_ms,
                subject=req.tool_id)
    try:
        resp = ApplyResponse.from_wire(raw)
    except ProtocolError as exc:
        raise ProtocolError(str(exc), endpoint=endpoint, subject=req.tool_id) from exc

    try:
        out = b64_to_image(resp.image)
    except Exception as exc:
        raise ProtocolError(
            f"reply image does not decode: {exc}",
            endpoint=endpoint, subject=req.tool_id,
        ) from exc
    scale = req.params.get("scale")
    if req.task == "super-resolution" and scale in (2, 4, 8, 16):
        inp = b64_to_image(req.image)
        if (out.width, out.height) != (inp.width * scale, inp.height * scale):
            raise ProtocolError(
                f"super-resolution reply is {out.width}x{out.height}, "
                f"expected {inp.width * scale}x{inp.height * scale}",
                endpoint=endpoint, subject=req.tool_id,
            )
    return resp


def call_score(endpoint: str, req: ScoreRequest, *,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ScoreResponse:
    raw = _post(endpoint, SCORE_PATH, req.to_wire(), timeout_ms=timeout_ms,
                subject=req.metric)
    try:
        resp = ScoreResponse.from_wire(raw)
    except ProtocolError as exc:
        raise ProtocolError(str(exc), endpoint=endpoint, subject=req.metric) from exc
    if not resp.finite:
        raise WorkerError(
            "non-finite score", endpoint=endpoint, subject=req.metric,
            code="internal",
        )
    return resp


def call_reason(endpoint: str, req: ReasonRequest, *,
                timeout_ms: int = DEFAULT_TIMEOUT_MS) -> bytes:
    """Raw reply body of a reason call. The perception stage owns reply
    parsing (it knows the degradation vocabulary), so transport errors
    keep their classes and content errors get perception's."""
    return _post(endpoint, REASON_PATH, req.to_wire(), timeout_ms=timeout_ms,
                 subject="reason")


def call_plan(endpoint: str, req: PlanRequest, *,
              timeout_ms: int = DEFAULT_TIMEOUT_MS) -> bytes:
    return _post(endpoint, PLAN_PATH, req.to_wire(), timeout_ms=timeout_ms,
                 subject="plan")


def call_detect(endpoint: str, req: DetectRequest, *,
                timeout_ms: int = DEFAULT_TIMEOUT_MS) -> bytes:
    """Raw reply body of a detect call; the face stage parses it."""
    return _post(endpoint, DETECT_PATH, req.to_wire(), timeout_ms=timeout_ms,
                 subject="detect")


def call_embed(endpoint: str, req: EmbedRequest, *,
               timeout_ms: int = DEFAULT_TIMEOUT_MS) -> bytes:
    return _post(endpoint, EMBED_PATH, req.to_wire(), timeout_ms=timeout_ms,
                 subject="embed")


def health(endpoint: str, *, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> HealthInfo:
    raw = _post_health(endpoint, timeout_ms=timeout_ms)
    try:
        info = HealthInfo.from_wire(raw)
    except ProtocolError as exc:
        raise ProtocolError(str(exc), endpoint=endpoint, subject="health") from exc
    if info.protocol_version != PROTOCOL_VERSION:
        raise ProtocolError(
            f"unsupported version {info.protocol_version}",
            endpoint=endpoint, subject="health",
        )
    return info
