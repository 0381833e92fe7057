"""In-process HTTP workers for tests.

A StubWorker serves the v1 protocol on an ephemeral localhost port from a
background thread. Behavior comes from plain callables per tool or metric
id, plus misbehavior knobs (delays, forced error envelopes, garbage
replies) so client error paths can be exercised.
"""
from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from scipy.ndimage import uniform_filter

from ..errors import ProtocolError
from ..imagecore import ImageBuf, ResampleKernel, resize
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
    b64_to_image,
    image_to_b64,
    scale_error,
)

_STATUS = {"bad_request": 400, "unsupported": 422, "internal": 500, "overloaded": 503}


class StubWorker:
    """Protocol v1 worker backed by in-process callables.

    tools: map tool_id -> fn(img, params, context) -> ImageBuf
    metrics: map metric -> fn(img, context) -> float
    reasoner: fn(ReasonRequest) -> dict | str (str is sent verbatim,
      for malformed-reply tests); planner likewise over PlanRequest,
      face_detector over DetectRequest, face_embedder over EmbedRequest
    """

    def __init__(
        self,
        *,
        tools: dict | None = None,
        metrics: dict | None = None,
        reasoner=None,
        planner=None,
        face_detector=None,
        face_embedder=None,
        supported_tasks: list | None = None,
        health_version: int = PROTOCOL_VERSION,
        delay_s: float = 0.0,
        force_error: tuple[str, str] | None = None,
        garbage_reply: bool = False,
    ):
        self.tools = dict(tools or {})
        self.metrics = dict(metrics or {})
        self.reasoner = reasoner
        self.planner = planner
        self.face_detector = face_detector
        self.face_embedder = face_embedder
        self.supported_tasks = list(
            supported_tasks if supported_tasks is not None else sorted(self.tools)
        )
        self.health_version = health_version
        self.delay_s = delay_s
        self.force_error = force_error
        self.garbage_reply = garbage_reply
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        if self._server is None:
            raise RuntimeError("worker not started")
        return f"http://127.0.0.1:{self._server.server_address[1]}"

    def start(self) -> "StubWorker":
        worker = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _reply(self, status: int, body: bytes):
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _reply_error(self, code: str, message: str):
                self._reply(_STATUS[code], ErrorEnvelope(code, message).to_wire())

            def do_POST(self):
                try:
                    self._do_post()
                except (BrokenPipeError, ConnectionResetError):
                    # the client gave up (timeout tests do this on purpose)
                    self.close_connection = True

            def _do_post(self):
                if worker.delay_s:
                    time.sleep(worker.delay_s)
                if worker.garbage_reply:
                    self._reply(200, b"this is not json")
                    return
                if worker.force_error is not None:
                    self._reply_error(*worker.force_error)
                    return
                length = int(self.headers.get("Content-Length", 0))
                if length > MAX_REQUEST_BYTES:
                    self._reply_error("bad_request", "body too large")
                    return
                body = self.rfile.read(length)
                try:
                    if self.path == HEALTH_PATH:
                        self._reply(200, worker._health().to_wire())
                    elif self.path == APPLY_PATH:
                        self._reply(200, worker._apply(body))
                    elif self.path == SCORE_PATH:
                        self._reply(200, worker._score(body))
                    elif self.path == REASON_PATH:
                        self._reply(200, worker._reason(body))
                    elif self.path == PLAN_PATH:
                        self._reply(200, worker._plan(body))
                    elif self.path == DETECT_PATH:
                        self._reply(200, worker._detect(body))
                    elif self.path == EMBED_PATH:
                        self._reply(200, worker._embed(body))
                    else:
                        self._reply_error("unsupported", f"no such path {self.path}")
                except ProtocolError as exc:
                    self._reply_error("bad_request", str(exc))
                except _Refusal as exc:
                    self._reply_error(exc.code, str(exc))
                except Exception as exc:
                    self._reply_error("internal", f"{exc.__class__.__name__}: {exc}")

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(timeout=5)
            self._server = None
            self._thread = None

    def __enter__(self) -> "StubWorker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _health(self) -> HealthInfo:
        return HealthInfo(
            protocol_version=self.health_version,
            supported_tasks=tuple(self.supported_tasks),
            supported_metrics=tuple(sorted(self.metrics)),
        )

    def _apply(self, body: bytes) -> bytes:
        req = ApplyRequest.from_wire(body)
        problem = scale_error(req.params)
        if problem:
            raise _Refusal("bad_request", problem)
        fn = self.tools.get(req.tool_id)
        if fn is None:
            raise _Refusal("unsupported", f"unknown tool {req.tool_id!r}")
        img = b64_to_image(req.image)
        t0 = time.monotonic()
        out = fn(img, req.params, req.context)
        elapsed = int((time.monotonic() - t0) * 1000)
        return ApplyResponse(
            image=image_to_b64(out), elapsed_ms=elapsed, meta={"tool": req.tool_id}
        ).to_wire()

    def _score(self, body: bytes) -> bytes:
        req = ScoreRequest.from_wire(body)
        fn = self.metrics.get(req.metric)
        if fn is None:
            raise _Refusal("unsupported", f"unknown metric {req.metric!r}")
        img = b64_to_image(req.image)
        value = float(fn(img, req.context))
        # json.dumps emits NaN/Infinity tokens, so a NaN knob reaches the
        # client and exercises its finiteness check
        return json.dumps({"score": value}).encode("ascii")

    def _reason(self, body: bytes) -> bytes:
        if self.reasoner is None:
            raise _Refusal("unsupported", "no reasoner configured")
        return _freeform_reply(self.reasoner(ReasonRequest.from_wire(body)))

    def _plan(self, body: bytes) -> bytes:
        if self.planner is None:
            raise _Refusal("unsupported", "no planner configured")
        return _freeform_reply(self.planner(PlanRequest.from_wire(body)))

    def _detect(self, body: bytes) -> bytes:
        if self.face_detector is None:
            raise _Refusal("unsupported", "no face detector configured")
        return _freeform_reply(self.face_detector(DetectRequest.from_wire(body)))

    def _embed(self, body: bytes) -> bytes:
        if self.face_embedder is None:
            raise _Refusal("unsupported", "no face embedder configured")
        return _freeform_reply(self.face_embedder(EmbedRequest.from_wire(body)))


class _Refusal(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _freeform_reply(reply) -> bytes:
    if isinstance(reply, bytes):
        return reply
    if isinstance(reply, str):
        return reply.encode("utf-8")
    return json.dumps(reply, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ready-made behaviors ------------------------------------------------------

def identity_tool(img: ImageBuf, params: dict, context) -> ImageBuf:
    return img


def box_blur_tool(img: ImageBuf, params: dict, context) -> ImageBuf:
    """3x3 box kernel, reflect border."""
    blurred = np.stack([uniform_filter(p, size=3, mode="reflect")
                        for p in img.planes])
    return ImageBuf(blurred.astype(np.float32))


def upscale_tool(kernel: ResampleKernel = ResampleKernel.BICUBIC):
    def apply(img: ImageBuf, params: dict, context) -> ImageBuf:
        scale = int(params["scale"])
        return resize(img, img.width * scale, img.height * scale, kernel)

    return apply


def const_scorer(value: float):
    return lambda img, context: value
