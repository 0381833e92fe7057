"""HTTP plumbing shared by every adapter.

Speaks worker protocol v1: canonical JSON bodies (sorted keys, compact
separators), base64 PNG images, POST /v1/health | /v1/apply |
/v1/score. One request is served at a time; anything arriving while the
slot is held gets an `overloaded` envelope instead of a queue spot.
"""
from __future__ import annotations

import base64
import errno
import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .errors import PngError, PortInUse
from .png import Raster, decode_png, encode_png

PROTOCOL_VERSION = 1
APPLY_PATH = "/v1/apply"
SCORE_PATH = "/v1/score"
HEALTH_PATH = "/v1/health"

VALID_SCALES = (2, 4, 8, 16)
MAX_REQUEST_BYTES = 256 * 1024 * 1024

_STATUS = {"bad_request": 400, "unsupported": 422, "internal": 500,
           "overloaded": 503}


def canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def envelope(code: str, message: str) -> tuple:
    return _STATUS[code], canonical({"code": code, "message": message})


class _Refusal(Exception):
    """Turn into an error envelope at the dispatch boundary."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class Binding:
    """What one worker process serves: exactly one of apply or score."""

    apply_fn: Callable | None = None
    score_fn: Callable | None = None
    tasks: tuple = ()
    metrics: tuple = ()
    scales: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.apply_fn is None) == (self.score_fn is None):
            raise ValueError("bind exactly one of apply_fn / score_fn")
        if self.apply_fn is not None and not self.tasks:
            raise ValueError("apply binding needs at least one task")
        if self.score_fn is not None and len(self.metrics) != 1:
            raise ValueError("score binding names exactly one metric")


def _parse_request(body: bytes) -> dict:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _Refusal("bad_request", f"request is not JSON: {exc}")
    if not isinstance(doc, dict):
        raise _Refusal("bad_request", "request must be a JSON object")
    version = doc.get("protocol_version")
    if version != PROTOCOL_VERSION:
        raise _Refusal("bad_request", f"unsupported version {version}")
    return doc


def _field(doc: dict, name: str, kind) -> object:
    value = doc.get(name)
    if not isinstance(value, kind):
        raise _Refusal("bad_request", f"field {name!r} missing or wrong type")
    return value


def _decode_image(doc: dict) -> tuple:
    data = _field(doc, "image", str)
    try:
        raw = base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise _Refusal("bad_request", f"invalid base64 image: {exc}")
    try:
        return decode_png(raw), raw
    except PngError as exc:
        raise _Refusal("bad_request", f"undecodable image: {exc}")


class WorkerServer:
    """A bound, running protocol server. Use as a context manager or
    call close() yourself."""

    def __init__(self, binding: Binding, port: int = 0):
        self.binding = binding
        self._slot = threading.Semaphore(1)
        worker = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_POST(self):
                try:
                    status, payload, close = worker._dispatch(self)
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    if close:
                        # the request body was never read, so this
                        # connection cannot carry another request
                        self.send_header("Connection", "close")
                        self.close_connection = True
                    self.end_headers()
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    self.close_connection = True

        try:
            self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"port {port} is already bound") from exc
            raise
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def readiness(self) -> dict:
        b = self.binding
        bindings = dict(b.meta)
        bindings["supported_tasks"] = sorted(b.tasks)
        bindings["supported_metrics"] = sorted(b.metrics)
        if b.scales:
            bindings["scales"] = sorted(b.scales)
        return {"port": self.port, "bindings": bindings}

    def serve_until_interrupted(self) -> None:
        try:
            self._thread.join()
        except KeyboardInterrupt:
            pass
        finally:
            self.close()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- request handling -------------------------------------------------

    def _dispatch(self, handler) -> tuple:
        if not self._slot.acquire(blocking=False):
            return (*envelope("overloaded", "serving another request"), True)
        try:
            length = int(handler.headers.get("Content-Length", 0))
            if length > MAX_REQUEST_BYTES:
                return (*envelope("bad_request", "body too large"), True)
            body = handler.rfile.read(length)
            try:
                return (*self._route(handler.path, body), False)
            except _Refusal as exc:
                return (*envelope(exc.code, str(exc)), False)
            except Exception as exc:  # a broken binding must not kill the server
                return (*envelope("internal",
                                  f"{exc.__class__.__name__}: {exc}"), False)
        finally:
            self._slot.release()

    def _route(self, path: str, body: bytes) -> tuple:
        if path == HEALTH_PATH:
            return 200, canonical({
                "protocol_version": PROTOCOL_VERSION,
                "supported_tasks": sorted(self.binding.tasks),
                "supported_metrics": sorted(self.binding.metrics),
            })
        if path == APPLY_PATH:
            return self._apply(_parse_request(body))
        if path == SCORE_PATH:
            return self._score(_parse_request(body))
        raise _Refusal("unsupported", f"no such path {path}")

    def _apply(self, doc: dict) -> tuple:
        if self.binding.apply_fn is None:
            raise _Refusal("unsupported", "this worker scores, it cannot apply")
        task = _field(doc, "task", str)
        _field(doc, "tool_id", str)
        params = _field(doc, "params", dict)
        if task not in self.binding.tasks:
            raise _Refusal("unsupported", f"task {task!r} is not served here")
        scale = params.get("scale")
        if scale is not None:
            if not isinstance(scale, int) or scale not in VALID_SCALES:
                raise _Refusal(
                    "bad_request",
                    f"scale must be one of {list(VALID_SCALES)}, got {scale}")
            if scale not in self.binding.scales:
                raise _Refusal("unsupported",
                               f"scale {scale} is not served here")
        img, raw = _decode_image(doc)
        started = time.perf_counter()
        out = self.binding.apply_fn(img, raw, params, doc.get("context"))
        elapsed = int((time.perf_counter() - started) * 1000)
        if isinstance(out, Raster):
            out = encode_png(out)
        return 200, canonical({
            "elapsed_ms": elapsed,
            "image": base64.b64encode(out).decode("ascii"),
            "meta": dict(self.binding.meta),
        })

    def _score(self, doc: dict) -> tuple:
        if self.binding.score_fn is None:
            raise _Refusal("unsupported", "this worker applies, it cannot score")
        metric = _field(doc, "metric", str)
        if metric not in self.binding.metrics:
            raise _Refusal("unsupported", f"metric {metric!r} is not served here")
        img, _ = _decode_image(doc)
        value = float(self.binding.score_fn(img, doc.get("context")))
        if value != value or value in (float("inf"), float("-inf")):
            raise _Refusal("internal", "score is not finite")
        return 200, canonical({"score": value})
