import threading
import time
from pathlib import Path

import numpy as np
import pytest

from pixelplan.errors import ProtocolError, WorkerError, WorkerUnreachable
from pixelplan.imagecore import ImageBuf, decode_image, encode_png
from pixelplan.workerproto import (
    ApplyRequest,
    ApplyResponse,
    ErrorEnvelope,
    HealthInfo,
    ScoreRequest,
    ScoreResponse,
    b64_to_image,
    call_apply,
    call_score,
    health,
    image_to_b64,
)
from pixelplan.workerproto.testing import (
    StubWorker,
    box_blur_tool,
    const_scorer,
    identity_tool,
    upscale_tool,
)

GOLDEN = Path(__file__).resolve().parent / "golden"


def _fixture_image() -> ImageBuf:
    hwc = np.array(
        [[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
         [[0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]],
        dtype=np.float32,
    )
    return ImageBuf.from_hwc(hwc)


def _quantized(seed: int, w: int = 8, h: int = 8) -> ImageBuf:
    rng = np.random.default_rng(seed)
    img = ImageBuf.from_hwc(rng.random((h, w, 3)).astype(np.float32))
    return decode_image(encode_png(img))


class TestGoldenFixtures:
    def test_apply_request(self):
        req = ApplyRequest(
            task="super-resolution", tool_id="sr_bicubic",
            image=image_to_b64(_fixture_image()),
            params={"scale": 2}, context="a small color checker",
        )
        assert req.to_wire() == (GOLDEN / "apply_request.json").read_bytes()

    def test_apply_response(self):
        resp = ApplyResponse(
            image=image_to_b64(_fixture_image()), elapsed_ms=12,
            meta={"tool": "sr_bicubic"},
        )
        assert resp.to_wire() == (GOLDEN / "apply_response.json").read_bytes()

    def test_score_pair(self):
        req = ScoreRequest(metric="musiq", image=image_to_b64(_fixture_image()))
        assert req.to_wire() == (GOLDEN / "score_request.json").read_bytes()
        assert ScoreResponse(0.5).to_wire() == (
            GOLDEN / "score_response.json"
        ).read_bytes()

    def test_error_envelope(self):
        env = ErrorEnvelope(
            code="bad_request",
            message="scale must be one of [2, 4, 8, 16], got 3",
        )
        assert env.to_wire() == (GOLDEN / "error_envelope.json").read_bytes()

    def test_health_response(self):
        info = HealthInfo(1, ("super-resolution",), ())
        assert info.to_wire() == (GOLDEN / "health_response.json").read_bytes()

    @pytest.mark.parametrize("name,cls", [
        ("apply_request.json", ApplyRequest),
        ("apply_response.json", ApplyResponse),
        ("score_request.json", ScoreRequest),
        ("score_response.json", ScoreResponse),
        ("error_envelope.json", ErrorEnvelope),
        ("health_response.json", HealthInfo),
    ])
    def test_roundtrip(self, name, cls):
        raw = (GOLDEN / name).read_bytes()
        assert cls.from_wire(raw).to_wire() == raw


class TestSchemaValidation:
    def test_missing_field(self):
        with pytest.raises(ProtocolError, match="missing field"):
            ApplyResponse.from_wire(b'{"image":"x","meta":{}}')

    def test_version_gate(self):
        doc = b'{"protocol_version":2,"metric":"m","image":"x"}'
        with pytest.raises(ProtocolError, match="unsupported version"):
            ScoreRequest.from_wire(doc)

    def test_not_an_object(self):
        with pytest.raises(ProtocolError):
            ScoreResponse.from_wire(b"[1,2]")

    def test_invalid_json(self):
        with pytest.raises(ProtocolError):
            ErrorEnvelope.from_wire(b"{nope")

    def test_unknown_error_code(self):
        with pytest.raises(ProtocolError):
            ErrorEnvelope.from_wire(b'{"code":"novel","message":"m"}')
        with pytest.raises(ValueError):
            ErrorEnvelope(code="novel", message="m")

    def test_negative_elapsed(self):
        with pytest.raises(ProtocolError):
            ApplyResponse.from_wire(b'{"image":"x","elapsed_ms":-1,"meta":{}}')

    def test_bad_base64(self):
        with pytest.raises(ProtocolError):
            b64_to_image("!!!not base64!!!")


class TestApply:
    def test_identity_roundtrip_exact(self):
        img = _quantized(1)
        with StubWorker(tools={"id": identity_tool}) as worker:
            req = ApplyRequest(task="denoising", tool_id="id",
                               image=image_to_b64(img))
            resp = call_apply(worker.endpoint, req)
        out = b64_to_image(resp.image)
        assert np.array_equal(out.planes, img.planes)
        assert resp.elapsed_ms >= 0

    def test_box_blur_kernel_math(self):
        # unit-level check of the documented kernel; the 1e-6 tolerance
        # is tighter than any PNG transport can carry
        hot = np.zeros((5, 5, 3), np.float32)
        hot[2, 2] = 1.0
        out = box_blur_tool(ImageBuf.from_hwc(hot), {}, None)
        assert np.allclose(out.planes[:, 1:4, 1:4], 1.0 / 9.0, atol=1e-6)

    def test_box_blur_over_wire(self):
        hot = np.zeros((5, 5, 3), np.float32)
        hot[2, 2] = 1.0
        img = ImageBuf.from_hwc(hot)
        with StubWorker(tools={"blur": box_blur_tool}) as worker:
            req = ApplyRequest(task="defocus_deblurring", tool_id="blur",
                               image=image_to_b64(img))
            resp = call_apply(worker.endpoint, req)
        out = b64_to_image(resp.image)
        # 8-bit quantization bounds the wire-level error at half a step
        assert np.allclose(out.planes[:, 1:4, 1:4], 1.0 / 9.0, atol=0.5 / 255 + 1e-9)

    def test_invalid_scale_refused(self):
        img = _quantized(2)
        with StubWorker(tools={"sr": upscale_tool()}) as worker:
            endpoint = worker.endpoint
            req = ApplyRequest(task="super-resolution", tool_id="sr",
                               image=image_to_b64(img), params={"scale": 3})
            with pytest.raises(WorkerError) as exc_info:
                call_apply(endpoint, req)
        assert exc_info.value.code == "bad_request"
        assert exc_info.value.endpoint == endpoint
        assert exc_info.value.subject == "sr"

    def test_sr_dims_checked(self):
        img = _quantized(3)
        with StubWorker(tools={"sr": identity_tool}) as worker:
            req = ApplyRequest(task="super-resolution", tool_id="sr",
                               image=image_to_b64(img), params={"scale": 2})
            with pytest.raises(ProtocolError, match="expected 16x16"):
                call_apply(worker.endpoint, req)

    def test_sr_dims_correct(self):
        img = _quantized(4)
        with StubWorker(tools={"sr": upscale_tool()}) as worker:
            req = ApplyRequest(task="super-resolution", tool_id="sr",
                               image=image_to_b64(img), params={"scale": 4})
            resp = call_apply(worker.endpoint, req)
        out = b64_to_image(resp.image)
        assert (out.width, out.height) == (32, 32)

    def test_unknown_tool(self):
        with StubWorker(tools={}) as worker:
            req = ApplyRequest(task="denoising", tool_id="ghost",
                               image=image_to_b64(_quantized(5)))
            with pytest.raises(WorkerError) as exc_info:
                call_apply(worker.endpoint, req)
        assert exc_info.value.code == "unsupported"

    def test_garbage_reply(self):
        with StubWorker(garbage_reply=True) as worker:
            req = ApplyRequest(task="denoising", tool_id="id",
                               image=image_to_b64(_quantized(6)))
            with pytest.raises(ProtocolError):
                call_apply(worker.endpoint, req)

    def test_overloaded_envelope(self):
        with StubWorker(force_error=("overloaded", "busy")) as worker:
            req = ApplyRequest(task="denoising", tool_id="id",
                               image=image_to_b64(_quantized(7)))
            with pytest.raises(WorkerError) as exc_info:
                call_apply(worker.endpoint, req)
        assert exc_info.value.code == "overloaded"

    def test_concurrent_calls(self):
        img = _quantized(8)
        results = []
        with StubWorker(tools={"id": identity_tool}) as worker:
            req = ApplyRequest(task="denoising", tool_id="id",
                               image=image_to_b64(img))

            def call():
                results.append(call_apply(worker.endpoint, req))

            threads = [threading.Thread(target=call) for _ in range(4)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        assert len(results) == 4
        for resp in results:
            assert np.array_equal(b64_to_image(resp.image).planes, img.planes)


class TestScore:
    def test_echo_scorer(self):
        with StubWorker(metrics={"musiq": const_scorer(0.5)}) as worker:
            resp = call_score(worker.endpoint,
                              ScoreRequest(metric="musiq",
                                           image=image_to_b64(_quantized(9))))
        assert resp.score == 0.5

    def test_nan_score(self):
        with StubWorker(metrics={"m": const_scorer(float("nan"))}) as worker:
            with pytest.raises(WorkerError, match="non-finite score") as exc_info:
                call_score(worker.endpoint,
                           ScoreRequest(metric="m",
                                        image=image_to_b64(_quantized(10))))
        assert exc_info.value.subject == "m"

    def test_unreachable_times_out(self):
        deadline_ms = 300
        t0 = time.monotonic()
        with StubWorker(metrics={"m": const_scorer(1.0)}, delay_s=2.0) as worker:
            with pytest.raises(WorkerUnreachable):
                call_score(worker.endpoint,
                           ScoreRequest(metric="m",
                                        image=image_to_b64(_quantized(11))),
                           timeout_ms=deadline_ms)
        elapsed = time.monotonic() - t0
        assert deadline_ms / 1000.0 - 0.05 <= elapsed <= 1.8


class TestHealth:
    def test_v1_worker(self):
        with StubWorker(tools={"sr": upscale_tool()},
                        supported_tasks=["super-resolution"]) as worker:
            info = health(worker.endpoint)
        assert info == HealthInfo(1, ("super-resolution",), ())

    def test_down_endpoint(self):
        with pytest.raises(WorkerUnreachable):
            health("http://127.0.0.1:9", timeout_ms=500)

    def test_version_2_rejected(self):
        with StubWorker(tools={}, health_version=2) as worker:
            with pytest.raises(ProtocolError, match="unsupported version"):
                health(worker.endpoint)
