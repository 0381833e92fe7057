"""Regenerate the golden wire-format fixtures byte-compared in tests."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from pixelplan.imagecore import ImageBuf
from pixelplan.workerproto.schema import (
    ApplyRequest,
    ApplyResponse,
    ErrorEnvelope,
    HealthInfo,
    PlanRequest,
    ReasonRequest,
    ScoreRequest,
    ScoreResponse,
    image_to_b64,
)


class _RawJson:
    """Reply shapes without a dataclass: canonical-dumped dicts."""

    def __init__(self, doc: dict):
        self.doc = doc

    def to_wire(self) -> bytes:
        return json.dumps(self.doc, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def fixture_image() -> ImageBuf:
    hwc = np.array(
        [[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
         [[0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]],
        dtype=np.float32,
    )
    return ImageBuf.from_hwc(hwc)


def main() -> None:
    GOLDEN.mkdir(parents=True, exist_ok=True)
    b64 = image_to_b64(fixture_image())
    docs = {
        "apply_request.json": ApplyRequest(
            task="super-resolution", tool_id="sr_bicubic", image=b64,
            params={"scale": 2}, context="a small color checker",
        ),
        "apply_response.json": ApplyResponse(
            image=b64, elapsed_ms=12, meta={"tool": "sr_bicubic"},
        ),
        "score_request.json": ScoreRequest(metric="musiq", image=b64),
        "score_response.json": ScoreResponse(score=0.5),
        "error_envelope.json": ErrorEnvelope(
            code="bad_request", message="scale must be one of [2, 4, 8, 16], got 3",
        ),
        "health_response.json": HealthInfo(
            protocol_version=1,
            supported_tasks=("super-resolution",),
            supported_metrics=(),
        ),
        "reason_request.json": ReasonRequest(
            image=b64,
            metrics={"niqe": {"score": 4.25, "available": True}},
        ),
        "reason_response.json": _RawJson(
            {"degradations": ["noise"],
             "image_description": "a small color checker"},
        ),
        "plan_request.json": PlanRequest(
            description="a small color checker",
            degradations=("noise",),
            tasks=("denoising", "super-resolution"),
            failed=(),
            rules=(("denoising", "super-resolution"),),
        ),
        "plan_response.json": _RawJson(
            {"plan": ["denoising", "super-resolution"]},
        ),
    }
    for name, obj in docs.items():
        (GOLDEN / name).write_bytes(obj.to_wire())
    print(f"wrote {len(docs)} fixtures to {GOLDEN}")


if __name__ == "__main__":
    main()
