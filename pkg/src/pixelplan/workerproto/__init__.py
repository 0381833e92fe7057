from .client import (
    call_apply,
    call_detect,
    call_embed,
    call_plan,
    call_reason,
    call_score,
    health,
)
from .schema import (
    PROTOCOL_VERSION,
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
    image_to_b64,
)

__all__ = [
    "PROTOCOL_VERSION",
    "ApplyRequest",
    "ApplyResponse",
    "DetectRequest",
    "EmbedRequest",
    "ErrorEnvelope",
    "HealthInfo",
    "PlanRequest",
    "ReasonRequest",
    "ScoreRequest",
    "ScoreResponse",
    "b64_to_image",
    "image_to_b64",
    "call_apply",
    "call_detect",
    "call_embed",
    "call_plan",
    "call_reason",
    "call_score",
    "health",
]
