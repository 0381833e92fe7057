"""Metric catalog: native full/no-reference metrics plus remote scorers.

The registry computes MetricReports for the pipeline: PSNR/SSIM natively
when a reference is at hand, the no-reference score natively from the
shipped model, and everything else over the worker protocol. A metric
that cannot be computed is reported unavailable rather than raised; the
consumer decides how to degrade.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from ..errors import PixelplanError
from ..imagecore import ImageBuf
from ..workerproto.client import call_score
from ..workerproto.schema import ScoreRequest, image_to_b64
from .fullref import psnr_y, ssim_y
from .niqe import NiqeModel, default_niqe_model, niqe


class MetricKind(Enum):
    PSNR = "psnr"
    SSIM = "ssim"
    NIQE = "niqe"
    MUSIQ = "musiq"
    MANIQA = "maniqa"
    CLIPIQA = "clipiqa"
    TOPIQ = "topiq"
    HPSV2 = "hpsv2"
    CLIB_FIQA = "clib_fiqa"

    @property
    def wire_name(self) -> str:
        return self.value

    @property
    def full_reference(self) -> bool:
        return self in (MetricKind.PSNR, MetricKind.SSIM)

    @property
    def remote_only(self) -> bool:
        return self in (
            MetricKind.MUSIQ,
            MetricKind.MANIQA,
            MetricKind.CLIPIQA,
            MetricKind.TOPIQ,
            MetricKind.HPSV2,
            MetricKind.CLIB_FIQA,
        )


@dataclass
class MetricReport:
    """Scores per metric with per-entry availability."""

    _scores: dict = field(default_factory=dict)
    _unavailable: set = field(default_factory=set)

    def put(self, kind: MetricKind, score: float) -> None:
        score = float(score)
        if not math.isfinite(score):
            raise ValueError(f"{kind.wire_name} score must be finite, got {score}")
        if kind is MetricKind.NIQE and score < 0:
            raise ValueError(f"niqe score must be >= 0, got {score}")
        self._scores[kind] = score
        self._unavailable.discard(kind)

    def mark_unavailable(self, kind: MetricKind) -> None:
        self._scores.pop(kind, None)
        self._unavailable.add(kind)

    def available(self, kind: MetricKind) -> bool:
        return kind in self._scores

    def score(self, kind: MetricKind) -> float | None:
        return self._scores.get(kind)

    @property
    def kinds(self) -> tuple:
        return tuple(self._scores)

    def to_json_dict(self) -> dict:
        doc = {}
        for kind in MetricKind:
            if kind in self._scores:
                doc[kind.wire_name] = {"score": self._scores[kind], "available": True}
            elif kind in self._unavailable:
                doc[kind.wire_name] = {"score": None, "available": False}
        return doc


@dataclass(frozen=True)
class RemoteScorer:
    endpoint: str
    metric: MetricKind
    timeout_ms: int = 30_000

    def __post_init__(self):
        if not (self.metric.remote_only or self.metric is MetricKind.NIQE):
            raise ValueError(
                f"{self.metric.wire_name} is not servable by a remote scorer"
            )


def score_remote(scorer: RemoteScorer, img: ImageBuf,
                 context: str | None = None) -> float:
    """One remote scoring call. Context travels only to scorers of the
    prompt-conditioned kind; the rest never see it."""
    forwarded = context if scorer.metric is MetricKind.HPSV2 else None
    req = ScoreRequest(
        metric=scorer.metric.wire_name,
        image=image_to_b64(img),
        context=forwarded,
    )
    return call_score(scorer.endpoint, req, timeout_ms=scorer.timeout_ms).score


class MetricRegistry:
    """Maps metric kinds to a way of computing them."""

    def __init__(self, scorers=None, niqe_model: NiqeModel | None = None):
        self._scorers: dict[MetricKind, RemoteScorer] = {}
        for scorer in scorers or []:
            self.bind(scorer)
        self._niqe_model = niqe_model

    def bind(self, scorer: RemoteScorer) -> None:
        self._scorers[scorer.metric] = scorer

    def scorer_for(self, kind: MetricKind) -> RemoteScorer | None:
        return self._scorers.get(kind)

    @property
    def bound_kinds(self) -> tuple:
        return tuple(self._scorers)

    def report(
        self,
        img: ImageBuf,
        kinds,
        *,
        reference: ImageBuf | None = None,
        context: str | None = None,
    ) -> MetricReport:
        """Compute every requested metric that is computable; the rest are
        flagged unavailable (no reference, no binding, worker failure)."""
        out = MetricReport()
        for kind in kinds:
            try:
                if kind is MetricKind.PSNR or kind is MetricKind.SSIM:
                    if reference is None:
                        out.mark_unavailable(kind)
                        continue
                    value = (psnr_y if kind is MetricKind.PSNR else ssim_y)(
                        reference, img
                    )
                    if math.isinf(value):
                        # identical images; report the documented sentinel
                        # as a large finite value so the report stays finite
                        value = 99.0 if kind is MetricKind.PSNR else 1.0
                    out.put(kind, value)
                elif kind is MetricKind.NIQE and kind not in self._scorers:
                    model = self._niqe_model or default_niqe_model()
                    out.put(kind, niqe(img, model))
                else:
                    scorer = self._scorers.get(kind)
                    if scorer is None:
                        out.mark_unavailable(kind)
                        continue
                    out.put(kind, score_remote(scorer, img, context))
            except PixelplanError:
                out.mark_unavailable(kind)
        return out
