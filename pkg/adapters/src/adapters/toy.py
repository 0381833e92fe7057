"""Deterministic toy workers.

These exist so an engine run can be exercised end to end without any
model weights: an identity restorer, a box-blur restorer, and a scorer
that always returns the same value.
"""
from __future__ import annotations

from .imageops import box_blur
from .server import Binding, WorkerServer

TOY_KINDS = ("identity", "box_blur", "fixed_score")

_DEFAULT_TASK = {"identity": "denoising", "box_blur": "defocus-deblur"}


def _identity_apply(img, raw, params, context):
    # Echo the exact bytes we were sent; decoding already proved they
    # are a well-formed image.
    return raw


def _box_blur_apply(img, raw, params, context):
    return box_blur(img)


def serve_toy_worker(kind: str, *, port: int = 0, task: str | None = None,
                     metric: str = "musiq",
                     value: float = 0.5) -> WorkerServer:
    """Start a toy worker and return the running server."""
    if kind == "identity":
        binding = Binding(apply_fn=_identity_apply,
                          tasks=(task or _DEFAULT_TASK[kind],),
                          meta={"worker": "toy-identity"})
    elif kind == "box_blur":
        binding = Binding(apply_fn=_box_blur_apply,
                          tasks=(task or _DEFAULT_TASK[kind],),
                          meta={"worker": "toy-box-blur"})
    elif kind == "fixed_score":
        binding = Binding(score_fn=lambda img, context: value,
                          metrics=(metric,),
                          meta={"worker": "toy-fixed-score", "value": value})
    else:
        raise ValueError(f"unknown toy kind {kind!r}; expected one of "
                         f"{TOY_KINDS}")
    return WorkerServer(binding, port=port)
