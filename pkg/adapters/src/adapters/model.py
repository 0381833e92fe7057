"""Model-backed workers.

A model worker wraps one loaded model behind the wire protocol. The
model is resolved and loaded *before* the port is bound, so a worker
that cannot load never looks alive to the engine.
"""
from __future__ import annotations

import importlib
from dataclasses import dataclass, field

from .errors import ModelLoadError
from .server import VALID_SCALES, Binding, WorkerServer


@dataclass(frozen=True)
class WorkerConfig:
    """One worker process serves one model bound to one task or one
    metric.

    ``loader`` is a dotted reference ``package.module:attribute`` whose
    attribute is called as ``loader(model_id, device)`` and returns the
    model callable. Task models are called ``model(img, params,
    context)`` and return a Raster or encoded PNG bytes; metric models
    are called ``model(img, context)`` and return a float.
    """

    model_id: str
    loader: str
    task: str | None = None
    metric: str | None = None
    device: str = "cpu"
    port: int = 0
    scales: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if (self.task is None) == (self.metric is None):
            raise ValueError("bind exactly one of task / metric")
        bad = [s for s in self.scales if s not in VALID_SCALES]
        if bad:
            raise ValueError(f"scales must be drawn from {list(VALID_SCALES)},"
                             f" got {bad}")


def _load(config: WorkerConfig):
    mod_name, sep, attr = config.loader.partition(":")
    if not sep or not mod_name or not attr:
        raise ModelLoadError(
            f"loader must look like 'package.module:attribute', "
            f"got {config.loader!r}")
    try:
        module = importlib.import_module(mod_name)
    except ImportError as exc:
        raise ModelLoadError(f"cannot import {mod_name!r}: {exc}") from exc
    try:
        factory = getattr(module, attr)
    except AttributeError as exc:
        raise ModelLoadError(
            f"{mod_name!r} has no attribute {attr!r}") from exc
    try:
        return factory(config.model_id, config.device)
    except Exception as exc:
        raise ModelLoadError(
            f"loading {config.model_id!r} failed: "
            f"{exc.__class__.__name__}: {exc}") from exc


def serve_model_worker(config: WorkerConfig) -> WorkerServer:
    """Load the model, then bind the port and serve it."""
    model = _load(config)
    meta = {"model_id": config.model_id, "device": config.device}
    if config.task is not None:
        binding = Binding(
            apply_fn=lambda img, raw, params, context:
                model(img, params, context),
            tasks=(config.task,), scales=tuple(config.scales), meta=meta)
    else:
        binding = Binding(
            score_fn=lambda img, context: model(img, context),
            metrics=(config.metric,), meta=meta)
    return WorkerServer(binding, port=config.port)
