"""Standalone workers that serve restoration tools and quality metrics
over the engine's HTTP worker protocol.

The package is dependency-free on purpose: it talks to the engine only
through the wire, so it can host anything from a test double to a real
model process without importing the engine.
"""
from .errors import AdapterError, ModelLoadError, PngError, PortInUse
from .imageops import box_blur, nearest_upscale
from .model import WorkerConfig, serve_model_worker
from .png import Raster, decode_png, encode_png
from .server import Binding, WorkerServer
from .toy import serve_toy_worker

__all__ = [
    "AdapterError",
    "Binding",
    "ModelLoadError",
    "PngError",
    "PortInUse",
    "Raster",
    "WorkerConfig",
    "WorkerServer",
    "box_blur",
    "decode_png",
    "encode_png",
    "nearest_upscale",
    "serve_model_worker",
    "serve_toy_worker",
]

__version__ = "0.1.0"
