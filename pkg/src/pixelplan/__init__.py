"""pixelplan: agentic image restoration and super-resolution pipeline engine."""

from .imagecore import ImageBuf, PixelRect, ResampleKernel

__version__ = "0.1.0"

__all__ = ["ImageBuf", "PixelRect", "ResampleKernel", "__version__"]
