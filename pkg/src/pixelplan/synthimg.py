"""Procedural generator for images with natural-photo statistics.

The no-reference scorer needs a pristine corpus to fit its model, and the
benchmarks need deterministic source material. Real photographs would drag
licensing and binary weight into the repo, so these are synthesized: a 1/f
spectral base (natural images have roughly 1/f amplitude spectra), soft-edged
regions that contribute edge statistics, and band-limited fine texture. No
white noise is added anywhere; that is what separates pristine from degraded.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .imagecore import ImageBuf


def _spectral_field(rng: np.random.Generator, height: int, width: int,
                    exponent: float) -> np.ndarray:
    """Random field with a 1/f**exponent amplitude spectrum, unit std."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    radius = np.sqrt(fy * fy + fx * fx)
    radius[0, 0] = 1.0
    amplitude = radius ** (-exponent)
    amplitude[0, 0] = 0.0
    phase = rng.uniform(0.0, 2.0 * np.pi, (height, width))
    spectrum = amplitude * np.exp(1j * phase)
    field = np.fft.ifft2(spectrum).real
    std = field.std()
    return field / std if std > 0 else field


def _soft_shapes(rng: np.random.Generator, height: int, width: int,
                 count: int) -> np.ndarray:
    """Sum of soft-edged elliptical plateaus; gives natural edge content."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for _ in range(count):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        ry = rng.uniform(0.06, 0.35) * height
        rx = rng.uniform(0.06, 0.35) * width
        theta = rng.uniform(0, np.pi)
        softness = rng.uniform(0.8, 4.0)
        dy = yy - cy
        dx = xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        dist = np.sqrt(u * u + v * v)
        edge = expit((1.0 - dist) * min(rx, ry) / softness)
        out += rng.uniform(-0.5, 0.5) * edge
    return out


def synth_pristine(seed: int, width: int = 384, height: int = 384) -> ImageBuf:
    """Deterministic pseudo-photograph for the given seed."""
    rng = np.random.default_rng(seed)

    base = _spectral_field(rng, height, width, rng.uniform(1.1, 1.5))
    shapes = _soft_shapes(rng, height, width, rng.integers(6, 14))
    texture = _spectral_field(rng, height, width, rng.uniform(0.3, 0.7))
    texture_mask = _spectral_field(rng, height, width, 1.5)
    texture_mask = 0.5 + 0.5 * np.tanh(2.0 * texture_mask)

    luma = 0.28 * base + shapes + 0.10 * texture * texture_mask
    # mild optical band-limit; photographs are never pixel-sharp
    luma = gaussian_filter(luma, 0.6)

    chroma_u = gaussian_filter(_spectral_field(rng, height, width, 1.6), 1.0)
    chroma_v = gaussian_filter(_spectral_field(rng, height, width, 1.6), 1.0)

    lo, hi = np.percentile(luma, [1.0, 99.0])
    luma = (luma - lo) / max(hi - lo, 1e-9)
    luma = 0.06 + 0.88 * luma

    planes = np.stack([
        luma + 0.06 * chroma_v,
        luma,
        luma - 0.04 * chroma_u,
    ]).astype(np.float32)
    return ImageBuf(np.clip(planes, 0.0, 1.0))


PRISTINE_SEEDS = tuple(range(1000, 1026))
HOLDOUT_SEEDS = (2001, 2002, 2003, 2004, 2005)


def pristine_corpus(width: int = 384, height: int = 384) -> list[ImageBuf]:
    return [synth_pristine(s, width, height) for s in PRISTINE_SEEDS]


def holdout_set(width: int = 384, height: int = 384) -> list[ImageBuf]:
    return [synth_pristine(s, width, height) for s in HOLDOUT_SEEDS]


def add_gaussian_noise(img: ImageBuf, sigma: float, seed: int = 0) -> ImageBuf:
    rng = np.random.default_rng(seed)
    noisy = img.planes + rng.normal(0.0, sigma, img.planes.shape)
    return ImageBuf(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def add_gaussian_blur(img: ImageBuf, radius: float) -> ImageBuf:
    if radius <= 0:
        return img
    blurred = np.stack([gaussian_filter(p, radius) for p in img.planes])
    return ImageBuf(np.clip(blurred, 0.0, 1.0).astype(np.float32))
