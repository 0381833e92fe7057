"""Full-reference quality metrics (PSNR, SSIM) on the luma channel."""
from __future__ import annotations

import math

import cv2
import numpy as np

from ..errors import DimensionMismatch, TooSmall
from ..imagecore import ImageBuf, rgb_to_luma

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_dims(a: ImageBuf, b: ImageBuf) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch(
            f"image dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def psnr_y(a: ImageBuf, b: ImageBuf) -> float:
    """Peak signal-to-noise ratio between luma planes, in dB.

    Signal range is [0, 1], so the score is 10*log10(1/MSE). Identical
    inputs return +inf.
    """
    _check_dims(a, b)
    diff = rgb_to_luma(a) - rgb_to_luma(b)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = (kernel.shape[0] - 1) // 2
    out = cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT)
    return out[pad:-pad, pad:-pad]


def ssim_y(a: ImageBuf, b: ImageBuf) -> float:
    """Mean structural similarity between luma planes.

    Gaussian-weighted 11x11 local statistics (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1.0, averaged over the valid interior.
    """
    _check_dims(a, b)
    if min(a.width, a.height) < SSIM_WINDOW:
        raise TooSmall(
            f"ssim needs min side >= {SSIM_WINDOW}, got {a.width}x{a.height}"
        )
    x = rgb_to_luma(a)
    y = rgb_to_luma(b)
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(y, window)
    var_x = _filter_valid(x * x, window) - mu_x * mu_x
    var_y = _filter_valid(y * y, window) - mu_y * mu_y
    cov_xy = _filter_valid(x * y, window) - mu_x * mu_y

    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
