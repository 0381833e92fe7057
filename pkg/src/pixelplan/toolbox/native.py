"""Native classical restoration tools.

Every function here is deterministic, CPU-only and dimension-preserving
(super-resolution scales exactly). Signatures are uniform:
fn(img, params) -> ImageBuf, with params carrying the documented defaults
so a registry manifest can override them.
"""
from __future__ import annotations

import math

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, median_filter

from ..imagecore import ImageBuf, ResampleKernel, resize, rgb_to_luma


def _to_f32(planes: np.ndarray) -> ImageBuf:
    return ImageBuf(np.clip(planes, 0.0, 1.0).astype(np.float32))


# --- brightening -------------------------------------------------------------

def brighten_clahe(img: ImageBuf, params: dict) -> ImageBuf:
    """Contrast-limited adaptive histogram equalization on luma, chroma
    preserved by multiplicative rescale."""
    clip = float(params.get("clip_limit", 2.0))
    grid = int(params.get("tile_grid", 8))
    luma = rgb_to_luma(img)
    y8 = np.rint(luma * 255.0).astype(np.uint8)
    clahe = cv2.createCLAHE(clipLimit=clip, tileGridSize=(grid, grid))
    equalized = clahe.apply(y8).astype(np.float64) / 255.0
    ratio = (equalized + 1e-6) / (luma + 1e-6)
    return _to_f32(img.planes.astype(np.float64) * ratio[None, :, :])


def brighten_gamma(img: ImageBuf, params: dict) -> ImageBuf:
    gamma = float(params.get("gamma", 2.0 / 3.0))
    return _to_f32(np.power(img.planes, gamma))


def brighten_shift(img: ImageBuf, params: dict) -> ImageBuf:
    shift = float(params.get("shift", 40.0)) / 255.0
    return _to_f32(img.planes + shift)


# --- denoising ---------------------------------------------------------------

def denoise_gaussian(img: ImageBuf, params: dict) -> ImageBuf:
    sigma = float(params.get("sigma", 0.8))
    planes = np.stack([gaussian_filter(p, sigma) for p in img.planes])
    return _to_f32(planes)


def denoise_median(img: ImageBuf, params: dict) -> ImageBuf:
    size = int(params.get("size", 3))
    planes = np.stack([median_filter(p, size=size, mode="reflect")
                       for p in img.planes])
    return _to_f32(planes)


def denoise_bilateral(img: ImageBuf, params: dict) -> ImageBuf:
    sigma_space = float(params.get("sigma_space", 2.0))
    sigma_range = float(params.get("sigma_range", 0.1))
    hwc = np.ascontiguousarray(img.to_hwc())
    out = cv2.bilateralFilter(hwc, d=0, sigmaColor=sigma_range,
                              sigmaSpace=sigma_space)
    return _to_f32(out.transpose(2, 0, 1))


# --- deblurring --------------------------------------------------------------

def defocus_deblur_unsharp(img: ImageBuf, params: dict) -> ImageBuf:
    amount = float(params.get("amount", 0.8))
    sigma = float(params.get("sigma", 1.5))
    planes = img.planes.astype(np.float64)
    soft = np.stack([gaussian_filter(p, sigma) for p in planes])
    return _to_f32(planes + amount * (planes - soft))


def motion_psf(length: int, theta: float, size: int | None = None) -> np.ndarray:
    """Normalized linear-motion kernel: `length` unit masses splatted
    bilinearly along direction theta."""
    if size is None:
        size = length + 2
    psf = np.zeros((size, size), dtype=np.float64)
    center = (size - 1) / 2.0
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length):
        x = center + t * math.cos(theta)
        y = center + t * math.sin(theta)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    psf[y0 + dy, x0 + dx] += wy * wx
    return psf / psf.sum()


def estimate_blur_angle(luma: np.ndarray) -> float:
    """Motion direction from the gradient structure tensor: blur smears
    along the direction where gradient energy is weakest."""
    gx = cv2.Sobel(luma, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(luma, cv2.CV_64F, 0, 1, ksize=3)
    jxx = float(np.sum(gx * gx))
    jxy = float(np.sum(gx * gy))
    jyy = float(np.sum(gy * gy))
    dominant = 0.5 * math.atan2(2.0 * jxy, jxx - jyy)
    return dominant + math.pi / 2.0


def motion_deblur_wiener(img: ImageBuf, params: dict) -> ImageBuf:
    length = int(params.get("length", 9))
    k = float(params.get("k", 0.01))
    theta = params.get("angle")
    if theta is None:
        theta = estimate_blur_angle(rgb_to_luma(img))
    psf = motion_psf(length, float(theta))

    # reflect-pad so the periodic boundary the FFT assumes does not ring
    # into the picture
    margin = 4 * psf.shape[0]
    h, w = img.height + 2 * margin, img.width + 2 * margin
    kernel = np.zeros((h, w), dtype=np.float64)
    ph, pw = psf.shape
    kernel[:ph, :pw] = psf
    # center the kernel on the origin so the deconvolution is unshifted
    kernel = np.roll(kernel, (-(ph // 2), -(pw // 2)), axis=(0, 1))
    transfer = np.fft.fft2(kernel)
    wiener = np.conj(transfer) / (np.abs(transfer) ** 2 + k)

    planes = []
    for p in img.planes:
        padded = np.pad(p.astype(np.float64), margin, mode="reflect")
        restored = np.real(np.fft.ifft2(np.fft.fft2(padded) * wiener))
        planes.append(restored[margin:-margin, margin:-margin])
    return _to_f32(np.stack(planes))


# --- dehazing ----------------------------------------------------------------

def dehaze_dark_channel(img: ImageBuf, params: dict) -> ImageBuf:
    patch = int(params.get("patch", 15))
    omega = float(params.get("omega", 0.95))
    t0 = float(params.get("t0", 0.1))
    hwc = img.to_hwc().astype(np.float64)
    kernel = np.ones((patch, patch), dtype=np.uint8)

    dark = cv2.erode(hwc.min(axis=2), kernel)
    flat = dark.ravel()
    top = max(1, int(flat.size * 0.001))
    idx = np.argpartition(flat, -top)[-top:]
    airlight = np.maximum(hwc.reshape(-1, 3)[idx].mean(axis=0), 1e-3)

    normalized = (hwc / airlight[None, None, :]).min(axis=2)
    transmission = 1.0 - omega * cv2.erode(normalized, kernel)
    transmission = np.maximum(transmission, t0)

    recovered = (hwc - airlight) / transmission[:, :, None] + airlight
    return _to_f32(recovered.transpose(2, 0, 1))


# --- compression artifacts ---------------------------------------------------

def jpeg_deblock(img: ImageBuf, params: dict) -> ImageBuf:
    """Smooths 8x8 block boundaries, one pixel each side, with strength
    proportional to how much the boundary jump exceeds local texture."""
    block = int(params.get("block", 8))
    planes = img.planes.astype(np.float64).copy()

    def smooth(axis_view):
        # axis_view is (3, H, W) with the boundary axis last
        width = axis_view.shape[2]
        for x in range(block, width, block):
            a = axis_view[:, :, x - 1]
            b = axis_view[:, :, x]
            delta = b - a
            texture = np.zeros_like(delta)
            sides = 0
            if x >= 2:
                texture += np.abs(a - axis_view[:, :, x - 2])
                sides += 1
            if x + 1 < width:
                texture += np.abs(axis_view[:, :, x + 1] - b)
                sides += 1
            if sides:
                texture /= sides
            strength = np.clip(np.abs(delta) - texture, 0.0, None) / (
                np.abs(delta) + 1e-6
            )
            a += strength * delta / 2.0
            b -= strength * delta / 2.0

    smooth(planes)
    smooth(planes.transpose(0, 2, 1))
    return _to_f32(planes)


# --- super-resolution --------------------------------------------------------

def sr_bicubic(img: ImageBuf, params: dict) -> ImageBuf:
    scale = int(params["scale"])
    return resize(img, img.width * scale, img.height * scale,
                  ResampleKernel.BICUBIC)


def sr_lanczos3(img: ImageBuf, params: dict) -> ImageBuf:
    scale = int(params["scale"])
    return resize(img, img.width * scale, img.height * scale,
                  ResampleKernel.LANCZOS3)


def sr_detailboost(img: ImageBuf, params: dict) -> ImageBuf:
    amount = float(params.get("amount", 0.5))
    sigma = float(params.get("sigma", 1.0))
    upscaled = sr_lanczos3(img, params)
    planes = upscaled.planes.astype(np.float64)
    soft = np.stack([gaussian_filter(p, sigma) for p in planes])
    return _to_f32(planes + amount * (planes - soft))


# --- faces -------------------------------------------------------------------

def face_identity(img: ImageBuf, params: dict) -> ImageBuf:
    return img
