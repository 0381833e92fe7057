"""Pixel operations for the toy workers, integer arithmetic only."""
from __future__ import annotations

from .png import Raster


def box_blur(img: Raster) -> Raster:
    """3x3 uniform mean with clamped edges, rounded to nearest.

    Integer exact: for a one-hot input of 255 the nine center pixels
    come out at round(255 / 9) = 28, one 8-bit quantum from 1/9.
    """
    w, h = img.width, img.height
    src = img.data
    out = bytearray(len(src))
    for y in range(h):
        y0 = (y - 1) if y > 0 else 0
        y2 = (y + 1) if y + 1 < h else h - 1
        for x in range(w):
            x0 = (x - 1) if x > 0 else 0
            x2 = (x + 1) if x + 1 < w else w - 1
            for c in range(3):
                s = 0
                for yy in (y0, y, y2):
                    row = yy * w * 3
                    s += (src[row + x0 * 3 + c]
                          + src[row + x * 3 + c]
                          + src[row + x2 * 3 + c])
                # (s + 4) // 9 == round(s / 9): s is an integer, so the
                # quotient never lands exactly on .5
                out[(y * w + x) * 3 + c] = (s + 4) // 9
    return Raster(w, h, out)


def nearest_upscale(img: Raster, scale: int) -> Raster:
    w, h = img.width, img.height
    out = bytearray(w * scale * h * scale * 3)
    ow = w * scale
    for y in range(h * scale):
        sy = y // scale
        for x in range(ow):
            sx = x // scale
            out[(y * ow + x) * 3:(y * ow + x) * 3 + 3] = \
                img.data[(sy * w + sx) * 3:(sy * w + sx) * 3 + 3]
    return Raster(ow, h * scale, out)
