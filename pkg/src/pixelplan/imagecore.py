"""Image representation, codecs, color conversion, resampling, crop/paste.

Images are planar float32 RGB in [0,1]. Values are immutable after
construction; every operation returns a new buffer. Quantization happens
only at codec boundaries (PNG/JPEG encode and decode).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import cv2
import numpy as np
from PIL import Image

from .errors import MalformedFile, RectOutOfBounds, UnsupportedFormat

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


class ResampleKernel(enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"  # Catmull-Rom convention (a = -0.5)
    LANCZOS3 = "lanczos3"  # window radius 3


_PIL_FILTER = {
    ResampleKernel.NEAREST: Image.Resampling.NEAREST,
    ResampleKernel.BILINEAR: Image.Resampling.BILINEAR,
    ResampleKernel.BICUBIC: Image.Resampling.BICUBIC,
    ResampleKernel.LANCZOS3: Image.Resampling.LANCZOS,
}


@dataclass(frozen=True)
class PixelRect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise RectOutOfBounds(f"empty rect {self}")

    def contained_in(self, width: int, height: int) -> bool:
        return (self.x >= 0 and self.y >= 0
                and self.x + self.w <= width and self.y + self.h <= height)


@dataclass(frozen=True)
class ImageBuf:
    """Planar 3-channel RGB image; ``planes`` has shape (3, height, width)."""

    planes: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.ascontiguousarray(self.planes, dtype=np.float32)
        if p.ndim != 3 or p.shape[0] != 3 or p.shape[1] < 1 or p.shape[2] < 1:
            raise ValueError(f"expected (3, h, w) planes, got {self.planes.shape}")
        if not np.isfinite(p).all():
            raise ValueError("image samples must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "planes", p)

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def max_side(self) -> int:
        return max(self.width, self.height)

    @classmethod
    def from_hwc(cls, arr: np.ndarray) -> "ImageBuf":
        """Build from an interleaved (h, w, 3) array."""
        return cls(np.transpose(np.asarray(arr), (2, 0, 1)))

    @classmethod
    def constant(cls, width: int, height: int, rgb=(0.0, 0.0, 0.0)) -> "ImageBuf":
        if np.isscalar(rgb):
            rgb = (rgb, rgb, rgb)
        p = np.empty((3, height, width), np.float32)
        for c in range(3):
            p[c] = rgb[c]
        return cls(p)

    def to_hwc(self) -> np.ndarray:
        return np.transpose(self.planes, (1, 2, 0))

    def clamped(self) -> "ImageBuf":
        return ImageBuf(np.clip(self.planes, 0.0, 1.0))

    def allclose(self, other: "ImageBuf", atol: float = 1e-6) -> bool:
        return (self.width == other.width and self.height == other.height
                and np.allclose(self.planes, other.planes, atol=atol, rtol=0))


def _is_animated_png(data: bytes) -> bool:
    # Walk chunks looking for acTL (APNG animation control) before IDAT.
    pos = len(_PNG_MAGIC)
    while pos + 8 <= len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        ctype = data[pos + 4:pos + 8]
        if ctype == b"acTL":
            return True
        if ctype in (b"IDAT", b"IEND"):
            return False
        pos += 12 + length
    return False


def decode_image(data: bytes) -> ImageBuf:
    """Decode PNG (8/16-bit) or JPEG bytes to an ImageBuf.

    8-bit samples map to v/255, 16-bit PNG to v/65535; grayscale is
    replicated to three channels.
    """
    if data.startswith(_PNG_MAGIC):
        if _is_animated_png(data):
            raise UnsupportedFormat("animated PNG is not supported")
    elif not data.startswith(_JPEG_MAGIC):
        raise UnsupportedFormat("expected PNG or JPEG data")

    arr = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise MalformedFile("undecodable image data")

    if arr.dtype == np.uint8:
        scaled = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        scaled = arr.astype(np.float32) / 65535.0
    else:
        raise UnsupportedFormat(f"unsupported sample type {arr.dtype}")

    if scaled.ndim == 2:
        hwc = np.repeat(scaled[:, :, None], 3, axis=2)
    elif scaled.ndim == 3 and scaled.shape[2] == 3:
        hwc = scaled[:, :, ::-1]  # BGR -> RGB
    elif scaled.ndim == 3 and scaled.shape[2] == 4:
        raise UnsupportedFormat("alpha channels are not supported")
    else:
        raise UnsupportedFormat(f"unsupported channel layout {scaled.shape}")

    return ImageBuf.from_hwc(np.clip(hwc, 0.0, 1.0))


def _quantize_u8(img: ImageBuf) -> np.ndarray:
    hwc = np.clip(img.to_hwc(), 0.0, 1.0)
    return np.rint(hwc * 255.0).astype(np.uint8)


def encode_png(img: ImageBuf) -> bytes:
    ok, buf = cv2.imencode(".png", _quantize_u8(img)[:, :, ::-1])
    if not ok:
        raise MalformedFile("PNG encoding failed")
    return buf.tobytes()


def encode_jpeg(img: ImageBuf, quality: int = 95) -> bytes:
    ok, buf = cv2.imencode(".jpg", _quantize_u8(img)[:, :, ::-1],
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise MalformedFile("JPEG encoding failed")
    return buf.tobytes()


def load_image(path) -> ImageBuf:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def save_image(path, img: ImageBuf, jpeg_quality: int = 95) -> None:
    p = str(path)
    if p.lower().endswith((".jpg", ".jpeg")):
        data = encode_jpeg(img, quality=jpeg_quality)
    else:
        data = encode_png(img)
    with open(p, "wb") as fh:
        fh.write(data)


def resize(img: ImageBuf, out_w: int, out_h: int,
           kernel: ResampleKernel = ResampleKernel.BICUBIC) -> ImageBuf:
    """Resample to (out_w, out_h); output is clamped to [0,1]."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    filt = _PIL_FILTER[kernel]
    out = np.empty((3, out_h, out_w), np.float32)
    for c in range(3):
        plane = Image.fromarray(img.planes[c], mode="F")
        out[c] = np.asarray(plane.resize((out_w, out_h), filt), np.float32)
    return ImageBuf(np.clip(out, 0.0, 1.0))


def rgb_to_luma(img: ImageBuf) -> np.ndarray:
    """BT.601 full-range luma plane: Y = 0.299 R + 0.587 G + 0.114 B."""
    p = img.planes.astype(np.float64)
    return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]


def luma_image(img: ImageBuf) -> ImageBuf:
    y = rgb_to_luma(img).astype(np.float32)
    return ImageBuf(np.repeat(y[None, :, :], 3, axis=0))


def crop_region(img: ImageBuf, rect: PixelRect) -> ImageBuf:
    if not rect.contained_in(img.width, img.height):
        raise RectOutOfBounds(f"{rect} outside {img.width}x{img.height}")
    return ImageBuf(img.planes[:, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w])


def paste_region(dst: ImageBuf, patch: ImageBuf, rect: PixelRect,
                 feather: int = 0) -> ImageBuf:
    """Paste ``patch`` over ``rect``, linearly feathering the boundary.

    The blend weight ramps from 0 at the rect border to 1 a distance
    ``feather`` inside it, so the interior beyond the band is the patch
    exactly. Pasting a region's own crop back is a bit-exact no-op at any
    feather width; feather=0 is a hard paste.
    """
    if not rect.contained_in(dst.width, dst.height):
        raise RectOutOfBounds(f"{rect} outside {dst.width}x{dst.height}")
    if (patch.width, patch.height) != (rect.w, rect.h):
        raise RectOutOfBounds(
            f"patch {patch.width}x{patch.height} does not match rect {rect.w}x{rect.h}")

    out = np.array(dst.planes, copy=True)
    window = out[:, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w]
    if feather <= 0:
        blended = patch.planes
    else:
        ys = np.arange(rect.h, dtype=np.float32)
        xs = np.arange(rect.w, dtype=np.float32)
        dy = np.minimum(ys, rect.h - 1 - ys)[:, None]
        dx = np.minimum(xs, rect.w - 1 - xs)[None, :]
        alpha = np.minimum(np.minimum(dy, dx) / float(feather), 1.0)
        # window + a*(patch-window) keeps self-pastes exact in the band;
        # where a reaches 1 the patch is taken verbatim
        blended = np.where(
            alpha >= 1.0,
            patch.planes,
            window + alpha * (patch.planes - window),
        ).astype(np.float32)
    out[:, rect.y:rect.y + rect.h, rect.x:rect.x + rect.w] = blended
    return ImageBuf(out)
