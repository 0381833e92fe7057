"""Minimal PNG codec, standard library only.

The wire protocol carries 8-bit PNGs, so that is the whole scope:
decode handles bit depth 8, color types gray / gray+alpha / RGB / RGBA,
all five scanline filters, no interlacing; encode writes RGB with
filter 0. Alpha is dropped and gray replicated so every decode lands in
the same flat RGB layout.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import PngError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# channels per pixel by color type
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


@dataclass
class Raster:
    """Flat 8-bit RGB image, row major, 3 bytes per pixel."""

    width: int
    height: int
    data: bytearray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise PngError(f"bad raster dims {self.width}x{self.height}")
        if len(self.data) != self.width * self.height * 3:
            raise PngError(
                f"raster data is {len(self.data)} bytes, "
                f"want {self.width * self.height * 3}")

    def pixel(self, x: int, y: int) -> tuple:
        i = (y * self.width + x) * 3
        return (self.data[i], self.data[i + 1], self.data[i + 2])

    def copy(self) -> "Raster":
        return Raster(self.width, self.height, bytearray(self.data))


def _chunks(data: bytes):
    pos = len(_SIGNATURE)
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        if pos + 12 + length > len(data):
            raise PngError("truncated chunk")
        body = data[pos + 8:pos + 8 + length]
        crc = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])[0]
        if crc != zlib.crc32(ctype + body) & 0xFFFFFFFF:
            raise PngError(f"bad crc in {ctype!r}")
        yield ctype, body
        pos += 12 + length


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw: bytes, width: int, height: int, bpp: int) -> bytearray:
    stride = width * bpp
    if len(raw) != (stride + 1) * height:
        raise PngError("decompressed size does not match dimensions")
    out = bytearray(stride * height)
    prior = bytes(stride)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = bytearray(raw[pos + 1:pos + 1 + stride])
        pos += 1 + stride
        if ftype == 0:
            pass
        elif ftype == 1:
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:
            for i in range(stride):
                line[i] = (line[i] + prior[i]) & 0xFF
        elif ftype == 3:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + (left + prior[i]) // 2) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up_left = prior[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + _paeth(left, prior[i], up_left)) & 0xFF
        else:
            raise PngError(f"unknown scanline filter {ftype}")
        out[y * stride:(y + 1) * stride] = line
        prior = line
    return out


def decode_png(data: bytes) -> Raster:
    if not data.startswith(_SIGNATURE):
        raise PngError("not a PNG (bad signature)")
    header = None
    idat = bytearray()
    for ctype, body in _chunks(data):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.extend(body)
        elif ctype == b"IEND":
            break
    if header is None:
        raise PngError("missing IHDR")
    width, height, depth, color, comp, filt, interlace = header
    if depth != 8:
        raise PngError(f"unsupported bit depth {depth}, only 8 served here")
    if color not in _CHANNELS:
        raise PngError(f"unsupported color type {color}")
    if comp != 0 or filt != 0:
        raise PngError("nonstandard compression or filter method")
    if interlace != 0:
        raise PngError("interlaced PNG is not supported")
    if not idat:
        raise PngError("no image data")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise PngError(f"corrupt image data: {exc}") from exc

    bpp = _CHANNELS[color]
    flat = _unfilter(raw, width, height, bpp)
    rgb = bytearray(width * height * 3)
    n = width * height
    if color == 2:
        rgb[:] = flat
    elif color == 6:
        for i in range(n):
            rgb[i * 3:i * 3 + 3] = flat[i * 4:i * 4 + 3]
    elif color == 0:
        for i in range(n):
            rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = flat[i]
    else:  # gray + alpha
        for i in range(n):
            rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = flat[i * 2]
    return Raster(width, height, rgb)


def encode_png(img: Raster) -> bytes:
    stride = img.width * 3
    raw = bytearray()
    for y in range(img.height):
        raw.append(0)
        raw.extend(img.data[y * stride:(y + 1) * stride])
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, 2, 0, 0, 0)

    def chunk(ctype: bytes, body: bytes) -> bytes:
        return (struct.pack(">I", len(body)) + ctype + body
                + struct.pack(">I", zlib.crc32(ctype + body) & 0xFFFFFFFF))

    return (_SIGNATURE + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(bytes(raw), 6))
            + chunk(b"IEND", b""))
