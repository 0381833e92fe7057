import io

import numpy as np
import pytest
from PIL import Image

from pixelplan.errors import MalformedFile, RectOutOfBounds, UnsupportedFormat
from pixelplan.imagecore import (
    ImageBuf,
    PixelRect,
    ResampleKernel,
    crop_region,
    decode_image,
    encode_jpeg,
    encode_png,
    paste_region,
    resize,
    rgb_to_luma,
)


def _png_bytes(arr, mode):
    buf = io.BytesIO()
    Image.fromarray(arr, mode).save(buf, format="PNG")
    return buf.getvalue()


class TestDecode:
    def test_red_2x2_png(self):
        data = _png_bytes(np.full((2, 2, 3), [255, 0, 0], np.uint8), "RGB")
        img = decode_image(data)
        assert img.width == 2 and img.height == 2
        assert np.all(img.planes[0] == 1.0)
        assert np.all(img.planes[1] == 0.0)
        assert np.all(img.planes[2] == 0.0)

    def test_png_roundtrip_bit_identical(self):
        rng = np.random.default_rng(7)
        src = decode_image(_png_bytes(rng.integers(0, 256, (9, 13, 3), dtype=np.uint8), "RGB"))
        again = decode_image(encode_png(src))
        assert np.array_equal(src.planes, again.planes)

    def test_gray_replicated(self):
        img = decode_image(_png_bytes(np.full((1, 1), 128, np.uint8), "L"))
        expected = 128 / 255.0
        assert np.allclose(img.planes, expected, atol=1e-7)
        assert img.planes[0, 0, 0] == img.planes[1, 0, 0] == img.planes[2, 0, 0]

    def test_16bit_png(self):
        import cv2
        arr = np.full((2, 2), 40000, np.uint16)
        ok, buf = cv2.imencode(".png", arr)
        assert ok
        img = decode_image(buf.tobytes())
        assert np.allclose(img.planes, 40000 / 65535.0, atol=1e-7)

    def test_jpeg_decodes(self):
        img = ImageBuf.constant(16, 16, 0.5)
        out = decode_image(encode_jpeg(img))
        assert out.width == 16 and np.allclose(out.planes, 0.5, atol=0.02)

    def test_malformed(self):
        with pytest.raises(MalformedFile):
            decode_image(b"\x89PNG\r\n\x1a\n" + b"junkjunkjunk")

    def test_not_an_image_format(self):
        with pytest.raises(UnsupportedFormat):
            decode_image(b"GIF89a....")

    def test_animated_png_rejected(self):
        frames = [Image.new("RGB", (4, 4), (i * 40, 0, 0)) for i in range(3)]
        buf = io.BytesIO()
        frames[0].save(buf, format="PNG", save_all=True, append_images=frames[1:])
        with pytest.raises(UnsupportedFormat):
            decode_image(buf.getvalue())

    def test_alpha_rejected(self):
        data = _png_bytes(np.zeros((2, 2, 4), np.uint8), "RGBA")
        with pytest.raises(UnsupportedFormat):
            decode_image(data)


class TestResize:
    @pytest.mark.parametrize("kernel", list(ResampleKernel))
    def test_constant_preserved(self, kernel):
        img = ImageBuf.constant(7, 5, 0.5)
        out = resize(img, 13, 11, kernel)
        assert out.width == 13 and out.height == 11
        assert np.allclose(out.planes, 0.5, atol=1e-6)

    def test_nearest_block_replication(self):
        checker = np.zeros((2, 2, 3), np.float32)
        checker[0, 1] = checker[1, 0] = 1.0
        img = ImageBuf.from_hwc(checker)
        out = resize(img, 4, 4, ResampleKernel.NEAREST)
        for sy in range(2):
            for sx in range(2):
                block = out.planes[:, 2 * sy:2 * sy + 2, 2 * sx:2 * sx + 2]
                assert np.all(block == img.planes[:, sy, sx][:, None, None])

    def test_bicubic_roundtrip_beats_nearest(self):
        rng = np.random.default_rng(42)
        img = ImageBuf.from_hwc(rng.random((64, 64, 3)).astype(np.float32))

        def downup_mse(kernel):
            down = resize(img, 16, 16, kernel)
            up = resize(down, 64, 64, kernel)
            return float(np.mean((up.planes - img.planes) ** 2))

        # 4x down then back up actually resamples; bicubic reconstructs
        # noise better than nearest there.
        assert downup_mse(ResampleKernel.BICUBIC) < downup_mse(ResampleKernel.NEAREST)

    def test_nearest_updown_is_identity(self):
        # Integer-factor up-then-down with nearest lands every sample back
        # on a replicated source pixel, so that direction is lossless and
        # useless for kernel comparisons.
        rng = np.random.default_rng(42)
        img = ImageBuf.from_hwc(rng.random((64, 64, 3)).astype(np.float32))
        up = resize(img, 256, 256, ResampleKernel.NEAREST)
        down = resize(up, 64, 64, ResampleKernel.NEAREST)
        assert np.array_equal(down.planes, img.planes)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            resize(ImageBuf.constant(4, 4), 0, 4)


class TestLuma:
    def test_primary_values(self):
        assert rgb_to_luma(ImageBuf.constant(1, 1, (1, 1, 1)))[0, 0] == pytest.approx(1.0)
        assert rgb_to_luma(ImageBuf.constant(1, 1, (0, 1, 0)))[0, 0] == pytest.approx(0.587)
        assert rgb_to_luma(ImageBuf.constant(1, 1, (0, 0, 1)))[0, 0] == pytest.approx(0.114)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = ImageBuf.from_hwc(rng.random((8, 8, 3)).astype(np.float32))
        y = ImageBuf.from_hwc(rng.random((8, 8, 3)).astype(np.float32))
        a, b = 0.3, 0.7
        mix = ImageBuf(a * x.planes + b * y.planes)
        lhs = rgb_to_luma(mix)
        rhs = a * rgb_to_luma(x) + b * rgb_to_luma(y)
        assert np.allclose(lhs, rhs, atol=1e-6)


class TestPaste:
    def test_hard_paste(self):
        dst = ImageBuf.constant(10, 10, 1.0)
        patch = ImageBuf.constant(4, 4, 0.0)
        rect = PixelRect(3, 3, 4, 4)
        out = paste_region(dst, patch, rect, feather=0)
        assert np.all(out.planes[:, 3:7, 3:7] == 0.0)
        mask = np.ones((10, 10), bool)
        mask[3:7, 3:7] = False
        assert np.all(out.planes[:, mask] == 1.0)

    def test_feather_band_midpoint(self):
        dst = ImageBuf.constant(40, 40, 1.0)
        patch = ImageBuf.constant(20, 20, 0.0)
        rect = PixelRect(10, 10, 20, 20)
        out = paste_region(dst, patch, rect, feather=2)
        # one pixel inside the rect border sits at the center of the ramp
        assert out.planes[0, 20, 11] == pytest.approx(0.5, abs=1e-6)
        # beyond the feather band the patch is exact
        assert np.all(out.planes[:, 13:27, 13:27] == 0.0)

    def test_self_paste_identity(self):
        rng = np.random.default_rng(11)
        img = ImageBuf.from_hwc(rng.random((12, 12, 3)).astype(np.float32))
        rect = PixelRect(2, 3, 6, 5)
        for feather in (0, 1, 3):
            out = paste_region(img, crop_region(img, rect), rect, feather)
            assert np.array_equal(out.planes, img.planes)

    def test_out_of_bounds(self):
        dst = ImageBuf.constant(8, 8)
        with pytest.raises(RectOutOfBounds):
            paste_region(dst, ImageBuf.constant(4, 4), PixelRect(6, 6, 4, 4), 0)
        with pytest.raises(RectOutOfBounds):
            paste_region(dst, ImageBuf.constant(3, 3), PixelRect(0, 0, 4, 4), 0)
