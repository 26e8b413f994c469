"""PPM decode/encode, bilinear resize oracle, preprocessing contract."""

import numpy as np
import pytest

from facetclip import image as I
from facetclip.errors import FormatError


def _solid_ppm(w, h, rgb):
    body = bytes(rgb) * (w * h)
    return f"P6\n{w} {h}\n255\n".encode() + body


class TestDecode:
    def test_solid_gray_is_constant_normalized(self):
        tensor = I.preprocess(_solid_ppm(8, 8, (128, 128, 128)), image_size=8)
        expected = (128 / 255 - I.NORM_MEAN) / I.NORM_STD
        np.testing.assert_allclose(tensor, expected, atol=1e-6)
        assert tensor.shape == (3, 8, 8)

    def test_wide_input_squashes_to_square(self):
        tensor = I.preprocess(_solid_ppm(128, 64, (10, 20, 30)), image_size=64)
        assert tensor.shape == (3, 64, 64)

    def test_comment_in_header(self):
        data = b"P6\n# a comment\n2 2\n255\n" + bytes(12)
        img = I.decode_ppm(data)
        assert img.shape == (3, 2, 2)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            I.decode_ppm(b"P5\n2 2\n255\n" + bytes(4))

    def test_truncated_payload(self):
        with pytest.raises(FormatError):
            I.decode_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_encode_decode_roundtrip(self):
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, size=(3, 5, 7)) / 255.0).astype(np.float32)
        back = I.decode_ppm(I.encode_ppm(img))
        np.testing.assert_allclose(back, img, atol=1 / 255 / 2 + 1e-6)


class TestBilinear:
    def test_checkerboard_2x_upsample_matches_hand_oracle(self):
        # 2x2 checkerboard, one channel. Half-pixel sampling puts the 4 output
        # coords at source positions [0, 0.25, 0.75, 1] (after edge clamping);
        # the expected grid below is worked out from the four corner weights.
        plane = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        img = plane[None, :, :]
        want = np.array(
            [
                [1.000, 0.750, 0.250, 0.000],
                [0.750, 0.625, 0.375, 0.250],
                [0.250, 0.375, 0.625, 0.750],
                [0.000, 0.250, 0.750, 1.000],
            ],
            dtype=np.float32,
        )
        got = I.bilinear_resize(img, 4, 4)
        np.testing.assert_allclose(got[0], want, atol=1e-6)

    def test_identity_resize_is_exact(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(I.bilinear_resize(img, 6, 6), img)

    def test_downsample_constant_stays_constant(self):
        img = np.full((3, 8, 8), 0.3, dtype=np.float32)
        np.testing.assert_allclose(I.bilinear_resize(img, 4, 4), 0.3, atol=1e-6)
