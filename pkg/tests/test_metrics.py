import math

import numpy as np
import pytest

from latis.errors import DimensionError
from latis.metrics import SSIM_K1, bicubic_resize, psnr, resize_matrix, ssim

from oracles import bicubic_loops


class TestBicubic:
    def test_same_size_is_identity(self, rng):
        img = rng.uniform(0, 1, (7, 9))
        np.testing.assert_allclose(bicubic_resize(img, 7, 9), img, atol=1e-15)

    @pytest.mark.parametrize("shape", [(5, 3), (16, 16), (40, 24)])
    def test_constant_stays_constant(self, shape):
        np.testing.assert_allclose(bicubic_resize(np.full((10, 12), 0.3), *shape), 0.3, atol=1e-12)

    @pytest.mark.parametrize("n_in,n_out", [(5, 10), (12, 4), (9, 27), (16, 8)])
    def test_partition_of_unity(self, n_in, n_out):
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)

    def test_linear_ramp_reproduced(self):
        ramp = np.tile(np.linspace(0.1, 0.9, 16), (4, 1))
        up = bicubic_resize(ramp, 8, 32)
        x_out = (np.arange(32) + 0.5) / 2 - 0.5
        expected = 0.1 + 0.8 * x_out / 15
        np.testing.assert_allclose(up[:, 4:-4], np.tile(expected, (8, 1))[:, 4:-4], atol=1e-6)

    @pytest.mark.parametrize("out_shape", [(16, 20), (4, 5), (8, 30), (24, 30)])
    def test_matches_loop_oracle(self, rng, out_shape):
        img = rng.uniform(0, 1, (8, 10))
        np.testing.assert_allclose(bicubic_resize(img, *out_shape), bicubic_loops(img, *out_shape), atol=1e-12)

    def test_down_then_up(self):
        y, x = np.mgrid[0:64, 0:64] / 64
        smooth = 0.5 + 0.2 * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
        back = bicubic_resize(bicubic_resize(smooth, 32, 32), 64, 64)
        assert np.sqrt(np.mean((back - smooth) ** 2)) < 1e-2
        const = np.full((64, 64), 0.4)
        np.testing.assert_allclose(bicubic_resize(bicubic_resize(const, 16, 16), 64, 64), const, atol=1e-12)

    def test_output_is_clipped(self):
        step = np.zeros((8, 8))
        step[:, 4:] = 1.0
        up = bicubic_resize(step, 16, 16)
        assert up.min() >= 0.0 and up.max() <= 1.0

    def test_preserves_float32(self):
        assert bicubic_resize(np.zeros((4, 4), dtype=np.float32), 8, 8).dtype == np.float32


class TestPSNR:
    def test_identical_is_inf(self, rng):
        img = rng.uniform(0, 1, (8, 8))
        assert psnr(img, img) == math.inf

    @pytest.mark.parametrize("delta,expected", [(0.1, 20.0), (1.0, 0.0)])
    def test_uniform_difference(self, delta, expected):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), delta)) == pytest.approx(expected, abs=1e-9)

    def test_symmetric_and_shave(self, rng):
        a, b = rng.uniform(0, 1, (10, 10)), rng.uniform(0, 1, (10, 10))
        assert psnr(a, b) == psnr(b, a)
        assert psnr(a, b, shave=2) == pytest.approx(psnr(a[2:-2, 2:-2], b[2:-2, 2:-2]))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSSIM:
    def test_identical_is_one(self, rng):
        img = rng.uniform(0, 1, (16, 16))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_is_negative(self, rng):
        img = (rng.uniform(0, 1, (24, 24)) > 0.5).astype(float)
        assert ssim(img, 1 - img) < 0

    @pytest.mark.parametrize("c", [0.2, 0.5, 0.8])
    def test_constant_offset_luminance_only(self, c):
        c1 = (SSIM_K1 * 1.0) ** 2
        closed = (2 * c * (c + 0.1) + c1) / (c * c + (c + 0.1) ** 2 + c1)
        assert ssim(np.full((16, 16), c), np.full((16, 16), c + 0.1)) == pytest.approx(closed, abs=1e-6)

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (20, 20)), rng.uniform(0, 1, (20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))
