import math

import numpy as np
import pytest

from latis import ops
from latis.errors import ConfigError, DimensionError
from latis.tensor import Tensor

from oracles import conv2d_loops, conv3d_loops, contract_query_lambda


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        w[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_zero_input_gives_bias(self):
        b = np.array([0.5, -1.0], dtype=np.float32)
        out = ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.ones((2, 3, 3, 3))), Tensor(b), padding=1)
        np.testing.assert_array_equal(out.data[0, :, 1, 2], b)
        assert np.all(out.data[0, 0] == 0.5) and np.all(out.data[0, 1] == -1.0)

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (1, 3, 7), (2, 1, 3), (2, 0, 3), (1, 0, 1)])
    def test_matches_loop_oracle(self, rng, stride, padding, k):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(3)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, padding), atol=1e-5)

    def test_output_size_law(self):
        out = ops.conv2d(Tensor(np.zeros((1, 1, 9, 7))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestConv3dLambda:
    def test_zero_values(self, rng):
        out = ops.conv3d_lambda(Tensor(np.zeros((1, 2, 3, 4, 4))), Tensor(rng.standard_normal((5, 2, 1, 3, 3))))
        assert out.shape == (1, 5, 3, 4, 4) and not out.data.any()

    def test_r1_is_pointwise_channel_map(self, rng):
        x = rng.standard_normal((2, 1, 3, 4, 5))
        kern = rng.standard_normal((4, 1, 1, 1, 1))
        out = ops.conv3d_lambda(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64))
        np.testing.assert_allclose(out.data, kern[:, 0, 0, 0, 0][None, :, None, None, None] * x, atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 1, 2, 4, 4))
        kern = rng.standard_normal((3, 1, 1, 3, 3))
        out = ops.conv3d_lambda(Tensor(x), Tensor(kern))
        np.testing.assert_allclose(out.data, conv3d_loops(x, kern), atol=1e-6)

    def test_large_kernel_matches_oracle_in_float64(self, rng):
        x = rng.standard_normal((1, 2, 2, 6, 5))
        kern = rng.standard_normal((2, 2, 1, 9, 9))
        b = rng.standard_normal(2)
        out = ops.conv3d_lambda(Tensor(x, dtype=np.float64), Tensor(kern, dtype=np.float64),
                                Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, conv3d_loops(x, kern, b), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ops.conv3d_lambda(Tensor(np.zeros((1, 1, 1, 4, 4))), Tensor(np.zeros((1, 1, 1, 2, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(5))).data, np.full(5, 0.2), rtol=1e-6)

    def test_ln2(self):
        out = ops.softmax(Tensor(np.array([0.0, math.log(2.0)]), dtype=np.float64)).data
        np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-12)

    def test_shift_invariance_and_normalisation(self, rng):
        x = rng.standard_normal((3, 7))
        a = ops.softmax(Tensor(x, dtype=np.float64), axis=1).data
        b = ops.softmax(Tensor(x + 100.0, dtype=np.float64), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)

    def test_large_inputs_stay_finite(self):
        assert np.all(np.isfinite(ops.softmax(Tensor(np.array([1e4, 1e4 + 1.0]))).data))


class TestElementwise:
    def test_known_values(self):
        assert ops.elementwise("silu", Tensor([0.0])).data[0] == 0.0
        assert ops.elementwise("sigmoid", Tensor([0.0])).data[0] == 0.5
        assert ops.elementwise("silu", Tensor([1.0], dtype=np.float64)).data[0] == pytest.approx(0.731059, abs=1e-6)

    def test_scale_and_arithmetic(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal(ops.elementwise("add", a, b).data, [4, 7])
        np.testing.assert_array_equal(ops.elementwise("sub", a, b).data, [-2, -3])
        np.testing.assert_array_equal(ops.elementwise("mul", a, b).data, [3, 10])
        np.testing.assert_array_equal(ops.elementwise("scale", a, 0.5).data, [0.5, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises((DimensionError, ValueError)):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ops.elementwise("tanh", Tensor([0.0]))


class TestLayerNorm:
    def test_constant_input_gives_zero(self):
        out = ops.layer_norm(Tensor(np.full((1, 2, 3, 3), 4.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.all(out.data == 0)

    def test_moments(self, rng):
        x = rng.standard_normal((2, 4, 5, 5)) * 3 + 1
        out = ops.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-5)

    def test_two_values(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1), dtype=np.float64)
        out = ops.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
        np.testing.assert_allclose(out.ravel(), [-1, 1], atol=1e-9)

    def test_per_position_mode(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        out = ops.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                             mode="per_position").data
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)

    def test_nonpositive_eps(self):
        with pytest.raises(ConfigError):
            ops.layer_norm(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0)


class TestShuffles:
    def test_channel_shuffle_identity_for_one_group(self, rng):
        x = rng.standard_normal((1, 6, 2, 2))
        np.testing.assert_array_equal(ops.channel_shuffle(Tensor(x, dtype=np.float64), 1).data, x)

    def test_channel_shuffle_abcd(self):
        x = np.arange(4.0).reshape(1, 4, 1, 1)
        np.testing.assert_array_equal(ops.channel_shuffle(Tensor(x), 2).data.ravel(), [0, 2, 1, 3])

    def test_channel_shuffle_destination_formula(self):
        c, g = 32, 4
        out = ops.channel_shuffle(Tensor(np.arange(float(c)).reshape(1, c, 1, 1)), g).data.ravel()
        for src in range(c):
            assert out[(src % g) * (c // g) + src // g] == src

    def test_channel_shuffle_inverse(self):
        x = Tensor(np.arange(32.0).reshape(1, 32, 1, 1))
        back = ops.channel_shuffle(ops.channel_shuffle(x, 4), 8)
        np.testing.assert_array_equal(back.data, x.data)

    def test_channel_shuffle_indivisible(self):
        with pytest.raises(ConfigError):
            ops.channel_shuffle(Tensor(np.zeros((1, 6, 1, 1))), 4)

    def test_pixel_shuffle_identity(self, rng):
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(ops.pixel_shuffle(Tensor(x), 1).data, x)

    def test_pixel_shuffle_index_formula(self):
        s = 2
        x = np.arange(16.0).reshape(1, 4, 2, 2)
        out = ops.pixel_shuffle(Tensor(x), s).data
        assert out.shape == (1, 1, 4, 4)
        for ch in range(4):
            for h in range(2):
                for w in range(2):
                    dy, dx = divmod(ch, s)
                    assert out[0, 0, s * h + dy, s * w + dx] == x[0, ch, h, w]

    def test_pixel_shuffle_indivisible(self):
        with pytest.raises((ConfigError, DimensionError)):
            ops.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


class TestContract:
    def test_matrix_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ops.contract("ij,jk->ik", Tensor(a), Tensor(np.eye(2))).data, a)

    def test_matches_loop_oracle(self, rng):
        q = rng.standard_normal((2, 3, 4, 5))
        lam = rng.standard_normal((2, 4, 3))
        out = ops.contract("nhkm,nkv->nhvm", Tensor(q), Tensor(lam))
        np.testing.assert_allclose(out.data, contract_query_lambda(q, lam), atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ops.contract("ij,jk->ik", Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestReduce:
    def test_sum_of_ones(self):
        assert ops.reduce(Tensor(np.ones((2, 3))), "sum").item() == 6

    def test_mean_spatial_constant(self):
        out = ops.reduce(Tensor(np.full((1, 2, 3, 3), 0.25)), "mean_spatial")
        assert out.shape == (1, 2, 1, 1) and np.all(out.data == 0.25)

    def test_max_routes_gradient_to_argmax(self, f64):
        x = Tensor(np.array([1.0, 3.0, 2.0]).reshape(1, 1, 1, 3), requires_grad=True)
        ops.reduce(x, "max_spatial").sum().backward()
        np.testing.assert_array_equal(x.grad.ravel(), [0, 1, 0])

    def test_max_ties_go_to_first_index(self, f64):
        x = Tensor(np.array([2.0, 2.0]).reshape(1, 2, 1, 1), requires_grad=True)
        ops.reduce(x, "max_channel").sum().backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1, 0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ops.reduce(Tensor(np.ones((1, 1, 1, 1))), "median")


class TestMacCounting:
    def test_conv2d_macs(self):
        with ops.count_macs() as counts:
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), padding=1)
        assert counts["conv2d"] == 3 * 2 * 9 * 16
