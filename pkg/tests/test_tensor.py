"""Tensor-core: forward semantics against hand values, gradients against
central finite differences, structural invariants of the tape."""

import numpy as np
import pytest
from helpers import check_grads

from rwkvir import tensor as tc
from rwkvir.errors import ConfigError, ShapeError
from rwkvir.tensor import Tensor


def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(Tensor(np.eye(2)), Tensor([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_hand_1x2_2x1(self):
        out = tc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grads_match_finite_differences(self):
        r = rng()
        errs = check_grads(tc.matmul, [r.standard_normal((4, 3)), r.standard_normal((3, 2))], r)
        assert max(errs) <= 1e-6


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = tc.layer_norm(Tensor(np.full((1, 6), 3.7)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_standardization(self):
        out = tc.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_grads(self):
        r = rng()
        errs = check_grads(
            tc.layer_norm,
            [r.standard_normal((5, 8)), r.standard_normal(8), r.standard_normal(8)],
            r,
        )
        assert max(errs) <= 1e-5


class TestPointwiseOps:
    def test_sigmoid_at_zero(self):
        assert tc.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = tc.sigmoid(Tensor([-1e4, 1e4])).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_squared_relu_values(self):
        out = tc.squared_relu(Tensor([-2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 9.0])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.mul(Tensor(np.ones(3)), Tensor(np.ones(4)))

    @pytest.mark.parametrize("op", [tc.sigmoid, tc.squared_relu, tc.abs_, tc.neg])
    def test_unary_grads(self, op):
        r = rng()
        x = r.standard_normal((4, 5)) + 0.2  # keep clear of the relu/abs kink
        errs = check_grads(op, [x], r)
        assert max(errs) <= 1e-6

    @pytest.mark.parametrize("op", [tc.add, tc.sub, tc.mul])
    def test_binary_grads(self, op):
        r = rng()
        errs = check_grads(op, [r.standard_normal((3, 4)), r.standard_normal((3, 4))], r)
        assert max(errs) <= 1e-6

    def test_scale_and_mean_grads(self):
        r = rng()
        check_grads(lambda x, s: tc.scale(x, s), [r.standard_normal((3, 3)), r.standard_normal(1)], r)
        check_grads(tc.mean, [r.standard_normal((4, 4))], r)


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self):
        r = rng()
        x = r.random((5, 6, 3))
        kern = np.zeros((3, 3, 3))
        kern[1, 1, :] = 1.0
        out = tc.depthwise_conv2d(Tensor(x), Tensor(kern))
        np.testing.assert_array_equal(out.data, x)

    def test_1x1_kernel_scales(self):
        r = rng()
        x = r.random((4, 4, 2))
        out = tc.depthwise_conv2d(Tensor(x), Tensor(np.full((1, 1, 2), 2.5)))
        np.testing.assert_allclose(out.data, 2.5 * x, rtol=1e-15)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            tc.depthwise_conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1))))

    def test_matches_nested_loop_oracle(self):
        r = rng()
        x = r.standard_normal((6, 6, 2))
        kern = r.standard_normal((3, 3, 2))
        out = tc.depthwise_conv2d(Tensor(x), Tensor(kern)).data
        # independent oracle: literal nested loops over output pixels and taps
        expect = np.zeros_like(x)
        for h in range(6):
            for w in range(6):
                for i in range(3):
                    for j in range(3):
                        hy, wx = h + i - 1, w + j - 1
                        if 0 <= hy < 6 and 0 <= wx < 6:
                            expect[h, w] += x[hy, wx] * kern[i, j]
        np.testing.assert_array_equal(out, expect)

    def test_grads(self):
        r = rng()
        check_grads(tc.depthwise_conv2d, [r.standard_normal((5, 4, 2)), r.standard_normal((3, 3, 2))], r)


class TestConv2d:
    def test_grads_with_bias(self):
        r = rng()
        check_grads(
            tc.conv2d,
            [r.standard_normal((5, 5, 2)), r.standard_normal((3, 3, 2, 3)), r.standard_normal(3)],
            r,
        )

    def test_1x1_equals_matmul(self):
        r = rng()
        x = r.standard_normal((4, 6, 3))
        kern = r.standard_normal((1, 1, 3, 5))
        out = tc.conv2d(Tensor(x), Tensor(kern)).data
        np.testing.assert_allclose(out, x @ kern[0, 0], atol=1e-12)


class TestPixelShuffle:
    def test_2x2_block_order(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
        un = tc.pixel_unshuffle(Tensor(x))
        np.testing.assert_array_equal(un.data, [[[1.0, 2.0, 3.0, 4.0]]])
        back = tc.pixel_shuffle(un)
        np.testing.assert_array_equal(back.data, x)

    def test_ramp_round_trip(self):
        x = np.arange(16.0).reshape(4, 4, 1)
        back = tc.pixel_shuffle(tc.pixel_unshuffle(Tensor(x)))
        np.testing.assert_array_equal(back.data, x)

    def test_random_round_trip_bit_exact(self):
        x = rng().random((8, 8, 3))
        back = tc.pixel_shuffle(tc.pixel_unshuffle(Tensor(x)))
        assert (back.data == x).all()

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            tc.pixel_unshuffle(Tensor(np.ones((5, 4, 1))))

    def test_grads(self):
        r = rng()
        check_grads(tc.pixel_unshuffle, [r.standard_normal((4, 6, 2))], r)
        check_grads(tc.pixel_shuffle, [r.standard_normal((3, 2, 8))], r)


class TestConcat:
    def test_concat_with_empty(self):
        x = rng().random((3, 3, 2))
        out = tc.concat_channels(Tensor(x), Tensor(np.zeros((3, 3, 0))))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_values(self):
        out = tc.concat_channels(Tensor([[[5.0]]]), Tensor([[[6.0, 7.0]]]))
        np.testing.assert_array_equal(out.data, [[[5.0, 6.0, 7.0]]])

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            tc.concat_channels(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 2, 1))))

    def test_grads_route_to_correct_halves(self):
        r = rng()
        check_grads(tc.concat_channels, [r.standard_normal((3, 4, 2)), r.standard_normal((3, 4, 3))], r)


class TestStructuralOps:
    def test_gather_rows_grads(self):
        r = rng()
        idx = np.array([2, 0, 1, 2])  # includes fan-out onto row 2
        check_grads(lambda x: tc.gather_rows(x, idx), [r.standard_normal((3, 4))], r)

    def test_shift2d_values(self):
        x = np.array([[1.0, 2.0, 3.0]])[:, :, None]
        out = tc.shift2d(Tensor(x), 0, 1)
        np.testing.assert_array_equal(out.data[:, :, 0], [[0.0, 1.0, 2.0]])

    @pytest.mark.parametrize("dy,dx", [(0, 1), (0, -1), (1, 0), (-1, 0)])
    def test_shift2d_grads(self, dy, dx):
        r = rng()
        check_grads(lambda x: tc.shift2d(x, dy, dx), [r.standard_normal((4, 5, 2))], r)

    def test_reshape_select_slice_grads(self):
        r = rng()
        check_grads(lambda x: tc.reshape(x, (6, 2)), [r.standard_normal((3, 4))], r)
        check_grads(lambda x: tc.select(x, (1, 2)), [r.standard_normal((3, 4))], r)
        check_grads(lambda x: tc.slice_channels(x, 1, 3), [r.standard_normal((3, 4, 4))], r)

    def test_pad_reflect_and_crop(self):
        x = np.arange(12.0).reshape(3, 4, 1)
        padded = tc.pad_reflect2d(Tensor(x), 0, 2, 0, 1)
        assert padded.data.shape == (5, 5, 1)
        np.testing.assert_array_equal(padded.data[3, :, 0], x[1, [0, 1, 2, 3, 2], 0])
        r = rng()
        check_grads(lambda t: tc.pad_reflect2d(t, 1, 2, 0, 1), [r.standard_normal((3, 4, 2))], r)
        check_grads(lambda t: tc.crop2d(t, 1, 3, 0, 2), [r.standard_normal((4, 4, 2))], r)


class TestTape:
    def test_fanout_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tc.add(x, x)
        y.backward(np.array([1.0, 1.0]))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_grad_populated_for_all_reachable(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        out = tc.mul(tc.add(x, y), y)
        out.backward()
        assert x.grad is not None and y.grad is not None

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with tc.no_grad():
            y = tc.add(x, x)
        assert y._backward is None and not y.requires_grad

    def test_non_grad_leaf_gets_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3))
        out = tc.mul(x, c)
        out.backward()
        assert c.grad is None and x.grad is not None

    def test_all_ops_finite_difference_sweep(self):
        """Every differentiable op on three random shapes, rel err <= 1e-4."""
        r = rng()
        shapes = [(2, 3), (4, 4), (6, 2)]
        for shape in shapes:
            check_grads(tc.add, [r.standard_normal(shape), r.standard_normal(shape)], r)
            check_grads(tc.mul, [r.standard_normal(shape), r.standard_normal(shape)], r)
            check_grads(tc.sigmoid, [r.standard_normal(shape)], r)
            check_grads(tc.squared_relu, [r.standard_normal(shape) + 0.3], r)
            check_grads(tc.matmul, [r.standard_normal(shape), r.standard_normal(shape[::-1])], r)
            check_grads(
                tc.layer_norm,
                [r.standard_normal(shape), r.standard_normal(shape[-1]), r.standard_normal(shape[-1])],
                r,
            )
        for img_shape in [(4, 4, 1), (5, 3, 2), (3, 6, 4)]:
            check_grads(
                tc.depthwise_conv2d,
                [r.standard_normal(img_shape), r.standard_normal((3, 3, img_shape[-1]))],
                r,
            )
