"""Numeric-kernel tests: convolution, ReLU, max-pool, init, SGD.

Convolution is checked against a direct nested-loop oracle and against
central finite differences of a scalar loss, run in float64 so the
comparison is limited by the method (h = 1e-3), not the arithmetic.
"""

import numpy as np
import pytest

from crowdcount.errors import ConfigurationError
from crowdcount.nnops import (
    ConvLayerParams,
    conv2d_backward,
    conv2d_forward,
    draw_gaussian,
    gaussian_init,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    relu_backward,
    sgd_step,
)


def naive_conv2d(x, weights, bias):
    """Five-loop reference convolution with same-zero padding."""
    o_ch, i_ch, k, _ = weights.shape
    _, h, w = x.shape
    pad = (k - 1) // 2
    out = np.zeros((o_ch, h, w), dtype=np.float64)
    for o in range(o_ch):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for c in range(i_ch):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xc = y + dy - pad, xx + dx - pad
                            if 0 <= yy < h and 0 <= xc < w:
                                acc += weights[o, c, dy, dx] * x[c, yy, xc]
                out[o, y, xx] = acc + bias[o]
    return out


def layer(weights, bias):
    return ConvLayerParams(weights=np.asarray(weights), bias=np.asarray(bias))


class TestConvForward:
    def test_identity_1x1_kernel(self):
        """A 1x1 kernel of weight 1 and bias 0 reproduces the input."""
        x = np.random.default_rng(0).normal(size=(1, 5, 7)).astype(np.float32)
        params = layer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        np.testing.assert_array_equal(conv2d_forward(x, params), x)

    def test_all_ones_3x3_on_constant(self):
        """Interior pixels of an all-ones 3x3 over constant 2.0 give 18.0."""
        x = np.full((1, 6, 6), 2.0, dtype=np.float32)
        params = layer(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
        out = conv2d_forward(x, params)
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 18.0, rtol=1e-6)
        # border pixels see zero padding: corner window covers 4 cells
        np.testing.assert_allclose(out[0, 0, 0], 8.0, rtol=1e-6)

    @pytest.mark.parametrize("i_ch,o_ch,k", [(1, 1, 3), (3, 2, 3), (2, 4, 5)])
    def test_matches_naive_oracle(self, i_ch, o_ch, k):
        rng = np.random.default_rng(17 + k)
        x = rng.normal(size=(i_ch, 5, 5))
        weights = rng.normal(size=(o_ch, i_ch, k, k))
        bias = rng.normal(size=o_ch)
        out = conv2d_forward(x, layer(weights, bias))
        np.testing.assert_allclose(out, naive_conv2d(x, weights, bias), rtol=1e-5)

    def test_linear_in_input(self):
        """f(a*x + b*y) = a*f(x) + b*f(y) with bias fixed at zero."""
        rng = np.random.default_rng(3)
        params = layer(
            rng.normal(size=(4, 2, 3, 3)).astype(np.float32), np.zeros(4, np.float32)
        )
        x = rng.normal(size=(2, 8, 8)).astype(np.float32)
        y = rng.normal(size=(2, 8, 8)).astype(np.float32)
        lhs = conv2d_forward(2.5 * x - 0.5 * y, params)
        rhs = 2.5 * conv2d_forward(x, params) - 0.5 * conv2d_forward(y, params)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 20, 20)).astype(np.float32)
        params = layer(
            rng.normal(size=(8, 3, 7, 7)).astype(np.float32),
            rng.normal(size=8).astype(np.float32),
        )
        np.testing.assert_array_equal(
            conv2d_forward(x, params), conv2d_forward(x, params)
        )

    def test_channel_mismatch_rejected(self):
        params = layer(np.ones((1, 3, 3, 3), np.float32), np.zeros(1, np.float32))
        with pytest.raises(ConfigurationError):
            conv2d_forward(np.zeros((2, 5, 5), np.float32), params)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            layer(np.ones((1, 1, 2, 2), np.float32), np.zeros(1, np.float32))

    def test_non_chw_input_rejected(self):
        params = layer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        with pytest.raises(ConfigurationError):
            conv2d_forward(np.zeros((5, 5), np.float32), params)


class TestConvBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 6, 6))
        params = layer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        gw, gb, gx = conv2d_backward(x, params, np.zeros((3, 6, 6)))
        assert not gw.any() and not gb.any() and not gx.any()

    def test_linear_in_upstream(self):
        """Doubling the upstream gradient doubles every output exactly."""
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 6, 6))
        params = layer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        up = rng.normal(size=(3, 6, 6))
        gw1, gb1, gx1 = conv2d_backward(x, params, up)
        gw2, gb2, gx2 = conv2d_backward(x, params, 2.0 * up)
        np.testing.assert_array_equal(gw2, 2.0 * gw1)
        np.testing.assert_array_equal(gb2, 2.0 * gb1)
        np.testing.assert_array_equal(gx2, 2.0 * gx1)

    def test_bias_gradient_is_upstream_sum(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 4, 4))
        params = layer(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))
        up = rng.normal(size=(2, 4, 4))
        _, gb, _ = conv2d_backward(x, params, up)
        np.testing.assert_allclose(gb, up.sum(axis=(1, 2)), rtol=1e-12)

    @pytest.mark.parametrize("k", [9, 7, 5, 1])
    def test_finite_differences_per_kernel_size(self, k):
        """Every weight, bias, and input gradient matches central FD.

        Loss is sum(output^2)/2, so the upstream gradient equals the
        forward output.  h = 1e-3, max relative error < 1e-3, float64.
        """
        rng = np.random.default_rng(k)
        x = rng.normal(size=(1, 10, 10))
        weights = rng.normal(scale=0.5, size=(1, 1, k, k))
        bias = rng.normal(size=1)
        params = layer(weights.copy(), bias.copy())
        out = conv2d_forward(x, params)
        gw, gb, gx = conv2d_backward(x, params, out)
        h = 1e-3

        def loss(xv, wv, bv):
            o = conv2d_forward(xv, layer(wv, bv))
            return 0.5 * float(np.sum(o * o))

        def check(analytic, base, setter):
            flat = base.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss(*setter())
                flat[i] = orig - h
                dn = loss(*setter())
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                denom = max(abs(fd), abs(analytic.reshape(-1)[i]), 1e-8)
                assert abs(fd - analytic.reshape(-1)[i]) / denom < 1e-3

        check(gw, weights, lambda: (x, weights, bias))
        check(gb, bias, lambda: (x, weights, bias))
        check(gx, x, lambda: (x, weights, bias))

    def test_upstream_shape_mismatch_rejected(self):
        params = layer(np.ones((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ConfigurationError):
            conv2d_backward(np.zeros((1, 4, 4)), params, np.zeros((1, 5, 5)))


class TestRelu:
    def test_examples(self):
        np.testing.assert_array_equal(
            relu(np.array([-1.0, 0.0, 2.5])), [0.0, 0.0, 2.5]
        )
        assert not relu(np.full((3, 3), -4.0)).any()

    def test_idempotent_exactly(self):
        x = np.random.default_rng(1).normal(size=(2, 9, 9)).astype(np.float32)
        once = relu(x)
        np.testing.assert_array_equal(relu(once), once)

    def test_backward_mask(self):
        """Gradient passes where input > 0; zero at negatives and at 0."""
        x = np.array([-1.0, 2.0, 0.0])
        up = np.array([5.0, 5.0, 5.0])
        np.testing.assert_array_equal(relu_backward(x, up), [0.0, 5.0, 0.0])


class TestMaxPool:
    def test_single_window(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        pooled, _ = maxpool2_forward(x)
        np.testing.assert_array_equal(pooled, [[[4.0]]])

    def test_ceiling_shapes(self):
        pooled, _ = maxpool2_forward(np.zeros((1, 3, 3), np.float32))
        assert pooled.shape == (1, 2, 2)
        pooled, _ = maxpool2_forward(np.zeros((2, 7, 10), np.float32))
        assert pooled.shape == (2, 4, 5)

    def test_constant_ties_route_first(self):
        """Constant windows pool to the constant; gradient goes to the
        first (row-major) element of each window."""
        x = np.full((1, 4, 4), 3.0)
        pooled, argmax = maxpool2_forward(x)
        np.testing.assert_array_equal(pooled, np.full((1, 2, 2), 3.0))
        assert not argmax.any()
        grad = maxpool2_backward(np.ones((1, 2, 2)), argmax, (1, 4, 4))
        expected = np.zeros((1, 4, 4))
        expected[0, ::2, ::2] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_sum_and_max_invariants(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.0, 5.0, size=(3, 9, 11))
        pooled, _ = maxpool2_forward(x)
        assert pooled.sum() <= x.sum()
        assert pooled.max() == x.max()

    def test_backward_matches_finite_differences(self):
        """Routed gradient of sum(pooled^2)/2 matches FD on odd dims."""
        rng = np.random.default_rng(4)
        x = rng.permutation(np.arange(1.0, 36.0)).reshape(1, 5, 7)  # no ties
        pooled, argmax = maxpool2_forward(x)
        grad = maxpool2_backward(pooled, argmax, x.shape)
        h = 1e-4
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = 0.5 * float(np.sum(maxpool2_forward(x)[0] ** 2))
            flat[i] = orig - h
            dn = 0.5 * float(np.sum(maxpool2_forward(x)[0] ** 2))
            flat[i] = orig
            np.testing.assert_allclose(
                (up - dn) / (2 * h), grad.reshape(-1)[i], rtol=1e-5, atol=1e-6
            )


class TestGaussianInit:
    def test_same_seed_bit_identical(self):
        a = gaussian_init((36, 3, 9, 9), std=0.01, seed=42)
        b = gaussian_init((36, 3, 9, 9), std=0.01, seed=42)
        np.testing.assert_array_equal(a, b)
        assert a.dtype == np.float32

    def test_seeded_stream_statistics(self):
        x = gaussian_init((10_000,), std=0.01, seed=0)
        assert abs(x.mean()) < 4 * 0.01 / 100
        assert abs(x.std() - 0.01) < 0.05 * 0.01

    def test_zero_std_rejected(self):
        with pytest.raises(ConfigurationError):
            gaussian_init((4,), std=0.0, seed=0)
        with pytest.raises(ConfigurationError):
            draw_gaussian(np.random.default_rng(0), (4,), -1.0)

    def test_draw_continues_the_stream(self):
        rng = np.random.default_rng(9)
        first = draw_gaussian(rng, (8,), 0.01)
        second = draw_gaussian(rng, (8,), 0.01)
        assert not np.array_equal(first, second)


def scalar_layer(value):
    return layer(np.array([[[[value]]]], dtype=np.float64), np.zeros(1))


class TestSgdStep:
    def test_no_op_case(self):
        """grad 0, weight_decay 0, zero velocity: parameters unchanged."""
        p = scalar_layer(1.25)
        sgd_step(p, np.zeros_like(p.weights), np.zeros(1), lr=0.1,
                 momentum=0.9, weight_decay=0.0)
        assert p.weights[0, 0, 0, 0] == 1.25

    def test_single_step_arithmetic(self):
        p = scalar_layer(1.0)
        sgd_step(p, np.full_like(p.weights, 0.5), np.zeros(1), lr=0.1,
                 momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p.weights[0, 0, 0, 0], 0.95, rtol=1e-12)

    def test_two_step_heavy_ball_recurrence(self):
        """v1 = 0.1, v2 = 0.9*0.1 + 0.1 = 0.19: params -0.1 then -0.29."""
        p = scalar_layer(0.0)
        g = np.ones_like(p.weights)
        sgd_step(p, g, np.zeros(1), lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p.weights[0, 0, 0, 0], -0.1, rtol=1e-12)
        sgd_step(p, g, np.zeros(1), lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p.weights[0, 0, 0, 0], -0.29, rtol=1e-12)

    def test_weight_decay_pulls_toward_zero(self):
        p = scalar_layer(1.0)
        sgd_step(p, np.zeros_like(p.weights), np.zeros(1), lr=1.0,
                 momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(p.weights[0, 0, 0, 0], 0.5, rtol=1e-12)

    def test_zero_lr_is_identity_on_fresh_buffers(self):
        rng = np.random.default_rng(12)
        p = layer(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))
        w0, b0 = p.weights.copy(), p.bias.copy()
        sgd_step(p, rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), lr=0.0)
        np.testing.assert_array_equal(p.weights, w0)
        np.testing.assert_array_equal(p.bias, b0)

    def test_bias_also_decayed(self):
        p = layer(np.zeros((1, 1, 1, 1)), np.array([2.0]))
        sgd_step(p, np.zeros((1, 1, 1, 1)), np.zeros(1), lr=1.0,
                 momentum=0.0, weight_decay=0.1)
        np.testing.assert_allclose(p.bias[0], 1.8, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        p = scalar_layer(0.0)
        with pytest.raises(ConfigurationError):
            sgd_step(p, np.zeros((2, 1, 1, 1)), np.zeros(1), lr=0.1)
        with pytest.raises(ConfigurationError):
            sgd_step(p, np.zeros((1, 1, 1, 1)), np.zeros(2), lr=0.1)

    def test_momentum_buffers_start_zero(self):
        p = scalar_layer(1.0)
        assert not p.vel_weights.any() and not p.vel_bias.any()
