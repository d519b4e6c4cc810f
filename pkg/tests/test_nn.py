"""Tests for the tensor ops: conv, pool, dense, dropout, batch norm, loss, SGD.

Every backward pass is checked against central finite differences in
float64; the forward paths are checked against independent brute-force
oracles (quadruple-loop convolution, per-window pool scan).
"""

import numpy as np
import pytest

from conftest import numerical_gradient, rel_error

from bsl import nn
from bsl.errors import ConfigError, DimensionError


def conv_loop_oracle(x, w, stride=1, padding=0):
    """Direct-summation convolution, one scalar product per output element."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += (
                                    x[b, ch, i * stride + dy, j * stride + dx]
                                    * w[f, ch, dy, dx]
                                )
                    out[b, f, i, j] = acc
    return out


class TestConv2d:
    """Convolution forward/backward."""

    def test_all_ones(self):
        """1x1x3x3 ones against a 2x2 ones kernel gives fours."""
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        out = nn.conv2d_forward(x, w)
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out == 4.0)

    def test_zero_input(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 2, 3, 3))
        out = nn.conv2d_forward(np.zeros((2, 2, 5, 5)), w)
        assert np.all(out == 0.0)

    def test_matches_loop_oracle(self):
        """BLAS-backed forward stays within 1e-4 of the nested-loop sum."""
        rng = np.random.default_rng(7)
        x32 = rng.uniform(-1, 1, (1, 2, 5, 5)).astype(np.float32)
        w32 = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32)
        got = nn.conv2d_forward(x32, w32)
        want = conv_loop_oracle(x32.astype(np.float64), w32.astype(np.float64))
        assert np.abs(got - want).max() < 1e-4
        # float64 inputs agree far tighter
        x64, w64 = x32.astype(np.float64), w32.astype(np.float64)
        assert np.abs(nn.conv2d_forward(x64, w64) - want).max() < 1e-10

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 1)])
    def test_matches_oracle_strided_padded(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.standard_normal((2, 3, 6, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        got = nn.conv2d_forward(x, w, stride=stride, padding=padding)
        want = conv_loop_oracle(x, w, stride=stride, padding=padding)
        assert np.abs(got - want).max() < 1e-10

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            nn.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)))
        assert "(1, 2, 4, 4)" in str(e.value) and "(1, 3, 2, 2)" in str(e.value)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            nn.conv2d_forward(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)))

    def test_backward_zero_grad(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 2, 2))
        gx, gw = nn.conv2d_backward(x, w, np.zeros((1, 2, 3, 3)))
        assert np.all(gx == 0) and np.all(gw == 0)

    def test_backward_single_pixel(self):
        """A lone unit gradient makes grad_w the matching input window."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 4, 4))
        w = rng.standard_normal((1, 1, 2, 2))
        g = np.zeros((1, 1, 3, 3))
        g[0, 0, 1, 2] = 1.0
        _, gw = nn.conv2d_backward(x, w, g)
        assert np.allclose(gw[0, 0], x[0, 0, 1:3, 2:4])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_backward_finite_differences(self, stride, padding):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = nn.conv2d_forward(x, w, stride=stride, padding=padding)
        g = rng.standard_normal(out.shape)

        def loss():
            return float(
                (nn.conv2d_forward(x, w, stride=stride, padding=padding) * g).sum()
            )

        gx, gw = nn.conv2d_backward(x, w, g, stride=stride, padding=padding)
        assert rel_error(gx, numerical_gradient(loss, x)) < 1e-3
        assert rel_error(gw, numerical_gradient(loss, w)) < 1e-3


class TestMaxPool:
    """2x2 stride-2 max pool with first-element tie break."""

    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, idx = nn.maxpool2x2_forward(x)
        assert out.item() == 4.0
        g = nn.maxpool2x2_backward(idx, np.ones((1, 1, 1, 1)))
        assert g[0, 0, 1, 1] == 1.0 and g.sum() == 1.0

    def test_tie_goes_top_left(self):
        x = np.full((1, 1, 2, 2), 7.0)
        _, idx = nn.maxpool2x2_forward(x)
        g = nn.maxpool2x2_backward(idx, np.ones((1, 1, 1, 1)))
        assert g[0, 0, 0, 0] == 1.0 and g.sum() == 1.0

    def test_matches_window_scan(self):
        """Forward and backward match a per-window brute-force scan."""
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 6, 8))
        out, idx = nn.maxpool2x2_forward(x)
        g = rng.standard_normal(out.shape)
        gx = nn.maxpool2x2_backward(idx, g)
        want_gx = np.zeros_like(x)
        for b in range(2):
            for c in range(3):
                for i in range(3):
                    for j in range(4):
                        win = x[b, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                        assert out[b, c, i, j] == win.max()
                        k = int(np.argmax(win.reshape(-1)))
                        want_gx[b, c, 2 * i + k // 2, 2 * j + k % 2] += g[b, c, i, j]
        assert np.array_equal(gx, want_gx)

    def test_odd_extents_rejected(self):
        with pytest.raises(DimensionError):
            nn.maxpool2x2_forward(np.zeros((1, 1, 5, 4)))


class TestDenseReluDropout:
    def test_dense_identity(self):
        x = np.arange(12.0).reshape(3, 4)
        out = nn.dense_forward(x, np.eye(4), np.zeros(4))
        assert np.array_equal(out, x)

    def test_dense_shape_error(self):
        with pytest.raises(DimensionError):
            nn.dense_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))

    def test_dense_backward_finite_differences(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 7))
        w = rng.standard_normal((7, 5))
        b = rng.standard_normal(5)
        g = rng.standard_normal((4, 5))

        def loss():
            return float((nn.dense_forward(x, w, b) * g).sum())

        gx, gw, gb = nn.dense_backward(x, w, g)
        assert rel_error(gx, numerical_gradient(loss, x)) < 1e-3
        assert rel_error(gw, numerical_gradient(loss, w)) < 1e-3
        assert rel_error(gb, numerical_gradient(loss, b)) < 1e-3

    def test_relu_values(self):
        assert nn.relu(np.array(-2.0)) == 0.0
        assert nn.relu(np.array(3.5)) == 3.5

    def test_relu_backward_masks_negatives(self):
        x = np.array([-1.0, 0.0, 2.0])
        g = np.array([5.0, 5.0, 5.0])
        assert np.array_equal(nn.relu_backward(x, g), [0.0, 0.0, 5.0])

    def test_dropout_rate_zero_is_identity(self):
        """Rate 0 returns the input untouched and consumes no randomness."""
        rng = np.random.default_rng(8)
        state = rng.bit_generator.state
        x = np.ones((3, 3))
        out, mask = nn.dropout_forward(x, 0.0, rng, training=True)
        assert out is x and mask is None
        assert rng.bit_generator.state == state

    def test_dropout_eval_identity(self):
        rng = np.random.default_rng(8)
        x = np.ones((3, 3))
        out, mask = nn.dropout_forward(x, 0.5, rng, training=False)
        assert out is x and mask is None

    def test_dropout_train_scales_survivors(self):
        rng = np.random.default_rng(9)
        x = np.ones((100, 100))
        out, mask = nn.dropout_forward(x, 0.25, rng, training=True)
        kept = out[mask]
        assert np.allclose(kept, 1.0 / 0.75)
        assert np.all(out[~mask] == 0.0)
        assert abs(mask.mean() - 0.75) < 0.02

    def test_dropout_backward_uses_same_mask(self):
        rng = np.random.default_rng(10)
        x = np.ones((20, 20))
        _, mask = nn.dropout_forward(x, 0.5, rng, training=True)
        g = np.ones_like(x)
        gx = nn.dropout_backward(mask, 0.5, g)
        assert np.array_equal(gx != 0, mask)
        assert nn.dropout_backward(None, 0.5, g) is g

    def test_dropout_rate_bounds(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            nn.dropout_forward(np.ones(3), 1.0, rng, training=True)
        with pytest.raises(ConfigError):
            nn.dropout_forward(np.ones(3), -0.1, rng, training=True)


class TestBatchNorm:
    def test_constant_channel_yields_beta(self):
        state = nn.BatchNormState.create(2, dtype=np.float64)
        state.beta[:] = [3.0, -1.0]
        x = np.full((4, 2, 3, 3), 5.0)
        y, _ = nn.batchnorm_forward(x, state, training=True)
        assert np.allclose(y[:, 0], 3.0) and np.allclose(y[:, 1], -1.0)

    def test_standardized_input_passthrough(self):
        """Zero-mean unit-variance input with identity affine stays put."""
        rng = np.random.default_rng(11)
        x = rng.uniform(-np.sqrt(3), np.sqrt(3), (64, 3, 4, 4))  # bounded, unit variance
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = nn.BatchNormState.create(3, dtype=np.float64)
        y, _ = nn.batchnorm_forward(x, state, training=True)
        assert np.abs(y - x).max() < 1e-5

    def test_running_stats_update(self):
        state = nn.BatchNormState.create(1, dtype=np.float64)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        nn.batchnorm_forward(x, state, training=True)
        # running <- 0.9 * running + 0.1 * batch, biased variance
        assert np.isclose(state.running_mean[0], 0.1 * 2.0)
        assert np.isclose(state.running_var[0], 0.9 * 1.0 + 0.1 * 1.0)

    def test_eval_uses_running_stats(self):
        state = nn.BatchNormState.create(1, dtype=np.float64)
        state.running_mean[:] = 2.0
        state.running_var[:] = 4.0
        x = np.array([4.0]).reshape(1, 1, 1, 1)
        y, cache = nn.batchnorm_forward(x, state, training=False)
        assert cache is None
        assert np.isclose(y.item(), (4.0 - 2.0) / np.sqrt(4.0 + state.eps))

    def test_empty_batch_rejected(self):
        state = nn.BatchNormState.create(2)
        with pytest.raises(DimensionError):
            nn.batchnorm_forward(np.zeros((0, 2, 3, 3)), state, training=True)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((6, 4, 3, 3))
        g = rng.standard_normal(x.shape)
        state = nn.BatchNormState.create(4, dtype=np.float64)
        state.gamma[:] = rng.standard_normal(4)
        state.beta[:] = rng.standard_normal(4)

        def loss():
            y, _ = nn.batchnorm_forward(x, state, training=True)
            return float((y * g).sum())

        y, cache = nn.batchnorm_forward(x, state, training=True)
        gx, ggamma, gbeta = nn.batchnorm_backward(cache, state, g)
        assert rel_error(gx, numerical_gradient(loss, x)) < 1e-3
        assert rel_error(ggamma, numerical_gradient(loss, state.gamma)) < 1e-3
        assert rel_error(gbeta, numerical_gradient(loss, state.beta)) < 1e-3

    def test_backward_rank2(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((8, 5))
        g = rng.standard_normal(x.shape)
        state = nn.BatchNormState.create(5, dtype=np.float64)

        def loss():
            y, _ = nn.batchnorm_forward(x, state, training=True)
            return float((y * g).sum())

        _, cache = nn.batchnorm_forward(x, state, training=True)
        gx, _, _ = nn.batchnorm_backward(cache, state, g)
        assert rel_error(gx, numerical_gradient(loss, x)) < 1e-3


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = nn.softmax_cross_entropy(np.zeros((4, 10)), np.arange(4) % 10)
        assert abs(loss - np.log(10)) < 1e-12

    def test_confident_correct(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 50.0
        loss, _ = nn.softmax_cross_entropy(logits, np.array([3]))
        assert loss < 1e-9

    def test_grad_rows_sum_to_zero(self):
        rng = np.random.default_rng(14)
        logits = rng.standard_normal((8, 10))
        _, grad = nn.softmax_cross_entropy(logits, rng.integers(0, 10, 8))
        assert np.abs(grad.sum(axis=1)).max() < 1e-6

    def test_grad_finite_differences(self):
        rng = np.random.default_rng(15)
        logits = rng.standard_normal((8, 10))
        labels = rng.integers(0, 10, 8)

        def loss():
            return nn.softmax_cross_entropy(logits, labels)[0]

        _, grad = nn.softmax_cross_entropy(logits, labels)
        assert rel_error(grad, numerical_gradient(loss, logits)) < 1e-3

    def test_label_out_of_range(self):
        with pytest.raises(DimensionError):
            nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestSgd:
    def test_zero_grad_no_motion(self):
        p = nn.SgdParam(np.array([1.0, -1.0]), decay=False)
        nn.sgd_step(p, np.zeros(2), nn.SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert np.array_equal(p.value, [1.0, -1.0])

    def test_plain_arithmetic(self):
        p = nn.SgdParam(np.array([0.5]), decay=False)
        nn.sgd_step(p, np.array([0.2]), nn.SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert np.isclose(p.value[0], 0.48)

    def test_momentum_recurrence(self):
        """Two steps with momentum 0.8 match the hand-rolled scalar recurrence."""
        cfg = nn.SgdConfig(lr=0.1, momentum=0.8, weight_decay=0.0)
        p = nn.SgdParam(np.array([1.0]), decay=False)
        g1, g2 = 0.3, -0.1
        nn.sgd_step(p, np.array([g1]), cfg)
        nn.sgd_step(p, np.array([g2]), cfg)
        v1 = g1
        w1 = 1.0 - 0.1 * v1
        v2 = 0.8 * v1 + g2
        w2 = w1 - 0.1 * v2
        assert np.isclose(p.value[0], w2)

    def test_weight_decay_applies_only_when_flagged(self):
        cfg = nn.SgdConfig(lr=1.0, momentum=0.0, weight_decay=0.5)
        decaying = nn.SgdParam(np.array([2.0]))
        frozen = nn.SgdParam(np.array([2.0]), decay=False)
        nn.sgd_step(decaying, np.zeros(1), cfg)
        nn.sgd_step(frozen, np.zeros(1), cfg)
        assert np.isclose(decaying.value[0], 2.0 - 1.0 * (0.5 * 2.0))
        assert frozen.value[0] == 2.0

    def test_uniform_init_bounds(self):
        rng = np.random.default_rng(16)
        w = nn.uniform_init(rng, (100, 16), fan_in=16)
        k = 0.25
        assert w.min() >= -k and w.max() <= k
        assert w.std() > 0.05  # actually spread out, not collapsed
