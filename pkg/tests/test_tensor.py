"""Numeric kernels against independent loop oracles and hand-computed cases."""

import itertools

import numpy as np
import numpy.testing as npt
import pytest

from cfrpn import tensor as T


def naive_conv2d(x, kernel, bias, spec):
    """Quadruple-loop cross-correlation, the reference the fast path must match."""
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    oh, ow = spec.out_hw(h, w)
    out = np.zeros((n, c_out, oh, ow), dtype=x.dtype)
    for b in range(n):
        for f in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    y0, x0 = i * spec.stride, j * spec.stride
                    patch = xp[b, :, y0 : y0 + kh, x0 : x0 + kw]
                    out[b, f, i, j] = np.sum(patch * kernel[f])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def naive_maxpool(x, spec):
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (spec.padding, spec.padding), (spec.padding, spec.padding)),
        constant_values=-np.inf,
    )
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    y0, x0 = i * spec.stride, j * spec.stride
                    out[b, ch, i, j] = xp[
                        b, ch, y0 : y0 + spec.window_h, x0 : x0 + spec.window_w
                    ].max()
    return out


class TestConv2d:
    def test_all_ones_3x3_sums_to_nine(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float64)
        k = np.ones((1, 1, 3, 3), dtype=np.float64)
        spec = T.ConvSpec(3, 3, stride=1, pad_h=0, pad_w=0)
        out = T.conv2d(x, k, np.zeros(1), spec)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 1, 5, 5))
        k = np.ones((1, 1, 1, 1))
        out = T.conv2d(x, k, None, T.ConvSpec(1, 1))
        npt.assert_array_equal(out, x)

    def test_matches_loop_oracle_same_padding(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        spec = T.ConvSpec.same(3, 3)
        out = T.conv2d(x, k, b, spec)
        assert out.shape == (2, 4, 8, 8)
        ref = naive_conv2d(x, k, b, spec)
        npt.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_matches_loop_oracle_random_shapes(self):
        rng = np.random.default_rng(2)
        cases = itertools.product((1, 3), ((1, 1), (3, 3), (5, 5)), (1, 2), (0, 1))
        for c_out, (kh, kw), stride, pad in cases:
            h = int(rng.integers(kh, kh + 4))
            w = int(rng.integers(kw, kw + 4))
            spec = T.ConvSpec(kh, kw, stride=stride, pad_h=pad, pad_w=pad)
            x = rng.standard_normal((2, 2, h, w))
            k = rng.standard_normal((c_out, 2, kh, kw))
            npt.assert_allclose(
                T.conv2d(x, k, None, spec), naive_conv2d(x, k, None, spec),
                rtol=1e-12, atol=1e-12,
            )

    def test_channel_additivity(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal((2, 3, 6, 6))
        x = rng.standard_normal((2, 5, 6, 6))
        k = rng.standard_normal((4, 8, 3, 3))
        spec = T.ConvSpec.same(3, 3)
        whole = T.conv2d(T.concat_channels(u, x), k, None, spec)
        split = T.conv2d(u, np.ascontiguousarray(k[:, :3]), None, spec) + T.conv2d(
            x, np.ascontiguousarray(k[:, 3:]), None, spec
        )
        npt.assert_allclose(whole, split, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_raises(self):
        x = np.zeros((1, 3, 4, 4))
        k = np.zeros((2, 4, 3, 3))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(x, k, None, T.ConvSpec.same(3, 3))

    def test_bad_bias_raises(self):
        x = np.zeros((1, 3, 4, 4))
        k = np.zeros((2, 3, 3, 3))
        with pytest.raises(T.ShapeError, match="bias"):
            T.conv2d(x, k, np.zeros(3), T.ConvSpec.same(3, 3))

    def test_nonfinite_result_raises(self):
        x = np.full((1, 1, 3, 3), np.inf, dtype=np.float64)
        k = np.ones((1, 1, 3, 3))
        with pytest.raises(T.NumericError, match="conv2d"):
            T.conv2d(x, k, None, T.ConvSpec.same(3, 3))

    def test_cached_columns_reused_by_backward(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 5, 5))
        k = rng.standard_normal((4, 3, 3, 3))
        spec = T.ConvSpec.same(3, 3)
        _, col = T.conv2d_forward(x, k, None, spec)
        g = rng.standard_normal((2, 4, 5, 5))
        with_col = T.conv2d_backward(g, x, k, spec, col=col)
        without = T.conv2d_backward(g, x, k, spec)
        for a, b in zip(with_col, without):
            npt.assert_array_equal(a, b)


class TestIm2col:
    def test_fold_is_adjoint_of_unfold(self):
        # <unfold(x), y> == <x, fold(y)> pins the overlap-summing backward
        rng = np.random.default_rng(5)
        for stride, pad in ((1, 1), (2, 0), (2, 1)):
            spec = T.ConvSpec(3, 3, stride=stride, pad_h=pad, pad_w=pad)
            x = rng.standard_normal((2, 3, 7, 7))
            col, oh, ow = T.im2col(x, spec)
            y = rng.standard_normal(col.shape)
            lhs = float(np.vdot(col, y))
            rhs = float(np.vdot(x, T.col2im_add(y, x.shape, spec)))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_concatenated_channels_make_concatenated_blocks(self):
        rng = np.random.default_rng(6)
        u = rng.standard_normal((1, 2, 4, 4))
        x = rng.standard_normal((1, 3, 4, 4))
        spec = T.ConvSpec.same(3, 3)
        whole, _, _ = T.im2col(T.concat_channels(u, x), spec)
        cu, _, _ = T.im2col(u, spec)
        cx, _, _ = T.im2col(x, spec)
        npt.assert_array_equal(whole[:, : cu.shape[1]], cu)
        npt.assert_array_equal(whole[:, cu.shape[1] :], cx)


class TestMaxpool:
    def test_quadrant_maxima(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out, _ = T.maxpool(x, T.PoolSpec(2, 2, stride=2, padding=0))
        npt.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_32_to_16_extent(self):
        x = np.zeros((1, 1, 32, 32))
        out, _ = T.maxpool(x, T.PoolSpec(3, 3, stride=2, padding=1))
        assert out.shape == (1, 1, 16, 16)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for stride, pad in ((1, 0), (2, 0), (2, 1)):
            spec = T.PoolSpec(3, 3, stride=stride, padding=pad)
            x = rng.standard_normal((2, 3, 9, 9))
            out, _ = T.maxpool(x, spec)
            npt.assert_array_equal(out, naive_maxpool(x, spec))

    def test_tie_picks_first_in_scan_order(self):
        x = np.ones((1, 1, 4, 4))
        spec = T.PoolSpec(2, 2, stride=2, padding=0)
        out, argmax = T.maxpool(x, spec)
        npt.assert_array_equal(out, np.ones((1, 1, 2, 2)))
        g = np.ones((1, 1, 2, 2))
        dx = T.maxpool_backward(g, argmax, x.shape, spec)
        # first position of each all-equal window gets the whole gradient
        expect = np.zeros((4, 4))
        expect[0, 0] = expect[0, 2] = expect[2, 0] = expect[2, 2] = 1.0
        npt.assert_array_equal(dx[0, 0], expect)

    def test_backward_conserves_gradient_mass(self):
        rng = np.random.default_rng(8)
        spec = T.PoolSpec(3, 3, stride=2, padding=1)
        x = rng.standard_normal((2, 2, 8, 8))
        _, argmax = T.maxpool(x, spec)
        g = rng.standard_normal((2, 2, 4, 4))
        dx = T.maxpool_backward(g, argmax, x.shape, spec)
        assert abs(dx.sum() - g.sum()) <= 1e-12

    def test_window_larger_than_padded_input_raises(self):
        with pytest.raises(T.ShapeError):
            T.maxpool(np.zeros((1, 1, 2, 2)), T.PoolSpec(5, 5, stride=1, padding=0))


class TestRelu:
    def test_hand_case(self):
        npt.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_all_negative_goes_to_zero(self):
        x = -np.abs(np.random.default_rng(9).standard_normal((3, 4)))
        assert (T.relu(x - 0.1) == 0.0).all()

    def test_idempotent(self):
        x = np.random.default_rng(10).standard_normal((5, 5))
        npt.assert_array_equal(T.relu(T.relu(x)), T.relu(x))


class TestLrn:
    def test_zero_input(self):
        out, _ = T.lrn(np.zeros((1, 5, 2, 2)), T.LrnSpec())
        npt.assert_array_equal(out, np.zeros((1, 5, 2, 2)))

    def test_single_channel_closed_form(self):
        rng = np.random.default_rng(11)
        v = rng.standard_normal((2, 1, 3, 3))
        out, _ = T.lrn(v, T.LrnSpec(n=1, k=2.0, alpha=1e-4, beta=0.75))
        expect = v / np.power(2.0 + 1e-4 * v * v, 0.75)
        npt.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)

    def test_preserves_sign(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((2, 7, 4, 4))
        out, _ = T.lrn(x, T.LrnSpec())
        npt.assert_array_equal(np.sign(out), np.sign(x))

    def test_window_clipped_at_boundaries(self):
        # denominator of channel 0 must only see channels 0..2 for n=5
        x = np.zeros((1, 7, 1, 1))
        x[0, 0] = 1.0
        x[0, 3] = 100.0  # outside channel 0's window
        spec = T.LrnSpec(n=5, k=2.0, alpha=1.0, beta=1.0)
        out, _ = T.lrn(x, spec)
        assert out[0, 0, 0, 0] == pytest.approx(1.0 / (2.0 + 1.0 / 5.0), rel=1e-12)

    def test_even_window_rejected(self):
        with pytest.raises(T.ShapeError):
            T.LrnSpec(n=4)


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.random.default_rng(13).standard_normal((3, 3))
        out, mask = T.dropout(x, 0.0, np.random.default_rng(0), training=True)
        npt.assert_array_equal(out, x)
        assert mask is None

    def test_inference_identity(self):
        x = np.random.default_rng(14).standard_normal((3, 3))
        out, mask = T.dropout(x, 0.9, None, training=False)
        npt.assert_array_equal(out, x)
        assert mask is None

    def test_survivor_fraction(self):
        x = np.ones(1_000_000, dtype=np.float32)
        out, mask = T.dropout(x, 0.5, np.random.default_rng(15), training=True)
        frac = mask.mean()
        assert abs(frac - 0.5) <= 0.01
        # survivors are scaled by 1/(1-rate)
        npt.assert_allclose(out[mask], 2.0, rtol=1e-6)
        assert (out[~mask] == 0.0).all()


class TestConcatChannels:
    def test_channel_counts_add(self):
        a = np.zeros((1, 3, 8, 8))
        b = np.zeros((1, 96, 8, 8))
        assert T.concat_channels(a, b).shape == (1, 99, 8, 8)

    def test_empty_second_operand(self):
        a = np.random.default_rng(16).standard_normal((2, 3, 4, 4))
        out = T.concat_channels(a, np.zeros((2, 0, 4, 4)))
        npt.assert_array_equal(out, a)

    def test_slicing_recovers_first_operand(self):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((2, 3, 4, 4))
        b = rng.standard_normal((2, 5, 4, 4))
        npt.assert_array_equal(T.concat_channels(a, b)[:, :3], a)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            T.concat_channels(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 5, 4)))


class TestLinear:
    def test_identity_weights(self):
        x = np.random.default_rng(18).standard_normal((3, 4))
        out = T.linear(x, np.eye(4), np.zeros(4))
        npt.assert_allclose(out, x, rtol=1e-15)

    def test_zero_weights_gives_bias_rows(self):
        b = np.array([1.0, -2.0, 0.5])
        out = T.linear(np.ones((4, 6)), np.zeros((3, 6)), b)
        npt.assert_array_equal(out, np.tile(b, (4, 1)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((4, 10))
        w = rng.standard_normal((7, 10))
        b = rng.standard_normal(7)
        ref = np.empty((4, 7))
        for i in range(4):
            for j in range(7):
                ref[i, j] = sum(x[i, f] * w[j, f] for f in range(10)) + b[j]
        npt.assert_allclose(T.linear(x, w, b), ref, rtol=1e-12, atol=1e-12)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, probs = T.softmax_cross_entropy(np.zeros((4, 10)), np.arange(4) % 10)
        assert loss == pytest.approx(np.log(10.0), rel=1e-12)
        npt.assert_allclose(probs, 0.1, rtol=1e-12)

    def test_saturated_true_class(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1000.0
        loss, _ = T.softmax_cross_entropy(logits, np.array([2]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(20)
        logits = rng.standard_normal((3, 5))
        labels = rng.integers(0, 5, size=3)
        losses = []
        for i in range(3):
            z = logits[i] - logits[i].max()
            losses.append(-(z[labels[i]] - np.log(np.exp(z).sum())))
        loss, probs = T.softmax_cross_entropy(logits, labels)
        assert loss == pytest.approx(np.mean(losses), rel=1e-12)
        npt.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)

    def test_out_of_range_label_raises(self):
        with pytest.raises(ValueError, match="label"):
            T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestEuclideanDistance:
    def test_identical_is_zero(self):
        x = np.random.default_rng(21).standard_normal((3, 4))
        assert T.euclidean_distance(x, x) == 0.0

    def test_hand_case(self):
        assert T.euclidean_distance(np.ones(4), np.zeros(4)) == pytest.approx(2.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(22)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 3, 4))
        ref = np.sqrt(sum((float(x) - float(y)) ** 2 for x, y in
                          zip(a.ravel(), b.ravel())))
        assert T.euclidean_distance(a, b) == pytest.approx(ref, rel=1e-12)

    def test_metric_properties(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            a, b, c = (rng.standard_normal(8) for _ in range(3))
            dab = T.euclidean_distance(a, b)
            assert dab == pytest.approx(T.euclidean_distance(b, a), rel=1e-12)
            assert dab >= 0.0
            assert dab <= T.euclidean_distance(a, c) + T.euclidean_distance(c, b) + 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            T.euclidean_distance(np.zeros(3), np.zeros(4))

    def test_per_sample_rows(self):
        rng = np.random.default_rng(24)
        a = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal((4, 2, 3, 3))
        d = T.per_sample_distance(a, b)
        for i in range(4):
            assert d[i] == pytest.approx(T.euclidean_distance(a[i], b[i]), rel=1e-12)


class TestDeterminism:
    def test_conv_bitwise_repeatable(self):
        rng = np.random.default_rng(25)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        spec = T.ConvSpec.same(3, 3)
        first = T.conv2d(x, k, None, spec)
        second = T.conv2d(x.copy(), k.copy(), None, spec)
        assert first.tobytes() == second.tobytes()
