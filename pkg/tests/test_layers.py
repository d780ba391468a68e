import numpy as np
import pytest

from myoseg import layers
from myoseg.errors import CacheError, DegenerateBatchError, ShapeError
from myoseg.gradcheck import (check_batchnorm, check_concat, check_conv2d,
                              check_maxpool2, check_relu, check_residual,
                              check_upsample_nn)
from myoseg.layers import BatchNormParams, ConvParams, same_padding
from myoseg.tensor import RngStream


def conv_oracle(x, weights, bias, padding):
    """Direct nested-loop cross-correlation in float64."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weights.shape
    pt, pb, pl, pr = padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, c, y + i, z + j] * weights[o, c, i, j]
                    out[b, o, y, z] = acc + bias[o]
    return out


class TestSamePadding:
    def test_3x3(self):
        assert same_padding(3, 3) == (1, 1, 1, 1)

    def test_2x2(self):
        assert same_padding(2, 2) == (0, 1, 0, 1)

    def test_1x1(self):
        assert same_padding(1, 1) == (0, 0, 0, 0)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_preserves_size(self, k):
        x = RngStream(1).normal((2, 3, 6, 6))
        p = ConvParams(weights=RngStream(2).normal((4, 3, k, k)),
                       bias=np.zeros(4, dtype=np.float32))
        out = layers.conv2d(x, p, same_padding(k, k))
        assert out.shape == (2, 4, 6, 6)


class TestConv2d:
    def test_identity_kernel(self):
        x = RngStream(3).normal((1, 1, 5, 5), dtype=np.float64)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        p = ConvParams(weights=w, bias=np.array([0.25]))
        out = layers.conv2d(x, p, same_padding(3, 3))
        np.testing.assert_allclose(out, x + 0.25, atol=1e-12)

    def test_box_filter_on_constant(self):
        c = 0.7
        x = np.full((1, 1, 6, 6), c)
        p = ConvParams(weights=np.full((1, 1, 3, 3), 1.0 / 9.0),
                       bias=np.zeros(1))
        out = layers.conv2d(x, p, same_padding(3, 3))
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], c, atol=1e-12)
        # corners see a 2x2 live patch of the 3x3 window
        np.testing.assert_allclose(out[0, 0, 0, 0], c * 4.0 / 9.0, atol=1e-12)

    def test_1x1_scaling(self):
        x = RngStream(4).normal((2, 1, 4, 4), dtype=np.float64)
        p = ConvParams(weights=np.array([[[[1.5]]]]), bias=np.zeros(1))
        out = layers.conv2d(x, p, same_padding(1, 1))
        np.testing.assert_allclose(out, 1.5 * x, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_matches_loop_oracle(self, k):
        rng = RngStream(5)
        x = rng.normal((2, 3, 5, 5), dtype=np.float64)
        w = rng.normal((4, 3, k, k), dtype=np.float64)
        b = rng.normal((4,), dtype=np.float64)
        pad = same_padding(k, k)
        got = layers.conv2d(x, ConvParams(w, b), pad)
        np.testing.assert_allclose(got, conv_oracle(x, w, b, pad), atol=1e-10)

    def test_channel_mismatch(self):
        x = RngStream(1).normal((1, 2, 4, 4))
        p = ConvParams(weights=RngStream(2).normal((1, 3, 3, 3)),
                       bias=np.zeros(1, dtype=np.float32))
        with pytest.raises(ShapeError):
            layers.conv2d(x, p, same_padding(3, 3))


class TestConv2dGrad:
    def test_zero_upstream(self):
        rng = RngStream(6)
        x = rng.normal((1, 2, 4, 4), dtype=np.float64)
        p = ConvParams(weights=rng.normal((3, 2, 3, 3), dtype=np.float64),
                       bias=np.zeros(3))
        dx, dw, db = layers.conv2d_grad(x, p, same_padding(3, 3),
                                        np.zeros((1, 3, 4, 4)))
        assert not dx.any() and not dw.any() and not db.any()

    def test_single_pixel_upstream_gives_input_patch(self):
        rng = RngStream(7)
        x = rng.normal((1, 2, 5, 5), dtype=np.float64)
        p = ConvParams(weights=rng.normal((1, 2, 3, 3), dtype=np.float64),
                       bias=np.zeros(1))
        up = np.zeros((1, 1, 5, 5))
        up[0, 0, 2, 3] = 1.0
        _, dw, db = layers.conv2d_grad(x, p, same_padding(3, 3), up)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        np.testing.assert_allclose(dw[0], xp[0, :, 2:5, 3:6], atol=1e-12)
        assert db[0] == 1.0

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_finite_difference(self, k):
        result = check_conv2d(k)
        assert result.passed, result

    def test_upstream_shape_check(self):
        rng = RngStream(8)
        x = rng.normal((1, 2, 4, 4))
        p = ConvParams(weights=rng.normal((3, 2, 3, 3)),
                       bias=np.zeros(3, dtype=np.float32))
        with pytest.raises(ShapeError):
            layers.conv2d_grad(x, p, same_padding(3, 3),
                               np.zeros((1, 3, 5, 5), dtype=np.float32))


class TestBatchNorm:
    def _params(self, c, gamma=1.0, beta=0.0):
        return BatchNormParams(
            gamma=np.full(c, gamma), beta=np.full(c, beta),
            running_mean=np.zeros(c), running_var=np.ones(c))

    def test_constant_input_gives_beta(self):
        p = self._params(2, beta=0.4)
        x = np.full((2, 2, 3, 3), 5.0)
        out, _, _, _ = layers.batchnorm_train(x, p)
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_two_point_normalization(self):
        p = self._params(1)
        p.eps = 1e-12
        x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
        out, _, _, _ = layers.batchnorm_train(x, p)
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_idempotent_on_normalized(self):
        rng = RngStream(9)
        x = rng.normal((4, 2, 8, 8), dtype=np.float64)
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        out, _, _, _ = layers.batchnorm_train(x, self._params(2))
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_pre_affine_statistics(self):
        rng = RngStream(10)
        x = rng.normal((3, 4, 6, 6), 2.0, 3.0, dtype=np.float64)
        out, _, _, _ = layers.batchnorm_train(x, self._params(4))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_update_rule(self):
        p = self._params(1)
        p.momentum = 0.25
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        _, _, rm, rv = layers.batchnorm_train(x, p)
        # batch mean 2, population var 1
        np.testing.assert_allclose(rm, [0.75 * 0.0 + 0.25 * 2.0])
        np.testing.assert_allclose(rv, [0.75 * 1.0 + 0.25 * 1.0])

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            layers.batchnorm_train(np.ones((1, 2, 1, 1)), self._params(2))

    def test_infer_identity_stats(self):
        p = self._params(2)
        x = RngStream(11).normal((2, 2, 3, 3), dtype=np.float64)
        out = layers.batchnorm_infer(x, p)
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + p.eps), atol=1e-12)

    def test_infer_matches_train_when_stats_equal(self):
        rng = RngStream(12)
        x = rng.normal((2, 3, 4, 4), 1.0, 2.0, dtype=np.float64)
        p = self._params(3)
        train_out, _, _, _ = layers.batchnorm_train(x, p)
        p.running_mean = x.mean(axis=(0, 2, 3))
        p.running_var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(layers.batchnorm_infer(x, p), train_out,
                                   atol=1e-10)

    def test_infer_gamma_zero(self):
        p = self._params(2, gamma=0.0, beta=0.7)
        x = RngStream(13).normal((2, 2, 3, 3))
        np.testing.assert_allclose(layers.batchnorm_infer(x, p), 0.7)

    def test_grad_zero_upstream(self):
        x = RngStream(14).normal((2, 2, 3, 3), dtype=np.float64)
        _, cache, _, _ = layers.batchnorm_train(x, self._params(2))
        dx, dg, db = layers.batchnorm_grad(cache, np.zeros_like(x))
        assert not dx.any() and not dg.any() and not db.any()

    def test_grad_dbeta_is_upstream_sum(self):
        x = RngStream(15).normal((2, 3, 4, 4), dtype=np.float64)
        _, cache, _, _ = layers.batchnorm_train(x, self._params(3))
        up = RngStream(16).normal((2, 3, 4, 4), dtype=np.float64)
        _, _, dbeta = layers.batchnorm_grad(cache, up)
        np.testing.assert_allclose(dbeta, up.sum(axis=(0, 2, 3)), atol=1e-10)

    def test_grad_finite_difference(self):
        result = check_batchnorm()
        assert result.passed, result

    def test_grad_cache_mismatch(self):
        x = RngStream(17).normal((2, 2, 4, 4), dtype=np.float64)
        _, cache, _, _ = layers.batchnorm_train(x, self._params(2))
        with pytest.raises(CacheError):
            layers.batchnorm_grad(cache, np.zeros((2, 2, 3, 3)))


class TestRelu:
    def test_basic(self):
        out = layers.relu(np.array([-1.0, 0.0, 2.0]))
        assert out.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        x = -np.abs(RngStream(18).normal((3, 3))) - 0.1
        assert not layers.relu(x).any()
        assert not layers.relu_grad(x, np.ones_like(x)).any()

    def test_tie_at_zero_gives_zero_grad(self):
        x = np.array([0.0, 1.0])
        g = layers.relu_grad(x, np.array([5.0, 5.0]))
        assert g.tolist() == [0.0, 5.0]

    def test_finite_difference(self):
        result = check_relu()
        assert result.passed, result


class TestMaxpool2:
    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, argmax = layers.maxpool2(x)
        assert out.item() == 4.0
        assert argmax.item() == 3  # bottom-right flat offset

    def test_constant_tie_break(self):
        # exhaustive 4-element permutations: first max in row-major order wins
        import itertools
        for perm in itertools.permutations([1.0, 1.0, 2.0, 2.0]):
            x = np.array(perm).reshape(1, 1, 2, 2)
            _, argmax = layers.maxpool2(x)
            flat = x.ravel()
            expected = min(i for i in range(4) if flat[i] == flat.max())
            assert argmax.item() == expected, perm

    def test_constant_input(self):
        x = np.full((1, 1, 4, 4), 3.3)
        out, argmax = layers.maxpool2(x)
        assert np.all(out == 3.3)
        # argmax = top-left of each window
        expected = np.array([[0, 2], [8, 10]])
        np.testing.assert_array_equal(argmax[0, 0], expected)

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError):
            layers.maxpool2(np.zeros((1, 1, 3, 4)))

    def test_gradient_routes_to_argmax(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, argmax = layers.maxpool2(x)
        up = np.full((1, 1, 1, 1), 7.0)
        dx = layers.maxpool2_grad(argmax, up, x.shape)
        np.testing.assert_array_equal(dx.ravel(), [0, 0, 0, 7.0])

    def test_gradient_conserves_mass(self):
        x = RngStream(19).normal((2, 3, 8, 8), dtype=np.float64)
        out, argmax = layers.maxpool2(x)
        up = RngStream(20).normal(out.shape, dtype=np.float64)
        dx = layers.maxpool2_grad(argmax, up, x.shape)
        assert abs(dx.sum() - up.sum()) < 1e-10

    def test_finite_difference(self):
        result = check_maxpool2()
        assert result.passed, result


class TestUpsampleNN:
    def test_single_pixel(self):
        out = layers.upsample_nn(np.array([[[[2.5]]]]))
        np.testing.assert_array_equal(out[0, 0], [[2.5, 2.5], [2.5, 2.5]])

    def test_maxpool_inverts_upsample(self):
        x = RngStream(21).normal((2, 3, 4, 4), dtype=np.float64)
        out, _ = layers.maxpool2(layers.upsample_nn(x))
        np.testing.assert_array_equal(out, x)

    def test_grad_sums_replicas(self):
        result = check_upsample_nn()
        assert result.passed, result


class TestConcat:
    def test_channel_order(self):
        a = RngStream(22).normal((2, 1, 3, 3))
        b = RngStream(23).normal((2, 1, 3, 3))
        out = layers.concat_channels(a, b)
        np.testing.assert_array_equal(out[:, 0], a[:, 0])
        np.testing.assert_array_equal(out[:, 1], b[:, 0])

    def test_slice_recovers_inputs(self):
        a = RngStream(24).normal((2, 3, 4, 4))
        b = RngStream(25).normal((2, 2, 4, 4))
        out = layers.concat_channels(a, b)
        np.testing.assert_array_equal(out[:, :3], a)
        np.testing.assert_array_equal(out[:, 3:], b)

    def test_grad_round_trip(self):
        up = RngStream(26).normal((2, 5, 4, 4))
        da, db = layers.concat_channels_grad(up, 3)
        np.testing.assert_array_equal(da, up[:, :3])
        np.testing.assert_array_equal(db, up[:, 3:])

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            layers.concat_channels(np.zeros((1, 1, 4, 4)),
                                   np.zeros((1, 1, 5, 4)))

    def test_finite_difference(self):
        result = check_concat()
        assert result.passed, result


class TestResidualAdd:
    def test_zero_shortcut(self):
        x = RngStream(27).normal((2, 2, 3, 3))
        np.testing.assert_array_equal(layers.residual_add(x, np.zeros_like(x)), x)

    def test_doubling(self):
        x = RngStream(28).normal((2, 2, 3, 3))
        np.testing.assert_array_equal(layers.residual_add(x, x), 2 * x)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layers.residual_add(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))

    def test_finite_difference(self):
        result = check_residual()
        assert result.passed, result


class TestSoftmaxChannels:
    def test_equal_logits(self):
        probs = layers.softmax_channels(np.zeros((1, 2, 3, 3)))
        np.testing.assert_allclose(probs, 0.5)

    def test_log2_closed_form(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = np.log(2.0)
        probs = layers.softmax_channels(logits)
        np.testing.assert_allclose(probs[0, 0], 2.0 / 3.0, atol=1e-12)
        np.testing.assert_allclose(probs[0, 1], 1.0 / 3.0, atol=1e-12)

    def test_extreme_logits_stable(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0], logits[0, 1] = 50.0, -50.0
        probs = layers.softmax_channels(logits)
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs[0, 0], 1.0, atol=1e-12)

    def test_sums_to_one(self):
        logits = RngStream(29).normal((3, 2, 8, 8), 0.0, 5.0, dtype=np.float64)
        probs = layers.softmax_channels(logits)
        assert probs.min() >= 0.0 and probs.max() <= 1.0
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeError):
            layers.softmax_channels(np.zeros((1, 3, 2, 2)))
