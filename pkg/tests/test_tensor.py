import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covidnn import tensor as T
from covidnn.exceptions import InvalidArgumentError
from covidnn.gradcheck import relative_error
from covidnn.layers import SoftmaxCrossEntropy


def direct_conv(x, kernels, bias, pad, stride, groups=1):
    """Plain nested-loop cross-correlation used as the reference."""
    (pt, pb), (pl, pr) = pad
    n, h, w, c = x.shape
    k, _, cg, f = kernels.shape
    xp = np.zeros((n, h + pt + pb, w + pl + pr, c))
    xp[:, pt : pt + h, pl : pl + w] = x
    ho = (h + pt + pb - k) // stride + 1
    wo = (w + pl + pr - k) // stride + 1
    fg = f // groups
    out = np.zeros((n, ho, wo, f))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(f):
                    g = o // fg
                    acc = bias[o]
                    for di in range(k):
                        for dj in range(k):
                            for ci in range(cg):
                                acc += xp[b, i * stride + di, j * stride + dj, g * cg + ci] * kernels[di, dj, ci, o]
                    out[b, i, j, o] = acc
    return out


def direct_lrn(x, k, n, alpha, beta):
    out = np.empty_like(x, dtype=np.float64)
    channels = x.shape[-1]
    for c in range(channels):
        lo, hi = max(0, c - (n - 1) // 2), min(channels - 1, c + n // 2)
        s = sum(x[..., cc].astype(np.float64) ** 2 for cc in range(lo, hi + 1))
        out[..., c] = x[..., c] / (k + alpha / n * s) ** beta
    return out


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = T.seeded_rng(42).uniform(size=100)
        b = T.seeded_rng(42).uniform(size=100)
        np.testing.assert_array_equal(a, b)

    def test_different_seed_differs(self):
        assert not np.array_equal(T.seeded_rng(1).uniform(size=10), T.seeded_rng(2).uniform(size=10))

    def test_is_philox(self):
        assert isinstance(T.seeded_rng(0).bit_generator, np.random.Philox)

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_rejects_out_of_range(self, seed):
        with pytest.raises(InvalidArgumentError):
            T.seeded_rng(seed)


class TestGlorot:
    @pytest.mark.parametrize("fan_in,fan_out", [(2, 4), (3, 3)])
    def test_unit_bound(self, fan_in, fan_out, rng):
        w = T.glorot_uniform(fan_in, fan_out, (50, 50), rng)
        assert w.shape == (50, 50)
        assert np.abs(w).max() <= 1.0
        # the bound is actually approached
        assert np.abs(w).max() > 0.99

    def test_statistics_large_sample(self, rng):
        bound = math.sqrt(6 / 416)
        assert bound == pytest.approx(0.12009, abs=1e-5)
        w = T.glorot_uniform(400, 16, (100_000,), rng).astype(np.float64)
        assert np.abs(w).max() <= bound
        stderr = bound / math.sqrt(3) / math.sqrt(w.size)
        assert abs(w.mean()) < 3 * stderr

    @pytest.mark.parametrize("fan_in,fan_out", [(0, 3), (3, 0)])
    def test_zero_fan(self, fan_in, fan_out, rng):
        with pytest.raises(InvalidArgumentError):
            T.glorot_uniform(fan_in, fan_out, (2, 2), rng)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 500), st.integers(1, 500), st.integers(0, 2**32))
    def test_never_exceeds_bound(self, fan_in, fan_out, seed):
        w = T.glorot_uniform(fan_in, fan_out, (64,), T.seeded_rng(seed))
        assert np.abs(w.astype(np.float64)).max() <= math.sqrt(6 / (fan_in + fan_out))


class TestConvForward:
    def test_identity_kernel(self, np_rng):
        x = np_rng.standard_normal((6, 7, 3)).astype(np.float32)
        kernels = np.zeros((1, 1, 3, 3), np.float32)
        for c in range(3):
            kernels[0, 0, c, c] = 1
        out = T.conv2d_forward(x, kernels, np.zeros(3, np.float32), "same", 1)
        np.testing.assert_array_equal(out, x)

    def test_ones_kernel_example(self):
        x = np.arange(1, 10, dtype=np.float64).reshape(3, 3, 1)
        kernels = np.ones((3, 3, 1, 1))
        out = T.conv2d_forward(x, kernels, np.zeros(1), "same", 1)
        ref = direct_conv(x[None], kernels, np.zeros(1), ((1, 1), (1, 1)), 1)[0]
        assert ref[1, 1, 0] == 45 and ref[0, 0, 0] == 12
        assert out[1, 1, 0] == 45
        assert out[0, 0, 0] == 12
        np.testing.assert_array_equal(out, ref)

    def test_sixteen_filter_layer_shape(self, np_rng):
        x = np_rng.random((224, 224, 3)).astype(np.float32)
        kernels = np_rng.standard_normal((5, 5, 3, 16)).astype(np.float32)
        assert T.conv2d_forward(x, kernels, np.zeros(16, np.float32), "same", 1).shape == (224, 224, 16)

    @pytest.mark.parametrize(
        "shape,k,cin,f,padding,stride,groups",
        [
            ((2, 7, 6, 3), 3, 3, 4, "same", 1, 1),
            ((1, 8, 8, 2), 4, 2, 2, "same", 1, 1),
            ((1, 9, 9, 4), 3, 4, 6, "same", 2, 2),
            ((2, 11, 11, 3), 5, 3, 2, "valid", 2, 1),
            ((1, 13, 13, 4), 3, 4, 4, 1, 1, 2),
            ((1, 15, 15, 3), 11, 3, 2, "valid", 4, 1),
        ],
    )
    def test_matches_direct_summation(self, np_rng, shape, k, cin, f, padding, stride, groups):
        x = np_rng.standard_normal(shape).astype(np.float32)
        kernels = np_rng.standard_normal((k, k, cin // groups, f)).astype(np.float32)
        bias = np_rng.standard_normal(f).astype(np.float32)
        pad = T.resolve_padding(padding, shape[1], shape[2], k, stride)
        ref = direct_conv(x.astype(np.float64), kernels, bias, pad, stride, groups)
        out = T.conv2d_forward(x, kernels, bias, padding, stride, groups)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out, ref, atol=1e-5)

    @given(st.sampled_from([1, 3, 5, 7, 11]), st.integers(1, 20), st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_same_padding_keeps_size(self, k, h, w):
        x = np.zeros((1, h, w, 1), np.float32)
        out = T.conv2d_forward(x, np.zeros((k, k, 1, 2), np.float32), None, "same", 1)
        assert out.shape == (1, h, w, 2)

    def test_same_padding_with_stride_uses_ceil(self):
        out = T.conv2d_forward(np.zeros((7, 9, 1)), np.zeros((3, 3, 1, 1)), None, "same", 2)
        assert out.shape == (4, 5, 1)

    def test_asymmetric_same_padding_split(self):
        assert T.resolve_padding("same", 8, 8, 4, 1) == ((1, 2), (1, 2))

    def test_channel_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="channel"):
            T.conv2d_forward(np.zeros((5, 5, 3)), np.zeros((3, 3, 2, 1)), None)

    def test_kernel_larger_than_input(self):
        with pytest.raises(InvalidArgumentError, match="larger"):
            T.conv2d_forward(np.zeros((4, 4, 1)), np.zeros((5, 5, 1, 1)), None, "valid")


class TestConvBackward:
    def test_zero_grad_output(self, np_rng):
        x = np_rng.standard_normal((5, 5, 2))
        kernels = np_rng.standard_normal((3, 3, 2, 2))
        dx, dw, db = T.conv2d_backward(x, kernels, np.zeros((5, 5, 2)))
        assert not dx.any() and not dw.any() and not db.any()
        assert dx.shape == x.shape and dw.shape == kernels.shape and db.shape == (2,)

    def test_identity_kernel_passes_gradient(self, np_rng):
        g = np_rng.standard_normal((4, 6, 1))
        dx, _, _ = T.conv2d_backward(np.zeros((4, 6, 1)), np.ones((1, 1, 1, 1)), g)
        np.testing.assert_array_equal(dx, g)

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("padding,stride,groups", [("same", 1, 1), ("valid", 2, 1), (1, 2, 2)])
    def test_finite_differences(self, seed, padding, stride, groups):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 5, 5, 2))
        kernels = rng.standard_normal((3, 3, 2 // groups, 2))
        bias = rng.standard_normal(2)
        out = T.conv2d_forward(x, kernels, bias, padding, stride, groups)
        probe = rng.standard_normal(out.shape)
        dx, dw, db = T.conv2d_backward(x, kernels, probe, padding, stride, groups)

        def loss(xx=x, kk=kernels, bb=bias):
            return np.sum(T.conv2d_forward(xx, kk, bb, padding, stride, groups) * probe)

        assert relative_error(dx, T.finite_difference_grad(lambda v: loss(xx=v), x)).max() < 1e-4
        assert relative_error(dw, T.finite_difference_grad(lambda v: loss(kk=v), kernels)).max() < 1e-4
        assert relative_error(db, T.finite_difference_grad(lambda v: loss(bb=v), bias)).max() < 1e-4

    def test_grad_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            T.conv2d_backward(np.zeros((5, 5, 1)), np.zeros((3, 3, 1, 1)), np.zeros((4, 4, 1)))

    def test_skip_input_grad(self, np_rng):
        x = np_rng.standard_normal((5, 5, 2))
        dx, dw, _ = T.conv2d_backward(x, np.ones((3, 3, 2, 1)), np.ones((5, 5, 1)), need_input_grad=False)
        assert dx is None and dw.shape == (3, 3, 2, 1)


class TestMatmul:
    def test_identity(self, np_rng):
        x = np_rng.standard_normal((3, 4))
        np.testing.assert_array_equal(T.matmul(np.eye(3), x), x)

    def test_hand_example(self):
        np.testing.assert_array_equal(T.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_zero(self, np_rng):
        assert not T.matmul(np.zeros((2, 3)), np_rng.standard_normal((3, 5))).any()

    def test_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestMaxPool:
    def test_example(self):
        out, _ = T.maxpool_forward(np.array([[1.0, 2], [3, 4]]).reshape(2, 2, 1), 2, 2)
        assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4

    def test_constant_input_tie_rule(self):
        x = np.full((1, 4, 4, 2), 3.0)
        out, argmax = T.maxpool_forward(x, 2, 2)
        assert np.all(out == 3.0)
        dx = T.maxpool_backward(np.ones_like(out), argmax, x.shape, 2, 2)
        expected = np.zeros_like(x)
        expected[:, ::2, ::2, :] = 1
        np.testing.assert_array_equal(dx, expected)

    def test_overlapping_windows_accumulate(self):
        x = np.zeros((1, 5, 5, 1))
        x[0, 2, 2, 0] = 9.0
        out, argmax = T.maxpool_forward(x, 3, 2)
        dx = T.maxpool_backward(np.ones_like(out), argmax, x.shape, 3, 2)
        assert dx[0, 2, 2, 0] == 4.0

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.permutation(np.arange(108) * 0.01).reshape(1, 6, 6, 3)
        out, argmax = T.maxpool_forward(x, 3, 2)
        probe = rng.standard_normal(out.shape)
        dx = T.maxpool_backward(probe, argmax, x.shape, 3, 2)
        numeric = T.finite_difference_grad(lambda v: np.sum(T.maxpool_forward(v, 3, 2)[0] * probe), x)
        assert relative_error(dx, numeric).max() < 1e-4

    def test_window_too_large(self):
        with pytest.raises(InvalidArgumentError):
            T.maxpool_forward(np.zeros((2, 2, 1)), 3, 1)


class TestLRN:
    def test_zero_input(self):
        assert not T.lrn_forward(np.zeros((2, 2, 6))).any()

    def test_scalar_example(self):
        expected = 1 / (2 + 1e-4 / 5) ** 0.75
        assert expected == pytest.approx(0.5945991, abs=1e-7)
        out = T.lrn_forward(np.ones((1, 1, 1)), k=2, n=5, alpha=1e-4, beta=0.75)
        assert out[0, 0, 0] == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("n", [1, 3, 4, 5])
    def test_matches_direct(self, np_rng, n):
        x = np_rng.standard_normal((3, 3, 7))
        np.testing.assert_allclose(T.lrn_forward(x, 1.0, n, 0.7, 0.75), direct_lrn(x, 1.0, n, 0.7, 0.75), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 4, 8))
        probe = rng.standard_normal(x.shape)
        for params in [(2.0, 5, 1e-4, 0.75), (1.0, 4, 1.0, 0.75)]:
            dx = T.lrn_backward(x, probe, *params)
            numeric = T.finite_difference_grad(lambda v: np.sum(T.lrn_forward(v, *params) * probe), x)
            assert relative_error(dx, numeric).max() < 1e-4

    def test_division_guard(self):
        with pytest.raises(InvalidArgumentError):
            T.lrn_forward(np.zeros((1, 1, 3)), k=0.0)


class TestFiniteDifference:
    def test_sum_of_squares(self):
        g = T.finite_difference_grad(lambda v: np.sum(v**2), np.array([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        assert not T.finite_difference_grad(lambda v: 3.0, np.ones((2, 3))).any()

    def test_runs_in_float64(self):
        seen = []
        T.finite_difference_grad(lambda v: seen.append(v.dtype) or 0.0, np.ones(2, np.float32))
        assert set(seen) == {np.dtype(np.float64)}

    def test_softmax_xent_closed_form(self, np_rng):
        w = np_rng.standard_normal((4, 2))
        x = np_rng.standard_normal((3, 4))
        y = np.array([0, 1, 1])
        head = SoftmaxCrossEntropy("out")
        numeric = T.finite_difference_grad(lambda z: head.forward(z, y)[0], x @ w)
        _, probs = head.forward(x @ w, y)
        closed = (probs - np.eye(2)[y]) / 3
        assert relative_error(closed, numeric).max() < 1e-4

    def test_bad_step(self):
        with pytest.raises(InvalidArgumentError):
            T.finite_difference_grad(lambda v: 0.0, np.ones(1), 0.0)


def test_kernels_keep_float32(np_rng):
    x = np_rng.standard_normal((1, 6, 6, 3)).astype(np.float32)
    k = np_rng.standard_normal((3, 3, 3, 2)).astype(np.float32)
    assert T.conv2d_forward(x, k, np.zeros(2, np.float32)).dtype == np.float32
    assert T.lrn_forward(x).dtype == np.float32
    assert T.maxpool_forward(x, 2, 2)[0].dtype == np.float32


def test_outputs_finite_and_deterministic(np_rng):
    x = np_rng.standard_normal((2, 8, 8, 3)).astype(np.float32) * 100
    k = np_rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = T.lrn_forward(T.conv2d_forward(x, k, None))
    b = T.lrn_forward(T.conv2d_forward(x, k, None))
    assert np.isfinite(a).all()
    np.testing.assert_array_equal(a, b)
