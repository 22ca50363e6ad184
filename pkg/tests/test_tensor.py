import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mamba_va import tensor as tc
from mamba_va.errors import ConfigError, ShapeError
from mamba_va.gradcheck import numerical_grad, rel_error


def _conv_oracle(x, kernel, bias, dilation):
    """Direct triple loop with explicit zero history."""
    c_out, c_in, k = kernel.shape
    t_len = x.shape[-1]
    out = np.zeros((c_out, t_len))
    for o in range(c_out):
        for t in range(t_len):
            acc = bias[o]
            for i in range(c_in):
                for j in range(k):
                    src = t - (k - 1 - j) * dilation
                    if src >= 0:
                        acc += kernel[o, i, j] * x[i, src]
            out[o, t] = acc
    return out


class TestTensor:
    def test_grad_shape_must_match(self):
        with pytest.raises(ShapeError):
            tc.Tensor(np.zeros((2, 3)), grad=np.zeros(3))

    def test_accumulate_adds(self):
        t = tc.Tensor(np.zeros(3, np.float32))
        t.accumulate(np.ones(3))
        t.accumulate(np.ones(3))
        np.testing.assert_array_equal(t.grad, [2, 2, 2])

    def test_size_is_product_of_extents(self):
        t = tc.Tensor(np.zeros((2, 3, 4)))
        assert t.size == int(np.prod(t.shape)) == t.data.size


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tc.matmul(np.eye(2), b), b)

    def test_hand_product(self):
        assert tc.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_sum_gradient_is_all_ones(self):
        a = np.ones((2, 2))
        b = np.eye(2)
        da, _ = tc.matmul_backward(np.ones((2, 2)), a, b)
        numeric = numerical_grad(lambda: tc.matmul(a, b).sum(), a)
        np.testing.assert_allclose(da, np.ones((2, 2)))
        np.testing.assert_allclose(numeric, np.ones((2, 2)), atol=1e-9)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestConv:
    def test_identity_kernel(self):
        x = np.array([[1.0, 2.0, 3.0]])
        out = tc.conv1d_causal(x, np.ones((1, 1, 1)), np.zeros(1), 1)
        np.testing.assert_array_equal(out, [[1, 2, 3]])

    def test_k2_dilation1(self):
        out = tc.conv1d_causal(np.array([[1.0, 2.0, 3.0]]), np.ones((1, 1, 2)), np.zeros(1), 1)
        np.testing.assert_array_equal(out, [[1, 3, 5]])

    def test_k2_dilation2(self):
        out = tc.conv1d_causal(np.array([[1.0, 2.0, 3.0, 4.0]]), np.ones((1, 1, 2)), np.zeros(1), 2)
        np.testing.assert_array_equal(out, [[1, 2, 4, 6]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 12), st.integers(0, 99))
    def test_matches_loop_oracle(self, c_in, c_out, k, d, t, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((c_in, t))
        kernel = r.standard_normal((c_out, c_in, k))
        bias = r.standard_normal(c_out)
        np.testing.assert_allclose(tc.conv1d_causal(x, kernel, bias, d), _conv_oracle(x, kernel, bias, d), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 19), st.integers(1, 4), st.integers(0, 99))
    def test_causality(self, t_len, t0, d, seed):
        t0 = t0 % t_len
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, t_len))
        kernel, bias = r.standard_normal((3, 2, 5)), r.standard_normal(3)
        before = tc.conv1d_causal(x, kernel, bias, d)
        x[:, t0] += 10.0
        after = tc.conv1d_causal(x, kernel, bias, d)
        assert np.array_equal(before[:, :t0], after[:, :t0])

    def test_batched_matches_unbatched(self, rng):
        x = rng.standard_normal((3, 2, 9))
        kernel, bias = rng.standard_normal((4, 2, 3)), rng.standard_normal(4)
        batched = tc.conv1d_causal(x, kernel, bias, 2)
        for i in range(3):
            np.testing.assert_allclose(batched[i], tc.conv1d_causal(x[i], kernel, bias, 2), atol=1e-12)

    def test_depthwise_matches_grouped_oracle(self, rng):
        x = rng.standard_normal((7, 3))  # [T, C]
        kernel, bias = rng.standard_normal((3, 4)), rng.standard_normal(3)
        out = tc.depthwise_conv1d_causal(x, kernel, bias)
        for c in range(3):
            ref = _conv_oracle(x[:, c][None], kernel[c][None, None], bias[c : c + 1], 1)[0]
            np.testing.assert_allclose(out[:, c], ref, atol=1e-12)

    def test_dtype_preserved(self, rng):
        x = rng.standard_normal((2, 5)).astype(np.float32)
        out = tc.conv1d_causal(x, np.ones((1, 2, 3), np.float32), np.zeros(1, np.float32), 1)
        assert out.dtype == np.float32


class TestLayerNorm:
    def test_constant_input_gives_zeros(self):
        out = tc.layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5))
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_unit_pair(self):
        out = tc.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-10)

    def test_default_eps(self):
        assert tc.LAYER_NORM_EPS == 1e-5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 10_000))
    def test_output_moments(self, d, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((3, d)) * 5 + 2
        assume(x.var(axis=-1).min() > 1e-2)  # spread must dominate eps for the std identity
        gamma = np.full(d, r.uniform(0.5, 2.0))
        beta = np.full(d, r.uniform(-1, 1))
        out = tc.layer_norm(x, gamma, beta)
        np.testing.assert_allclose(out.mean(axis=-1), beta[0], atol=1e-6)
        np.testing.assert_allclose(out.std(axis=-1), abs(gamma[0]), rtol=1e-3)
        plain = tc.layer_norm(x, np.ones(d), np.zeros(d))
        assert np.abs(plain.mean(axis=-1)).max() < 1e-6


class TestActivations:
    def test_origin_values(self):
        assert tc.silu(np.array(0.0)) == 0.0
        assert tc.softplus(np.array(0.0)) == pytest.approx(np.log(2), abs=1e-15)
        assert tc.tanh(np.array(0.0)) == 0.0

    def test_softplus_no_overflow(self):
        with np.errstate(all="raise"):
            assert tc.softplus(np.array(100.0)) == pytest.approx(100.0)
            assert tc.softplus(np.array(-100.0)) >= 0.0

    def test_silu_slope_at_zero(self):
        x = np.zeros(1)
        numeric = numerical_grad(lambda: float(tc.silu(x).sum()), x)
        assert numeric[0] == pytest.approx(0.5, abs=1e-9)
        assert tc.silu_backward(np.ones(1), x)[0] == pytest.approx(0.5)

    def test_inverse_softplus_round_trip(self):
        y = np.exp(np.linspace(np.log(1e-3), np.log(1e-1), 7))
        np.testing.assert_allclose(tc.softplus(tc.inverse_softplus(y)), y, rtol=1e-12)

    def test_relu_backward_masks(self):
        np.testing.assert_array_equal(tc.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])

    @pytest.mark.parametrize("fwd,bwd,from_output", [
        (tc.silu, tc.silu_backward, False),
        (tc.softplus, tc.softplus_backward, False),
        (tc.tanh, tc.tanh_backward, True),
    ])
    def test_gradients(self, rng, fwd, bwd, from_output):
        x = rng.uniform(-3, 3, size=(4, 5))
        cot = rng.standard_normal(x.shape)
        analytic = bwd(cot, fwd(x) if from_output else x)
        numeric = numerical_grad(lambda: float(np.sum(fwd(x) * cot)), x)
        assert rel_error(analytic, numeric) < 1e-4


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = rng.standard_normal(100)
        assert tc.dropout(x, 0.0, True, rng) is x

    def test_eval_mode_is_identity(self, rng):
        x = rng.standard_normal(100)
        assert tc.dropout(x, 0.3, False, rng) is x

    def test_zero_fraction_within_three_sigma(self):
        n, p = 100_000, 0.3
        out = tc.dropout(np.ones(n), p, True, np.random.default_rng(7))
        frac = float(np.mean(out == 0))
        assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / n)
        np.testing.assert_allclose(out[out != 0], 1 / (1 - p))

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            tc.dropout(np.ones(3), 1.0, True, rng)


def test_ops_are_pure(rng):
    x = rng.standard_normal((2, 3, 10))
    kernel, bias = rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    a = tc.conv1d_causal(x, kernel, bias, 2)
    b = tc.conv1d_causal(x.copy(), kernel.copy(), bias.copy(), 2)
    assert a.tobytes() == b.tobytes()
    g = rng.standard_normal(10)
    assert tc.layer_norm(x, g, g).tobytes() == tc.layer_norm(x, g, g).tobytes()
