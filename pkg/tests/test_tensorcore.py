import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from premixer.errors import ConfigError, NumericError, ShapeError
from premixer.tensorcore import (
    Adam,
    AdamState,
    Linear,
    Parameter,
    Rng,
    adam_step,
    dropout,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    matmul_backward,
    relu,
    sigmoid,
    softmax_rows,
)


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
        assert np.array_equal(out, [[17.0], [39.0]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_double_identity_bit_exact(self):
        a = Rng(3).normal(size=(5, 4))
        assert np.array_equal(matmul(matmul(a, np.eye(4)), np.eye(4)), a)

    def test_batched_matches_loop(self):
        rng = Rng(0)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        out = matmul(a, b)
        for k in range(3):
            np.testing.assert_allclose(out[k], a[k] @ b, rtol=1e-12)

    def test_backward_formula(self):
        rng = Rng(1)
        a, b, dc = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        da, db = matmul_backward(dc, a, b)
        np.testing.assert_allclose(da, dc @ b.T)
        np.testing.assert_allclose(db, a.T @ dc)


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        y, _ = layer_norm(np.array([[5.0, 5.0, 5.0]]), np.ones(3), np.zeros(3))
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_two_values(self):
        y, _ = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(y, [[-1.0, 1.0]], atol=1e-9)

    def test_affine_dominates(self):
        y, _ = layer_norm(Rng(0).normal(size=(4, 2)), np.zeros(2), np.array([7.0, 7.0]))
        np.testing.assert_allclose(y, 7.0)

    def test_degenerate_axis(self):
        with pytest.raises(ShapeError):
            layer_norm(np.ones((3, 1)), np.ones(1), np.zeros(1))

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            layer_norm(np.ones((3, 2)), np.ones(2), np.zeros(2), eps=0.0)


class TestActivations:
    def test_gelu_values(self):
        assert gelu(np.array(0.0)) == 0.0
        assert abs(float(gelu(np.array(1.0))) - 0.841345) < 1e-5

    def test_relu_values(self):
        np.testing.assert_array_equal(relu(np.array([-3.0, 3.0])), [0.0, 3.0])

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


class TestDropout:
    def test_eval_identity_bit_exact(self):
        x = Rng(0).normal(size=(4, 4))
        y, mask = dropout(x, 0.7, Rng(1), training=False)
        assert y is x and mask is None

    def test_zero_rate_identity(self):
        x = Rng(0).normal(size=(4, 4))
        y, _ = dropout(x, 0.0, Rng(1), training=True)
        assert np.array_equal(y, x)

    def test_inverted_expectation(self):
        y, _ = dropout(np.ones(10**6), 0.5, Rng(2), training=True)
        assert 0.99 <= y.mean() <= 1.01

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, p):
        with pytest.raises(ConfigError):
            dropout(np.ones(3), p, Rng(0), training=True)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_logs(self):
        out = softmax_rows(np.log(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-1e4, 1e4)))
    def test_rows_sum_to_one(self, x):
        np.testing.assert_allclose(softmax_rows(x).sum(axis=-1), 1.0, atol=1e-9)


class TestAdam:
    def _param(self, grad):
        p = Parameter("w", np.ones(3))
        p.grad[...] = grad
        return p

    def test_zero_grad_identity(self):
        p = self._param(0.0)
        adam_step(p, AdamState.for_param(p))
        assert np.array_equal(p.value, np.ones(3))

    @pytest.mark.parametrize("g, sign", [(1.0, -1.0), (-1.0, 1.0)])
    def test_first_step(self, g, sign):
        p = self._param(g)
        adam_step(p, AdamState.for_param(p, lr=0.005))
        np.testing.assert_allclose(p.value - 1.0, sign * 0.005, atol=1e-7)

    def test_non_finite_names_param(self):
        p = self._param(np.nan)
        with pytest.raises(NumericError, match="'w'"):
            adam_step(p, AdamState.for_param(p))

    def test_matches_textbook_formula(self):
        rng = Rng(5)
        p = Parameter("w", rng.normal(size=4))
        ref, m, v = p.value.copy(), np.zeros(4), np.zeros(4)
        st_ = AdamState.for_param(p, lr=0.01)
        for t in range(1, 6):
            g = rng.normal(size=4)
            p.grad[...] = g
            adam_step(p, st_)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.value, ref, rtol=1e-12)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError):
            Adam([Parameter("a", 1.0), Parameter("a", 2.0)])


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(9).normal(size=5), Rng(9).normal(size=5))

    def test_child_does_not_advance_parent(self):
        a, b = Rng(9), Rng(9)
        a.child(3).normal(size=4)
        assert np.array_equal(a.normal(size=3), b.normal(size=3))


class TestGradCheck:
    def test_sum(self):
        x = Rng(0).normal(size=(3, 3))
        assert grad_check(lambda x_: (float(x_.sum()), [np.ones_like(x_)]), [x]) < 1e-9

    def test_sum_of_matmul(self):
        rng = Rng(1)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

        def fn(a_, b_):
            da, db = matmul_backward(np.ones((3, 2)), a_, b_)
            return float(matmul(a_, b_).sum()), [da, db]

        assert grad_check(fn, [a, b]) < 1e-6

    def test_detects_wrong_gradient(self):
        x = Rng(0).normal(size=4)
        assert grad_check(lambda x_: (float((x_**2).sum()), [x_]), [x]) > 0.1

    def test_linear_layer(self):
        rng = Rng(2)
        lin = Linear("l", 3, 2, rng)
        x, w = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))

        def fn(*_):
            for p in lin.parameters():
                p.zero_grad()
            y = lin.forward(x)
            dx = lin.backward(w)
            return float((w * y).sum()), [dx, lin.weight.grad.copy(), lin.bias.grad.copy()]

        assert grad_check(fn, [x, lin.weight.value, lin.bias.value]) < 1e-6


def test_gelu_matches_erf_definition():
    x = np.linspace(-4, 4, 17)
    ref = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(gelu(x), ref, rtol=1e-14, atol=1e-16)
