import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memuda.losses import source_ce_loss
from memuda.numerics import (InvalidParameterError, Momentum, ShapeError, concat_cols, finite_diff_check,
                             l2_normalize, log_softmax_temp, matmul, relative_error, relu, sgd_step,
                             softmax_temp)

finite = st.floats(-50, 50, allow_nan=False)
vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
        np.testing.assert_array_equal(l2_normalize([0.0, 0.0]), [0.0, 0.0])
        np.testing.assert_allclose(l2_normalize([1.0, 1.0, 1.0, 1.0]), [0.5] * 4)

    def test_rows(self):
        out = l2_normalize(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])

    @given(vectors)
    def test_idempotent(self, v):
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12)

    @given(vectors, st.floats(1e-3, 1e3))
    def test_positive_scale_invariant(self, v, c):
        if np.linalg.norm(v) < 1e-6:
            return
        np.testing.assert_allclose(l2_normalize(c * v), l2_normalize(v), atol=1e-12)


class TestSoftmax:
    def test_equal_scores(self):
        for beta in (0.05, 0.5, 1.0):
            np.testing.assert_allclose(softmax_temp([2.0, 2.0, 2.0], beta), [1 / 3] * 3)

    def test_two_scores(self):
        e = math.e
        np.testing.assert_allclose(softmax_temp([1.0, 0.0], 1.0), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
        # p0 = 1 - exp(-20) / (1 + exp(-20)) = 1 - 2.06e-9
        p = softmax_temp([1.0, 0.0], 0.05)
        assert p[1] == pytest.approx(math.exp(-20) / (1 + math.exp(-20)), rel=1e-12)
        assert 1 - p[0] == pytest.approx(2.0611536e-9, rel=1e-6)

    def test_bad_beta(self):
        with pytest.raises(InvalidParameterError):
            softmax_temp([1.0], 0.0)
        with pytest.raises(InvalidParameterError):
            log_softmax_temp([1.0], -1.0)

    # score gaps are kept below ~600 / beta so no entry underflows to exactly 0
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3)),
           st.sampled_from([0.01, 0.05, 0.5, 1.0]))
    def test_probability_vector(self, s, beta):
        p = softmax_temp(s, beta)
        assert np.all(p > 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) < 1e-12

    @given(vectors, st.floats(-100, 100), st.sampled_from([0.05, 1.0]))
    def test_shift_invariant(self, s, c, beta):
        np.testing.assert_allclose(softmax_temp(s + c, beta), softmax_temp(s, beta), atol=1e-10)

    @given(vectors)
    def test_log_matches(self, s):
        np.testing.assert_allclose(np.exp(log_softmax_temp(s, 0.5)), softmax_temp(s, 0.5), atol=1e-12)


def test_dense_ops():
    np.testing.assert_array_equal(relu([[-1.0, 2.0]]), [[0.0, 2.0]])
    np.testing.assert_array_equal(concat_cols([[1.0]], [[2.0]]), [[1.0, 2.0]])
    m = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        concat_cols(np.ones((2, 1)), np.ones((3, 1)))


def test_sgd_step():
    np.testing.assert_array_equal(sgd_step([[1.0]], [[2.0]], 0.5), [[0.0]])
    np.testing.assert_array_equal(sgd_step([[1.0, 2.0]], [[0.0, 0.0]], 0.3), [[1.0, 2.0]])
    np.testing.assert_allclose(sgd_step([[1.0, 2.0]], [[0.1, -0.1]], 0.1), [[0.99, 2.01]], rtol=1e-15)
    with pytest.raises(ShapeError):
        sgd_step([[1.0]], [[1.0, 2.0]], 0.1)
    with pytest.raises(InvalidParameterError):
        sgd_step([[1.0]], [[1.0]], 0.0)


def test_momentum():
    opt = Momentum(0.5)
    assert opt.step({"w": np.array([1.0])})["w"][0] == 1.0
    assert opt.step({"w": np.array([1.0])})["w"][0] == 1.5
    clone = Momentum(0.5)
    clone.load_state(opt.state())
    np.testing.assert_array_equal(clone.step({"w": np.array([0.0])})["w"], opt.step({"w": np.array([0.0])})["w"])
    assert Momentum(0.0).step({"w": np.array([2.0])})["w"][0] == 2.0
    with pytest.raises(InvalidParameterError):
        Momentum(1.0)


class TestFiniteDiff:
    def test_quadratic(self, rng):
        x = rng.standard_normal((3, 4))
        rep = finite_diff_check(lambda v: 0.5 * np.sum(v * v), x, x)
        assert rep.passed and rep.max_relative_error < 1e-6

    def test_constant(self):
        rep = finite_diff_check(lambda v: 7.0, np.ones(3), np.zeros(3))
        assert rep.passed and rep.max_relative_error == 0.0

    def test_softmax_nll(self):
        # the loss is ~2e-9 here, so it has to be evaluated with log1p to
        # leave anything for the differences to resolve
        x = np.array([1.0, 0.0])
        analytic = (softmax_temp(x, 0.05) - np.array([1.0, 0.0])) / 0.05
        rep = finite_diff_check(lambda v: source_ce_loss(v / 0.05, 0).value, x, analytic, eps=1e-6)
        assert rep.passed

    def test_detects_wrong_gradient(self, rng):
        x = rng.standard_normal(5)
        rep = finite_diff_check(lambda v: 0.5 * np.sum(v * v), x, 1.01 * x)
        assert not rep.passed
        assert rep.passed == (rep.max_relative_error < rep.tolerance)

    def test_eps_range(self):
        with pytest.raises(InvalidParameterError):
            finite_diff_check(lambda v: 0.0, np.ones(2), np.zeros(2), eps=1e-2)

    def test_relative_error_floor(self):
        assert relative_error([0.0], [0.0])[0] == 0.0
        assert relative_error([1e-9], [0.0])[0] == pytest.approx(0.1)
