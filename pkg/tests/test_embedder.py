import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memuda.embedder import Embedder, IdentityClassifier, backward_through_normalize, classify_identity, embed
from memuda.losses import NeighborSet, ei_ci_loss, source_ce_loss, target_loss
from memuda.memory import ExemplarMemory
from memuda.numerics import NumericalError, ShapeError, finite_diff_check, l2_normalize


def passthrough(d):
    e = Embedder(d, d, d)
    e.W1, e.W2 = np.eye(d), np.eye(d)
    e.b1, e.b2 = np.zeros(d), np.zeros(d)
    return e


def test_passthrough():
    f, _ = embed(passthrough(4), np.array([3.0, 4.0, 0.0, 0.0]))
    np.testing.assert_allclose(f, [0.6, 0.8, 0.0, 0.0])


@given(st.integers(0, 2**32 - 1))
def test_unit_output_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    e = Embedder(5, 7, 3, seed=seed % 1000)
    x = rng.standard_normal((6, 5)) * 4
    f = e(x)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-10)
    np.testing.assert_array_equal(e(x), f)


def test_shape_error():
    with pytest.raises(ShapeError):
        Embedder(3, 4, 2)(np.ones(5))


def test_init_bounds():
    e = Embedder(16, 64, 8, seed=3)
    assert np.abs(e.W1).max() <= 1 / 4 and np.abs(e.W2).max() <= 1 / 8
    np.testing.assert_array_equal(Embedder(16, 64, 8, seed=3).W1, e.W1)


class TestNormalizeBackward:
    def _cache(self, u):
        n = np.linalg.norm(u)
        from types import SimpleNamespace
        return SimpleNamespace(norm=np.array([[n]]), f=(u / n)[None])

    def test_radial_is_annihilated(self):
        u = np.array([1.0, 2.0, 2.0])
        np.testing.assert_allclose(backward_through_normalize(5 * u / 3, self._cache(u)), 0.0, atol=1e-15)

    def test_orthogonal_unit(self):
        u = np.array([1.0, 0.0, 0.0])
        g = np.array([0.0, 0.3, -0.2])
        np.testing.assert_allclose(backward_through_normalize(g, self._cache(u)), g)

    @given(st.integers(0, 2**32 - 1))
    def test_tangent(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(6) * rng.uniform(0.1, 10)
        gu = backward_through_normalize(rng.standard_normal(6), self._cache(u))
        assert abs(l2_normalize(u) @ gu) < 1e-10

    def test_finite_difference(self, rng):
        u = rng.standard_normal(5)
        w = rng.standard_normal(5)
        rep = finite_diff_check(lambda v: w @ l2_normalize(v), u, backward_through_normalize(w, self._cache(u)),
                                eps=1e-6, tol=1e-5)
        assert rep.passed, rep

    def test_zero_norm(self):
        from types import SimpleNamespace
        cache = SimpleNamespace(norm=np.array([[0.0]]), f=np.zeros((1, 3)))
        with pytest.raises(NumericalError):
            backward_through_normalize(np.ones(3), cache)


class TestClassifier:
    def test_zero_weights_uniform(self):
        c = IdentityClassifier(4, 7)
        c.W[...] = 0
        assert source_ce_loss(classify_identity(c, l2_normalize(np.ones(4))), 3).value == pytest.approx(math.log(7))

    def test_aligned_column(self):
        c = IdentityClassifier(3, 3)
        c.W = np.eye(3) * 2
        f = np.array([0.0, 1.0, 0.0])
        assert source_ce_loss(classify_identity(c, f), 1).value < math.log(3)

    def test_gradient(self, rng):
        c = IdentityClassifier(4, 5, seed=2)
        f = l2_normalize(rng.standard_normal(4))
        g, gf = c.backward(source_ce_loss(c.forward(f), 2).grad_f, f)

        def loss_w(W):
            return source_ce_loss(f @ W + c.b, 2).value
        assert finite_diff_check(loss_w, c.W, g["W"]).passed
        assert finite_diff_check(lambda v: source_ce_loss(c.forward(v), 2).value, f, gf).passed

    def test_shape(self):
        with pytest.raises(ShapeError):
            IdentityClassifier(3, 2).forward(np.ones(4))


def _end_to_end(rng, loss_of_f):
    e = Embedder(4, 6, 3, seed=int(rng.integers(1000)))
    x = rng.standard_normal(4) * 2
    f, cache = e.forward(x[None])
    grads = e.backward(loss_of_f(f[0]).grad_f, cache)
    out = []
    for name in e.param_names:
        def loss(p, name=name):
            probe = e.copy()
            setattr(probe, name, p)
            return loss_of_f(probe(x)).value
        out.append(finite_diff_check(loss, getattr(e, name), grads[name], eps=1e-5))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_target_loss_through_embedder(seed):
    rng = np.random.default_rng(seed)
    mem = ExemplarMemory(8, 3)
    mem.slots[...] = l2_normalize(rng.standard_normal((8, 3)))
    for rep in _end_to_end(rng, lambda f: target_loss(mem, NeighborSet(1, (4, 6)), f, 0.5)):
        assert rep.passed, rep
    for rep in _end_to_end(rng, lambda f: ei_ci_loss(mem, 2, f, 1.0)):
        assert rep.passed, rep
