"""Two-layer MLP feature extractor with L2-normalised output, and the source
identity classifier head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericalError, ShapeError


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EmbedCache:
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    u: np.ndarray
    norm: np.ndarray
    f: np.ndarray


class Embedder:
    param_names = ("W1", "b1", "W2", "b2")

    def __init__(self, in_dim: int = 32, hidden: int = 128, out_dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.W1 = _uniform_init(rng, in_dim, (in_dim, hidden))
        self.b1 = _uniform_init(rng, in_dim, (hidden,))
        self.W2 = _uniform_init(rng, hidden, (hidden, out_dim))
        self.b2 = _uniform_init(rng, hidden, (out_dim,))

    @property
    def params(self) -> dict:
        return {k: getattr(self, k) for k in self.param_names}

    def set_params(self, params: dict) -> None:
        for k in self.param_names:
            setattr(self, k, np.array(params[k], dtype=np.float64))

    def copy(self) -> "Embedder":
        out = Embedder.__new__(Embedder)
        out.in_dim, out.hidden, out.out_dim = self.in_dim, self.hidden, self.out_dim
        out.set_params(self.params)
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {xb.shape[1]} != embedder in_dim {self.in_dim}")
        z1 = xb @ self.W1 + self.b1
        a1 = np.maximum(z1, 0.0)
        u = a1 @ self.W2 + self.b2
        norm = np.sqrt((u * u).sum(axis=1, keepdims=True))
        f = u / np.where(norm > 0.0, norm, 1.0)
        cache = EmbedCache(xb, z1, a1, u, norm, f)
        return (f[0] if single else f), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, grad_f, cache: EmbedCache, grad_u=None) -> dict:
        """Parameter gradients given the gradient w.r.t. the unit output ``f``
        and, optionally, w.r.t. the raw pre-normalisation output ``u``."""
        if grad_f is None:
            gu = np.zeros_like(cache.u)
        else:
            g = np.asarray(grad_f, dtype=np.float64).reshape(cache.f.shape)
            gu = backward_through_normalize(g, cache)
        if grad_u is not None:
            gu = gu + np.asarray(grad_u, dtype=np.float64).reshape(cache.u.shape)
        ga1 = gu @ self.W2.T
        gz1 = ga1 * (cache.z1 > 0.0)
        return {
            "W1": cache.x.T @ gz1,
            "b1": gz1.sum(axis=0),
            "W2": cache.a1.T @ gu,
            "b2": gu.sum(axis=0),
        }

    def sgd(self, grads: dict, lr: float) -> None:
        for k in self.param_names:
            setattr(self, k, getattr(self, k) - lr * grads[k])


def embed(e: Embedder, x):
    return e.forward(x)


def backward_through_normalize(grad_out, cache: EmbedCache):
    """Gradient w.r.t. ``u`` of ``f = u / ||u||`` given the gradient w.r.t. ``f``."""
    g = np.asarray(grad_out, dtype=np.float64)
    f, norm = cache.f, cache.norm
    if g.ndim == 1:
        g = g[None, :]
    if np.any(norm < 1e-12):
        raise NumericalError("cannot back-propagate through normalisation of a ~zero vector")
    radial = (f * g).sum(axis=1, keepdims=True)
    out = (g - f * radial) / norm
    return out[0] if np.ndim(grad_out) == 1 else out


class IdentityClassifier:
    param_names = ("W", "b")

    def __init__(self, d: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.W = _uniform_init(rng, d, (d, num_classes))
        self.b = np.zeros(num_classes)

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    @property
    def params(self) -> dict:
        return {"W": self.W, "b": self.b}

    def set_params(self, params: dict) -> None:
        self.W = np.array(params["W"], dtype=np.float64)
        self.b = np.array(params["b"], dtype=np.float64)

    def forward(self, f):
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"feature dim {f.shape[-1]} != classifier input {self.W.shape[0]}")
        return f @ self.W + self.b

    def backward(self, grad_logits, f):
        g = np.atleast_2d(grad_logits)
        fb = np.atleast_2d(f)
        grads = {"W": fb.T @ g, "b": g.sum(axis=0)}
        grad_f = g @ self.W.T
        return grads, (grad_f[0] if np.ndim(f) == 1 else grad_f)

    def sgd(self, grads: dict, lr: float) -> None:
        self.W = self.W - lr * grads["W"]
        self.b = self.b - lr * grads["b"]


def classify_identity(c: IdentityClassifier, f):
    return c.forward(f)
