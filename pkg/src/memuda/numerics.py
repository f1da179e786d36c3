"""Dense helpers shared by every other module.

Everything here works on float64 numpy arrays. Gradients elsewhere in the
package are derived by hand, so :func:`finite_diff_check` is the common
verification harness.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class InvalidParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale ``v`` to unit L2 norm along ``axis``; all-zero inputs stay zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    return v / safe


def softmax_temp(scores, beta: float = 1.0, axis: int = -1) -> np.ndarray:
    if not beta > 0:
        raise InvalidParameterError(f"temperature must be positive, got {beta}")
    s = np.asarray(scores, dtype=np.float64) / beta
    s = s - np.max(s, axis=axis, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_temp(scores, beta: float = 1.0, axis: int = -1) -> np.ndarray:
    if not beta > 0:
        raise InvalidParameterError(f"temperature must be positive, got {beta}")
    s = np.asarray(scores, dtype=np.float64) / beta
    s = s - np.max(s, axis=axis, keepdims=True)
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def relu(m) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def concat_cols(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concatenate columns of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-1)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def sgd_step(params, grads, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"parameter shape {params.shape} != gradient shape {grads.shape}")
    if not lr > 0:
        raise InvalidParameterError(f"learning rate must be positive, got {lr}")
    return params - lr * grads


class Momentum:
    """Heavy-ball velocity buffers keyed by parameter name.

    ``step`` turns raw gradients into the update direction ``v = m*v + g``;
    the caller then applies ``params - lr * v``. Zero momentum is plain SGD.
    """

    def __init__(self, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise InvalidParameterError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: dict) -> dict:
        out = {}
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = np.array(g, dtype=np.float64) if v is None else self.momentum * v + g
            self.velocity[name] = v
            out[name] = v
        return out

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load_state(self, state: dict) -> None:
        self.velocity = {k: np.array(v, dtype=np.float64) for k, v in state.items()}


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_index: tuple
    passed: bool
    tolerance: float = 1e-4
    name: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        label = f"{self.name}: " if self.name else ""
        return (f"{label}{status} max_rel_err={self.max_relative_error:.3e} "
                f"at {self.worst_index} (tol {self.tolerance:.0e})")


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn`` around ``point``, one entry at a time."""
    x = np.array(point, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(loss_fn(x))
        flat[j] = orig - eps
        fm = float(loss_fn(x))
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * eps)
    return grad


def finite_diff_check(loss_fn: Callable[[np.ndarray], float], point, analytic_grad,
                      eps: float = 1e-6, tol: float = 1e-4, name: str = "") -> GradCheckReport:
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")
    numeric = numeric_gradient(loss_fn, point, eps)
    rel = relative_error(analytic, numeric)
    if rel.size == 0:
        return GradCheckReport(0.0, (), True, tol, name)
    flat_idx = int(np.argmax(rel))
    worst = np.unravel_index(flat_idx, rel.shape)
    worst = tuple(int(i) for i in worst)
    err = float(rel.reshape(-1)[flat_idx])
    return GradCheckReport(err, worst, bool(err < tol), tol, name)
