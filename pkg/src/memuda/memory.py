"""Exemplar memory: one unit-norm feature slot per training sample."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .numerics import InvalidParameterError, ShapeError, softmax_temp

MATRIX_MAGIC = b"IMDM1"


@dataclass(frozen=True)
class AlphaSchedule:
    """Memory update rate that grows linearly with the (0-based) epoch."""

    base: float = 0.01

    def __call__(self, epoch: int) -> float:
        return float(min(max(self.base * epoch, 0.0), 1.0))


class ExemplarMemory:
    def __init__(self, n: int, d: int):
        if n < 1 or d < 1:
            raise InvalidParameterError(f"memory needs n >= 1 and d >= 1, got n={n}, d={d}")
        self.n = int(n)
        self.d = int(d)
        self.slots = np.zeros((self.n, self.d), dtype=np.float64)

    def __repr__(self) -> str:
        return f"ExemplarMemory(n={self.n}, d={self.d})"

    def copy(self) -> "ExemplarMemory":
        out = ExemplarMemory(self.n, self.d)
        out.slots[...] = self.slots
        return out

    def _check_alpha(self, alpha):
        if not 0.0 <= alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in [0, 1], got {alpha}")

    def update_slot(self, i: int, f, alpha: float) -> None:
        """``slot_i <- normalize(alpha * slot_i + (1 - alpha) * f)``."""
        if not 0 <= i < self.n:
            raise IndexError(f"slot {i} out of range for memory of size {self.n}")
        self.update_slots(np.array([i]), np.asarray(f, dtype=np.float64)[None, :], alpha)

    def update_slots(self, indices, feats, alpha: float) -> None:
        self._check_alpha(alpha)
        indices = np.asarray(indices, dtype=np.int64)
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape != (indices.shape[0], self.d):
            raise ShapeError(f"expected features of shape {(indices.shape[0], self.d)}, got {feats.shape}")
        if indices.size and (indices.min() < 0 or indices.max() >= self.n):
            raise IndexError("slot index out of range")
        _kernels.ema_update(self.slots, indices, feats, alpha)

    def scores(self, f) -> np.ndarray:
        """Cosine scores of one feature (d,) or a batch (B, d) against every slot."""
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.d:
            raise ShapeError(f"feature dim {f.shape[-1]} != memory dim {self.d}")
        return f @ self.slots.T

    def probabilities(self, f, beta: float) -> np.ndarray:
        return softmax_temp(self.scores(f), beta)

    def topk(self, f, k: int, exclude=None) -> np.ndarray:
        """Indices of the ``k`` highest-scoring slots, ties broken by lower index.

        ``f`` may be a single feature or a batch; ``exclude`` is an index (or one
        per row) removed before ranking.
        """
        f = np.asarray(f, dtype=np.float64)
        single = f.ndim == 1
        fb = f[None, :] if single else f
        limit = self.n - (0 if exclude is None else 1)
        if not 0 <= k <= limit:
            raise InvalidParameterError(f"k={k} exceeds the {limit} rankable slots")
        if exclude is None:
            excl = None
        else:
            excl = np.broadcast_to(np.asarray(exclude, dtype=np.int64), (fb.shape[0],))
        idx = _kernels.topk(self.scores(fb), k, excl)
        return idx[0] if single else idx

    def save(self, path) -> None:
        save_matrix(path, self.slots)

    @classmethod
    def load(cls, path) -> "ExemplarMemory":
        slots = load_matrix(path)
        mem = cls(*slots.shape)
        mem.slots[...] = slots
        return mem


def new_memory(n: int, d: int) -> ExemplarMemory:
    return ExemplarMemory(n, d)


def save_matrix(path, m) -> None:
    """Binary matrix file: magic, rows u32, cols u32, little-endian f64 row-major."""
    m = np.ascontiguousarray(m, dtype="<f8")
    with open(Path(path), "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not a matrix file (bad magic)")
    rows, cols = struct.unpack_from("<II", raw, 5)
    body = raw[13:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols * 8} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
