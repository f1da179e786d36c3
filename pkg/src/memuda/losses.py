"""Source cross-entropy and memory-based target invariance losses.

Memory slots are constants here: every gradient is taken with respect to the
input embedding (or logits) only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory import ExemplarMemory
from .numerics import InvalidParameterError, ShapeError


@dataclass
class LossValue:
    value: float
    grad_f: np.ndarray


@dataclass
class NeighborSet:
    """An anchor plus its reliable neighbours, weighted 1 for the anchor and
    ``1 / #neighbours`` for each neighbour."""

    anchor: int
    neighbors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        seen = []
        for j in self.neighbors:
            j = int(j)
            if j != self.anchor and j not in seen:
                seen.append(j)
        self.neighbors = tuple(seen)

    @property
    def members(self) -> tuple:
        return (self.anchor,) + self.neighbors

    @property
    def weights(self) -> np.ndarray:
        w = np.ones(len(self.members))
        if self.neighbors:
            w[1:] = 1.0 / len(self.neighbors)
        return w

    def weight(self, j: int) -> float:
        if j == self.anchor:
            return 1.0
        if j in self.neighbors:
            return 1.0 / len(self.neighbors)
        return 0.0


def _logsumexp_minus(t, j):
    """``log sum_m exp(t_m) - t_j``, accurate even when it is tiny."""
    rel = t - t[j]
    m = rel.max()
    if m <= 0.0:
        # j is (one of) the argmax: log1p keeps precision near zero.
        e = np.exp(rel)
        e[j] = 0.0  # summing the others directly avoids cancelling against 1
        return float(np.log1p(e.sum()))
    return float(m + np.log(np.exp(rel - m).sum()))


def source_ce_loss(logits, label: int) -> LossValue:
    """Cross-entropy ``-log softmax(logits)[label]``; ``grad_f`` is w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} classes")
    value = _logsumexp_minus(z, label)
    p = np.exp(z - z.max())
    p /= p.sum()
    grad = p.copy()
    grad[label] -= 1.0
    return LossValue(value, grad)


def source_ce_batch(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    losses = lse - zs[np.arange(b), labels]
    p = np.exp(zs - lse[:, None])
    p[np.arange(b), labels] -= 1.0
    return float(losses.mean()), p / b, losses


def target_loss(mem: ExemplarMemory, neigh: NeighborSet, f, beta: float) -> LossValue:
    """``-sum_j w_j log p(j | f)`` over the anchor and its neighbours."""
    if not beta > 0:
        raise InvalidParameterError(f"temperature must be positive, got {beta}")
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (mem.d,):
        raise ShapeError(f"feature shape {f.shape} != ({mem.d},)")
    members = neigh.members
    for j in members:
        if not 0 <= j < mem.n:
            raise IndexError(f"member {j} out of range")
    weights = neigh.weights
    t = mem.slots @ f / beta
    value = sum(w * _logsumexp_minus(t, j) for j, w in zip(members, weights))
    p = np.exp(t - t.max())
    p /= p.sum()
    pulled = weights @ mem.slots[list(members)]
    grad = (weights.sum() * (p @ mem.slots) - pulled) / beta
    return LossValue(float(value), grad)


def ei_ci_loss(mem: ExemplarMemory, i: int, f, beta: float) -> LossValue:
    """Classify ``f`` into its own slot ``i``. ``f`` is the embedding of the real
    sample (exemplar term) or of a style counterpart (camera term)."""
    return target_loss(mem, NeighborSet(i), f, beta)


def target_loss_batch(mem: ExemplarMemory, f, weight_matrix, beta: float):
    """Batched target loss.

    ``weight_matrix`` is (B, n) with the per-slot soft-label weights of each row.
    Returns the mean loss, the gradient of the mean w.r.t. ``f`` and the per-row
    losses.
    """
    f = np.asarray(f, dtype=np.float64)
    t = f @ mem.slots.T / beta
    t = t - t.max(axis=1, keepdims=True)
    lse = np.log(np.exp(t).sum(axis=1, keepdims=True))
    logp = t - lse
    w = np.asarray(weight_matrix, dtype=np.float64)
    losses = -(w * logp).sum(axis=1)
    p = np.exp(logp)
    grad = ((w.sum(axis=1, keepdims=True) * p - w) @ mem.slots) / beta
    b = f.shape[0]
    return float(losses.mean()), grad / b, losses


def weight_matrix(neighbor_sets, n: int) -> np.ndarray:
    w = np.zeros((len(neighbor_sets), n))
    for r, ns in enumerate(neighbor_sets):
        w[r, list(ns.members)] = ns.weights
    return w
