"""Hot per-row loops, compiled with numba when available.

Set ``MEMUDA_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths are
always importable as :data:`numpy_impl` and (if numba imports) :data:`numba_impl`
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


# ---------------------------------------------------------------- numpy path

def _ema_update_np(slots, indices, feats, alpha):
    # Sequential so repeated indices in one batch compose like the scalar rule.
    for r in range(indices.shape[0]):
        i = indices[r]
        v = alpha * slots[i] + (1.0 - alpha) * feats[r]
        n = np.sqrt(np.dot(v, v))
        if n > 0.0:
            v = v / n
        slots[i] = v


def _topk_np(scores, k, exclude):
    out = np.empty((scores.shape[0], k), dtype=np.int64)
    for r in range(scores.shape[0]):
        order = np.argsort(-scores[r], kind="stable")
        if exclude[r] >= 0:
            order = order[order != exclude[r]]
        out[r] = order[:k]
    return out


def _rank_stats_np(sim, rel):
    """First-hit position (0-based, -1 if none) and AP per query row."""
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = np.take_along_axis(rel, order, axis=1).astype(np.float64)
    n_rel = hits.sum(axis=1)
    first = np.where(n_rel > 0, np.argmax(hits > 0, axis=1), -1)
    cum = np.cumsum(hits, axis=1)
    ranks = np.arange(1, sim.shape[1] + 1, dtype=np.float64)
    prec_sum = np.sum(hits * cum / ranks, axis=1)
    ap = np.where(n_rel > 0, prec_sum / np.maximum(n_rel, 1.0), 0.0)
    return first.astype(np.int64), ap


numpy_impl = SimpleNamespace(
    ema_update=_ema_update_np,
    topk=_topk_np,
    rank_stats=_rank_stats_np,
    name="numpy",
)


# ---------------------------------------------------------------- numba path

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def ema_update(slots, indices, feats, alpha):
        d = slots.shape[1]
        v = np.empty(d)
        for r in range(indices.shape[0]):
            i = indices[r]
            n2 = 0.0
            for c in range(d):
                v[c] = alpha * slots[i, c] + (1.0 - alpha) * feats[r, c]
                n2 += v[c] * v[c]
            n = np.sqrt(n2)
            for c in range(d):
                slots[i, c] = v[c] / n if n > 0.0 else v[c]

    @njit(cache=True)
    def topk(scores, k, exclude):
        # insertion into a sorted buffer of size k: O(n k), and scanning in
        # index order keeps the lower index first among equal scores
        nr, n = scores.shape
        out = np.empty((nr, k), dtype=np.int64)
        if k == 0:
            return out
        best = np.empty(k)
        for r in range(nr):
            filled = 0
            for t in range(n):
                if t == exclude[r]:
                    continue
                v = scores[r, t]
                if filled == k and not v > best[k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and v > best[pos - 1]:
                    if pos < k:
                        best[pos] = best[pos - 1]
                        out[r, pos] = out[r, pos - 1]
                    pos -= 1
                best[pos] = v
                out[r, pos] = t
                if filled < k:
                    filled += 1
        return out

    @njit(cache=True)
    def rank_stats(sim, rel):
        nq, ng = sim.shape
        first = np.full(nq, -1, dtype=np.int64)
        ap = np.zeros(nq)
        for q in range(nq):
            order = np.argsort(-sim[q], kind="mergesort")
            hits = 0.0
            acc = 0.0
            for t in range(ng):
                if rel[q, order[t]]:
                    hits += 1.0
                    acc += hits / (t + 1.0)
                    if first[q] < 0:
                        first[q] = t
            if hits > 0:
                ap[q] = acc / hits
        return first, ap

    return SimpleNamespace(ema_update=ema_update, topk=topk, rank_stats=rank_stats, name="numba")


try:
    numba_impl = _build_numba()
except ImportError:  # numba missing: numpy path only
    numba_impl = None


def _select():
    flag = os.environ.get("MEMUDA_DISABLE_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes") or numba_impl is None:
        return numpy_impl
    return numba_impl


active = _select()


def ema_update(slots, indices, feats, alpha):
    active.ema_update(slots, np.ascontiguousarray(indices, dtype=np.int64),
                      np.ascontiguousarray(feats, dtype=np.float64), float(alpha))


def topk(scores, k, exclude=None):
    scores = np.ascontiguousarray(np.atleast_2d(scores), dtype=np.float64)
    if exclude is None:
        exclude = np.full(scores.shape[0], -1, dtype=np.int64)
    return active.topk(scores, int(k), np.ascontiguousarray(exclude, dtype=np.int64))


def rank_stats(sim, rel):
    return active.rank_stats(np.ascontiguousarray(sim, dtype=np.float64),
                             np.ascontiguousarray(rel, dtype=np.bool_))
