"""Retrieval metrics (CMC, mAP) and neighbour-selection quality."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .losses import NeighborSet

log = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class RankedList:
    query: int
    gallery_order: np.ndarray
    relevance: np.ndarray

    @classmethod
    def from_scores(cls, query: int, scores, relevant) -> "RankedList":
        """Order gallery by descending score, ties by ascending gallery index."""
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
        return cls(query, order, np.asarray(relevant, dtype=bool)[order])


@dataclass
class NeighborQuality:
    recall: float
    precision: float


def _valid(ranked_lists):
    valid = [rl for rl in ranked_lists if np.any(rl.relevance)]
    skipped = len(ranked_lists) - len(valid)
    if skipped:
        log.warning("%d queries without a relevant gallery item were excluded", skipped)
    return valid


def cmc(ranked_lists, ranks=DEFAULT_RANKS) -> dict:
    valid = _valid(ranked_lists)
    if not valid:
        return {r: float("nan") for r in ranks}
    first = np.array([int(np.argmax(rl.relevance)) for rl in valid])
    return {r: float(np.mean(first < r)) for r in ranks}


def average_precision(relevance) -> float:
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.sum() == 0:
        return 0.0
    cum = np.cumsum(rel)
    return float(np.sum(rel * cum / np.arange(1, rel.size + 1)) / rel.sum())


def mean_average_precision(ranked_lists) -> float:
    valid = _valid(ranked_lists)
    if not valid:
        return float("nan")
    return float(np.mean([average_precision(rl.relevance) for rl in valid]))


def evaluate_retrieval(q_feats, q_ids, g_feats, g_ids, q_cams=None, g_cams=None,
                       cross_camera: bool = False, ranks=DEFAULT_RANKS) -> dict:
    """Cosine retrieval metrics for every query at once.

    With ``cross_camera`` the gallery items sharing both identity and camera
    with the query are removed from that query's ranking.
    """
    sim = np.asarray(q_feats) @ np.asarray(g_feats).T
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    rel = q_ids[:, None] == g_ids[None, :]
    if cross_camera:
        junk = rel & (np.asarray(q_cams)[:, None] == np.asarray(g_cams)[None, :])
        sim = np.where(junk, -np.inf, sim)
        rel = rel & ~junk
    first, ap = _kernels.rank_stats(sim, rel)
    valid = first >= 0
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d queries without a relevant gallery item were excluded", skipped)
    if not valid.any():
        out = dict.fromkeys((f"rank{r}" for r in ranks), float("nan"))
        out.update(mAP=float("nan"), num_queries=0)
        return out
    out = {f"rank{r}": float(np.mean(first[valid] < r)) for r in ranks}
    out["mAP"] = float(ap[valid].mean())
    out["num_queries"] = int(valid.sum())
    return out


def neighbor_quality(selected: NeighborSet, truth) -> NeighborQuality:
    """Precision and recall of the non-anchor members against identity labels.

    An empty selection has precision 1 by convention and recall 0.
    """
    truth = np.asarray(truth)
    anchor = selected.anchor
    n_pos = int(np.sum(truth == truth[anchor])) - 1
    chosen = np.asarray(selected.neighbors, dtype=np.int64)
    tp = int(np.sum(truth[chosen] == truth[anchor])) if chosen.size else 0
    precision = tp / chosen.size if chosen.size else 1.0
    recall = tp / n_pos if n_pos > 0 else 0.0
    return NeighborQuality(recall=float(recall), precision=float(precision))
