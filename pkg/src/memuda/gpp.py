"""Graph-based positive prediction.

For an anchor feature, the top-k memory slots become nodes of a complete graph.
Node features are the slots minus the anchor feature, edge weights are their
row-softmaxed inner products, and a stack of graph convolutions

    H <- ReLU([A H || H] W)

refines them before a small classifier (FC, batch-norm, PReLU, FC) scores each
node as positive or negative for the anchor. The network trains on labelled
source graphs only; it never back-propagates into node features, so neither
the memory nor the feature extractor sees its gradient.

All forward/backward code works on batches of graphs shaped (B, k, ...); the
single-graph functions are thin wrappers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .losses import NeighborSet
from .memory import ExemplarMemory
from .numerics import InvalidParameterError, ShapeError, softmax_temp

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class CandidateGraph:
    anchor_feature: np.ndarray
    candidate_indices: np.ndarray
    node_features: np.ndarray
    adjacency: np.ndarray


@dataclass
class GraphBatch:
    candidate_indices: np.ndarray  # (B, k)
    node_features: np.ndarray      # (B, k, d)
    adjacency: np.ndarray          # (B, k, k)

    def __len__(self):
        return self.node_features.shape[0]

    @property
    def k(self) -> int:
        return self.node_features.shape[1]

    def graph(self, b: int, anchor_feature=None) -> CandidateGraph:
        return CandidateGraph(anchor_feature, self.candidate_indices[b],
                              self.node_features[b], self.adjacency[b])

    @classmethod
    def from_graph(cls, g: CandidateGraph) -> "GraphBatch":
        return cls(np.asarray(g.candidate_indices)[None], g.node_features[None], g.adjacency[None])


@dataclass
class PositiveScores:
    probs: np.ndarray
    logits: np.ndarray | None = None


def default_dims(d: int) -> list[int]:
    """GCN dimension chain d -> d -> d/4 -> d/8 -> d/8 (2048 gives 2048, 512, 256, 256)."""
    return [d, d, max(d // 4, 1), max(d // 8, 1), max(d // 8, 1)]


def build_graphs(mem: ExemplarMemory, anchor_indices, anchor_feats, k: int) -> GraphBatch:
    anchor_feats = np.atleast_2d(np.asarray(anchor_feats, dtype=np.float64))
    if anchor_indices is None:
        anchor_indices = np.full(anchor_feats.shape[0], -1)
    anchor_indices = np.atleast_1d(np.asarray(anchor_indices, dtype=np.int64))
    limit = mem.n - (1 if np.any(anchor_indices >= 0) else 0)
    if not 1 <= k <= limit:
        raise InvalidParameterError(f"k={k} candidates requested from {limit} rankable slots")
    excl = np.where(anchor_indices >= 0, anchor_indices, -1)
    V = _kernels.topk(mem.scores(anchor_feats), k, excl)
    H = mem.slots[V] - anchor_feats[:, None, :]
    A = softmax_temp(H @ H.transpose(0, 2, 1), 1.0, axis=-1)
    return GraphBatch(V, H, A)


def build_graph(mem: ExemplarMemory, anchor_index, anchor_f, k: int) -> CandidateGraph:
    anchor_f = np.asarray(anchor_f, dtype=np.float64)
    idx = None if anchor_index is None else [anchor_index]
    gb = build_graphs(mem, idx, anchor_f[None], k)
    return gb.graph(0, anchor_f)


class GppNetwork:
    """GCN stack plus positive classifier. ``use_gcn=False`` gives the
    classifier-only ablation that scores raw candidate features."""

    def __init__(self, dims, hidden: int, seed: int = 0, use_gcn: bool = True):
        rng = np.random.default_rng(seed)
        self.dims = list(dims)
        self.use_gcn = use_gcn
        self.hidden = hidden
        self.gcn = []
        if use_gcn:
            for din, dout in zip(self.dims[:-1], self.dims[1:]):
                bound = 1.0 / np.sqrt(2 * din)
                self.gcn.append(rng.uniform(-bound, bound, size=(2 * din, dout)))
        zdim = self.dims[-1] if use_gcn else self.dims[0]
        b1 = 1.0 / np.sqrt(zdim)
        self.fc1_W = rng.uniform(-b1, b1, size=(zdim, hidden))
        self.fc1_b = rng.uniform(-b1, b1, size=(hidden,))
        self.bn_gamma = np.ones(hidden)
        self.bn_beta = np.zeros(hidden)
        self.prelu = np.array(0.25)
        b2 = 1.0 / np.sqrt(hidden)
        self.fc2_W = rng.uniform(-b2, b2, size=(hidden, 2))
        self.fc2_b = rng.uniform(-b2, b2, size=(2,))
        self.running_mean = np.zeros(hidden)
        self.running_var = np.ones(hidden)

    @classmethod
    def for_dim(cls, d: int, layers: int = 4, seed: int = 0, use_gcn: bool = True) -> "GppNetwork":
        dims = default_dims(d)[: layers + 1]
        if len(dims) < layers + 1:
            dims = dims + [dims[-1]] * (layers + 1 - len(dims))
        return cls(dims, hidden=max(d // 8, 1), seed=seed, use_gcn=use_gcn)

    @property
    def num_layers(self) -> int:
        return len(self.gcn)

    # parameters are exposed as a flat name -> array dict for SGD, checkpoints
    # and gradient checks
    @property
    def params(self) -> dict:
        p = {f"gcn{l}": W for l, W in enumerate(self.gcn)}
        p.update(fc1_W=self.fc1_W, fc1_b=self.fc1_b, bn_gamma=self.bn_gamma,
                 bn_beta=self.bn_beta, prelu=self.prelu, fc2_W=self.fc2_W, fc2_b=self.fc2_b)
        return p

    def set_param(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        if name.startswith("gcn"):
            self.gcn[int(name[3:])] = value
        else:
            setattr(self, name, value)

    def state(self) -> dict:
        s = dict(self.params)
        s["running_mean"] = self.running_mean
        s["running_var"] = self.running_var
        return s

    def load_state(self, state: dict) -> None:
        for name in self.params:
            self.set_param(name, state[name])
        self.running_mean = np.array(state["running_mean"], dtype=np.float64)
        self.running_var = np.array(state["running_var"], dtype=np.float64)

    def sgd(self, grads: dict, lr: float) -> None:
        for name, value in self.params.items():
            self.set_param(name, value - lr * grads[name])

    # ------------------------------------------------------------ forward

    def gcn_forward(self, H, A):
        H = np.asarray(H, dtype=np.float64)
        if H.shape[-1] != self.dims[0]:
            raise ShapeError(f"node feature dim {H.shape[-1]} != network input {self.dims[0]}")
        layers = []
        h = H
        for W in self.gcn:
            cat = np.concatenate([A @ h, h], axis=-1)
            pre = cat @ W
            layers.append((cat, pre))
            h = np.maximum(pre, 0.0)
        return h, layers

    def classify(self, Z, training: bool, update_stats: bool = False):
        k = Z.shape[-2]
        y1 = Z @ self.fc1_W + self.fc1_b
        # per-graph statistics while training; a single node has none
        batch_stats = training and k > 1
        if batch_stats:
            mu = y1.mean(axis=-2, keepdims=True)
            var = y1.var(axis=-2, keepdims=True)
            if update_stats:
                unbiased = var * k / (k - 1)
                flat_mu = mu.reshape(-1, self.hidden).mean(axis=0)
                flat_var = unbiased.reshape(-1, self.hidden).mean(axis=0)
                self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * flat_mu
                self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * flat_var
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (y1 - mu) * inv_std
        y2 = self.bn_gamma * xhat + self.bn_beta
        y3 = np.where(y2 > 0, y2, self.prelu * y2)
        logits = y3 @ self.fc2_W + self.fc2_b
        cache = dict(Z=Z, xhat=xhat, inv_std=inv_std, y2=y2, y3=y3, batch_stats=batch_stats)
        return logits, cache

    def forward(self, graphs: GraphBatch, training: bool = False, update_stats: bool = False):
        if self.use_gcn:
            Z, layers = self.gcn_forward(graphs.node_features, graphs.adjacency)
        else:
            Z, layers = np.asarray(graphs.node_features, dtype=np.float64), []
        logits, cache = self.classify(Z, training, update_stats)
        cache["layers"] = layers
        cache["A"] = graphs.adjacency
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return PositiveScores(p[..., 1], logits), cache

    # ------------------------------------------------------------ backward

    def backward(self, dlogits, cache) -> dict:
        grads = {}
        y3, y2, xhat = cache["y3"], cache["y2"], cache["xhat"]
        grads["fc2_W"] = _sum_outer(y3, dlogits)
        grads["fc2_b"] = dlogits.reshape(-1, 2).sum(axis=0)
        dy3 = dlogits @ self.fc2_W.T
        neg = y2 <= 0
        grads["prelu"] = np.array((dy3 * y2 * neg).sum())
        dy2 = np.where(neg, self.prelu * dy3, dy3)
        grads["bn_gamma"] = (dy2 * xhat).reshape(-1, self.hidden).sum(axis=0)
        grads["bn_beta"] = dy2.reshape(-1, self.hidden).sum(axis=0)
        dxhat = dy2 * self.bn_gamma
        inv_std = cache["inv_std"]
        if cache["batch_stats"]:
            k = xhat.shape[-2]
            dy1 = inv_std / k * (k * dxhat - dxhat.sum(axis=-2, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=-2, keepdims=True))
        else:
            dy1 = dxhat * inv_std
        grads["fc1_W"] = _sum_outer(cache["Z"], dy1)
        grads["fc1_b"] = dy1.reshape(-1, self.hidden).sum(axis=0)
        dh = dy1 @ self.fc1_W.T
        A = cache["A"]
        for l in range(len(self.gcn) - 1, -1, -1):
            cat, pre = cache["layers"][l]
            dpre = dh * (pre > 0)
            grads[f"gcn{l}"] = _sum_outer(cat, dpre)
            if l == 0:
                break  # no gradient into node features by design
            dcat = dpre @ self.gcn[l].T
            din = self.dims[l]
            dh = dcat[..., din:] + np.swapaxes(A, -1, -2) @ dcat[..., :din]
        return grads


def _sum_outer(x, g):
    """sum over all leading axes of x^T g."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def gcn_forward(graph: CandidateGraph, net: GppNetwork):
    return net.gcn_forward(graph.node_features, graph.adjacency)


def classify_positive(Z, net: GppNetwork, training: bool) -> PositiveScores:
    logits, _ = net.classify(np.asarray(Z, dtype=np.float64), training)
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return PositiveScores(p[..., 1], logits)


def gpp_labels(candidate_ids, anchor_id) -> np.ndarray:
    """1 where the candidate shares the anchor's identity, else 0."""
    cand = np.asarray(candidate_ids)
    anchor = np.asarray(anchor_id)
    if cand.ndim == 2 and anchor.ndim == 1:
        anchor = anchor[:, None]
    return (cand == anchor).astype(np.float64)


def gpp_loss(scores: PositiveScores, labels):
    """Mean binary cross-entropy over all candidate nodes.

    Returns ``(loss, dlogits)``; ``dlogits`` is None when ``scores`` carries
    probabilities only (they are clipped to [1e-12, 1 - 1e-12]).
    """
    y = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(scores.probs, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"labels shape {y.shape} != scores shape {probs.shape}")
    n = y.size
    if scores.logits is None:
        p = np.clip(probs, 1e-12, 1 - 1e-12)
        return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean()), None
    z = scores.logits
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    loss = -(y * logp[..., 1] + (1 - y) * logp[..., 0]).sum() / n
    delta = (np.exp(logp[..., 1]) - y) / n
    dlogits = np.stack([-delta, delta], axis=-1)
    return float(loss), dlogits


def gpp_train_step(net: GppNetwork, graphs: GraphBatch, labels, lr: float, optimizer=None) -> float:
    """One SGD step on the GPP network only; returns the pre-step loss.
    ``optimizer`` (a :class:`Momentum`) turns gradients into the update direction."""
    scores, cache = net.forward(graphs, training=True, update_stats=True)
    loss, dlogits = gpp_loss(scores, labels)
    grads = net.backward(dlogits, cache)
    net.sgd(grads if optimizer is None else optimizer.step(grads), lr)
    return loss


def select_reliable(scores, candidate_indices, mu: float, anchor: int) -> NeighborSet:
    if not 0.0 <= mu <= 1.0:
        raise InvalidParameterError(f"mu must lie in [0, 1], got {mu}")
    probs = np.asarray(getattr(scores, "probs", scores))
    cand = np.asarray(candidate_indices)
    return NeighborSet(int(anchor), tuple(int(j) for j in cand[probs >= mu]))


def select_top(scores, candidate_indices, k: int, anchor: int) -> NeighborSet:
    """Fixed-size selection: the ``k`` candidates with the highest positive probability."""
    probs = np.asarray(getattr(scores, "probs", scores))
    order = np.argsort(-probs, kind="stable")[:k]
    cand = np.asarray(candidate_indices)
    return NeighborSet(int(anchor), tuple(int(j) for j in cand[order]))
