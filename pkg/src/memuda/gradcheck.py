"""Finite-difference suite over every hand-written backward pass.

Each component draws a small random instance, computes its analytic gradient
and compares it with central differences through
:func:`memuda.numerics.finite_diff_check`. Instances are small on purpose:
the numeric side costs two forward passes per coordinate.

Central differences in double precision resolve a gradient entry to roughly
1e-10 absolute, and are meaningless across a ReLU/PReLU kink. Instances are
therefore redrawn when a pre-activation lies within ``KINK_MARGIN`` of zero or
a non-zero gradient entry is smaller than ``MIN_GRAD``.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .embedder import Embedder, IdentityClassifier, backward_through_normalize
from .gpp import GppNetwork, GraphBatch, gpp_loss
from .losses import NeighborSet, source_ce_batch, source_ce_loss, target_loss, target_loss_batch, weight_matrix
from .memory import ExemplarMemory
from .numerics import GradCheckReport, finite_diff_check, l2_normalize, softmax_temp

TOL = 1e-4
EPS = 1e-5
KINK_MARGIN = 1e-3
MIN_GRAD = 1e-6
MAX_DRAWS = 200


@dataclass
class SuiteResult:
    reports: list[GradCheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def components(self) -> list[str]:
        return sorted({r.name.split("[")[0].split(".")[0] for r in self.reports})

    @property
    def worst(self) -> GradCheckReport:
        return max(self.reports, key=lambda r: r.max_relative_error)


@dataclass
class _Check:
    name: str
    loss: object
    point: np.ndarray
    grad: np.ndarray


def _random_memory(rng, n, d):
    mem = ExemplarMemory(n, d)
    mem.slots[...] = l2_normalize(rng.standard_normal((n, d)))
    return mem


# each builder returns (checks, values that must stay clear of a kink)

def _build_source_ce(rng):
    m = int(rng.integers(2, 12))
    logits = rng.standard_normal(m)
    y = int(rng.integers(m))
    g = source_ce_loss(logits, y).grad_f
    return [_Check("source_ce", lambda z: source_ce_loss(z, y).value, logits, g)], ()


def _build_classifier(rng):
    d, m = int(rng.integers(2, 9)), int(rng.integers(2, 8))
    clf = IdentityClassifier(d, m, seed=int(rng.integers(1 << 30)))
    clf.b = rng.standard_normal(m) * 0.1
    u = rng.standard_normal(d)
    y = int(rng.integers(m))
    dlogits = source_ce_loss(clf.forward(u), y).grad_f
    grads, grad_u = clf.backward(dlogits, u)
    return [
        _Check("identity_classifier.W", lambda W: source_ce_loss(u @ W + clf.b, y).value, clf.W, grads["W"]),
        _Check("identity_classifier.b", lambda b: source_ce_loss(u @ clf.W + b, y).value, clf.b, grads["b"]),
        _Check("identity_classifier.input", lambda v: source_ce_loss(clf.forward(v), y).value, u, grad_u),
    ], ()


def _target_instance(rng, with_neighbors):
    n, d = int(rng.integers(5, 51)), int(rng.integers(2, 17))
    beta = float(rng.choice([0.05, 0.5, 1.0]))
    mem = _random_memory(rng, n, d)
    i = int(rng.integers(n))
    neigh = ()
    if with_neighbors:
        others = np.setdiff1d(np.arange(n), [i])
        neigh = tuple(int(j) for j in rng.choice(others, size=int(rng.integers(1, 5)), replace=False))
    ns = NeighborSet(i, neigh)
    f = l2_normalize(rng.standard_normal(d))
    g = target_loss(mem, ns, f, beta).grad_f
    return (lambda v: target_loss(mem, ns, v, beta).value), f, g


def _build_ei_ci(rng):
    loss, f, g = _target_instance(rng, False)
    return [_Check("ei_ci_loss", loss, f, g)], ()


def _build_ni(rng):
    loss, f, g = _target_instance(rng, True)
    return [_Check("ni_loss", loss, f, g)], ()


def _build_normalize(rng):
    d = int(rng.integers(2, 10))
    u = rng.standard_normal(d) * rng.uniform(0.3, 3.0)
    w = rng.standard_normal(d)
    norm = np.linalg.norm(u)
    cache = SimpleNamespace(norm=np.array([[norm]]), f=(u / norm)[None])
    g = backward_through_normalize(w, cache)
    return [_Check("l2_normalize", lambda v: float(w @ (v / np.linalg.norm(v))), u, g)], ()


def _small_embedder(rng):
    return Embedder(int(rng.integers(2, 7)), int(rng.integers(3, 9)), int(rng.integers(2, 6)),
                    seed=int(rng.integers(1 << 30)))


def _param_checks(model, names, loss_of_model, grads, prefix):
    checks = []
    for name in names:
        def loss(p, name=name):
            probe = model.copy()
            setattr(probe, name, p)
            return loss_of_model(probe)
        checks.append(_Check(f"{prefix}.{name}", loss, getattr(model, name), grads[name]))
    return checks


def _build_embedder_target(rng):
    """Embedder parameters end to end through the batched target loss."""
    e = _small_embedder(rng)
    n, b = int(rng.integers(4, 12)), int(rng.integers(1, 4))
    beta = float(rng.choice([0.05, 0.5, 1.0]))
    mem = _random_memory(rng, n, e.out_dim)
    x = rng.standard_normal((b, e.in_dim))
    anchors = rng.choice(n, size=b, replace=False)
    w = weight_matrix([NeighborSet(int(a), (int((a + 1) % n),)) for a in anchors], n)
    f, cache = e.forward(x)
    _, g_f, _ = target_loss_batch(mem, f, w, beta)
    grads = e.backward(g_f, cache)
    checks = _param_checks(e, e.param_names, lambda m: target_loss_batch(mem, m(x), w, beta)[0],
                           grads, "embedder")
    return checks, cache.z1


def _build_embedder_source(rng):
    """Embedder parameters through the identity classifier on the raw output."""
    e = _small_embedder(rng)
    m, b = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    clf = IdentityClassifier(e.out_dim, m, seed=int(rng.integers(1 << 30)))
    x = rng.standard_normal((b, e.in_dim))
    y = rng.integers(m, size=b)
    _, cache = e.forward(x)
    _, dlogits, _ = source_ce_batch(clf.forward(cache.u), y)
    _, g_u = clf.backward(dlogits, cache.u)
    grads = e.backward(None, cache, grad_u=g_u)
    checks = _param_checks(e, e.param_names,
                           lambda mdl: source_ce_batch(clf.forward(mdl.forward(x)[1].u), y)[0],
                           grads, "embedder_source")
    return checks, cache.z1


def _gpp_build(rng, which, training):
    d, k, b = int(rng.integers(4, 9)), int(rng.integers(2, 11)), int(rng.integers(1, 3))
    net = GppNetwork.for_dim(d, int(rng.integers(1, 5)), seed=int(rng.integers(1 << 30)))
    net.bn_gamma = rng.uniform(0.5, 1.5, net.hidden)
    net.bn_beta = rng.standard_normal(net.hidden) * 0.1
    if not training:
        net.running_mean = rng.standard_normal(net.hidden) * 0.1
        net.running_var = rng.uniform(0.5, 2.0, net.hidden)
    H = rng.standard_normal((b, k, d)) * 0.5
    graphs = GraphBatch(np.zeros((b, k), dtype=np.int64), H,
                        softmax_temp(H @ H.transpose(0, 2, 1), 1.0, axis=-1))
    labels = (rng.random((b, k)) < 0.3).astype(np.float64)

    scores, cache = net.forward(graphs, training=training)
    _, dlogits = gpp_loss(scores, labels)
    grads = net.backward(dlogits, cache)
    suffix = "" if training else "@running_stats"
    checks = []
    for name, value in net.params.items():
        if not which(name):
            continue

        def loss(p, name=name):
            saved = net.params[name]
            net.set_param(name, p)
            try:
                return gpp_loss(net.forward(graphs, training=training)[0], labels)[0]
            finally:
                net.set_param(name, saved)
        group = "gcn_layer" if name.startswith("gcn") else "positive_classifier"
        checks.append(_Check(f"{group}.{name}{suffix}", loss, value, grads[name]))
    kinks = [pre.ravel() for _, pre in cache["layers"]] + [cache["y2"].ravel()]
    return checks, np.concatenate(kinks)


def _build_gcn(rng):
    return _gpp_build(rng, lambda n: n.startswith("gcn"), True)


def _build_positive_classifier(rng):
    # under batch statistics the fc1 bias cancels inside batch-norm and its
    # gradient is identically zero, so it is checked on the running-stats path
    return _gpp_build(rng, lambda n: not n.startswith("gcn") and n != "fc1_b", True)


def _build_positive_classifier_running(rng):
    return _gpp_build(rng, lambda n: not n.startswith("gcn"), False)


COMPONENTS = {
    "source_ce": _build_source_ce,
    "identity_classifier": _build_classifier,
    "ei_ci_loss": _build_ei_ci,
    "ni_loss": _build_ni,
    "l2_normalize": _build_normalize,
    "embedder": _build_embedder_target,
    "embedder_source": _build_embedder_source,
    "gcn_layer": _build_gcn,
    "positive_classifier": _build_positive_classifier,
    "positive_classifier_running": _build_positive_classifier_running,
}


def _well_posed(checks, kinks) -> bool:
    kinks = np.asarray(kinks, dtype=np.float64)
    if kinks.size and np.min(np.abs(kinks)) < KINK_MARGIN:
        return False
    for c in checks:
        g = np.abs(np.asarray(c.grad))
        if np.any((g > 0) & (g < MIN_GRAD)):
            return False
    return True


def draw_instance(builder, rng):
    for _ in range(MAX_DRAWS):
        checks, kinks = builder(rng)
        if _well_posed(checks, kinks):
            return checks
    raise RuntimeError(f"no well-posed instance from {builder.__name__} in {MAX_DRAWS} draws")


def run_suite(instances: int = 12, seed: int = 0, components=None) -> SuiteResult:
    """``instances`` random instances for each component."""
    rng = np.random.default_rng(seed)
    reports = []
    for name in components or COMPONENTS:
        for t in range(instances):
            for c in draw_instance(COMPONENTS[name], rng):
                reports.append(finite_diff_check(c.loss, c.point, c.grad, EPS, TOL, f"{c.name}[{t}]"))
    return SuiteResult(reports)
