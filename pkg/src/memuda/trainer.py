"""Training schedule for memory-based invariance learning.

Each iteration runs a labelled source step, an unlabelled target step against
the target exemplar memory, a GPP update on source graphs (once active), and
finally writes the batch features into both memories. Baselines reuse the same
loop with the target branch switched off.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import DomainData, query_mask
from .embedder import Embedder, IdentityClassifier
from .evaluation import NeighborQuality, evaluate_retrieval, neighbor_quality
from .gpp import GppNetwork, build_graphs, gpp_labels, gpp_train_step, select_reliable, select_top
from .losses import NeighborSet, source_ce_batch, target_loss_batch, weight_matrix
from .memory import AlphaSchedule, ExemplarMemory
from .numerics import InvalidParameterError, Momentum, NumericalError

log = logging.getLogger(__name__)

NEIGHBOR_MODES = ("vns", "variant_vns", "variant_gpp", "gpp")
TRAIN_MODES = ("adapt", "source_only", "train_on_target")


@dataclass
class TrainConfig:
    beta: float = 0.05
    k_candidates: int | None = None
    mu: float = 0.9
    alpha_base: float = 0.01
    vns_k: int = 8
    batch_size: int = 32
    epochs: int = 30
    ni_start_epoch: int = 10
    gpp_start_epoch: int = 5
    ei: bool = True
    ci: bool = True
    ni: bool = True
    neighbor_mode: str = "gpp"
    mode: str = "adapt"
    seed: int = 42
    lr: float = 0.05
    gpp_lr: float = 0.01
    momentum: float = 0.9
    lr_decay_epoch: int | None = None
    hidden_dim: int = 128
    embed_dim: int = 64
    gpp_layers: int = 4
    cross_camera_eval: bool = False

    def validate(self) -> None:
        if not 0 < self.beta <= 1:
            raise InvalidParameterError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0 <= self.mu <= 1:
            raise InvalidParameterError(f"mu must lie in [0, 1], got {self.mu}")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise InvalidParameterError(f"neighbor_mode must be one of {NEIGHBOR_MODES}")
        if self.mode not in TRAIN_MODES:
            raise InvalidParameterError(f"mode must be one of {TRAIN_MODES}")
        if self.uses_gpp and self.ni_start_epoch < self.gpp_start_epoch:
            raise InvalidParameterError("ni_start_epoch must not precede gpp_start_epoch when GPP selects neighbours")
        for name in ("batch_size", "vns_k", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.epochs < 0 or self.alpha_base < 0 or self.lr <= 0 or self.gpp_lr <= 0:
            raise InvalidParameterError("epochs, alpha_base must be >= 0 and learning rates > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError("momentum must lie in [0, 1)")
        if self.k_candidates is not None and self.k_candidates < 1:
            raise InvalidParameterError("k_candidates must be >= 1")

    @property
    def uses_gpp(self) -> bool:
        return self.mode == "adapt" and self.ni and self.neighbor_mode != "vns"

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(math.floor(2 * self.epochs / 3))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class EpochReport:
    epoch: int
    L_src: float
    L_tgt: float
    L_gpp: float
    rank1: float
    rank5: float
    rank10: float
    rank20: float
    mAP: float
    neigh_precision: float
    neigh_recall: float
    seconds: float = 0.0

    CSV_FIELDS = ("epoch", "L_src", "L_tgt", "L_gpp", "rank1", "rank5", "rank10", "rank20",
                  "mAP", "neigh_precision", "neigh_recall")

    def csv_row(self) -> list[str]:
        out = [str(self.epoch)]
        for name in self.CSV_FIELDS[1:]:
            out.append(repr(float(getattr(self, name))))
        return out

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_finite(name: str, value: float, epoch: int, it: int) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{name} became non-finite ({value}) at epoch {epoch}, iteration {it}")


class Trainer:
    """Holds the model, the memories and the epoch counter; ``run_epoch`` is
    deterministic given ``(config.seed, epoch)`` so training can resume from any
    saved state."""

    def __init__(self, config: TrainConfig, source: DomainData, target_train: DomainData | None,
                 target_test: DomainData):
        config.validate()
        self.config = config
        self.alpha = AlphaSchedule(config.alpha_base)
        self.epoch = 0
        self.reports: list[EpochReport] = []

        if config.mode == "train_on_target":
            labelled = target_train.real()
        else:
            labelled = source.real()
        self.labelled_x = labelled.x
        ids, self.labelled_y = np.unique(labelled.identity, return_inverse=True)
        self.labelled_ids = labelled.identity

        in_dim = labelled.in_dim
        self.embedder = Embedder(in_dim, config.hidden_dim, config.embed_dim, seed=config.seed)
        self.classifier = IdentityClassifier(config.embed_dim, ids.size, seed=config.seed + 1)

        self.opt_embedder = Momentum(config.momentum)
        self.opt_classifier = Momentum(config.momentum)
        self.opt_gpp = Momentum(config.momentum)

        self.adapt = config.mode == "adapt"
        self.gpp = None
        if self.adapt:
            if target_train is None:
                raise InvalidParameterError("adaptation needs target training data")
            if np.intersect1d(np.unique(source.identity), np.unique(target_train.identity)).size:
                raise InvalidParameterError("source and target identity labels must be disjoint")
            real_rows = np.flatnonzero(target_train.real_mask)
            self.target_x = target_train.x
            self.target_real_rows = real_rows
            self.target_truth = target_train.identity[real_rows]
            self.counterparts = target_train.counterpart_table()
            if config.ci and not any(len(c) for c in self.counterparts):
                raise InvalidParameterError("camera invariance requires style counterparts in the target data")
            self.mem_t = ExemplarMemory(real_rows.size, config.embed_dim)
            self.mem_s = ExemplarMemory(len(self.labelled_x), config.embed_dim)
            if config.uses_gpp:
                self.gpp = GppNetwork.for_dim(config.embed_dim, config.gpp_layers, seed=config.seed + 2,
                                              use_gcn=config.neighbor_mode != "variant_vns")
            kc = config.k_candidates
            if kc is None:
                kc = min(100, real_rows.size // 4)
            self.k_target = max(1, min(kc, real_rows.size - 1))
            self.k_source = max(1, min(kc, len(self.labelled_x) - 1))
        n_t = self.target_real_rows.size if self.adapt else 0
        self.iters_per_epoch = max(math.ceil(len(self.labelled_x) / config.batch_size),
                                   math.ceil(n_t / config.batch_size))

        test = target_test.real()
        q = query_mask(test)
        self.test_query = test.subset(np.flatnonzero(q))
        self.test_gallery = test.subset(np.flatnonzero(~q))

    # ------------------------------------------------------------------ API

    def lr(self, epoch: int) -> float:
        return self.config.lr * (0.1 if epoch >= self.config.decay_epoch else 1.0)

    def gpp_lr(self, epoch: int) -> float:
        return self.config.gpp_lr * (0.1 if epoch >= self.config.decay_epoch else 1.0)

    def evaluate(self) -> dict:
        qf = self.embedder(self.test_query.x)
        gf = self.embedder(self.test_gallery.x)
        return evaluate_retrieval(qf, self.test_query.identity, gf, self.test_gallery.identity,
                                  self.test_query.camera, self.test_gallery.camera,
                                  cross_camera=self.config.cross_camera_eval)

    def fit(self, until: int | None = None, callback=None, eval_every: int = 1) -> list[EpochReport]:
        """Run epochs up to ``until`` (default: all). Evaluation happens every
        ``eval_every`` epochs and always after the last configured epoch."""
        until = self.config.epochs if until is None else until
        while self.epoch < until:
            due = (self.epoch + 1) % eval_every == 0 or self.epoch + 1 == self.config.epochs
            report = self.run_epoch(evaluate=due)
            if callback is not None:
                callback(self, report)
        return self.reports

    def _batches(self, rng, n: int):
        b = self.config.batch_size
        need = self.iters_per_epoch * b
        order = np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])
        return order[:need].reshape(self.iters_per_epoch, b) if n >= b else \
            [order[i * b:(i + 1) * b] for i in range(self.iters_per_epoch)]

    def neighbor_sets(self, anchors, feats, epoch: int) -> list[NeighborSet]:
        cfg = self.config
        if not (cfg.ni and epoch >= cfg.ni_start_epoch):
            return [NeighborSet(int(i)) for i in anchors]
        if cfg.neighbor_mode == "vns":
            top = self.mem_t.topk(feats, min(cfg.vns_k, self.mem_t.n - 1), exclude=anchors)
            return [NeighborSet(int(i), tuple(row)) for i, row in zip(anchors, top)]
        graphs = build_graphs(self.mem_t, anchors, feats, self.k_target)
        scores, _ = self.gpp.forward(graphs, training=False)
        out = []
        for b, i in enumerate(anchors):
            if cfg.neighbor_mode == "variant_gpp":
                out.append(select_top(scores.probs[b], graphs.candidate_indices[b], cfg.vns_k, int(i)))
            else:
                out.append(select_reliable(scores.probs[b], graphs.candidate_indices[b], cfg.mu, int(i)))
        return out

    def run_epoch(self, evaluate: bool = True) -> EpochReport:
        cfg = self.config
        e = self.epoch
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, e])
        lr = self.lr(e)
        alpha = self.alpha(e)
        src_batches = self._batches(rng, len(self.labelled_x))
        if self.adapt:
            tgt_batches = self._batches(rng, self.target_real_rows.size)
        l_src, l_tgt, l_gpp = [], [], []
        quality: list[NeighborQuality] = []
        gpp_active = self.gpp is not None and e >= cfg.gpp_start_epoch

        for it in range(self.iters_per_epoch):
            sb = np.asarray(src_batches[it])
            f_s, cache_s = self.embedder.forward(self.labelled_x[sb])
            logits = self.classifier.forward(cache_s.u)
            loss, dlogits, _ = source_ce_batch(logits, self.labelled_y[sb])
            _check_finite("L_src", loss, e, it)
            l_src.append(loss)
            g_clf, g_u = self.classifier.backward(dlogits, cache_s.u)
            g_emb = self.embedder.backward(None, cache_s, grad_u=g_u)
            self.embedder.sgd(self.opt_embedder.step(g_emb), lr)
            self.classifier.sgd(self.opt_classifier.step(g_clf), lr)

            if not self.adapt:
                continue

            tb = np.asarray(tgt_batches[it])
            rows = self._sample_views(rng, tb)
            f_t, cache_t = self.embedder.forward(self.target_x[rows])
            sets = self.neighbor_sets(tb, f_t, e)
            if cfg.ni and e >= cfg.ni_start_epoch:
                quality.extend(neighbor_quality(ns, self.target_truth) for ns in sets)
            w = weight_matrix(sets, self.mem_t.n)
            if not (cfg.ei or cfg.ci):
                w[np.arange(tb.size), tb] = 0.0
            loss, g_f, _ = target_loss_batch(self.mem_t, f_t, w, cfg.beta)
            _check_finite("L_tgt", loss, e, it)
            l_tgt.append(loss)
            self.embedder.sgd(self.opt_embedder.step(self.embedder.backward(g_f, cache_t)), lr)

            if gpp_active:
                graphs = build_graphs(self.mem_s, sb, f_s, self.k_source)
                labels = gpp_labels(self.labelled_ids[graphs.candidate_indices], self.labelled_ids[sb])
                loss = gpp_train_step(self.gpp, graphs, labels, self.gpp_lr(e), self.opt_gpp)
                _check_finite("L_gpp", loss, e, it)
                l_gpp.append(loss)

            self.mem_s.update_slots(sb, f_s, alpha)
            self.mem_t.update_slots(tb, f_t, alpha)

        nan = float("nan")
        metrics = self.evaluate() if evaluate else dict.fromkeys(("rank1", "rank5", "rank10", "rank20", "mAP"), nan)
        report = EpochReport(
            epoch=e + 1,
            L_src=float(np.mean(l_src)) if l_src else nan,
            L_tgt=float(np.mean(l_tgt)) if l_tgt else nan,
            L_gpp=float(np.mean(l_gpp)) if l_gpp else nan,
            rank1=metrics["rank1"], rank5=metrics["rank5"], rank10=metrics["rank10"],
            rank20=metrics["rank20"], mAP=metrics["mAP"],
            neigh_precision=float(np.mean([q.precision for q in quality])) if quality else nan,
            neigh_recall=float(np.mean([q.recall for q in quality])) if quality else nan,
            seconds=time.perf_counter() - t0,
        )
        self.reports.append(report)
        self.epoch += 1
        log.info("epoch %d  L_src %.4f  L_tgt %.4f  L_gpp %.4f  rank1 %.3f  mAP %.3f",
                 report.epoch, report.L_src, report.L_tgt, report.L_gpp, report.rank1, report.mAP)
        return report

    def _sample_views(self, rng, anchors):
        """Row of the input actually fed for each anchor: the real sample or,
        with camera invariance on, one drawn uniformly from it and its counterparts."""
        cfg = self.config
        real = self.target_real_rows[anchors]
        if not cfg.ci:
            return real
        out = np.empty_like(real)
        for r, i in enumerate(anchors):
            cps = self.counterparts[i]
            options = np.concatenate([[real[r]], cps]) if cfg.ei else cps
            if options.size == 0:
                options = np.array([real[r]])
            out[r] = options[rng.integers(options.size)]
        return out

    # ----------------------------------------------------------- checkpoint

    def _optimizers(self):
        return (("velocity.embedder", self.opt_embedder), ("velocity.classifier", self.opt_classifier),
                ("velocity.gpp", self.opt_gpp))

    def state_dict(self) -> dict:
        s = {f"embedder.{k}": v for k, v in self.embedder.params.items()}
        s.update({f"classifier.{k}": v for k, v in self.classifier.params.items()})
        for name, opt in self._optimizers():
            s.update({f"{name}.{k}": v for k, v in opt.state().items()})
        if self.adapt:
            s["memory.source"] = self.mem_s.slots
            s["memory.target"] = self.mem_t.slots
            if self.gpp is not None:
                s.update({f"gpp.{k}": v for k, v in self.gpp.state().items()})
        return {k: np.array(v, copy=True) for k, v in s.items()}

    def load_state_dict(self, state: dict, epoch: int, reports=()) -> None:
        def group(prefix):
            return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        self.embedder.set_params(group("embedder."))
        self.classifier.set_params(group("classifier."))
        for name, opt in self._optimizers():
            opt.load_state(group(f"{name}."))
        if self.adapt:
            self.mem_s.slots[...] = state["memory.source"]
            self.mem_t.slots[...] = state["memory.target"]
            if self.gpp is not None:
                self.gpp.load_state(group("gpp."))
        self.epoch = int(epoch)
        self.reports = list(reports)


@dataclass
class TrainResult:
    trainer: Trainer
    reports: list[EpochReport] = field(default_factory=list)

    @property
    def embedder(self) -> Embedder:
        return self.trainer.embedder

    @property
    def final(self) -> EpochReport | None:
        return self.reports[-1] if self.reports else None


def train(config: TrainConfig, source: DomainData, target_train: DomainData | None,
          target_test: DomainData, callback=None) -> TrainResult:
    trainer = Trainer(config, source, target_train, target_test)
    trainer.fit(callback=callback)
    return TrainResult(trainer, list(trainer.reports))


GRID_ROWS = (
    ("train_on_target", dict(mode="train_on_target")),
    ("source_only", dict(mode="source_only")),
    ("EI", dict(mode="adapt", ei=True, ci=False, ni=False)),
    ("EI+CI", dict(mode="adapt", ei=True, ci=True, ni=False)),
    ("EI+NI", dict(mode="adapt", ei=True, ci=False, ni=True)),
    ("EI+CI+NI", dict(mode="adapt", ei=True, ci=True, ni=True)),
)


def run_ablation_grid(base: TrainConfig, source: DomainData, target_train: DomainData,
                      target_test: DomainData, rows=GRID_ROWS, callback=None) -> dict:
    """Train every ablation row with identical seeds; returns name -> reports."""
    out = {}
    for name, changes in rows:
        cfg = base.replace(**changes)
        result = train(cfg, source, target_train, target_test)
        out[name] = result.reports
        if callback is not None:
            callback(name, result)
    return out


def summarize(reports: list[EpochReport]) -> dict:
    final = reports[-1]
    with_neigh = [r for r in reports if np.isfinite(r.neigh_precision)]
    return {
        "epochs": final.epoch,
        "final": final.as_dict(),
        "mean_neigh_precision": float(np.mean([r.neigh_precision for r in with_neigh])) if with_neigh else None,
        "mean_neigh_recall": float(np.mean([r.neigh_recall for r in with_neigh])) if with_neigh else None,
        "seconds": float(sum(r.seconds for r in reports)),
    }
