"""Exemplar-memory invariance learning with graph-based positive prediction,
for unsupervised domain adaptation of retrieval embeddings on synthetic data."""
from .data import DomainData, DomainSpec, generate_domain, split_identities, with_counterparts
from .embedder import Embedder, IdentityClassifier
from .evaluation import evaluate_retrieval, mean_average_precision, neighbor_quality
from .gpp import GppNetwork, build_graph, build_graphs, gpp_loss, select_reliable
from .losses import NeighborSet, ei_ci_loss, source_ce_loss, target_loss
from .memory import AlphaSchedule, ExemplarMemory
from .numerics import InvalidParameterError, NumericalError, ShapeError
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AlphaSchedule", "DomainData", "DomainSpec", "Embedder", "ExemplarMemory", "GppNetwork",
    "IdentityClassifier", "InvalidParameterError", "NeighborSet", "NumericalError", "ShapeError",
    "TrainConfig", "Trainer", "build_graph", "build_graphs", "ei_ci_loss", "evaluate_retrieval",
    "generate_domain", "gpp_loss", "mean_average_precision", "neighbor_quality", "select_reliable",
    "source_ce_loss", "split_identities", "target_loss", "train", "with_counterparts",
]
