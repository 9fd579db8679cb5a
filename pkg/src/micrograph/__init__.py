"""Motif-driven self-supervised graph representation learning at desk scale."""

from .graph import Graph, GraphBatch, Subgraph, load_dataset, make_batches, write_dataset
from .trainer import TrainConfig, TrainState, extract_features, pretrain

__all__ = [
    "Graph", "GraphBatch", "Subgraph", "load_dataset", "make_batches", "write_dataset",
    "TrainConfig", "TrainState", "extract_features", "pretrain",
]

__version__ = "0.1.0"
