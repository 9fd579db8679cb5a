"""Residual mean-aggregation message passing encoder.

Each layer computes ``relu(mean(h_nbrs + h_self) @ W + b)``; from the second
layer on the layer input is added back. Edge features are not used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import diffnum as dn
from .graph import GraphBatch


@dataclass
class EncoderParams:
    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("encoder needs at least one layer with matching biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input width does not chain")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != self.weights[i].shape[1]:
                raise ValueError("residual layers must be square")

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_tensors(self) -> dict:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"encoder.W{i}"] = w
            named[f"encoder.b{i}"] = b
        return named

    @classmethod
    def from_named(cls, named: dict) -> "EncoderParams":
        n = sum(1 for k in named if k.startswith("encoder.W"))
        return cls([dn.Tensor(named[f"encoder.W{i}"], requires_grad=True) for i in range(n)],
                   [dn.Tensor(named[f"encoder.b{i}"], requires_grad=True) for i in range(n)])


def init_encoder(in_dim: int, hidden_dim: int, layers: int, rng: np.random.Generator) -> EncoderParams:
    if layers < 1:
        raise ValueError("layers must be >= 1")
    weights, biases = [], []
    fan_in = in_dim
    for _ in range(layers):
        bound = np.sqrt(6.0 / (fan_in + hidden_dim))
        weights.append(dn.Tensor(rng.uniform(-bound, bound, size=(fan_in, hidden_dim)), requires_grad=True))
        biases.append(dn.Tensor(np.zeros(hidden_dim), requires_grad=True))
        fan_in = hidden_dim
    return EncoderParams(weights, biases)


def encode_nodes(batch: GraphBatch, params: EncoderParams) -> dn.Tensor:
    x = batch.x
    if x.shape[1] != params.in_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match encoder input {params.in_dim}")
    prop = batch.propagation
    h = dn.Tensor(x)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = dn.relu(dn.add(dn.matmul(dn.spmm(prop, h), w), b))
        h = dn.add(out, h) if i > 0 else out
    return h


def aggregate(nodes: dn.Tensor, index_set=None) -> dn.Tensor:
    """Mean of the selected node embeddings (all nodes by default)."""
    return dn.mean_rows(nodes, index_set)


def averaging_matrix(index_sets: Sequence[Sequence[int]], num_rows: int) -> sp.csr_matrix:
    """Sparse (len(index_sets) x num_rows) matrix whose row j averages ``index_sets[j]``."""
    rows, cols, vals = [], [], []
    for j, idx in enumerate(index_sets):
        if len(idx) == 0:
            raise ValueError("empty index set")
        rows += [j] * len(idx)
        cols += list(idx)
        vals += [1.0 / len(idx)] * len(idx)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(index_sets), num_rows))


def aggregate_many(nodes: dn.Tensor, index_sets: Sequence[Sequence[int]]) -> dn.Tensor:
    """Stack of :func:`aggregate` over several index sets, as one op."""
    return dn.spmm(averaging_matrix(index_sets, nodes.shape[0]), nodes)
