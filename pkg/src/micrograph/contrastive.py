"""Graph-to-subgraph contrastive objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffnum as dn
from .motif import cosine_matrix

log = logging.getLogger(__name__)


@dataclass
class ContrastMatrix:
    w: dn.Tensor
    mask: np.ndarray
    tau: float
    normalize: str


def membership_mask(parent_index: Sequence[int], num_graphs: int) -> np.ndarray:
    parent_index = np.asarray(parent_index, dtype=np.int64)
    mask = np.zeros((num_graphs, len(parent_index)))
    mask[parent_index, np.arange(len(parent_index))] = 1.0
    return mask


def contrast_matrix(h: dn.Tensor, e: dn.Tensor, tau_g: float, parent_index: Sequence[int],
                    normalize: str = "graphs") -> ContrastMatrix:
    """Softmaxed graph-to-subgraph cosine similarities (M x N).

    ``normalize="graphs"`` makes every column a distribution over graphs, so
    each subgraph classifies its parent; ``"subgraphs"`` normalises each row
    over subgraphs instead.
    """
    if h.shape[0] < 1 or e.shape[0] < 1:
        raise ValueError("need at least one graph and one subgraph")
    if len(parent_index) != e.shape[0]:
        raise ValueError("one parent index per subgraph required")
    sim = cosine_matrix(h, e)
    if normalize == "graphs":
        w = dn.col_softmax(sim, tau_g)
    elif normalize == "subgraphs":
        w = dn.row_softmax(sim, tau_g)
    else:
        raise ValueError(f"unknown normalisation {normalize!r}")
    return ContrastMatrix(w, membership_mask(parent_index, h.shape[0]), tau_g, normalize)


def contrastive_loss(cm: ContrastMatrix) -> dn.Tensor:
    m = cm.mask.shape[0]
    lonely = int((cm.mask.sum(axis=1) == 0).sum())
    if lonely:
        log.debug("%d graphs contribute no positive pairs", lonely)
    return dn.scale(dn.trace_product(dn.log(cm.w), cm.mask), -1.0 / m)
