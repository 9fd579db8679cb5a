"""CSV diagnostics of a trained model: embedding alignment, motif assignments and cluster sizes."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph
from .motif import graph_motif_assignment
from .trainer import TrainConfig, Segmented, segment_dataset

FILES = (
    "graph_subgraph_cosine.csv",
    "elementwise_products.csv",
    "subgraph_similarity.csv",
    "assignment_cosine.csv",
    "cluster_sizes.csv",
    "s_tilde.csv",
)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _write(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def cluster_sizes(s_tilde: np.ndarray) -> np.ndarray:
    """Subgraphs per motif slot by argmax over each S-tilde column."""
    k = s_tilde.shape[0]
    if s_tilde.shape[1] == 0:
        return np.zeros(k, dtype=np.int64)
    return np.bincount(s_tilde.argmax(axis=0), minlength=k)


def pairwise_cosines(vectors: np.ndarray) -> list:
    """(i, j, cosine) for every unordered pair i < j."""
    u = _unit_rows(np.asarray(vectors, dtype=np.float64))
    c = u @ u.T
    return [(i, j, float(c[i, j])) for i in range(len(u)) for j in range(i + 1, len(u))]


def diagnose(model, config: TrainConfig, dataset: Sequence[Graph], out_dir, num_graphs: int = 64,
             num_pairs: int = 5, seed: int = 0) -> dict:
    """Write the diagnostic CSVs for the first ``num_graphs`` graphs of ``dataset`` into ``out_dir``.

    Returns a mapping from file name to row count.
    """
    graphs = list(dataset[:num_graphs])
    seg: Segmented = segment_dataset(graphs, model, config, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pos = {g.id: i for i, g in enumerate(graphs)}
    parents = [pos[s.parent_id] for s in seg.subgraphs]
    h = _unit_rows(seg.graph_embeddings)
    e = _unit_rows(seg.embeddings)
    counts = {}

    cos = h @ e.T
    rows = [(graphs[i].id, j, seg.subgraphs[j].parent_id, int(parents[j] == i), float(cos[i, j]))
            for i in range(len(graphs)) for j in range(len(seg.subgraphs))]
    _write(out / FILES[0], ("graph_id", "subgraph", "subgraph_parent", "is_parent", "cosine"), rows)
    counts[FILES[0]] = len(rows)

    # for the first few subgraphs: the parent pair and the hardest negative
    rows = []
    for j in range(min(num_pairs, len(seg.subgraphs))):
        p = parents[j]
        others = [i for i in range(len(graphs)) if i != p]
        pairs = [(p, 1)]
        if others:
            pairs.append((max(others, key=lambda i: cos[i, j]), 0))
        for i, positive in pairs:
            prod = h[i] * e[j]
            rows += [(graphs[i].id, j, positive, d, float(prod[d])) for d in range(len(prod))]
    _write(out / FILES[1], ("graph_id", "subgraph", "is_parent", "dim", "product"), rows)
    counts[FILES[1]] = len(rows)

    rows = []
    for i, g in enumerate(graphs):
        members = [j for j, p in enumerate(parents) if p == i]
        for a, b, c in pairwise_cosines(e[members]) if members else []:
            rows.append((g.id, members[a], members[b], c))
    _write(out / FILES[2], ("graph_id", "subgraph_a", "subgraph_b", "cosine"), rows)
    counts[FILES[2]] = len(rows)

    assign = graph_motif_assignment(seg.s_tilde, parents, len(graphs))
    rows = [(graphs[i].id, graphs[j].id, c) for i, j, c in pairwise_cosines(assign)]
    _write(out / FILES[3], ("graph_a", "graph_b", "cosine"), rows)
    counts[FILES[3]] = len(rows)

    sizes = cluster_sizes(seg.s_tilde)
    _write(out / FILES[4], ("slot", "count"), enumerate(sizes.tolist()))
    counts[FILES[4]] = len(sizes)

    rows = [(j, seg.subgraphs[j].parent_id, k, float(seg.s_tilde[k, j]))
            for j in range(seg.s_tilde.shape[1]) for k in range(seg.s_tilde.shape[0])]
    _write(out / FILES[5], ("subgraph", "parent_id", "slot", "value"), rows)
    counts[FILES[5]] = len(rows)
    return counts
