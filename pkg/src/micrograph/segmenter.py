"""Motif-guided subgraph segmentation and the heuristic baseline samplers."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffnum as dn
from .graph import Graph, Subgraph, connected_components

log = logging.getLogger(__name__)

MIN_SUBGRAPH_NODES = 4
WALK_LENGTH_RANGE = (10, 40)


@dataclass
class AffinityMatrix:
    values: dn.Tensor
    tau: float

    @property
    def n(self) -> int:
        return self.values.shape[0]


def affinity(nodes: dn.Tensor, tau_n: float) -> AffinityMatrix:
    """Cosine similarity between node embeddings, softmaxed along each row at temperature ``tau_n``."""
    if not tau_n > 0:
        raise ValueError("tau_n must be > 0")
    z = dn.l2_normalize_rows(nodes)
    return AffinityMatrix(dn.row_softmax(dn.matmul(z, dn.transpose(z)), tau_n), tau_n)


# --- eigensolver and k-means ----------------------------------------------

def _round_robin(n: int) -> list:
    """Pairings covering every (p, q) once per sweep, n/2 disjoint pairs per round."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.int64), np.array(qs, dtype=np.int64)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by Jacobi rotations.

    Rotations within a round act on disjoint index pairs, so each round is
    applied as a single orthogonal matrix. Returns eigenvalues ascending and
    the matching eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError("jacobi_eigh expects a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n > 1:
        rounds = _round_robin(n)
        scale = max(np.linalg.norm(a), np.finfo(float).tiny)
        offdiag = ~np.eye(n, dtype=bool)
        for _ in range(max_sweeps):
            if np.sqrt((a[offdiag] ** 2).sum()) <= tol * scale:
                break
            for p, q in rounds:
                apq = a[p, q]
                nz = apq != 0.0
                theta = np.where(nz, (a[q, q] - a[p, p]) / np.where(nz, 2.0 * apq, 1.0), 0.0)
                t = np.where(nz, np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)), 0.0)
                t = np.where(nz & (theta == 0.0), 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    # fix sign: largest-magnitude entry of each vector positive
    pivot = np.abs(v).argmax(axis=0)
    signs = np.sign(v[pivot, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, v * signs


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding. Labels are renumbered by first appearance."""
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    _, first = np.unique(labels, return_index=True)
    remap = {old: new for new, old in enumerate(labels[np.sort(first)])}
    return np.array([remap[c] for c in labels], dtype=np.int64)


def normalized_cut(weights: np.ndarray, labels: np.ndarray) -> float:
    """Sum over groups of cut(group, rest) / vol(group) on a symmetric weight matrix."""
    w = np.asarray(weights, dtype=np.float64)
    deg = w.sum(axis=1)
    total = 0.0
    for c in np.unique(labels):
        inside = labels == c
        vol = deg[inside].sum()
        cut = w[np.ix_(inside, ~inside)].sum()
        total += cut / vol if vol > 0 else 0.0
    return float(total)


def spectral_segment(a, num_segments: int, seed: int, restarts: int = 10) -> np.ndarray:
    """Node labels from normalised spectral clustering of the symmetrised affinity.

    k-means runs ``restarts`` times from one seeded generator; the labelling
    with the lowest within-cluster sum of squares wins (first on ties).
    """
    mat = a.values.data if isinstance(a, AffinityMatrix) else np.asarray(a, dtype=np.float64)
    n = mat.shape[0]
    if not 1 <= num_segments <= n:
        raise ValueError(f"num_segments={num_segments} must lie in [1, {n}]")
    if num_segments == 1:
        return np.zeros(n, dtype=np.int64)
    sym = 0.5 * (mat + mat.T)
    dinv = 1.0 / np.sqrt(sym.sum(axis=1))
    lap = np.eye(n) - dinv[:, None] * sym * dinv[None, :]
    _, vecs = jacobi_eigh(lap)
    emb = vecs[:, :num_segments]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    rng = np.random.default_rng(seed)
    best, best_cost = None, np.inf
    for _ in range(max(1, restarts)):
        labels = kmeans(emb, num_segments, rng)
        cost = _inertia(emb, labels)
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


def _inertia(points: np.ndarray, labels: np.ndarray) -> float:
    return float(sum(((points[labels == c] - points[labels == c].mean(axis=0)) ** 2).sum()
                     for c in np.unique(labels)))


def default_num_segments(n: int, max_segments: int = 10) -> int:
    return min(n, max(2, min(max_segments, math.ceil(n / 6))))


def extract_subgraphs(graph: Graph, labels, min_size: int = MIN_SUBGRAPH_NODES) -> list[Subgraph]:
    """Connected components (within each label group) of at least ``min_size`` nodes."""
    labels = np.asarray(labels)
    if labels.shape != (graph.num_nodes,):
        raise ValueError("one label per node required")
    found = []
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        for comp in connected_components(members, graph.neighbors):
            if len(comp) >= min_size:
                found.append(Subgraph(graph.id, tuple(comp), int(lab)))
    found.sort(key=lambda s: s.node_indices[0])
    return found


# --- segmenter loss --------------------------------------------------------

def topk_threshold(s: np.ndarray, top_fraction: float) -> np.ndarray:
    """Per motif, the similarity of the ceil(top_fraction * N)-th most similar subgraph."""
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must lie in (0, 1]")
    s = np.asarray(s)
    rank = max(1, math.ceil(top_fraction * s.shape[1] - 1e-12))
    return -np.sort(-s, axis=1)[:, rank - 1]


def passing_subgraphs(s: np.ndarray, top_fraction: float) -> np.ndarray:
    eta = topk_threshold(s, top_fraction)
    return (np.asarray(s) > eta[:, None]).any(axis=0)


def segmenter_loss(
    affinities: Mapping[int, AffinityMatrix],
    subgraphs: Sequence[Subgraph],
    s: np.ndarray,
    top_fraction: float = 0.1,
) -> dn.Tensor:
    """Negative within-subgraph affinity mass over subgraphs close to some motif, divided by N.

    ``affinities`` maps parent graph id to that graph's affinity; thresholds and
    the pass indicator are constants, gradient flows through the affinities only.
    """
    n_sub = len(subgraphs)
    if n_sub == 0:
        log.warning("segmenter loss on an empty subgraph set")
        return dn.Tensor(0.0)
    s = np.asarray(s.data if isinstance(s, dn.Tensor) else s)
    if s.shape[1] != n_sub:
        raise ValueError("similarity matrix does not match the subgraph list")
    passing = passing_subgraphs(s, top_fraction)
    masks: dict = {}
    for sub, ok in zip(subgraphs, passing):
        if not ok:
            continue
        aff = affinities[sub.parent_id]
        mask = masks.setdefault(sub.parent_id, np.zeros((aff.n, aff.n)))
        idx = np.array(sub.node_indices)
        mask[np.ix_(idx, idx)] += 1.0
        mask[idx, idx] -= 1.0
    if not masks:
        return dn.Tensor(0.0)
    total = None
    for pid in sorted(masks):
        term = dn.trace_product(affinities[pid].values, masks[pid])
        total = term if total is None else dn.add(total, term)
    return dn.scale(total, -1.0 / n_sub)


# --- heuristic samplers ----------------------------------------------------

def draw_walk_length(rng: np.random.Generator) -> int:
    lo, hi = WALK_LENGTH_RANGE
    return int(rng.integers(lo, hi + 1))


def _walk(graph: Graph, rng: np.random.Generator) -> set:
    length = draw_walk_length(rng)
    v = int(rng.integers(graph.num_nodes))
    visited = {v}
    nbrs = graph.neighbors
    for _ in range(length):
        if not nbrs[v]:
            break
        v = nbrs[v][int(rng.integers(len(nbrs[v])))]
        visited.add(v)
    return visited


def _k_hop(graph: Graph, rng: np.random.Generator) -> set:
    k = int(rng.integers(1, 3))
    start = int(rng.integers(graph.num_nodes))
    return k_hop_ball(graph, start, k)


def k_hop_ball(graph: Graph, start: int, k: int) -> set:
    dist = {start: 0}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        if dist[v] == k:
            continue
        for u in graph.neighbors[v]:
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return set(dist)


def _heuristic(graph: Graph, seed, num_samples: Optional[int], draw) -> list[Subgraph]:
    rng = np.random.default_rng(seed)
    count = default_num_segments(graph.num_nodes) if num_samples is None else num_samples
    out = []
    for i in range(count):
        nodes = draw(graph, rng)
        if len(nodes) >= MIN_SUBGRAPH_NODES:
            out.append(Subgraph(graph.id, tuple(nodes), i))
    return out


def random_walk_sample(graph: Graph, seed, num_samples: Optional[int] = None) -> list[Subgraph]:
    """Node sets visited by uniform random walks of length drawn from [10, 40]."""
    return _heuristic(graph, seed, num_samples, _walk)


def k_hop_sample(graph: Graph, seed, num_samples: Optional[int] = None) -> list[Subgraph]:
    """Balls of radius 1 or 2 (equal odds) around uniformly drawn seed nodes."""
    return _heuristic(graph, seed, num_samples, _k_hop)


SAMPLERS = {"rw": random_walk_sample, "khop": k_hop_sample}
