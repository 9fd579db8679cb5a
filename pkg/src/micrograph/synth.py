"""Synthetic motif-combination benchmark with ground truth, motif purity and a linear probe."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, Subgraph, is_connected

log = logging.getLogger(__name__)

NOISE = -1
NUM_COLORS = 3


@dataclass(frozen=True)
class MotifTemplate:
    id: int
    name: str
    edges: tuple
    colors: tuple

    def __post_init__(self):
        n = len(self.colors)
        if n < 4:
            raise ValueError(f"template {self.name}: needs at least 4 nodes")
        nbrs = [[] for _ in range(n)]
        for s, t in self.edges:
            nbrs[s].append(t)
            nbrs[t].append(s)
        if not is_connected(range(n), nbrs):
            raise ValueError(f"template {self.name}: not connected")

    @property
    def num_nodes(self) -> int:
        return len(self.colors)


def _cycle(n):
    return tuple((i, (i + 1) % n) for i in range(n))


def default_templates() -> list[MotifTemplate]:
    return [
        MotifTemplate(0, "cycle-4", _cycle(4), (0, 1, 0, 1)),
        MotifTemplate(1, "cycle-5", _cycle(5), (1, 1, 2, 1, 2)),
        MotifTemplate(2, "cycle-6", _cycle(6), (0, 2, 0, 2, 0, 2)),
        MotifTemplate(3, "star-5", tuple((0, i) for i in range(1, 6)), (2, 0, 0, 1, 0, 0)),
        MotifTemplate(4, "path-6", tuple((i, i + 1) for i in range(5)), (0, 1, 0, 1, 0, 1)),
        MotifTemplate(5, "clique-4", ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)), (2, 2, 1, 1)),
        MotifTemplate(6, "house", _cycle(5) + ((1, 4),), (1, 0, 2, 2, 0)),
        MotifTemplate(7, "binary-tree-7", ((0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)),
                      (1, 2, 2, 0, 0, 0, 0)),
    ]


@dataclass
class SynthSpec:
    templates: list = field(default_factory=default_templates)
    combinations: Optional[list] = None
    num_combinations: int = 10
    combination_sizes: tuple = (2, 3)
    graphs_per_combination: int = 50
    node_add_rate: float = 0.05
    node_delete_rate: float = 0.05
    edge_add_rate: float = 0.05
    edge_delete_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("node_add_rate", "node_delete_rate", "edge_add_rate", "edge_delete_rate"):
            rate = getattr(self, name)
            if not 0 <= rate <= 0.3:
                raise ValueError(f"{name}={rate} outside [0, 0.3]")
        if self.combinations is None:
            self.combinations = draw_combinations(len(self.templates), self.num_combinations,
                                                  self.combination_sizes, self.seed)
        ids = {t.id for t in self.templates}
        for combo in self.combinations:
            if not combo:
                raise ValueError("empty combination")
            if any(c not in ids for c in combo):
                raise ValueError(f"combination {combo} references an unknown template")
        if self.graphs_per_combination < 1:
            raise ValueError("graphs_per_combination must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "templates" in d:
            d["templates"] = [MotifTemplate(t["id"], t.get("name", str(t["id"])),
                                            tuple(map(tuple, t["edges"])), tuple(t["colors"]))
                              for t in d["templates"]]
        if "combination_sizes" in d:
            d["combination_sizes"] = tuple(d["combination_sizes"])
        if d.get("combinations") is not None:
            d["combinations"] = [list(c) for c in d["combinations"]]
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        text = Path(path).read_text(encoding="utf-8").strip()
        return cls.from_dict(json.loads(text) if text else {})


def draw_combinations(num_templates: int, count: int, sizes: Sequence[int], seed: int) -> list:
    """Distinct sorted template-id sets with sizes drawn from ``sizes``.

    Whenever some choice of sizes totals a multiple of ``num_templates``, only
    such totals are accepted and slots are filled from concatenated random
    permutations of the template ids, so every template is used equally often.
    """
    rng = np.random.default_rng([seed, 7])
    sizes = sorted(set(int(s) for s in sizes))
    totals = {0}
    for _ in range(count):
        totals = {t + s for t in totals for s in sizes}
    balanced = any(t % num_templates == 0 for t in totals)
    for _ in range(10000):
        drawn = [int(rng.choice(sizes)) for _ in range(count)]
        total = sum(drawn)
        if balanced and total % num_templates:
            continue
        reps = -(-total // num_templates)
        pool = np.concatenate([rng.permutation(num_templates) for _ in range(reps)])
        found, k = [], 0
        for size in drawn:
            combo = sorted(int(c) for c in pool[k:k + size])
            k += size
            if len(set(combo)) < size or combo in found:
                break
            found.append(combo)
        else:
            return found
    raise ValueError("cannot draw enough distinct combinations")


@dataclass
class GroundTruth:
    graph_id: int
    label: int
    node_templates: list

    def to_record(self) -> dict:
        return {"id": self.graph_id, "label": self.label, "node_templates": list(self.node_templates)}


def _onehot(colors) -> np.ndarray:
    return np.eye(NUM_COLORS)[np.asarray(colors, dtype=np.int64)]


class _Builder:
    """Mutable graph used while applying noise."""

    def __init__(self):
        self.colors: list = []
        self.origin: list = []
        self.edges: set = set()

    def add_node(self, color, origin) -> int:
        self.colors.append(int(color))
        self.origin.append(int(origin))
        return len(self.colors) - 1

    def add_edge(self, s, t):
        self.edges.add((min(s, t), max(s, t)))

    def alive(self):
        return [v for v, c in enumerate(self.colors) if c is not None]

    def neighbors(self):
        nb = [[] for _ in self.colors]
        for s, t in self.edges:
            nb[s].append(t)
            nb[t].append(s)
        return nb

    def connected(self) -> bool:
        alive = self.alive()
        return bool(alive) and is_connected(alive, self.neighbors())


def _noise(b: _Builder, spec: SynthSpec, rng: np.random.Generator, retries: int = 20) -> dict:
    stats = {"node_delete": 0, "template_nodes": len(b.alive())}

    k = rng.binomial(len(b.alive()), spec.node_delete_rate)
    for _ in range(k):
        for _ in range(retries):
            alive = b.alive()
            if len(alive) <= 1:
                break
            v = alive[int(rng.integers(len(alive)))]
            dropped = {e for e in b.edges if v in e}
            saved = b.colors[v]
            b.colors[v] = None
            b.edges -= dropped
            if b.connected():
                stats["node_delete"] += 1
                break
            b.colors[v] = saved
            b.edges |= dropped

    k = rng.binomial(len(b.edges), spec.edge_delete_rate)
    for _ in range(k):
        for _ in range(retries):
            edges = sorted(b.edges)
            if not edges:
                break
            e = edges[int(rng.integers(len(edges)))]
            b.edges.discard(e)
            if b.connected():
                break
            b.edges.add(e)

    k = rng.binomial(len(b.alive()), spec.node_add_rate)
    for _ in range(k):
        alive = b.alive()
        anchor = alive[int(rng.integers(len(alive)))]
        v = b.add_node(rng.integers(NUM_COLORS), NOISE)
        b.add_edge(anchor, v)

    k = rng.binomial(len(b.edges), spec.edge_add_rate)
    for _ in range(k):
        for _ in range(retries):
            alive = b.alive()
            if len(alive) < 2:
                break
            s, t = (alive[int(i)] for i in rng.choice(len(alive), size=2, replace=False))
            if (min(s, t), max(s, t)) not in b.edges:
                b.add_edge(s, t)
                break
    return stats


def generate_one(spec: SynthSpec, combo_index: int, rep: int, graph_id: int):
    """One noisy instance of combination ``combo_index``; returns (Graph, GroundTruth, noise stats)."""
    rng = np.random.default_rng([spec.seed, combo_index, rep])
    templates = {t.id: t for t in spec.templates}
    b = _Builder()
    blocks = []
    for tid in spec.combinations[combo_index]:
        t = templates[tid]
        base = len(b.colors)
        for c in t.colors:
            b.add_node(c, tid)
        for s, u in t.edges:
            b.add_edge(base + s, base + u)
        blocks.append(range(base, base + t.num_nodes))
    for prev, nxt in zip(blocks, blocks[1:]):
        b.add_edge(prev[int(rng.integers(len(prev)))], nxt[int(rng.integers(len(nxt)))])
    stats = _noise(b, spec, rng)

    alive = b.alive()
    remap = {v: i for i, v in enumerate(alive)}
    edges = sorted((remap[s], remap[t]) for s, t in b.edges)
    g = Graph.create(graph_id, _onehot([b.colors[v] for v in alive]), edges, combo_index)
    truth = GroundTruth(graph_id, combo_index, [b.origin[v] for v in alive])
    return g, truth, stats


def generate(spec: SynthSpec):
    """All graphs of ``spec`` in combination-major order, with matching ground truth."""
    graphs, truths = [], []
    gid = 0
    for ci in range(len(spec.combinations)):
        for rep in range(spec.graphs_per_combination):
            g, t, _ = generate_one(spec, ci, rep, gid)
            graphs.append(g)
            truths.append(t)
            gid += 1
    return graphs, truths


def write_truth(truths: Sequence[GroundTruth], path) -> None:
    Path(path).write_text("".join(json.dumps(t.to_record(), separators=(",", ":")) + "\n" for t in truths),
                          encoding="utf-8")


def load_truth(path) -> list[GroundTruth]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(GroundTruth(int(r["id"]), int(r["label"]), [int(v) for v in r["node_templates"]]))
    return out


# --- motif recovery --------------------------------------------------------

def subgraph_template(sub: Subgraph, truth: GroundTruth) -> Optional[int]:
    """Majority template among the subgraph's nodes (ties to the lower id); None when noise dominates."""
    origins = [truth.node_templates[v] for v in sub.node_indices]
    counts: dict = {}
    for o in origins:
        counts[o] = counts.get(o, 0) + 1
    noise = counts.pop(NOISE, 0)
    if not counts:
        return None
    best = min(counts, key=lambda t: (-counts[t], t))
    if noise > counts[best]:
        return None
    return best


def purity_from_counts(counts) -> float:
    """Size-weighted mean over slots of the dominant label fraction (rows = slots)."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("no labelled subgraphs")
    return float(counts.max(axis=1).sum() / total)


def slot_template_counts(slots: Sequence[int], labels: Sequence[Optional[int]], num_slots: int,
                         num_templates: int) -> np.ndarray:
    counts = np.zeros((num_slots, num_templates), dtype=np.int64)
    for k, lab in zip(slots, labels):
        if lab is not None:
            counts[k, lab] += 1
    return counts


def motif_purity(checkpoint, dataset: Sequence[Graph], truth: Sequence[GroundTruth], seed: int = 0,
                 num_templates: Optional[int] = None) -> float:
    """Segment every graph, assign subgraphs to their argmax motif slot and score slot purity."""
    from .trainer import load_state, segment_dataset, TrainState

    if isinstance(checkpoint, TrainState):
        raise TypeError("pass a (model, config) pair or a checkpoint path")
    if isinstance(checkpoint, tuple):
        model, config = checkpoint
    else:
        state, config = load_state(checkpoint)
        model = state.model
    seg = segment_dataset(dataset, model, config, seed=seed, sampler="motif")
    if not seg.subgraphs:
        raise ValueError("segmentation produced no subgraphs")
    by_id = {t.graph_id: t for t in truth}
    labels = [subgraph_template(s, by_id[s.parent_id]) for s in seg.subgraphs]
    nt = num_templates or 1 + max(max(t.node_templates) for t in truth)
    counts = slot_template_counts(seg.s.argmax(axis=0), labels, model.motifs.k, nt)
    return purity_from_counts(counts)


# --- linear probe ----------------------------------------------------------

@dataclass
class ProbeResult:
    mean: float
    std: float
    fold_accuracies: list


def _fit_softmax_regression(x, y, num_classes, epochs, lr):
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(features, labels, folds: int = 5, seed: int = 0, epochs: int = 200,
                 lr: float = 0.1) -> ProbeResult:
    """Stratified k-fold accuracy of full-batch gradient-descent softmax regression.

    Features are standardised with the training fold's statistics.
    """
    from sklearn.model_selection import StratifiedKFold

    x = np.asarray(features, dtype=np.float64)
    y_raw = np.asarray(labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    smallest = np.bincount(y).min()
    if smallest < folds:
        raise ValueError(f"a class has {smallest} members, fewer than {folds} folds")
    accs = []
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for train, test in splitter.split(x, y):
        mu = x[train].mean(axis=0)
        sd = x[train].std(axis=0)
        sd[sd < 1e-12] = 1.0
        xtr = (x[train] - mu) / sd
        xte = (x[test] - mu) / sd
        w, b = _fit_softmax_regression(xtr, y[train], len(classes), epochs, lr)
        accs.append(float(((xte @ w + b).argmax(axis=1) == y[test]).mean()))
    return ProbeResult(float(np.mean(accs)), float(np.std(accs)), accs)


def mean_feature_baseline(dataset: Sequence[Graph]) -> np.ndarray:
    return np.array([g.x.mean(axis=0) for g in dataset])
