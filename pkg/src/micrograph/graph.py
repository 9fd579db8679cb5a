"""Graph data model, JSONL dataset IO and deterministic batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected graph with dense node features.

    Edges are stored canonically: each pair as (min, max), sorted
    lexicographically. Construct through :meth:`create` to get validation and
    canonicalisation; the raw constructor assumes both already happened.
    """

    id: int
    x: np.ndarray
    edges: np.ndarray
    y: Optional[int] = None
    edge_attr: Optional[tuple] = None

    @classmethod
    def create(cls, id: int, x, edges, y: Optional[int] = None, edge_attr=None) -> "Graph":
        x = np.array(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DatasetError(f"graph {id}: node features must be a non-empty n x F matrix")
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"graph {id}: non-finite node feature")
        n = x.shape[0]
        pairs = []
        attrs = []
        seen = set()
        for k, e in enumerate(edges):
            if len(e) != 2:
                raise DatasetError(f"graph {id}: edge {e!r} is not a pair")
            s, t = int(e[0]), int(e[1])
            if not (0 <= s < n and 0 <= t < n):
                raise DatasetError(f"graph {id}: dangling edge index ({s}, {t}) with {n} nodes")
            if s == t:
                raise DatasetError(f"graph {id}: self-loop on node {s}")
            key = (min(s, t), max(s, t))
            if key in seen:
                raise DatasetError(f"graph {id}: duplicate edge {key}")
            seen.add(key)
            pairs.append(key)
            if edge_attr is not None:
                attrs.append(edge_attr[k])
        order = sorted(range(len(pairs)), key=lambda k: pairs[k])
        arr = np.array([pairs[k] for k in order], dtype=np.int64).reshape(-1, 2)
        if edge_attr is not None:
            if len(edge_attr) != len(pairs):
                raise DatasetError(f"graph {id}: edge_attr length does not match edges")
            attrs = tuple(attrs[k] for k in order)
        x.setflags(write=False)
        arr.setflags(write=False)
        return cls(int(id), x, arr, None if y is None else int(y), attrs if edge_attr is not None else None)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    @cached_property
    def neighbors(self) -> tuple:
        adj = [[] for _ in range(self.num_nodes)]
        for s, t in self.edges:
            adj[s].append(int(t))
            adj[t].append(int(s))
        return tuple(tuple(sorted(a)) for a in adj)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "x": self.x.tolist(),
            "edges": self.edges.tolist(),
            "y": self.y,
        }
        if self.edge_attr is not None:
            rec["edge_attr"] = list(self.edge_attr)
        return rec

    def same_structure(self, other: "Graph") -> bool:
        return (
            self.id == other.id
            and self.y == other.y
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.edges, other.edges)
        )


@dataclass(frozen=True)
class Subgraph:
    parent_id: int
    node_indices: tuple
    segment_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "node_indices", tuple(sorted(int(i) for i in self.node_indices)))

    def __len__(self) -> int:
        return len(self.node_indices)


def connected_components(nodes: Iterable[int], neighbors: Sequence[Sequence[int]]) -> list[list[int]]:
    """Components of the subgraph induced by ``nodes``, each sorted, ordered by smallest member."""
    remaining = set(int(v) for v in nodes)
    comps = []
    for start in sorted(remaining):
        if start not in remaining:
            continue
        remaining.discard(start)
        comp = [start]
        stack = [start]
        while stack:
            v = stack.pop()
            for u in neighbors[v]:
                if u in remaining:
                    remaining.discard(u)
                    comp.append(u)
                    stack.append(u)
        comps.append(sorted(comp))
    return comps


def is_connected(nodes: Iterable[int], neighbors: Sequence[Sequence[int]]) -> bool:
    return len(connected_components(nodes, neighbors)) == 1


@dataclass(frozen=True, eq=False)
class GraphBatch:
    graphs: tuple
    offsets: tuple = field(init=False)

    def __post_init__(self):
        graphs = tuple(self.graphs)
        if not graphs:
            raise ValueError("empty batch")
        object.__setattr__(self, "graphs", graphs)
        offs = [0]
        for g in graphs:
            offs.append(offs[-1] + g.num_nodes)
        object.__setattr__(self, "offsets", tuple(offs))

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return self.offsets[-1]

    def node_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    @cached_property
    def x(self) -> np.ndarray:
        return np.concatenate([g.x for g in self.graphs], axis=0)

    @cached_property
    def propagation(self) -> sp.csr_matrix:
        """Row-normalised (A + I) over the packed node table."""
        rows, cols = [], []
        for g, off in zip(self.graphs, self.offsets):
            if len(g.edges):
                s = g.edges[:, 0] + off
                t = g.edges[:, 1] + off
                rows += [s, t]
                cols += [t, s]
        idx = np.arange(self.num_nodes)
        rows.append(idx)
        cols.append(idx)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(self.num_nodes, self.num_nodes))
        deg = np.asarray(adj.sum(axis=1)).ravel()
        adj = sp.diags(1.0 / deg) @ adj
        return sp.csr_matrix(adj)


def _parse_record(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: malformed record ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DatasetError(f"line {lineno}: malformed record (expected an object)")
    for key in ("id", "x", "edges"):
        if key not in rec:
            raise DatasetError(f"line {lineno}: malformed record (missing {key!r})")
    return rec


def load_dataset(path) -> list[Graph]:
    """Read a JSONL dataset.

    A record whose ``x`` is a flat list of integers is treated as categorical
    and one-hot encoded with a width shared by every categorical record.
    """
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append((lineno, _parse_record(line, lineno)))
    if not records:
        raise DatasetError(f"{path}: no graphs")

    categorical = [
        isinstance(r["x"], list) and r["x"] and all(isinstance(v, int) for v in r["x"])
        for _, r in records
    ]
    width = None
    if any(categorical):
        width = 1 + max(max(r["x"]) for (_, r), c in zip(records, categorical) if c)

    graphs = []
    nfeat = None
    for (lineno, rec), cat in zip(records, categorical):
        x = rec["x"]
        if cat:
            if min(x) < 0:
                raise DatasetError(f"line {lineno}: negative category")
            x = np.eye(width)[x]
        try:
            g = Graph.create(rec["id"], x, rec["edges"], rec.get("y"), rec.get("edge_attr"))
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
        if nfeat is None:
            nfeat = g.num_features
        elif g.num_features != nfeat:
            raise DatasetError(
                f"line {lineno}: inconsistent feature dimension {g.num_features} (expected {nfeat})"
            )
        graphs.append(g)
    return graphs


def dumps_dataset(graphs: Iterable[Graph]) -> str:
    return "".join(json.dumps(g.to_record(), separators=(",", ":")) + "\n" for g in graphs)


def write_dataset(graphs: Iterable[Graph], path) -> None:
    Path(path).write_text(dumps_dataset(graphs), encoding="utf-8")


def make_batches(dataset: Sequence[Graph], batch_size: int, seed: int) -> list[GraphBatch]:
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [
        GraphBatch(tuple(dataset[i] for i in order[k:k + batch_size]))
        for k in range(0, len(order), batch_size)
    ]
