import json
from collections import Counter

import numpy as np
import pytest

from micrograph.graph import (
    DatasetError,
    Graph,
    GraphBatch,
    dumps_dataset,
    load_dataset,
    make_batches,
    write_dataset,
)
from micrograph.synth import SynthSpec, generate


def _write(tmp_path, records):
    p = tmp_path / "d.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in records))
    return p


def _triangle(gid=0):
    return {"id": gid, "x": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], "edges": [[0, 1], [1, 2], [2, 0]], "y": None}


def test_load_triangle(tmp_path):
    graphs = load_dataset(_write(tmp_path, [_triangle()]))
    assert len(graphs) == 1
    g = graphs[0]
    assert g.num_nodes == 3 and g.num_features == 2
    assert g.edges.tolist() == [[0, 1], [0, 2], [1, 2]]


def test_dangling_edge(tmp_path):
    rec = _triangle()
    rec["edges"] = [[0, 5]]
    with pytest.raises(DatasetError, match="dangling edge index"):
        load_dataset(_write(tmp_path, [rec]))


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(_triangle()) + "\n{not json\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(p)


def test_inconsistent_feature_dim(tmp_path):
    other = {"id": 1, "x": [[1.0, 0.0, 0.0]], "edges": [], "y": 0}
    with pytest.raises(DatasetError, match="inconsistent feature dimension"):
        load_dataset(_write(tmp_path, [_triangle(), other]))


@pytest.mark.parametrize("edges", [[[1, 1]], [[0, 1], [1, 0]]])
def test_self_loops_and_duplicates_rejected(edges):
    with pytest.raises(DatasetError):
        Graph.create(0, np.ones((2, 1)), edges)


def test_categorical_features_one_hot(tmp_path):
    recs = [{"id": 0, "x": [0, 2], "edges": [[0, 1]], "y": 1}, {"id": 1, "x": [1], "edges": [], "y": 0}]
    g0, g1 = load_dataset(_write(tmp_path, recs))
    assert g0.x.tolist() == [[1, 0, 0], [0, 0, 1]]
    assert g1.x.tolist() == [[0, 1, 0]]


def test_edge_attr_follows_canonical_order():
    g = Graph.create(0, np.ones((3, 1)), [[2, 1], [0, 1]], edge_attr=["b", "a"])
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    assert g.edge_attr == ("a", "b")


def test_synthetic_round_trip(tmp_path):
    graphs, _ = generate(SynthSpec())
    assert len(graphs) == 500
    p = tmp_path / "synth.jsonl"
    write_dataset(graphs, p)
    back = load_dataset(p)
    assert len(back) == len(graphs)
    assert all(a.same_structure(b) for a, b in zip(graphs, back))
    assert dumps_dataset(back) == p.read_text()


def test_round_trip_is_canonical(tmp_path):
    rec = {"id": 3, "x": [[0.5], [0.25], [1.0]], "edges": [[2, 0], [1, 0]], "y": 2}
    p = _write(tmp_path, [rec])
    once = dumps_dataset(load_dataset(p))
    q = tmp_path / "again.jsonl"
    q.write_text(once)
    assert dumps_dataset(load_dataset(q)) == once


def _tiny(n):
    return [Graph.create(i, np.ones((1 + i % 3, 2)), []) for i in range(n)]


def test_batch_sizes():
    batches = make_batches(_tiny(10), 4, seed=0)
    assert [len(b) for b in batches] == [4, 4, 2]


def test_batches_deterministic():
    a = make_batches(_tiny(10), 3, seed=5)
    b = make_batches(_tiny(10), 3, seed=5)
    assert [[g.id for g in x.graphs] for x in a] == [[g.id for g in x.graphs] for x in b]


def test_batches_seed_changes_order_not_content():
    data = _tiny(100)
    a = [g.id for b in make_batches(data, 7, seed=1) for g in b.graphs]
    b = [g.id for b in make_batches(data, 7, seed=2) for g in b.graphs]
    assert a != b
    assert Counter(a) == Counter(b) == Counter(range(100))


def test_batch_offsets():
    batch = GraphBatch(tuple(_tiny(5)))
    offs = batch.offsets
    assert all(x < y for x, y in zip(offs, offs[1:]))
    assert offs[-1] == sum(g.num_nodes for g in batch.graphs) == batch.x.shape[0]


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        make_batches([], 4, 0)


def test_propagation_rows_are_neighbourhood_means():
    g = Graph.create(0, np.eye(3), [[0, 1], [1, 2]])
    p = GraphBatch((g,)).propagation.toarray()
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(p[1], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(p[0], [0.5, 0.5, 0.0])
