import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from micrograph import diffnum as dn
from micrograph.motif import (
    MotifTable,
    cosine_matrix,
    graph_motif_assignment,
    init_motifs,
    marginal_error,
    motif_loss,
    motif_similarity,
    sinkhorn_assign,
)
from oracles import sinkhorn_fixed_point


def _table(v):
    return MotifTable(dn.Tensor(v, requires_grad=True))


def test_self_cosine_and_orthogonal():
    sim = motif_similarity(_table([[1.0, 2.0], [2.0, -1.0]]), dn.Tensor([[1.0, 2.0]]), 1.0)
    np.testing.assert_allclose(sim.s.data, [[1.0], [0.0]], atol=1e-15)


def test_zero_norm_cosine_is_zero():
    assert cosine_matrix(dn.Tensor([[0.0, 0.0]]), dn.Tensor([[1.0, 1.0]])).data.tolist() == [[0.0]]


def test_column_softmax_example():
    sim = motif_similarity(_table([[1.0, 0.0], [0.0, 1.0]]), dn.Tensor([[3.0, 0.0]]), 1.0)
    np.testing.assert_allclose(sim.s_tilde.data[:, 0], [0.7311, 0.2689], atol=1e-4)


def test_init_motifs_unit_rows():
    m = init_motifs(4, 6, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(m.vectors.data, axis=1), 1.0)
    with pytest.raises(ValueError):
        init_motifs(0, 3, np.random.default_rng(0))


def test_sinkhorn_zero_similarity_uniform():
    q = sinkhorn_assign(np.zeros((2, 4))).q
    np.testing.assert_allclose(q, 1 / 8, atol=1e-12)


def test_sinkhorn_single_row():
    q = sinkhorn_assign(np.array([[0.3, -0.9, 0.5]])).q
    np.testing.assert_allclose(q, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)


def test_sinkhorn_identity_lambda_10():
    q = sinkhorn_assign(np.eye(2), lam=10).q
    diag = math.exp(10) / (2 * (math.exp(10) + 1))
    np.testing.assert_allclose(q, [[diag, 0.5 - diag], [0.5 - diag, diag]], atol=1e-10)
    assert q[0, 0] == pytest.approx(0.4999773, abs=1e-7)
    assert q[0, 1] == pytest.approx(0.0000227, abs=1e-7)
    np.testing.assert_allclose(q, sinkhorn_fixed_point(np.eye(2), 10), atol=1e-12)


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(ValueError):
        sinkhorn_assign(np.zeros((2, 2)), lam=0)
    with pytest.raises(dn.NonFiniteError):
        sinkhorn_assign(np.array([[np.inf]]))


def test_sinkhorn_flags_nonconvergence():
    s = np.random.default_rng(0).uniform(-1, 1, (6, 7))
    res = sinkhorn_assign(s, lam=50, max_iters=2, polish_after=None)
    assert not res.converged and res.iterations == 2
    assert res.marginal_error == pytest.approx(marginal_error(res.q))


def test_sinkhorn_scalings_reproduce_q():
    s = np.random.default_rng(1).uniform(-1, 1, (3, 5))
    res = sinkhorn_assign(s, lam=5)
    np.testing.assert_allclose(np.diag(res.u) @ np.exp(5 * s) @ np.diag(res.v), res.q, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1, 1)),
       st.sampled_from([1.0, 10.0, 50.0]))
def test_sinkhorn_marginals(s, lam):
    res = sinkhorn_assign(s, lam)
    assert res.converged
    k, n = s.shape
    np.testing.assert_allclose(res.q.sum(axis=1), 1 / k, atol=1e-6)
    np.testing.assert_allclose(res.q.sum(axis=0), 1 / n, atol=1e-6)
    assert (res.q >= 0).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1, 1)), st.floats(-3, 3))
def test_sinkhorn_shift_invariance(s, c):
    a = sinkhorn_assign(s, 10, tol=1e-12, max_iters=1000).q
    b = sinkhorn_assign(s + c, 10, tol=1e-12, max_iters=1000).q
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_sinkhorn_large_lambda_permutation():
    s = np.array([[0.1, 0.9, 0.2], [0.8, 0.0, 0.3], [0.2, 0.1, 0.7]])
    q = sinkhorn_assign(s, lam=200).q
    perm = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]]) / 3
    np.testing.assert_allclose(q, perm, atol=1e-3)


def test_sinkhorn_matches_oracle():
    rng = np.random.default_rng(3)
    for lam in (1, 10, 50):
        s = rng.uniform(-1, 1, (5, 7))
        np.testing.assert_allclose(sinkhorn_assign(s, lam, tol=1e-10).q, sinkhorn_fixed_point(s, lam), atol=1e-9)


def test_sinkhorn_deterministic():
    s = np.random.default_rng(9).uniform(-1, 1, (8, 30))
    assert np.array_equal(sinkhorn_assign(s).q, sinkhorn_assign(s).q)


def test_motif_loss_example():
    st_ = dn.Tensor([[0.7311], [0.2689]])
    loss = motif_loss(np.array([[0.5], [0.5]]), st_)
    assert loss.item() == pytest.approx(-(0.5 * math.log(0.7311) + 0.5 * math.log(0.2689)), rel=1e-12)
    assert loss.item() == pytest.approx(0.8133, abs=1e-4)


def test_motif_loss_single_motif_is_zero():
    sim = motif_similarity(_table([[1.0, 0.0]]), dn.Tensor([[1.0, 2.0], [0.0, 1.0]]), 0.2)
    q = sinkhorn_assign(sim.s)
    assert motif_loss(q, sim.s_tilde).item() == 0.0


def test_motif_loss_hard_labels():
    st_ = dn.Tensor([[0.2, 0.6], [0.8, 0.4]])
    q = np.array([[0.0, 0.5], [0.5, 0.0]])
    # columns are renormalised: targets one-hot on rows 1 and 0
    assert motif_loss(q, st_).item() == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2)


def test_motif_loss_shape_mismatch():
    with pytest.raises(dn.ShapeError):
        motif_loss(np.ones((2, 3)), dn.Tensor(np.full((3, 2), 0.5)))


def test_motif_loss_minimised_at_normalised_q():
    rng = np.random.default_rng(0)
    q = sinkhorn_assign(rng.uniform(-1, 1, (3, 4)), lam=3).q
    z = dn.Tensor(np.zeros((3, 4)), requires_grad=True)
    for _ in range(3000):
        tape = dn.Tape()
        with dn.use_tape(tape):
            dn.backward(motif_loss(q, dn.col_softmax(z, 1.0)), tape)
        z.data = z.data - 2.0 * z.grad
        z.grad = None
    with dn.no_grad():
        st_ = dn.col_softmax(z, 1.0).data
    np.testing.assert_allclose(st_, q / q.sum(axis=0), atol=1e-4)


def test_motif_gradient_check():
    rng = np.random.default_rng(5)
    m = _table(rng.normal(size=(3, 4)))
    e = dn.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    q = sinkhorn_assign(cosine_matrix(m.vectors, e).data).q

    def loss():
        return motif_loss(q, motif_similarity(m, e, 0.2).s_tilde)

    assert dn.gradient_check(loss, [m.vectors, e], h=1e-4) < 1e-4


def test_graph_motif_assignment():
    st_ = np.array([[0.2, 0.6, 0.5], [0.8, 0.4, 0.5]])
    a = graph_motif_assignment(st_, [0, 0, 2], 3)
    np.testing.assert_allclose(a[0], [0.4, 0.6])
    np.testing.assert_allclose(a[1], [0.5, 0.5])
    np.testing.assert_allclose(a[2], [0.5, 0.5])
    np.testing.assert_allclose(graph_motif_assignment(st_, [1, 0, 0], 2)[1], [0.2, 0.8])
