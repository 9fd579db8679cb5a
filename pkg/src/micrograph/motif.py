"""Motif table, motif-to-subgraph similarity, balanced Sinkhorn assignment and the motif loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import diffnum as dn

log = logging.getLogger(__name__)


@dataclass
class MotifTable:
    vectors: dn.Tensor

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def init_motifs(k: int, dim: int, rng: np.random.Generator) -> MotifTable:
    if k < 1:
        raise ValueError("need at least one motif slot")
    v = rng.standard_normal((k, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return MotifTable(dn.Tensor(v, requires_grad=True))


@dataclass
class SimilarityMatrix:
    s: dn.Tensor
    s_tilde: dn.Tensor
    tau: float


def cosine_matrix(a: dn.Tensor, b: dn.Tensor) -> dn.Tensor:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise dn.ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    return dn.matmul(dn.l2_normalize_rows(a), dn.transpose(dn.l2_normalize_rows(b)))


def motif_similarity(motifs: MotifTable, e: dn.Tensor, tau_g: float) -> SimilarityMatrix:
    s = cosine_matrix(motifs.vectors, e)
    return SimilarityMatrix(s, dn.col_softmax(s, tau_g), tau_g)


@dataclass
class AssignmentMatrix:
    q: np.ndarray
    log_u: np.ndarray
    log_v: np.ndarray
    lam: float
    iterations: int
    marginal_error: float
    converged: bool

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.log_u)

    @property
    def v(self) -> np.ndarray:
        return np.exp(self.log_v)


def marginal_error(q: np.ndarray) -> float:
    k, n = q.shape
    return float(max(np.abs(q.sum(axis=1) - 1.0 / k).max(), np.abs(q.sum(axis=0) - 1.0 / n).max()))


def sinkhorn_assign(s, lam: float = 20.0, max_iters: int = 300, tol: float = 1e-6,
                    polish_after: Optional[int] = 100) -> AssignmentMatrix:
    """Project exp(lam * S) onto uniform row (1/K) and column (1/N) marginals.

    Alternates row and column scalings, kept in log space so large ``lam``
    cannot overflow. Plain scaling converges slowly when ``lam`` is large, so
    if the marginals are still off after ``polish_after`` iterations the
    remaining budget goes to Newton steps on the same dual scalings (set
    ``polish_after=None`` to disable). Runs outside the tape. On
    non-convergence the last iterate is returned with ``converged=False``.
    """
    s = np.asarray(s.data if isinstance(s, dn.Tensor) else s, dtype=np.float64)
    if not lam > 0:
        raise ValueError("lam must be > 0")
    if not np.all(np.isfinite(s)):
        raise dn.NonFiniteError("non-finite similarity")
    k, n = s.shape
    logk = lam * s
    log_r = -np.log(k)
    log_c = -np.log(n)
    log_u = np.zeros(k)
    log_v = np.zeros(n)
    err = np.inf
    it = 0
    sinkhorn_budget = max_iters if polish_after is None else min(max_iters, polish_after)
    while it < sinkhorn_budget:
        it += 1
        log_u = log_r - logsumexp(logk + log_v[None, :], axis=1)
        log_v = log_c - logsumexp(logk + log_u[:, None], axis=0)
        err = marginal_error(np.exp(log_u[:, None] + logk + log_v[None, :]))
        if err < tol:
            break
    while err >= tol and it < max_iters:
        it += 1
        log_u, log_v = _newton_step(logk, log_u, log_v)
        err = marginal_error(np.exp(log_u[:, None] + logk + log_v[None, :]))
    q = np.exp(log_u[:, None] + logk + log_v[None, :])
    converged = bool(err < tol)
    if not converged:
        log.warning("sinkhorn did not converge in %d iterations (marginal error %.2e)", max_iters, err)
    return AssignmentMatrix(q, log_u, log_v, float(lam), it, float(err), converged)


def _dual_objective(logk, log_u, log_v) -> float:
    k, n = logk.shape
    with np.errstate(over="ignore"):
        return float(np.exp(logsumexp(log_u[:, None] + logk + log_v[None, :]))
                     - log_u.sum() / k - log_v.sum() / n)


def _newton_step(logk, log_u, log_v):
    """One damped Newton step on the convex dual of the scaling problem.

    The last column scaling is held fixed to remove the (u*c, v/c) gauge
    freedom, which leaves a positive definite Hessian.
    """
    k, n = logk.shape
    q = np.exp(log_u[:, None] + logk + log_v[None, :])
    rows, cols = q.sum(axis=1), q.sum(axis=0)
    grad = np.concatenate([rows - 1.0 / k, cols[:-1] - 1.0 / n])
    hess = np.zeros((k + n - 1, k + n - 1))
    hess[:k, :k] = np.diag(rows)
    hess[k:, k:] = np.diag(cols[:-1])
    hess[:k, k:] = q[:, :-1]
    hess[k:, :k] = q[:, :-1].T
    try:
        step = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        step = -grad
    du = step[:k]
    dv = np.append(step[k:], 0.0)
    f0 = _dual_objective(logk, log_u, log_v)
    slope = float(grad @ step)
    t = 1.0
    while t > 1e-10:
        nu, nv = log_u + t * du, log_v + t * dv
        if _dual_objective(logk, nu, nv) <= f0 + 1e-4 * t * slope:
            return nu, nv
        t *= 0.5
    return log_u, log_v


def motif_loss(q, s_tilde: dn.Tensor) -> dn.Tensor:
    """Cross-entropy of S-tilde against fixed soft targets, averaged over subgraphs.

    Columns of Q are rescaled to sum to one first, so each subgraph's target
    is a distribution over motif slots whatever the transport marginals.
    """
    q = np.asarray(q.q if isinstance(q, AssignmentMatrix) else q, dtype=np.float64)
    if q.shape != s_tilde.shape:
        raise dn.ShapeError(f"Q {q.shape} and S-tilde {s_tilde.shape} differ")
    n = q.shape[1]
    mass = q.sum(axis=0, keepdims=True)
    targets = q / np.where(mass > 0, mass, 1.0)
    return dn.scale(dn.trace_product(dn.log(s_tilde), targets), -1.0 / n)


def graph_motif_assignment(s_tilde, parent_index: Sequence[int], num_graphs: int) -> np.ndarray:
    """Per graph, the mean S-tilde column over its subgraphs; graphs without subgraphs get 1/K.

    ``parent_index[j]`` is the position (0..num_graphs-1) of subgraph j's parent.
    Returns a (num_graphs x K) array.
    """
    st = np.asarray(s_tilde.data if isinstance(s_tilde, dn.Tensor) else s_tilde)
    k = st.shape[0]
    out = np.zeros((num_graphs, k))
    counts = np.zeros(num_graphs)
    for j, p in enumerate(parent_index):
        out[p] += st[:, j]
        counts[p] += 1
    empty = counts == 0
    if empty.any():
        log.info("%d graphs without subgraphs get the uniform motif assignment", int(empty.sum()))
    out[~empty] /= counts[~empty, None]
    out[empty] = 1.0 / k
    return out
