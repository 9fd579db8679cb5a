"""Independent reference implementations used by the tests."""

import itertools
import math

import numpy as np
from scipy import optimize


def sinkhorn_fixed_point(s, lam, tol=1e-12, warm_iters=2000):
    """Scalings u, v with diag(u) exp(lam S) diag(v) having row sums 1/K and column sums 1/N.

    Plain-domain fixed-point iterations, then scipy's hybrid root finder on the
    log-scaling equations until every marginal is exact to ``tol``.
    """
    s = np.asarray(s, dtype=np.float64)
    k, n = s.shape
    kern = np.exp(lam * (s - s.max()))
    r = np.full(k, 1.0 / k)
    c = np.full(n, 1.0 / n)
    u = np.ones(k)
    v = np.ones(n)
    for _ in range(warm_iters):
        u = r / (kern @ v)
        v = c / (kern.T @ u)

    logk = np.log(kern)

    def residual(z):
        a, b = z[:k], np.append(z[k:], 0.0)
        q = np.exp(a[:, None] + logk + b[None, :])
        return np.concatenate([k * q.sum(1) - 1.0, n * q.sum(0)[:-1] - 1.0])

    def jacobian(z):
        a, b = z[:k], np.append(z[k:], 0.0)
        q = np.exp(a[:, None] + logk + b[None, :])
        jac = np.zeros((k + n - 1, k + n - 1))
        jac[:k, :k] = np.diag(k * q.sum(1))
        jac[:k, k:] = k * q[:, :-1]
        jac[k:, :k] = n * q[:, :-1].T
        jac[k:, k:] = np.diag(n * q.sum(0)[:-1])
        return jac

    shift = np.log(v[-1])
    z0 = np.concatenate([np.log(u) + shift, np.log(v[:-1]) - shift])
    sol = optimize.root(residual, z0, jac=jacobian, method="lm", tol=1e-15)
    a, b = sol.x[:k], np.append(sol.x[k:], 0.0)
    q = np.exp(a[:, None] + logk + b[None, :])
    err = max(np.abs(q.sum(1) - r).max(), np.abs(q.sum(0) - c).max())
    if err > tol:
        raise RuntimeError(f"oracle failed to converge (marginal error {err:.1e})")
    return q


def best_bipartition_ncut(w, ncut):
    """Smallest normalized cut over all non-trivial bipartitions of a small graph."""
    n = len(w)
    best = math.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.any():
            best = min(best, ncut(w, labels))
    return best
