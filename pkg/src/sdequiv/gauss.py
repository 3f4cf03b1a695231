"""Gaussian primitives: score, quadratic expectations, quadrature, Stein checks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .core import GaussianPolicy

MAX_QUAD_DIM = 3
DEFAULT_ORDER = 10


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss-Hermite rule for ``d ~ N(0, Sigma)``.

    ``standard`` holds the nodes for ``N(0, I)``; ``nodes`` are those nodes
    mapped through the Cholesky factor of ``Sigma``. Weights sum to one.
    """

    dim: int
    order: int
    nodes: np.ndarray
    weights: np.ndarray
    standard: np.ndarray

    def expect(self, g: Callable[[np.ndarray], np.ndarray], mean=None) -> np.ndarray:
        """E[g(mean + d)] for a batch map ``g: (K, dim) -> (K, ...)``."""
        y = self.nodes if mean is None else np.asarray(mean) + self.nodes
        return np.tensordot(self.weights, np.asarray(g(y)), axes=(0, 0))


@lru_cache(maxsize=64)
def _standard_rule(dim: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    zs = np.meshgrid(*([z] * dim), indexing="ij")
    ws = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([a.ravel() for a in zs], axis=1)
    weights = np.ones(nodes.shape[0])
    for a in ws:
        weights = weights * a.ravel()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def make_quadrature(dim: int, order: int = DEFAULT_ORDER, Sigma=None) -> QuadratureRule:
    """Gauss-Hermite rule with ``order`` nodes per axis for ``N(0, Sigma)``."""
    if not 1 <= dim <= MAX_QUAD_DIM:
        raise ValueError(f"quadrature dimension must be in [1, {MAX_QUAD_DIM}], got {dim}")
    if order < 2:
        raise ValueError("quadrature order must be at least 2")
    z, w = _standard_rule(dim, order)
    if Sigma is None:
        L = np.eye(dim)
    else:
        L = np.linalg.cholesky(np.atleast_2d(np.asarray(Sigma, dtype=float)))
    return QuadratureRule(dim, order, z @ L.T, w, z)


def score(policy: GaussianPolicy, x, u, Sigma) -> np.ndarray:
    """Gradient of ``ln N(u; mu(x, theta), Sigma)`` with respect to theta.

    Accepts single vectors or batches; ``Sigma`` may be ``(n_u, n_u)`` or a
    per-sample stack ``(N, n_u, n_u)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    Sigma = np.asarray(Sigma, dtype=float)
    resid = U - policy.mean(X)
    try:
        if Sigma.ndim == 3:
            w = np.linalg.solve(Sigma, resid[..., None])[..., 0]
        else:
            w = np.linalg.solve(np.atleast_2d(Sigma), resid.T).T
    except np.linalg.LinAlgError:
        raise ValueError("singular Sigma: the stochastic policy is ill-posed") from None
    s = np.einsum("nij,nj->ni", policy.jacobian(X), w)
    return s[0] if single else s


def expected_quadratic_cost(q, r, R, mu, Sigma) -> float:
    """E[q + u.r + u'R u] for ``u ~ N(mu, Sigma)``: ``l(mu) + tr(R Sigma)``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.max(np.abs(R - R.T), initial=0.0) > 1e-12:
        raise ValueError("R must be symmetric")
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    return float(q + mu @ r + mu @ R @ mu + np.trace(R @ Sigma))


def central_gradient(g: Callable[[np.ndarray], np.ndarray], Y: np.ndarray) -> np.ndarray:
    """Central-difference gradient of a batch scalar map, step 1e-5*(1+|y|)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    G = np.empty_like(Y)
    for j in range(Y.shape[1]):
        h = 1e-5 * (1.0 + np.abs(Y[:, j]))
        Yp = Y.copy()
        Ym = Y.copy()
        Yp[:, j] += h
        Ym[:, j] -= h
        G[:, j] = (np.asarray(g(Yp)) - np.asarray(g(Ym))) / (2.0 * h)
    return G


def stein_residual(g, mu, Sigma, rule: Optional[QuadratureRule] = None) -> float:
    """Norm of ``E[(y - mu) g(y)] - Sigma E[grad g(y)]`` for ``y ~ N(mu, Sigma)``.

    Both expectations use the quadrature rule; the gradient uses central
    differences. ``g`` maps a ``(K, m)`` batch to ``(K,)``.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if rule is None:
        rule = make_quadrature(mu.size, DEFAULT_ORDER, Sigma)
    elif not np.allclose(rule.nodes, rule.standard @ np.linalg.cholesky(Sigma).T):
        rule = make_quadrature(rule.dim, rule.order, Sigma)
    Y = mu + rule.nodes
    gy = np.asarray(g(Y), dtype=float).reshape(-1)
    # centring g leaves E[(y - mu) g] unchanged and makes constants exact
    gy = gy - gy[np.argmin(np.sum(rule.standard**2, axis=1))]
    lhs = rule.weights @ (rule.nodes * gy[:, None])
    rhs = Sigma @ (rule.weights @ central_gradient(g, Y))
    return float(np.linalg.norm(lhs - rhs))
