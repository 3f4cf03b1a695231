"""Turn a stochastic-policy MDP into the equivalent deterministic-policy MDP.

The caller declares a statistic ``eta = mu(x, theta)`` of the policy and a
conditional family ``pi(u | eta)``. The deterministic MDP acts with ``eta``
directly; its cost and transition kernel are the family averages of the
stochastic ones. ``verify_*`` certify the construction numerically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate

from .core import GaussianPolicy, QGMDP, _batch_matrix
from .exact import GridModel, solve_bellman
from .gauss import DEFAULT_ORDER, make_quadrature

SUPPORTED_FAMILIES = ("GaussianFamily", "MixtureFamily", "DiagGaussianFamily")
NORMALIZATION_TOL = 1e-9
QUAD_SPAN = 12.0  # reference integrals cover mean +- 12 std


def _check_spd(S: np.ndarray, what: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or np.max(np.abs(S - S.T)) > 1e-12:
        raise ValueError(f"{what} must be a symmetric square matrix")
    if np.min(np.linalg.eigvalsh(S)) <= 0:
        raise ValueError(f"{what} must be positive definite")
    return S


def _gauss_pdf(U: np.ndarray, mean: np.ndarray, S: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, (U - mean).T).T
    n = U.shape[-1]
    return np.exp(-0.5 * np.sum(z**2, axis=-1)) / ((2 * np.pi) ** (n / 2) * np.prod(np.diag(L)))


@dataclass(frozen=True)
class QuadraticCost:
    """``l(x, u) = q(x) + u.r(x) + u'R(x)u``; ``R`` a matrix or a batch map."""

    q: Callable[[np.ndarray], np.ndarray]
    r: Callable[[np.ndarray], np.ndarray]
    R: Union[np.ndarray, Callable]
    n_u: int

    def R_at(self, X: np.ndarray) -> np.ndarray:
        return _batch_matrix(self.R, X, self.n_u)

    def __call__(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return (self.q(X) + np.einsum("ni,ni->n", U, self.r(X))
                + np.einsum("ni,nij,nj->n", U, self.R_at(X), U))

    def expected(self, X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
        """Closed-form average over ``u ~ N(mean, cov)``; ``cov`` is (n_u, n_u) or (N, n_u, n_u)."""
        cov = np.broadcast_to(cov, (X.shape[0], self.n_u, self.n_u))
        return self(X, mean) + np.einsum("nij,nji->n", self.R_at(X), cov)


# ---------------------------------------------------------------------------
# conditional families pi(u | eta)


class GaussianFamily:
    """``u ~ N(eta, Sigma)`` with a fixed covariance."""

    def __init__(self, Sigma):
        self.Sigma = _check_spd(Sigma, "Sigma")
        self.n_u = self.Sigma.shape[0]
        self.n_eta = self.n_u
        self._L = np.linalg.cholesky(self.Sigma)

    def atoms(self, Eta: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
        rule = make_quadrature(self.n_u, order)
        U = Eta[:, None, :] + (rule.standard @ self._L.T)[None]
        return U, np.broadcast_to(rule.weights, U.shape[:2])

    def density(self, U: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return _gauss_pdf(U, eta, self.Sigma)

    def expected_quadratic(self, cost: QuadraticCost, X, Eta) -> np.ndarray:
        return cost.expected(X, Eta, self.Sigma)

    def box(self, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
        s = np.sqrt(np.diag(self.Sigma))
        return eta - QUAD_SPAN * s, eta + QUAD_SPAN * s, [list(eta)]

    def __repr__(self):
        return f"GaussianFamily(Sigma={self.Sigma.tolist()})"


class MixtureFamily:
    """``u ~ sum_c w_c N(eta + offset_c, Sigma_c)`` with fixed offsets, covariances and weights."""

    def __init__(self, offsets, covariances, weights):
        self.offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
        C, n_u = self.offsets.shape
        covs = np.asarray(covariances, dtype=float)
        if covs.ndim < 3:
            covs = np.array([np.atleast_2d(c) for c in covs.reshape(C, -1)]).reshape(C, n_u, n_u)
        self.covariances = np.array([_check_spd(c, "component covariance") for c in covs])
        w = np.asarray(weights, dtype=float)
        if w.shape != (C,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        self.weights = w
        self.n_u = n_u
        self.n_eta = n_u
        self._L = np.linalg.cholesky(self.covariances)

    def atoms(self, Eta: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
        rule = make_quadrature(self.n_u, order)
        D = np.concatenate([o + rule.standard @ L.T for o, L in zip(self.offsets, self._L)])
        W = np.concatenate([wc * rule.weights for wc in self.weights])
        U = Eta[:, None, :] + D[None]
        return U, np.broadcast_to(W, U.shape[:2])

    def density(self, U: np.ndarray, eta: np.ndarray) -> np.ndarray:
        return sum(w * _gauss_pdf(U, eta + o, S) for w, o, S in zip(self.weights, self.offsets, self.covariances))

    def expected_quadratic(self, cost: QuadraticCost, X, Eta) -> np.ndarray:
        return sum(w * cost.expected(X, Eta + o, S) for w, o, S in zip(self.weights, self.offsets, self.covariances))

    def box(self, eta: np.ndarray):
        s = np.sqrt(np.max(np.diagonal(self.covariances, axis1=1, axis2=2), axis=0))
        lo = eta + self.offsets.min(axis=0) - QUAD_SPAN * s
        hi = eta + self.offsets.max(axis=0) + QUAD_SPAN * s
        return lo, hi, [list(eta + o) for o in self.offsets]

    def __repr__(self):
        return f"MixtureFamily(offsets={self.offsets.tolist()}, weights={self.weights.tolist()})"


class DiagGaussianFamily:
    """``u ~ N(m, diag(exp(s)))`` with ``eta = (m, s)``: a state-dependent
    diagonal covariance moved into the statistic."""

    def __init__(self, n_u: int):
        self.n_u = int(n_u)
        self.n_eta = 2 * self.n_u

    def split(self, Eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return Eta[..., : self.n_u], np.exp(Eta[..., self.n_u:])

    def atoms(self, Eta: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
        rule = make_quadrature(self.n_u, order)
        m, var = self.split(Eta)
        U = m[:, None, :] + np.sqrt(var)[:, None, :] * rule.standard[None]
        return U, np.broadcast_to(rule.weights, U.shape[:2])

    def density(self, U: np.ndarray, eta: np.ndarray) -> np.ndarray:
        m, var = self.split(eta)
        return _gauss_pdf(U, m, np.diag(var))

    def expected_quadratic(self, cost: QuadraticCost, X, Eta) -> np.ndarray:
        m, var = self.split(Eta)
        cov = np.einsum("ni,ij->nij", var, np.eye(self.n_u))
        return cost.expected(X, m, cov)

    def box(self, eta: np.ndarray):
        m, var = self.split(eta)
        s = np.sqrt(var)
        return m - QUAD_SPAN * s, m + QUAD_SPAN * s, [list(m)]

    def __repr__(self):
        return f"DiagGaussianFamily(n_u={self.n_u})"


def _check_family(family) -> None:
    if type(family).__name__ not in SUPPORTED_FAMILIES:
        raise TypeError(f"unsupported policy family {type(family).__name__}; supported: {', '.join(SUPPORTED_FAMILIES)}")


# ---------------------------------------------------------------------------
# transition kernels p_S(x' | x, u)


@dataclass(frozen=True)
class DeltaKernel:
    """Deterministic simulator ``x' = f(x, u)``."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    explicit = False

    def next_points(self, X: np.ndarray, U: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
        Y = np.asarray(self.f(X, U), dtype=float)
        return Y[:, None, :], np.ones(1)


@dataclass(frozen=True)
class GridDensityKernel:
    """Explicit density ``x' ~ N(f(x, u), C)`` on a gridded state space.

    Experimental: a Gaussian on the next state need not correspond to a
    physical simulator.
    """

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    C: np.ndarray
    explicit = True

    def __post_init__(self):
        object.__setattr__(self, "C", _check_spd(self.C, "state noise covariance"))

    def next_points(self, X: np.ndarray, U: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
        rule = make_quadrature(self.C.shape[0], order, self.C)
        Y = np.asarray(self.f(X, U), dtype=float)
        return Y[:, None, :] + rule.nodes[None], rule.weights

    def density(self, Xn: np.ndarray, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return _gauss_pdf(Xn, np.asarray(self.f(X, U), dtype=float), self.C)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class SMDPSpec:
    """Stochastic-policy MDP with a declared statistic ``eta = eta_map(x, theta)``."""

    n_x: int
    n_u: int
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray]
    kernel: Union[DeltaKernel, GridDensityKernel]
    family: object
    eta_map: GaussianPolicy
    gamma: float
    p0: object
    name: str = "smdp"

    def __post_init__(self):
        _check_family(self.family)
        if self.family.n_u != self.n_u:
            raise ValueError("family control dimension differs from n_u")
        if self.eta_map.n_u != self.family.n_eta:
            raise ValueError(f"eta_map must output {self.family.n_eta} values")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    def with_theta(self, theta) -> "SMDPSpec":
        return replace(self, eta_map=self.eta_map.with_theta(theta))

    def normalization_error(self, probes: np.ndarray) -> float:
        """Max deviation from 1 of the integrated family density at probe ``eta``."""
        return max(abs(_integrate(self.family, lambda U: np.ones((U.shape[0], 1)), e)[0] - 1.0)
                   for e in np.atleast_2d(probes))


@dataclass(frozen=True)
class DMDPSpec:
    """Deterministic-policy MDP whose control is the statistic ``eta``.

    The transition kernel is generative: draw ``u ~ pi(. | eta)`` and pass
    it to the stochastic kernel.
    """

    n_x: int
    n_eta: int
    cost: Callable[[np.ndarray, np.ndarray], np.ndarray]
    family: object
    kernel: Union[DeltaKernel, GridDensityKernel]
    gamma: float
    p0: object
    provenance: str
    order: int = DEFAULT_ORDER
    name: str = "dmdp"

    def next_atoms(self, X: np.ndarray, Eta: np.ndarray, order: Optional[int] = None):
        """Weighted next-state atoms: (Y (N, K, n_x), W (N, K))."""
        k = order or self.order
        U, wu = self.family.atoms(Eta, k)
        N, Ku, n_u = U.shape
        Y, wy = self.kernel.next_points(np.repeat(X, Ku, axis=0), U.reshape(N * Ku, n_u), k)
        J = wy.size
        W = (wu[:, :, None] * wy[None, None, :]).reshape(N, Ku * J)
        return Y.reshape(N, Ku * J, self.n_x), W

    def expect_next(self, g: Callable, X: np.ndarray, Eta: np.ndarray, order: Optional[int] = None):
        """E[g(x')] under ``p_D(. | x, eta)``; ``g`` maps (K, n_x) to (K, ...)."""
        Y, W = self.next_atoms(X, Eta, order)
        N, K = W.shape
        G = np.asarray(g(Y.reshape(N * K, self.n_x)))
        G = G.reshape((N, K) + G.shape[1:])
        return np.einsum("nk,nk...->n...", W, G)

    def density(self, Xn: np.ndarray, X: np.ndarray, Eta: np.ndarray, order: Optional[int] = None):
        if not self.kernel.explicit:
            raise TypeError("a deterministic simulator has no transition density; use expect_next")
        U, W = self.family.atoms(Eta, order or self.order)
        N, K, n_u = U.shape
        p = self.kernel.density(np.repeat(Xn, K, axis=0), np.repeat(X, K, axis=0), U.reshape(N * K, n_u))
        return np.sum(W * p.reshape(N, K), axis=1)

    def sample_next(self, X: np.ndarray, Eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        N = X.shape[0]
        if isinstance(self.family, MixtureFamily):
            comp = rng.choice(len(self.family.weights), size=N, p=self.family.weights)
            L = self.family._L[comp]
            mean = Eta + self.family.offsets[comp]
        elif isinstance(self.family, DiagGaussianFamily):
            mean, var = self.family.split(Eta)
            L = np.einsum("ni,ij->nij", np.sqrt(var), np.eye(self.family.n_u))
        else:
            mean, L = Eta, np.broadcast_to(self.family._L, (N,) + self.family._L.shape)
        u = mean + np.einsum("nij,nj->ni", L, rng.standard_normal(mean.shape))
        Y = np.asarray(self.kernel.f(X, u), dtype=float)
        if self.kernel.explicit:
            Y = Y + rng.standard_normal(Y.shape) @ np.linalg.cholesky(self.kernel.C).T
        return Y

    def normalization_error(self, X: np.ndarray, Eta: np.ndarray) -> float:
        """Deviation from 1 of the total transition mass at probe pairs."""
        _, W = self.next_atoms(np.atleast_2d(X), np.atleast_2d(Eta))
        return float(np.max(np.abs(W.sum(axis=1) - 1.0)))

    def scaled_cost(self, k: float) -> "DMDPSpec":
        c = self.cost
        return replace(self, cost=lambda X, E: k * c(X, E), provenance=self.provenance + "+scaled")


def build_dmdp(smdp: SMDPSpec, order: int = DEFAULT_ORDER) -> DMDPSpec:
    """Equivalent deterministic-policy MDP.

    Quadratic costs under (mixtures of) Gaussians average in closed form;
    any other cost is averaged by Gauss-Hermite quadrature at ``order``.
    """
    family = smdp.family
    _check_family(family)
    if isinstance(smdp.cost, QuadraticCost):
        cost_S = smdp.cost

        def cost(X, Eta):
            return family.expected_quadratic(cost_S, X, Eta)
        provenance = "closed-form"
    else:
        cost_S = smdp.cost

        def cost(X, Eta):
            U, W = family.atoms(Eta, order)
            N, K, n_u = U.shape
            c = np.asarray(cost_S(np.repeat(X, K, axis=0), U.reshape(N * K, n_u))).reshape(N, K)
            return np.sum(W * c, axis=1)
        provenance = "quadrature"
    return DMDPSpec(smdp.n_x, family.n_eta, cost, family, smdp.kernel, smdp.gamma, smdp.p0,
                    provenance, order, name=smdp.name + "->D")


def from_qgmdp(mdp: QGMDP, policy: GaussianPolicy) -> SMDPSpec:
    """Stochastic spec for a quadratic-Gaussian MDP and its Gaussian policy.

    With state-dependent noise the statistic is widened to
    ``(mu, log diag Sigma(x))`` (diagonal covariances only).
    """
    if mdp.is_quadratic:
        cost = QuadraticCost(mdp.q, mdp.r, mdp.R, mdp.n_u)
    else:
        cost = mdp.cost
    kernel = DeltaKernel(mdp.f)
    if not mdp.state_dependent_noise:
        return SMDPSpec(mdp.n_x, mdp.n_u, cost, kernel, GaussianFamily(mdp.Sigma), policy,
                        mdp.gamma, mdp.p0, name=mdp.name)
    n_u = mdp.n_u
    probe = mdp.sigma_at(np.zeros((1, mdp.n_x)))[0]
    if np.max(np.abs(probe - np.diag(np.diag(probe)))) > 0:
        raise ValueError("state-dependent noise is supported for diagonal covariances only")

    def mu_fn(X, theta):
        m = policy.mu_fn(X, theta)
        return np.concatenate([m, np.log(np.diagonal(mdp.sigma_at(X), axis1=1, axis2=2))], axis=1)

    def dmu_fn(X, theta):
        J = policy.dmu_fn(X, theta)
        return np.concatenate([J, np.zeros(J.shape[:2] + (n_u,))], axis=2)

    eta_map = GaussianPolicy(policy.theta, mu_fn, dmu_fn, 2 * n_u, policy.description + "+logvar")
    return SMDPSpec(mdp.n_x, n_u, cost, kernel, DiagGaussianFamily(n_u), eta_map,
                    mdp.gamma, mdp.p0, name=mdp.name)


# ---------------------------------------------------------------------------
# verification


def _integrate(family, T: Callable[[np.ndarray], np.ndarray], eta: np.ndarray) -> np.ndarray:
    """Adaptive reference for ``int pi(u | eta) T(u) du``; ``T`` maps (1, n_u) to (1, B)."""
    lo, hi, pts = family.box(np.asarray(eta, dtype=float))
    eta2 = np.asarray(eta, dtype=float)[None]
    tol = dict(epsabs=1e-14, epsrel=1e-12)
    if family.n_u == 1:
        def h(u):
            U = np.array([[u]])
            return family.density(U, eta2)[0] * T(U)[0]
        return integrate.quad_vec(h, lo[0], hi[0], points=[p[0] for p in pts], limit=400, **tol)[0]
    if family.n_u == 2:
        def outer(u0):
            def inner(u1):
                U = np.array([[u0, u1]])
                return family.density(U, eta2)[0] * T(U)[0]
            return integrate.quad_vec(inner, lo[1], hi[1], points=[p[1] for p in pts], limit=200, **tol)[0]
        return integrate.quad_vec(outer, lo[0], hi[0], points=[p[0] for p in pts], limit=200, **tol)[0]
    raise ValueError("reference integration supports n_u <= 2")


@dataclass(frozen=True)
class TransitionCheck:
    discrepancy: float
    per_probe: np.ndarray
    order: int
    kind: str  # "soft-bin" or "density"


def soft_bins(dmdp: DMDPSpec, x: np.ndarray, eta: np.ndarray, n_bins: int = 5, width: float = 3.0):
    """Gaussian test-function centres and width, scaled to the next-state spread."""
    Y, W = dmdp.next_atoms(x[None], eta[None], order=20)
    m = W[0] @ Y[0]
    s = np.sqrt(W[0] @ (Y[0] - m) ** 2)
    h = float(width * max(np.max(s), 1e-3))
    grid1 = np.linspace(-2.0, 2.0, n_bins) * h
    mesh = np.meshgrid(*([grid1] * dmdp.n_x), indexing="ij")
    return m + np.stack([a.ravel() for a in mesh], axis=1), h


def verify_transition_equivalence(smdp: SMDPSpec, dmdp: DMDPSpec, theta, probes,
                                  order: Optional[int] = None, n_bins: int = 5) -> TransitionCheck:
    """Compare the policy-averaged stochastic kernel with the deterministic one.

    For a simulator kernel both sides integrate Gaussian soft-bin test
    functions of ``x'`` (adaptive quadrature on the stochastic side, the
    deterministic spec's own rule on the other). For an explicit density
    the densities are compared at probe next states.
    """
    pol = smdp.eta_map.with_theta(theta)
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    Eta = pol.mean(X)
    k = order or dmdp.order
    out = np.empty(X.shape[0])
    explicit = getattr(smdp.kernel, "explicit", False)
    for i, (x, eta) in enumerate(zip(X, Eta)):
        centres, h = soft_bins(dmdp, x, eta, n_bins)
        if explicit:
            def T(U, x=x, centres=centres):
                B = centres.shape[0]
                return smdp.kernel.density(centres, np.repeat(x[None], B, 0), np.repeat(U, B, 0))[None]
            d_side = dmdp.density(centres, np.repeat(x[None], len(centres), 0),
                                  np.repeat(eta[None], len(centres), 0), k)
        else:
            def g(Y, centres=centres, h=h):
                return np.exp(-0.5 * np.sum((Y[:, None, :] - centres[None]) ** 2, axis=2) / h**2)

            def T(U, x=x, g=g):
                return g(np.asarray(smdp.kernel.f(x[None], U), dtype=float))
            d_side = dmdp.expect_next(g, x[None], eta[None], k)[0]
        s_side = _integrate(smdp.family, T, eta)
        out[i] = np.max(np.abs(np.ravel(s_side) - np.ravel(d_side)))
    return TransitionCheck(float(np.max(out)), out, k, "density" if explicit else "soft-bin")


@dataclass(frozen=True)
class ValueCheck:
    discrepancy: float  # max node |v_S - v_D|
    J_S: float
    J_D: float
    grad_S: np.ndarray
    grad_D: np.ndarray
    v_S: np.ndarray
    v_D: np.ndarray
    clamp_fraction: float

    @property
    def J_gap(self) -> float:
        return abs(self.J_S - self.J_D)

    @property
    def grad_gap(self) -> float:
        return float(np.max(np.abs(self.grad_S - self.grad_D)))


def _solve_S(smdp: SMDPSpec, theta, grid: GridModel, order: int):
    X = grid.nodes
    Eta = smdp.eta_map.with_theta(theta).mean(X)
    U, Wu = smdp.family.atoms(Eta, order)
    M, K, n_u = U.shape
    Xr = np.repeat(X, K, axis=0)
    Uf = U.reshape(M * K, n_u)
    c = np.sum(Wu * np.asarray(smdp.cost(Xr, Uf)).reshape(M, K), axis=1)
    Y, wy = smdp.kernel.next_points(Xr, Uf, order)
    J = wy.size
    W = (Wu[:, :, None] * wy[None, None, :]).reshape(M, K * J)
    P, clamp = grid.operator(Y.reshape(M, K * J, smdp.n_x), W)
    v, _ = solve_bellman(P, c, smdp.gamma)
    return v, clamp


def _solve_D(dmdp: DMDPSpec, eta_map: GaussianPolicy, theta, grid: GridModel):
    X = grid.nodes
    Eta = eta_map.with_theta(theta).mean(X)
    c = np.asarray(dmdp.cost(X, Eta))
    Y, W = dmdp.next_atoms(X, Eta)
    P, clamp = grid.operator(Y, W)
    v, _ = solve_bellman(P, c, dmdp.gamma)
    return v, clamp


def _J(p0, grid: GridModel, v: np.ndarray) -> float:
    atoms, w = p0.atoms(grid.quad_order)
    return float(w @ grid.interpolate(v, atoms))


def verify_value_equivalence(smdp: SMDPSpec, dmdp: DMDPSpec, theta, grid: GridModel,
                             fd_eps: float = 1e-6) -> ValueCheck:
    """Solve both Bellman equations on ``grid``; compare values, J and FD gradients.

    The stochastic side averages its own cost over the family at the grid's
    quadrature order; the deterministic side uses its declared cost.
    """
    if smdp.n_x != grid.dim:
        raise ValueError("grid dimension does not match the state dimension")
    if dmdp.order != grid.quad_order:
        # different atoms on each side would hide any real discrepancy behind interpolation error
        raise ValueError(f"deterministic spec uses order {dmdp.order} but the grid uses {grid.quad_order}")
    theta = np.asarray(theta, dtype=float)
    order = grid.quad_order
    vS, clamp = _solve_S(smdp, theta, grid, order)
    vD, _ = _solve_D(dmdp, smdp.eta_map, theta, grid)
    gS = np.empty(theta.size)
    gD = np.empty(theta.size)
    for i in range(theta.size):
        h = fd_eps * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        gS[i] = (_J(smdp.p0, grid, _solve_S(smdp, tp, grid, order)[0])
                 - _J(smdp.p0, grid, _solve_S(smdp, tm, grid, order)[0])) / (2 * h)
        gD[i] = (_J(dmdp.p0, grid, _solve_D(dmdp, smdp.eta_map, tp, grid)[0])
                 - _J(dmdp.p0, grid, _solve_D(dmdp, smdp.eta_map, tm, grid)[0])) / (2 * h)
    if clamp > 0.1:
        warnings.warn(f"{clamp:.1%} of transition mass clamped to the grid boundary", RuntimeWarning)
    return ValueCheck(float(np.max(np.abs(vS - vD))), _J(smdp.p0, grid, vS), _J(dmdp.p0, grid, vD),
                      gS, gD, vS, vD, clamp)


@dataclass(frozen=True)
class RefinementLevel:
    order: int
    grid_size: int
    transition: float
    value: float


def refinement_study(smdp: SMDPSpec, theta, probes, grid: GridModel,
                     orders: Sequence[int] = (4, 6, 10), factor: int = 2) -> list[RefinementLevel]:
    """Transition and value discrepancies over successive quadrature/grid refinements."""
    levels = []
    g = grid
    for i, k in enumerate(orders):
        if i:
            g = g.refined(factor, quad_order=k)
        else:
            g = GridModel([(lo, lo + st * (n - 1), n) for lo, st, n in zip(g.lo, g.step, g.shape)], quad_order=k)
        dmdp = build_dmdp(smdp, order=k)
        t = verify_transition_equivalence(smdp, dmdp, theta, probes, order=k).discrepancy
        v = verify_value_equivalence(smdp, dmdp, theta, g).discrepancy
        levels.append(RefinementLevel(k, g.size, t, v))
    return levels


def is_refinement_monotone(values: Sequence[float], floor: float = 1e-12) -> bool:
    """Non-increasing, allowing round-off-level values to wander below ``floor``."""
    return all(b <= a or b <= floor for a, b in zip(values, values[1:]))
