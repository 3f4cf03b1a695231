"""Grid-discretized exact evaluation: values, discounted density, J, gradients, Q.

The state space is a uniform tensor grid with multilinear interpolation
and boundary clamping. Expectations over control noise use Gauss-Hermite
quadrature. Each row of the assembled transition operator is therefore a
convex combination, and (I - gamma P) is an M-matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .core import GaussianPolicy, QGMDP
from .gauss import DEFAULT_ORDER, make_quadrature

log = logging.getLogger(__name__)

MAX_STATE_DIM = 2
MAX_CONTROL_DIM = 2
MAX_PARAMS = 20
CLAMP_WARN = 0.10
ASSEMBLY_CACHE = 4  # a 2-D assembly at order 10 is a few hundred MB
DIRECT_MAX = 10_000
KRYLOV_RTOL = 1e-13


class BellmanSolver:
    """Solves ``(I - gamma P) x = b`` or its transpose.

    Sparse LU up to ``DIRECT_MAX`` unknowns. Larger systems use GMRES; the
    matrix is a strictly diagonally dominant M-matrix so the Krylov
    iteration converges in a few dozen steps.
    """

    def __init__(self, P: sp.spmatrix, gamma: float, direct: Optional[bool] = None):
        n = P.shape[0]
        self.A = (sp.identity(n, format="csr") - gamma * P.tocsr()).tocsr()
        self.direct = n <= DIRECT_MAX if direct is None else direct
        self._lu = None
        if self.direct:
            try:
                self._lu = spla.splu(self.A.tocsc())
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(f"Bellman system is singular: {exc}") from None

    def solve(self, b: np.ndarray, trans: str = "N") -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(b, trans=trans)
        A = self.A.T.tocsr() if trans == "T" else self.A
        x, info = spla.gmres(A, b, rtol=KRYLOV_RTOL, atol=0.0, restart=60, maxiter=50)
        if info != 0:
            raise np.linalg.LinAlgError(f"GMRES did not converge (info={info})")
        return x


class GridModel:
    """Uniform tensor grid plus a noise quadrature order.

    ``axes`` is a sequence of ``(lo, hi, n)`` triples or of uniform node
    arrays. Assembled operators are cached per (MDP, theta).
    """

    def __init__(self, axes: Sequence, quad_order: int = DEFAULT_ORDER):
        lo, step, n = [], [], []
        for ax in axes:
            if isinstance(ax, tuple) and len(ax) == 3:
                a, b, k = ax
                k = int(k)
                nodes = np.linspace(a, b, k)
            else:
                nodes = np.asarray(ax, dtype=float)
                k = nodes.size
                if k >= 3 and np.max(np.abs(np.diff(nodes, 2))) > 1e-9 * (nodes[-1] - nodes[0]):
                    raise ValueError("grid axes must be uniform")
            if k < 2:
                raise ValueError("each grid axis needs at least two nodes")
            lo.append(nodes[0])
            step.append((nodes[-1] - nodes[0]) / (k - 1))
            n.append(k)
        if len(n) > MAX_STATE_DIM:
            raise ValueError(f"exact evaluation supports state dimension <= {MAX_STATE_DIM}")
        self.lo = np.array(lo)
        self.step = np.array(step)
        self.shape = np.array(n, dtype=np.int64)
        self.quad_order = int(quad_order)
        self._cache: dict = {}

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def axes(self) -> list[np.ndarray]:
        return [self.lo[a] + self.step[a] * np.arange(self.shape[a]) for a in range(self.dim)]

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def refined(self, factor: int = 2, quad_order: Optional[int] = None) -> "GridModel":
        """Grid with spacing divided by ``factor`` over the same extent."""
        axes = [(self.lo[a], self.lo[a] + self.step[a] * (self.shape[a] - 1),
                 (self.shape[a] - 1) * factor + 1) for a in range(self.dim)]
        return GridModel(axes, quad_order or self.quad_order)

    def stencil(self, Y: np.ndarray):
        Y = np.ascontiguousarray(np.asarray(Y, dtype=float).reshape(-1, self.dim))
        return kernels.interp_weights(Y, self.lo, self.step, self.shape)

    def interpolate(self, values: np.ndarray, Y: np.ndarray) -> np.ndarray:
        idx, w, _, _ = self.stencil(Y)
        return np.sum(w * values[idx], axis=1)

    def interp_gradient(self, values: np.ndarray, Y: np.ndarray) -> np.ndarray:
        idx, _, dw, _ = self.stencil(Y)
        return np.einsum("mcd,mc->md", dw, values[idx])

    def scatter(self, Y: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Distribute point masses onto the nodes with interpolation weights."""
        idx, w, _, _ = self.stencil(Y)
        out = np.zeros(self.size)
        np.add.at(out, idx.ravel(), (w * weights[:, None]).ravel())
        return out

    def operator(self, Y: np.ndarray, W: np.ndarray) -> tuple[sp.csr_matrix, float]:
        """Transition matrix for next-state samples ``Y`` (M, K, n_x) with weights ``W``.

        ``W`` is (K,) or (M, K). Returns the CSR matrix and the
        probability-weighted fraction of clamped next states.
        """
        M, K = Y.shape[:2]
        idx, w, _, clamped = self.stencil(Y.reshape(M * K, self.dim))
        W = np.broadcast_to(W, (M, K)).reshape(M * K)
        rows = np.repeat(np.arange(M), K * idx.shape[1])
        data = (w * W[:, None]).ravel()
        P = sp.csr_matrix((data, (rows, idx.ravel())), shape=(M, self.size))
        P.sum_duplicates()
        clamp = float(np.sum(W * clamped) / M)
        return P, clamp

    def assemble(self, mdp: QGMDP, policy: GaussianPolicy) -> "Assembly":
        key = (id(mdp), policy.theta.tobytes(), id(policy.mu_fn))
        hit = self._cache.pop(key, None)
        if hit is not None and hit.mdp is mdp:
            self._cache[key] = hit  # most recent last
            return hit
        asm = Assembly.build(self, mdp, policy)
        self._cache[key] = asm
        while len(self._cache) > ASSEMBLY_CACHE:
            self._cache.pop(next(iter(self._cache)))
        return asm

    def __repr__(self):
        return f"GridModel(shape={self.shape.tolist()}, lo={self.lo.tolist()}, step={self.step.tolist()}, order={self.quad_order})"


@dataclass
class Assembly:
    """Transition operator and per-node data for one (MDP, policy) pair."""

    grid: GridModel
    mdp: QGMDP
    theta: np.ndarray
    X: np.ndarray  # (M, n_x)
    Mu: np.ndarray  # (M, n_u)
    U: np.ndarray  # (M, K, n_u)
    Y: np.ndarray  # (M, K, n_x)
    qw: np.ndarray  # (K,)
    P: sp.csr_matrix
    cost_S: np.ndarray
    cost_D: np.ndarray
    clamp_fraction: float
    _lu: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, grid: GridModel, mdp: QGMDP, policy: GaussianPolicy) -> "Assembly":
        if mdp.n_x != grid.dim:
            raise ValueError("grid dimension does not match the MDP state dimension")
        if mdp.n_u > MAX_CONTROL_DIM:
            raise ValueError(f"exact evaluation supports control dimension <= {MAX_CONTROL_DIM}")
        rule = make_quadrature(mdp.n_u, grid.quad_order)
        X = grid.nodes
        M, K = X.shape[0], rule.weights.size
        Mu = policy.mean(X)
        D = np.einsum("mij,kj->mki", mdp.chol_at(X), rule.standard)
        U = Mu[:, None, :] + D
        Xr = np.repeat(X, K, axis=0)
        Y = np.asarray(mdp.f(Xr, U.reshape(M * K, mdp.n_u)), dtype=float).reshape(M, K, mdp.n_x)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError("non-finite next state during operator assembly")
        P, clamp = grid.operator(Y, rule.weights)
        cost_S = mdp.expected_cost(X, Mu)
        cost_D = mdp.cost(X, Mu)
        if clamp > CLAMP_WARN:
            warnings.warn(f"{clamp:.1%} of transition mass clamped to the grid boundary", RuntimeWarning)
        return cls(grid, mdp, policy.theta.copy(), X, Mu, U, Y, rule.weights, P, cost_S, cost_D, clamp)

    def lu(self) -> BellmanSolver:
        if "lu" not in self._lu:
            self._lu["lu"] = BellmanSolver(self.P, self.mdp.gamma)
        return self._lu["lu"]

    def costs(self, mode: str) -> np.ndarray:
        if mode == "S":
            return self.cost_S
        if mode == "D":
            return self.cost_D
        raise ValueError(f"mode must be 'S' or 'D', got {mode!r}")

    def initial_weights(self) -> np.ndarray:
        atoms, w = self.mdp.p0.atoms(self.grid.quad_order)
        return self.grid.scatter(atoms, w)


@dataclass(frozen=True)
class ValueField:
    """Grid values of v for one mode and policy snapshot.

    Callable on state batches (multilinear interpolation); also exposes the
    interpolant's gradient so it can stand in for a critic.
    """

    values: np.ndarray
    mode: str
    theta: np.ndarray
    residual: float
    grid: GridModel
    clamp_fraction: float = 0.0
    warnings: tuple = ()

    def __call__(self, X) -> np.ndarray:
        return self.grid.interpolate(self.values, X)

    def value(self, X) -> np.ndarray:
        return self(X)

    def gradient(self, X) -> np.ndarray:
        return self.grid.interp_gradient(self.values, X)

    def hessian(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))


def solve_bellman(P: sp.spmatrix, c: np.ndarray, gamma: float) -> tuple[np.ndarray, float]:
    """Solve (I - gamma P) v = c; returns v and the sup-norm residual."""
    v = BellmanSolver(P, gamma).solve(c)
    res = float(np.max(np.abs(v - (c + gamma * (P @ v)))))
    return v, res


def solve_value(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel, mode: str = "D") -> ValueField:
    """Exact fixed-policy value on the grid for the stochastic or deterministic view."""
    asm = grid.assemble(mdp, policy)
    c = asm.costs(mode)
    v = asm.lu().solve(c)
    res = float(np.max(np.abs(v - (c + mdp.gamma * (asm.P @ v)))))
    if not np.all(np.isfinite(v)):
        raise np.linalg.LinAlgError("Bellman solve returned non-finite values")
    notes = ()
    if asm.clamp_fraction > CLAMP_WARN:
        notes = (f"clamp fraction {asm.clamp_fraction:.3f} exceeds {CLAMP_WARN}",)
    return ValueField(v, mode, asm.theta, res, grid, asm.clamp_fraction, notes)


def discounted_density(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel) -> np.ndarray:
    """Unnormalized discounted visitation weights on the nodes (total mass 1/(1-gamma)).

    Solves ``(I - gamma P)^T rho = b0`` where ``b0`` spreads p0 over the
    nodes; this is ``sum_t gamma^t b0^T P^t`` counting the initial state.
    """
    asm = grid.assemble(mdp, policy)
    return asm.lu().solve(asm.initial_weights(), trans="T")


def performance(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel, mode: str = "D",
                value: Optional[ValueField] = None) -> float:
    """J = E_{x ~ p0}[v(x)] with v interpolated at the p0 atoms."""
    if value is None:
        value = solve_value(mdp, policy, grid, mode)
    atoms, w = mdp.p0.atoms(grid.quad_order)
    return float(w @ value(atoms))


@dataclass(frozen=True)
class ExactGradient:
    gradient: np.ndarray
    cost_term: np.ndarray
    value_term: np.ndarray
    mode: str
    value: ValueField
    rho: np.ndarray


def exact_gradient(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel, mode: str = "D") -> ExactGradient:
    """Policy gradient on the grid, rho-weighted, pathwise in the control.

    For each node ``x`` with control samples ``u_k = mu + d_k`` the
    contribution is ``dmu/dtheta (T_cost + gamma T_value)`` where the cost
    term is ``grad_u l`` at ``mu`` (deterministic view) or its noise average
    (stochastic view), and the value term averages
    ``(df/du)^T grad v(f(x, u_k))``. On the grid this is the exact
    derivative of the discretized J almost everywhere in theta.
    """
    if policy.n_theta > MAX_PARAMS:
        raise ValueError(f"exact gradients support at most {MAX_PARAMS} parameters")
    asm = grid.assemble(mdp, policy)
    vf = solve_value(mdp, policy, grid, mode)
    rho = discounted_density(mdp, policy, grid)
    M, K, n_u = asm.U.shape
    Jmu = policy.jacobian(asm.X)
    if mode == "D":
        cost_g = mdp.cost_grad_u(asm.X, asm.Mu)
    else:
        Xr = np.repeat(asm.X, K, axis=0)
        gk = mdp.cost_grad_u(Xr, asm.U.reshape(M * K, n_u)).reshape(M, K, n_u)
        cost_g = np.einsum("k,mki->mi", asm.qw, gk)
    Yf = asm.Y.reshape(M * K, mdp.n_x)
    gv = grid.interp_gradient(vf.values, Yf)
    Ju = mdp.jac_u(np.repeat(asm.X, K, axis=0), asm.U.reshape(M * K, n_u))
    val_g = np.einsum("k,mki->mi", asm.qw, np.einsum("nxi,nx->ni", Ju, gv).reshape(M, K, n_u))
    cost_term = np.einsum("m,mpi,mi->p", rho, Jmu, cost_g)
    value_term = mdp.gamma * np.einsum("m,mpi,mi->p", rho, Jmu, val_g)
    return ExactGradient(cost_term + value_term, cost_term, value_term, mode, vf, rho)


def fd_gradients(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel, modes: Sequence[str] = ("S", "D"),
                 eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Central finite differences of the grid J in theta (independent oracle).

    All requested modes share each perturbed assembly.
    """
    out = {m: np.empty(policy.n_theta) for m in modes}
    for i in range(policy.n_theta):
        h = eps * (1.0 + abs(policy.theta[i]))
        tp = policy.theta.copy()
        tm = policy.theta.copy()
        tp[i] += h
        tm[i] -= h
        pp, pm = policy.with_theta(tp), policy.with_theta(tm)
        for m in modes:
            out[m][i] = (performance(mdp, pp, grid, m) - performance(mdp, pm, grid, m)) / (2.0 * h)
    return out


def fd_gradient(mdp: QGMDP, policy: GaussianPolicy, grid: GridModel, mode: str = "D",
                eps: float = 1e-6) -> np.ndarray:
    return fd_gradients(mdp, policy, grid, (mode,), eps)[mode]


ValueLike = Union[ValueField, Callable[[np.ndarray], np.ndarray]]


def q_values(mdp: QGMDP, policy: GaussianPolicy, grid: Optional[GridModel], mode: str, X, U,
             value: Optional[ValueLike] = None, order: Optional[int] = None) -> np.ndarray:
    """State-control values at probe pairs ``(X[i], U[i])``.

    Stochastic view: ``l(x,u) + gamma v_S(f(x,u))``. Deterministic view:
    ``l(x,u) + gamma E_d[v_D(f(x,u+d))]``. ``value`` overrides the grid
    solve (e.g. a closed-form oracle).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if value is None:
        value = solve_value(mdp, policy, grid, mode)
    cost = mdp.cost(X, U)
    if mode == "S":
        return cost + mdp.gamma * np.asarray(value(mdp.f(X, U)))
    if mode != "D":
        raise ValueError(f"mode must be 'S' or 'D', got {mode!r}")
    k = order or (grid.quad_order if grid is not None else DEFAULT_ORDER)
    rule = make_quadrature(mdp.n_u, k)
    N, K = X.shape[0], rule.weights.size
    D = np.einsum("nij,kj->nki", mdp.chol_at(X), rule.standard)
    Uk = (U[:, None, :] + D).reshape(N * K, mdp.n_u)
    vk = np.asarray(value(mdp.f(np.repeat(X, K, axis=0), Uk))).reshape(N, K)
    return cost + mdp.gamma * (vk @ rule.weights)
