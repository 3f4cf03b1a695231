"""Problem definitions and the rollout engine.

All maps act on batches: states are ``(N, n_x)`` arrays, controls
``(N, n_u)`` arrays. A rollout records one noise stream and evaluates the
step cost both at the noisy control (stochastic view) and at the policy
mean (deterministic view), so both formulations share every trajectory.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtri

from . import kernels

log = logging.getLogger(__name__)

Array = np.ndarray
MatrixOrMap = Union[Array, Callable[[Array], Array]]

FD_REL_STEP = 1e-5


class DivergenceError(FloatingPointError):
    """A rollout produced a non-finite state or cost."""

    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step} (divergent dynamics?)")
        self.step = step


# ---------------------------------------------------------------------------
# initial-state distributions


@dataclass(frozen=True)
class FiniteSupport:
    """Initial distribution with finitely many atoms."""

    states: Array
    weights: Array

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if states.shape[0] != weights.shape[0]:
            raise ValueError("p0: one weight per atom required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("p0 weights must be nonnegative and sum to 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def atoms(self, order: int = 10) -> tuple[Array, Array]:
        return self.states, self.weights

    def second_moment(self) -> Array:
        return np.einsum("k,ki,kj->ij", self.weights, self.states, self.states)

    def sample(self, u: Array) -> Array:
        """Map uniforms ``u`` of shape (N, n_x) to atoms (first column used)."""
        cdf = np.cumsum(self.weights)
        k = np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right")
        return self.states[np.minimum(k, len(cdf) - 1)]


@dataclass(frozen=True)
class DiagonalGaussian:
    """Initial distribution N(mean, diag(var))."""

    mean: Array
    var: Array

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mean.shape != var.shape or np.any(var < 0):
            raise ValueError("p0: mean and nonnegative var of equal length required")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def atoms(self, order: int = 10) -> tuple[Array, Array]:
        """Tensor Gauss-Hermite atoms, used where an expectation over p0 is needed."""
        z, w = np.polynomial.hermite_e.hermegauss(order)
        w = w / w.sum()
        grids = np.meshgrid(*([z] * self.dim), indexing="ij")
        wgrid = np.meshgrid(*([w] * self.dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
        return self.mean + nodes * np.sqrt(self.var), weights

    def second_moment(self) -> Array:
        return np.diag(self.var) + np.outer(self.mean, self.mean)

    def sample(self, u: Array) -> Array:
        return self.mean + np.sqrt(self.var) * ndtri(u)


InitialDistribution = Union[FiniteSupport, DiagonalGaussian]


# ---------------------------------------------------------------------------
# problem and policy


def _batch_matrix(m: MatrixOrMap, X: Array, n: int) -> Array:
    if callable(m):
        out = np.asarray(m(X), dtype=float)
        return out.reshape(X.shape[0], n, n)
    return np.broadcast_to(m, (X.shape[0], n, n))


@dataclass(frozen=True)
class QGMDP:
    """Quadratic-Gaussian MDP.

    Step cost ``q(x) + u.r(x) + u'R u`` (plus an optional ``quartic *
    sum(u**4)`` term, which breaks the quadratic assumption and exists for
    negative controls). Control noise is ``N(0, Sigma)``.

    ``R`` and ``Sigma`` are either constant matrices or batch maps
    ``X -> (N, n_u, n_u)``. When both are maps, ``R(x) Sigma(x)`` must be a
    single multiple of the identity on ``probe_states``.
    """

    n_x: int
    n_u: int
    f: Callable[[Array, Array], Array]
    q: Callable[[Array], Array]
    r: Callable[[Array], Array]
    R: MatrixOrMap
    Sigma: MatrixOrMap
    gamma: float
    p0: InitialDistribution
    f_jac_u: Optional[Callable[[Array, Array], Array]] = None
    quartic: float = 0.0
    probe_states: Optional[Array] = None
    name: str = "qgmdp"
    alpha: Optional[float] = field(default=None, init=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.p0.dim != self.n_x:
            raise ValueError("p0 dimension does not match n_x")
        if not callable(self.R):
            R = np.atleast_2d(np.asarray(self.R, dtype=float))
            if R.shape != (self.n_u, self.n_u):
                raise ValueError(f"R must be {self.n_u}x{self.n_u}")
            if np.max(np.abs(R - R.T), initial=0.0) > 1e-12:
                raise ValueError("R must be symmetric")
            object.__setattr__(self, "R", R)
        if not callable(self.Sigma):
            S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
            if S.shape != (self.n_u, self.n_u):
                raise ValueError(f"Sigma must be {self.n_u}x{self.n_u}")
            try:
                np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise ValueError("Sigma must be symmetric positive definite") from None
            object.__setattr__(self, "Sigma", S)
        if callable(self.R) and callable(self.Sigma):
            if self.probe_states is None:
                raise ValueError("state-dependent R and Sigma need probe_states to verify R*Sigma = alpha*I")
            X = np.atleast_2d(np.asarray(self.probe_states, dtype=float))
            RS = _batch_matrix(self.R, X, self.n_u) @ _batch_matrix(self.Sigma, X, self.n_u)
            alpha = float(np.trace(RS[0]) / self.n_u)
            err = np.max(np.abs(RS - alpha * np.eye(self.n_u)))
            if err > 1e-9:
                raise ValueError(f"R(x) Sigma(x) is not alpha*I on the probe set (max deviation {err:.3g})")
            object.__setattr__(self, "alpha", alpha)
        elif not callable(self.R) and not callable(self.Sigma):
            RS = self.R @ self.Sigma
            a = np.trace(RS) / self.n_u
            if np.allclose(RS, a * np.eye(self.n_u), atol=1e-12):
                object.__setattr__(self, "alpha", float(a))

    # -- noise and cost ------------------------------------------------------

    @property
    def state_dependent_noise(self) -> bool:
        return callable(self.Sigma)

    @property
    def is_quadratic(self) -> bool:
        return self.quartic == 0.0

    @property
    def offset_is_constant(self) -> bool:
        """True when tr(R Sigma) does not depend on the state."""
        return not (callable(self.R) or callable(self.Sigma)) or (
            callable(self.R) and callable(self.Sigma)
        )

    def sigma_at(self, X: Array) -> Array:
        return _batch_matrix(self.Sigma, X, self.n_u)

    def R_at(self, X: Array) -> Array:
        return _batch_matrix(self.R, X, self.n_u)

    def chol_at(self, X: Array) -> Array:
        if callable(self.Sigma):
            return np.linalg.cholesky(self.sigma_at(X))
        return np.broadcast_to(np.linalg.cholesky(self.Sigma), (X.shape[0], self.n_u, self.n_u))

    def trace_RSigma(self, X: Array) -> Array:
        if not (callable(self.R) or callable(self.Sigma)):
            return np.full(X.shape[0], float(np.trace(self.R @ self.Sigma)))
        return np.einsum("nij,nji->n", self.R_at(X), self.sigma_at(X))

    def _quad(self, X: Array, U: Array) -> Array:
        if callable(self.R):
            return np.einsum("ni,nij,nj->n", U, self.R_at(X), U)
        return np.einsum("ni,ij,nj->n", U, self.R, U)

    def cost(self, X: Array, U: Array) -> Array:
        c = self.q(X) + np.einsum("ni,ni->n", U, self.r(X)) + self._quad(X, U)
        if self.quartic:
            c = c + self.quartic * np.sum(U**4, axis=1)
        return c

    def expected_cost(self, X: Array, Mu: Array) -> Array:
        """E[cost(x, mu + d)] over d ~ N(0, Sigma(x)), in closed form."""
        c = self.cost(X, Mu) + self.trace_RSigma(X)
        if self.quartic:
            s = np.diagonal(self.sigma_at(X), axis1=1, axis2=2)
            c = c + self.quartic * np.sum(6.0 * Mu**2 * s + 3.0 * s**2, axis=1)
        return c

    def cost_grad_u(self, X: Array, U: Array) -> Array:
        if callable(self.R):
            g = 2.0 * np.einsum("nij,nj->ni", self.R_at(X), U)
        else:
            g = 2.0 * U @ self.R.T
        g = self.r(X) + g
        if self.quartic:
            g = g + 4.0 * self.quartic * U**3
        return g

    def jac_u(self, X: Array, U: Array) -> Array:
        """df/du at (X, U) as (N, n_x, n_u); central differences without an analytic map."""
        if self.f_jac_u is not None:
            return np.asarray(self.f_jac_u(X, U), dtype=float).reshape(X.shape[0], self.n_x, self.n_u)
        J = np.empty((X.shape[0], self.n_x, self.n_u))
        for j in range(self.n_u):
            h = FD_REL_STEP * (1.0 + np.abs(U[:, j]))
            Up = U.copy()
            Um = U.copy()
            Up[:, j] += h
            Um[:, j] -= h
            J[:, :, j] = (self.f(X, Up) - self.f(X, Um)) / (2.0 * h)[:, None]
        if not np.all(np.isfinite(J)):
            raise FloatingPointError("non-finite finite-difference probe of df/du")
        return J

    def scaled(self, k: float) -> "QGMDP":
        """Copy with every cost term multiplied by ``k``."""
        q, r = self.q, self.r
        R = (lambda X: k * self.R_at(X)) if callable(self.R) else k * self.R
        new = replace(
            self,
            q=lambda X: k * q(X),
            r=lambda X: k * r(X),
            R=R,
            quartic=k * self.quartic,
            name=f"{self.name}*{k}",
        )
        return new


class GaussianPolicy:
    """Policy mean ``mu(x, theta)`` with its parameter Jacobian.

    ``mu_fn(X, theta) -> (N, n_u)`` and ``dmu_fn(X, theta) -> (N, n_theta,
    n_u)``. The exploration noise covariance belongs to the MDP.
    """

    def __init__(self, theta, mu_fn, dmu_fn, n_u: int, description: str = ""):
        self.theta = np.array(theta, dtype=float).ravel()
        self.theta.setflags(write=False)
        self.mu_fn = mu_fn
        self.dmu_fn = dmu_fn
        self.n_u = n_u
        self.description = description

    @property
    def n_theta(self) -> int:
        return self.theta.size

    def mean(self, X: Array) -> Array:
        return np.asarray(self.mu_fn(X, self.theta), dtype=float).reshape(X.shape[0], self.n_u)

    def jacobian(self, X: Array) -> Array:
        return np.asarray(self.dmu_fn(X, self.theta), dtype=float).reshape(
            X.shape[0], self.n_theta, self.n_u
        )

    def with_theta(self, theta) -> "GaussianPolicy":
        return GaussianPolicy(theta, self.mu_fn, self.dmu_fn, self.n_u, self.description)

    def check_jacobian(self, X: Array, eps: float = 1e-6) -> float:
        """Max relative error of ``jacobian`` against central differences."""
        J = self.jacobian(X)
        fd = np.empty_like(J)
        for i in range(self.n_theta):
            e = np.zeros(self.n_theta)
            e[i] = eps * (1.0 + abs(self.theta[i]))
            fd[:, i, :] = (self.mu_fn(X, self.theta + e) - self.mu_fn(X, self.theta - e)) / (2 * e[i])
        scale = max(np.max(np.abs(fd)), 1e-300)
        return float(np.max(np.abs(J - fd)) / scale)

    def __repr__(self):
        return f"GaussianPolicy({self.description or 'custom'}, theta={self.theta.tolist()})"


FEATURES = {
    "state": (lambda X: X, lambda n_x: n_x),
    "affine": (lambda X: np.concatenate([X, np.ones((X.shape[0], 1))], axis=1), lambda n_x: n_x + 1),
}


def linear_policy(Theta, features: Union[str, Callable[[Array], Array]] = "state") -> GaussianPolicy:
    """Policy ``mu(x) = Theta @ phi(x)``; ``theta`` is ``Theta`` flattened row-major."""
    Theta = np.atleast_2d(np.asarray(Theta, dtype=float))
    n_u, n_phi = Theta.shape
    if isinstance(features, str):
        phi = FEATURES[features][0]
        name = features
    else:
        phi, name = features, getattr(features, "__name__", "custom")

    def mu_fn(X, theta):
        return phi(X) @ theta.reshape(n_u, n_phi).T

    def dmu_fn(X, theta):
        P = phi(X)
        J = np.zeros((X.shape[0], n_u * n_phi, n_u))
        for j in range(n_u):
            J[:, j * n_phi : (j + 1) * n_phi, j] = P
        return J

    return GaussianPolicy(Theta.ravel(), mu_fn, dmu_fn, n_u, f"linear[{name}]")


# ---------------------------------------------------------------------------
# rollouts


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int
    n_rollouts: int
    master_seed: int = 0
    n_jobs: int = 1
    chunk_size: int = 1024

    def __post_init__(self):
        if self.horizon < 1 or self.n_rollouts < 1:
            raise ValueError("horizon and n_rollouts must be positive")
        if self.chunk_size < 1 or self.n_jobs < 1:
            raise ValueError("chunk_size and n_jobs must be positive")


def noise_stream(master_seed: int, rollout: int, stream: int, n_words: int) -> Array:
    """Uniforms in (0, 1) from a Philox stream keyed by (seed, rollout, stream).

    Word ``k`` of the result depends only on the key and ``k``, so the noise
    at step ``t`` is addressable and independent of scheduling.
    """
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, (rollout << 1) | stream], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(n_words)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_noise(master_seed: int, rollout: int, horizon: int, n_u: int) -> Array:
    """Standard-normal draws z_t, shape (horizon, n_u), for one rollout."""
    return ndtri(noise_stream(master_seed, rollout, 0, horizon * n_u)).reshape(horizon, n_u)


@dataclass(frozen=True)
class Trajectory:
    """One controlled trajectory shared by the stochastic and deterministic views."""

    states: Array  # (T+1, n_x)
    noises: Array  # (T, n_u)
    means: Array  # (T, n_u)
    controls: Array  # (T, n_u)
    costs_S: Array  # (T,)
    costs_D: Array  # (T,)
    gamma: float

    @property
    def discount(self) -> Array:
        return self.gamma ** np.arange(self.horizon)

    @property
    def horizon(self) -> int:
        return self.costs_S.shape[0]


@dataclass(frozen=True)
class Rollouts:
    """A batch of trajectories stored as stacked arrays.

    ``first`` is the global index of the first rollout in the batch.
    """

    states: Array  # (N, T+1, n_x)
    noises: Array  # (N, T, n_u)
    means: Array  # (N, T, n_u)
    controls: Array  # (N, T, n_u)
    costs_S: Array  # (N, T)
    costs_D: Array  # (N, T)
    gamma: float
    first: int = 0

    @property
    def discount(self) -> Array:
        return self.gamma ** np.arange(self.horizon)

    @property
    def horizon(self) -> int:
        return self.costs_S.shape[1]

    def __len__(self) -> int:
        return self.costs_S.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(
            self.states[i], self.noises[i], self.means[i], self.controls[i],
            self.costs_S[i], self.costs_D[i], self.gamma,
        )

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))

    def visited(self) -> tuple[Array, Array, Array, Array]:
        """Flattened (x_t, mu_t, u_t, x_{t+1}) over all rollouts and steps."""
        n_x = self.states.shape[2]
        n_u = self.controls.shape[2]
        return (
            self.states[:, :-1].reshape(-1, n_x),
            self.means.reshape(-1, n_u),
            self.controls.reshape(-1, n_u),
            self.states[:, 1:].reshape(-1, n_x),
        )

    @staticmethod
    def concatenate(parts: Sequence["Rollouts"]) -> "Rollouts":
        return Rollouts(
            *(np.concatenate([getattr(p, k) for p in parts]) for k in
              ("states", "noises", "means", "controls", "costs_S", "costs_D")),
            gamma=parts[0].gamma,
            first=parts[0].first,
        )


def _simulate(mdp: QGMDP, policy: GaussianPolicy, cfg: RolloutConfig, first: int, count: int) -> Rollouts:
    T, n_x, n_u = cfg.horizon, mdp.n_x, mdp.n_u
    idx = range(first, first + count)
    Z = np.stack([standard_noise(cfg.master_seed, i, T, n_u) for i in idx])
    U0 = np.stack([noise_stream(cfg.master_seed, i, 1, n_x) for i in idx])
    X = mdp.p0.sample(U0)

    states = np.empty((count, T + 1, n_x))
    noises = np.empty((count, T, n_u))
    means = np.empty((count, T, n_u))
    controls = np.empty((count, T, n_u))
    costs_S = np.empty((count, T))
    costs_D = np.empty((count, T))
    states[:, 0] = X
    const_chol = None if mdp.state_dependent_noise else np.linalg.cholesky(mdp.Sigma)
    for t in range(T):
        mu = policy.mean(X)
        if const_chol is None:
            d = np.einsum("nij,nj->ni", mdp.chol_at(X), Z[:, t])
        else:
            d = Z[:, t] @ const_chol.T
        u = mu + d
        cS = mdp.cost(X, u)
        cD = mdp.cost(X, mu)
        if not (np.all(np.isfinite(cS)) and np.all(np.isfinite(cD))):
            raise DivergenceError(t, "cost")
        X = np.asarray(mdp.f(X, u), dtype=float).reshape(count, n_x)
        if not np.all(np.isfinite(X)):
            raise DivergenceError(t + 1, "state")
        noises[:, t] = d
        means[:, t] = mu
        controls[:, t] = u
        costs_S[:, t] = cS
        costs_D[:, t] = cD
        states[:, t + 1] = X
    return Rollouts(states, noises, means, controls, costs_S, costs_D, mdp.gamma, first)


def _chunks(cfg: RolloutConfig) -> list[tuple[int, int]]:
    return [(s, min(cfg.chunk_size, cfg.n_rollouts - s)) for s in range(0, cfg.n_rollouts, cfg.chunk_size)]


def iter_rollouts(mdp: QGMDP, policy: GaussianPolicy, cfg: RolloutConfig) -> Iterator[Rollouts]:
    """Yield rollouts in fixed-size chunks, in index order.

    Chunk boundaries depend only on ``chunk_size``, and noise only on the
    rollout index, so ``n_jobs`` never changes any number.
    """
    if policy.n_u != mdp.n_u:
        raise ValueError("policy and MDP control dimensions differ")
    chunks = _chunks(cfg)
    if cfg.n_jobs == 1 or len(chunks) == 1:
        for s, c in chunks:
            yield _simulate(mdp, policy, cfg, s, c)
        return
    with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
        # bounded look-ahead keeps memory proportional to n_jobs
        pending = []
        it = iter(chunks)
        for s, c in it:
            pending.append(pool.submit(_simulate, mdp, policy, cfg, s, c))
            if len(pending) >= 2 * cfg.n_jobs:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()


def rollout(mdp: QGMDP, policy: GaussianPolicy, cfg: RolloutConfig) -> Rollouts:
    """Simulate ``cfg.n_rollouts`` trajectories of length ``cfg.horizon``."""
    return Rollouts.concatenate(list(iter_rollouts(mdp, policy, cfg)))


def discounted_return(traj: Union[Trajectory, Rollouts], mode: str = "D") -> tuple:
    """Truncated discounted return and an analytic bound on the neglected tail.

    Returns ``(value, tail_bound)``; ``value`` is an array for a batch.
    """
    costs = _mode_costs(traj, mode)
    T = costs.shape[-1]
    gamma = traj.gamma
    value = costs @ (gamma ** np.arange(T))
    tail = gamma**T * np.max(np.abs(costs), initial=0.0) / (1.0 - gamma)
    return value, float(tail)


def returns_to_go(costs: Array, gamma: float) -> Array:
    return kernels.return_to_go(np.ascontiguousarray(costs, dtype=np.float64), gamma)


def _mode_costs(traj, mode: str) -> Array:
    if mode == "S":
        return traj.costs_S
    if mode == "D":
        return traj.costs_D
    raise ValueError(f"mode must be 'S' or 'D', got {mode!r}")


def step_views(mdp: QGMDP, policy: GaussianPolicy, X: Array, Z: Array) -> tuple[Array, Array]:
    """Next states under both formulations for the same standard noise ``Z``.

    Stochastic view: the policy emits ``u = mu + d`` and the simulator is
    deterministic. Deterministic view: the policy emits ``mu`` and the
    dynamics inject ``d`` before calling the simulator.
    """
    mu = policy.mean(X)
    d = np.einsum("nij,nj->ni", mdp.chol_at(X), Z)
    u_S = mu + d
    x_S = mdp.f(X, u_S)

    def noisy_dynamics(X, u):
        return mdp.f(X, u + d)

    x_D = noisy_dynamics(X, mu)
    return np.asarray(x_S), np.asarray(x_D)
