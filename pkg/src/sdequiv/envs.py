"""Benchmark environments and their analytic oracles."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .core import DiagonalGaussian, FiniteSupport, GaussianPolicy, QGMDP, linear_policy

LYAP_TOL = 1e-12
LYAP_MAXITER = 200_000


def _as_matrix(a, rows=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(rows or a.size, -1) if rows else np.diag(a)
    return a


def make_p0(spec) -> FiniteSupport | DiagonalGaussian:
    """Build p0 from ``{"atoms": [...], "weights": [...]}`` or ``{"mean": .., "var": ..}``."""
    if isinstance(spec, (FiniteSupport, DiagonalGaussian)):
        return spec
    if "atoms" in spec:
        atoms = np.asarray(spec["atoms"], dtype=float)
        atoms = atoms.reshape(len(atoms), -1)
        weights = spec.get("weights")
        if weights is None:
            weights = np.full(len(atoms), 1.0 / len(atoms))
        return FiniteSupport(atoms, weights)
    return DiagonalGaussian(spec["mean"], spec["var"])


@dataclass
class LQGEnv:
    """Linear dynamics ``x' = A x + B u``, cost ``x'Qx + u.r + u'Ru``, policy ``u = Theta x``."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Sigma: np.ndarray
    gamma: float
    p0: object = None
    r: Optional[np.ndarray] = None
    Theta: Optional[np.ndarray] = None
    quartic: float = 0.0
    name: str = "lqg"

    def __post_init__(self):
        self.A = _as_matrix(self.A)
        n_x = self.A.shape[0]
        B = np.asarray(self.B, dtype=float)
        self.B = B.reshape(n_x, -1)
        n_u = self.B.shape[1]
        self.Q = _as_matrix(self.Q)
        self.R = _as_matrix(self.R)
        self.Sigma = _as_matrix(self.Sigma)
        self.r = np.zeros(n_u) if self.r is None else np.asarray(self.r, dtype=float).reshape(n_u)
        if self.p0 is None:
            self.p0 = FiniteSupport(np.ones((1, n_x)), [1.0])
        self.p0 = make_p0(self.p0)
        if self.Theta is not None:
            self.Theta = np.asarray(self.Theta, dtype=float).reshape(n_u, n_x)
            check_stable(self, self.Theta)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def mdp(self, **overrides) -> QGMDP:
        A, B, Q, r = self.A, self.B, self.Q, self.r
        kw = dict(
            n_x=self.n_x, n_u=self.n_u,
            f=lambda X, U: X @ A.T + U @ B.T,
            q=lambda X: np.einsum("ni,ij,nj->n", X, Q, X),
            r=lambda X: np.broadcast_to(r, (X.shape[0], r.size)),
            R=self.R, Sigma=self.Sigma, gamma=self.gamma, p0=self.p0,
            f_jac_u=lambda X, U: np.broadcast_to(B, (X.shape[0],) + B.shape),
            quartic=self.quartic,
            name=self.name,
        )
        kw.update(overrides)
        return QGMDP(**kw)

    def policy(self, Theta=None) -> GaussianPolicy:
        Theta = self.Theta if Theta is None else Theta
        if Theta is None:
            raise ValueError("no policy gain given")
        return linear_policy(np.asarray(Theta, dtype=float).reshape(self.n_u, self.n_x), "state")

    def stationary_std(self, Theta=None) -> np.ndarray:
        """Per-axis std of the closed-loop stationary distribution (undiscounted)."""
        Theta = self.Theta if Theta is None else np.asarray(Theta).reshape(self.n_u, self.n_x)
        Abar = self.A + self.B @ Theta
        W = self.B @ self.Sigma @ self.B.T
        S = scipy.linalg.solve_discrete_lyapunov(Abar, W)
        return np.sqrt(np.diag(S))


def check_stable(env: LQGEnv, Theta) -> None:
    Abar = env.A + env.B @ np.asarray(Theta).reshape(env.n_u, env.n_x)
    rad = np.sqrt(env.gamma) * np.max(np.abs(np.linalg.eigvals(Abar)))
    if rad >= 1.0:
        raise ValueError(f"closed loop not discounted-stable: sqrt(gamma)*rho(A+B Theta) = {rad:.4f}")


def discounted_lyapunov(Abar, Qbar, gamma, tol=LYAP_TOL, maxiter=LYAP_MAXITER):
    """Fixed-point iteration for ``P = Qbar + gamma Abar' P Abar``."""
    P = np.array(Qbar, dtype=float)
    for _ in range(maxiter):
        Pn = Qbar + gamma * Abar.T @ P @ Abar
        if not np.all(np.isfinite(Pn)):
            break
        if np.max(np.abs(Pn - P)) <= tol * max(1.0, np.max(np.abs(Pn))):
            return 0.5 * (Pn + Pn.T)
        P = Pn
    raise ArithmeticError("discounted Lyapunov iteration diverged or did not converge")


def lqg_value_oracle(env: LQGEnv, Theta, mode: str = "D") -> tuple[np.ndarray, float]:
    """Closed-form fixed-policy value ``v(x) = x'Px + k`` for ``u = Theta x``."""
    if np.any(env.r != 0):
        raise ValueError("closed-form oracle assumes r = 0 (otherwise v has a linear term)")
    Theta = np.asarray(Theta, dtype=float).reshape(env.n_u, env.n_x)
    check_stable(env, Theta)
    Abar = env.A + env.B @ Theta
    Qbar = env.Q + Theta.T @ env.R @ Theta
    P = discounted_lyapunov(Abar, Qbar, env.gamma)
    g = env.gamma
    k = g * np.trace(env.B.T @ P @ env.B @ env.Sigma) / (1.0 - g)
    if mode == "S":
        k += np.trace(env.R @ env.Sigma) / (1.0 - g)
    elif mode != "D":
        raise ValueError(f"mode must be 'S' or 'D', got {mode!r}")
    return P, float(k)


@dataclass(frozen=True)
class QuadraticValue:
    """``v(x) = x'Px + k`` with the value-field interface (call, gradient, hessian)."""

    P: np.ndarray
    k: float

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.einsum("ni,ij,nj->n", X, self.P, X) + self.k

    def value(self, X) -> np.ndarray:
        return self(X)

    def gradient(self, X) -> np.ndarray:
        return np.atleast_2d(X) @ (self.P + self.P.T)

    def hessian(self, X) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(self.P + self.P.T, (n,) + self.P.shape).copy()


def lqg_value_function(env: LQGEnv, Theta, mode: str = "D") -> QuadraticValue:
    P, k = lqg_value_oracle(env, Theta, mode)
    return QuadraticValue(P, k)


def lqg_performance(env: LQGEnv, Theta, mode: str = "D") -> float:
    P, k = lqg_value_oracle(env, Theta, mode)
    return float(np.trace(P @ env.p0.second_moment()) + k)


def lqg_gradient_oracle(env: LQGEnv, Theta) -> np.ndarray:
    """dJ/dTheta (shape of Theta) from the Lyapunov sensitivity equations.

    The same for both views, since they differ by a Theta-independent constant.
    """
    Theta = np.asarray(Theta, dtype=float).reshape(env.n_u, env.n_x)
    P, _ = lqg_value_oracle(env, Theta, "D")
    Abar = env.A + env.B @ Theta
    g = env.gamma
    M0 = env.p0.second_moment()
    grad = np.zeros_like(Theta)
    for i in range(env.n_u):
        for j in range(env.n_x):
            E = np.zeros_like(Theta)
            E[i, j] = 1.0
            dA = env.B @ E
            S = E.T @ env.R @ Theta + Theta.T @ env.R @ E + g * (dA.T @ P @ Abar + Abar.T @ P @ dA)
            dP = discounted_lyapunov(Abar, S, g)
            dk = g * np.trace(env.B.T @ dP @ env.B @ env.Sigma) / (1.0 - g)
            grad[i, j] = np.trace(dP @ M0) + dk
    return grad


def riccati_gain(env: LQGEnv) -> tuple[np.ndarray, np.ndarray]:
    """Optimal discounted LQR gain ``Theta*`` and cost matrix, via the DARE."""
    sg = np.sqrt(env.gamma)
    X = scipy.linalg.solve_discrete_are(sg * env.A, sg * env.B, env.Q, env.R)
    K = -env.gamma * np.linalg.solve(env.R + env.gamma * env.B.T @ X @ env.B, env.B.T @ X @ env.A)
    return K, X


@dataclass
class NL1DEnv:
    """Scalar ``x' = a tanh(x) + b u``, ``q = x^2``, ``r(x) = c x``; policy ``mu = th0 x + th1``."""

    a: float = 1.5
    b: float = 0.5
    c: float = 0.2
    R: float = 0.1
    Sigma: float = 0.04
    gamma: float = 0.9
    p0: object = None
    theta: np.ndarray = field(default_factory=lambda: np.array([-0.4, 0.1]))
    quartic: float = 0.0
    name: str = "nl1d"

    def __post_init__(self):
        if self.p0 is None:
            self.p0 = FiniteSupport([[0.5]], [1.0])
        self.p0 = make_p0(self.p0)
        self.theta = np.asarray(self.theta, dtype=float).ravel()

    def mdp(self, **overrides) -> QGMDP:
        a, b, c = self.a, self.b, self.c
        kw = dict(
            n_x=1, n_u=1,
            f=lambda X, U: a * np.tanh(X) + b * U,
            q=lambda X: X[:, 0] ** 2,
            r=lambda X: c * X,
            R=self.R, Sigma=self.Sigma, gamma=self.gamma, p0=self.p0,
            f_jac_u=lambda X, U: np.full((X.shape[0], 1, 1), b),
            quartic=self.quartic,
            name=self.name,
        )
        kw.update(overrides)
        return QGMDP(**kw)

    def policy(self, theta=None) -> GaussianPolicy:
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        return linear_policy(theta.reshape(1, 2), "affine")

    def half_width(self) -> float:
        """Grid half-width covering the reachable set up to 6 noise std."""
        th = np.abs(self.theta)
        sig = np.sqrt(self.Sigma)
        gain = abs(self.b) * th[0]
        if gain >= 1:
            return 10.0
        return float((abs(self.a) + abs(self.b) * (th[1] + 6 * sig)) / (1 - gain)) + 0.5


def state_dependent_variant(mdp: QGMDP, scale: float = 0.5, probes: Optional[np.ndarray] = None) -> QGMDP:
    """Same MDP with ``Sigma(x) = s(x) Sigma`` and ``R(x) = alpha Sigma(x)^-1``.

    ``s(x) = 1 + scale * tanh(|x|^2)``, ``alpha = tr(R Sigma)/n_u``.
    """
    S0 = np.asarray(mdp.Sigma, dtype=float)
    R0 = np.asarray(mdp.R, dtype=float)
    alpha = float(np.trace(R0 @ S0) / mdp.n_u)
    S0inv = np.linalg.inv(S0)

    def s(X):
        return 1.0 + scale * np.tanh(np.sum(X**2, axis=1))

    def Sigma(X):
        return s(X)[:, None, None] * S0

    def R(X):
        return (alpha / s(X))[:, None, None] * S0inv

    if probes is None:
        probes = np.random.default_rng(0).normal(0, 2, (64, mdp.n_x))
    return replace(mdp, Sigma=Sigma, R=R, probe_states=probes, name=mdp.name + "+state-dep")
