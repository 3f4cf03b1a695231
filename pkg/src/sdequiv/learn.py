"""Model-based actor-critic: a linear critic, K-estimators and a training loop."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import DivergenceError, GaussianPolicy, QGMDP, RolloutConfig, Rollouts, discounted_return, rollout
from .gauss import DEFAULT_ORDER, make_quadrature
from .gradients import Estimate, fisher_contribs, natural_gradient

log = logging.getLogger(__name__)

K_KINDS = ("KS", "KD", "KS_baselined", "KD_baselined")
CRITIC_RIDGE = 1e-8
COND_LIMIT = 1e14


# ---------------------------------------------------------------------------
# features


class PolynomialFeatures:
    """All monomials of total degree <= ``degree`` (constant first)."""

    def __init__(self, n_x: int, degree: int = 2):
        self.n_x = n_x
        self.degree = degree
        exps = []
        for d in range(degree + 1):
            for combo in itertools.combinations_with_replacement(range(n_x), d):
                e = np.zeros(n_x, dtype=int)
                for i in combo:
                    e[i] += 1
                exps.append(e)
        self.exponents = np.array(exps)

    @property
    def size(self) -> int:
        return len(self.exponents)

    def _pow(self, X, E):
        # x**e with x**(-1) treated as 0 for derivative terms
        Ec = np.maximum(E, 0)
        out = np.ones((X.shape[0], E.shape[0]))
        table = np.empty((X.shape[0], self.degree + 1))
        table[:, 0] = 1.0
        for j in range(self.n_x):
            for k in range(1, self.degree + 1):
                table[:, k] = table[:, k - 1] * X[:, j]
            out *= np.take(table, Ec[:, j], axis=1)
        dead = np.any(E < 0, axis=1)
        if dead.any():
            out[:, dead] = 0.0
        return out

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self._pow(X, self.exponents)

    def gradient(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        G = np.empty((X.shape[0], self.size, self.n_x))
        for j in range(self.n_x):
            E = self.exponents.copy()
            E[:, j] -= 1
            G[:, :, j] = self.exponents[:, j] * self._pow(X, E)
        return G

    def hessian(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        H = np.empty((X.shape[0], self.size, self.n_x, self.n_x))
        for i in range(self.n_x):
            for j in range(self.n_x):
                E = self.exponents.copy()
                c = E[:, i].astype(float)
                E[:, i] -= 1
                c = c * E[:, j]
                E[:, j] -= 1
                H[:, :, i, j] = c * self._pow(X, E)
        return H

    def __repr__(self):
        return f"PolynomialFeatures(n_x={self.n_x}, degree={self.degree})"


class RBFFeatures:
    """Constant plus Gaussian bumps ``exp(-|x - c|^2 / (2 w^2))``."""

    def __init__(self, centres, width: float):
        self.centres = np.atleast_2d(np.asarray(centres, dtype=float))
        self.width = float(width)
        self.n_x = self.centres.shape[1]

    @property
    def size(self) -> int:
        return 1 + len(self.centres)

    def _bumps(self, X):
        D = X[:, None, :] - self.centres[None]
        return D, np.exp(-0.5 * np.sum(D**2, axis=2) / self.width**2)

    def value(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        _, B = self._bumps(X)
        return np.column_stack([np.ones(X.shape[0]), B])

    def gradient(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        D, B = self._bumps(X)
        G = -D * B[..., None] / self.width**2
        return np.concatenate([np.zeros((X.shape[0], 1, self.n_x)), G], axis=1)

    def hessian(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        D, B = self._bumps(X)
        w2 = self.width**2
        H = (np.einsum("nci,ncj->ncij", D, D) / w2**2 - np.eye(self.n_x) / w2) * B[..., None, None]
        return np.concatenate([np.zeros((X.shape[0], 1, self.n_x, self.n_x)), H], axis=1)

    def __repr__(self):
        return f"RBFFeatures(n_centres={len(self.centres)}, width={self.width})"


# ---------------------------------------------------------------------------
# critic


@dataclass(frozen=True)
class Critic:
    """``v(x) = psi(x) . omega`` with fit diagnostics."""

    features: object
    omega: np.ndarray
    mse: float = float("nan")
    n_samples: int = 0
    mode: str = "D"

    def __call__(self, X) -> np.ndarray:
        return self.value(X)

    def value(self, X) -> np.ndarray:
        return self.features.value(X) @ self.omega

    def gradient(self, X) -> np.ndarray:
        return np.einsum("nkd,k->nd", self.features.gradient(X), self.omega)

    def hessian(self, X) -> np.ndarray:
        return np.einsum("nkij,k->nij", self.features.hessian(X), self.omega)

    def with_omega(self, omega) -> "Critic":
        return replace(self, omega=np.asarray(omega, dtype=float))


def fit_critic(rollouts: Rollouts, features, gamma: float, mode: str = "D",
               mdp: Optional[QGMDP] = None, inner: str = "quadrature",
               order: int = DEFAULT_ORDER, ridge: float = CRITIC_RIDGE) -> Critic:
    """Least-squares Bellman-residual fit of a linear critic.

    ``inner="sample"`` uses the observed next state, which is the textbook
    residual but biased by the next-state variance. ``inner="quadrature"``
    (default, needs ``mdp``) averages the next-state features over the
    control noise at each visited state. The ridge is relative to the
    mean eigenvalue of the normal matrix.
    """
    if mode not in ("S", "D"):
        raise ValueError(f"mode must be 'S' or 'D', got {mode!r}")
    X, Mu, _, Xn = rollouts.visited()
    c = (rollouts.costs_S if mode == "S" else rollouts.costs_D).reshape(-1)
    n_w = features.size
    if len(np.unique(X, axis=0)) < n_w:
        raise ValueError(f"need at least {n_w} distinct visited states to fit {n_w} weights")
    psi = features.value(X)
    if inner == "sample":
        psi_next = features.value(Xn)
    elif inner == "quadrature":
        if mdp is None:
            raise ValueError("quadrature inner expectation needs the MDP")
        rule = make_quadrature(mdp.n_u, order)
        N, K = X.shape[0], rule.weights.size
        U = Mu[:, None, :] + np.einsum("nij,kj->nki", mdp.chol_at(X), rule.standard)
        Y = mdp.f(np.repeat(X, K, axis=0), U.reshape(N * K, mdp.n_u))
        psi_next = np.einsum("k,nkw->nw", rule.weights, features.value(Y).reshape(N, K, n_w))
    else:
        raise ValueError(f"inner must be 'sample' or 'quadrature', got {inner!r}")
    A = psi - gamma * psi_next
    G = A.T @ A / len(c)
    lam = ridge * np.trace(G) / n_w
    Gr = G + lam * np.eye(n_w)
    if np.linalg.cond(Gr) > COND_LIMIT:
        raise np.linalg.LinAlgError("critic normal equations are rank deficient beyond ridge rescue")
    omega = np.linalg.solve(Gr, A.T @ c / len(c))
    mse = float(np.mean((A @ omega - c) ** 2))
    return Critic(features, omega, mse, len(c), mode)


def critic_error(critic, reference, X) -> float:
    """Max |critic - reference| over probe states (e.g. against a grid value field)."""
    X = np.atleast_2d(X)
    return float(np.max(np.abs(critic(X) - reference(X))))


# ---------------------------------------------------------------------------
# K-estimators


def _sigma_inv_times(mdp: QGMDP, X, V):
    if mdp.state_dependent_noise:
        return np.linalg.solve(mdp.sigma_at(X), V[..., None])[..., 0]
    return np.linalg.solve(mdp.Sigma, V.T).T


def _kd(mdp: QGMDP, critic, X, U):
    return np.einsum("nxi,nx->ni", mdp.jac_u(X, U), critic.gradient(mdp.f(X, U)))


def k_estimator(rollouts: Rollouts, critic, mdp: QGMDP, policy: GaussianPolicy, kind: str,
                hessian: str = "gauss-newton") -> np.ndarray:
    """Per-step control-space vectors ``K(x_t, u_t)`` as (N, T, n_u).

    ``KS`` is ``Sigma^-1 (u - mu) v(f(x, u))``, ``KD`` is
    ``(df/du)' grad v(f(x, u))``. The baselined kinds subtract
    ``v(f(x, mu))`` inside the score term, or the first-order term
    ``H (u - mu)`` with ``H`` the Gauss-Newton (or finite-difference exact)
    Hessian of ``v(f(x, u))`` in ``u`` at ``mu``.
    """
    if kind not in K_KINDS:
        raise ValueError(f"kind must be one of {K_KINDS}, got {kind!r}")
    n, T, n_u = rollouts.controls.shape
    X, Mu, U, _ = rollouts.visited()
    if kind in ("KS", "KS_baselined"):
        v = critic(mdp.f(X, U))
        if kind == "KS_baselined":
            v = v - critic(mdp.f(X, Mu))
        K = _sigma_inv_times(mdp, X, U - Mu) * v[:, None]
    else:
        K = _kd(mdp, critic, X, U)
        if kind == "KD_baselined":
            K = K - np.einsum("nij,nj->ni", _control_hessian(mdp, critic, X, Mu, hessian), U - Mu)
    return K.reshape(n, T, n_u)


def _control_hessian(mdp: QGMDP, critic, X, Mu, how: str) -> np.ndarray:
    if how == "gauss-newton":
        J = mdp.jac_u(X, Mu)
        return np.einsum("nxi,nxy,nyj->nij", J, critic.hessian(mdp.f(X, Mu)), J)
    if how == "exact":
        H = np.empty((X.shape[0], mdp.n_u, mdp.n_u))
        for j in range(mdp.n_u):
            h = 1e-5 * (1.0 + np.abs(Mu[:, j]))
            Up, Um = Mu.copy(), Mu.copy()
            Up[:, j] += h
            Um[:, j] -= h
            H[:, :, j] = (_kd(mdp, critic, X, Up) - _kd(mdp, critic, X, Um)) / (2 * h)[:, None]
        return 0.5 * (H + H.transpose(0, 2, 1))
    raise ValueError(f"hessian must be 'gauss-newton' or 'exact', got {how!r}")


def _expected_cost_grad(mdp: QGMDP, X, Mu, order: int = DEFAULT_ORDER) -> np.ndarray:
    if mdp.is_quadratic:
        return mdp.cost_grad_u(X, Mu)
    rule = make_quadrature(mdp.n_u, order)
    N, K = X.shape[0], rule.weights.size
    U = Mu[:, None, :] + np.einsum("nij,kj->nki", mdp.chol_at(X), rule.standard)
    g = mdp.cost_grad_u(np.repeat(X, K, axis=0), U.reshape(N * K, mdp.n_u)).reshape(N, K, mdp.n_u)
    return np.einsum("k,nki->ni", rule.weights, g)


def policy_gradient_from_k(rollouts: Rollouts, critic, mdp: QGMDP, policy: GaussianPolicy, kind: str,
                           weighting: str = "discounted", hessian: str = "gauss-newton") -> Estimate:
    """Per-rollout ``sum_t w_t dmu/dtheta (grad_u E l(x, mu + d) + gamma K(x_t, u_t))``.

    The returned estimate's ``mean`` is the gradient and ``variance_trace``
    the spread of per-rollout contributions.
    """
    n, T, n_u = rollouts.controls.shape
    X, Mu, _, _ = rollouts.visited()
    K = k_estimator(rollouts, critic, mdp, policy, kind, hessian).reshape(n * T, n_u)
    term = _expected_cost_grad(mdp, X, Mu) + mdp.gamma * K
    g = np.einsum("npi,ni->np", policy.jacobian(X), term).reshape(n, T, -1)
    if weighting == "discounted":
        w = rollouts.discount
    elif weighting == "uniform":
        w = np.ones(T)
    else:
        raise ValueError(f"weighting must be 'discounted' or 'uniform', got {weighting!r}")
    return Estimate(np.einsum("ntp,t->np", g, w))


# ---------------------------------------------------------------------------
# training


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    iterations: int = 50
    step: float = 0.05
    kind: str = "KD_baselined"
    rollouts: RolloutConfig = field(default_factory=lambda: RolloutConfig(horizon=100, n_rollouts=200))
    eval_rollouts: RolloutConfig = field(default_factory=lambda: RolloutConfig(horizon=100, n_rollouts=1000))
    features: object = None
    critic_mode: str = "D"
    inner: str = "quadrature"
    natural: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in K_KINDS:
            raise ValueError(f"kind must be one of {K_KINDS}, got {self.kind!r}")
        if self.iterations < 0 or self.step < 0:
            raise ValueError("iterations and step must be non-negative")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    seed: int = 0
    aborted: Optional[str] = None

    COLUMNS = ("iteration", "J", "J_se", "grad_norm", "variance", "step", "seed")

    def append(self, **row):
        self.rows.append(row)

    @property
    def J(self) -> np.ndarray:
        return np.array([r["J"] for r in self.rows])

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    def to_csv(self, path) -> None:
        n_theta = len(self.thetas[0]) if self.thetas else 0
        cols = list(self.COLUMNS) + [f"theta_{i}" for i in range(n_theta)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row, th in zip(self.rows, self.thetas):
                w.writerow([row[c] for c in self.COLUMNS] + [repr(float(t)) for t in th])


def _derived_seed(seed: int, iteration: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, purpose]).generate_state(1, np.uint32)[0])


def train(mdp: QGMDP, policy_init: GaussianPolicy, cfg: TrainConfig) -> TrainLog:
    """Fixed-step gradient descent on J with a refit-from-scratch critic.

    Each iteration: simulate, fit the critic, estimate the gradient from
    the chosen K-estimator, step. ``J`` is estimated before each step on a
    fixed evaluation seed, so successive values share noise; one final row
    records ``J`` at the last parameters.
    """
    features = cfg.features or PolynomialFeatures(mdp.n_x, 2)
    eval_cfg = replace(cfg.eval_rollouts, master_seed=_derived_seed(cfg.seed, 0, 1))
    policy = policy_init
    out = TrainLog(seed=cfg.seed)

    def evaluate(pol):
        J, _ = discounted_return(rollout(mdp, pol, eval_cfg), "S")
        return float(np.mean(J)), float(np.std(J, ddof=1) / np.sqrt(len(J)))

    for it in range(cfg.iterations + 1):
        seed = _derived_seed(cfg.seed, it, 0)
        try:
            J, J_se = evaluate(policy)
            if not np.isfinite(J):
                raise DivergenceError(0, "J")
            if it == cfg.iterations:
                out.append(iteration=it, J=J, J_se=J_se, grad_norm=float("nan"), variance=float("nan"),
                           step=cfg.step, seed=seed)
                out.thetas.append(policy.theta.copy())
                break
            ro = rollout(mdp, policy, replace(cfg.rollouts, master_seed=seed))
            critic = fit_critic(ro, features, mdp.gamma, cfg.critic_mode, mdp, cfg.inner)
            est = policy_gradient_from_k(ro, critic, mdp, policy, cfg.kind)
        except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            out.aborted = f"iteration {it}: {exc}"
            log.error("training aborted at %s", out.aborted)
            raise TrainingAborted(out.aborted, out) from exc
        g = est.mean
        if cfg.natural:
            F = fisher_contribs(ro, mdp, policy, "D_metric").mean(axis=0)
            g = natural_gradient(g, F)
        out.append(iteration=it, J=J, J_se=J_se, grad_norm=float(np.linalg.norm(est.mean)),
                   variance=est.variance_trace, step=cfg.step, seed=seed)
        out.thetas.append(policy.theta.copy())
        log.info("iter %d J=%.6g |g|=%.4g", it, J, np.linalg.norm(g))
        policy = policy.with_theta(policy.theta - cfg.step * g)
    return out
