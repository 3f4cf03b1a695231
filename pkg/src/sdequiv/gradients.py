"""Monte-Carlo policy-gradient estimators, Fisher matrices and paired comparisons.

Every estimator reduces per-rollout contributions, so standard errors come
from the spread across independent rollouts. Visited states are weighted by
``gamma**t`` (sampling from the discounted density) unless
``weighting="uniform"`` is requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import stats

from .core import GaussianPolicy, QGMDP, RolloutConfig, Rollouts, iter_rollouts, returns_to_go
from .gauss import DEFAULT_ORDER, central_gradient, make_quadrature

Z99 = float(stats.norm.ppf(0.995))
CHI2_3SIGMA = float(stats.chi2.cdf(9.0, 1))  # two-sided 3-sigma coverage
INNER_BLOCK = 1 << 18  # next-state evaluations held at once


@dataclass(frozen=True)
class Estimate:
    """Mean of per-rollout contributions with its standard error."""

    contribs: np.ndarray  # (N, ...)

    @property
    def n(self) -> int:
        return self.contribs.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.contribs.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        if self.n < 2:
            return np.full(self.contribs.shape[1:], np.inf)
        return self.contribs.std(axis=0, ddof=1) / np.sqrt(self.n)

    @property
    def variance(self) -> np.ndarray:
        return self.contribs.var(axis=0, ddof=1)

    @property
    def variance_trace(self) -> float:
        return float(np.sum(self.variance))

    def __sub__(self, other: "Estimate") -> "Estimate":
        return Estimate(self.contribs - other.contribs)

    def scaled(self, k: float) -> "Estimate":
        return Estimate(self.contribs * k)


def _weights(chunk: Rollouts, weighting: str) -> np.ndarray:
    if weighting == "discounted":
        return chunk.discount
    if weighting == "uniform":
        return np.ones(chunk.horizon)
    raise ValueError(f"weighting must be 'discounted' or 'uniform', got {weighting!r}")


def _sigma_solve(mdp: QGMDP, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    if mdp.state_dependent_noise:
        return np.linalg.solve(mdp.sigma_at(X), V[..., None])[..., 0]
    return np.linalg.solve(mdp.Sigma, V.T).T


def _gather(chunks: Iterable[Rollouts], fn: Callable[[Rollouts], np.ndarray]) -> np.ndarray:
    parts = [fn(c) for c in chunks]
    if not parts:
        raise ValueError("no rollouts")
    return np.concatenate(parts)


def _source(mdp, policy, cfg, rollouts):
    if rollouts is not None:
        return [rollouts] if isinstance(rollouts, Rollouts) else list(rollouts)
    if cfg is None:
        raise ValueError("need a RolloutConfig or pre-simulated rollouts")
    return iter_rollouts(mdp, policy, cfg)


# ---------------------------------------------------------------------------
# per-chunk contributions


def stochastic_contribs(chunk: Rollouts, mdp: QGMDP, policy: GaussianPolicy,
                        weighting: str = "discounted") -> np.ndarray:
    """Per-rollout ``sum_t w_t score(x_t, u_t) G_t`` with return-to-go ``G_t``."""
    n, T = chunk.costs_S.shape
    G = returns_to_go(chunk.costs_S, mdp.gamma)
    X, Mu, U, _ = chunk.visited()
    s = np.einsum("npi,ni->np", policy.jacobian(X), _sigma_solve(mdp, X, U - Mu))
    w = _weights(chunk, weighting)
    return np.einsum("ntp,nt->np", s.reshape(n, T, -1), G * w)


def _value_gradient(value, X: np.ndarray) -> np.ndarray:
    grad = getattr(value, "gradient", None)
    if grad is not None:
        return np.asarray(grad(X))
    return central_gradient(value, X)


def deterministic_contribs(chunk: Rollouts, mdp: QGMDP, policy: GaussianPolicy, value,
                           inner: str = "quadrature", order: int = DEFAULT_ORDER,
                           weighting: str = "discounted") -> np.ndarray:
    """Per-rollout ``sum_t w_t dmu/dtheta (grad_u l(x, mu) + gamma E_d[grad_u v(f(x, mu + d))])``.

    ``inner="sample"`` replaces the noise average with the rollout's own
    draw ``d_t`` (common random numbers with the stochastic estimator).
    """
    if value is None:
        raise ValueError("the deterministic estimator needs a value function")
    n, T = chunk.costs_D.shape
    X, Mu, U, _ = chunk.visited()
    n_u = mdp.n_u
    term = mdp.cost_grad_u(X, Mu)
    if inner == "sample":
        Us = U[:, None, :]
        qw = np.ones(1)
    elif inner == "quadrature":
        rule = make_quadrature(n_u, order)
        Us = Mu[:, None, :] + np.einsum("nij,kj->nki", mdp.chol_at(X), rule.standard)
        qw = rule.weights
    else:
        raise ValueError(f"inner must be 'sample' or 'quadrature', got {inner!r}")
    K = qw.size
    inner_avg = np.empty_like(term)
    # bounded working set; rows are independent so blocking changes nothing
    step = max(1, INNER_BLOCK // K)
    for a in range(0, X.shape[0], step):
        b = min(a + step, X.shape[0])
        Xr = np.repeat(X[a:b], K, axis=0)
        Uf = Us[a:b].reshape(-1, n_u)
        gv = _value_gradient(value, mdp.f(Xr, Uf))
        du = np.einsum("nxi,nx->ni", mdp.jac_u(Xr, Uf), gv).reshape(-1, K, n_u)
        inner_avg[a:b] = np.einsum("k,nki->ni", qw, du)
    term = term + mdp.gamma * inner_avg
    g = np.einsum("npi,ni->np", policy.jacobian(X), term)
    w = _weights(chunk, weighting)
    return np.einsum("ntp,t->np", g.reshape(n, T, -1), w)


FISHER_KINDS = ("S", "D", "D_metric")


def fisher_contribs(chunk: Rollouts, mdp: QGMDP, policy: GaussianPolicy, kind: str,
                    weighting: str = "discounted") -> np.ndarray:
    if kind not in FISHER_KINDS:
        raise ValueError(f"kind must be one of {FISHER_KINDS}, got {kind!r}")
    n, T = chunk.costs_S.shape
    X, Mu, U, _ = chunk.visited()
    Jmu = policy.jacobian(X)
    if kind == "S":
        s = np.einsum("npi,ni->np", Jmu, _sigma_solve(mdp, X, U - Mu))
        outer = np.einsum("np,nq->npq", s, s)
    elif kind == "D":
        outer = np.einsum("npi,nqi->npq", Jmu, Jmu)
    else:
        if mdp.state_dependent_noise:
            SJ = np.linalg.solve(mdp.sigma_at(X)[:, None], Jmu[..., None])[..., 0]
        else:
            SJ = np.linalg.solve(mdp.Sigma, Jmu.reshape(-1, mdp.n_u).T).T.reshape(Jmu.shape)
        outer = np.einsum("npi,nqi->npq", Jmu, SJ)
        outer = 0.5 * (outer + outer.transpose(0, 2, 1))
    w = _weights(chunk, weighting)
    p = outer.shape[-1]
    return np.einsum("ntpq,t->npq", outer.reshape(n, T, p, p), w)


# ---------------------------------------------------------------------------
# public estimators


def grad_stochastic(mdp: QGMDP, policy: GaussianPolicy, cfg: Optional[RolloutConfig] = None, *,
                    rollouts=None, weighting: str = "discounted") -> Estimate:
    """Score-function (likelihood-ratio) policy gradient with empirical returns."""
    return Estimate(_gather(_source(mdp, policy, cfg, rollouts),
                            lambda c: stochastic_contribs(c, mdp, policy, weighting)))


def grad_deterministic(mdp: QGMDP, policy: GaussianPolicy, value, cfg: Optional[RolloutConfig] = None, *,
                       rollouts=None, inner: str = "quadrature", order: int = DEFAULT_ORDER,
                       weighting: str = "discounted") -> Estimate:
    """Pathwise policy gradient through a value function (grid field or critic)."""
    if value is None:
        raise ValueError("the deterministic estimator needs a value function")
    return Estimate(_gather(_source(mdp, policy, cfg, rollouts),
                            lambda c: deterministic_contribs(c, mdp, policy, value, inner, order, weighting)))


def fisher(mdp: QGMDP, policy: GaussianPolicy, cfg: Optional[RolloutConfig] = None, kind: str = "S", *,
           rollouts=None, weighting: str = "discounted") -> Estimate:
    """Discount-weighted Fisher-type matrix: score outer products (``S``),
    ``dmu dmu'`` (``D``) or ``dmu Sigma^-1 dmu'`` (``D_metric``)."""
    return Estimate(_gather(_source(mdp, policy, cfg, rollouts),
                            lambda c: fisher_contribs(c, mdp, policy, kind, weighting)))


def natural_gradient(grad, F, ridge: Optional[float] = None) -> np.ndarray:
    """Solve ``(F + ridge I) g = grad``; default ridge ``1e-8 tr(F)/n``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n = F.shape[0]
    if ridge is None:
        ridge = 1e-8 * np.trace(F) / n
    try:
        return np.linalg.solve(F + ridge * np.eye(n), np.asarray(grad, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"natural-gradient solve failed: {exc}") from None


def default_ridge(F) -> float:
    F = np.atleast_2d(F)
    return float(1e-8 * np.trace(F) / F.shape[0])


# ---------------------------------------------------------------------------
# paired comparisons


@dataclass(frozen=True)
class PairedComparison:
    """Difference of two estimators evaluated on the same rollouts."""

    diff: Estimate
    var_a: np.ndarray
    var_b: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.diff.mean

    @property
    def se(self) -> np.ndarray:
        return self.diff.se

    @property
    def ci99(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean - Z99 * self.se, self.mean + Z99 * self.se

    @property
    def contains_zero(self) -> bool:
        lo, hi = self.ci99
        return bool(np.all(lo <= 0.0) and np.all(hi >= 0.0))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.mean))

    def to_dict(self) -> dict:
        lo, hi = self.ci99
        return {
            "mean": self.mean.tolist(), "se": self.se.tolist(),
            "ci99_low": lo.tolist(), "ci99_high": hi.tolist(),
            "contains_zero": self.contains_zero, "norm": self.norm,
            "variance_a": self.var_a.tolist(), "variance_b": self.var_b.tolist(),
        }


def compare(a: Estimate, b: Estimate) -> PairedComparison:
    if a.contribs.shape != b.contribs.shape:
        raise ValueError("paired estimates must come from the same rollouts")
    return PairedComparison(a - b, a.variance, b.variance)


def paired_discrepancy(mdp: QGMDP, policy: GaussianPolicy, cfg: RolloutConfig, value, *,
                       inner: str = "sample", order: int = DEFAULT_ORDER,
                       weighting: str = "discounted") -> PairedComparison:
    """Stochastic minus deterministic gradient on shared noise streams."""
    a, b = [], []
    for chunk in iter_rollouts(mdp, policy, cfg):
        a.append(stochastic_contribs(chunk, mdp, policy, weighting))
        b.append(deterministic_contribs(chunk, mdp, policy, value, inner, order, weighting))
    return compare(Estimate(np.concatenate(a)), Estimate(np.concatenate(b)))


def within_se(estimate: Estimate, target, k: float = 3.0) -> bool:
    """``|mean - target| <= k * se`` componentwise."""
    return bool(np.all(np.abs(estimate.mean - np.asarray(target)) <= k * estimate.se))


def frobenius_test(diff: Estimate, k: float = 3.0) -> tuple[float, float]:
    """Return (||mean||_F, k * ||se||_F) for a matrix-valued paired difference."""
    return float(np.linalg.norm(diff.mean)), float(k * np.linalg.norm(diff.se))


def batch_mahalanobis(diffs: np.ndarray) -> tuple[float, float]:
    """Squared Mahalanobis distance of the batch-mean difference from zero,
    and the chi-square threshold with 3-sigma coverage."""
    B, p = diffs.shape
    m = diffs.mean(axis=0)
    C = np.cov(diffs, rowvar=False).reshape(p, p) / B
    d2 = float(m @ np.linalg.pinv(C) @ m)
    return d2, float(stats.chi2.ppf(CHI2_3SIGMA, p))


@dataclass
class GradientReport:
    grad_S: Estimate
    grad_D: Estimate
    F_S: Estimate
    F_D: Estimate
    F_D_metric: Estimate
    master_seed: int
    n_rollouts: int
    horizon: int
    n_batches: int = 20
    ridge: float = field(init=False)
    nat_S: np.ndarray = field(init=False)
    nat_D: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ridge = default_ridge(self.F_S.mean)
        self.nat_S = natural_gradient(self.grad_S.mean, self.F_S.mean, self.ridge)
        self.nat_D = natural_gradient(self.grad_D.mean, self.F_D_metric.mean, self.ridge)

    @property
    def discrepancy(self) -> PairedComparison:
        return compare(self.grad_S, self.grad_D)

    def fisher_identity(self) -> tuple[float, float]:
        return frobenius_test(self.F_S - self.F_D_metric)

    def natural_agreement(self) -> tuple[float, float]:
        """Batch-means Mahalanobis test of nat_S - nat_D (both ratios are nonlinear)."""
        B = min(self.n_batches, self.grad_S.n)
        parts = np.array_split(np.arange(self.grad_S.n), B)
        d = []
        for ix in parts:
            FS = self.F_S.contribs[ix].mean(0)
            FD = self.F_D_metric.contribs[ix].mean(0)
            d.append(natural_gradient(self.grad_S.contribs[ix].mean(0), FS, self.ridge)
                     - natural_gradient(self.grad_D.contribs[ix].mean(0), FD, self.ridge))
        return batch_mahalanobis(np.array(d))

    def is_psd(self, tol: float = 1e-9) -> bool:
        for F in (self.F_S.mean, self.F_D.mean, self.F_D_metric.mean):
            if np.max(np.abs(F - F.T)) > tol or np.min(np.linalg.eigvalsh(0.5 * (F + F.T))) < -tol:
                return False
        return True

    def to_dict(self) -> dict:
        fro, tol = self.fisher_identity()
        d2, thr = self.natural_agreement()
        return {
            "master_seed": self.master_seed, "n_rollouts": self.n_rollouts, "horizon": self.horizon,
            "grad_S": self.grad_S.mean.tolist(), "grad_S_se": self.grad_S.se.tolist(),
            "grad_D": self.grad_D.mean.tolist(), "grad_D_se": self.grad_D.se.tolist(),
            "F_S": self.F_S.mean.tolist(), "F_D": self.F_D.mean.tolist(),
            "F_D_metric": self.F_D_metric.mean.tolist(),
            "ridge": self.ridge, "nat_S": self.nat_S.tolist(), "nat_D": self.nat_D.tolist(),
            "discrepancy": self.discrepancy.to_dict(),
            "fisher_identity": {"frobenius": fro, "tolerance_3se": tol},
            "natural_agreement": {"mahalanobis2": d2, "threshold": thr},
        }


def gradient_report(mdp: QGMDP, policy: GaussianPolicy, cfg: RolloutConfig, value, *,
                    inner: str = "sample", order: int = DEFAULT_ORDER,
                    weighting: str = "discounted") -> GradientReport:
    """All estimators and Fisher matrices from one pass over shared rollouts."""
    acc = {k: [] for k in ("gS", "gD", "FS", "FD", "FDm")}
    for chunk in iter_rollouts(mdp, policy, cfg):
        acc["gS"].append(stochastic_contribs(chunk, mdp, policy, weighting))
        acc["gD"].append(deterministic_contribs(chunk, mdp, policy, value, inner, order, weighting))
        acc["FS"].append(fisher_contribs(chunk, mdp, policy, "S", weighting))
        acc["FD"].append(fisher_contribs(chunk, mdp, policy, "D", weighting))
        acc["FDm"].append(fisher_contribs(chunk, mdp, policy, "D_metric", weighting))
    e = {k: Estimate(np.concatenate(v)) for k, v in acc.items()}
    return GradientReport(e["gS"], e["gD"], e["FS"], e["FD"], e["FDm"],
                          cfg.master_seed, cfg.n_rollouts, cfg.horizon)
