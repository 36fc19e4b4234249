"""ATE estimators on complete feature matrices and the two latent strategies.

Nuisance models are ridge-penalized linear (outcome surfaces) and logistic
(propensity) regressions with unpenalized intercepts. ``aipw`` implements the
augmented IPW estimator, ``regression_adjust`` the OLS coefficient of W.
``mdc_process`` plugs posterior means of the latent code into either;
``mdc_mi`` runs AIPW on B posterior draws and pools them with Rubin's rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .miwae import LatentModel, posterior_mean, posterior_resample

Z95 = float(norm.ppf(0.975))


class SeparationError(ValueError):
    """Logistic fit diverges; the classes are (quasi-)separable."""


class RankDeficientError(ValueError):
    pass


@dataclass
class AteEstimate:
    tau_hat: float
    per_draw: list
    within_variance: float
    between_variance: float
    total_variance: float
    ci_95: tuple
    method: str = ""

    @classmethod
    def single(cls, tau: float, variance: float, method: str = "") -> "AteEstimate":
        half = Z95 * np.sqrt(variance)
        return cls(tau, [tau], variance, 0.0, variance, (tau - half, tau + half), method)


@dataclass
class RubinResult:
    tau_hat: float
    within_variance: float
    between_variance: float
    total_variance: float
    ci_95: tuple


def rubin_aggregate(estimates, within_variances) -> RubinResult:
    """Pool B estimates: mean, W-bar + (1 + 1/B) * between, normal 95% interval."""
    q = np.asarray(estimates, dtype=np.float64)
    u = np.asarray(within_variances, dtype=np.float64)
    if q.size == 0:
        raise ValueError("no estimates to aggregate")
    if q.shape != u.shape:
        raise ValueError("estimates and within_variances differ in length")
    if np.any(u < 0):
        raise ValueError("within variances must be non-negative")
    B = q.size
    tau = float(q.mean()) if B > 1 else float(q[0])
    w_bar = float(u.mean()) if B > 1 else float(u[0])
    between = float(q.var(ddof=1)) if B > 1 else 0.0
    total = w_bar + (1.0 + 1.0 / B) * between
    half = Z95 * np.sqrt(total)
    return RubinResult(tau, w_bar, between, total, (tau - half, tau + half))


def _design(features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if not np.all(np.isfinite(F)):
        raise ValueError("features must be complete and finite")
    return F


def fit_linear(features, targets, lam: float = 0.0) -> np.ndarray:
    """Ridge regression with unpenalized intercept.

    Returns ``[intercept, slopes...]``. Minimizes
    ``||y - b0 - X b||^2 + lam * ||b||^2``.
    """
    X = _design(features)
    y = np.asarray(targets, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    G = Xc.T @ Xc
    if lam == 0 and X.shape[1] and np.linalg.matrix_rank(Xc) < X.shape[1]:
        raise RankDeficientError("design is rank deficient; use lambda > 0")
    slopes = np.linalg.solve(G + lam * np.eye(X.shape[1]), Xc.T @ (y - ym)) if X.shape[1] else np.empty(0)
    return np.concatenate([[ym - xm @ slopes], slopes])


def predict_linear(coef: np.ndarray, features) -> np.ndarray:
    return coef[0] + _design(features) @ coef[1:]


def fit_logistic(features, labels, lam: float = 0.0, tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Penalized logistic regression by damped Newton steps.

    Maximizes ``sum log-lik - lam / 2 * ||b||^2`` (intercept unpenalized) until
    the gradient norm drops below ``tol``. Returns ``[intercept, slopes...]``.
    """
    X = _design(features)
    y = np.asarray(labels, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    n, q = X.shape
    A = np.column_stack([np.ones(n), X])
    pen = np.full(q + 1, lam)
    pen[0] = 0.0
    ybar = y.mean()
    beta = np.zeros(q + 1)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = A @ b
        return np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(pen * b * b)

    f = objective(beta)
    for _ in range(max_iter):
        mu = expit(A @ beta)
        grad = A.T @ (y - mu) - pen * beta
        if np.linalg.norm(grad) < tol:
            break
        H = (A * (mu * (1 - mu))[:, None]).T @ A + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as err:
            raise SeparationError("singular Hessian; classes look separable, use lambda > 0") from err
        t = 1.0
        while t > 1e-10:
            f_new = objective(beta + t * step)
            if f_new >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        beta = beta + t * step
        f = f_new
        if lam == 0 and np.max(np.abs(beta)) > 1e6:
            raise SeparationError("coefficients diverge; classes are separable, use lambda > 0")
    else:
        if lam == 0:
            raise SeparationError("Newton did not converge; classes look separable, use lambda > 0")
    if lam == 0:
        fitted = expit(A @ beta)
        if np.all(np.abs(fitted - y) < 1e-6):
            raise SeparationError("perfect separation; use lambda > 0")
    return beta


def predict_logistic(coef: np.ndarray, features) -> np.ndarray:
    return expit(coef[0] + _design(features) @ coef[1:])


@dataclass
class NuisanceFit:
    propensity_coef: Optional[np.ndarray]
    mu0_coef: Optional[np.ndarray]
    mu1_coef: Optional[np.ndarray]
    lam: float = 0.0
    eta_clip: float = 0.01
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.eta_clip < 0.5:
            raise ValueError("eta_clip must lie in (0, 0.5)")


def _arms(W) -> np.ndarray:
    W = np.asarray(W)
    if not np.isin(W, (0, 1)).all():
        raise ValueError("W must be binary")
    W = W.astype(bool)
    if W.all() or not W.any():
        raise ValueError("both treatment arms must be non-empty")
    return W


def aipw_scores(features, W, Y, lam=0.0, eta_clip=0.01, propensity=None, mu0=None, mu1=None):
    """Per-unit doubly robust summands and the fitted nuisances.

    ``propensity``, ``mu0`` and ``mu1`` accept arrays of length n to bypass
    the corresponding fitted model.
    """
    F = _design(features)
    T = _arms(W)
    Y = np.asarray(Y, dtype=np.float64)
    fit = NuisanceFit(None, None, None, lam, eta_clip)
    if propensity is None:
        fit.propensity_coef = fit_logistic(F, T, lam)
        e = predict_logistic(fit.propensity_coef, F)
    else:
        e = np.broadcast_to(np.asarray(propensity, dtype=np.float64), Y.shape)
    e = np.clip(e, eta_clip, 1.0 - eta_clip)
    if mu1 is None:
        fit.mu1_coef = fit_linear(F[T], Y[T], lam)
        m1 = predict_linear(fit.mu1_coef, F)
    else:
        m1 = np.broadcast_to(np.asarray(mu1, dtype=np.float64), Y.shape)
    if mu0 is None:
        fit.mu0_coef = fit_linear(F[~T], Y[~T], lam)
        m0 = predict_linear(fit.mu0_coef, F)
    else:
        m0 = np.broadcast_to(np.asarray(mu0, dtype=np.float64), Y.shape)
    psi = m1 - m0 + T * (Y - m1) / e - (~T) * (Y - m0) / (1.0 - e)
    fit.extra["propensity"] = e
    return psi, fit


def _cross_fit_scores(F, W, Y, lam, eta_clip, folds, seed):
    n = len(Y)
    psi = np.empty(n)
    parts = np.array_split(np.random.default_rng(seed).permutation(n), folds)
    T = _arms(W)
    for part in parts:
        train = np.setdiff1d(np.arange(n), part)
        Tt = T[train]
        e = predict_logistic(fit_logistic(F[train], Tt, lam), F[part])
        e = np.clip(e, eta_clip, 1 - eta_clip)
        m1 = predict_linear(fit_linear(F[train][Tt], Y[train][Tt], lam), F[part])
        m0 = predict_linear(fit_linear(F[train][~Tt], Y[train][~Tt], lam), F[part])
        Tp = T[part]
        psi[part] = m1 - m0 + Tp * (Y[part] - m1) / e - (~Tp) * (Y[part] - m0) / (1 - e)
    return psi


def aipw(
    features,
    W,
    Y,
    lam: float = 0.0,
    eta_clip: float = 0.01,
    *,
    propensity=None,
    mu0=None,
    mu1=None,
    cross_fit: int = 0,
    seed=None,
) -> AteEstimate:
    """Doubly robust ATE estimate on complete features.

    Args:
        features: (n, q) complete covariates.
        W: binary treatment.
        Y: outcomes.
        lam: ridge penalty for all three nuisance fits.
        eta_clip: propensities are clipped to [eta_clip, 1 - eta_clip].
        propensity, mu0, mu1: optional injected nuisance values.
        cross_fit: number of folds for cross-fitting (0 = no cross-fitting).

    The within variance is the sample variance of the per-unit scores
    divided by n.
    """
    if not 0.0 < eta_clip < 0.5:
        raise ValueError("eta_clip must lie in (0, 0.5)")
    if cross_fit:
        if any(v is not None for v in (propensity, mu0, mu1)):
            raise ValueError("cross-fitting does not take injected nuisances")
        psi = _cross_fit_scores(_design(features), W, np.asarray(Y, float), lam, eta_clip, cross_fit, seed)
    else:
        psi, _ = aipw_scores(features, W, Y, lam, eta_clip, propensity, mu0, mu1)
    n = len(psi)
    return AteEstimate.single(float(psi.mean()), float(psi.var(ddof=1) / n), "dr")


def regression_adjust(features, W, Y) -> AteEstimate:
    """OLS of Y on [1, features, W]; the estimate is the W coefficient.

    The reported variance is the classical homoskedastic OLS variance of that
    coefficient.
    """
    F = _design(features)
    Wv = np.asarray(W, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    A = np.column_stack([np.ones(len(Y)), F, Wv])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise RankDeficientError("collinear design: [1, features, W] is not full rank")
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ coef
    dof = max(len(Y) - A.shape[1], 1)
    s2 = resid @ resid / dof
    var = float(s2 * np.linalg.inv(A.T @ A)[-1, -1])
    return AteEstimate.single(float(coef[-1]), var, "regression")


def estimate(features, W, Y, mode: str = "dr", lam: float = 0.0, eta_clip: float = 0.01) -> AteEstimate:
    if mode == "dr":
        return aipw(features, W, Y, lam, eta_clip)
    if mode == "regression":
        return regression_adjust(features, W, Y)
    raise ValueError(f"unknown estimator mode {mode!r}; expected 'dr' or 'regression'")


def mdc_process(
    model: LatentModel,
    X_star,
    W,
    Y,
    mode: str = "dr",
    L: int = 10_000,
    lam: float = 0.0,
    eta_clip: float = 0.01,
    seed=None,
) -> AteEstimate:
    """Estimate the ATE with posterior means of the latent code as covariates."""
    if mode not in ("dr", "regression"):
        raise ValueError(f"unknown estimator mode {mode!r}; expected 'dr' or 'regression'")
    Z_hat = posterior_mean(model, X_star, L, seed)
    est = estimate(Z_hat, W, Y, mode, lam, eta_clip)
    est.method = f"MDC.process-{mode}"
    return est


class DrawFailedError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        super().__init__(f"draw {index} failed: {cause}")


def pool(estimates: list[AteEstimate], method: str = "") -> AteEstimate:
    """Rubin-pool single-table estimates into one AteEstimate."""
    taus = [e.tau_hat for e in estimates]
    res = rubin_aggregate(taus, [e.within_variance for e in estimates])
    return AteEstimate(
        res.tau_hat, taus, res.within_variance, res.between_variance,
        res.total_variance, res.ci_95, method,
    )


def mdc_mi(
    model: LatentModel,
    X_star,
    W,
    Y,
    B: int = 500,
    L: int = 10_000,
    lam: float = 0.0,
    eta_clip: float = 0.01,
    seed=None,
) -> AteEstimate:
    """AIPW on each of B posterior latent tables, pooled by Rubin's rules."""
    if B < 1:
        raise ValueError("B must be >= 1")
    tables = posterior_resample(model, X_star, L, B, seed).draws
    per_draw = []
    for j, Zj in enumerate(tables):
        try:
            per_draw.append(aipw(Zj, W, Y, lam, eta_clip))
        except ValueError as err:
            raise DrawFailedError(j, err) from err
    return pool(per_draw, "MDC.mi")
