"""Synthetic worlds with latent confounders and MCAR covariates.

Z ~ N(0, I_d) drives treatment (logistic-linear), outcome (linear-Gaussian
with constant effect tau) and covariates X, which come either from a low-rank
factor model (``lrmf``) or from a tanh-parameterized Gaussian (``dlvm``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

COVARIATE_MODELS = ("lrmf", "dlvm")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 1000
    p: int = 10
    d: int = 2
    covariate_model: str = "lrmf"
    missing_prob: float = 0.0
    snr: float = 10.0
    tau: float = 1.0
    seed: int = 0
    noise_sd: float = 0.1  # lrmf only
    hidden: Optional[int] = None  # dlvm only, defaults to 2 * d

    def __post_init__(self):
        if min(self.n, self.p, self.d) < 1:
            raise ValueError("n, p and d must be positive")
        if self.d > self.p:
            raise ValueError(f"d={self.d} exceeds p={self.p}")
        if not 0.0 <= self.missing_prob <= 1.0:
            raise ValueError("missing_prob must lie in [0, 1]")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.covariate_model not in COVARIATE_MODELS:
            raise ValueError(f"covariate_model must be one of {COVARIATE_MODELS}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class GroundTruth:
    Z: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    propensity: np.ndarray
    signal: np.ndarray  # beta^T Z + tau W
    noise_sd: float
    tau: float

    @property
    def mu0(self) -> np.ndarray:
        return self.Z @ self.beta

    @property
    def mu1(self) -> np.ndarray:
        return self.Z @ self.beta + self.tau


@dataclass
class IncompleteMatrix:
    """Covariates with NaN at missing entries and the matching mask (1 = missing)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")
        if not np.array_equal(np.isnan(self.values), self.mask):
            raise ValueError("mask must flag exactly the NaN entries")

    @classmethod
    def from_nan(cls, values: np.ndarray) -> "IncompleteMatrix":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isnan(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def observed(self) -> np.ndarray:
        return ~self.mask


@dataclass
class ObservationalDataset:
    X: IncompleteMatrix
    W: np.ndarray
    Y: np.ndarray
    X_complete: Optional[np.ndarray] = None
    truth: Optional[GroundTruth] = None
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    propensity: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W).astype(np.int64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        n = self.X.shape[0]
        if self.W.shape != (n,) or self.Y.shape != (n,):
            raise ValueError("W and Y must be length-n vectors")
        if not np.isin(self.W, (0, 1)).all():
            raise ValueError("W must be binary")
        if self.truth is not None:
            if self.mu0 is None:
                self.mu0 = self.truth.mu0
                self.mu1 = self.truth.mu1
            if self.Z is None:
                self.Z = self.truth.Z
            if self.propensity is None:
                self.propensity = self.truth.propensity

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def gen_latent(n: int, d: int, seed=None) -> np.ndarray:
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    return _rng(seed).standard_normal((n, d))


def gen_lrmf(Z, p: int, noise_sd: float = 0.1, seed=None, loadings=None) -> np.ndarray:
    """X = Z V^T + noise_sd * E with standard-normal loadings V (p x d)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    rng = _rng(seed)
    V = rng.standard_normal((p, Z.shape[1])) if loadings is None else np.asarray(loadings)
    if V.shape != (p, Z.shape[1]):
        raise ValueError(f"loadings must be ({p}, {Z.shape[1]})")
    X = Z @ V.T
    if noise_sd > 0:
        X = X + noise_sd * rng.standard_normal(X.shape)
    return X


@dataclass
class DLVMParams:
    U: np.ndarray  # (h, d)
    a: np.ndarray  # (h,)
    V: np.ndarray  # (p, h)
    b: np.ndarray  # (p,)
    eta: np.ndarray  # (h,)
    delta: float

    @classmethod
    def draw(cls, d: int, p: int, h: int, rng: np.random.Generator) -> "DLVMParams":
        return cls(
            U=rng.standard_normal((h, d)),
            a=rng.standard_normal(h),
            V=rng.standard_normal((p, h)),
            b=rng.standard_normal(p),
            eta=rng.standard_normal(h),
            delta=float(rng.uniform(-1.0, 1.0)),
        )

    def moments(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise mean (n, p) and variance (n, 1) broadcastable to (n, p)."""
        hidden = np.tanh(Z @ self.U.T + self.a)
        mean = hidden @ self.V.T + self.b
        var = np.exp(hidden @ self.eta + self.delta)[:, None]
        return mean, var


def gen_dlvm(Z, p: int, h: Optional[int] = None, seed=None, params: Optional[DLVMParams] = None):
    """Draw X_i ~ N(V tanh(U Z_i + a) + b, exp(eta^T tanh(U Z_i + a) + delta) I_p)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    rng = _rng(seed)
    if params is None:
        params = DLVMParams.draw(Z.shape[1], p, h or 2 * Z.shape[1], rng)
    mean, var = params.moments(Z)
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def gen_treatment(Z, alpha, seed=None) -> tuple[np.ndarray, np.ndarray]:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    e = expit(Z @ np.asarray(alpha, dtype=np.float64))
    W = (_rng(seed).random(len(e)) < e).astype(np.int64)
    return W, e


def gen_outcome(Z, W, beta, tau: float = 1.0, snr: float = 10.0, seed=None) -> tuple[np.ndarray, float]:
    """Y = beta^T Z + tau W + sigma * eps with Var(signal) / sigma^2 = snr.

    The signal variance is the empirical (ddof=0) variance of the realized
    signal, so the ratio holds exactly for the returned sigma.
    """
    if snr <= 0:
        raise ValueError("snr must be positive")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    signal = Z @ np.asarray(beta, dtype=np.float64) + tau * np.asarray(W, dtype=np.float64)
    sigma = float(np.sqrt(np.var(signal) / snr))
    return signal + sigma * _rng(seed).standard_normal(len(signal)), sigma


def apply_mcar(X, rho: float, seed=None) -> IncompleteMatrix:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    X = np.asarray(X, dtype=np.float64)
    mask = _rng(seed).random(X.shape) < rho
    values = X.copy()
    values[mask] = np.nan
    return IncompleteMatrix(values, mask)


def simulate(cfg: SimulationConfig) -> ObservationalDataset:
    """Generate one dataset; every stage gets its own child seed of ``cfg.seed``."""
    s_z, s_coef, s_x, s_w, s_y, s_m = np.random.SeedSequence(cfg.seed).spawn(6)
    Z = gen_latent(cfg.n, cfg.d, s_z)
    coef_rng = _rng(s_coef)
    alpha = _unit(coef_rng.standard_normal(cfg.d))
    beta = _unit(coef_rng.standard_normal(cfg.d))
    if cfg.covariate_model == "lrmf":
        X = gen_lrmf(Z, cfg.p, cfg.noise_sd, s_x)
    else:
        X = gen_dlvm(Z, cfg.p, cfg.hidden or 2 * cfg.d, s_x)
    W, e = gen_treatment(Z, alpha, s_w)
    Y, sigma = gen_outcome(Z, W, beta, cfg.tau, cfg.snr, s_y)
    truth = GroundTruth(
        Z=Z, alpha=alpha, beta=beta, propensity=e,
        signal=Z @ beta + cfg.tau * W, noise_sd=sigma, tau=cfg.tau,
    )
    return ObservationalDataset(
        X=apply_mcar(X, cfg.missing_prob, s_m), W=W, Y=Y, X_complete=X, truth=truth
    )
