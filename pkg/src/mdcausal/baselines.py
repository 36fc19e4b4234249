"""Comparator methods: soft-impute matrix completion, chained-equation
multiple imputation and plain mean imputation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import IncompleteMatrix
from .estimators import AteEstimate, estimate, pool

log = logging.getLogger(__name__)


def _as_incomplete(X) -> IncompleteMatrix:
    if isinstance(X, IncompleteMatrix):
        return X
    return IncompleteMatrix.from_nan(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def _require_observed_columns(X: IncompleteMatrix) -> None:
    empty = np.flatnonzero(X.observed.sum(axis=0) == 0)
    if empty.size:
        raise ValueError(f"column {int(empty[0])} has no observed entries")


def svd(A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(s) V^T`` with ``s`` descending; returns (U, s, V)."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("svd needs a finite matrix")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    return U, s, Vt.T


def mean_impute(X_star) -> np.ndarray:
    X = _as_incomplete(X_star)
    _require_observed_columns(X)
    means = np.nanmean(X.values, axis=0)
    return np.where(X.mask, means, X.values)


@dataclass
class CompletionResult:
    completed: np.ndarray  # observed entries from the input, missing ones from the fit
    fitted: np.ndarray  # the low-rank estimate itself
    latent: np.ndarray  # U diag(s), truncated at the effective rank
    loadings: np.ndarray  # V, truncated likewise
    rank: int
    objective: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)  # objective after each iteration


def _objective(X0: np.ndarray, obs: np.ndarray, A: np.ndarray, s: np.ndarray, lam: float) -> float:
    r = (X0 - A) * obs
    return 0.5 * float(np.sum(r * r)) + lam * float(np.sum(s))


def soft_impute(X_star, lam: float, max_iter: int = 500, tol: float = 1e-5) -> CompletionResult:
    """Nuclear-norm penalized completion by iterated singular value thresholding.

    Each iteration fills missing cells with the current estimate and
    soft-thresholds the singular values of the filled matrix by ``lam``.
    Starts from the column-mean filled matrix; stops when the relative
    Frobenius change falls under ``tol``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X = _as_incomplete(X_star)
    _require_observed_columns(X)
    obs = X.observed
    X0 = np.where(obs, X.values, 0.0)
    A = mean_impute(X)
    s_prev = svd(A)[1]
    prev_obj = _objective(X0, obs, A, s_prev, lam)
    trace = []
    converged = False
    U = V = s = None
    it = 0
    for it in range(1, max_iter + 1):
        U, sv, V = svd(np.where(obs, X0, A))
        s = np.maximum(sv - lam, 0.0)
        A_new = (U * s) @ V.T
        obj = _objective(X0, obs, A_new, s, lam)
        if obj > prev_obj + 1e-9 * max(1.0, abs(prev_obj)):
            raise AssertionError(f"soft-impute objective increased at iteration {it}")
        trace.append(obj)
        denom = max(np.linalg.norm(A), 1e-12)
        change = np.linalg.norm(A_new - A) / denom
        A, prev_obj = A_new, obj
        if change < tol:
            converged = True
            break
    rank = int(np.sum(s > 0))
    return CompletionResult(
        completed=np.where(obs, X.values, A),
        fitted=A,
        latent=U[:, :rank] * s[:rank],
        loadings=V[:, :rank],
        rank=rank,
        objective=prev_obj,
        converged=converged,
        iterations=it,
        trace=trace,
    )


def lambda_grid(X_star, size: int = 10, low: float = 1e-3) -> np.ndarray:
    """Log-spaced penalties from the top singular value of the zero-filled data down."""
    X = _as_incomplete(X_star)
    top = svd(np.where(X.observed, X.values, 0.0))[1][0]
    return np.geomspace(top, top * low, size)


@dataclass
class LambdaChoice:
    lam: float
    errors: dict
    holdout: np.ndarray  # boolean mask of the extra held-out entries


def choose_lambda(
    X_star, grid: Sequence[float], holdout_frac: float = 0.1, seed=None,
    max_iter: int = 500, tol: float = 1e-5,
) -> LambdaChoice:
    """Pick the penalty with the smallest squared error on held-out observed cells.

    Ties go to the larger penalty.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    X = _as_incomplete(X_star)
    rng = np.random.default_rng(seed)
    holdout = X.observed & (rng.random(X.shape) < holdout_frac)
    # keep at least one observed entry in every column
    for j in np.flatnonzero((X.observed & ~holdout).sum(axis=0) == 0):
        keep = np.flatnonzero(holdout[:, j])[0]
        holdout[keep, j] = False
    if len(grid) == 1:
        return LambdaChoice(grid[0], {grid[0]: float("nan")}, holdout)
    train_vals = np.where(holdout, np.nan, X.values)
    X_train = IncompleteMatrix(train_vals, X.mask | holdout)
    errors = {}
    for lam in grid:
        fit = soft_impute(X_train, lam, max_iter, tol)
        diff = (fit.fitted - X.values)[holdout]
        errors[lam] = float(np.sum(diff * diff))
    best = min(errors.values())
    lam = max(l for l, e in errors.items() if e == best)
    return LambdaChoice(lam, errors, holdout)


@dataclass
class ImputationSet:
    completed: list  # m arrays (n, p)
    coefficients: list  # per chain: {column: ridge coefficients of the last sweep}
    seed: Optional[int] = None

    @property
    def m(self) -> int:
        return len(self.completed)


def _ridge(A: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    xm, ym = A.mean(axis=0), y.mean()
    Ac = A - xm
    slopes = np.linalg.solve(Ac.T @ Ac + lam * np.eye(A.shape[1]), Ac.T @ (y - ym))
    return np.concatenate([[ym - xm @ slopes], slopes])


def iterative_impute(
    X_star,
    W=None,
    Y=None,
    m: int = 20,
    sweeps: int = 10,
    seed=None,
    ridge: Optional[float] = None,
    use_outcome: bool = True,
) -> ImputationSet:
    """Chained-equation multiple imputation with Gaussian linear models.

    Every chain starts from the column-mean fill and runs ``sweeps`` passes;
    in each pass each incomplete column is regressed (ridge, penalty
    ``1e-3 * n`` by default) on all other columns, plus W and Y when
    ``use_outcome`` is set, and its missing cells are redrawn as prediction
    plus residual noise. Chain k draws from its own child seed.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    X = _as_incomplete(X_star)
    _require_observed_columns(X)
    n, p = X.shape
    lam = 1e-3 * n if ridge is None else ridge
    extra = []
    if use_outcome:
        if W is None or Y is None:
            raise ValueError("W and Y are required when use_outcome is set")
        extra = [np.asarray(W, dtype=np.float64), np.asarray(Y, dtype=np.float64)]
    extra = np.column_stack(extra) if extra else np.empty((n, 0))
    incomplete = np.flatnonzero(X.mask.any(axis=0))
    start = mean_impute(X)
    completed, coefs = [], []
    for child in np.random.SeedSequence(seed).spawn(m):
        rng = np.random.default_rng(child)
        cur = start.copy()
        chain_coef = {}
        for _ in range(sweeps if incomplete.size else 0):
            for j in incomplete:
                miss = X.mask[:, j]
                others = np.column_stack([np.delete(cur, j, axis=1), extra])
                obs = ~miss
                beta = _ridge(others[obs], cur[obs, j], lam)
                pred = beta[0] + others @ beta[1:]
                resid = cur[obs, j] - pred[obs]
                dof = max(obs.sum() - others.shape[1] - 1, 1)
                sd = np.sqrt(resid @ resid / dof)
                cur[miss, j] = pred[miss] + sd * rng.standard_normal(miss.sum())
                chain_coef[int(j)] = beta
        completed.append(cur)
        coefs.append(chain_coef)
    return ImputationSet(completed, coefs, seed)


def mi_estimate(
    imputations: ImputationSet, W, Y, estimator: str = "dr", lam: float = 0.0, eta_clip: float = 0.01
) -> AteEstimate:
    """Run the estimator on each completed table and pool by Rubin's rules."""
    per_table = []
    for k, table in enumerate(imputations.completed):
        try:
            per_table.append(estimate(table, W, Y, estimator, lam, eta_clip))
        except ValueError as err:
            raise ValueError(f"imputation {k}: {err}") from err
    return pool(per_table, f"MI-{estimator}")
