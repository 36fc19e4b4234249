"""Deep latent variable model for incomplete covariates.

The encoder sees a zero-imputed, column-standardized row and outputs a
diagonal Gaussian over the latent code; the decoder maps a code to a
diagonal Gaussian over the (standardized) covariates. Training maximizes
the importance-weighted bound on the likelihood of the observed entries.
After training, the latent posterior given an incomplete row is explored by
self-normalized importance sampling with the encoder as proposal.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .datagen import IncompleteMatrix
from .nn import (
    LOG_2PI,
    AdamState,
    DenseNetwork,
    GaussianHead,
    adam_step,
    load_networks,
    save_networks,
)

log = logging.getLogger(__name__)

# rows * draws * width budget for one vectorized inference chunk
_CHUNK_BUDGET = 4_000_000


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {message}" if message else ""))


class NonFiniteBoundError(FloatingPointError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"non-finite bound for row {row}")


@dataclass
class TrainConfig:
    K: int = 20
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    patience: int = 20  # epochs without improvement before stopping; 0 disables

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def _as_incomplete(X) -> IncompleteMatrix:
    if isinstance(X, IncompleteMatrix):
        return X
    return IncompleteMatrix.from_nan(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def zero_impute(x_star, column_means) -> np.ndarray:
    """Replace NaN entries by the matching column mean.

    With standardized data the means are zero, hence the name. Works on a
    single row or a matrix.
    """
    x = np.array(x_star, dtype=np.float64)
    means = np.asarray(column_means, dtype=np.float64)
    miss = np.isnan(x)
    fill = np.broadcast_to(means, x.shape)
    bad = miss & np.isnan(fill)
    if bad.any():
        col = int(np.argwhere(bad)[0][-1])
        raise ValueError(f"column {col} has no observed entries to impute from")
    x[miss] = fill[miss]
    return x


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = _as_incomplete(X)
        counts = X.observed.sum(axis=0)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise ValueError(f"column {int(empty[0])} has no observed entries")
        mean = np.nanmean(X.values, axis=0)
        sd = np.nanstd(X.values, axis=0)
        sd[~(sd > 0)] = 1.0
        return cls(mean, sd)

    @classmethod
    def identity(cls, p: int) -> "Standardizer":
        return cls(np.zeros(p), np.ones(p))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.sd

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.sd + self.mean


@dataclass
class LatentModel:
    encoder: DenseNetwork  # p -> 2d
    decoder: DenseNetwork  # d -> 2p
    d: int
    sigma2_prior: float = 1.0
    standardizer: Optional[Standardizer] = None
    clamp: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if self.sigma2_prior <= 0:
            raise ValueError("sigma2_prior must be positive")
        if self.encoder.output_dim != 2 * self.d or self.decoder.input_dim != self.d:
            raise ValueError("encoder/decoder widths do not match latent dimension")
        if self.decoder.output_dim != 2 * self.encoder.input_dim:
            raise ValueError("decoder output must be twice the encoder input width")

    @classmethod
    def init(
        cls,
        p: int,
        d: int,
        hidden: int | Sequence[int] = 128,
        sigma2_prior: float = 1.0,
        seed=None,
    ) -> "LatentModel":
        hidden = [hidden] if isinstance(hidden, int) else list(hidden)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        enc_rng, dec_rng = ss.spawn(2)
        encoder = DenseNetwork.init([p, *hidden, 2 * d], np.random.default_rng(enc_rng))
        decoder = DenseNetwork.init([d, *hidden[::-1], 2 * p], np.random.default_rng(dec_rng))
        return cls(encoder, decoder, d, sigma2_prior)

    @property
    def p(self) -> int:
        return self.encoder.input_dim

    def prepare(self, X, mask=None) -> tuple[np.ndarray, np.ndarray]:
        """Standardized, zero-imputed values and the boolean observed mask."""
        X = _as_incomplete(X)
        if X.shape[1] != self.p:
            raise ValueError(f"model expects {self.p} columns, got {X.shape[1]}")
        std = self.standardizer or Standardizer.identity(self.p)
        observed = X.observed if mask is None else ~np.asarray(mask, dtype=bool)
        xs = std.transform(X.values)
        xs = np.where(observed, xs, 0.0)
        return xs, observed

    def parameters(self) -> list[np.ndarray]:
        return self.encoder.parameters() + self.decoder.parameters()

    def save(self, path: str | Path) -> None:
        std = self.standardizer
        save_networks(
            path,
            {"encoder": self.encoder, "decoder": self.decoder},
            d=self.d,
            sigma2_prior=self.sigma2_prior,
            clamp=list(self.clamp),
            column_mean=None if std is None else std.mean.tolist(),
            column_sd=None if std is None else std.sd.tolist(),
        )

    @classmethod
    def load(cls, path: str | Path) -> "LatentModel":
        nets, extra = load_networks(path)
        std = None
        if extra.get("column_mean") is not None:
            std = Standardizer(np.array(extra["column_mean"]), np.array(extra["column_sd"]))
        return cls(
            nets["encoder"], nets["decoder"], int(extra["d"]),
            float(extra["sigma2_prior"]), std, tuple(extra["clamp"]),
        )


def _log_ratios(model: LatentModel, xs: np.ndarray, observed: np.ndarray, eps: np.ndarray, need_grad=False):
    """log r for draws z = mu_q + sd_q * eps.

    ``xs``/``observed`` are (n, p), ``eps`` is (K, n, d). Returns ``log_r``
    (K, n), the codes (K, n, d) and, when asked, the intermediate values
    needed for the gradient.
    """
    K, n, d = eps.shape
    p = model.p
    enc_out, enc_cache = model.encoder.forward_cached(xs)
    q, q_inside = GaussianHead.from_output(enc_out, model.clamp)
    sd_q = np.exp(0.5 * q.log_variance)
    z = q.mean + sd_q * eps
    dec_out, dec_cache = model.decoder.forward_cached(z.reshape(K * n, d))
    px, px_inside = GaussianHead.from_output(dec_out, model.clamp)
    mu = px.mean.reshape(K, n, p)
    lv = px.log_variance.reshape(K, n, p)
    resid = xs - mu
    inv_var = np.exp(-lv)
    obs = observed.astype(np.float64)
    log_px = (-0.5 * (LOG_2PI + lv + resid * resid * inv_var) * obs).sum(axis=-1)
    s2 = model.sigma2_prior
    log_pz = -0.5 * (d * math.log(2 * math.pi * s2) + (z * z).sum(axis=-1) / s2)
    log_qz = -0.5 * (d * LOG_2PI + q.log_variance.sum(axis=-1) + (eps * eps).sum(axis=-1))
    log_r = log_px + log_pz - log_qz
    if not need_grad:
        return log_r, z
    extras = dict(
        enc_cache=enc_cache, q_inside=q_inside, sd_q=sd_q, dec_cache=dec_cache,
        px_inside=px_inside.reshape(K, n, p), resid=resid, inv_var=inv_var, obs=obs,
    )
    return log_r, z, extras


def _check_bound(bounds: np.ndarray, rows: Optional[np.ndarray] = None) -> None:
    bad = np.flatnonzero(~np.isfinite(bounds))
    if bad.size:
        idx = int(bad[0]) if rows is None else int(rows[bad[0]])
        raise NonFiniteBoundError(idx)


def objective_and_grad(model: LatentModel, xs, observed, eps):
    """Batch-mean bound and its gradient w.r.t. ``model.parameters()``.

    ``eps`` holds the standard-normal noise (K, n, d) so the bound is a
    deterministic function of the parameters.
    """
    K, n, d = eps.shape
    log_r, z, ex = _log_ratios(model, xs, observed, eps, need_grad=True)
    bounds = logsumexp(log_r, axis=0) - math.log(K)
    _check_bound(bounds)
    g = np.exp(log_r - logsumexp(log_r, axis=0)) / n  # d objective / d log r
    gk = g[..., None]
    obs = ex["obs"]
    d_mu = gk * obs * ex["resid"] * ex["inv_var"]
    d_lv = gk * obs * 0.5 * (ex["resid"] ** 2 * ex["inv_var"] - 1.0) * ex["px_inside"]
    dec_grad_out = np.concatenate([d_mu, d_lv], axis=-1).reshape(K * n, -1)
    dec_grads, d_z = model.decoder.backward(ex["dec_cache"], dec_grad_out)
    dz = d_z.reshape(K, n, d) - gk * z / model.sigma2_prior
    d_mu_q = dz.sum(axis=0)
    d_lv_q = (0.5 * ex["sd_q"] * (dz * eps).sum(axis=0) + 0.5 * g.sum(axis=0)[:, None]) * ex["q_inside"]
    enc_grads, _ = model.encoder.backward(ex["enc_cache"], np.concatenate([d_mu_q, d_lv_q], axis=1))
    return float(bounds.mean()), enc_grads + dec_grads


def miwae_objective(model: LatentModel, X, K: int = 20, seed=None, mask=None) -> float:
    """Mean over rows of log (1/K) sum_k p(x_obs | z_k) p(z_k) / q(z_k | x).

    ``mask`` (True = missing) overrides the NaN pattern of ``X``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    xs, observed = model.prepare(X, mask)
    eps = np.random.default_rng(seed).standard_normal((K, xs.shape[0], model.d))
    log_r, _ = _log_ratios(model, xs, observed, eps)
    bounds = logsumexp(log_r, axis=0) - math.log(K)
    _check_bound(bounds)
    return float(bounds.mean())


@dataclass
class TrainResult:
    model: LatentModel
    trace: list = field(default_factory=list)  # (epoch, mean bound)
    stopped_early: bool = False


def train(model: LatentModel, X, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit encoder and decoder with Adam on shuffled minibatches.

    The column standardizer is fitted from ``X`` unless the model already
    carries one. The model is updated in place and also returned.
    """
    X = _as_incomplete(X)
    if model.standardizer is None:
        model.standardizer = Standardizer.fit(X)
    else:
        Standardizer.fit(X)  # still reject all-missing columns
    xs, observed = model.prepare(X)
    n = xs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    result = TrainResult(model)
    best, since_best = -np.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            eps = rng.standard_normal((cfg.K, len(rows), model.d))
            try:
                bound, grads = objective_and_grad(model, xs[rows], observed[rows], eps)
            except NonFiniteBoundError as err:
                raise TrainingDivergedError(epoch, f"row {int(rows[err.row])}") from err
            except FloatingPointError as err:
                raise TrainingDivergedError(epoch, str(err)) from err
            adam_step(params, [-g for g in grads], state)
            total += bound * len(rows)
        epoch_bound = total / n
        if not np.isfinite(epoch_bound):
            raise TrainingDivergedError(epoch)
        result.trace.append((epoch, epoch_bound))
        if epoch == 0 or epoch_bound > best + 1e-4 * max(1.0, abs(best)):
            best, since_best = epoch_bound, 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                result.stopped_early = True
                log.debug("early stop at epoch %d (bound %.4f)", epoch, epoch_bound)
                break
    return result


def fit_model(
    X,
    d: int,
    cfg: TrainConfig = TrainConfig(),
    sigma2_prior: float = 1.0,
    hidden: int | Sequence[int] = 128,
) -> TrainResult:
    """Initialize a model from ``cfg.seed`` and train it on ``X``."""
    X = _as_incomplete(X)
    model = LatentModel.init(X.shape[1], d, hidden, sigma2_prior, seed=[cfg.seed, 1])
    return train(model, X, cfg)


# -- posterior via self-normalized importance sampling ------------------------


@dataclass
class WeightedDraws:
    draws: np.ndarray  # (L, d)
    log_ratios: np.ndarray  # (L,)
    weights: np.ndarray  # (L,)

    def mean(self) -> np.ndarray:
        return self.weights @ self.draws

    def variance(self) -> np.ndarray:
        centered = self.draws - self.mean()
        return self.weights @ (centered * centered)

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass
class PosteriorDraws:
    draws: np.ndarray  # (B, n, d)
    means: np.ndarray  # (n, d), the weighted means over all L proposals


def row_seed(seed, row: int) -> np.random.SeedSequence:
    """Seed of the sampler used for one row; independent across rows."""
    base = seed.entropy if isinstance(seed, np.random.SeedSequence) else seed
    return np.random.SeedSequence([0 if base is None else int(base), int(row)])


def _normalize(log_r: np.ndarray, axis=0) -> np.ndarray:
    if np.all(np.isneginf(log_r), axis=axis).any():
        raise ValueError("all importance ratios are zero; model and data do not match")
    w = np.exp(log_r - np.max(log_r, axis=axis, keepdims=True))
    return w / w.sum(axis=axis, keepdims=True)


def importance_weights(model: LatentModel, x_star, L: int = 10_000, seed=None) -> WeightedDraws:
    """Draw ``L`` codes from the encoder for one incomplete row and weight them."""
    if L < 1:
        raise ValueError("L must be >= 1")
    xs, observed = model.prepare(np.atleast_2d(x_star))
    if xs.shape[0] != 1:
        raise ValueError("importance_weights takes a single row")
    eps = np.random.default_rng(seed).standard_normal((L, model.d))[:, None, :]
    log_r, z = _log_ratios(model, xs, observed, eps)
    log_r = log_r[:, 0]
    if np.any(np.isnan(log_r)):
        raise ValueError("importance ratios contain NaN")
    return WeightedDraws(z[:, 0, :], log_r, _normalize(log_r))


def resample_indices(weights: np.ndarray, B: int, rng: np.random.Generator) -> np.ndarray:
    """B i.i.d. indices from Categorical(weights), with replacement."""
    return rng.choice(len(weights), size=B, replace=True, p=weights)


def _posterior_pass(model: LatentModel, X, L: int, seed, B: Optional[int]):
    if L < 1:
        raise ValueError("L must be >= 1")
    if B is not None and not 1 <= B <= L:
        raise ValueError(f"need 1 <= B <= L, got B={B}, L={L}")
    xs, observed = model.prepare(X)
    n, d = xs.shape[0], model.d
    width = max(model.p, d, *(l.out_dim for l in model.decoder.layers))
    chunk = max(1, _CHUNK_BUDGET // (L * width))
    means = np.empty((n, d))
    draws = None if B is None else np.empty((B, n, d))
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        rngs = [np.random.default_rng(row_seed(seed, i)) for i in rows]
        eps = np.stack([r.standard_normal((L, d)) for r in rngs], axis=1)
        log_r, z = _log_ratios(model, xs[rows], observed[rows], eps)
        if np.any(np.isnan(log_r)):
            raise ValueError(f"importance ratios contain NaN near row {start}")
        w = _normalize(log_r, axis=0)  # (L, chunk)
        means[rows] = np.einsum("lc,lcd->cd", w, z)
        if B is not None:
            for j, (i, r) in enumerate(zip(rows, rngs)):
                idx = resample_indices(w[:, j], B, r)
                draws[:, i, :] = z[idx, j, :]
    return means, draws


def posterior_mean(model: LatentModel, X, L: int = 10_000, seed=None) -> np.ndarray:
    """Self-normalized estimate of E[Z | x*] for every row."""
    return _posterior_pass(model, X, L, seed, None)[0]


def posterior_resample(model: LatentModel, X, L: int = 10_000, B: int = 500, seed=None) -> PosteriorDraws:
    """B latent tables drawn row-wise from the weighted proposals (with replacement).

    Uses the same proposals as :func:`posterior_mean` for the same seed.
    """
    means, draws = _posterior_pass(model, X, L, seed, B)
    return PosteriorDraws(draws, means)


# -- hyperparameter selection --------------------------------------------------


def kfold_indices(n: int, folds: int, seed=None) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if folds > n:
        raise ValueError(f"cannot split {n} rows into {folds} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


@dataclass
class CVResult:
    best: tuple  # (sigma2_prior, d)
    scores: dict  # (sigma2_prior, d) -> mean held-out bound


def cross_validate(
    X,
    grid: Iterable[tuple[float, int]],
    folds: int = 5,
    cfg: TrainConfig = TrainConfig(),
    hidden: int | Sequence[int] = 128,
    K_eval: Optional[int] = None,
) -> CVResult:
    """Pick (sigma2_prior, d) maximizing the mean held-out bound.

    Ties go to the smaller d, then the smaller prior variance.
    """
    X = _as_incomplete(X)
    grid = list(grid)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    parts = kfold_indices(X.shape[0], folds, cfg.seed)
    scores = {}
    for s2, d in grid:
        fold_scores = []
        for k, valid in enumerate(parts):
            if valid.size == 0:
                raise ValueError(f"fold {k} is empty")
            train_rows = np.setdiff1d(np.arange(X.shape[0]), valid)
            X_tr = IncompleteMatrix(X.values[train_rows], X.mask[train_rows])
            X_va = IncompleteMatrix(X.values[valid], X.mask[valid])
            res = fit_model(X_tr, d, cfg, s2, hidden)
            fold_scores.append(miwae_objective(res.model, X_va, K_eval or cfg.K, [cfg.seed, k]))
        scores[(s2, d)] = float(np.mean(fold_scores))
    top = max(scores.values())
    best = min((key for key, v in scores.items() if v == top), key=lambda t: (t[1], t[0]))
    return CVResult(best, scores)
