"""Seeded simulation experiments over scenario x method grids.

A plan is a list of scenarios, a list of methods, estimator modes and a number
of replications. Every (scenario, replication) cell simulates one dataset and
runs each method on it; each method draws its randomness from its own derived
seed, so dropping a method from a plan leaves the other results untouched.
"""

from __future__ import annotations

import configparser
import hashlib
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .baselines import choose_lambda, iterative_impute, lambda_grid, mi_estimate, soft_impute
from .datagen import IncompleteMatrix, ObservationalDataset, SimulationConfig, simulate
from .estimators import estimate, mdc_mi, mdc_process
from .io import write_table
from .miwae import Standardizer, TrainConfig, cross_validate, fit_model

log = logging.getLogger(__name__)

METHODS = ("Z-oracle", "X-complete", "MDC.process", "MDC.mi", "MI", "MF")
ESTIMATORS = ("dr", "regression")
DR_ONLY = ("MDC.mi",)
SWEEPS = {"rho": "missing_prob", "p": "p", "n": "n"}


@dataclass(frozen=True)
class MethodSettings:
    """Knobs shared by all cells of a plan.

    Attributes:
        lam: ridge penalty of the nuisance fits (0 = unregularized).
        eta_clip: propensity clipping level of the DR estimator.
        latent_dim: MIWAE latent dimension; 0 uses the scenario's d.
        sigma2_prior: prior variance of the latent code.
        hidden: hidden width of encoder and decoder.
        K, epochs, batch_size, lr, patience: MIWAE training.
        cv_folds: if > 0, pick (sigma2_prior, latent_dim) by cross-validation
            over ``cv_sigma2`` x ``cv_dims``.
        L: importance samples per row.
        B: posterior tables for MDC.mi.
        mi_m, mi_sweeps: chained-equation imputations and sweeps.
        mf_grid_size, mf_holdout, mf_max_iter, mf_tol: soft-impute penalty search.
    """

    lam: float = 0.0
    eta_clip: float = 0.01
    latent_dim: int = 0
    sigma2_prior: float = 1.0
    hidden: int = 128
    K: int = 20
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 20
    cv_folds: int = 0
    cv_dims: tuple[int, ...] = ()
    cv_sigma2: tuple[float, ...] = ()
    L: int = 1000
    B: int = 50
    mi_m: int = 20
    mi_sweeps: int = 10
    mf_grid_size: int = 10
    mf_holdout: float = 0.1
    mf_max_iter: int = 100
    mf_tol: float = 1e-5


@dataclass(frozen=True)
class ExperimentPlan:
    scenarios: tuple[SimulationConfig, ...]
    methods: tuple[str, ...] = METHODS
    estimators: tuple[str, ...] = ESTIMATORS
    replications: int = 10
    base_seed: int = 0
    out_dir: Optional[Path] = None
    settings: MethodSettings = MethodSettings()
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not self.scenarios:
            raise ValueError("plan has no scenarios")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ValueError(f"unknown estimators {bad}; choose from {list(ESTIMATORS)}")
        if any(m in self.methods for m in DR_ONLY) and "dr" not in self.estimators:
            raise ValueError("MDC.mi needs the 'dr' estimator")
        if self.replications < 1 or self.workers < 1:
            raise ValueError("replications and workers must be >= 1")
        if not 0 <= self.base_seed < 2**63:
            raise ValueError("base_seed must be in [0, 2**63)")


@dataclass
class ResultRow:
    covariate_model: str
    n: int
    p: int
    d: int
    rho: float
    snr: float
    tau: float
    method: str
    estimator: str
    replication: int
    seed: int
    tau_hat: float
    variance: float
    ci_low: float
    ci_high: float
    converged: bool
    runtime: float = 0.0


@dataclass
class FailureRecord:
    covariate_model: str
    n: int
    p: int
    d: int
    rho: float
    snr: float
    tau: float
    method: str
    replication: int
    error: str


@dataclass
class RunResult:
    rows: list[ResultRow] = field(default_factory=list)
    failures: list[FailureRecord] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


# -- seeds ---------------------------------------------------------------------


def scenario_key(cfg: SimulationConfig) -> str:
    """Canonical text of a scenario, independent of its seed field."""
    return (f"{cfg.covariate_model}|n={cfg.n}|p={cfg.p}|d={cfg.d}|rho={cfg.missing_prob!r}"
            f"|snr={cfg.snr!r}|tau={cfg.tau!r}|noise_sd={cfg.noise_sd!r}|hidden={cfg.hidden}")


def derive_seed(base: int, cfg: SimulationConfig, replication: int, tag: str = "data") -> int:
    """``base`` XOR a 63-bit hash of (scenario, replication, tag)."""
    text = f"{scenario_key(cfg)}|r={replication}|{tag}".encode()
    digest = int.from_bytes(hashlib.sha256(text).digest()[:8], "big") >> 1
    return base ^ digest


# -- one cell ------------------------------------------------------------------


def _descriptor(cfg: SimulationConfig) -> dict:
    return dict(covariate_model=cfg.covariate_model, n=cfg.n, p=cfg.p, d=cfg.d,
                rho=float(cfg.missing_prob), snr=float(cfg.snr), tau=float(cfg.tau))


def _train_config(st: MethodSettings, seed: int) -> TrainConfig:
    return TrainConfig(K=st.K, epochs=st.epochs, batch_size=st.batch_size, lr=st.lr,
                       seed=seed, patience=st.patience)


def _fit_miwae(ds: ObservationalDataset, cfg: SimulationConfig, st: MethodSettings, seed: int):
    sigma2, d = st.sigma2_prior, st.latent_dim or cfg.d
    if st.cv_folds > 0:
        grid = [(s2, k) for s2 in (st.cv_sigma2 or (sigma2,)) for k in (st.cv_dims or (d,))]
        best = cross_validate(ds.X, grid, st.cv_folds, _train_config(st, seed), st.hidden).best
        sigma2, d = best
    return fit_model(ds.X, d, _train_config(st, seed), sigma2, st.hidden)


def standardize_incomplete(X: IncompleteMatrix) -> IncompleteMatrix:
    return IncompleteMatrix(Standardizer.fit(X).transform(X.values), X.mask)


def _run_method(method, ds, cfg, st, estimators, seed, cache):
    """Estimates per estimator mode plus a convergence flag."""
    W, Y = ds.W, ds.Y
    if method in ("Z-oracle", "X-complete"):
        F = ds.Z if method == "Z-oracle" else ds.X_complete
        return {e: estimate(F, W, Y, e, st.lam, st.eta_clip) for e in estimators}, True
    if method in ("MDC.process", "MDC.mi"):
        if "miwae" in cache:
            fit, cache["extra_time"] = cache["miwae"]  # charge the shared training to both
        else:
            t0 = time.perf_counter()
            fit = _fit_miwae(ds, cfg, st, cache["miwae_seed"])
            cache["miwae"] = (fit, time.perf_counter() - t0)
        converged = fit.stopped_early or st.patience == 0
        if method == "MDC.mi":
            est = mdc_mi(fit.model, ds.X, W, Y, st.B, st.L, st.lam, st.eta_clip, seed)
            return {"dr": est}, converged
        return {e: mdc_process(fit.model, ds.X, W, Y, e, st.L, st.lam, st.eta_clip, seed)
                for e in estimators}, converged
    if method == "MI":
        imp = iterative_impute(ds.X, W, Y, st.mi_m, st.mi_sweeps, seed)
        return {e: mi_estimate(imp, W, Y, e, st.lam, st.eta_clip) for e in estimators}, True
    if method == "MF":
        Xs = standardize_incomplete(ds.X)
        choice = choose_lambda(Xs, lambda_grid(Xs, st.mf_grid_size), st.mf_holdout, seed,
                               st.mf_max_iter, st.mf_tol)
        comp = soft_impute(Xs, choice.lam, st.mf_max_iter, st.mf_tol)
        if comp.rank == 0:
            raise ValueError("soft-impute selected a rank-0 fit; no latent features")
        return {e: estimate(comp.latent, W, Y, e, st.lam, st.eta_clip)
                for e in estimators}, comp.converged
    raise ValueError(f"unknown method {method!r}")


def run_cell(plan: ExperimentPlan, scenario: int, replication: int) -> RunResult:
    """Simulate one dataset and run every method of the plan on it."""
    cfg = plan.scenarios[scenario]
    desc = _descriptor(cfg)
    out = RunResult()

    def fail(method, err):
        msg = f"{type(err).__name__}: {err}"
        log.warning("cell %s r=%d %s failed: %s", scenario_key(cfg), replication, method, msg)
        out.failures.append(FailureRecord(**desc, method=method, replication=replication, error=msg))

    data_seed = derive_seed(plan.base_seed, cfg, replication)
    try:
        ds = simulate(replace(cfg, seed=data_seed))
    except Exception as err:  # noqa: BLE001 - a failed cell never stops the run
        for method in plan.methods:
            fail(method, err)
        return out
    cache = {"miwae_seed": derive_seed(plan.base_seed, cfg, replication, "miwae")}
    started = time.perf_counter()
    for method in plan.methods:
        seed = derive_seed(plan.base_seed, cfg, replication, method)
        cache["extra_time"] = 0.0
        t0 = time.perf_counter()
        try:
            with np.errstate(over="ignore"):
                results, converged = _run_method(method, ds, cfg, plan.settings,
                                                 plan.estimators, seed, cache)
        except Exception as err:  # noqa: BLE001
            fail(method, err)
            continue
        elapsed = time.perf_counter() - t0 + cache["extra_time"]
        for e in plan.estimators:
            if e not in results:
                continue
            est = results[e]
            if not np.isfinite(est.tau_hat):
                fail(method, FloatingPointError(f"{e} estimate is not finite"))
                continue
            out.rows.append(ResultRow(
                **desc, method=method, estimator=e, replication=replication, seed=seed,
                tau_hat=float(est.tau_hat), variance=float(est.total_variance),
                ci_low=float(est.ci_95[0]), ci_high=float(est.ci_95[1]),
                converged=bool(converged), runtime=elapsed / len(results),
            ))
    log.info("cell %s r=%d done in %.1fs (%d rows, %d failures)", scenario_key(cfg), replication,
             time.perf_counter() - started, len(out.rows), len(out.failures))
    return out


def _cell(args):
    plan, s, r = args
    return run_cell(plan, s, r)


def check_writable(out_dir) -> Path:
    """Create ``out_dir`` if needed and prove a file can be written there."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output path {out_dir} is not writable: {exc.strerror or exc}") from exc
    return out_dir


def run_plan(plan: ExperimentPlan) -> RunResult:
    """Run every (scenario, replication) cell; results come back in plan order.

    Raises:
        OSError: ``plan.out_dir`` is set but not writable (checked before any work).
    """
    if plan.out_dir is not None:
        check_writable(plan.out_dir)
    cells = [(plan, s, r) for s in range(len(plan.scenarios)) for r in range(plan.replications)]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            parts = list(pool.map(_cell, cells))
    else:
        parts = [_cell(c) for c in cells]
    result = RunResult()
    for part in parts:  # single collector, deterministic order
        result.rows.extend(part.rows)
        result.failures.extend(part.failures)
    return result


# -- metrics -------------------------------------------------------------------


SCENARIO_FIELDS = ("covariate_model", "n", "p", "d", "rho", "snr", "tau")


@dataclass
class SummaryRow:
    covariate_model: str
    n: int
    p: int
    d: int
    rho: float
    snr: float
    tau: float
    method: str
    estimator: str
    count: int
    failed: int
    bias: float
    mse: float
    sd: float
    mse_se: float
    mean_runtime: float


def _group_key(row) -> tuple:
    return tuple(getattr(row, f) for f in SCENARIO_FIELDS) + (row.method, row.estimator)


def metrics(rows: Sequence[ResultRow], tau_true: Optional[float] = None,
            failures: Sequence[FailureRecord] = ()) -> list[SummaryRow]:
    """Bias, MSE, empirical sd (ddof=0) and mean runtime per scenario x method x estimator.

    ``tau_true`` overrides the per-row scenario tau. ``mse_se`` is the Monte
    Carlo standard error of the MSE. Groups with no successful rows are
    omitted with a warning.
    """
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(_group_key(row), []).append(row)
    failed: dict[tuple, int] = {}
    for f in failures:
        key = tuple(getattr(f, k) for k in SCENARIO_FIELDS) + (f.method,)
        failed[key] = failed.get(key, 0) + 1
    seen = {k[:-1] for k in groups}
    for key in failed:
        if key not in seen:
            log.warning("no successful rows for %s; group omitted", key)
    summary = []
    for key, members in groups.items():
        tau = members[0].tau if tau_true is None else float(tau_true)
        est = np.array([m.tau_hat for m in members])
        err = est - tau
        sq = err**2
        summary.append(SummaryRow(
            *key, count=len(members), failed=failed.get(key[:-1], 0),
            bias=float(err.mean()), mse=float(sq.mean()), sd=float(est.std()),
            mse_se=float(sq.std(ddof=1) / np.sqrt(len(sq))) if len(sq) > 1 else float("nan"),
            mean_runtime=float(np.mean([m.runtime for m in members])),
        ))
    return summary


def in_sample_delta(tau_hat: float, mu1_true, mu0_true) -> float:
    """|tau_hat - mean(mu1 - mu0)|, the in-sample error against the sample ATE."""
    if mu1_true is None or mu0_true is None:
        raise ValueError("in-sample error needs the true mu0 and mu1 surfaces")
    mu1 = np.asarray(mu1_true, dtype=float)
    mu0 = np.asarray(mu0_true, dtype=float)
    if mu1.shape != mu0.shape or mu1.ndim != 1 or mu1.size == 0:
        raise ValueError("mu1 and mu0 must be non-empty vectors of equal length")
    return float(abs(tau_hat - np.mean(mu1 - mu0)))


# -- outputs -------------------------------------------------------------------


RESULT_HEADER = [f.name for f in fields(ResultRow) if f.name != "runtime"]
TIMING_HEADER = ["covariate_model", "n", "p", "d", "rho", "snr", "tau", "method", "estimator",
                 "replication", "runtime"]
SUMMARY_HEADER = [f.name for f in fields(SummaryRow)]
FAILURE_HEADER = [f.name for f in fields(FailureRecord)]
PLOT_HEADER = ["covariate_model", "n", "p", "d", "rho", "snr", "tau", "estimator", "method",
               "x", "bias", "mse", "count"]


def row_cells(obj, header):
    d = asdict(obj)
    return [int(d[h]) if isinstance(d[h], bool) else d[h] for h in header]


def emit_outputs(result: RunResult, summary: Sequence[SummaryRow], out_dir,
                 plan: Optional[ExperimentPlan] = None) -> list[Path]:
    """Write results, timings, failures, summary and plot-data CSVs.

    Runtimes go to ``timings.csv`` so that ``results.csv`` depends only on the
    plan. A ``plot_<var>.csv`` is written for each of rho, p and n that takes
    several values in the plan (or in the summary when no plan is given).
    """
    out = check_writable(out_dir)
    written = [
        write_table(out / "results.csv", RESULT_HEADER, (row_cells(r, RESULT_HEADER) for r in result.rows)),
        write_table(out / "timings.csv", TIMING_HEADER, (row_cells(r, TIMING_HEADER) for r in result.rows)),
        write_table(out / "failures.csv", FAILURE_HEADER,
                    (row_cells(f, FAILURE_HEADER) for f in result.failures)),
        write_table(out / "summary.csv", SUMMARY_HEADER, (row_cells(s, SUMMARY_HEADER) for s in summary)),
    ]
    for var, attr in SWEEPS.items():
        if plan is not None:
            values = {getattr(c, attr) for c in plan.scenarios}
        else:
            values = {getattr(s, var) for s in summary}
        if len(values) < 2:
            continue
        rows = []
        for s in summary:
            fixed = [s.covariate_model, s.n, s.p, s.d, s.rho, s.snr, s.tau]
            fixed[SCENARIO_FIELDS.index(var)] = ""
            rows.append(fixed + [s.estimator, s.method, getattr(s, var), s.bias, s.mse, s.count])
        rows.sort(key=lambda r: tuple(str(v) for v in r[:9]) + (float(r[9]),))
        written.append(write_table(out / f"plot_{var}.csv", PLOT_HEADER, rows))
    return written


def read_results(path) -> list[ResultRow]:
    """Reload the rows of a ``results.csv`` (runtime is not stored there)."""
    from .io import read_table

    rows = []
    for r in read_table(path):
        rows.append(ResultRow(
            covariate_model=r["covariate_model"], n=int(r["n"]), p=int(r["p"]), d=int(r["d"]),
            rho=float(r["rho"]), snr=float(r["snr"]), tau=float(r["tau"]), method=r["method"],
            estimator=r["estimator"], replication=int(r["replication"]), seed=int(r["seed"]),
            tau_hat=float(r["tau_hat"]), variance=float(r["variance"]),
            ci_low=float(r["ci_low"]), ci_high=float(r["ci_high"]),
            converged=bool(int(r["converged"])),
        ))
    return rows


# -- config files --------------------------------------------------------------


_SCENARIO_KEYS = {
    "covariate_model": str, "n": int, "p": int, "d": int, "missing_prob": float,
    "snr": float, "tau": float, "noise_sd": float, "hidden": int,
}
_PLAN_KEYS = {"replications", "base_seed", "methods", "estimators", "workers", "out"}
_SECTIONS = {
    "miwae": ("latent_dim", "sigma2_prior", "hidden", "K", "epochs", "batch_size", "lr",
              "patience", "cv_folds", "cv_dims", "cv_sigma2", "L", "B"),
    "estimation": ("lam", "eta_clip"),
    "mi": ("m", "sweeps"),
    "mf": ("grid_size", "holdout", "max_iter", "tol"),
}
_PREFIX = {"mi": "mi_", "mf": "mf_"}


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _cast(kind, text, where):
    try:
        return kind(text)
    except ValueError as err:
        raise ValueError(f"{where}: cannot parse {text!r}") from err


def plan_from_ini(text: str, source: str = "<config>") -> ExperimentPlan:
    """Build a plan from INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (K, L, B)
    cp.read_string(text, source=source)
    allowed = {"plan", "scenarios", *_SECTIONS}
    unknown = [s for s in cp.sections() if s not in allowed]
    if unknown:
        raise ValueError(f"{source}: unknown sections {unknown}")
    for name in ("plan", "scenarios"):
        if name not in cp:
            raise ValueError(f"{source}: missing [{name}] section")

    def check(section, keys):
        bad = [k for k in cp[section] if k not in keys]
        if bad:
            raise ValueError(f"{source}: unknown keys in [{section}]: {bad}")

    check("plan", _PLAN_KEYS)
    check("scenarios", _SCENARIO_KEYS)
    grid = {}
    for key, kind in _SCENARIO_KEYS.items():
        if key in cp["scenarios"]:
            raw = _list(cp["scenarios"][key])
            if raw:
                grid[key] = [_cast(kind, v, f"{source} [scenarios] {key}") for v in raw]
    scenarios = [SimulationConfig(**dict(zip(grid, combo)))
                 for combo in itertools.product(*grid.values())]

    defaults = MethodSettings()
    overrides = {}
    for section, keys in _SECTIONS.items():
        if section not in cp:
            continue
        check(section, keys)
        for key, raw in cp[section].items():
            name = _PREFIX.get(section, "") + key
            default = getattr(defaults, name)
            where = f"{source} [{section}] {key}"
            if isinstance(default, tuple):
                kind = int if name == "cv_dims" else float
                overrides[name] = tuple(_cast(kind, v, where) for v in _list(raw))
            else:
                overrides[name] = _cast(type(default), raw, where)
    sec = cp["plan"]
    kw = {}
    if "replications" in sec:
        kw["replications"] = _cast(int, sec["replications"], f"{source} [plan] replications")
    if "base_seed" in sec:
        kw["base_seed"] = _cast(int, sec["base_seed"], f"{source} [plan] base_seed")
    if "workers" in sec:
        kw["workers"] = _cast(int, sec["workers"], f"{source} [plan] workers")
    if "methods" in sec:
        kw["methods"] = tuple(_list(sec["methods"]))
    if "estimators" in sec:
        kw["estimators"] = tuple(_list(sec["estimators"]))
    if sec.get("out", "").strip():
        kw["out_dir"] = Path(sec["out"].strip())
    return ExperimentPlan(scenarios=tuple(scenarios), settings=MethodSettings(**overrides), **kw)


def shipped_plans() -> list[str]:
    """Names of the plan files bundled with the package."""
    root = resources.files("mdcausal") / "plans"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load_plan(name_or_path) -> ExperimentPlan:
    """Load a plan from a file path or the name of a bundled plan (e.g. ``desk``)."""
    path = Path(name_or_path)
    if path.is_file():
        return plan_from_ini(path.read_text(), str(path))
    bundled = resources.files("mdcausal") / "plans" / f"{name_or_path}.ini"
    if bundled.is_file():
        return plan_from_ini(bundled.read_text(), f"{name_or_path}.ini")
    raise FileNotFoundError(f"no plan file {name_or_path!r}; bundled plans: {shipped_plans()}")
