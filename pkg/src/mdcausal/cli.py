"""Command line entry point: ``mdcausal <subcommand> ...``.

Exit status is 0 on success, 1 when any estimation cell failed and 2 on
usage or input errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .baselines import choose_lambda, iterative_impute, lambda_grid, mi_estimate, soft_impute
from .datagen import SimulationConfig, simulate
from .estimators import estimate, mdc_mi, mdc_process
from .harness import (
    METHODS,
    SUMMARY_HEADER,
    MethodSettings,
    emit_outputs,
    in_sample_delta,
    load_plan,
    metrics,
    read_results,
    row_cells,
    run_plan,
    standardize_incomplete,
)
from .io import read_dataset, write_dataset, write_estimate, write_matrix, write_table, write_trace
from .miwae import LatentModel, TrainConfig, fit_model, posterior_mean

log = logging.getLogger("mdcausal")
_D = MethodSettings()


def _add_train_flags(p):
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--sigma2-prior", type=float, default=_D.sigma2_prior)
    p.add_argument("--hidden", type=int, default=_D.hidden)
    p.add_argument("--K", type=int, default=_D.K)
    p.add_argument("--epochs", type=int, default=_D.epochs)
    p.add_argument("--batch-size", type=int, default=_D.batch_size)
    p.add_argument("--lr", type=float, default=_D.lr)
    p.add_argument("--patience", type=int, default=_D.patience)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(K=args.K, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       seed=args.seed, patience=args.patience)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdcausal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset CSV")
    p.add_argument("--covariate-model", choices=["lrmf", "dlvm"], default="lrmf")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--missing-prob", type=float, default=0.0)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--no-truth", action="store_true", help="omit ground-truth columns")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fit-miwae", help="train a latent model on a dataset CSV")
    p.add_argument("--data", type=Path, required=True)
    _add_train_flags(p)
    p.add_argument("--trace", type=Path, help="optional loss-trace CSV")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("estimate", help="run one method on a dataset CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--estimator", choices=["dr", "regression"], default="dr")
    p.add_argument("--model", type=Path, help="trained model for MDC methods (else trained here)")
    _add_train_flags(p)
    p.add_argument("--L", type=int, default=_D.L)
    p.add_argument("--B", type=int, default=_D.B)
    p.add_argument("--lam", type=float, default=_D.lam)
    p.add_argument("--eta-clip", type=float, default=_D.eta_clip)
    p.add_argument("--m", type=int, default=_D.mi_m)
    p.add_argument("--sweeps", type=int, default=_D.mi_sweeps)
    p.add_argument("--export", type=Path, help="CSV of the features or completed matrix used")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="run an experiment plan")
    p.add_argument("--config", required=True, help="plan file or bundled plan name (desk, paper)")
    p.add_argument("--seed", type=int, help="override the plan's base seed")
    p.add_argument("--replications", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--methods", help="comma-separated subset of methods")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("summarize", help="metrics from a results.csv")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--tau", type=float, help="true effect (defaults to each row's scenario tau)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def cmd_simulate(args) -> int:
    cfg = SimulationConfig(n=args.n, p=args.p, d=args.d, covariate_model=args.covariate_model,
                           missing_prob=args.missing_prob, snr=args.snr, tau=args.tau,
                           seed=args.seed, noise_sd=args.noise_sd)
    write_dataset(args.out, simulate(cfg), include_truth=not args.no_truth)
    return 0


def cmd_fit(args) -> int:
    ds = read_dataset(args.data)
    res = fit_model(ds.X, args.latent_dim, _train_cfg(args), args.sigma2_prior, args.hidden)
    res.model.save(args.out)
    if args.trace:
        write_trace(args.trace, res.trace)
    log.info("final bound %.6f after %d epochs", res.trace[-1][1], len(res.trace))
    return 0


def cmd_estimate(args) -> int:
    ds = read_dataset(args.data)
    W, Y, m = ds.W, ds.Y, args.method
    B = L = None
    exported = None
    if m in ("Z-oracle", "X-complete"):
        F = ds.Z if m == "Z-oracle" else (None if ds.X.mask.any() else ds.X.values)
        if F is None:
            raise ValueError(f"{m} needs ground-truth Z columns" if m == "Z-oracle"
                             else "X-complete needs a file without missing covariates")
        est = estimate(F, W, Y, args.estimator, args.lam, args.eta_clip)
    elif m in ("MDC.process", "MDC.mi"):
        if args.model:
            model = LatentModel.load(args.model)
        else:
            model = fit_model(ds.X, args.latent_dim, _train_cfg(args), args.sigma2_prior,
                              args.hidden).model
        L = args.L
        if m == "MDC.mi":
            if args.estimator != "dr":
                raise ValueError("MDC.mi supports only the dr estimator")
            B = args.B
            est = mdc_mi(model, ds.X, W, Y, B, L, args.lam, args.eta_clip, args.seed)
        else:
            est = mdc_process(model, ds.X, W, Y, args.estimator, L, args.lam, args.eta_clip,
                              args.seed)
        if args.export:
            exported = (posterior_mean(model, ds.X, L, args.seed), "Z")
    elif m == "MI":
        imp = iterative_impute(ds.X, W, Y, args.m, args.sweeps, args.seed)
        B = args.m
        est = mi_estimate(imp, W, Y, args.estimator, args.lam, args.eta_clip)
        if args.export:
            exported = (imp.completed[0], "X")
    else:
        Xs = standardize_incomplete(ds.X)
        choice = choose_lambda(Xs, lambda_grid(Xs, _D.mf_grid_size), _D.mf_holdout, args.seed,
                               _D.mf_max_iter, _D.mf_tol)
        comp = soft_impute(Xs, choice.lam, _D.mf_max_iter, _D.mf_tol)
        est = estimate(comp.latent, W, Y, args.estimator, args.lam, args.eta_clip)
        if args.export:
            exported = (comp.completed, "X")
    write_estimate(args.out, est, method=m, mode=args.estimator, B=B, L=L, lam=args.lam,
                   seed=args.seed)
    if exported is not None:
        if m == "MI":
            for k, table in enumerate(imp.completed):
                target = args.export if k == 0 else args.export.with_name(
                    f"{args.export.stem}_{k + 1}{args.export.suffix}")
                write_matrix(target, table, "X")
        else:
            write_matrix(args.export, *exported)
    line = f"{m} {args.estimator}: tau_hat={est.tau_hat:.6f} ci=({est.ci_95[0]:.6f}, {est.ci_95[1]:.6f})"
    if ds.mu0 is not None:
        line += f" delta={in_sample_delta(est.tau_hat, ds.mu1, ds.mu0):.6f}"
    print(line)
    return 0


def cmd_bench(args) -> int:
    plan = load_plan(args.config)
    changes = {"out_dir": args.out}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.replications is not None:
        changes["replications"] = args.replications
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.methods:
        changes["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    plan = dataclasses.replace(plan, **changes)
    result = run_plan(plan)
    emit_outputs(result, metrics(result.rows, failures=result.failures), args.out, plan)
    total = len(result.rows) + len(result.failures)
    print(f"{len(result.rows)} rows, {len(result.failures)} failed cells -> {args.out}")
    return 0 if result.ok and total else 1


def cmd_summarize(args) -> int:
    rows = read_results(args.results)
    summary = metrics(rows, args.tau)
    args.out.mkdir(parents=True, exist_ok=True)
    write_table(args.out / "summary.csv", SUMMARY_HEADER, (row_cells(s, SUMMARY_HEADER) for s in summary))
    for s in summary:
        print(f"{s.covariate_model} n={s.n} p={s.p} rho={s.rho} {s.method:<12} {s.estimator:<10} "
              f"bias={s.bias:+.4f} mse={s.mse:.4f} count={s.count}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit-miwae": cmd_fit, "estimate": cmd_estimate,
            "bench": cmd_bench, "summarize": cmd_summarize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"mdcausal {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
