import logging

import numpy as np
import pytest

from mdcausal.datagen import SimulationConfig
from mdcausal.harness import (
    METHODS,
    ExperimentPlan,
    MethodSettings,
    ResultRow,
    RunResult,
    derive_seed,
    emit_outputs,
    in_sample_delta,
    load_plan,
    metrics,
    plan_from_ini,
    read_results,
    run_plan,
    shipped_plans,
)
from mdcausal.io import read_table

TINY = MethodSettings(hidden=16, K=5, epochs=3, batch_size=64, L=30, B=3, mi_m=2, mi_sweeps=2,
                      mf_grid_size=3, mf_max_iter=20)


def scenario(**kw):
    base = dict(n=200, p=5, d=2, missing_prob=0.2)
    base.update(kw)
    return SimulationConfig(**base)


def row(tau_hat, method="Z-oracle", estimator="dr", rho=0.0, runtime=0.0, rep=0):
    return ResultRow("lrmf", 100, 5, 2, rho, 10.0, 1.0, method, estimator, rep, 0, tau_hat,
                     0.1, tau_hat - 0.5, tau_hat + 0.5, True, runtime)


class TestRunPlan:
    def test_single_oracle_cell(self):
        plan = ExperimentPlan([scenario()], methods=["Z-oracle"], estimators=["dr"], replications=1)
        res = run_plan(plan)
        assert len(res.rows) == 1 and res.ok

    def test_rerun_is_identical(self):
        plan = ExperimentPlan([scenario()], methods=["Z-oracle", "X-complete"], replications=3,
                              base_seed=11)
        a, b = run_plan(plan), run_plan(plan)
        strip = lambda rows: [(r.method, r.estimator, r.seed, r.tau_hat, r.variance) for r in rows]
        assert strip(a.rows) == strip(b.rows)

    def test_all_methods_small(self):
        plan = ExperimentPlan([scenario()], replications=1, settings=TINY, base_seed=3)
        res = run_plan(plan)
        assert res.ok, res.failures
        got = {(r.method, r.estimator) for r in res.rows}
        # MDC.mi is a DR-only method
        assert len(got) == 2 * len(METHODS) - 1 and ("MDC.mi", "regression") not in got

    def test_seed_isolation(self):
        full = ExperimentPlan([scenario()], replications=2, settings=TINY, base_seed=5,
                              methods=["MDC.process", "MF", "Z-oracle"])
        part = ExperimentPlan([scenario()], replications=2, settings=TINY, base_seed=5,
                              methods=["MDC.process", "Z-oracle"])
        pick = lambda res: {(r.method, r.estimator, r.replication): r.tau_hat for r in res.rows
                            if r.method != "MF"}
        assert pick(run_plan(full)) == pick(run_plan(part))

    def test_failed_cell_is_logged_and_run_continues(self, caplog):
        # fully missing covariates cannot be imputed, but the oracle still runs
        plan = ExperimentPlan([scenario(missing_prob=1.0)], methods=["MF", "Z-oracle"],
                              estimators=["dr"], replications=2)
        with caplog.at_level(logging.WARNING, logger="mdcausal.harness"):
            res = run_plan(plan)
        assert [r.method for r in res.rows] == ["Z-oracle", "Z-oracle"]
        assert len(res.failures) == 2 and not res.ok
        assert "MF" in caplog.text
        assert all(np.isfinite(r.tau_hat) for r in res.rows)

    def test_unwritable_output_aborts_first(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        plan = ExperimentPlan([scenario()], methods=["Z-oracle"], out_dir=blocker / "sub")
        with pytest.raises(OSError, match="not writable"):
            run_plan(plan)

    def test_worker_pool_matches_serial(self):
        kw = dict(methods=["Z-oracle"], replications=3, base_seed=1)
        serial = run_plan(ExperimentPlan([scenario(), scenario(p=6)], **kw))
        pooled = run_plan(ExperimentPlan([scenario(), scenario(p=6)], workers=2, **kw))
        assert [r.tau_hat for r in serial.rows] == [r.tau_hat for r in pooled.rows]

    @pytest.mark.parametrize("kw", [dict(methods=["CEVAE"]), dict(estimators=["ipw"]),
                                    dict(methods=["MDC.mi"], estimators=["regression"]),
                                    dict(replications=0)])
    def test_invalid_plan(self, kw):
        with pytest.raises(ValueError):
            ExperimentPlan([scenario()], **kw)

    def test_oracle_monte_carlo(self):
        cfg = SimulationConfig(n=1000, p=10, d=2, missing_prob=0.3, snr=10)
        res = run_plan(ExperimentPlan([cfg], methods=["Z-oracle"], estimators=["dr"],
                                      replications=10, base_seed=0))
        assert abs(np.mean([r.tau_hat for r in res.rows]) - 1.0) < 0.1


class TestSeeds:
    def test_distinct_per_cell_and_tag(self):
        cfg = scenario()
        seeds = {derive_seed(0, cfg, r, t) for r in range(5) for t in ("data", "MF", "MI")}
        assert len(seeds) == 15

    def test_base_enters_by_xor(self):
        cfg = scenario()
        assert derive_seed(6, cfg, 1) == 6 ^ derive_seed(0, cfg, 1)

    def test_ignores_config_seed_field(self):
        assert derive_seed(0, scenario(seed=1), 0) == derive_seed(0, scenario(seed=2), 0)


class TestMetrics:
    def test_exact_estimates(self):
        (s,) = metrics([row(1.0), row(1.0, rep=1)])
        assert (s.bias, s.mse, s.count) == (0.0, 0.0, 2)

    def test_hand_arithmetic(self):
        (s,) = metrics([row(0.0), row(2.0, rep=1)], tau_true=1.0)
        assert (s.bias, s.mse, s.sd) == (0.0, 1.0, 1.0)

    def test_mse_decomposition(self):
        rng = np.random.default_rng(0)
        rows = [row(float(t), method=m, rep=i) for m in ("MF", "MI")
                for i, t in enumerate(rng.normal(1.3, 0.7, 17))]
        for s in metrics(rows):
            assert abs(s.mse - (s.bias**2 + s.sd**2)) < 1e-12

    def test_runtime_and_failures(self):
        from mdcausal.harness import FailureRecord

        fail = FailureRecord("lrmf", 100, 5, 2, 0.0, 10.0, 1.0, "Z-oracle", 2, "boom")
        (s,) = metrics([row(1.0, runtime=2.0), row(1.0, runtime=4.0, rep=1)], failures=[fail])
        assert s.mean_runtime == 3.0 and s.failed == 1

    def test_empty_group_omitted_with_warning(self, caplog):
        from mdcausal.harness import FailureRecord

        fail = FailureRecord("lrmf", 100, 5, 2, 0.0, 10.0, 1.0, "MF", 0, "boom")
        with caplog.at_level(logging.WARNING, logger="mdcausal.harness"):
            out = metrics([row(1.0)], failures=[fail])
        assert [s.method for s in out] == ["Z-oracle"] and "omitted" in caplog.text


class TestInSampleDelta:
    def test_equal_to_sample_ate(self):
        assert in_sample_delta(2.0, [3.0, 5.0], [1.0, 3.0]) == 0.0

    def test_half(self):
        assert in_sample_delta(4.5, [5.0, 7.0], [1.0, 3.0]) == 0.5

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        mu1, mu0 = rng.normal(size=50), rng.normal(size=50)
        perm = rng.permutation(50)
        assert in_sample_delta(0.3, mu1, mu0) == pytest.approx(in_sample_delta(0.3, mu1[perm], mu0[perm]))

    def test_missing_truth_rejected(self):
        with pytest.raises(ValueError, match="mu0 and mu1"):
            in_sample_delta(1.0, None, [1.0])


class TestEmitOutputs:
    def test_empty_results_give_headers_only(self, tmp_path):
        emit_outputs(RunResult(), [], tmp_path)
        for name in ("results.csv", "summary.csv", "failures.csv", "timings.csv"):
            assert len((tmp_path / name).read_text().splitlines()) == 1

    def test_summary_rows_and_rho_plot(self, tmp_path):
        grid = [0.0, 0.3, 0.5, 0.9]
        plan = ExperimentPlan([scenario(missing_prob=r) for r in grid],
                              methods=["Z-oracle", "X-complete"], estimators=["dr"],
                              replications=2)
        res = run_plan(plan)
        summary = metrics(res.rows)
        assert len(summary) == len(plan.scenarios) * len(plan.methods)
        emit_outputs(res, summary, tmp_path, plan)
        plot = read_table(tmp_path / "plot_rho.csv")
        assert sorted({float(r["x"]) for r in plot}) == grid
        assert {r["method"] for r in plot} == {"Z-oracle", "X-complete"}
        assert not (tmp_path / "plot_p.csv").exists()

    def test_results_round_trip_and_no_runtime(self, tmp_path):
        res = RunResult(rows=[row(0.123456789, runtime=9.5)])
        emit_outputs(res, metrics(res.rows), tmp_path)
        assert "runtime" not in (tmp_path / "results.csv").read_text().splitlines()[0]
        (back,) = read_results(tmp_path / "results.csv")
        assert back.tau_hat == 0.123456789 and back.converged
        assert float(read_table(tmp_path / "timings.csv")[0]["runtime"]) == 9.5


class TestConfig:
    INI = """
[plan]
replications = 2
base_seed = 9
methods = Z-oracle, MF
estimators = dr

[scenarios]
covariate_model = lrmf, dlvm
n = 300
p = 10, 20
missing_prob = 0, 0.3  # two missingness levels

[miwae]
K = 7
cv_dims = 1, 2

[mi]
m = 4

[estimation]
lam = 2.5
"""

    def test_parse(self):
        plan = plan_from_ini(self.INI)
        assert len(plan.scenarios) == 8 and plan.replications == 2 and plan.base_seed == 9
        assert plan.methods == ("Z-oracle", "MF")
        st = plan.settings
        assert (st.K, st.cv_dims, st.mi_m, st.lam) == (7, (1, 2), 4, 2.5)
        assert st.epochs == MethodSettings().epochs
        assert {s.covariate_model for s in plan.scenarios} == {"lrmf", "dlvm"}

    @pytest.mark.parametrize("bad", ["[plan]\nreps = 2\n[scenarios]\nn = 10\n",
                                     "[plan]\n[scenarios]\nn = 10\n[miwae]\nk = 3\n",
                                     "[plan]\n[scenarios]\nn = 10\n[extra]\n",
                                     "[plan]\n[scenarios]\nn = ten\n",
                                     "[plan]\n"])
    def test_strict(self, bad):
        with pytest.raises(ValueError):
            plan_from_ini(bad)

    def test_shipped_desk_plan(self):
        assert "desk" in shipped_plans()
        plan = load_plan("desk")
        assert {s.n for s in plan.scenarios} == {1000}
        assert {s.p for s in plan.scenarios} == {10, 100}
        assert {s.d for s in plan.scenarios} == {2}
        assert {s.missing_prob for s in plan.scenarios} == {0.0, 0.3, 0.5}
        assert plan.replications == 10

    def test_load_from_path(self, tmp_path):
        f = tmp_path / "p.ini"
        f.write_text(self.INI)
        assert load_plan(f).base_seed == 9

    def test_unknown_plan_name(self):
        with pytest.raises(FileNotFoundError, match="desk"):
            load_plan("no-such-plan")
