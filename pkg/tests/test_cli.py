import subprocess
import sys

import pytest

from mdcausal.cli import main
from mdcausal.io import read_dataset, read_table

FAST_TRAIN = ["--hidden", "8", "--K", "3", "--epochs", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.csv"
    assert main(["simulate", "--n", "150", "--p", "4", "--missing-prob", "0.2",
                 "--seed", "3", "--out", str(path)]) == 0
    return path


class TestSimulate:
    def test_writes_dataset(self, data):
        ds = read_dataset(data)
        assert ds.X.shape == (150, 4) and ds.X.mask.any() and ds.Z.shape == (150, 2)

    def test_seed_is_mandatory(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["simulate", "--out", str(tmp_path / "x.csv")])
        assert err.value.code == 2


class TestEstimate:
    @pytest.mark.parametrize("method", ["Z-oracle", "MI", "MF", "MDC.process", "MDC.mi"])
    def test_methods(self, data, tmp_path, method, capsys):
        out = tmp_path / "e.csv"
        args = ["estimate", "--data", str(data), "--method", method, "--seed", "1",
                "--out", str(out), "--L", "20", "--B", "3", "--m", "2", "--sweeps", "2"]
        assert main(args + FAST_TRAIN) == 0
        (row,) = read_table(out)
        assert row["method"] == method and float(row["ci_low"]) <= float(row["tau_hat"])
        assert "delta=" in capsys.readouterr().out

    def test_x_complete_needs_complete_file(self, data, tmp_path, capsys):
        code = main(["estimate", "--data", str(data), "--method", "X-complete", "--seed", "0",
                     "--out", str(tmp_path / "e.csv")])
        assert code == 2 and "without missing" in capsys.readouterr().err

    def test_export_mi_tables(self, data, tmp_path):
        exp = tmp_path / "imp.csv"
        main(["estimate", "--data", str(data), "--method", "MI", "--m", "2", "--sweeps", "1",
              "--seed", "0", "--out", str(tmp_path / "e.csv"), "--export", str(exp)])
        assert exp.exists() and (tmp_path / "imp_2.csv").exists()
        assert all(v != "" for r in read_table(exp) for v in r.values())

    def test_saved_model_is_reused(self, data, tmp_path):
        model, trace = tmp_path / "m.json", tmp_path / "t.csv"
        assert main(["fit-miwae", "--data", str(data), "--seed", "4", "--out", str(model),
                     "--trace", str(trace), *FAST_TRAIN]) == 0
        assert len(read_table(trace)) == 2
        outs = []
        for k in range(2):
            out = tmp_path / f"e{k}.csv"
            main(["estimate", "--data", str(data), "--method", "MDC.process", "--model", str(model),
                  "--L", "20", "--seed", "9", "--out", str(out)])
            outs.append(out.read_text())
        assert outs[0] == outs[1]

    def test_bad_input_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("X1,W,Y\n1,3,0\n")
        code = main(["estimate", "--data", str(bad), "--method", "MI", "--seed", "0",
                     "--out", str(tmp_path / "e.csv")])
        assert code == 2 and "line 2" in capsys.readouterr().err


PLAN = """
[plan]
replications = 2
methods = Z-oracle, X-complete
estimators = dr
[scenarios]
n = 200
p = 5
missing_prob = {rho}
"""


class TestBenchAndSummarize:
    def test_bench_then_summarize(self, tmp_path):
        cfg = tmp_path / "plan.ini"
        cfg.write_text(PLAN.format(rho="0, 0.3"))
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
        assert len(read_table(tmp_path / "run" / "results.csv")) == 8
        assert (tmp_path / "run" / "plot_rho.csv").exists()
        assert main(["summarize", "--results", str(tmp_path / "run" / "results.csv"),
                     "--out", str(tmp_path / "sum")]) == 0
        assert len(read_table(tmp_path / "sum" / "summary.csv")) == 4

    def test_failed_cells_give_exit_one(self, tmp_path):
        cfg = tmp_path / "plan.ini"
        cfg.write_text(PLAN.format(rho="1.0").replace("Z-oracle, X-complete", "Z-oracle, MF"))
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 1
        assert len(read_table(tmp_path / "run" / "failures.csv")) == 2

    def test_overrides(self, tmp_path):
        cfg = tmp_path / "plan.ini"
        cfg.write_text(PLAN.format(rho="0"))
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "a"), "--replications", "1",
              "--methods", "Z-oracle", "--seed", "5"])
        rows = read_table(tmp_path / "a" / "results.csv")
        assert [r["method"] for r in rows] == ["Z-oracle"]

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "plan.ini"
        cfg.write_text(PLAN.format(rho="0") + "colour = red\n")
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 2
        assert "colour" in capsys.readouterr().err

    def test_console_module(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "mdcausal.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for sub in ("simulate", "fit-miwae", "estimate", "bench", "summarize"):
            assert sub in proc.stdout
