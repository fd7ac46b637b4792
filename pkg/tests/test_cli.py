import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mtsaug.cli import main
from mtsaug.config import RunConfig, build_config, read_config_file
from mtsaug.errors import ConfigError
from mtsaug.market_data import write_price_panel
from mtsaug.synth import SynthSpec, generate


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _only_dir(root, prefix):
    dirs = [d for d in Path(root).iterdir() if d.name.startswith(prefix)]
    assert len(dirs) == 1
    return dirs[0]


@pytest.fixture
def fx_file(tmp_path):
    panel, _ = generate(SynthSpec(n_assets=21, n_days=160, n_factors=5, seed=1))
    path = tmp_path / "fx.csv"
    write_price_panel(panel, path)
    return path


class TestConfig:
    def test_mode_defaults(self, fx_file):
        stocks = build_config({"mode": "stocks", "data": str(fx_file)})
        fx = build_config({"mode": "fx", "data": str(fx_file)})
        assert (stocks.tau_star, stocks.q_count, stocks.restricted) == (20, 5, True)
        assert (fx.tau_star, fx.q_count, fx.restricted) == (3, 2, False)
        assert stocks.compression_ratio == 50 and stocks.count == 1200

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\ntau-star = 5\nq_count = 4\nrestricted = off\n")
        values = read_config_file(cfg_file)
        assert values == {"tau_star": 5, "q_count": 4, "restricted": False}
        cfg = build_config(values, {"tau_star": 7})
        assert (cfg.tau_star, cfg.q_count, cfg.restricted) == (7, 4, False)

    @pytest.mark.parametrize("text", ["bogus = 1\n", "tau_star 5\n", "tau_star = five\n"])
    def test_bad_file(self, tmp_path, text):
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "c.cfg")

    @pytest.mark.parametrize("kw", [dict(mode="bonds"), dict(tau_star=0), dict(q_count=1),
                                    dict(regime="XX"), dict(regime="FT", tau_star=1),
                                    dict(compression_ratio=0), dict(offsets=(0, 25)),
                                    dict(offsets=(1, 1)), dict(count=0),
                                    dict(mode="stocks"), dict(mode="stocks", data="/nope.csv"),
                                    dict(factors=60), dict(rho=2.0)])
    def test_rejects_before_running(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw).validate()

    def test_digest(self):
        a, b = build_config({}), build_config({"out": "elsewhere"})
        assert a.digest("backtest") == b.digest("backtest")
        assert a.digest("backtest") != build_config({"seed": 1}).digest("backtest")
        assert a.digest("backtest") != a.digest("synth")


class TestSynthCommand:
    def test_deterministic_files(self, tmp_path, capsys):
        args = ["synth", "--assets", "50", "--days", "300", "--synth-seed", "7",
                "--mispricing-prob", "0.01", "--rho", "-0.5"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        da, db = _only_dir(tmp_path / "a", "synth-"), _only_dir(tmp_path / "b", "synth-")
        assert da.name == db.name
        for name in ("prices.csv", "ledger.csv", "manifest.json"):
            assert _digest(da / name) == _digest(db / name)
        assert "assets=50 days=300" in capsys.readouterr().out

    def test_default_panel(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path)]) == 0
        assert "cells=150000 missing=0" in capsys.readouterr().out

    def test_invalid_spec(self, tmp_path, capsys):
        assert main(["synth", "--factors", "60", "--assets", "50", "--out", str(tmp_path)]) == 1
        assert "n_factors" in capsys.readouterr().err
        assert not list(tmp_path.iterdir())

    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["synth", "--assets", "many"]) == 1
        assert main(["explode"]) == 1


SMALL = ["--count", "20", "--epochs", "1", "--assets", "10", "--factors", "3", "--days", "120"]


class TestExperimentCommands:
    def test_eval_generalization_grid(self, tmp_path):
        rc = main(["eval-generalization", *SMALL, "--tau-max", "3", "--test-count", "2",
                   "--out", str(tmp_path)])
        assert rc == 0
        rows = _rows(_only_dir(tmp_path, "eval-") / "generalization.csv")
        assert len(rows) == 6 * 2
        assert {(r["regime"], r["activation"]) for r in rows} == {
            (g, a) for g in ("MTS", "STS", "FT") for a in ("linear", "tanh")}
        assert {r["tau_star"] for r in rows} == {"2", "3"}
        assert all(float(r["rmse"]) > 0 for r in rows)

    def test_empty_data_file(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        assert main(["eval-generalization", "--mode", "stocks", "--data", str(empty),
                     "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_insufficient_history(self, tmp_path, capsys):
        assert main(["eval-generalization", "--tau-max", "20", "--days", "300",
                     "--out", str(tmp_path)]) == 2
        assert "history" in capsys.readouterr().err

    def test_sweep_has_ten_rows(self, tmp_path):
        assert main(["sweep-compression", *SMALL, "--tau-star", "2", "--test-count", "2",
                     "--out", str(tmp_path)]) == 0
        rows = _rows(_only_dir(tmp_path, "sweep-") / "compression.csv")
        assert [float(r["compression_ratio"]) for r in rows] == [10.0 * k for k in range(1, 11)]
        assert [int(r["hidden_dim"]) for r in rows] == list(range(1, 11))


class TestBacktestAndDiagnose:
    def _run(self, tmp_path, *extra):
        rc = main(["backtest", "--count", "20", "--epochs", "1", "--tau-star", "3",
                   "--rebalances", "8", "--assets", "10", "--factors", "3", "--days", "120",
                   "--mispricing-prob", "0.02", "--rho", "-0.5", "--out", str(tmp_path), *extra])
        return rc, _only_dir(tmp_path, "backtest-")

    def test_fx_mode(self, tmp_path, fx_file):
        rc = main(["backtest", "--mode", "fx", "--data", str(fx_file), "--count", "20",
                   "--epochs", "1", "--out", str(tmp_path)])
        assert rc == 0
        d = _only_dir(tmp_path, "backtest-")
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["backtest"]["q_count"] == 2 and manifest["backtest"]["offsets"] == [0, 1, 2]
        assert manifest["backtest"]["restricted"] is False
        offsets = {r["offset"] for r in _rows(d / "periods.csv")}
        assert offsets == {"0", "1", "2"}
        assert len(_rows(d / "combined.csv")) > 0

    def test_diagnose(self, tmp_path, caplog):
        rc, d = self._run(tmp_path)
        assert rc == 0
        assert main(["diagnose", str(d), "--max-lag", "10"]) == 0
        jac = _rows(d / "jaccard.csv")
        assert jac and all(abs(float(r["A_minus_B_minus_C"])) <= 1e-12 for r in jac)
        assert max(int(r["n"]) for r in jac) == 7
        lags = [int(r["lag"]) for r in _rows(d / "autocorr.csv")]
        assert lags == list(range(1, 7))
        assert "lag 7 exceeds" in caplog.text
        beta = _rows(d / "beta.csv")
        per_offset = [r for r in beta if r["offset"] == "0"]
        np.testing.assert_allclose([float(r["cum_beta"]) for r in per_offset],
                                   np.cumsum([float(r["beta"]) for r in per_offset]))

    def test_diagnose_missing_artifacts(self, tmp_path, capsys):
        assert main(["diagnose", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "abnormal.csv" in err and "regression.csv" in err and "manifest.json" in err

    def test_rerun_is_byte_identical(self, tmp_path):
        _, d = self._run(tmp_path / "a")
        _, e = self._run(tmp_path / "b")
        assert d.name == e.name
        for f in sorted(d.iterdir()):
            assert _digest(f) == _digest(e / f.name), f.name

    def test_failures_written_with_exit_2(self, tmp_path, capsys):
        # a fully flat market cannot be normalized: every offset aborts
        panel_path = tmp_path / "flat.csv"
        from mtsaug.market_data import PricePanel
        write_price_panel(PricePanel(("a", "b", "c"), np.arange(80), np.ones((3, 80))), panel_path)
        rc = main(["backtest", "--mode", "stocks", "--data", str(panel_path), "--tau-star", "2",
                   "--q", "2", "--count", "10", "--out", str(tmp_path / "runs")])
        assert rc == 2
        d = _only_dir(tmp_path / "runs", "backtest-")
        assert len(_rows(d / "failures.csv")) == 2
        assert "offset 0 failed" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mtsaug", "synth", "--days", "50", "--out",
                          str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0 and "days=50" in out.stdout
