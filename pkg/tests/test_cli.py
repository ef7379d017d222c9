"""Command-line interface: verbs, exit codes, outputs."""

import json
from pathlib import Path

import pytest

from fiberflow.cli import (EXIT_NONCONVERGENCE, EXIT_OK, EXIT_VALIDATION,
                           main)


def write_config(tmp_path, **over):
    raw = {
        "m": 16, "n": 4, "kappa": 0.01, "tau": 0.25, "t_end": 0.5,
        "snapshot_times": [0.0, 0.5],
        "solver": {"tol": 1e-6, "max_iters": 20000},
        "output_dir": str(tmp_path / "out"),
    }
    raw.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


class TestRunVerb:
    def test_success(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "finished 2 steps" in out
        assert (tmp_path / "out" / "manifest.json").exists()

    def test_output_override(self, tmp_path):
        cfg = write_config(tmp_path)
        dest = tmp_path / "elsewhere"
        assert main(["--quiet", "run", "--config", str(cfg),
                     "--output", str(dest)]) == EXIT_OK
        assert (dest / "manifest.json").exists()

    def test_invalid_config_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, t_end=0.3)
        assert main(["run", "--config", str(cfg)]) == EXIT_VALIDATION

    def test_missing_config_exit_2(self, tmp_path):
        assert main(["run", "--config",
                     str(tmp_path / "nope.json")]) == EXIT_VALIDATION

    def test_nonconvergence_exit_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, solver={"tol": 1e-13, "max_iters": 6})
        assert main(["run", "--config", str(cfg)]) == EXIT_NONCONVERGENCE
        assert "aborted" in capsys.readouterr().err


class TestSinkhornVerb:
    def test_writes_reference(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["sinkhorn", "--config", str(cfg)]) == EXIT_OK
        assert (tmp_path / "out" / "sinkhorn_rstar.bin").exists()
        assert (tmp_path / "out" / "sinkhorn_potentials.csv").exists()
        assert "E* =" in capsys.readouterr().out

    def test_kappa_zero_rejected(self, tmp_path):
        cfg = write_config(tmp_path, kappa=0.0)
        assert main(["sinkhorn", "--config", str(cfg)]) == EXIT_VALIDATION


class TestCompareVerb:
    def test_compare_two_runs(self, tmp_path):
        for name, n in (("a", 4), ("b", 8)):
            cfg = write_config(tmp_path, n=n,
                              output_dir=str(tmp_path / name))
            assert main(["--quiet", "run", "--config", str(cfg)]) == EXIT_OK
        out_csv = tmp_path / "cmp.csv"
        assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"),
                     "--output", str(out_csv)]) == EXIT_OK
        assert out_csv.exists()

    def test_missing_dir_exit_2(self, tmp_path):
        assert main(["compare", str(tmp_path / "a"),
                     str(tmp_path / "b")]) == EXIT_VALIDATION


class TestStationarityVerb:
    def test_small_case(self, capsys):
        assert main(["stationarity", "--m", "16", "--n", "16",
                     "--tau", "0.25"]) == EXIT_OK
        assert "dual gap" in capsys.readouterr().out

    def test_tau_above_limit_exit_2(self):
        assert main(["stationarity", "--m", "16", "--n", "16",
                     "--tau", "1.5"]) == EXIT_VALIDATION


class TestSelftestVerb:
    def test_passes(self, capsys):
        assert main(["selftest"]) == EXIT_OK
        assert "selftest ok" in capsys.readouterr().out
