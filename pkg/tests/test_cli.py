"""Tests for config loading, the CLI driver, exit codes, and manifests."""

import csv
import hashlib
import json

import numpy as np
import pytest

import boltzgap.cli as cli
from boltzgap.cli import (
    EXIT_CONFIG,
    EXIT_FALSIFIED,
    EXIT_NUMERICAL,
    EXIT_OK,
    ConfigError,
    RunConfig,
    load_config,
    main,
    run_subcommand,
)
from boltzgap.spectral import SpectralReport

TINY = """
[grid]
n_per_axis = 5
v_max = 3.0
[kernel]
n_angle = 4
[domain]
mode = inflow_box
n_cells = 2
[time]
dt = 0.25
t_end = 1.0
"""


def write_ini(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfigLoading:
    def test_defaults_without_file(self):
        cfg = load_config(None)
        assert cfg == RunConfig()

    def test_file_overrides(self, tmp_path):
        path = write_ini(
            tmp_path,
            TINY + "\n[spectral]\nsweep_v_max = 3 4.5\n"
            "[evolve]\nfit_window = 1, 2\n[output]\nseed = 7\n",
        )
        cfg = load_config(path)
        assert cfg.n_per_axis == 5
        assert cfg.v_max == 3.0
        assert cfg.n_angle == 4
        assert cfg.n_cells == 2
        assert cfg.sweep_v_max == (3.0, 4.5)
        assert cfg.fit_window == (1.0, 2.0)
        assert cfg.seed == 7
        assert cfg.gamma == -1.0  # untouched default

    def test_optional_keys_accept_none(self, tmp_path):
        path = write_ini(
            tmp_path, "[kernel]\nepsilon_reg = none\n[nonlinear]\ndelta =\n"
        )
        cfg = load_config(path)
        assert cfg.epsilon_reg is None and cfg.delta is None

    def test_inline_comments(self, tmp_path):
        path = write_ini(tmp_path, "[grid]\nn_per_axis = 7  # refined\n")
        assert load_config(path).n_per_axis == 7

    def test_unknown_section_rejected(self, tmp_path):
        path = write_ini(tmp_path, "[grud]\nn_per_axis = 5\n")
        with pytest.raises(ConfigError, match="grud"):
            load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_ini(tmp_path, "[grid]\nn_per_axes = 5\n")
        with pytest.raises(ConfigError, match="n_per_axes"):
            load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = write_ini(tmp_path, "[grid]\nv_max = six\n")
        with pytest.raises(ConfigError, match="v_max"):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "absent.ini"))


class TestValidation:
    def test_even_grid_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            RunConfig(n_per_axis=8).validate("assemble")

    def test_gamma_range(self):
        with pytest.raises(ConfigError, match="gamma"):
            RunConfig(gamma=0.5).validate("assemble")
        # the labeled hard-potential control lifts the range check
        RunConfig(gamma=0.5, hard_control=True).validate("assemble")

    def test_beta_required_for_nonlinear(self):
        cfg = RunConfig(beta=1.0)
        cfg.validate("evolve")
        with pytest.raises(ConfigError, match="beta"):
            cfg.validate("nonlinear")

    def test_landau_range(self):
        with pytest.raises(ConfigError, match="gamma_l"):
            RunConfig(gamma_l=-1.5).validate("landau")

    def test_inflow_needs_box(self):
        cfg = RunConfig(mode="torus", inflow="gaussian", inflow_amplitude=0.1)
        with pytest.raises(ConfigError, match="inflow"):
            cfg.validate("evolve")

    def test_time_ordering(self):
        with pytest.raises(ConfigError, match="dt"):
            RunConfig(dt=2.0, t_end=1.0).validate("evolve")


class TestExitCodes:
    def test_missing_config_is_config_error(self, tmp_path):
        rc = run_subcommand("evolve", str(tmp_path / "absent.ini"))
        assert rc == EXIT_CONFIG

    def test_invalid_value_is_config_error(self, tmp_path):
        path = write_ini(tmp_path, "[grid]\nn_per_axis = 8\n")
        rc = run_subcommand("assemble", path, out=str(tmp_path / "out"))
        assert rc == EXIT_CONFIG

    def test_unknown_subcommand_rejected_by_parser(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_smallness_violation_is_config_error(self, tmp_path):
        path = write_ini(tmp_path, TINY + "\n[evolve]\namplitude = 10.0\n")
        rc = run_subcommand("nonlinear", path, out=str(tmp_path / "out"))
        assert rc == EXIT_CONFIG

    def test_falsification_exit_and_manifest(self, tmp_path, monkeypatch):
        def rigged(fullop, k, dense_cap=6000):
            return SpectralReport(
                eigenvalues=[complex(0.1, 0.0)], gap_abscissa=0.1
            )

        monkeypatch.setattr(cli, "rightmost_eigenvalues", rigged)
        path = write_ini(tmp_path, TINY)
        out = tmp_path / "out"
        rc = run_subcommand("spectrum", path, out=str(out))
        assert rc == EXIT_FALSIFIED
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "falsified"
        assert any("no spectral gap" in f for f in manifest["falsifications"])

    def test_numerical_abort_exit(self, tmp_path, monkeypatch):
        def exploding(run):
            raise RuntimeError("non-finite state at step 3")

        monkeypatch.setitem(cli._PIPELINES, "landau", exploding)
        path = write_ini(tmp_path, TINY)
        rc = run_subcommand("landau", path, out=str(tmp_path / "out"))
        assert rc == EXIT_NUMERICAL


class TestPipelines:
    def test_selftest_passes(self, tmp_path):
        out = tmp_path / "out"
        rc = run_subcommand("selftest", None, out=str(out))
        assert rc == EXIT_OK
        report = json.loads((out / "selftest_report.json").read_text())
        assert report["all_ok"] is True
        assert len(report["checks"]) >= 12

    def test_evolve_writes_trace_and_manifest(self, tmp_path):
        path = write_ini(
            tmp_path, TINY + "\n[evolve]\ninitial = random_micro\n"
        )
        out = tmp_path / "out"
        rc = run_subcommand("evolve", path, out=str(out), seed=3)
        assert rc == EXIT_OK
        with open(out / "trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t", "l2", "weighted", "dissipation", "e_int",
                           "e_total", "influx", "outflux"]
        assert len(rows) == 1 + 5  # header + 4 steps + t=0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 3
        digest = hashlib.sha256((out / "trace.csv").read_bytes()).hexdigest()
        assert manifest["outputs"]["trace.csv"] == digest
        assert "evolve" in manifest["timings_s"]

    def test_equilibrium_energy_constant(self, tmp_path):
        path = write_ini(
            tmp_path,
            "[grid]\nn_per_axis = 5\nv_max = 3.0\n[kernel]\nn_angle = 4\n"
            "[domain]\nmode = torus\nn_cells = 2\n"
            "[time]\ndt = 0.25\nt_end = 1.0\n[evolve]\ninitial = equilibrium\n",
        )
        out = tmp_path / "out"
        rc = run_subcommand("evolve", path, out=str(out))
        assert rc == EXIT_OK
        report = json.loads((out / "evolve_report.json").read_text())
        assert report["energy_drift_rel"] < 1e-10

    def test_determinism_given_seed(self, tmp_path):
        path = write_ini(
            tmp_path, TINY + "\n[evolve]\ninitial = random_micro\n"
        )
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = run_subcommand("evolve", path, out=str(out), seed=11,
                                threads=1)
            assert rc == EXIT_OK
            digests.append(
                hashlib.sha256((out / "trace.csv").read_bytes()).hexdigest()
            )
        assert digests[0] == digests[1]
        out = tmp_path / "c"
        assert run_subcommand("evolve", path, out=str(out), seed=12,
                              threads=1) == EXIT_OK
        other = hashlib.sha256((out / "trace.csv").read_bytes()).hexdigest()
        assert other != digests[0]

    def test_operator_cache_reused(self, tmp_path):
        path = write_ini(tmp_path, TINY)
        out = tmp_path / "out"
        assert run_subcommand("assemble", path, out=str(out)) == EXIT_OK
        bins = sorted((out / "cache").glob("*.bin"))
        assert len(bins) == 1
        first = hashlib.sha256(bins[0].read_bytes()).hexdigest()
        assert run_subcommand("assemble", path, out=str(out)) == EXIT_OK
        bins_again = sorted((out / "cache").glob("*.bin"))
        assert bins_again == bins
        assert hashlib.sha256(bins[0].read_bytes()).hexdigest() == first

    def test_no_cache_flag(self, tmp_path):
        path = write_ini(tmp_path, TINY)
        out = tmp_path / "out"
        rc = run_subcommand("assemble", path, out=str(out), no_cache=True)
        assert rc == EXIT_OK

    def test_landau_outputs(self, tmp_path):
        path = write_ini(
            tmp_path,
            "[grid]\nn_per_axis = 5\nv_max = 3.0\n[landau]\ngamma_l = -2.5\n",
        )
        out = tmp_path / "out"
        rc = run_subcommand("landau", path, out=str(out))
        assert rc == EXIT_OK
        with open(out / "landau_profile.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["speed", "lambda_1", "lambda_2"]
        vals = np.array(rows[1:], dtype=float)
        assert np.all(vals[:, 1:] >= 0.0)
        report = json.loads((out / "landau_report.json").read_text())
        assert report["lambda_min"] >= 0.0

    def test_spectrum_box_reports_gap(self, tmp_path):
        path = write_ini(tmp_path, TINY)
        out = tmp_path / "out"
        rc = run_subcommand("spectrum", path, out=str(out))
        assert rc == EXIT_OK
        report = json.loads((out / "spectrum.json").read_text())
        assert report["gap_abscissa"] < 0.0
        assert report["c0_rayleigh"] > 0.0
