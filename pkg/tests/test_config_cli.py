"""Config validation, experiment harness, and CLI behavior."""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from fastslow.cli import main
from fastslow.config import dump_config, load_config, validate_config
from fastslow.errors import ConfigError
from fastslow.experiments import run_experiment

REPO_CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def read_report(path) -> dict:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: float(r[1]) for r in rows[1:]}


def small_centering_cfg(**overrides):
    cfg = yaml.safe_load((REPO_CONFIGS / "centering_check.yaml").read_text())
    cfg["centering"]["n_samples"] = 20_000
    cfg.update(overrides)
    return cfg


class TestConfig:
    def test_round_trip_preserves_content(self, tmp_path):
        cfg = load_config(REPO_CONFIGS / "converge_ou_1d.yaml")
        text = dump_config(cfg)
        again = yaml.safe_load(text)
        assert again == cfg
        assert dump_config(again) == text

    def test_missing_block_names_key(self):
        cfg = small_centering_cfg()
        del cfg["driver"]
        with pytest.raises(ConfigError) as err:
            validate_config(cfg, "centering-check")
        assert "driver" in str(err.value)

    def test_kind_mismatch_detected(self):
        cfg = small_centering_cfg()
        with pytest.raises(ConfigError):
            validate_config(cfg, "converge")

    def test_eps_list_must_decrease(self):
        cfg = load_config(REPO_CONFIGS / "converge_ou_1d.yaml")
        cfg["converge"]["eps_list"] = [0.1, 0.1, 0.05]
        with pytest.raises(ConfigError):
            validate_config(cfg, "converge")

    def test_eps_list_minimum_length(self):
        cfg = load_config(REPO_CONFIGS / "converge_ou_1d.yaml")
        cfg["converge"]["eps_list"] = [0.1, 0.05]
        with pytest.raises(ConfigError):
            validate_config(cfg, "converge")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            validate_config({}, "frobnicate")


class TestRunExperiment:
    def test_centering_check_passes_and_reports(self, tmp_path):
        summary = run_experiment("centering-check", small_centering_cfg(), tmp_path)
        assert summary["residual"] <= summary["bound"]
        assert (tmp_path / "report.csv").exists()
        assert (tmp_path / "manifest.json").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["kind"] == "centering-check"
        assert manifest["seed"] == 20260810

    def test_reports_byte_identical_across_runs(self, tmp_path):
        cfg = small_centering_cfg()
        run_experiment("centering-check", cfg, tmp_path / "a")
        run_experiment("centering-check", cfg, tmp_path / "b")
        assert (tmp_path / "a/report.csv").read_bytes() == (
            tmp_path / "b/report.csv"
        ).read_bytes()

    def test_seed_override_changes_report(self, tmp_path):
        cfg = small_centering_cfg()
        cfg["driver"]["kind"] = "ou_surrogate"
        cfg["driver"]["gamma"] = 1.0
        cfg["driver"]["amplitude"] = 1.0
        cfg["driver"]["observable"] = {
            "channels": [{"coord": 0}, {"coord": 0, "degree": 2, "center": 0.5}]
        }
        run_experiment("centering-check", cfg, tmp_path / "a", seed=1)
        run_experiment("centering-check", cfg, tmp_path / "b", seed=2)
        assert (tmp_path / "a/report.csv").read_bytes() != (
            tmp_path / "b/report.csv"
        ).read_bytes()


class TestCli:
    def test_centering_check_exit_zero(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(
            main,
            [
                "centering-check",
                "--config", str(REPO_CONFIGS / "centering_check.yaml"),
                "--out", str(tmp_path / "out"),
            ],
        )
        assert res.exit_code == 0, res.output
        assert json.loads(res.output)["ok"] is True

    def test_planted_bias_detected_nonzero_exit(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(
            main,
            [
                "centering-check",
                "--config", str(REPO_CONFIGS / "centering_planted_bias.yaml"),
                "--out", str(tmp_path / "out"),
            ],
        )
        assert res.exit_code == 3
        err = json.loads(res.stderr)
        assert err["error"]["category"] == "centering-violated"

    def test_malformed_config_names_missing_key(self, tmp_path):
        cfg = small_centering_cfg()
        del cfg["driver"]
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(cfg))
        runner = CliRunner()
        res = runner.invoke(
            main, ["centering-check", "--config", str(p), "--out", str(tmp_path / "o")]
        )
        assert res.exit_code == 2
        err = json.loads(res.stderr)
        assert err["error"]["category"] == "config-invalid"
        assert "driver" in err["error"]["message"]

    def test_sde_zero_noise_degenerate_endpoint(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(
            main,
            [
                "simulate-sde",
                "--config", str(REPO_CONFIGS / "sde_zero_noise.yaml"),
                "--out", str(tmp_path / "out"),
            ],
        )
        assert res.exit_code == 0, res.output
        rows = read_report(tmp_path / "out/report.csv")
        assert rows["mean[0]"] == pytest.approx(1.0 + 0.3, abs=1e-12)
        assert rows["mean[1]"] == pytest.approx(1.0 - 0.2, abs=1e-12)
        assert rows["var[0]"] == pytest.approx(0.0, abs=1e-20)

    def test_estimate_then_sde_file_flow(self, tmp_path):
        cfg = yaml.safe_load((REPO_CONFIGS / "estimate_ou_1d.yaml").read_text())
        cfg["estimation"]["n_samples"] = 200_000
        p = tmp_path / "est.yaml"
        p.write_text(yaml.safe_dump(cfg))
        runner = CliRunner()
        res = runner.invoke(
            main, ["estimate-coefficients", "--config", str(p), "--out", str(tmp_path / "est")]
        )
        assert res.exit_code == 0, res.output

        sde_cfg = yaml.safe_load((REPO_CONFIGS / "sde_from_file.yaml").read_text())
        sde_cfg["sde"]["source"]["path"] = str(tmp_path / "est/coefficients.txt")
        sde_cfg["sde"]["size"] = 2000
        p2 = tmp_path / "sde.yaml"
        p2.write_text(yaml.safe_dump(sde_cfg))
        res2 = runner.invoke(
            main, ["simulate-sde", "--config", str(p2), "--out", str(tmp_path / "sde")]
        )
        assert res2.exit_code == 0, res2.output
        rows = read_report(tmp_path / "sde/report.csv")
        # unit-OU-driven system: sigma^2 ~ 1.0, T = 1
        assert rows["var[0]"] == pytest.approx(1.0, rel=0.15)

    def test_multiscale_demo_runs(self, tmp_path):
        cfg = yaml.safe_load((REPO_CONFIGS / "multiscale_demo.yaml").read_text())
        cfg["ensemble"]["size"] = 32
        cfg["integration"]["t_final"] = 0.2
        cfg["driver"]["observable"]["calibration"] = {"n_samples": 20000, "burn_in": 500}
        p = tmp_path / "ms.yaml"
        p.write_text(yaml.safe_dump(cfg))
        runner = CliRunner()
        res = runner.invoke(
            main, ["simulate-multiscale", "--config", str(p), "--out", str(tmp_path / "o")]
        )
        assert res.exit_code == 0, res.output
        data = np.load(tmp_path / "o/trajectories.npz")
        assert data["wrapped"].shape[1] == 32
