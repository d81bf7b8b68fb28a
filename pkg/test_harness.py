"""
Tests for the Monte Carlo harness, configuration loading and the benchmark CLI
"""

import json

import numpy as np
import pandas as pd
import pytest

import harness
from baselines import FilterDivergence
from experiment_config import ConfigError, ExperimentConfig, Method, load_config
from geom_core import ContractViolation
from harness import (MetricSeries, ReportError, emit_reports, empirical_cdf, run_experiment, run_trial,
                     settling_tick, steady_state_mean, tune_ekf)
from run_benchmark import EXIT_CONFIG, EXIT_IO, EXIT_OK, main


def series_of(errors_by_method, normalized_by_method=None):
    methods = list(errors_by_method)
    ticks = len(next(iter(errors_by_method.values()))) if methods else 0
    normalized = normalized_by_method or {m: np.array([float(np.mean(e))]) for m, e in errors_by_method.items()}
    return MetricSeries(methods=methods, ticks=ticks,
                        mean_error={m: np.asarray(e, dtype=float) for m, e in errors_by_method.items()},
                        std_error={m: np.zeros(len(e)) for m, e in errors_by_method.items()},
                        normalized=normalized, divergences={m: 0 for m in methods})


def test_empirical_cdf_examples():
    assert empirical_cdf([3.0, 1.0, 2.0]) == [(1.0, pytest.approx(1 / 3)), (2.0, pytest.approx(2 / 3)), (3.0, 1.0)]
    assert empirical_cdf([0.7, 0.7]) == [(0.7, 1.0)]
    assert empirical_cdf([1.0, 1.0, 2.0]) == [(1.0, pytest.approx(2 / 3)), (2.0, 1.0)]
    with pytest.raises(ContractViolation):
        empirical_cdf([])


def test_steady_state_and_settling():
    errors = np.array([5.0, 4.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert steady_state_mean(errors) == 1.0
    assert settling_tick(errors) == 3
    assert settling_tick(np.ones(6)) == 0
    assert settling_tick(np.array([1.0, 1.0, 1.0, 10.0])) is None


def test_reports_without_methods_are_header_only(tmp_path):
    paths = emit_reports(series_of({}), tmp_path)
    assert paths["mean_error"].read_text().strip() == "tick,method,mean,std"
    assert paths["cdf"].read_text().strip() == "method,error,fraction"
    summary = json.loads(paths["summary"].read_text())
    assert summary["methods"] == {}


def test_reports_for_one_method(tmp_path):
    errors = [3.0, 2.0, 1.0]
    paths = emit_reports(series_of({"diesel": errors}, {"diesel": np.array([1.5, 2.0, 1.5])}), tmp_path,
                         {"trials": 3})
    mean = pd.read_csv(paths["mean_error"])
    assert len(mean) == 3
    assert list(mean["tick"]) == [0, 1, 2]
    assert set(mean["method"]) == {"diesel"}

    cdf = pd.read_csv(paths["cdf"])
    assert list(cdf["error"]) == [1.5, 2.0]
    assert list(cdf["fraction"]) == pytest.approx([2 / 3, 1.0])

    summary = json.loads(paths["summary"].read_text())
    assert summary["config"] == {"trials": 3}
    assert summary["methods"]["diesel"]["steady_state_mean"] == pytest.approx(1.5)
    assert summary["methods"]["diesel"]["trials_used"] == 3


def test_nan_series_becomes_null(tmp_path):
    paths = emit_reports(series_of({"ekf": [np.nan, np.nan]}, {"ekf": np.array([])}), tmp_path)
    summary = json.loads(paths["summary"].read_text())
    assert summary["methods"]["ekf"]["steady_state_mean"] is None
    assert summary["methods"]["ekf"]["normalized_error_mean"] is None


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(ReportError) as err:
        emit_reports(series_of({"diesel": [1.0]}), blocker / "reports")
    assert isinstance(err.value, OSError)


def test_experiment_summary_matches_mean_error(small_config, tmp_path):
    series, results = run_experiment(small_config)
    assert len(results) == 2
    assert series.methods == ["diesel", "ekf", "static"]
    paths = emit_reports(series, tmp_path / "out", small_config.echo())

    mean = pd.read_csv(paths["mean_error"])
    summary = json.loads(paths["summary"].read_text())
    assert len(mean) == 3 * small_config.duration_ticks
    for name in series.methods:
        e = mean[mean["method"] == name].sort_values("tick")["mean"].to_numpy()
        assert summary["methods"][name]["steady_state_mean"] == pytest.approx(e[len(e) // 2:].mean())
    assert summary["config"]["trials"] == 2


def test_noiseless_trial_is_exact():
    config = ExperimentConfig.model_validate({
        "trials": 1,
        "duration_ticks": 30,
        "methods": ["diesel", "static"],
        "noise": {"sigma_range": 0.0, "sigma_vel": 0.0, "sigma_init": 0.0},
        "solver": {"max_iters": 5000, "rel_tol": 1e-12},
    })
    result = run_trial(config, 0)
    assert not result.divergences
    assert result.errors["diesel"].max() <= 1e-6
    assert result.errors["static"].max() <= 1e-6


def test_method_fault_is_recorded_as_divergence(small_config, monkeypatch):
    def diverge(*args, **kwargs):
        raise FilterDivergence("covariance blew up")

    monkeypatch.setattr(harness, "run_ekf", diverge)
    result = run_trial(small_config, 0)
    assert "ekf" in result.divergences
    assert "ekf" not in result.errors
    assert set(result.errors) == {"diesel", "static"}

    series = harness.aggregate([result], ["diesel", "ekf", "static"], small_config.duration_ticks)
    assert series.divergences["ekf"] == 1
    assert np.all(np.isnan(series.mean_error["ekf"]))


def test_experiment_is_reproducible(small_config, tmp_path):
    first = emit_reports(run_experiment(small_config)[0], tmp_path / "a", small_config.echo())
    second = emit_reports(run_experiment(small_config)[0], tmp_path / "b", small_config.echo())
    for key in ("mean_error", "cdf", "summary"):
        assert first[key].read_bytes() == second[key].read_bytes()

    pooled = small_config.model_copy(update={"workers": 2})
    third = emit_reports(run_experiment(pooled)[0], tmp_path / "c", pooled.echo())
    for key in ("mean_error", "cdf"):
        assert first[key].read_bytes() == third[key].read_bytes()


def test_tune_ekf_writes_grid(small_config, tmp_path):
    grid, (q, r) = tune_ekf(small_config, tmp_path)
    assert len(grid) == 2
    assert list(grid.columns) == ["q", "r", "mean_error", "divergences"]
    assert (q, r) in set(zip(grid["q"], grid["r"]))
    assert grid.loc[grid["mean_error"].idxmin(), "q"] == q
    assert pd.read_csv(tmp_path / "ekf_grid.csv").shape == (2, 4)


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def test_load_config_layers(tmp_path, monkeypatch):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    path = write_json(tmp_path / "exp.json", {"trials": 7, "trajectory": {"kind": "helix"}, "ekf": {"q": 0.5}})

    config = load_config(path, {"trials": 3, "ekf": {"q": None, "r": 1.0}}, env_file=None)
    assert config.trials == 3
    assert config.trajectory.kind.value == "helix"
    assert config.dim == 3
    assert config.ekf.q == 0.5
    assert config.ekf.r == 1.0
    assert config.output_dir == "results"
    assert config.initial_variance == 4.0

    monkeypatch.setenv("DIESEL_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert load_config(path, env_file=None).output_dir == str(tmp_path / "env_out")
    assert load_config(path, {"output_dir": "cli_out"}, env_file=None).output_dir == "cli_out"


def test_load_config_errors(tmp_path, monkeypatch):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", env_file=None)

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(broken, env_file=None)

    with pytest.raises(ConfigError):
        load_config(write_json(tmp_path / "list.json", [1, 2]), env_file=None)
    with pytest.raises(ConfigError):
        load_config(overrides={"window_len": 0}, env_file=None)
    with pytest.raises(ConfigError):
        load_config(overrides={"methods": ["ekf", "ekf"]}, env_file=None)
    with pytest.raises(ConfigError):
        load_config(overrides={"trials": 0}, env_file=None)

    static_only = load_config(overrides={"window_len": 0, "methods": ["static", "ekf"]}, env_file=None)
    assert static_only.methods == [Method.STATIC, Method.EKF]


def cli(*args):
    return main(["--log-level", "ERROR", *args], log_file=None)


def test_cli_print_config(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    path = write_json(tmp_path / "exp.json", {"trials": 4})
    assert cli("run", "--config", str(path), "--trajectory", "lawnmower", "--print-config") == EXIT_OK
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["trials"] == 4
    assert echoed["trajectory"]["kind"] == "lawnmower"


def test_cli_run_writes_reports(tmp_path, monkeypatch):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    path = write_json(tmp_path / "exp.json", {"solver": {"max_iters": 50}})
    out = tmp_path / "out"
    code = cli("run", "--config", str(path), "--trials", "1", "--ticks", "20", "--output-dir", str(out))
    assert code == EXIT_OK
    assert {p.name for p in out.iterdir()} >= {"mean_error.csv", "cdf.csv", "summary.json"}


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert cli("run", "--config", str(broken)) == EXIT_CONFIG

    path = write_json(tmp_path / "exp.json", {"methods": ["ekf"]})
    assert cli("run", "--config", str(path), "--trials", "0") == EXIT_CONFIG

    blocker = tmp_path / "blocker"
    blocker.write_text("")
    code = cli("run", "--config", str(path), "--trials", "1", "--ticks", "5", "--output-dir", str(blocker / "x"))
    assert code == EXIT_IO


def test_cli_oracle_and_export(tmp_path, monkeypatch):
    monkeypatch.delenv("DIESEL_OUTPUT_DIR", raising=False)
    assert cli("oracle-tests", "--instances", "3", "--seed", "5") == EXIT_OK

    path = write_json(tmp_path / "exp.json", {"duration_ticks": 10})
    out = tmp_path / "scenario"
    assert cli("export-scenario", "--config", str(path), "--trial", "2", "--output-dir", str(out)) == EXIT_OK
    assert len(pd.read_csv(out / "ground_truth_2.csv")) == 10 * 4
    assert (out / "measurements_2.csv").exists()
