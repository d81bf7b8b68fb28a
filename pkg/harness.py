"""
Monte Carlo Harness

Runs every enabled method on the same measurement stream and the same
perturbed initialization for each trial, aggregates per-tick mean
position errors, builds empirical CDFs of the per-trial normalized
error and writes the report files.

Error metric: e(t) = (1/n) sum_i ||x_hat_i(t) - x_i(t)|| over the
localized vehicles; the per-trial normalized error is the mean of e(t)
over all ticks.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from baselines import run_ekf, static_track
from diesel import TrackingParams, track
from experiment_config import ExperimentConfig, Method
from geom_core import ContractViolation, DieselError, NetworkTopology
from problem import MeasurementSample
from scenario import (GroundTruth, formation_topology, generate_trajectory, initial_guess,
                      synthesize_measurements)

logger = logging.getLogger(__name__)
events = structlog.get_logger("harness")

SETTLING_FACTOR = 1.5
MEAN_ERROR_COLUMNS = ["tick", "method", "mean", "std"]
CDF_COLUMNS = ["method", "error", "fraction"]
EKF_GRID_COLUMNS = ["q", "r", "mean_error", "divergences"]


class ReportError(DieselError, OSError):
    """Report files could not be written"""

    def __init__(self, message: str, path: Path):
        super().__init__(f"{message}: {path}")
        self.path = Path(path)


@dataclass
class TrialInputs:
    """Everything one trial feeds to the methods"""
    truth: GroundTruth
    topology: NetworkTopology
    stream: List[MeasurementSample]
    init: np.ndarray


@dataclass
class TrialResult:
    """Per-tick errors of each method in one trial"""
    trial: int
    seed: int
    errors: Dict[str, np.ndarray] = field(default_factory=dict)       # method -> (T,)
    normalized: Dict[str, float] = field(default_factory=dict)
    iterations: Dict[str, float] = field(default_factory=dict)        # mean solver iterations per tick
    divergences: Dict[str, str] = field(default_factory=dict)         # method -> reason


@dataclass
class MetricSeries:
    """Trial-averaged errors per method"""
    methods: List[str]
    ticks: int
    mean_error: Dict[str, np.ndarray]
    std_error: Dict[str, np.ndarray]
    normalized: Dict[str, np.ndarray]     # per-trial normalized errors of non-diverged trials
    divergences: Dict[str, int]


def trial_seed(config: ExperimentConfig, trial: int) -> int:
    return config.base_seed + trial


def trial_inputs(config: ExperimentConfig, trial: int) -> TrialInputs:
    """Ground truth, measurement stream and initialization for one trial"""
    seed = trial_seed(config, trial)
    d = config.dim
    truth = generate_trajectory(config.trajectory, config.formation, config.duration_ticks, config.dt,
                                current=config.noise.current_vec(d), d=d)
    topology = formation_topology(config.formation)
    stream = synthesize_measurements(truth, topology, config.noise, seed)
    init = initial_guess(truth, topology, config.noise, seed)
    return TrialInputs(truth=truth, topology=topology, stream=stream, init=init)


def position_errors(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """e(t): Euclidean error averaged over vehicles, shape (T,)"""
    return np.linalg.norm(np.asarray(estimates) - np.asarray(truth), axis=-1).mean(axis=-1)


def run_method(method: Method, config: ExperimentConfig, inputs: TrialInputs,
               q: Optional[float] = None, r: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    Estimates of one method over the trial stream

    Returns:
        (estimates (T, n, d), mean solver iterations per tick; 0 for the EKF)
    """
    topo, stream, init, dt = inputs.topology, inputs.stream, inputs.init, config.dt
    if method == Method.DIESEL:
        params = TrackingParams(window_len=config.window_len, max_iters=config.solver.max_iters,
                                rel_tol=config.solver.rel_tol, warm_start=config.solver.warm_start)
        result = track(stream, topo, params, init, dt)
        return result.estimates, float(result.iterations.mean())
    if method == Method.STATIC:
        result = static_track(stream, topo, init, dt, config.solver.max_iters, config.solver.rel_tol)
        return result.estimates, float(result.iterations.mean())
    if method == Method.EKF:
        q = config.ekf.q if q is None else q
        r = config.ekf.r if r is None else r
        return run_ekf(stream, topo, init, dt, q, r, config.initial_variance), 0.0
    raise ContractViolation(f"unknown method {method}")


def run_trial(config: ExperimentConfig, trial: int) -> TrialResult:
    """
    One Monte Carlo trial of every enabled method

    Faults inside a method are recorded as a divergence for that method;
    the other methods still run.
    """
    inputs = trial_inputs(config, trial)
    truth = inputs.truth.positions_of(inputs.topology.vehicles)
    result = TrialResult(trial=trial, seed=trial_seed(config, trial))

    for method in config.methods:
        name = method.value
        try:
            estimates, iterations = run_method(method, config, inputs)
        except DieselError as e:
            logger.error(f"Trial {trial}: {name} failed: {e}")
            result.divergences[name] = f"{type(e).__name__}: {e}"
            continue
        if not np.all(np.isfinite(estimates)):
            logger.error(f"Trial {trial}: {name} produced non-finite estimates")
            result.divergences[name] = "non-finite estimate"
            continue
        errors = position_errors(estimates, truth)
        result.errors[name] = errors
        result.normalized[name] = float(errors.mean())
        result.iterations[name] = iterations

    events.info("trial_finished", trial=trial, seed=result.seed,
                normalized={k: round(v, 6) for k, v in result.normalized.items()},
                diverged=sorted(result.divergences))
    return result


def _run_trial_args(args: Tuple[ExperimentConfig, int]) -> TrialResult:
    return run_trial(*args)


def aggregate(results: Sequence[TrialResult], methods: Sequence[str], ticks: int) -> MetricSeries:
    """Average per-tick errors over the trials in which each method did not diverge"""
    ordered = sorted(results, key=lambda r: r.trial)
    mean_error, std_error, normalized, divergences = {}, {}, {}, {}
    for name in methods:
        kept = [r.errors[name] for r in ordered if name in r.errors]
        divergences[name] = sum(1 for r in ordered if name in r.divergences)
        if kept:
            stacked = np.vstack(kept)
            mean_error[name] = stacked.mean(axis=0)
            std_error[name] = stacked.std(axis=0)
        else:
            mean_error[name] = np.full(ticks, np.nan)
            std_error[name] = np.full(ticks, np.nan)
        normalized[name] = np.array([r.normalized[name] for r in ordered if name in r.normalized])
        if divergences[name]:
            logger.warning(f"{name}: {divergences[name]} of {len(ordered)} trials excluded as divergent")
    return MetricSeries(methods=list(methods), ticks=ticks, mean_error=mean_error, std_error=std_error,
                        normalized=normalized, divergences=divergences)


def run_experiment(config: ExperimentConfig) -> Tuple[MetricSeries, List[TrialResult]]:
    """
    Run all trials of an experiment

    Trials run in a process pool when config.workers > 1; results are
    keyed by trial index so the aggregate does not depend on completion order.
    """
    jobs = [(config, trial) for trial in range(config.trials)]
    logger.info(f"Running {config.trials} trials of {config.trajectory.kind.value} "
                f"with methods {[m.value for m in config.methods]} on {config.workers} worker(s)")
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_trial_args, jobs))
    else:
        results = [_run_trial_args(job) for job in jobs]
    series = aggregate(results, [m.value for m in config.methods], config.duration_ticks)
    return series, results


def empirical_cdf(samples: Sequence[float]) -> List[Tuple[float, float]]:
    """
    Right-continuous empirical CDF

    Args:
        samples: Per-trial normalized errors

    Returns:
        (value, fraction of samples <= value) at each distinct sorted value
    """
    values = np.asarray(samples, dtype=float).ravel()
    if values.size == 0:
        raise ContractViolation("empirical CDF of an empty sample set")
    unique, counts = np.unique(values, return_counts=True)
    fractions = np.cumsum(counts) / values.size
    return [(float(v), float(f)) for v, f in zip(unique, fractions)]


def steady_state_mean(errors: np.ndarray) -> float:
    """Mean of e(t) over the last half of the ticks (from tick T // 2)"""
    errors = np.asarray(errors, dtype=float)
    return float(errors[len(errors) // 2:].mean())


def settling_tick(errors: np.ndarray, factor: float = SETTLING_FACTOR) -> Optional[int]:
    """First tick after which e(t) stays within factor x its steady-state mean"""
    errors = np.asarray(errors, dtype=float)
    bound = factor * steady_state_mean(errors)
    above = np.flatnonzero(~(errors <= bound))
    if above.size == 0:
        return 0
    tick = int(above[-1]) + 1
    return tick if tick < len(errors) else None


def _json_number(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def summarize(series: MetricSeries, config_echo: Optional[dict] = None) -> dict:
    """Contents of summary.json"""
    methods = {}
    for name in series.methods:
        e = series.mean_error[name]
        finite = e.size > 0 and np.all(np.isfinite(e))
        methods[name] = {
            "steady_state_mean": _json_number(steady_state_mean(e)) if finite else None,
            "settling_tick": settling_tick(e) if finite else None,
            "normalized_error_mean": _json_number(series.normalized[name].mean())
            if series.normalized[name].size else None,
            "trials_used": int(series.normalized[name].size),
            "divergences": int(series.divergences[name]),
        }
    return {
        "config": config_echo or {},
        "error_metric": "per-vehicle Euclidean position error, averaged over vehicles then trials",
        "steady_state_window": "ticks T//2 .. T-1",
        "settling_factor": SETTLING_FACTOR,
        "ticks": series.ticks,
        "methods": methods,
    }


def emit_reports(series: MetricSeries, out_dir: Path, config_echo: Optional[dict] = None) -> Dict[str, Path]:
    """
    Write mean_error.csv, cdf.csv and summary.json

    Schemas:
        mean_error.csv  tick, method, mean, std   (one row per method and tick)
        cdf.csv         method, error, fraction   (one row per CDF step)
        summary.json    config echo, steady-state means, settling ticks, divergence counts
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create report directory ({e.strerror})", out_dir)

    mean_rows = []
    cdf_rows = []
    for name in series.methods:
        for t, (mean, std) in enumerate(zip(series.mean_error[name], series.std_error[name])):
            mean_rows.append((t, name, float(mean), float(std)))
        if series.normalized[name].size:
            cdf_rows.extend((name, value, fraction) for value, fraction in empirical_cdf(series.normalized[name]))

    paths = {
        "mean_error": out_dir / "mean_error.csv",
        "cdf": out_dir / "cdf.csv",
        "summary": out_dir / "summary.json",
    }
    try:
        pd.DataFrame(mean_rows, columns=MEAN_ERROR_COLUMNS).to_csv(paths["mean_error"], index=False)
        pd.DataFrame(cdf_rows, columns=CDF_COLUMNS).to_csv(paths["cdf"], index=False)
        with open(paths["summary"], "w") as f:
            json.dump(summarize(series, config_echo), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise ReportError(f"cannot write reports ({e.strerror})", Path(e.filename or out_dir))

    logger.info(f"Reports written to {out_dir}")
    return paths


def _ekf_grid_point(args: Tuple[ExperimentConfig, float, float]) -> Tuple[float, float, float, int]:
    config, q, r = args
    errors, divergences = [], 0
    for trial in range(config.trials):
        inputs = trial_inputs(config, trial)
        truth = inputs.truth.positions_of(inputs.topology.vehicles)
        try:
            estimates, _ = run_method(Method.EKF, config, inputs, q=q, r=r)
        except DieselError as e:
            logger.error(f"EKF q={q} r={r} trial {trial} diverged: {e}")
            divergences += 1
            continue
        if not np.all(np.isfinite(estimates)):
            divergences += 1
            continue
        errors.append(float(position_errors(estimates, truth).mean()))
    mean = float(np.mean(errors)) if errors else float("nan")
    events.info("ekf_grid_point", q=q, r=r, mean_error=round(mean, 6), divergences=divergences)
    return q, r, mean, divergences


def tune_ekf(config: ExperimentConfig, out_dir: Optional[Path] = None) -> Tuple[pd.DataFrame, Tuple[float, float]]:
    """
    Grid search over the EKF (q, r) on the experiment's trials

    Returns:
        The grid as a DataFrame (q, r, mean_error, divergences) and the best (q, r);
        the grid is written to ekf_grid.csv when out_dir is given
    """
    jobs = [(config, q, r) for q in config.ekf.q_grid for r in config.ekf.r_grid]
    if not jobs:
        raise ContractViolation("EKF tuning grid is empty")
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_ekf_grid_point, jobs))
    else:
        rows = [_ekf_grid_point(job) for job in jobs]
    grid = pd.DataFrame(rows, columns=EKF_GRID_COLUMNS)

    usable = grid[np.isfinite(grid["mean_error"])]
    if usable.empty:
        raise DieselError("every EKF grid point diverged")
    best = usable.loc[usable["mean_error"].idxmin()]
    best_pair = (float(best["q"]), float(best["r"]))

    if out_dir is not None:
        out_dir = Path(out_dir)
        path = out_dir / "ekf_grid.csv"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            grid.to_csv(path, index=False)
        except OSError as e:
            raise ReportError(f"cannot write EKF grid ({e.strerror})", path)
        logger.info(f"EKF grid written to {path}")
    return grid, best_pair
