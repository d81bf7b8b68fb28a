#!/usr/bin/env python3
"""
Benchmark runner

Command-line entry point for the Monte Carlo experiments:

    run              run the experiment and write mean_error.csv, cdf.csv, summary.json
    tune-ekf         grid search over the EKF (q, r), writes ekf_grid.csv
    oracle-tests     dense-oracle equivalence suite on random instances
    export-scenario  write one trial's ground truth and measurement stream to CSV

Exit codes: 0 success, 2 configuration error, 3 numerical error, 4 I/O error, 1 anything else.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog

from baselines import FilterDivergence, ObservabilityError
from diesel import NumericalFault, SynchronizationFault
from experiment_config import ConfigError, ExperimentConfig, load_config
from geom_core import ContractViolation, TopologyError
from harness import ReportError, emit_reports, run_experiment, steady_state_mean, trial_inputs, tune_ekf
from oracle import run_oracle_suite
from problem import ParameterError
from scenario import ScenarioConfigError, export_ground_truth, export_measurements

DEFAULT_CONFIG = Path("experiment_config.json")
LOG_FILE = "diesel_benchmark.log"

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO", log_file: Optional[str] = LOG_FILE):
    """Stdlib handlers for module loggers, structlog routed through them for trial events"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.processors.KeyValueRenderer(key_order=["event"], sort_keys=True),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (ConfigError, ScenarioConfigError, ParameterError, TopologyError)):
        return EXIT_CONFIG
    if isinstance(error, (NumericalFault, FilterDivergence, SynchronizationFault, ObservabilityError)):
        return EXIT_NUMERICAL
    if isinstance(error, (ReportError, OSError)):
        return EXIT_IO
    if isinstance(error, ContractViolation):
        return EXIT_CONFIG
    return EXIT_OTHER


def add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help=f"JSON experiment config (default: {DEFAULT_CONFIG} if present)")
    parser.add_argument("--trajectory", choices=["lap", "lawnmower", "helix"], default=None,
                        help="Trajectory shape")
    parser.add_argument("--methods", nargs="+", choices=["diesel", "ekf", "static"], default=None,
                        help="Methods to run")
    parser.add_argument("--trials", type=int, default=None, help="Number of Monte Carlo trials")
    parser.add_argument("--ticks", type=int, default=None, help="Trajectory duration in ticks")
    parser.add_argument("--window-len", type=int, default=None, help="Window length T0 (W = T0 + 1 samples)")
    parser.add_argument("--seed", type=int, default=None, help="Base seed; trial k uses seed + k")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes for trials")
    parser.add_argument("--output-dir", default=None, help="Directory for report files")
    parser.add_argument("--ekf-q", type=float, default=None, help="EKF process noise scale")
    parser.add_argument("--ekf-r", type=float, default=None, help="EKF range noise variance")
    parser.add_argument("--print-config", action="store_true",
                        help="Print the resolved configuration and exit")


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "trajectory": {"kind": args.trajectory} if args.trajectory else None,
        "methods": args.methods,
        "trials": args.trials,
        "duration_ticks": args.ticks,
        "window_len": args.window_len,
        "base_seed": args.seed,
        "workers": args.workers,
        "output_dir": args.output_dir,
        "ekf": {"q": args.ekf_q, "r": args.ekf_r},
    }


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    path = args.config
    if path is None and DEFAULT_CONFIG.exists():
        path = DEFAULT_CONFIG
    return load_config(path, overrides_from(args))


def print_config(config: ExperimentConfig):
    print(json.dumps(config.echo(), indent=2, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.print_config:
        print_config(config)
        return EXIT_OK

    print(f"🔄 Running {config.trials} trial(s) on the {config.trajectory.kind.value} trajectory...")
    series, results = run_experiment(config)
    paths = emit_reports(series, Path(config.output_dir), config.echo())

    print(f"\n✅ Experiment Complete")
    for name in series.methods:
        e = series.mean_error[name]
        ss = steady_state_mean(e) if e.size else float("nan")
        print(f"  {name:>7}: steady-state mean error {ss:.3f} m, divergences {series.divergences[name]}")
    diverged = [r for r in results if r.divergences]
    if diverged:
        print(f"\n❌ Divergences in {len(diverged)} trial(s):")
        for r in diverged[:3]:
            for method, reason in sorted(r.divergences.items()):
                print(f"  - trial {r.trial} {method}: {reason}")
    print(f"\n📁 Reports: {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_tune_ekf(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.print_config:
        print_config(config)
        return EXIT_OK

    points = len(config.ekf.q_grid) * len(config.ekf.r_grid)
    print(f"🔄 Tuning EKF over {points} (q, r) pairs x {config.trials} trial(s)...")
    grid, (q, r) = tune_ekf(config, Path(config.output_dir))
    print(f"\n✅ Tuning Complete")
    print(grid.to_string(index=False))
    print(f"\nBest: q={q:g}, r={r:g}")
    return EXIT_OK


def cmd_oracle_tests(args: argparse.Namespace) -> int:
    print(f"🔄 Running oracle checks on {args.instances} random instance(s)...")
    report = run_oracle_suite(args.instances, args.seed, args.dim)
    print(f"Round vs dense step, max abs diff: {max(report.round_max_abs_diff):.3e}")
    print(f"Stacked round vs dense step, max abs diff: {max(report.stacked_max_abs_diff):.3e}")
    print(f"Gradient vs finite differences, max rel error: {max(report.gradient_rel_error):.3e}")
    print(f"Range misfit vs stacked cost, max rel diff: {max(report.formulation_rel_diff):.3e}")
    undershoot = [s for s in report.spectral if not s.t0_bound_holds]
    print(f"Step bound >= lambda_max on {sum(s.bound_holds for s in report.spectral)}"
          f"/{len(report.spectral)} instances")
    if undershoot:
        print(f"Bound counted with W-1 samples undershoots lambda_max on {len(undershoot)} instance(s):")
        for s in undershoot[:5]:
            print(f"  - n={s.n} W={s.W}: lambda_max={s.lambda_max:.4f} > {s.t0_bound:.4f}")
    if report.passed():
        print("\n✅ Oracle checks passed")
        return EXIT_OK
    print("\n❌ Oracle checks failed")
    return EXIT_NUMERICAL


def cmd_export_scenario(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.print_config:
        print_config(config)
        return EXIT_OK
    inputs = trial_inputs(config, args.trial)
    out_dir = Path(config.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        truth_path = export_ground_truth(inputs.truth, out_dir / f"ground_truth_{args.trial}.csv")
        stream_path = export_measurements(inputs.stream, inputs.topology, out_dir / f"measurements_{args.trial}.csv")
    except OSError as e:
        raise ReportError(f"cannot export scenario ({e.strerror})", out_dir)
    print(f"✅ Exported {truth_path} and {stream_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Distributed self-localization benchmark")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a Monte Carlo experiment")
    add_config_arguments(run)
    run.set_defaults(handler=cmd_run)

    tune = sub.add_parser("tune-ekf", help="Grid search over the EKF (q, r)")
    add_config_arguments(tune)
    tune.set_defaults(handler=cmd_tune_ekf)

    oracle = sub.add_parser("oracle-tests", help="Dense-oracle equivalence suite")
    oracle.add_argument("--instances", type=int, default=20, help="Number of random instances")
    oracle.add_argument("--seed", type=int, default=0, help="Seed of the instance generator")
    oracle.add_argument("--dim", type=int, choices=[2, 3], default=2, help="Space dimension")
    oracle.set_defaults(handler=cmd_oracle_tests)

    export = sub.add_parser("export-scenario", help="Write one trial's truth and measurements to CSV")
    add_config_arguments(export)
    export.add_argument("--trial", type=int, default=0, help="Trial index")
    export.set_defaults(handler=cmd_export_scenario)
    return parser


def main(argv: Optional[List[str]] = None, log_file: Optional[str] = LOG_FILE) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, log_file)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("\n🛑 Stopping...")
        return EXIT_OTHER
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {type(e).__name__}: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
