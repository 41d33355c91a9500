"""Command-line experiments: grid-search oracle, CBO tuning benchmarks, interference-model fitting and scheduling replays"""

import argparse
import json
import logging
import math
import os
import sys
from collections.abc import Callable, Sequence
from dataclasses import replace
from pathlib import Path, PurePath

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from src.cbo_tuner import (
    MIN_EVALS,
    CboSettings,
    InvalidTuningProblemError,
    TuningProblem,
    noiseless_oracle,
    random_search,
    relaxed_slo,
    rs_expected_trials,
    summarize,
    tight_slo,
    tune,
)
from src.device_sim import (
    PROFILE_DIR,
    DeviceProfile,
    FinetuneSpec,
    HardwareConfig,
    InfeasibleSloError,
    InvalidConfigurationError,
    ProfileFormatError,
    default_config,
    grid_search_oracle,
    load_profile,
    resolve_profile_path,
    validate_config,
    write_pareto_csv,
)
from src.gp_regression import IllConditionedError, KernelKind
from src.perf_model import (
    InvalidDataError,
    PerfModelCoeffs,
    collect_training_samples,
    design_matrix,
    finetune_spec_for,
    kkt_satisfied,
    load_coeffs,
    load_layers,
    median_relative_error,
    nnls,
    nnls_fit,
    save_coeffs,
)
from src.sched_sim import PolicyKind, SchedulerPolicy, energy_comparison, simulate, write_report
from src.streams import derive_stream
from src.workload_gen import TraceParseError, burstiest_segment, load_trace, poisson_stream, uniform_stream

logging.basicConfig(level=logging.INFO, format="%(asctime)s : %(levelname)s : %(message)s")

EXIT_OK: int = 0
EXIT_INVALID_ARGS: int = 2
EXIT_INFEASIBLE: int = 3
EXIT_DATA_ERROR: int = 4
DEFAULT_TRACE = Path(PurePath(__file__).parent, "traces", "bursty-sample.txt")
FIT_SAMPLES: int = 30
SIMULATE_WORKLOAD: str = "efficientnet-b7-fp16"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="UTF-8")


def _output_dir(args: argparse.Namespace) -> Path:
    directory = Path(args.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _profile(args: argparse.Namespace, workload: str | None = None) -> DeviceProfile:
    return load_profile(resolve_profile_path(args.profile, Path(args.profile_dir)), args.workload or workload)


def parse_config(text: str) -> HardwareConfig:
    """Read 'cpu,gpu_min,gpu_max,mem,batch' into a HardwareConfig"""
    parts = text.split(",")
    if len(parts) != 5:
        raise ValueError(f"expected cpu,gpu_min,gpu_max,mem,batch but got {text!r}")
    cpu, gpu_min, gpu_max, mem = (float(p) for p in parts[:4])
    return HardwareConfig(cpu, gpu_min, gpu_max, mem, int(parts[4]))


def parse_slo_schedule(text: str) -> list[tuple[float, float]]:
    """Read 'start_s:slo_ms,start_s:slo_ms,...'"""
    schedule = []
    for item in text.split(","):
        start, _, slo = item.partition(":")
        if not slo:
            raise ValueError(f"SLO schedule entries look like start_s:slo_ms, got {item!r}")
        schedule.append((float(start), float(slo)))
    return schedule


def cmd_grid_search(args: argparse.Namespace) -> int:
    profile = _profile(args)
    if args.replicas < 1:
        raise ValueError("--replicas must be at least 1")
    result = grid_search_oracle(profile, args.slo, args.replicas, derive_stream(args.seed, "grid-search"))
    directory = _output_dir(args)
    write_pareto_csv(result.pareto_set, Path(directory, "pareto.csv"))
    _write_json(Path(directory, "oracle.json"), {"profile": profile.name, "workload": profile.workload.name, "slo_ms": args.slo, **result.to_dict()})
    print(f"{result.n_evaluations} evaluations, best {result.best_config} at {result.best_energy_mj:.4f} mJ/query")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace) -> int:
    if args.near is not None or args.grid is not None:
        if args.near is None or args.grid is None:
            raise ValueError("--near and --grid go together")
        return _print_expected_trials(args.near, args.grid)
    if args.seeds < 1:
        raise ValueError("--seeds must be at least 1")

    profile = _profile(args)
    batch_enabled = args.benchmark == "relaxed"
    slo = args.slo if args.slo is not None else (relaxed_slo(profile) if batch_enabled else tight_slo(profile))
    problem = TuningProblem(profile, slo, args.max_evals, batch_dimension_enabled=batch_enabled)
    kernel = KernelKind(args.kernel) if args.kernel else None
    oracle = noiseless_oracle(problem)
    if oracle.best_config is None:
        raise InfeasibleSloError(slo, oracle.min_latency_ms)

    methods: dict[str, Callable] = {"cbo": tune, "rs": random_search}
    selected = list(methods) if args.method == "both" else [args.method]
    summary: dict = {
        "profile": profile.name,
        "workload": profile.workload.name,
        "benchmark": args.benchmark,
        "slo_ms": slo,
        "max_evals": args.max_evals,
        "oracle_energy_mj": oracle.best_energy_mj,
        "oracle_config": oracle.best_config.as_row(),
        "n_near_optimal": oracle.n_near_optimal,
        "n_candidates": oracle.n_candidates,
    }
    mean, stddev = rs_expected_trials(oracle.n_near_optimal, oracle.n_candidates)
    summary["rs_expected_trials"] = {"mean": mean, "stddev": stddev}

    # nothing is written until every run has finished
    traces: dict[str, pd.DataFrame] = {}
    for method in selected:
        reports = []
        for seed in range(args.seed, args.seed + args.seeds):
            report = methods[method](problem, CboSettings(rng_seed=seed, kernel=kernel), oracle)
            traces[f"trace_{method}_{seed}.csv"] = report.trace_frame()
            reports.append(report)
        summary[method] = summarize(reports, args.max_evals)
        print(f"{method}: median evaluations to near-optimal {summary[method]['median_evals_to_near_optimal']}")
    directory = _output_dir(args)
    for name, frame in traces.items():
        frame.to_csv(Path(directory, name), index=False)
    _write_json(Path(directory, "summary.json"), summary)
    return EXIT_OK


def cmd_fit_perf(args: argparse.Namespace) -> int:
    profile = _profile(args)
    layers = load_layers(Path(args.layers)) if args.layers else None
    rows, latencies = collect_training_samples(profile, args.samples, derive_stream(args.seed, "fit-perf"), layers=layers)
    coeffs = nnls_fit(rows, latencies)
    a = design_matrix(rows)
    _, residual = nnls(a, latencies)
    payload: dict = {"profile": profile.name, "workload": profile.workload.name, "samples": args.samples, "theta": list(coeffs.theta), "residual_norm": residual}
    if args.holdout:
        held_rows, held_latencies = collect_training_samples(profile, args.holdout, derive_stream(args.seed, "fit-perf-holdout"), start=args.samples, layers=layers)
        payload["holdout"] = args.holdout
        payload["holdout_median_relative_error"] = median_relative_error(coeffs, held_rows, held_latencies)
    if args.check_kkt:
        payload["kkt_satisfied"] = kkt_satisfied(a, np.asarray(latencies), np.asarray(coeffs.theta))
        print(f"KKT check: {'pass' if payload['kkt_satisfied'] else 'FAIL'}")

    directory = _output_dir(args)
    save_coeffs(coeffs, Path(directory, "coeffs.json"))
    _write_json(Path(directory, "fit_report.json"), payload)
    print(f"theta = {list(coeffs.theta)}")
    return EXIT_OK


def _finetune(args: argparse.Namespace, profile: DeviceProfile) -> FinetuneSpec | None:
    if args.policy == "baseline":
        return None
    if args.ft_batch is None and profile.reference_finetune is not None:
        return replace(profile.reference_finetune, n_iterations=args.ft_iterations)
    return finetune_spec_for(profile, args.ft_batch or 64, args.ft_output_dim, args.ft_iterations)


def _coefficients(args: argparse.Namespace, profile: DeviceProfile, config: HardwareConfig) -> PerfModelCoeffs:
    if args.coeffs:
        return load_coeffs(Path(args.coeffs))
    rows, latencies = collect_training_samples(profile, FIT_SAMPLES, derive_stream(args.seed, "fit-perf"), config=config.with_batch(profile.grid.batch_sizes[0]))
    return nnls_fit(rows, latencies)


def cmd_simulate(args: argparse.Namespace) -> int:
    profile = _profile(args, SIMULATE_WORKLOAD)
    config = parse_config(args.config) if args.config else default_config(profile, args.batch)
    validate_config(profile, config)
    schedule = parse_slo_schedule(args.slo_schedule) if args.slo_schedule else None
    slo = schedule[0][1] if schedule else args.slo

    if args.arrivals == "uniform":
        arrivals = uniform_stream(args.rate, args.duration)
    elif args.arrivals == "poisson":
        arrivals = poisson_stream(args.rate, args.duration, derive_stream(args.seed, "arrivals"))
    else:
        arrivals = burstiest_segment(load_trace(Path(args.trace), args.rate), args.window)

    ft = _finetune(args, profile)
    policy = SchedulerPolicy.greedy()
    if args.policy == PolicyKind.ADAPTIVE.value:
        policy = SchedulerPolicy.adaptive(_coefficients(args, profile, config))

    report = simulate(profile, config, arrivals, ft, policy, slo, args.duration, derive_stream(args.seed, "simulate"), slo_schedule=schedule)
    energy: dict | None = None
    if args.energy_compare:
        oracle = noiseless_oracle(TuningProblem(profile, slo, max_evals=MIN_EVALS))
        tuned = oracle.best_config
        if tuned is None:
            raise InfeasibleSloError(slo, oracle.min_latency_ms)
        stock = default_config(profile, tuned.batch_size)
        tuned_j, stock_j, savings = energy_comparison(profile, arrivals, ft, tuned, stock, policy, slo, args.duration, args.seed)
        energy = {"tuned_config": tuned.as_row(), "default_config": stock.as_row(), "energy_tuned_j": tuned_j, "energy_default_j": stock_j, "savings_fraction": savings}

    directory = _output_dir(args)
    write_report(report, directory, stem=args.policy)
    if energy is not None:
        _write_json(Path(directory, "energy.json"), energy)
    print(f"{args.policy}: violation rate {report.violation_rate:.4f}, {report.ft_iterations_completed}/{report.ft_iterations_total} fine-tuning iterations")
    return EXIT_OK


def _print_expected_trials(near: int, grid: int) -> int:
    mean, stddev = rs_expected_trials(near, grid)
    print(f"({mean:.2f}, {stddev:.2f})")
    return EXIT_OK


def cmd_expected_trials(args: argparse.Namespace) -> int:
    return _print_expected_trials(args.near, args.grid)


def build_parser() -> argparse.ArgumentParser:
    seed = int(os.environ.get("THROTTLE_SEED", "0"))
    output_dir = os.environ.get("THROTTLE_OUTPUT_DIR", "results")
    profile_dir = os.environ.get("THROTTLE_PROFILE_DIR", str(PROFILE_DIR))

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile-dir", default=profile_dir, help="directory searched for profile names")
    common.add_argument("--seed", type=int, default=seed)
    common.add_argument("--output-dir", default=output_dir)
    common.add_argument("--workload", default=None, help="workload from the profile catalog")

    parser = argparse.ArgumentParser(prog="python -m src.main", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid-search", parents=[common], help="measure every grid configuration")
    grid.add_argument("--profile", default="synthetic-tx2")
    grid.add_argument("--slo", type=float, default=math.inf)
    grid.add_argument("--replicas", type=int, default=1)
    grid.set_defaults(handler=cmd_grid_search)

    tuning = sub.add_parser("tune", parents=[common], help="compare CBO and random search over seeds")
    tuning.add_argument("--profile", default="synthetic-orin")
    tuning.add_argument("--benchmark", choices=["tight", "relaxed"], default="relaxed")
    tuning.add_argument("--slo", type=float, default=None)
    tuning.add_argument("--seeds", type=int, default=20)
    tuning.add_argument("--max-evals", type=int, default=25)
    tuning.add_argument("--method", choices=["cbo", "rs", "both"], default="both")
    tuning.add_argument("--kernel", choices=[k.value for k in KernelKind], default=None)
    tuning.add_argument("--near", type=int, default=None)
    tuning.add_argument("--grid", type=int, default=None)
    tuning.set_defaults(handler=cmd_tune)

    fitting = sub.add_parser("fit-perf", parents=[common], help="fit the interference model by NNLS")
    fitting.add_argument("--profile", default="synthetic-orin")
    fitting.add_argument("--samples", type=int, default=FIT_SAMPLES)
    fitting.add_argument("--holdout", type=int, default=20)
    fitting.add_argument("--check-kkt", action="store_true")
    fitting.add_argument("--layers", default=None, help="CSV of convolution layers n,c,h,w,k,p,q,r,s")
    fitting.set_defaults(handler=cmd_fit_perf)

    sim = sub.add_parser("simulate", parents=[common], help="replay arrivals through the scheduler")
    sim.add_argument("--profile", default="synthetic-orin")
    sim.add_argument("--policy", choices=["greedy", "adaptive", "baseline"], default="adaptive")
    sim.add_argument("--arrivals", choices=["uniform", "poisson", "trace"], default="poisson")
    sim.add_argument("--rate", type=float, default=8.0)
    sim.add_argument("--duration", type=float, default=30.0)
    sim.add_argument("--trace", default=str(DEFAULT_TRACE))
    sim.add_argument("--window", type=float, default=60.0)
    sim.add_argument("--slo", type=float, default=700.0)
    sim.add_argument("--slo-schedule", default=None, help="start_s:slo_ms pairs, e.g. 0:250,30:700")
    sim.add_argument("--config", default=None, help="cpu,gpu_min,gpu_max,mem,batch")
    sim.add_argument("--batch", type=int, default=8)
    sim.add_argument("--ft-iterations", type=int, default=10)
    sim.add_argument("--ft-batch", type=int, default=None)
    sim.add_argument("--ft-output-dim", type=int, default=1000)
    sim.add_argument("--coeffs", default=None)
    sim.add_argument("--energy-compare", action="store_true")
    sim.set_defaults(handler=cmd_simulate)

    trials = sub.add_parser("expected-trials", help="expected random-search trials to a near-optimal configuration")
    trials.add_argument("--near", type=int, required=True)
    trials.add_argument("--grid", type=int, required=True)
    trials.set_defaults(handler=cmd_expected_trials)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run one subcommand and map failures to exit codes"""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except InfeasibleSloError as e:
        logging.error("%s", e)
        print(f"infeasible SLO: minimum achievable latency is {e.min_latency_ms:.3f} ms", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ProfileFormatError, TraceParseError, InvalidDataError, IllConditionedError, FileNotFoundError) as e:
        logging.error("%s", e)
        return EXIT_DATA_ERROR
    except (ValueError, InvalidConfigurationError, InvalidTuningProblemError) as e:
        logging.error("%s", e)
        return EXIT_INVALID_ARGS


def main() -> None:
    load_dotenv(Path(PurePath(__file__).parents[1], ".env"))
    logging.getLogger().setLevel(os.environ.get("THROTTLE_LOG_LEVEL", "INFO").upper())
    sys.exit(run())


if __name__ == "__main__":
    main()
