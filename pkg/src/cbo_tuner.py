"""Energy-minimal hardware configuration under a latency SLO.

Tuning runs in two phases. The CPU frequency is fixed first, because it only stretches preprocessing, which is pipelined
with GPU compute. The remaining knobs are then searched with constrained Bayesian optimization: one GP models
log-energy, one models log-latency, and each step measures the untried grid point that maximizes PF x EI.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm, qmc

from src.device_sim import DeviceProfile, HardwareConfig, default_config, grid_enumerate, measure, noiseless, stage_times
from src.gp_regression import DEFAULT_RESTARTS, GpModel, KernelKind, fit, posterior_many
from src.streams import derive_stream

DEFAULT_XI: float = 0.1
DEFAULT_INITIAL_RANDOM: int = 5
NEAR_OPTIMAL_TOLERANCE: float = 0.05
MIN_EVALS: int = 6
CPU_HEADROOM_SHARE: float = 0.1
TIGHT_SLO_FACTOR: float = 1.2
RELAXED_SLO_FACTOR: float = 1.25
TRACE_COLUMNS: list[str] = ["iter", "cpu", "gpu_min", "gpu_max", "mem", "batch", "latency_ms", "energy_mj", "feasible"]


class InvalidTuningProblemError(Exception):
    pass


@dataclass(frozen=True)
class TuningProblem:
    profile: DeviceProfile
    slo_ms: float
    max_evals: int
    near_optimal_tolerance: float = NEAR_OPTIMAL_TOLERANCE
    batch_dimension_enabled: bool = True

    def __post_init__(self) -> None:
        if not self.slo_ms > 0:
            raise InvalidTuningProblemError(f"slo_ms must be positive, got {self.slo_ms}")
        if not 0 < self.near_optimal_tolerance < 1:
            raise InvalidTuningProblemError(f"near_optimal_tolerance must lie in (0, 1), got {self.near_optimal_tolerance}")
        if self.max_evals < MIN_EVALS:
            raise InvalidTuningProblemError(f"max_evals must be at least {MIN_EVALS}, got {self.max_evals}")

    def candidates(self, cpu_freq: float | None = None) -> list[HardwareConfig]:
        """Grid configurations in scope; the batch dimension collapses to the smallest batch when disabled"""
        smallest = self.profile.grid.batch_sizes[0]
        return [
            config
            for config in grid_enumerate(self.profile)
            if (cpu_freq is None or config.cpu_freq == cpu_freq) and (self.batch_dimension_enabled or config.batch_size == smallest)
        ]


@dataclass(frozen=True)
class CboSettings:
    xi: float = DEFAULT_XI
    n_initial_random: int = DEFAULT_INITIAL_RANDOM
    rng_seed: int = 0
    restarts: int = DEFAULT_RESTARTS
    kernel: KernelKind | None = None

    def __post_init__(self) -> None:
        if self.xi < 0:
            raise InvalidTuningProblemError(f"xi must be non-negative, got {self.xi}")
        if self.n_initial_random < 1 or self.restarts < 1:
            raise InvalidTuningProblemError("n_initial_random and restarts must be at least 1")


@dataclass(frozen=True)
class Observation:
    config: HardwareConfig
    latency_ms: float
    energy_mj: float
    feasible: bool

    @classmethod
    def measured(cls, config: HardwareConfig, latency_ms: float, energy_mj: float, slo_ms: float) -> "Observation":
        return cls(config, latency_ms, energy_mj, latency_ms <= slo_ms)


@dataclass(frozen=True)
class NoiselessOracle:
    """Noise-free grid optimum of a problem and the configurations within tolerance of it"""

    best_config: HardwareConfig | None
    best_energy_mj: float | None
    min_latency_ms: float
    near_optimal: frozenset[HardwareConfig]
    n_candidates: int

    @property
    def n_near_optimal(self) -> int:
        return len(self.near_optimal)


@dataclass(frozen=True)
class TuningReport:
    method: str
    best_config: HardwareConfig | None
    best_energy_mj: float | None
    evaluations: tuple[Observation, ...]
    evals_to_near_optimal: int | None
    simulated_wall_time_s: float
    cpu_freq: float | None = None
    cpu_sweep_evals: int = 0
    seed: int = 0

    @property
    def feasible_found(self) -> bool:
        return self.best_config is not None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "best_config": self.best_config.as_row() if self.best_config else None,
            "best_energy_mj": self.best_energy_mj,
            "n_evaluations": len(self.evaluations),
            "evals_to_near_optimal": self.evals_to_near_optimal,
            "feasible_found": self.feasible_found,
            "simulated_wall_time_s": self.simulated_wall_time_s,
            "cpu_freq": self.cpu_freq,
            "cpu_sweep_evals": self.cpu_sweep_evals,
        }

    def trace_frame(self) -> pd.DataFrame:
        rows = [
            {"iter": i, **obs.config.as_row(), "latency_ms": obs.latency_ms, "energy_mj": obs.energy_mj, "feasible": obs.feasible}
            for i, obs in enumerate(self.evaluations, start=1)
        ]
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def expected_improvement(mean: float | np.ndarray, stddev: float | np.ndarray, best_feasible: float, xi: float) -> float | np.ndarray:
    """EI for minimization: E[max(best - xi - X, 0)] with X ~ N(mean, stddev^2)"""
    mean = np.asarray(mean, dtype=float)
    stddev = np.asarray(stddev, dtype=float)
    z = best_feasible - mean - xi
    positive = stddev > 0
    safe = np.where(positive, stddev, 1.0)
    u = z / safe
    ei = np.where(positive, z * norm.cdf(u) + safe * norm.pdf(u), np.maximum(z, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def prob_feasible(mean_latency: float | np.ndarray, stddev_latency: float | np.ndarray, slo_ms: float) -> float | np.ndarray:
    mean = np.asarray(mean_latency, dtype=float)
    stddev = np.asarray(stddev_latency, dtype=float)
    positive = stddev > 0
    pf = np.where(positive, norm.cdf((slo_ms - mean) / np.where(positive, stddev, 1.0)), (mean <= slo_ms).astype(float))
    return float(pf) if pf.ndim == 0 else pf


def acquisition_from_posteriors(
    mean_energy: float | np.ndarray,
    stddev_energy: float | np.ndarray,
    best_feasible_energy: float | None,
    xi: float,
    mean_latency: float | np.ndarray,
    stddev_latency: float | np.ndarray,
    slo_ms: float,
) -> float | np.ndarray:
    """PF x EI; PF alone until a feasible observation exists"""
    pf = prob_feasible(mean_latency, stddev_latency, slo_ms)
    if best_feasible_energy is None:
        return pf
    return pf * expected_improvement(mean_energy, stddev_energy, best_feasible_energy, xi)


def acquisition_many(
    energy_model: GpModel, latency_model: GpModel, candidates: np.ndarray, best_feasible_energy: float | None, xi: float, slo: float
) -> np.ndarray:
    """Constrained EI over candidate rows; EI is taken in the energy model's standardized units"""
    mean_e, sd_e = posterior_many(energy_model, candidates)
    mean_t, sd_t = posterior_many(latency_model, candidates)
    scale = energy_model.target_scale
    best = None if best_feasible_energy is None else best_feasible_energy / scale
    return np.atleast_1d(acquisition_from_posteriors(mean_e / scale, sd_e / scale, best, xi, mean_t, sd_t, slo))


def acquisition(
    energy_model: GpModel, latency_model: GpModel, candidate: Sequence[float], best_feasible_energy: float | None, settings: CboSettings, slo_ms: float
) -> float:
    return float(acquisition_many(energy_model, latency_model, np.atleast_2d(candidate), best_feasible_energy, settings.xi, slo_ms)[0])


def rs_expected_trials(n_near_optimal: int, n_total: int) -> tuple[float, float]:
    """Mean and standard deviation of the geometric number of uniform draws until a near-optimal hit"""
    if not 0 < n_near_optimal <= n_total:
        raise InvalidTuningProblemError(f"need 0 < n_near_optimal <= n_total, got {n_near_optimal} and {n_total}")
    p = n_near_optimal / n_total
    return 1.0 / p, math.sqrt(1.0 - p) / p


def embedding_bounds(profile: DeviceProfile) -> list[tuple[float, float]]:
    grid = profile.grid
    gpu = (math.log(grid.gpu_freqs[0]), math.log(grid.gpu_freqs[-1]))
    gpu_min = gpu if profile.tune_gpu_min else (gpu[0], gpu[0])
    mem = (math.log(grid.mem_freqs[0]), math.log(grid.mem_freqs[-1]))
    return [gpu_min, gpu, mem, (math.log2(grid.batch_sizes[0]), math.log2(grid.batch_sizes[-1]))]


def embed(configs: Sequence[HardwareConfig]) -> np.ndarray:
    """Search coordinates: log clock frequencies and log2 batch"""
    rows = [[math.log(c.gpu_min_freq), math.log(c.gpu_max_freq), math.log(c.mem_freq), math.log2(c.batch_size)] for c in configs]
    return np.array(rows, dtype=float).reshape(len(configs), 4)


def _unit_cube(points: np.ndarray, bounds: Sequence[tuple[float, float]]) -> np.ndarray:
    lower = np.array([b[0] for b in bounds])
    width = np.array([b[1] - b[0] for b in bounds])
    return (points - lower) / np.where(width > 0, width, 1.0)


def noiseless_oracle(problem: TuningProblem) -> NoiselessOracle:
    """Noise-free optimum over every in-scope configuration, CPU frequency included"""
    candidates = problem.candidates()
    results = [(config, noiseless(problem.profile, config)) for config in candidates]
    min_latency = min(m.latency_ms for _, m in results)
    feasible = [(config, m.energy_per_query_mj) for config, m in results if m.latency_ms <= problem.slo_ms]
    if not feasible:
        return NoiselessOracle(None, None, min_latency, frozenset(), len(candidates))
    best_config, best_energy = min(feasible, key=lambda item: item[1])
    threshold = best_energy * (1.0 + problem.near_optimal_tolerance)
    near = frozenset(config for config, energy in feasible if energy <= threshold)
    return NoiselessOracle(best_config, best_energy, min_latency, near, len(candidates))


def tight_slo(profile: DeviceProfile, batch_dimension_enabled: bool = False) -> float:
    """A latency bound 20% above the fastest noiseless configuration"""
    smallest = profile.grid.batch_sizes[0]
    configs = [c for c in grid_enumerate(profile) if batch_dimension_enabled or c.batch_size == smallest]
    return TIGHT_SLO_FACTOR * min(noiseless(profile, c).latency_ms for c in configs)


def relaxed_slo(profile: DeviceProfile) -> float:
    """A latency bound 25% above the latency of the unconstrained noiseless energy optimum"""
    best = min((noiseless(profile, c) for c in grid_enumerate(profile)), key=lambda m: m.energy_per_query_mj)
    return RELAXED_SLO_FACTOR * best.latency_ms


def choose_cpu_freq(problem: TuningProblem, rng: np.random.Generator) -> tuple[float, int]:
    """Phase one: the slowest CPU clock whose preprocessing neither bottlenecks compute nor eats more than a tenth of the SLO headroom

    Latency is measured once at stock settings and once per swept clock; the count of those measurements is returned with the clock.
    """
    profile = problem.profile
    base = default_config(profile)
    default_latency = measure(profile, base, rng).latency_ms
    allowance = CPU_HEADROOM_SHARE * (problem.slo_ms - default_latency)
    for index, cpu in enumerate(profile.grid.cpu_freqs, start=1):
        config = replace(base, cpu_freq=cpu)
        stages = stage_times(profile, config)
        added = measure(profile, config, rng).latency_ms - default_latency
        logging.debug("CPU sweep at %s MHz: preprocessing %.3f ms, compute %.3f ms, added latency %.3f ms", cpu, stages.preprocess_ms, stages.compute_ms, added)
        if stages.preprocess_ms <= stages.compute_ms and added <= allowance:
            return cpu, index + 1
    return profile.grid.cpu_freqs[-1], len(profile.grid.cpu_freqs) + 1


def _first_near_optimal(evaluations: Sequence[Observation], oracle: NoiselessOracle | None) -> int | None:
    if oracle is None:
        return None
    for index, obs in enumerate(evaluations, start=1):
        if obs.config in oracle.near_optimal:
            return index
    return None


def _report(
    method: str,
    problem: TuningProblem,
    evaluations: list[Observation],
    oracle: NoiselessOracle | None,
    seed: int,
    cpu_freq: float | None = None,
    cpu_sweep_evals: int = 0,
) -> TuningReport:
    feasible = [obs for obs in evaluations if obs.feasible]
    best = min(feasible, key=lambda obs: obs.energy_mj) if feasible else None
    if best is None:
        logging.warning("%s found no configuration meeting the %.3f ms SLO in %s evaluations", method, problem.slo_ms, len(evaluations))
    report = TuningReport(
        method=method,
        best_config=best.config if best else None,
        best_energy_mj=best.energy_mj if best else None,
        evaluations=tuple(evaluations),
        evals_to_near_optimal=_first_near_optimal(evaluations, oracle),
        simulated_wall_time_s=(len(evaluations) + cpu_sweep_evals) * problem.profile.eval_cost_s,
        cpu_freq=cpu_freq,
        cpu_sweep_evals=cpu_sweep_evals,
        seed=seed,
    )
    logging.info("%s seed %s: best %s at %s mJ, near-optimal after %s evaluations", method, seed, report.best_config, report.best_energy_mj, report.evals_to_near_optimal)
    return report


def _observe(problem: TuningProblem, config: HardwareConfig, rng: np.random.Generator) -> Observation:
    m = measure(problem.profile, config, rng)
    return Observation.measured(config, m.latency_ms, m.energy_per_query_mj, problem.slo_ms)


def _initial_indices(unit: np.ndarray, n: int, rng: np.random.Generator) -> list[int]:
    """Latin-hypercube points snapped to the nearest distinct grid candidate"""
    sample = qmc.LatinHypercube(d=unit.shape[1], seed=rng).random(n)
    chosen: list[int] = []
    available = np.ones(len(unit), dtype=bool)
    for point in sample:
        distances = np.where(available, np.sum((unit - point) ** 2, axis=1), np.inf)
        index = int(np.argmin(distances))
        chosen.append(index)
        available[index] = False
    return chosen


def tune(problem: TuningProblem, settings: CboSettings, oracle: NoiselessOracle | None = None) -> TuningReport:
    """Two-phase constrained Bayesian optimization; `oracle` defaults to a fresh noiseless sweep"""
    oracle = oracle or noiseless_oracle(problem)
    profile = problem.profile
    kernel = settings.kernel or KernelKind(profile.kernel)
    cpu_freq, sweep_evals = choose_cpu_freq(problem, derive_stream(settings.rng_seed, "cbo-cpu"))
    candidates = problem.candidates(cpu_freq)
    bounds = embedding_bounds(profile)
    unit = _unit_cube(embed(candidates), bounds)
    logging.info("CBO on %s: CPU fixed at %s MHz, %s candidates, SLO %.3f ms", profile.name, cpu_freq, len(candidates), problem.slo_ms)

    init_rng = derive_stream(settings.rng_seed, "cbo-init")
    fit_rng = derive_stream(settings.rng_seed, "cbo-gp")
    measure_rng = derive_stream(settings.rng_seed, "cbo-measure")

    budget = min(problem.max_evals, len(candidates))
    tried: list[int] = _initial_indices(unit, min(settings.n_initial_random, budget), init_rng)
    evaluations = [_observe(problem, candidates[i], measure_rng) for i in tried]
    untried = np.ones(len(candidates), dtype=bool)
    untried[tried] = False
    log_slo = math.log(problem.slo_ms)

    while len(evaluations) < budget:
        if len(evaluations) < 2:
            index = int(init_rng.choice(np.flatnonzero(untried)))
            tried.append(index)
            untried[index] = False
            evaluations.append(_observe(problem, candidates[index], measure_rng))
            continue
        x = unit[tried]
        energy_model = fit(x, [math.log(o.energy_mj) for o in evaluations], settings.restarts, fit_rng, bounds=[(0.0, 1.0)] * 4, kernel=kernel)
        latency_model = fit(x, [math.log(o.latency_ms) for o in evaluations], settings.restarts, fit_rng, bounds=[(0.0, 1.0)] * 4, kernel=kernel)
        feasible = [math.log(o.energy_mj) for o in evaluations if o.feasible]
        best = min(feasible) if feasible else None

        pool = np.flatnonzero(untried)
        scores = acquisition_many(energy_model, latency_model, unit[pool], best, settings.xi, log_slo)
        index = int(pool[int(np.argmax(scores))])
        tried.append(index)
        untried[index] = False
        evaluations.append(_observe(problem, candidates[index], measure_rng))
        logging.debug("CBO step %s: %s acquisition %.6g -> %s", len(evaluations), candidates[index], float(np.max(scores)), evaluations[-1])

    return _report("cbo", problem, evaluations, oracle, settings.rng_seed, cpu_freq, sweep_evals)


def random_search(problem: TuningProblem, settings: CboSettings, oracle: NoiselessOracle | None = None) -> TuningReport:
    """Uniform sampling without replacement over the whole in-scope grid"""
    oracle = oracle or noiseless_oracle(problem)
    candidates = problem.candidates()
    order = derive_stream(settings.rng_seed, "rs-order").permutation(len(candidates))
    measure_rng = derive_stream(settings.rng_seed, "rs-measure")
    evaluations = [_observe(problem, candidates[int(i)], measure_rng) for i in order[: problem.max_evals]]
    return _report("rs", problem, evaluations, oracle, settings.rng_seed)


def summarize(reports: Sequence[TuningReport], max_evals: int) -> dict:
    """Median and spread of evaluations-to-near-optimal; runs that never got there count as max_evals + 1"""
    reached = [r.evals_to_near_optimal for r in reports if r.evals_to_near_optimal is not None]
    counts = [r.evals_to_near_optimal if r.evals_to_near_optimal is not None else max_evals + 1 for r in reports]
    return {
        "n_runs": len(reports),
        "n_reached": len(reached),
        "median_evals_to_near_optimal": float(np.median(counts)) if counts else None,
        "std_evals_to_near_optimal": float(np.std(counts)) if counts else None,
        "mean_best_energy_mj": float(np.mean([r.best_energy_mj for r in reports if r.best_energy_mj is not None])) if any(r.feasible_found for r in reports) else None,
    }
