from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from src.cbo_tuner import (
    TRACE_COLUMNS,
    CboSettings,
    InvalidTuningProblemError,
    TuningProblem,
    TuningReport,
    choose_cpu_freq,
    noiseless_oracle,
    random_search,
    relaxed_slo,
    rs_expected_trials,
    summarize,
    tight_slo,
    tune,
)
from src.device_sim import FrequencyGrid, HardwareConfig, load_profile, measure, resolve_profile_path

ORIN = load_profile(resolve_profile_path("synthetic-orin"))
RELAXED = TuningProblem(ORIN, relaxed_slo(ORIN), 25)


def test_benchmark_slos() -> None:
    """Ensures the tight bound sits 20% above the fastest batch-1 latency and the relaxed bound 25% above the optimum's latency"""
    assert tight_slo(ORIN) == pytest.approx(1.2 * 4.1413, abs=1e-3)
    assert relaxed_slo(ORIN) == pytest.approx(1.25 * 75.4632, abs=1e-3)


def test_noiseless_oracle() -> None:
    oracle = noiseless_oracle(RELAXED)
    assert oracle.n_candidates == 1820
    assert oracle.best_config == HardwareConfig(729.6, 114.75, 1300.5, 1600.0, 16)
    assert oracle.n_near_optimal == 42
    assert oracle.best_config in oracle.near_optimal


def test_cpu_phase_picks_slowest_clock() -> None:
    """The sweep measures stock settings and then the slowest clock, which already fits; both measurements are counted"""
    with patch("src.cbo_tuner.measure", wraps=measure) as spy:
        assert choose_cpu_freq(RELAXED, np.random.default_rng(0)) == (729.6, 2)
    assert spy.call_count == 2


def test_cpu_phase_is_measured_with_noise() -> None:
    quiet = replace(RELAXED, profile=ORIN.without_noise())
    assert choose_cpu_freq(quiet, np.random.default_rng(0)) == choose_cpu_freq(quiet, np.random.default_rng(1))
    noisy_draws = np.random.default_rng(5)
    choose_cpu_freq(RELAXED, noisy_draws)
    assert noisy_draws.bit_generator.state != np.random.default_rng(5).bit_generator.state


def test_problem_validation() -> None:
    with pytest.raises(InvalidTuningProblemError, match="max_evals"):
        TuningProblem(ORIN, 100.0, 5)
    with pytest.raises(InvalidTuningProblemError, match="slo_ms"):
        TuningProblem(ORIN, 0.0, 10)
    with pytest.raises(InvalidTuningProblemError, match="xi"):
        CboSettings(xi=-0.1)


def test_candidates_without_batch_dimension() -> None:
    problem = TuningProblem(ORIN, 100.0, 10, batch_dimension_enabled=False)
    assert len(problem.candidates()) == 4 * 13 * 7
    assert len(problem.candidates(729.6)) == 13 * 7
    assert {c.batch_size for c in problem.candidates()} == {1}


def test_initial_samples_only() -> None:
    """With the budget equal to the initial sample count the report holds exactly those distinct samples"""
    problem = TuningProblem(ORIN, relaxed_slo(ORIN), 6)
    report = tune(problem, CboSettings(n_initial_random=6, restarts=2))
    assert len(report.evaluations) == 6
    assert len({obs.config for obs in report.evaluations}) == 6
    assert all(obs.config.cpu_freq == report.cpu_freq for obs in report.evaluations)
    assert report.cpu_sweep_evals == 2
    assert report.simulated_wall_time_s == pytest.approx((6 + 2) * ORIN.eval_cost_s)


def test_tune_is_reproducible() -> None:
    problem = TuningProblem(ORIN, relaxed_slo(ORIN), 9)
    first = tune(problem, CboSettings(rng_seed=3, restarts=2))
    second = tune(problem, CboSettings(rng_seed=3, restarts=2))
    assert first.evaluations == second.evaluations
    assert len({obs.config for obs in first.evaluations}) == 9
    assert first.trace_frame().columns.tolist() == TRACE_COLUMNS


def test_single_feasible_configuration() -> None:
    """A grid where only one point meets the SLO yields that point as soon as it has been sampled"""
    grid = FrequencyGrid((2201.6,), (114.75, 1300.5), (204.0, 3199.0), (1, 2))
    profile = replace(ORIN, grid=grid, noise_sigma_base=0.0, noise_sigma_small_batch=0.0)
    problem = TuningProblem(profile, 5.0, 8)
    oracle = noiseless_oracle(problem)
    assert oracle.best_config == HardwareConfig(2201.6, 114.75, 1300.5, 3199.0, 1)

    report = tune(problem, CboSettings(restarts=2), oracle)
    assert len(report.evaluations) == 8
    assert report.best_config == oracle.best_config
    rs = random_search(problem, CboSettings(), oracle)
    assert len(rs.evaluations) == 8
    assert rs.best_config == oracle.best_config


def test_infeasible_problem_reports_no_best() -> None:
    problem = TuningProblem(ORIN, 1.0, 6, batch_dimension_enabled=False)
    assert noiseless_oracle(problem).best_config is None
    report = tune(problem, CboSettings(restarts=2))
    assert not report.feasible_found
    assert report.evals_to_near_optimal is None
    assert report.to_dict()["best_config"] is None


def test_random_search_samples_without_replacement() -> None:
    report = random_search(RELAXED, CboSettings(rng_seed=4))
    assert len(report.evaluations) == 25
    assert len({obs.config for obs in report.evaluations}) == 25
    assert random_search(RELAXED, CboSettings(rng_seed=4)).evaluations == report.evaluations


def test_summarize_counts_misses_past_budget() -> None:
    reports = [TuningReport("cbo", None, None, (), evals, 0.0) for evals in (3, 7, None)]
    summary = summarize(reports, 25)
    assert summary["n_runs"] == 3
    assert summary["n_reached"] == 2
    assert summary["median_evals_to_near_optimal"] == 7.0
    assert summary["std_evals_to_near_optimal"] == pytest.approx(float(np.std([3, 7, 26])))
    assert summary["mean_best_energy_mj"] is None


@pytest.mark.parametrize("profile_name", ["synthetic-orin", "synthetic-tx2"])
def test_cbo_reaches_near_optimal_quickly(profile_name: str) -> None:
    """Over 20 seeds on the relaxed benchmark, CBO reaches a near-optimal point within a median of 15 evaluations with a spread of at most 3, and random search would need at least three times as many draws"""
    profile = load_profile(resolve_profile_path(profile_name))
    problem = TuningProblem(profile, relaxed_slo(profile), 25)
    oracle = noiseless_oracle(problem)
    reports = [tune(problem, CboSettings(rng_seed=seed), oracle) for seed in range(20)]
    summary = summarize(reports, problem.max_evals)

    assert summary["n_reached"] == 20
    assert summary["median_evals_to_near_optimal"] <= 15
    assert summary["std_evals_to_near_optimal"] <= 3
    assert rs_expected_trials(oracle.n_near_optimal, oracle.n_candidates)[0] >= 3 * summary["median_evals_to_near_optimal"]
    assert all(report.feasible_found for report in reports)
