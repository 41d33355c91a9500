import math

import numpy as np
import pytest
from scipy.stats import norm

from src.cbo_tuner import (
    InvalidTuningProblemError,
    acquisition_from_posteriors,
    acquisition_many,
    expected_improvement,
    prob_feasible,
    rs_expected_trials,
)
from src.gp_regression import GpHyperparams, condition


def monte_carlo_ei(mean: float, stddev: float, best: float, xi: float, n: int = 1_000_000) -> tuple[float, float]:
    """Sample mean and standard error of max(best - xi - X, 0) from stratified normal draws"""
    rng = np.random.default_rng(123)
    samples = mean + stddev * norm.ppf((np.arange(n) + rng.uniform(size=n)) / n)
    gains = np.maximum(best - xi - samples, 0.0)
    return float(gains.mean()), float(gains.std() / math.sqrt(n))


def ei_cases(n: int) -> list[tuple[float, float, float, float]]:
    rng = np.random.default_rng(31)
    return [
        (float(rng.uniform(-5.0, 5.0)), float(rng.uniform(0.05, 3.0)), float(rng.uniform(-5.0, 5.0)), float(rng.choice([0.0, 0.01, 0.1])))
        for _ in range(n)
    ]


def test_expected_improvement_closed_forms() -> None:
    assert expected_improvement(5.0, 0.0, 5.0, 0.1) == 0.0
    assert expected_improvement(5.0, 1.0, 5.0, 0.0) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), abs=1e-5)
    assert expected_improvement(3.0, 0.0, 5.0, 0.5) == pytest.approx(1.5)


@pytest.mark.parametrize("mean, stddev, best, xi", [(10.0, 2.0, 9.0, 0.1), (0.0, 0.5, 0.2, 0.0), (-1.0, 3.0, 1.0, 0.1), *ei_cases(17)])
def test_expected_improvement_matches_monte_carlo(mean: float, stddev: float, best: float, xi: float) -> None:
    """Ensures the closed form agrees with sampling within three standard errors, with 1e-6 slack for tails the draws never reach"""
    estimate, standard_error = monte_carlo_ei(mean, stddev, best, xi)
    assert abs(expected_improvement(mean, stddev, best, xi) - estimate) <= 3.0 * standard_error + 1e-6


def test_expected_improvement_vectorized() -> None:
    means = np.array([1.0, 2.0, 3.0])
    result = expected_improvement(means, np.array([0.5, 0.5, 0.5]), 2.0, 0.1)
    assert isinstance(result, np.ndarray)
    assert result[0] > result[1] > result[2] > 0


def test_probability_of_feasibility() -> None:
    assert prob_feasible(0.7, 0.3, 0.7) == pytest.approx(0.5)
    assert prob_feasible(0.5, 0.1, 0.7) == pytest.approx(0.97725, abs=1e-5)
    assert prob_feasible(0.8, 0.0, 0.7) == 0.0
    assert prob_feasible(0.6, 0.0, 0.7) == 1.0


def test_constrained_acquisition() -> None:
    """Ensures PF x EI composes the two closed forms and collapses when either factor is zero"""
    assert acquisition_from_posteriors(1.0, 2.0, 9.0, 0.1, 0.9, 0.0, 0.7) == 0.0
    assert acquisition_from_posteriors(10.0, 0.0, 9.0, 0.1, 0.5, 0.0, 0.7) == 0.0

    expected = expected_improvement(10.0, 2.0, 9.0, 0.1) * norm.cdf(2.0)
    assert acquisition_from_posteriors(10.0, 2.0, 9.0, 0.1, 0.5, 0.1, 0.7) == pytest.approx(expected, rel=1e-12)
    estimate, standard_error = monte_carlo_ei(10.0, 2.0, 9.0, 0.1)
    assert abs(expected - estimate * norm.cdf(2.0)) <= 3.0 * standard_error


def test_feasibility_only_before_first_feasible_point() -> None:
    assert acquisition_from_posteriors(10.0, 2.0, None, 0.1, 0.5, 0.1, 0.7) == pytest.approx(norm.cdf(2.0))


def test_random_search_expected_trials() -> None:
    mean, stddev = rs_expected_trials(10, 200)
    assert mean == pytest.approx(20.0, abs=0.01)
    assert stddev == pytest.approx(19.49, abs=0.01)
    assert rs_expected_trials(7, 7) == (1.0, 0.0)
    mean, stddev = rs_expected_trials(1, 4)
    assert mean == pytest.approx(4.0)
    assert stddev == pytest.approx(math.sqrt(12.0))
    with pytest.raises(InvalidTuningProblemError):
        rs_expected_trials(0, 10)


def test_expected_improvement_is_continuous() -> None:
    """Nudging the mean or the spread by 1e-9 moves EI by less than 1e-6, down to a vanishing spread"""
    for mean, stddev, best, xi in ei_cases(20):
        ei = expected_improvement(mean, stddev, best, xi)
        assert abs(expected_improvement(mean + 1e-9, stddev, best, xi) - ei) < 1e-6
        assert abs(expected_improvement(mean, stddev + 1e-9, best, xi) - ei) < 1e-6
    assert abs(expected_improvement(4.0, 1e-9, 5.0, 0.1) - expected_improvement(4.0, 0.0, 5.0, 0.1)) < 1e-6
    assert abs(expected_improvement(4.9, 1e-9, 5.0, 0.1) - expected_improvement(4.9, 0.0, 5.0, 0.1)) < 1e-6


def test_acquisition_argmax_ignores_energy_units() -> None:
    """Measuring energy in joules instead of millijoules shifts log-energy by a constant and leaves the chosen candidate unchanged"""
    rng = np.random.default_rng(40)
    x = rng.uniform(size=(12, 4))
    energy_mj = np.exp(np.sum((x - 0.6) ** 2, axis=1) + 4.0)
    latency_ms = np.exp(1.0 + 2.0 * x[:, 3] - x[:, 1])
    candidates = rng.uniform(size=(200, 4))
    hyperparams = GpHyperparams((0.4, 0.6, 0.5, 0.7), 1.0, 1e-4)
    latency_model = condition(x, np.log(latency_ms), hyperparams, bounds=[(0.0, 1.0)] * 4)
    slo = math.log(float(np.median(latency_ms)))

    scores = []
    for scale in (1.0, 1e-3, 250.0):
        log_energy = np.log(scale * energy_mj)
        energy_model = condition(x, log_energy, hyperparams, bounds=[(0.0, 1.0)] * 4)
        feasible = log_energy[np.log(latency_ms) <= slo]
        scores.append(acquisition_many(energy_model, latency_model, candidates, float(feasible.min()), 0.1, slo))
    for other in scores[1:]:
        assert int(np.argmax(other)) == int(np.argmax(scores[0]))
        np.testing.assert_allclose(other, scores[0], rtol=1e-6, atol=1e-12)
