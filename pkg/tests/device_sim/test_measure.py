import math
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

import src.device_sim
from src.device_sim import (
    FinetuneSpec,
    FrequencyGrid,
    HardwareConfig,
    InfeasibleSloError,
    default_config,
    finetune_iteration_ms,
    grid_search_oracle,
    load_profile,
    measure,
    measure_concurrent,
    noise_sigma,
    noiseless,
    noiseless_concurrent,
    resolve_profile_path,
    stage_times,
)

ORIN = load_profile(resolve_profile_path("synthetic-orin"))
TX2 = load_profile(resolve_profile_path("synthetic-tx2"))


def closed_form_latency_ms(cpu: float, gpu_max: float, mem: float) -> float:
    """Batch-1 latency of the B0 workload on the Orin profile, written out from the roofline and governor model"""
    memory_ms = 0.096 / (0.03 * mem) * 1000.0
    peak_ms = 0.78 / (0.19 * gpu_max) * 1000.0
    utilization = peak_ms / (peak_ms + memory_ms)
    effective = max(gpu_max * min(1.0, utilization / 0.9), 114.75)
    compute_ms = max(0.78 / (0.19 * effective) * 1000.0, memory_ms)
    preprocess_ms = 0.4 * 2201.6 / cpu
    return max(compute_ms, preprocess_ms) + min(compute_ms, preprocess_ms)


def test_noiseless_matches_closed_form() -> None:
    """Ensures noise-free batch-1 latency at the grid maxima reproduces the roofline formula exactly"""
    config = default_config(ORIN)
    assert noiseless(ORIN, config).latency_ms == pytest.approx(closed_form_latency_ms(2201.6, 1300.5, 3199.0), rel=1e-12)
    assert noiseless(ORIN, config).latency_ms == pytest.approx(4.1413, abs=1e-4)
    assert measure(ORIN.without_noise(), config, np.random.default_rng(3)).latency_ms == noiseless(ORIN, config).latency_ms


def test_orin_calibration() -> None:
    """The noise-free grid optimum sits at a low CPU clock and a mid memory clock and saves close to a fifth of default energy"""
    result = grid_search_oracle(ORIN.without_noise(), math.inf, 1, np.random.default_rng(0))
    default_energy = noiseless(ORIN, default_config(ORIN)).energy_per_query_mj
    assert default_energy == pytest.approx(66.80, abs=0.01)
    assert result.best_config == HardwareConfig(729.6, 114.75, 1300.5, 1600.0, 16)
    assert result.best_energy_mj == pytest.approx(54.31, abs=0.01)
    assert 0.12 <= 1.0 - result.best_energy_mj / default_energy <= 0.30


def test_tx2_calibration() -> None:
    """Ensures the TX2 optimum saves between 12% and 30% of the energy of the default-max configuration"""
    result = grid_search_oracle(TX2.without_noise(), math.inf, 1, np.random.default_rng(0))
    default_energy = noiseless(TX2, default_config(TX2)).energy_per_query_mj
    savings = 1.0 - result.best_energy_mj / default_energy
    assert 0.12 <= savings <= 0.30
    assert result.best_config.mem_freq == 800.0
    assert result.n_evaluations == 5005
    assert result.simulated_wall_time_s == pytest.approx(5005 * 10.0)


def test_memory_optimum_is_interior() -> None:
    base = HardwareConfig(729.6, 114.75, 1300.5, 1600.0, 16)
    energies = {mem: noiseless(ORIN, replace(base, mem_freq=mem)).energy_per_query_mj for mem in ORIN.grid.mem_freqs}
    assert min(energies, key=energies.__getitem__) == 1600.0
    assert energies[1600.0] < energies[ORIN.grid.mem_freqs[0]]
    assert energies[1600.0] < energies[ORIN.grid.mem_freqs[-1]]


def test_gpu_floor_sweep() -> None:
    """Raising the GPU floor is free until it passes the governor's demand, after which energy and latency both fall"""
    base = default_config(ORIN)
    demand = stage_times(ORIN, base).effective_gpu_freq
    results = [noiseless(ORIN, replace(base, gpu_min_freq=f)) for f in ORIN.grid.gpu_freqs]
    below = [m.energy_per_query_mj for f, m in zip(ORIN.grid.gpu_freqs, results, strict=True) if f <= demand]
    above = [m.energy_per_query_mj for f, m in zip(ORIN.grid.gpu_freqs, results, strict=True) if f > demand]
    assert max(below) - min(below) < 1e-9
    assert all(b < a for a, b in zip([below[-1], *above], above, strict=False))
    assert results[-1].latency_ms < results[0].latency_ms


def test_latency_falls_with_gpu_ceiling() -> None:
    base = default_config(ORIN)
    latencies = [noiseless(ORIN, replace(base, gpu_max_freq=f)).latency_ms for f in ORIN.grid.gpu_freqs]
    assert all(b < a for a, b in zip(latencies, latencies[1:], strict=False))


def test_noise_shrinks_with_batch() -> None:
    assert noise_sigma(ORIN, 1) == ORIN.noise_sigma_small_batch
    assert noise_sigma(ORIN, 16) == pytest.approx(ORIN.noise_sigma_base)
    assert noise_sigma(ORIN, 4) < noise_sigma(ORIN, 1)


def test_measure_consumes_one_draw() -> None:
    """Ensures a measurement is reproducible from the stream position and advances the stream by exactly one normal draw"""
    config = default_config(ORIN, 4)
    first = measure(ORIN, config, np.random.default_rng(42))
    second = measure(ORIN, config, np.random.default_rng(42))
    assert first == second

    rng = np.random.default_rng(42)
    reference = np.random.default_rng(42)
    measure(ORIN, config, rng)
    reference.standard_normal()
    assert rng.standard_normal() == reference.standard_normal()


def test_partial_batch_occupancy() -> None:
    config = default_config(ORIN, 8)
    full = noiseless(ORIN, config)
    partial = noiseless(ORIN, config, occupancy=3)
    assert partial.occupancy == 3
    assert partial.latency_ms < full.latency_ms


def test_idle_finetune_is_plain_inference() -> None:
    idle = FinetuneSpec(batch_size=1, n_iterations=1, output_dim=1000, flops_per_iter=0.0, ai=5.0, iter_duration_ms_standalone=1.0)
    assert idle.ai == 0.0
    config = default_config(ORIN, 2)
    assert measure_concurrent(ORIN, config, idle, np.random.default_rng(9)) == measure(ORIN, config, np.random.default_rng(9))


def test_reference_inflation() -> None:
    """Ensures the profiles' named fine-tuning specs add exactly the inflation listed in their files"""
    for profile in (ORIN, TX2):
        ft = profile.reference_finetune
        assert ft is not None
        config = default_config(profile)
        added = noiseless_concurrent(profile, config, ft).latency_ms - noiseless(profile, config).latency_ms
        assert profile.interference.inflation_ms(ft) == pytest.approx(profile.reference_inflation_ms, rel=1e-9)
        assert added == pytest.approx(profile.reference_inflation_ms, rel=1e-9)


def test_concurrent_inference_keeps_its_own_head() -> None:
    """A fine-tuning job with a 100-class head leaves the 1000-class inference model untouched and only adds its interference"""
    ft = TX2.reference_finetune
    assert ft is not None
    assert ft.output_dim != TX2.workload.output_dim
    law = TX2.interference
    for batch in (1, 4, 16):
        config = default_config(TX2, batch)
        added = noiseless_concurrent(TX2, config, ft).latency_ms - noiseless(TX2, config).latency_ms
        assert added == pytest.approx(law.flops_coeff * ft.flops_per_iter + law.ai_coeff * ft.ai, rel=1e-12)


def test_inflation_is_linear_in_flops() -> None:
    ft = ORIN.reference_finetune
    assert ft is not None
    config = default_config(ORIN)
    standalone = noiseless(ORIN, config).latency_ms
    single = noiseless_concurrent(ORIN, config, ft).latency_ms - standalone
    doubled = noiseless_concurrent(ORIN, config, replace(ft, flops_per_iter=2 * ft.flops_per_iter)).latency_ms - standalone
    assert doubled - single == pytest.approx(ORIN.interference.flops_coeff * ft.flops_per_iter)


def test_finetune_iteration_stretches_with_slower_gpu() -> None:
    ft = ORIN.reference_finetune
    assert ft is not None
    assert finetune_iteration_ms(ORIN, default_config(ORIN, 8), ft) == pytest.approx(ft.iter_duration_ms_standalone)
    slow = replace(default_config(ORIN), gpu_max_freq=624.75)
    assert finetune_iteration_ms(ORIN, slow, ft) > ft.iter_duration_ms_standalone


def test_oracle_infeasible_slo() -> None:
    with pytest.raises(InfeasibleSloError, match="minimum achievable latency") as e:
        grid_search_oracle(ORIN, 1.0, 1, np.random.default_rng(0))
    assert e.value.min_latency_ms > 1.0
    assert e.value.slo_ms == 1.0


def test_oracle_measure_count() -> None:
    """Ensures every configuration is measured once per replica"""
    grid = FrequencyGrid((2201.6,), (114.75, 1300.5), (3199.0,), (1,))
    profile = replace(ORIN, grid=grid)
    with patch("src.device_sim.measure", wraps=src.device_sim.measure) as measured:
        result = grid_search_oracle(profile, math.inf, 3, np.random.default_rng(1))
    assert measured.call_count == 6
    assert result.n_evaluations == 6


def test_oracle_pareto_frontier() -> None:
    result = grid_search_oracle(ORIN, math.inf, 1, np.random.default_rng(5))
    latencies = [p.latency_ms for p in result.pareto_set]
    energies = [p.energy_mj for p in result.pareto_set]
    assert latencies == sorted(latencies)
    assert all(b < a for a, b in zip(energies, energies[1:], strict=False))
    assert energies[-1] == result.best_energy_mj
