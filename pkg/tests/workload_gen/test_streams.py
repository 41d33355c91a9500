import math

import numpy as np
import pytest

from src.streams import derive_stream
from src.workload_gen import ArrivalSource, ArrivalStream, poisson_stream, uniform_stream


def test_uniform_stream() -> None:
    """Ensures evenly spaced arrivals start one gap after zero"""
    stream = uniform_stream(8.0, 30.0)
    assert len(stream) == 240
    gaps = np.diff(stream.timestamps_s)
    np.testing.assert_allclose(gaps, 0.125)
    assert float(np.var(gaps)) == pytest.approx(0.0, abs=1e-20)
    assert uniform_stream(1.0, 1.0).timestamps_s == (1.0,)
    assert stream.source is ArrivalSource.UNIFORM


def test_poisson_count() -> None:
    """The mean count over 20 seeded runs at 8 req/s for 30 s lies within three Poisson standard deviations of 240"""
    counts = [len(poisson_stream(8.0, 30.0, derive_stream(seed, "arrivals"))) for seed in range(20)]
    assert abs(float(np.mean(counts)) - 240.0) <= 3.0 * math.sqrt(240.0)


def test_poisson_gap_mean() -> None:
    stream = poisson_stream(8.0, 12_500.0, np.random.default_rng(0))
    gaps = np.diff((0.0, *stream.timestamps_s))
    assert len(gaps) > 90_000
    assert abs(float(gaps.mean()) - 0.125) <= 3.0 * 0.125 / math.sqrt(len(gaps))


def test_poisson_edge_cases() -> None:
    assert len(poisson_stream(8.0, 0.0, np.random.default_rng(0))) == 0
    first = poisson_stream(8.0, 10.0, np.random.default_rng(5))
    second = poisson_stream(8.0, 10.0, np.random.default_rng(5))
    assert first == second
    assert all(0.0 <= t <= 10.0 for t in first.timestamps_s)
    with pytest.raises(ValueError, match="rate"):
        poisson_stream(0.0, 10.0, np.random.default_rng(0))


def test_stream_invariants() -> None:
    with pytest.raises(ValueError, match="sorted"):
        ArrivalStream((1.0, 0.5), ArrivalSource.TRACE, 2.0)
    with pytest.raises(ValueError, match="non-negative"):
        ArrivalStream((-1.0,), ArrivalSource.TRACE, 2.0)


def test_derived_streams_are_independent() -> None:
    assert derive_stream(1, "a").standard_normal() == derive_stream(1, "a").standard_normal()
    assert derive_stream(1, "a").standard_normal() != derive_stream(1, "b").standard_normal()
