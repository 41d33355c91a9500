"""Request arrival processes: evenly spaced, Poisson, and replayed traces"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

DEFAULT_WINDOW_S: float = 60.0


class TraceParseError(Exception):
    def __init__(self, path: Path, line_number: int, text: str) -> None:
        super().__init__(f"{path}:{line_number}: cannot read a timestamp from {text!r}")
        self.line_number = line_number


class ArrivalSource(Enum):
    UNIFORM = "uniform"
    POISSON = "poisson"
    TRACE = "trace"


@dataclass(frozen=True)
class ArrivalStream:
    """Sorted arrival times in seconds over a horizon of duration_s"""

    timestamps_s: tuple[float, ...]
    source: ArrivalSource
    duration_s: float
    path: str | None = None
    segment_start_s: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamps_s", tuple(float(t) for t in self.timestamps_s))
        if any(t < 0 for t in self.timestamps_s):
            raise ValueError("arrival times must be non-negative")
        if any(b < a for a, b in zip(self.timestamps_s, self.timestamps_s[1:])):
            raise ValueError("arrival times must be sorted")

    def __len__(self) -> int:
        return len(self.timestamps_s)

    @property
    def mean_rate_per_s(self) -> float:
        return len(self) / self.duration_s if self.duration_s > 0 else 0.0


def uniform_stream(rate_per_s: float, duration_s: float) -> ArrivalStream:
    """One arrival every 1/rate seconds, the first at 1/rate"""
    if rate_per_s <= 0:
        raise ValueError(f"rate must be positive, got {rate_per_s}")
    count = math.floor(rate_per_s * duration_s + 1e-9) if duration_s > 0 else 0
    return ArrivalStream(tuple(k / rate_per_s for k in range(1, count + 1)), ArrivalSource.UNIFORM, max(duration_s, 0.0))


def poisson_stream(rate_per_s: float, duration_s: float, rng: np.random.Generator) -> ArrivalStream:
    """Exponential inter-arrival gaps with mean 1/rate, truncated at duration_s"""
    if rate_per_s <= 0:
        raise ValueError(f"rate must be positive, got {rate_per_s}")
    if duration_s <= 0:
        return ArrivalStream((), ArrivalSource.POISSON, 0.0)
    chunk = int(rate_per_s * duration_s * 1.5) + 16
    arrivals: list[float] = []
    clock = 0.0
    while clock <= duration_s:
        times = clock + np.cumsum(rng.exponential(1.0 / rate_per_s, size=chunk))
        arrivals.extend(float(t) for t in times if t <= duration_s)
        clock = float(times[-1])
    return ArrivalStream(tuple(arrivals), ArrivalSource.POISSON, duration_s)


def load_trace(path: Path, target_rate_per_s: float | None = None) -> ArrivalStream:
    """Read one timestamp per line; blank lines and # comments are skipped"""
    path = Path(path)
    timestamps: list[float] = []
    for line_number, line in enumerate(path.read_text(encoding="UTF-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            value = float(text)
        except ValueError as e:
            raise TraceParseError(path, line_number, text) from e
        if not math.isfinite(value) or value < 0:
            raise TraceParseError(path, line_number, text)
        timestamps.append(value)
    timestamps.sort()
    span = timestamps[-1] if timestamps else 0.0

    if target_rate_per_s is not None and span > 0:
        if target_rate_per_s <= 0:
            raise ValueError(f"target rate must be positive, got {target_rate_per_s}")
        factor = (len(timestamps) / span) / target_rate_per_s
        timestamps = [t * factor for t in timestamps]
        span *= factor
    logging.info("Loaded %s arrivals spanning %.3f s from %s", len(timestamps), span, path)
    return ArrivalStream(tuple(timestamps), ArrivalSource.TRACE, span, path=str(path))


def write_stream(stream: ArrivalStream, path: Path) -> None:
    Path(path).write_text("".join(f"{t:.9f}\n" for t in stream.timestamps_s), encoding="UTF-8")


def burstiest_segment(stream: ArrivalStream, window_s: float = DEFAULT_WINDOW_S) -> ArrivalStream:
    """The complete window whose per-second arrival counts vary the most, shifted to start at zero"""
    if window_s <= 0:
        raise ValueError(f"window must be positive, got {window_s}")
    n_windows = math.floor(stream.duration_s / window_s + 1e-9)
    if n_windows <= 1:
        return stream

    times = np.asarray(stream.timestamps_s)
    n_bins = math.ceil(window_s)
    best_start, best_variance = 0.0, -1.0
    for index in range(n_windows):
        start = index * window_s
        inside = times[(times >= start) & (times < start + window_s)]
        counts = np.bincount(np.floor(inside - start).astype(int), minlength=n_bins)
        variance = float(np.var(counts))
        if variance > best_variance:
            best_start, best_variance = start, variance

    selected = times[(times >= best_start) & (times < best_start + window_s)] - best_start
    logging.info("Burstiest %.1f s window starts at %.1f s (per-second count variance %.3f)", window_s, best_start, best_variance)
    return ArrivalStream(tuple(selected), stream.source, window_s, path=stream.path, segment_start_s=best_start)
