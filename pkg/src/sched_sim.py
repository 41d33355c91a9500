"""Discrete-event simulation of an inference server that shares its GPU with a fine-tuning queue.

Requests queue FIFO and are batched up to the batch cap of the running configuration. A batch is dispatched once the
cap is reached or once the head request's slack drops below the predicted service time; requests whose deadline has
already passed at dispatch are dropped. Fine-tuning runs one iteration at a time next to inference, and an iteration
only starts while no batch is in flight. Greedy starts each iteration as soon as the server is idle. Adaptive first asks
the interference model whether some batch size keeps co-located inference within the SLO, shrinks the batch cap if
needed, and at dispatch drops requests that the predicted completion time would already make late.
"""

import bisect
import heapq
import itertools
import json
import logging
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.device_sim import (
    DeviceProfile,
    FinetuneSpec,
    HardwareConfig,
    finetune_iteration_ms,
    full_power_w,
    idle_power_w,
    measure,
    measure_concurrent,
    noiseless,
    reconfiguration_cost_s,
    validate_config,
)
from src.perf_model import PerfModelCoeffs, inference_features, predict
from src.streams import derive_stream
from src.workload_gen import ArrivalStream

EVENT_COLUMNS: list[str] = ["time_s", "event", "request_id", "batch", "latency_ms", "energy_mj", "slo_ms", "ft_iter"]
POWER_COLUMNS: list[str] = ["start_s", "end_s", "power_w"]
TIME_EPSILON_S: float = 1e-9


class PolicyKind(Enum):
    GREEDY = "greedy"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class SchedulerPolicy:
    kind: PolicyKind
    coeffs: PerfModelCoeffs | None = None

    def __post_init__(self) -> None:
        if self.kind is PolicyKind.ADAPTIVE and self.coeffs is None:
            raise ValueError("the adaptive policy needs fitted interference coefficients")

    @classmethod
    def greedy(cls) -> "SchedulerPolicy":
        return cls(PolicyKind.GREEDY)

    @classmethod
    def adaptive(cls, coeffs: PerfModelCoeffs) -> "SchedulerPolicy":
        return cls(PolicyKind.ADAPTIVE, coeffs)


class _EventKind(IntEnum):
    # value is the tie-break order for simultaneous events
    BATCH_DONE = 0
    FT_DONE = 1
    RECONFIG_DONE = 2
    SLO_CHANGE = 3
    FT_ARRIVAL = 4
    ARRIVAL = 5
    SLACK_TIMER = 6


@dataclass
class InferenceRequest:
    id: int
    arrival_time_s: float
    deadline_s: float
    slo_ms: float
    completion_time_s: float | None = None
    dropped: bool = False

    @property
    def violated(self) -> bool:
        return self.completion_time_s is not None and self.completion_time_s > self.deadline_s


@dataclass(frozen=True)
class ScheduleEvent:
    time_s: float
    event: str
    request_id: int | None = None
    batch: int | None = None
    latency_ms: float | None = None
    energy_mj: float | None = None
    slo_ms: float | None = None
    ft_iter: int | None = None


@dataclass(frozen=True)
class FtIteration:
    index: int
    start_s: float
    end_s: float
    batch_cap: int
    predicted_ms: float | None


@dataclass(frozen=True)
class ScheduleReport:
    policy: str
    n_requests: int
    n_violations: int
    n_dropped: int
    violation_rate: float
    ft_iterations_completed: int
    ft_iterations_total: int
    ft_makespan_s: float | None
    energy_total_j: float
    horizon_s: float
    events: tuple[ScheduleEvent, ...]
    ft_iterations: tuple[FtIteration, ...]
    power_trace: tuple[tuple[float, float, float], ...]
    requests: tuple[InferenceRequest, ...]

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "n_requests": self.n_requests,
            "n_violations": self.n_violations,
            "n_dropped": self.n_dropped,
            "violation_rate": self.violation_rate,
            "ft_iterations_completed": self.ft_iterations_completed,
            "ft_iterations_total": self.ft_iterations_total,
            "ft_makespan_s": self.ft_makespan_s,
            "energy_total_j": self.energy_total_j,
            "horizon_s": self.horizon_s,
            "ft_iterations": [
                {"iter": it.index, "start_s": it.start_s, "end_s": it.end_s, "batch_cap": it.batch_cap, "predicted_ms": it.predicted_ms}
                for it in self.ft_iterations
            ],
        }

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(e) for e in self.events], columns=EVENT_COLUMNS)

    def power_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.power_trace), columns=POWER_COLUMNS)


def _validate_schedule(slo_schedule: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    schedule = [(float(start), float(slo)) for start, slo in slo_schedule]
    if not schedule:
        raise ValueError("SLO schedule must not be empty")
    if schedule[0][0] != 0:
        raise ValueError("SLO schedule must start at t = 0")
    if any(b[0] <= a[0] for a, b in itertools.pairwise(schedule)):
        raise ValueError("SLO schedule start times must be strictly increasing")
    if any(slo <= 0 for _, slo in schedule):
        raise ValueError("SLO values must be positive")
    return schedule


class _Server:
    """Mutable state of one simulation run"""

    def __init__(
        self,
        profile: DeviceProfile,
        config: HardwareConfig,
        ft: FinetuneSpec | None,
        policy: SchedulerPolicy,
        schedule: list[tuple[float, float]],
        duration_s: float,
        ft_arrival_s: float,
        rng: np.random.Generator,
    ) -> None:
        self.profile = profile
        self.config = config
        self.ft = ft if ft is not None and not ft.is_idle else None
        self.policy = policy
        self.schedule = schedule
        self.duration_s = duration_s
        self.ft_arrival_s = ft_arrival_s
        self.rng = rng

        self.heap: list[tuple[float, int, int, Any]] = []
        self.sequence = itertools.count()
        self.now = 0.0
        self.slo_ms = schedule[0][1]
        self.cap = config.batch_size
        self.queue: deque[InferenceRequest] = deque()
        self.requests: list[InferenceRequest] = []
        self.events: list[ScheduleEvent] = []

        self.server_busy = False
        self.reconfiguring = False
        self.timer_version = 0
        self.timer_at: float | None = None
        self.batches: list[tuple[float, float, float]] = []

        self.ft_released = False
        self.ft_remaining = self.ft.n_iterations if self.ft else 0
        self.ft_running = False
        self.ft_deferred = False
        self.ft_iterations: list[FtIteration] = []
        self.pending_cap: int | None = None

    def push(self, time_s: float, kind: _EventKind, payload: Any = None) -> None:
        heapq.heappush(self.heap, (time_s, int(kind), next(self.sequence), payload))

    def record(self, event: str, **fields) -> None:
        self.events.append(ScheduleEvent(self.now, event, **fields))

    def run_config(self) -> HardwareConfig:
        return self.config.with_batch(self.cap)

    def _co_located_ms(self, batch_size: int) -> float:
        if self.policy.coeffs is None or self.ft is None:
            raise ValueError("co-located prediction needs coefficients and a fine-tuning spec")
        return predict(self.policy.coeffs, inference_features(self.profile.workload, batch_size, self.ft))

    def predicted_service_ms(self) -> float:
        if self.ft_running and self.policy.kind is PolicyKind.ADAPTIVE:
            return self._co_located_ms(self.cap)
        return noiseless(self.profile, self.run_config()).latency_ms

    def run(self, arrivals: ArrivalStream) -> None:
        for start, slo in self.schedule[1:]:
            self.push(start, _EventKind.SLO_CHANGE, slo)
        for index, t in enumerate(t for t in arrivals.timestamps_s if t <= self.duration_s):
            self.push(t, _EventKind.ARRIVAL, index)
        if self.ft is not None:
            self.push(self.ft_arrival_s, _EventKind.FT_ARRIVAL)

        while self.heap:
            time_s, kind, _, payload = heapq.heappop(self.heap)
            if time_s < self.now:
                raise RuntimeError(f"event at {time_s} processed after {self.now}")
            self.now = time_s
            self.handle(_EventKind(kind), payload)
            self.try_start_ft()
            self.try_dispatch()

    def handle(self, kind: _EventKind, payload: Any) -> None:
        if kind is _EventKind.ARRIVAL:
            request = InferenceRequest(int(payload), self.now, self.now + self.slo_ms / 1000.0, self.slo_ms)
            self.requests.append(request)
            self.queue.append(request)
            self.record("arrival", request_id=request.id, slo_ms=self.slo_ms)
        elif kind is _EventKind.BATCH_DONE:
            batch, measurement = payload
            self.server_busy = False
            for request in batch:
                request.completion_time_s = self.now
                latency_ms = (self.now - request.arrival_time_s) * 1000.0
                self.record("complete", request_id=request.id, batch=len(batch), latency_ms=latency_ms, energy_mj=measurement.energy_per_query_mj, slo_ms=request.slo_ms)
        elif kind is _EventKind.FT_DONE:
            self.ft_running = False
            self.ft_remaining -= 1
            self.record("ft_end", ft_iter=int(payload))
            if self.ft_remaining == 0 and self.cap != self.config.batch_size:
                self.pending_cap = self.config.batch_size
        elif kind is _EventKind.RECONFIG_DONE:
            self.reconfiguring = False
            self.server_busy = False
            self.cap = int(payload)
            self.record("reconfigured", batch=self.cap)
        elif kind is _EventKind.SLO_CHANGE:
            self.slo_ms = float(payload)
            self.ft_deferred = False
            self.record("slo_change", slo_ms=self.slo_ms)
        elif kind is _EventKind.FT_ARRIVAL:
            self.ft_released = True
            self.record("ft_arrival")
        elif kind is _EventKind.SLACK_TIMER and payload == self.timer_version:
            self.timer_at = None

    def reconfigure(self, new_cap: int) -> None:
        cost_s = reconfiguration_cost_s(self.run_config(), self.config.with_batch(new_cap), self.profile.cpu_cores)
        self.pending_cap = None
        self.server_busy = True
        self.reconfiguring = True
        self.record("reconfigure", batch=new_cap, latency_ms=cost_s * 1000.0)
        self.push(self.now + cost_s, _EventKind.RECONFIG_DONE, new_cap)

    def choose_ft_batch(self) -> tuple[int, float] | None:
        """Largest batch cap whose predicted co-located latency meets the current SLO"""
        allowed = [b for b in self.profile.grid.batch_sizes if b <= self.config.batch_size]
        for batch_size in sorted(allowed, reverse=True):
            predicted = self._co_located_ms(batch_size)
            if predicted <= self.slo_ms:
                return batch_size, predicted
        return None

    def try_start_ft(self) -> None:
        if self.pending_cap is not None and not self.server_busy and not self.ft_running:
            self.reconfigure(self.pending_cap)
            return
        if self.ft is None or not self.ft_released or self.ft_running or self.ft_remaining == 0 or self.server_busy:
            return
        if self.now >= self.duration_s:
            return

        predicted: float | None = None
        if self.policy.kind is PolicyKind.ADAPTIVE:
            choice = self.choose_ft_batch()
            if choice is None:
                if not self.ft_deferred:
                    logging.debug("Deferring fine-tuning at %.3f s: no batch size meets %.1f ms", self.now, self.slo_ms)
                    self.record("ft_defer", slo_ms=self.slo_ms)
                    self.ft_deferred = True
                return
            batch_size, predicted = choice
            if batch_size != self.cap:
                self.reconfigure(batch_size)
                return
        self.ft_deferred = False

        index = len(self.ft_iterations) + 1
        duration_s = finetune_iteration_ms(self.profile, self.run_config(), self.ft) / 1000.0
        self.ft_running = True
        self.ft_iterations.append(FtIteration(index, self.now, self.now + duration_s, self.cap, predicted))
        self.record("ft_start", batch=self.cap, latency_ms=predicted, ft_iter=index, slo_ms=self.slo_ms)
        self.push(self.now + duration_s, _EventKind.FT_DONE, index)

    def shed_hopeless(self, batch: list[InferenceRequest]) -> list[InferenceRequest]:
        """Drop requests whose predicted co-located completion is already past their deadline, re-predicting for the smaller batch"""
        while batch:
            finish_s = self.now + self._co_located_ms(len(batch)) / 1000.0 - TIME_EPSILON_S
            keep = [request for request in batch if request.deadline_s >= finish_s]
            if len(keep) == len(batch):
                break
            for request in batch:
                if request.deadline_s < finish_s:
                    request.dropped = True
                    self.record("drop", request_id=request.id, slo_ms=request.slo_ms)
            batch = keep
        return batch

    def try_dispatch(self) -> None:
        while not self.server_busy and self.pending_cap is None:
            while self.queue and self.queue[0].deadline_s < self.now:
                request = self.queue.popleft()
                request.dropped = True
                self.record("drop", request_id=request.id, slo_ms=request.slo_ms)
            if not self.queue:
                return

            predicted_s = self.predicted_service_ms() / 1000.0
            head = self.queue[0]
            fire_at = head.deadline_s - predicted_s
            if len(self.queue) < self.cap and fire_at > self.now + TIME_EPSILON_S:
                if self.timer_at != fire_at:
                    self.timer_version += 1
                    self.timer_at = fire_at
                    self.push(fire_at, _EventKind.SLACK_TIMER, self.timer_version)
                return

            batch: list[InferenceRequest] = []
            while self.queue and len(batch) < self.cap:
                request = self.queue.popleft()
                if request.deadline_s < self.now:
                    request.dropped = True
                    self.record("drop", request_id=request.id, slo_ms=request.slo_ms)
                    continue
                batch.append(request)
            if self.policy.kind is PolicyKind.ADAPTIVE and self.ft_running:
                batch = self.shed_hopeless(batch)
            if batch:
                self.dispatch(batch)

    def dispatch(self, batch: list[InferenceRequest]) -> None:
        co_located = self.ft_running and self.ft is not None
        if co_located:
            measurement = measure_concurrent(self.profile, self.run_config(), self.ft, self.rng, occupancy=len(batch))
        else:
            measurement = measure(self.profile, self.run_config(), self.rng, occupancy=len(batch))
        end = self.now + measurement.latency_ms / 1000.0
        self.server_busy = True
        self.batches.append((self.now, end, measurement.mean_power_w))
        self.record("dispatch", batch=len(batch), latency_ms=measurement.latency_ms, energy_mj=measurement.energy_per_query_mj, slo_ms=self.slo_ms)
        self.push(end, _EventKind.BATCH_DONE, (batch, measurement))

    def power_trace(self, horizon_s: float) -> list[tuple[float, float, float]]:
        """Piecewise-constant draw: fine-tuning runs at full power, a lone batch at its own draw, otherwise idle"""
        ft_spans = [(it.start_s, it.end_s) for it in self.ft_iterations]
        idle = idle_power_w(self.profile, self.config)
        full = full_power_w(self.profile, self.config)
        points = sorted({0.0, horizon_s, *(t for span in ft_spans for t in span), *(t for b in self.batches for t in b[:2])})
        ft_starts = [s for s, _ in ft_spans]
        batch_starts = [b[0] for b in self.batches]

        trace: list[tuple[float, float, float]] = []
        for start, end in itertools.pairwise(points):
            if end <= start:
                continue
            mid = 0.5 * (start + end)
            power = idle
            i = bisect.bisect_right(batch_starts, mid) - 1
            if i >= 0 and self.batches[i][1] > mid:
                power = self.batches[i][2]
            j = bisect.bisect_right(ft_starts, mid) - 1
            if j >= 0 and ft_spans[j][1] > mid:
                power = full
            if trace and trace[-1][2] == power and trace[-1][1] == start:
                trace[-1] = (trace[-1][0], end, power)
            else:
                trace.append((start, end, power))
        return trace

    def report(self) -> ScheduleReport:
        horizon_s = max([self.duration_s, self.now])
        trace = self.power_trace(horizon_s)
        n_requests = len(self.requests)
        n_dropped = sum(r.dropped for r in self.requests)
        n_violations = sum(r.violated for r in self.requests)
        completed = [it for it in self.ft_iterations if it.end_s <= self.now]
        makespan = completed[-1].end_s - self.ft_arrival_s if self.ft is not None and self.ft_remaining == 0 and completed else None
        return ScheduleReport(
            policy=self.policy.kind.value if self.ft is not None else "baseline",
            n_requests=n_requests,
            n_violations=n_violations,
            n_dropped=n_dropped,
            violation_rate=(n_violations + n_dropped) / n_requests if n_requests else 0.0,
            ft_iterations_completed=(self.ft.n_iterations - self.ft_remaining) if self.ft else 0,
            ft_iterations_total=self.ft.n_iterations if self.ft else 0,
            ft_makespan_s=makespan,
            energy_total_j=math.fsum((end - start) * power for start, end, power in trace),
            horizon_s=horizon_s,
            events=tuple(self.events),
            ft_iterations=tuple(self.ft_iterations),
            power_trace=tuple(trace),
            requests=tuple(self.requests),
        )


def simulate(
    profile: DeviceProfile,
    config: HardwareConfig,
    arrivals: ArrivalStream,
    ft: FinetuneSpec | None,
    policy: SchedulerPolicy,
    slo_ms: float,
    duration_s: float,
    rng: np.random.Generator,
    slo_schedule: Sequence[tuple[float, float]] | None = None,
    ft_arrival_s: float = 0.0,
) -> ScheduleReport:
    """Replay arrivals for duration_s seconds; requests that arrive in time are always served to completion"""
    validate_config(profile, config)
    if duration_s < 0:
        raise ValueError(f"duration must not be negative, got {duration_s}")
    schedule = _validate_schedule(slo_schedule if slo_schedule else [(0.0, slo_ms)])
    logging.info("Simulating %s for %.1f s: %s arrivals, %s policy, SLO %s", profile.name, duration_s, len(arrivals), policy.kind.value, schedule)
    server = _Server(profile, config, ft, policy, schedule, duration_s, ft_arrival_s, rng)
    server.run(arrivals)
    report = server.report()
    logging.info(
        "Violation rate %.4f (%s late, %s dropped of %s), %s/%s fine-tuning iterations, %.3f J",
        report.violation_rate,
        report.n_violations,
        report.n_dropped,
        report.n_requests,
        report.ft_iterations_completed,
        report.ft_iterations_total,
        report.energy_total_j,
    )
    return report


def baseline_simulate(
    profile: DeviceProfile, config: HardwareConfig, arrivals: ArrivalStream, slo_ms: float, duration_s: float, rng: np.random.Generator
) -> ScheduleReport:
    """Inference alone, no fine-tuning"""
    return simulate(profile, config, arrivals, None, SchedulerPolicy.greedy(), slo_ms, duration_s, rng)


def slo_step_scenario(
    profile: DeviceProfile,
    config: HardwareConfig,
    ft: FinetuneSpec,
    slo_schedule: Sequence[tuple[float, float]],
    arrivals: ArrivalStream,
    duration_s: float,
    rng: np.random.Generator,
    coeffs: PerfModelCoeffs,
) -> ScheduleReport:
    """Adaptive scheduling under a piecewise-constant SLO; feasibility is re-checked at every SLO change"""
    schedule = _validate_schedule(slo_schedule)
    return simulate(profile, config, arrivals, ft, SchedulerPolicy.adaptive(coeffs), schedule[0][1], duration_s, rng, slo_schedule=schedule)


def energy_comparison(
    profile: DeviceProfile,
    arrivals: ArrivalStream,
    ft: FinetuneSpec | None,
    tuned_config: HardwareConfig,
    default_config: HardwareConfig,
    policy: SchedulerPolicy,
    slo_ms: float,
    duration_s: float,
    seed: int,
) -> tuple[float, float, float]:
    """Total energy of the same replay at both configurations, and the fraction the tuned one saves"""
    tuned = simulate(profile, tuned_config, arrivals, ft, policy, slo_ms, duration_s, derive_stream(seed, "energy-comparison"))
    baseline = simulate(profile, default_config, arrivals, ft, policy, slo_ms, duration_s, derive_stream(seed, "energy-comparison"))
    savings = 1.0 - tuned.energy_total_j / baseline.energy_total_j if baseline.energy_total_j > 0 else 0.0
    logging.info("Tuned %.3f J vs default %.3f J: %.2f%% saved", tuned.energy_total_j, baseline.energy_total_j, 100.0 * savings)
    return tuned.energy_total_j, baseline.energy_total_j, savings


def write_report(report: ScheduleReport, directory: Path, stem: str = "schedule") -> None:
    directory = Path(directory)
    report.events_frame().to_csv(Path(directory, f"{stem}_events.csv"), index=False)
    report.power_frame().to_csv(Path(directory, f"{stem}_power.csv"), index=False)
    Path(directory, f"{stem}_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="UTF-8")
