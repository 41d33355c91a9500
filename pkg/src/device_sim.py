"""Simulated edge device with discrete DVFS knobs.

Latency follows a roofline over GPU and memory frequency behind a utilization-driven GPU governor, preprocessing runs on the CPU
and is pipelined with compute, and power is a static draw plus one frequency power law per component. Measurements carry
multiplicative log-normal noise that shrinks with batch size.
"""

import itertools
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, replace
from pathlib import Path, PurePath

import numpy as np
import pandas as pd

PROFILE_DIR = Path(PurePath(__file__).parent, "profiles")
KNOB_WRITE_S: float = 0.017
RECONFIGURATION_CAP_S: float = 0.150
BYTES_PER_ELEMENT: dict[str, int] = {"fp16": 2, "fp32": 4}
PARETO_COLUMNS: list[str] = ["latency_ms", "energy_mj", "cpu", "gpu_min", "gpu_max", "mem", "batch"]
FT_DURATION_FACTOR: float = 1.5


class InvalidConfigurationError(Exception):
    pass


class ProfileFormatError(Exception):
    pass


class InfeasibleSloError(Exception):
    """Raised when no configuration meets the latency SLO; carries the best latency that is achievable"""

    def __init__(self, slo_ms: float, min_latency_ms: float) -> None:
        super().__init__(f"No configuration meets the {slo_ms:.3f} ms SLO, minimum achievable latency is {min_latency_ms:.3f} ms")
        self.slo_ms = slo_ms
        self.min_latency_ms = min_latency_ms


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(b > a for a, b in itertools.pairwise(values))


@dataclass(frozen=True)
class FrequencyGrid:
    """Candidate values for every knob, in MHz, plus the allowed inference batch sizes"""

    cpu_freqs: tuple[float, ...]
    gpu_freqs: tuple[float, ...]
    mem_freqs: tuple[float, ...]
    batch_sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        for name in ("cpu_freqs", "gpu_freqs", "mem_freqs", "batch_sizes"):
            values = tuple(getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise ProfileFormatError(f"{name} must not be empty")
            if not _strictly_increasing(values):
                raise ProfileFormatError(f"{name} must be strictly increasing")
            if values[0] <= 0:
                raise ProfileFormatError(f"{name} must be positive")
        if any(int(b) != b for b in self.batch_sizes):
            raise ProfileFormatError("batch_sizes must be integers")

    @property
    def size(self) -> int:
        return len(self.cpu_freqs) * len(self.gpu_freqs) * len(self.mem_freqs) * len(self.batch_sizes)


@dataclass(frozen=True, order=True)
class HardwareConfig:
    """One point of the tuning space"""

    cpu_freq: float
    gpu_min_freq: float
    gpu_max_freq: float
    mem_freq: float
    batch_size: int

    def __post_init__(self) -> None:
        if self.gpu_min_freq > self.gpu_max_freq:
            raise InvalidConfigurationError(f"gpu_min_freq {self.gpu_min_freq} exceeds gpu_max_freq {self.gpu_max_freq}")
        if self.batch_size < 1:
            raise InvalidConfigurationError(f"batch_size must be positive, got {self.batch_size}")

    def with_batch(self, batch_size: int) -> "HardwareConfig":
        return replace(self, batch_size=batch_size)

    def as_row(self) -> dict[str, float | int]:
        return {"cpu": self.cpu_freq, "gpu_min": self.gpu_min_freq, "gpu_max": self.gpu_max_freq, "mem": self.mem_freq, "batch": self.batch_size}


@dataclass(frozen=True)
class ModelWorkloadSpec:
    """Per-query cost of one model: FLOPs and memory traffic at batch 1, plus CPU preprocessing time at the fastest CPU frequency"""

    name: str
    flops_per_query: float
    bytes_per_query: float
    preprocess_ms_base: float
    params_millions: float
    precision: str = "fp16"
    head_features: int = 1280
    output_dim: int = 1000

    def __post_init__(self) -> None:
        if self.flops_per_query <= 0 or self.bytes_per_query <= 0 or self.params_millions <= 0:
            raise ProfileFormatError(f"workload {self.name}: flops, bytes and params must be positive")
        if self.preprocess_ms_base < 0:
            raise ProfileFormatError(f"workload {self.name}: preprocess_ms_base must not be negative")
        if self.precision not in BYTES_PER_ELEMENT:
            raise ProfileFormatError(f"workload {self.name}: unknown precision {self.precision}")
        if self.head_features < 1 or self.output_dim < 1:
            raise ProfileFormatError(f"workload {self.name}: head_features and output_dim must be positive")

    @property
    def weight_gb(self) -> float:
        return self.params_millions * 1e6 * BYTES_PER_ELEMENT[self.precision] / 1e9

    def with_output_dim(self, output_dim: int) -> "ModelWorkloadSpec":
        """Swap the classifier head for one with output_dim classes"""
        delta = output_dim - self.output_dim
        return replace(
            self,
            flops_per_query=self.flops_per_query + 2 * self.head_features * delta / 1e9,
            bytes_per_query=self.bytes_per_query + BYTES_PER_ELEMENT[self.precision] * self.head_features * delta / 1e9,
            output_dim=output_dim,
        )


@dataclass(frozen=True)
class FinetuneSpec:
    """A queue of fine-tuning iterations that time-share the GPU with inference"""

    batch_size: int
    n_iterations: int
    output_dim: int
    flops_per_iter: float
    ai: float
    iter_duration_ms_standalone: float
    name: str = "finetune"

    def __post_init__(self) -> None:
        if min(self.batch_size, self.n_iterations, self.output_dim) < 1:
            raise InvalidConfigurationError("fine-tuning batch_size, n_iterations and output_dim must be at least 1")
        if self.flops_per_iter < 0 or self.ai < 0 or self.iter_duration_ms_standalone <= 0:
            raise InvalidConfigurationError("fine-tuning FLOPs and AI must be non-negative and the iteration duration positive")
        if self.flops_per_iter == 0:
            object.__setattr__(self, "ai", 0.0)

    @property
    def is_idle(self) -> bool:
        return self.flops_per_iter == 0


@dataclass(frozen=True)
class InterferenceLaw:
    """Latency added to every inference batch that runs while a fine-tuning iteration holds the GPU"""

    flops_coeff: float
    ai_coeff: float

    def __post_init__(self) -> None:
        if self.flops_coeff <= 0 or self.ai_coeff <= 0:
            raise ProfileFormatError("interference coefficients must be positive")

    def inflation_ms(self, ft: FinetuneSpec) -> float:
        if ft.is_idle:
            return 0.0
        return self.flops_coeff * ft.flops_per_iter + self.ai_coeff * ft.ai


@dataclass(frozen=True)
class DeviceProfile:
    """Ground truth of the simulator: grid, workload, roofline and power parameters, noise model"""

    name: str
    grid: FrequencyGrid
    workload: ModelWorkloadSpec
    compute_throughput_coeff: float
    mem_bandwidth_coeff: float
    static_power_w: float
    gpu_power_coeff: float
    gpu_power_exponent: float
    mem_power_coeff: float
    mem_power_exponent: float
    cpu_power_coeff: float
    cpu_power_exponent: float
    governor_utilization_target: float
    noise_sigma_base: float
    noise_sigma_small_batch: float
    eval_cost_s: float
    rng_seed: int
    interference: InterferenceLaw
    tune_gpu_min: bool = False
    kernel: str = "se"
    cpu_cores: int = 4
    reference_finetune: FinetuneSpec | None = None
    reference_inflation_ms: float | None = None

    def __post_init__(self) -> None:
        positive = ("compute_throughput_coeff", "mem_bandwidth_coeff", "static_power_w", "gpu_power_coeff", "mem_power_coeff", "cpu_power_coeff")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ProfileFormatError(f"{self.name}: {name} must be positive")
        for name in ("gpu_power_exponent", "mem_power_exponent", "cpu_power_exponent"):
            if not 1 <= getattr(self, name) <= 3:
                raise ProfileFormatError(f"{self.name}: {name} must lie in [1, 3]")
        if not 0 < self.governor_utilization_target <= 1:
            raise ProfileFormatError(f"{self.name}: governor_utilization_target must lie in (0, 1]")
        for name in ("noise_sigma_base", "noise_sigma_small_batch"):
            if not 0 <= getattr(self, name) < 0.5:
                raise ProfileFormatError(f"{self.name}: {name} must lie in [0, 0.5)")
        if self.eval_cost_s < 0 or self.cpu_cores < 1:
            raise ProfileFormatError(f"{self.name}: eval_cost_s must be non-negative and cpu_cores positive")

    def with_workload(self, workload: ModelWorkloadSpec) -> "DeviceProfile":
        return replace(self, workload=workload)

    def without_noise(self) -> "DeviceProfile":
        return replace(self, noise_sigma_base=0.0, noise_sigma_small_batch=0.0)


@dataclass(frozen=True)
class Measurement:
    """Per-batch end-to-end latency and per-query energy of one evaluation"""

    latency_ms: float
    energy_per_query_mj: float
    noiseless_latency_ms: float
    mean_power_w: float
    occupancy: int


@dataclass(frozen=True)
class StageTimes:
    preprocess_ms: float
    compute_ms: float
    effective_gpu_freq: float
    utilization: float


@dataclass(frozen=True)
class ParetoPoint:
    latency_ms: float
    energy_mj: float
    config: HardwareConfig


@dataclass(frozen=True)
class OracleResult:
    best_config: HardwareConfig
    best_energy_mj: float
    best_latency_ms: float
    min_latency_ms: float
    pareto_set: tuple[ParetoPoint, ...]
    n_evaluations: int
    simulated_wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "best_config": self.best_config.as_row(),
            "best_energy_mj": self.best_energy_mj,
            "best_latency_ms": self.best_latency_ms,
            "min_latency_ms": self.min_latency_ms,
            "n_evaluations": self.n_evaluations,
            "pareto_size": len(self.pareto_set),
            "simulated_wall_time_s": self.simulated_wall_time_s,
        }


def power_w(coeff: float, exponent: float, freq_mhz: float) -> float:
    return coeff * (freq_mhz / 1000.0) ** exponent


def idle_power_w(profile: DeviceProfile, config: HardwareConfig) -> float:
    """Draw of an idle device: the governor parks the GPU at its floor"""
    return (
        profile.static_power_w
        + power_w(profile.gpu_power_coeff, profile.gpu_power_exponent, config.gpu_min_freq)
        + power_w(profile.mem_power_coeff, profile.mem_power_exponent, config.mem_freq)
    )


def full_power_w(profile: DeviceProfile, config: HardwareConfig) -> float:
    """Draw while a fine-tuning iteration holds the GPU at its ceiling"""
    return (
        profile.static_power_w
        + power_w(profile.gpu_power_coeff, profile.gpu_power_exponent, config.gpu_max_freq)
        + power_w(profile.mem_power_coeff, profile.mem_power_exponent, config.mem_freq)
    )


def default_config(profile: DeviceProfile, batch_size: int | None = None) -> HardwareConfig:
    """Stock settings: every ceiling at its maximum and the GPU floor at its minimum"""
    grid = profile.grid
    return HardwareConfig(grid.cpu_freqs[-1], grid.gpu_freqs[0], grid.gpu_freqs[-1], grid.mem_freqs[-1], batch_size or grid.batch_sizes[0])


def validate_config(profile: DeviceProfile, config: HardwareConfig) -> None:
    grid = profile.grid
    checks = [
        ("cpu_freq", config.cpu_freq, grid.cpu_freqs),
        ("gpu_min_freq", config.gpu_min_freq, grid.gpu_freqs),
        ("gpu_max_freq", config.gpu_max_freq, grid.gpu_freqs),
        ("mem_freq", config.mem_freq, grid.mem_freqs),
        ("batch_size", config.batch_size, grid.batch_sizes),
    ]
    for knob, value, allowed in checks:
        if value not in allowed:
            raise InvalidConfigurationError(f"{knob}={value} is not on the {profile.name} grid")


def _occupancy(config: HardwareConfig, occupancy: int | None) -> int:
    if occupancy is None:
        return config.batch_size
    if not 1 <= occupancy <= config.batch_size:
        raise InvalidConfigurationError(f"occupancy {occupancy} must lie in [1, {config.batch_size}]")
    return occupancy


def _stages(profile: DeviceProfile, workload: ModelWorkloadSpec, config: HardwareConfig, occupancy: int) -> StageTimes:
    memory_ms = workload.bytes_per_query / (profile.mem_bandwidth_coeff * config.mem_freq) * 1000.0
    peak_compute_ms = workload.flops_per_query / (profile.compute_throughput_coeff * config.gpu_max_freq) * 1000.0
    # the governor reads memory stalls as idle time
    utilization = peak_compute_ms / (peak_compute_ms + memory_ms)
    demand = config.gpu_max_freq * min(1.0, utilization / profile.governor_utilization_target)
    effective = min(max(demand, config.gpu_min_freq), config.gpu_max_freq)
    compute_ms = workload.flops_per_query / (profile.compute_throughput_coeff * effective) * 1000.0
    preprocess_ms = workload.preprocess_ms_base * profile.grid.cpu_freqs[-1] / config.cpu_freq
    return StageTimes(occupancy * preprocess_ms, occupancy * max(compute_ms, memory_ms), effective, utilization)


def stage_times(profile: DeviceProfile, config: HardwareConfig) -> StageTimes:
    """Noiseless per-batch preprocessing and compute time, as a pipeline profiler would report them"""
    validate_config(profile, config)
    return _stages(profile, profile.workload, config, config.batch_size)


def _pipeline_latency_ms(stages: StageTimes, occupancy: int) -> float:
    longer = max(stages.preprocess_ms, stages.compute_ms)
    shorter = min(stages.preprocess_ms, stages.compute_ms)
    return longer + shorter / occupancy


def _cpu_energy_mj(profile: DeviceProfile, config: HardwareConfig, stages: StageTimes) -> float:
    return power_w(profile.cpu_power_coeff, profile.cpu_power_exponent, config.cpu_freq) * stages.preprocess_ms


def noise_sigma(profile: DeviceProfile, batch_size: int) -> float:
    """Relative latency noise, interpolated in log2(batch) from batch 1 to the largest grid batch"""
    largest = profile.grid.batch_sizes[-1]
    if largest <= 1:
        return profile.noise_sigma_small_batch
    share = min(1.0, math.log2(batch_size) / math.log2(largest))
    return profile.noise_sigma_small_batch + (profile.noise_sigma_base - profile.noise_sigma_small_batch) * share


def _measurement(base_power_w: float, cpu_energy_mj: float, latency_ms: float, noiseless_ms: float, occupancy: int) -> Measurement:
    batch_energy_mj = base_power_w * latency_ms + cpu_energy_mj
    return Measurement(
        latency_ms=latency_ms,
        energy_per_query_mj=batch_energy_mj / occupancy,
        noiseless_latency_ms=noiseless_ms,
        mean_power_w=batch_energy_mj / latency_ms,
        occupancy=occupancy,
    )


def _evaluate(profile: DeviceProfile, config: HardwareConfig, occupancy: int | None, z: float) -> Measurement:
    validate_config(profile, config)
    batch = _occupancy(config, occupancy)
    stages = _stages(profile, profile.workload, config, batch)
    noiseless_ms = _pipeline_latency_ms(stages, batch)
    latency_ms = noiseless_ms * math.exp(noise_sigma(profile, batch) * z)
    base_power = (
        profile.static_power_w
        + power_w(profile.gpu_power_coeff, profile.gpu_power_exponent, stages.effective_gpu_freq)
        + power_w(profile.mem_power_coeff, profile.mem_power_exponent, config.mem_freq)
    )
    return _measurement(base_power, _cpu_energy_mj(profile, config, stages), latency_ms, noiseless_ms, batch)


def _evaluate_concurrent(profile: DeviceProfile, config: HardwareConfig, ft: FinetuneSpec, occupancy: int | None, z: float) -> Measurement:
    validate_config(profile, config)
    batch = _occupancy(config, occupancy)
    stages = _stages(profile, profile.workload, config, batch)
    standalone_ms = _pipeline_latency_ms(stages, batch)
    inflation_ms = profile.interference.inflation_ms(ft)
    latency_ms = standalone_ms * math.exp(noise_sigma(profile, batch) * z) + inflation_ms
    return _measurement(full_power_w(profile, config), _cpu_energy_mj(profile, config, stages), latency_ms, standalone_ms + inflation_ms, batch)


def measure(profile: DeviceProfile, config: HardwareConfig, rng: np.random.Generator, occupancy: int | None = None) -> Measurement:
    """Run one batch of inference on the simulated device; consumes exactly one normal draw from rng"""
    return _evaluate(profile, config, occupancy, float(rng.standard_normal()))


def noiseless(profile: DeviceProfile, config: HardwareConfig, occupancy: int | None = None) -> Measurement:
    """Noise-free measurement; no random stream needed"""
    return _evaluate(profile, config, occupancy, 0.0)


def measure_concurrent(
    profile: DeviceProfile, config: HardwareConfig, ft: FinetuneSpec, rng: np.random.Generator, occupancy: int | None = None
) -> Measurement:
    """Run one inference batch while a fine-tuning iteration shares the GPU"""
    if ft.is_idle:
        return measure(profile, config, rng, occupancy)
    return _evaluate_concurrent(profile, config, ft, occupancy, float(rng.standard_normal()))


def noiseless_concurrent(profile: DeviceProfile, config: HardwareConfig, ft: FinetuneSpec, occupancy: int | None = None) -> Measurement:
    if ft.is_idle:
        return noiseless(profile, config, occupancy)
    return _evaluate_concurrent(profile, config, ft, occupancy, 0.0)


def finetune_iteration_ms(profile: DeviceProfile, config: HardwareConfig, ft: FinetuneSpec) -> float:
    """Standalone iteration time at config: the reference duration stretched by the config's compute slowdown"""
    per_query = _stages(profile, profile.workload, config.with_batch(1), 1).compute_ms
    reference = _stages(profile, profile.workload, default_config(profile), 1).compute_ms
    return ft.iter_duration_ms_standalone * per_query / reference


def reconfiguration_cost_s(old: HardwareConfig, new: HardwareConfig, cpu_cores: int) -> float:
    """Each changed knob file costs one write; a CPU change rewrites one file per core"""
    files = cpu_cores if old.cpu_freq != new.cpu_freq else 0
    files += sum(
        a != b
        for a, b in [
            (old.gpu_min_freq, new.gpu_min_freq),
            (old.gpu_max_freq, new.gpu_max_freq),
            (old.mem_freq, new.mem_freq),
            (old.batch_size, new.batch_size),
        ]
    )
    return min(files * KNOB_WRITE_S, RECONFIGURATION_CAP_S)


def grid_enumerate(profile: DeviceProfile) -> list[HardwareConfig]:
    """Every configuration on the grid; the GPU floor is pinned to the grid minimum unless the profile tunes it"""
    grid = profile.grid
    if profile.tune_gpu_min:
        gpu_pairs = list(itertools.combinations_with_replacement(grid.gpu_freqs, 2))
    else:
        gpu_pairs = [(grid.gpu_freqs[0], ceiling) for ceiling in grid.gpu_freqs]
    return [
        HardwareConfig(cpu, floor, ceiling, mem, batch)
        for cpu in grid.cpu_freqs
        for floor, ceiling in gpu_pairs
        for mem in grid.mem_freqs
        for batch in grid.batch_sizes
    ]


def pareto_frontier(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Points not dominated in both latency and energy, ordered by latency"""
    frontier: list[ParetoPoint] = []
    lowest_energy = math.inf
    for point in sorted(points, key=lambda p: (p.latency_ms, p.energy_mj)):
        if point.energy_mj < lowest_energy:
            frontier.append(point)
            lowest_energy = point.energy_mj
    return frontier


def grid_search_oracle(profile: DeviceProfile, slo_ms: float, replicas: int, rng: np.random.Generator) -> OracleResult:
    """Measure every grid configuration `replicas` times and return the cheapest one that meets the SLO on average"""
    if replicas < 1:
        raise ValueError(f"replicas must be at least 1, got {replicas}")
    configs = grid_enumerate(profile)
    logging.info("Grid search over %s configurations of %s with %s replicas each", len(configs), profile.name, replicas)

    feasible: list[ParetoPoint] = []
    min_latency = math.inf
    for config in configs:
        samples = [measure(profile, config, rng) for _ in range(replicas)]
        latency = float(np.mean([m.latency_ms for m in samples]))
        energy = float(np.mean([m.energy_per_query_mj for m in samples]))
        min_latency = min(min_latency, latency)
        if latency <= slo_ms:
            feasible.append(ParetoPoint(latency, energy, config))

    if not feasible:
        raise InfeasibleSloError(slo_ms, min_latency)
    best = min(feasible, key=lambda p: p.energy_mj)
    n_evaluations = len(configs) * replicas
    logging.info("Oracle optimum %s at %.3f mJ/query, %.3f ms", best.config, best.energy_mj, best.latency_ms)
    return OracleResult(
        best_config=best.config,
        best_energy_mj=best.energy_mj,
        best_latency_ms=best.latency_ms,
        min_latency_ms=min_latency,
        pareto_set=tuple(pareto_frontier(feasible)),
        n_evaluations=n_evaluations,
        simulated_wall_time_s=n_evaluations * profile.eval_cost_s,
    )


def write_pareto_csv(points: Sequence[ParetoPoint], path: Path) -> None:
    rows = [{"latency_ms": p.latency_ms, "energy_mj": p.energy_mj, **p.config.as_row()} for p in points]
    pd.DataFrame(rows, columns=PARETO_COLUMNS).to_csv(path, index=False)


def list_profiles(directory: Path = PROFILE_DIR) -> list[str]:
    return sorted(p.stem for p in directory.glob("*.json"))


def resolve_profile_path(name_or_path: str, directory: Path = PROFILE_DIR) -> Path:
    """Accept either a file path or the name of a profile found in directory"""
    candidate = Path(name_or_path)
    if not candidate.is_file():
        candidate = Path(directory, f"{name_or_path}.json")
    logging.info("Profile path determined to be: %s", candidate)
    if not candidate.is_file():
        raise FileNotFoundError(f"Profile {name_or_path} is not found (searched {directory}).")
    return candidate


def _parse_finetune(raw: dict) -> tuple[FinetuneSpec, float | None]:
    fields = dict(raw)
    expected = fields.pop("expected_inflation_ms", None)
    return FinetuneSpec(**fields), expected


def parse_profile(raw: dict, workload: str | None = None) -> DeviceProfile:
    try:
        workloads = {name: ModelWorkloadSpec(name=name, **spec) for name, spec in raw["workloads"].items()}
        selected = workload or raw["default_workload"]
        if selected not in workloads:
            raise ProfileFormatError(f"workload {selected} is not defined, choose one of {sorted(workloads)}")
        reference_ft, expected_inflation = _parse_finetune(raw["reference_finetune"]) if raw.get("reference_finetune") else (None, None)
        physics = {key: value for key, value in raw.items() if key not in ("grid", "workloads", "default_workload", "interference", "reference_finetune")}
        return DeviceProfile(
            grid=FrequencyGrid(**raw["grid"]),
            workload=workloads[selected],
            interference=InterferenceLaw(**raw["interference"]),
            reference_finetune=reference_ft,
            reference_inflation_ms=expected_inflation,
            **physics,
        )
    except KeyError as e:
        raise ProfileFormatError(f"profile is missing field {e}") from e
    except (TypeError, InvalidConfigurationError) as e:
        raise ProfileFormatError(f"profile field is malformed: {e}") from e


def load_profile(path: Path, workload: str | None = None) -> DeviceProfile:
    try:
        raw = json.loads(Path(path).read_text(encoding="UTF-8"))
    except json.JSONDecodeError as e:
        raise ProfileFormatError(f"{path} is not valid JSON") from e
    profile = parse_profile(raw, workload)
    logging.info("Loaded profile %s with workload %s (%s grid points)", profile.name, profile.workload.name, len(grid_enumerate(profile)))
    return profile


def load_workload_names(path: Path) -> list[str]:
    return sorted(json.loads(Path(path).read_text(encoding="UTF-8"))["workloads"])


def profile_to_dict(profile: DeviceProfile) -> dict:
    """Serialize a profile in the on-disk layout; the selected workload becomes the whole catalog"""
    raw = asdict(profile)
    workload = raw.pop("workload")
    name = workload.pop("name")
    raw["workloads"] = {name: workload}
    raw["default_workload"] = name
    raw["grid"] = {key: list(values) for key, values in raw["grid"].items()}
    reference = raw.pop("reference_finetune")
    expected = raw.pop("reference_inflation_ms")
    if reference is not None:
        reference["expected_inflation_ms"] = expected
    raw["reference_finetune"] = reference
    return raw


def save_profile(profile: DeviceProfile, path: Path) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(profile), indent=2, sort_keys=True), encoding="UTF-8")
