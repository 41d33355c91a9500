"""Linear interference model: co-located inference latency from inference and fine-tuning FLOPs, arithmetic intensity and batch size"""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize

from src.device_sim import (
    FT_DURATION_FACTOR,
    DeviceProfile,
    FinetuneSpec,
    HardwareConfig,
    ModelWorkloadSpec,
    default_config,
    measure,
    measure_concurrent,
    stage_times,
)

N_COEFFS: int = 6
KKT_TOLERANCE: float = 1e-8
LAYER_COLUMNS: list[str] = ["n", "c", "h", "w", "k", "p", "q", "r", "s"]
FT_BATCH_LEVELS: tuple[int, ...] = (0, 8, 16, 32, 64)
OUTPUT_DIM_LEVELS: tuple[int, ...] = (10, 100, 1000, 4000)
FT_SWEEP_ITERATIONS: int = 10


class InvalidDataError(Exception):
    pass


@dataclass(frozen=True)
class ConvLayerShape:
    n: int
    c: int
    h: int
    w: int
    k: int
    p: int
    q: int
    r: int
    s: int

    def __post_init__(self) -> None:
        for name in LAYER_COLUMNS:
            if getattr(self, name) < 1:
                raise InvalidDataError(f"layer dimension {name} must be at least 1")

    def with_batch(self, n: int) -> "ConvLayerShape":
        return ConvLayerShape(n, self.c, self.h, self.w, self.k, self.p, self.q, self.r, self.s)


@dataclass(frozen=True)
class WorkloadFeatures:
    flops_inf: float
    ai_inf: float
    flops_ft: float
    ai_ft: float
    batch_size: int

    def __post_init__(self) -> None:
        if min(self.flops_inf, self.ai_inf, self.flops_ft, self.ai_ft) < 0 or self.batch_size < 1:
            raise InvalidDataError("features must be non-negative and batch_size positive")
        if self.flops_ft == 0:
            object.__setattr__(self, "ai_ft", 0.0)

    def as_row(self) -> list[float]:
        return [1.0, self.flops_inf, self.ai_inf, self.flops_ft, self.ai_ft, float(self.batch_size)]


@dataclass(frozen=True)
class PerfModelCoeffs:
    """Intercept followed by the weights of inference FLOPs, inference AI, fine-tuning FLOPs, fine-tuning AI and batch size"""

    theta: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        if len(self.theta) != N_COEFFS:
            raise InvalidDataError(f"expected {N_COEFFS} coefficients, got {len(self.theta)}")
        if any(v < 0 or not math.isfinite(v) for v in self.theta):
            raise InvalidDataError("coefficients must be finite and non-negative")


def conv_arithmetic_intensity(shape: ConvLayerShape) -> float:
    """MACs over elements moved (input, filter, output) for one 2D convolution"""
    macs = shape.n * shape.k * shape.p * shape.q * shape.c * shape.r * shape.s
    moved = shape.n * shape.c * shape.h * shape.w + shape.k * shape.c * shape.r * shape.s + shape.n * shape.k * shape.p * shape.q
    return macs / moved


def conv_flops(shape: ConvLayerShape) -> float:
    return 2.0 * shape.n * shape.k * shape.p * shape.q * shape.c * shape.r * shape.s


def aggregate_arithmetic_intensity(layers: Sequence[ConvLayerShape], n: int | None = None) -> float:
    """Whole-network intensity: summed MACs over summed elements moved, optionally at batch n"""
    if not layers:
        raise InvalidDataError("layer list is empty")
    shapes = [layer.with_batch(n) if n is not None else layer for layer in layers]
    macs = sum(conv_flops(s) / 2.0 for s in shapes)
    moved = sum(conv_flops(s) / 2.0 / conv_arithmetic_intensity(s) for s in shapes)
    return macs / moved


def load_layers(path: Path) -> list[ConvLayerShape]:
    frame = pd.read_csv(path)
    missing = [c for c in LAYER_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidDataError(f"{path} lacks columns {missing}")
    try:
        return [ConvLayerShape(*(int(row[c]) for c in LAYER_COLUMNS)) for _, row in frame.iterrows()]
    except ValueError as e:
        raise InvalidDataError(f"{path} holds a non-integer layer dimension") from e


def design_matrix(rows: Sequence[WorkloadFeatures]) -> np.ndarray:
    return np.array([row.as_row() for row in rows], dtype=float).reshape(len(rows), N_COEFFS)


def nnls(a: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Lawson-Hanson NNLS on unit-norm columns, mapped back to the caller's units"""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    if a.ndim != 2 or y.ndim != 1 or a.shape[0] != y.shape[0] or a.shape[0] == 0:
        raise InvalidDataError(f"incompatible shapes {a.shape} and {y.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
        raise InvalidDataError("NNLS inputs must be finite")
    norms = np.linalg.norm(a, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    scaled, _ = optimize.nnls(a / norms, y, maxiter=50 * a.shape[1])
    x = scaled / norms
    return x, float(np.linalg.norm(a @ x - y))


def kkt_satisfied(a: np.ndarray, y: np.ndarray, x: np.ndarray, tolerance: float = KKT_TOLERANCE) -> bool:
    """Stationarity on the free set and dual feasibility on the active set"""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    gradient = a.T @ (a @ x - y)
    bound = tolerance * max(1.0, float(np.linalg.norm(a) * np.linalg.norm(y)))
    if np.any(x < 0):
        return False
    free = x > 0
    return bool(np.all(np.abs(gradient[free]) <= bound) and np.all(gradient[~free] >= -bound))


def nnls_fit(feature_rows: Sequence[WorkloadFeatures], latencies: Sequence[float]) -> PerfModelCoeffs:
    if not feature_rows:
        raise InvalidDataError("no training rows")
    if len(feature_rows) != len(latencies):
        raise InvalidDataError(f"{len(feature_rows)} feature rows but {len(latencies)} latencies")
    theta, residual = nnls(design_matrix(feature_rows), np.asarray(latencies, dtype=float))
    logging.info("NNLS fit on %s rows: theta=%s, residual norm %.4f", len(feature_rows), np.round(theta, 6).tolist(), residual)
    return PerfModelCoeffs(tuple(np.maximum(theta, 0.0)))


def predict(coeffs: PerfModelCoeffs, features: WorkloadFeatures) -> float:
    return float(np.dot(coeffs.theta, features.as_row()))


def inference_features(
    workload: ModelWorkloadSpec, batch_size: int, ft: FinetuneSpec | None = None, layers: Sequence[ConvLayerShape] | None = None
) -> WorkloadFeatures:
    """Features of one inference batch of `workload`, plus the co-located fine-tuning job when one is running"""
    flops_inf = batch_size * workload.flops_per_query
    if layers:
        ai_inf = aggregate_arithmetic_intensity(layers, n=batch_size)
    else:
        ai_inf = flops_inf / (workload.weight_gb + batch_size * workload.bytes_per_query)
    if ft is None or ft.is_idle:
        return WorkloadFeatures(flops_inf, ai_inf, 0.0, 0.0, batch_size)
    return WorkloadFeatures(flops_inf, ai_inf, ft.flops_per_iter, ft.ai, batch_size)


def finetune_spec_for(profile: DeviceProfile, batch_size: int, output_dim: int, n_iterations: int) -> FinetuneSpec:
    """Fine-tuning of the profile's workload: forward and backward cost three forward passes per sample"""
    head = profile.workload.with_output_dim(output_dim)
    flops = 3.0 * batch_size * head.flops_per_query
    moved_gb = 3.0 * head.weight_gb + 2.0 * batch_size * head.bytes_per_query
    per_query_ms = stage_times(profile.with_workload(head), default_config(profile)).compute_ms
    return FinetuneSpec(
        batch_size=batch_size,
        n_iterations=n_iterations,
        output_dim=output_dim,
        flops_per_iter=flops,
        ai=flops / moved_gb,
        iter_duration_ms_standalone=FT_DURATION_FACTOR * batch_size * per_query_ms,
        name=f"{profile.workload.name}-ft{batch_size}",
    )


def sweep_point(profile: DeviceProfile, index: int) -> tuple[int, int, int]:
    """(inference batch, fine-tuning batch, output dim) of sweep row index; strides cover every level within a dozen rows"""
    batches = profile.grid.batch_sizes
    inference_batch = batches[index % len(batches)]
    ft_batch = FT_BATCH_LEVELS[(3 * index + index // len(FT_BATCH_LEVELS)) % len(FT_BATCH_LEVELS)]
    output_dim = OUTPUT_DIM_LEVELS[index % len(OUTPUT_DIM_LEVELS)]
    return inference_batch, ft_batch, output_dim


def collect_training_samples(
    profile: DeviceProfile,
    n: int,
    rng: np.random.Generator,
    config: HardwareConfig | None = None,
    start: int = 0,
    layers: Sequence[ConvLayerShape] | None = None,
) -> tuple[list[WorkloadFeatures], list[float]]:
    """Measure n co-located runs at one hardware configuration while varying batch sizes and output dimension"""
    if n < N_COEFFS:
        raise InvalidDataError(f"at least {N_COEFFS} samples are needed, got {n}")
    base = config or default_config(profile)
    rows: list[WorkloadFeatures] = []
    latencies: list[float] = []
    for index in range(start, start + n):
        inference_batch, ft_batch, output_dim = sweep_point(profile, index)
        run_config = base.with_batch(inference_batch)
        if ft_batch == 0:
            head = profile.workload.with_output_dim(output_dim)
            sample = measure(profile.with_workload(head), run_config, rng)
            rows.append(inference_features(head, inference_batch, layers=layers))
        else:
            ft = finetune_spec_for(profile, ft_batch, output_dim, FT_SWEEP_ITERATIONS)
            sample = measure_concurrent(profile, run_config, ft, rng)
            rows.append(inference_features(profile.workload, inference_batch, ft, layers))
        latencies.append(sample.latency_ms)
    return rows, latencies


def median_relative_error(coeffs: PerfModelCoeffs, rows: Sequence[WorkloadFeatures], latencies: Sequence[float]) -> float:
    errors = [abs(predict(coeffs, row) - y) / y for row, y in zip(rows, latencies, strict=True)]
    return float(np.median(errors))


def save_coeffs(coeffs: PerfModelCoeffs, path: Path) -> None:
    Path(path).write_text(json.dumps(list(coeffs.theta), indent=2), encoding="UTF-8")


def load_coeffs(path: Path) -> PerfModelCoeffs:
    try:
        values = json.loads(Path(path).read_text(encoding="UTF-8"))
    except json.JSONDecodeError as e:
        raise InvalidDataError(f"{path} is not valid JSON") from e
    if not isinstance(values, list):
        raise InvalidDataError(f"{path} must hold a JSON array of {N_COEFFS} numbers")
    return PerfModelCoeffs(tuple(values))
