"""Gaussian-process surrogates with maximum-likelihood hyperparameters.

Inputs are min-max normalized to the unit cube and targets standardized before fitting; predictions are returned in the
original target units. The kernel is ARD squared-exponential or Matérn-5/2, with analytic gradients of the negative log
marginal likelihood so that every restart of L-BFGS-B works in log-space.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg, optimize

DEFAULT_RESTARTS: int = 8
JITTER_LADDER: tuple[float, ...] = (0.0, 1e-6, 1e-4, 1e-3)
LENGTHSCALE_BOUNDS: tuple[float, float] = (1e-2, 10.0)
SIGNAL_VARIANCE_BOUNDS: tuple[float, float] = (1e-3, 1e3)
NOISE_VARIANCE_BOUNDS: tuple[float, float] = (1e-8, 1.0)
DEFAULT_LENGTHSCALE: float = 0.5
DEFAULT_SIGNAL_VARIANCE: float = 1.0
DEFAULT_NOISE_VARIANCE: float = 1e-2
FAILED_NLL: float = 1e25
SQRT5 = math.sqrt(5.0)


class IllConditionedError(Exception):
    pass


class KernelKind(Enum):
    SE = "se"
    MATERN52 = "matern52"


@dataclass(frozen=True)
class GpHyperparams:
    lengthscales: tuple[float, ...]
    signal_variance: float
    noise_variance: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        if not self.lengthscales or min(self.lengthscales) <= 0:
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0 or self.noise_variance < 0:
            raise ValueError("signal_variance must be positive and noise_variance non-negative")

    def to_log(self) -> np.ndarray:
        # the noise can be exactly zero when set by hand; log-space starts clip it to the optimizer bound
        noise = max(self.noise_variance, NOISE_VARIANCE_BOUNDS[0])
        return np.log(np.array([*self.lengthscales, self.signal_variance, noise]))

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "GpHyperparams":
        values = np.exp(theta)
        return cls(tuple(values[:-2]), float(values[-2]), float(values[-1]))

    @classmethod
    def default(cls, dim: int) -> "GpHyperparams":
        return cls((DEFAULT_LENGTHSCALE,) * dim, DEFAULT_SIGNAL_VARIANCE, DEFAULT_NOISE_VARIANCE)


@dataclass(frozen=True, eq=False)
class GpModel:
    """A conditioned GP; training arrays are stored in normalized units"""

    training_inputs: np.ndarray
    training_targets: np.ndarray
    hyperparams: GpHyperparams
    kernel: KernelKind
    cholesky: np.ndarray
    weights: np.ndarray
    input_lower: np.ndarray
    input_scale: np.ndarray
    target_mean: float
    target_scale: float
    jitter: float

    @property
    def dim(self) -> int:
        return self.training_inputs.shape[1]

    @property
    def prior_stddev(self) -> float:
        return math.sqrt(self.hyperparams.signal_variance) * self.target_scale

    def normalize(self, queries: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(queries, dtype=float)) - self.input_lower) / self.input_scale


def _scaled_sq_distances(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Per-dimension squared distances divided by the squared lengthscale, shape (n, m, d)"""
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    return diff**2


def _kernel_from_distances(per_dim: np.ndarray, signal_variance: float, kernel: KernelKind) -> np.ndarray:
    r2 = per_dim.sum(axis=-1)
    if kernel is KernelKind.SE:
        return signal_variance * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    return signal_variance * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * np.exp(-SQRT5 * r)


def kernel_matrix(a: np.ndarray, b: np.ndarray, hyperparams: GpHyperparams, kernel: KernelKind = KernelKind.SE) -> np.ndarray:
    per_dim = _scaled_sq_distances(np.atleast_2d(a), np.atleast_2d(b), np.asarray(hyperparams.lengthscales))
    return _kernel_from_distances(per_dim, hyperparams.signal_variance, kernel)


def _kernel_gradients(per_dim: np.ndarray, k: np.ndarray, signal_variance: float, kernel: KernelKind) -> list[np.ndarray]:
    """Derivatives of the covariance with respect to each log-lengthscale and the log signal variance"""
    if kernel is KernelKind.SE:
        grads = [k * per_dim[:, :, j] for j in range(per_dim.shape[2])]
    else:
        r = np.sqrt(per_dim.sum(axis=-1))
        radial = signal_variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
        grads = [radial * per_dim[:, :, j] for j in range(per_dim.shape[2])]
    grads.append(k)
    return grads


def _factor(k: np.ndarray, noise_variance: float) -> tuple[tuple[np.ndarray, bool], float]:
    """Cholesky factor of K + noise·I, escalating jitter until the factorization succeeds"""
    identity = np.eye(k.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return linalg.cho_factor(k + (noise_variance + jitter) * identity, lower=True), jitter
        except linalg.LinAlgError:
            logging.debug("Cholesky failed with jitter %s", jitter)
    raise IllConditionedError(f"kernel matrix is not positive definite even with jitter {JITTER_LADDER[-1]}")


def _negative_lml(theta: np.ndarray, x: np.ndarray, y: np.ndarray, kernel: KernelKind) -> tuple[float, np.ndarray]:
    hyperparams = GpHyperparams.from_log(theta)
    per_dim = _scaled_sq_distances(x, x, np.asarray(hyperparams.lengthscales))
    k = _kernel_from_distances(per_dim, hyperparams.signal_variance, kernel)
    try:
        factor, _ = _factor(k, hyperparams.noise_variance)
    except IllConditionedError:
        return FAILED_NLL, np.zeros_like(theta)
    alpha = linalg.cho_solve(factor, y)
    n = len(y)
    nll = 0.5 * float(y @ alpha) + float(np.log(np.diag(factor[0])).sum()) + 0.5 * n * math.log(2 * math.pi)

    inner = np.outer(alpha, alpha) - linalg.cho_solve(factor, np.eye(n))
    grads = _kernel_gradients(per_dim, k, hyperparams.signal_variance, kernel)
    grads.append(hyperparams.noise_variance * np.eye(n))
    gradient = np.array([-0.5 * float(np.sum(inner * g)) for g in grads])
    return nll, gradient


def _normalization(x: np.ndarray, bounds: Sequence[tuple[float, float]] | None) -> tuple[np.ndarray, np.ndarray]:
    if bounds is None:
        lower, upper = x.min(axis=0), x.max(axis=0)
    else:
        if len(bounds) != x.shape[1]:
            raise ValueError(f"expected {x.shape[1]} bounds, got {len(bounds)}")
        lower = np.array([b[0] for b in bounds], dtype=float)
        upper = np.array([b[1] for b in bounds], dtype=float)
    width = upper - lower
    return lower, np.where(width > 0, width, 1.0)


def _validated(inputs: Sequence[Sequence[float]] | np.ndarray, targets: Sequence[float] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
    if x.shape[0] < 2:
        raise ValueError("at least two training points are needed")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    return x, y


def condition(
    inputs: Sequence[Sequence[float]] | np.ndarray,
    targets: Sequence[float] | np.ndarray,
    hyperparams: GpHyperparams,
    kernel: KernelKind = KernelKind.SE,
    bounds: Sequence[tuple[float, float]] | None = None,
) -> GpModel:
    """Condition a GP on data with fixed hyperparameters"""
    x, y = _validated(inputs, targets)
    if len(hyperparams.lengthscales) != x.shape[1]:
        raise ValueError(f"expected {x.shape[1]} lengthscales, got {len(hyperparams.lengthscales)}")
    lower, scale = _normalization(x, bounds)
    target_mean = float(y.mean())
    spread = float(y.std())
    target_scale = spread if spread > 0 else 1.0
    x_norm = (x - lower) / scale
    y_std = (y - target_mean) / target_scale

    k = kernel_matrix(x_norm, x_norm, hyperparams, kernel)
    factor, jitter = _factor(k, hyperparams.noise_variance)
    return GpModel(
        training_inputs=x_norm,
        training_targets=y_std,
        hyperparams=hyperparams,
        kernel=kernel,
        cholesky=np.tril(factor[0]),
        weights=linalg.cho_solve(factor, y_std),
        input_lower=lower,
        input_scale=scale,
        target_mean=target_mean,
        target_scale=target_scale,
        jitter=jitter,
    )


def fit(
    inputs: Sequence[Sequence[float]] | np.ndarray,
    targets: Sequence[float] | np.ndarray,
    restarts: int,
    rng: np.random.Generator,
    bounds: Sequence[tuple[float, float]] | None = None,
    kernel: KernelKind = KernelKind.SE,
) -> GpModel:
    """Maximum-likelihood GP fit from `restarts` starting points; the first start is the default hyperparameters"""
    if restarts < 1:
        raise ValueError(f"restarts must be at least 1, got {restarts}")
    x, y = _validated(inputs, targets)
    dim = x.shape[1]
    lower, scale = _normalization(x, bounds)
    x_norm = (x - lower) / scale
    spread = float(y.std())
    y_std = (y - y.mean()) / (spread if spread > 0 else 1.0)

    log_bounds = [tuple(np.log(LENGTHSCALE_BOUNDS))] * dim + [tuple(np.log(SIGNAL_VARIANCE_BOUNDS)), tuple(np.log(NOISE_VARIANCE_BOUNDS))]
    low = np.array([b[0] for b in log_bounds])
    high = np.array([b[1] for b in log_bounds])
    starts = [GpHyperparams.default(dim).to_log()]
    starts.extend(rng.uniform(low, high, size=(restarts - 1, dim + 2)))

    best_theta, best_nll = starts[0], math.inf
    for start in starts:
        start_nll, _ = _negative_lml(start, x_norm, y_std, kernel)
        if start_nll < best_nll:
            best_theta, best_nll = start, start_nll
        result = optimize.minimize(_negative_lml, start, args=(x_norm, y_std, kernel), jac=True, method="L-BFGS-B", bounds=log_bounds)
        if np.isfinite(result.fun) and result.fun < best_nll:
            best_theta, best_nll = np.clip(result.x, low, high), float(result.fun)

    if best_nll >= FAILED_NLL:
        raise IllConditionedError("no hyperparameter start produced a factorizable kernel matrix")
    hyperparams = GpHyperparams.from_log(best_theta)
    logging.debug("GP fit on %s points: %s (nll %.4f)", len(y), hyperparams, best_nll)
    return condition(x, y, hyperparams, kernel, bounds)


def log_marginal_likelihood(model: GpModel) -> float:
    """LML of the standardized targets under the model's hyperparameters"""
    y = model.training_targets
    return -(0.5 * float(y @ model.weights) + float(np.log(np.diag(model.cholesky)).sum()) + 0.5 * len(y) * math.log(2 * math.pi))


def posterior_many(model: GpModel, queries: Sequence[Sequence[float]] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and latent standard deviation for each query row, in target units"""
    q = model.normalize(queries)
    if q.shape[1] != model.dim:
        raise ValueError(f"query dimension {q.shape[1]} does not match model dimension {model.dim}")
    k_star = kernel_matrix(q, model.training_inputs, model.hyperparams, model.kernel)
    mean = k_star @ model.weights
    v = linalg.solve_triangular(model.cholesky, k_star.T, lower=True)
    variance = np.maximum(model.hyperparams.signal_variance - np.sum(v**2, axis=0), 0.0)
    return mean * model.target_scale + model.target_mean, np.sqrt(variance) * model.target_scale


def posterior(model: GpModel, query: Sequence[float] | np.ndarray) -> tuple[float, float]:
    mean, stddev = posterior_many(model, [query])
    return float(mean[0]), float(stddev[0])
