"""Exact GP regression with the squared-exponential kernel.

Everything here is pure: a fitted :class:`GpPosterior` is frozen and can be
shared between runs. Arrays use the ``(n, D)`` convention for inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

VARIANCE_FLOOR = 1e-12
_JITTER_SCALE = 1e-9

JitterMode = Literal["target", "meta"]


class NumericError(RuntimeError):
    """Raised when a covariance matrix cannot be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    lengthscale: float
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    regularization: float = 0.01

    def __post_init__(self) -> None:
        for name in ("lengthscale", "signal_variance", "noise_variance", "regularization"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")

    def diag_offset(self, mode: JitterMode) -> float:
        if mode == "target":
            return self.regularization
        if mode == "meta":
            return self.noise_variance
        raise ValueError(f"unknown jitter mode {mode!r}")


@dataclass(frozen=True)
class Dataset:
    """Paired inputs ``(n, D)`` and outputs ``(n,)``."""

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if y.size != 1 or x.size == 1 else x.reshape(1, -1)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D (n, D), got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} outputs")
        if x.shape[1] < 1:
            raise ValueError("input dimension must be at least 1")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)

    @classmethod
    def empty(cls, dim: int) -> Dataset:
        return cls(np.empty((0, dim)), np.empty(0))

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.outputs.shape[0]

    def append(self, x: Sequence[float] | np.ndarray, y: float) -> Dataset:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(np.vstack([self.inputs, x]), np.append(self.outputs, float(y)))


def _as_points(x: np.ndarray | Sequence[float], dim: int | None = None) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if dim is not None and pts.shape[1] != dim:
        raise ValueError(f"expected dimension {dim}, got {pts.shape[1]}")
    return pts


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SE covariance between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    np.maximum(sq, 0.0, out=sq)
    return spec.signal_variance * np.exp(-0.5 * sq / spec.lengthscale**2)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {x2.shape[0]}")
    d = x - x2
    return float(spec.signal_variance * np.exp(-0.5 * float(d @ d) / spec.lengthscale**2))


def _cholesky(matrix: np.ndarray, jitter: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(matrix + jitter * np.eye(matrix.shape[0]))
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(matrix)
        raise NumericError(
            f"covariance not positive definite after jitter {jitter:.1e} (condition number {cond:.3e})"
        ) from exc


@dataclass(frozen=True)
class GpPosterior:
    kernel: KernelSpec
    data: Dataset
    offset: float
    factor: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.data.dim

    def predict_many(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized posterior mean and (clamped) variance at the rows of ``x``."""
        pts = _as_points(x, self.dim)
        prior_var = np.full(pts.shape[0], self.kernel.signal_variance)
        if len(self.data) == 0:
            return np.zeros(pts.shape[0]), prior_var
        k_star = kernel_matrix(self.kernel, self.data.inputs, pts)
        mean = k_star.T @ self.alpha
        v = solve_triangular(self.factor, k_star, lower=True, check_finite=False)
        var = prior_var - np.sum(v * v, axis=0)
        return mean, np.maximum(var, VARIANCE_FLOOR)

    def log_det(self) -> float:
        """log |K + cI|."""
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))


def fit(spec: KernelSpec, data: Dataset, jitter_mode: JitterMode = "target") -> GpPosterior:
    """Factorize ``K + cI`` with ``c`` = regularization (target) or noise variance (meta)."""
    offset = spec.diag_offset(jitter_mode)
    n = len(data)
    if n == 0:
        factor = np.empty((0, 0))
        alpha = np.empty(0)
    else:
        gram = kernel_matrix(spec, data.inputs, data.inputs)
        gram[np.diag_indices(n)] += offset
        factor = _cholesky(gram, _JITTER_SCALE * spec.signal_variance)
        alpha = cho_solve((factor, True), data.outputs, check_finite=False)
    factor.setflags(write=False)
    alpha.setflags(write=False)
    return GpPosterior(spec, data, offset, factor, alpha)


def predict(post: GpPosterior, x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != post.dim:
        raise ValueError(f"expected dimension {post.dim}, got {x.shape[0]}")
    mean, var = post.predict_many(x.reshape(1, -1))
    return float(mean[0]), float(var[0])


def log_marginal_likelihood(spec: KernelSpec, data: Dataset) -> float:
    """Log evidence of ``data.outputs`` under a zero-mean GP with noise ``spec.noise_variance``."""
    if len(data) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    post = fit(spec, data, "meta")
    n = len(data)
    return float(-0.5 * data.outputs @ post.alpha - 0.5 * post.log_det() - 0.5 * n * math.log(2.0 * math.pi))


def fit_hyperparameters(data: Dataset, grid: Sequence[KernelSpec]) -> KernelSpec:
    """Grid-search maximum likelihood. Ties go to the earliest grid entry."""
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    best: KernelSpec | None = None
    best_score = -math.inf
    for spec in grid:
        try:
            score = log_marginal_likelihood(spec, data)
        except NumericError:
            continue
        if best is None or score > best_score:
            best, best_score = spec, score
    if best is None:
        raise NumericError("every grid entry failed to factorize")
    return best


def gain_from_variance(variance: float, noise_variance: float) -> float:
    """One term of the online information-gain sum: 0.5 * log(1 + var / noise)."""
    return 0.5 * math.log1p(max(variance, 0.0) / noise_variance)


def information_gain_increment(post: GpPosterior, x, noise_variance: float) -> float:
    _, var = predict(post, x)
    return gain_from_variance(var, noise_variance)
