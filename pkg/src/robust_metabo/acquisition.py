"""Query selection: weighted GP-UCB, Thompson sampling via random Fourier features,
and the confidence-width schedules feeding both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from robust_metabo.gp import GpPosterior, NumericError, _as_points
from robust_metabo.meta import MetaState, MetaTask


@dataclass(frozen=True)
class ConfidenceParams:
    """Constants of the confidence-width schedules.

    ``gamma_running`` is the online information-gain sum up to the previous
    iteration. ``fixed_beta`` bypasses the schedule entirely when set.
    """

    rkhs_bound: float = 1.0
    delta: float = 0.1
    sigma: float = 0.1
    gamma_running: float = 0.0
    num_meta: int = 0
    max_meta_obs: int = 0
    fixed_beta: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.sigma < 0 or self.rkhs_bound < 0:
            raise ValueError("sigma and rkhs_bound must be nonnegative")
        if self.gamma_running < 0:
            raise ValueError("gamma_running must be nonnegative")


def beta_t(params: ConfidenceParams, t: int) -> float:
    """``B + sigma * sqrt(2 (gamma_{t-1} + 1 + log(4 / delta)))``."""
    if t < 1:
        raise ValueError("t starts at 1")
    if params.fixed_beta is not None:
        return float(params.fixed_beta)
    return params.rkhs_bound + params.sigma * math.sqrt(
        2.0 * (params.gamma_running + 1.0 + math.log(4.0 / params.delta))
    )


def tau(params: ConfidenceParams, gamma_N: float) -> float:
    """``B + sigma * sqrt(2 (gamma_N + 1 + log(4 M / delta)))``, fixed for a whole run."""
    m = max(params.num_meta, 1)
    return params.rkhs_bound + params.sigma * math.sqrt(2.0 * (gamma_N + 1.0 + math.log(4.0 * m / params.delta)))


def meta_information_gain(task: MetaTask) -> float:
    """Information gain of a meta-task's own points, ``0.5 * log det(I + K / sigma^2)``.

    By the chain rule this equals the online sum of per-point gains taken in any order.
    """
    post = task.posterior
    n = task.size
    return 0.5 * (post.log_det() - n * math.log(post.kernel.noise_variance))


def ucb_scores(
    target_mean: np.ndarray,
    target_std: np.ndarray,
    meta_means: np.ndarray,
    meta_stds: np.ndarray,
    weights: np.ndarray,
    nu: float,
    beta: float,
    tau_value: float,
) -> np.ndarray:
    """Weighted UCB over a batch of points; meta arrays are shaped ``(M, n)``."""
    target_term = target_mean + beta * target_std
    if weights.size == 0:
        return (1.0 - nu) * target_term
    meta_term = weights @ (meta_means + tau_value * meta_stds)
    return nu * meta_term + (1.0 - nu) * target_term


def _meta_predictions(tasks: Sequence[MetaTask], pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not tasks:
        return np.empty((0, pts.shape[0])), np.empty((0, pts.shape[0]))
    means, stds = [], []
    for task in tasks:
        mu, var = task.posterior.predict_many(pts)
        means.append(mu)
        stds.append(np.sqrt(var))
    return np.vstack(means), np.vstack(stds)


def ucb_acquisition(
    x,
    target_post: GpPosterior,
    tasks: Sequence[MetaTask],
    state: MetaState,
    beta: float,
    tau: float,
) -> float:
    pts = _as_points(x, target_post.dim)
    mean, var = target_post.predict_many(pts)
    mm, ms = _meta_predictions(tasks, pts)
    return float(ucb_scores(mean, np.sqrt(var), mm, ms, state.weights, state.nu, beta, tau)[0])


TIE_TOL = 1e-12


def argmax_first(scores: np.ndarray) -> int:
    """Index of the maximum, lowest index on ties.

    Scores within ``TIE_TOL`` (relative) of the maximum count as tied, so that
    exactly symmetric candidates are not split by rounding noise.
    """
    if scores.size == 0:
        raise ValueError("empty domain")
    best = np.max(scores)
    return int(np.flatnonzero(scores >= best - TIE_TOL * max(1.0, abs(best)))[0])


def ucb_select_index(
    domain: np.ndarray,
    target_post: GpPosterior,
    tasks: Sequence[MetaTask],
    state: MetaState,
    beta: float,
    tau: float,
) -> int:
    pts = np.atleast_2d(np.asarray(domain, dtype=float))
    if pts.shape[0] == 0 or pts.size == 0:
        raise ValueError("empty domain")
    mean, var = target_post.predict_many(pts)
    mm, ms = _meta_predictions(tasks, pts)
    return argmax_first(ucb_scores(mean, np.sqrt(var), mm, ms, state.weights, state.nu, beta, tau))


def ucb_select(domain, target_post, tasks, state, beta, tau) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(domain, dtype=float))
    return pts[ucb_select_index(pts, target_post, tasks, state, beta, tau)]


# ---------------------------------------------------------------------------
# Random Fourier features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RffSampler:
    """Weight-space posterior of a GP under a random Fourier feature map.

    Features are ``sqrt(2/m) cos(S x + b)`` rescaled so that every feature
    vector has squared norm ``signal_variance``.
    """

    spectral_vectors: np.ndarray = field(repr=False)
    phases: np.ndarray = field(repr=False)
    signal_variance: float
    weight_mean: np.ndarray = field(repr=False)
    weight_cov_factor: np.ndarray = field(repr=False)

    @property
    def num_features(self) -> int:
        return self.phases.shape[0]

    def features(self, x) -> np.ndarray:
        pts = _as_points(x, self.spectral_vectors.shape[1])
        raw = math.sqrt(2.0 / self.num_features) * np.cos(pts @ self.spectral_vectors.T + self.phases)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        # cos features vanish together only on a measure-zero set; fall back to the raw row
        norms[norms == 0.0] = 1.0
        return raw * (math.sqrt(self.signal_variance) / norms)


@dataclass(frozen=True)
class SampledFunction:
    weights: np.ndarray
    sampler: RffSampler = field(repr=False)

    def __call__(self, x) -> np.ndarray:
        return self.sampler.features(x) @ self.weights


def draw_spectrum(dim: int, m: int, lengthscale: float, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    spectral = rng.normal(0.0, 1.0 / lengthscale, size=(m, dim))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=m)
    return spectral, phases


def build_rff_sampler(post: GpPosterior, m: int = 120, scale: float = 1.0, rng_seed: int = 0) -> RffSampler:
    """Fit the RFF weight posterior ``N(Sigma Phi^T y, scale^2 sigma^2 Sigma)``
    with ``Sigma = (Phi^T Phi + sigma^2 I)^{-1}``."""
    if m < 1:
        raise ValueError("need at least one feature")
    kernel = post.kernel
    spectral, phases = draw_spectrum(post.dim, m, kernel.lengthscale, rng_seed)
    proto = RffSampler(spectral, phases, kernel.signal_variance, np.zeros(m), np.zeros((m, m)))
    sigma2 = kernel.noise_variance
    if len(post.data) == 0:
        precision = sigma2 * np.eye(m)
        rhs = np.zeros(m)
    else:
        phi = proto.features(post.data.inputs)
        precision = phi.T @ phi + sigma2 * np.eye(m)
        rhs = phi.T @ post.data.outputs
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise NumericError("RFF precision matrix is not positive definite") from exc
    mean = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True), lower=False)
    # Sigma = L^{-T} L^{-1}, so L^{-T} is a square-root factor of Sigma
    inv_lt = solve_triangular(chol.T, np.eye(m), lower=False)
    factor = scale * math.sqrt(sigma2) * inv_lt
    return RffSampler(spectral, phases, kernel.signal_variance, mean, factor)


def sample_function(sampler: RffSampler, rng_seed: int | np.random.Generator) -> SampledFunction:
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(sampler.num_features)
    return SampledFunction(sampler.weight_mean + sampler.weight_cov_factor @ z, sampler)


def ts_select_index(
    domain: np.ndarray,
    target_sampler: RffSampler,
    meta_values: np.ndarray,
    state: MetaState,
    rng_seed: int,
) -> tuple[int, bool]:
    """Thompson-sampling choice over ``domain``.

    ``meta_values`` holds each pre-drawn meta sample evaluated on the domain,
    shaped ``(M, n)``. Returns the index and whether the meta branch was taken.
    """
    pts = np.atleast_2d(np.asarray(domain, dtype=float))
    if pts.shape[0] == 0 or pts.size == 0:
        raise ValueError("empty domain")
    rng = np.random.default_rng(rng_seed)
    use_meta = state.num_tasks > 0 and rng.random() < state.nu
    if use_meta:
        return argmax_first(state.weights @ meta_values), True
    f = sample_function(target_sampler, rng)
    return argmax_first(f(pts)), False


def ts_select(
    domain,
    target_sampler: RffSampler,
    meta_samples: Sequence[SampledFunction],
    state: MetaState,
    rng_seed: int,
) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(domain, dtype=float))
    if len(meta_samples) != state.num_tasks:
        raise ValueError("need one meta sample per meta-task")
    meta_values = np.vstack([s(pts) for s in meta_samples]) if meta_samples else np.empty((0, pts.shape[0]))
    idx, _ = ts_select_index(pts, target_sampler, meta_values, state, rng_seed)
    return pts[idx]
