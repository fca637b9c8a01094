"""Meta-task bookkeeping: gap bounds, FTRL meta-weights and the meta-influence decay.

Each iteration of the optimizer calls :func:`step_meta_state` once before
choosing a query. The function is pure; it returns a fresh :class:`MetaState`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from robust_metabo.gp import Dataset, GpPosterior, KernelSpec, fit

GapMode = Literal["max", "mean"]
LossForm = Literal["simplified", "full"]


@dataclass(frozen=True)
class MetaTask:
    """A previously solved task with a surrogate fitted once on its own data.

    ``true_gap`` is only known for synthetic tasks and is kept for validation.
    """

    id: int
    data: Dataset
    posterior: GpPosterior = field(repr=False)
    true_gap: float | None = None

    @classmethod
    def from_data(cls, task_id: int, data: Dataset, kernel: KernelSpec, true_gap: float | None = None) -> MetaTask:
        if len(data) == 0:
            raise ValueError(f"meta-task {task_id} has no observations")
        return cls(task_id, data, fit(kernel, data, "meta"), true_gap)

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class GapBound:
    task_id: int
    value: float
    noise_correction: float


@dataclass(frozen=True)
class MetaState:
    weights: np.ndarray
    nu: float
    cumulative_losses: np.ndarray
    eta: float
    epsilon: float
    min_decay: float
    gap_mode: GapMode = "mean"
    loss_form: LossForm = "simplified"
    t: int = 0
    gap_history: tuple[np.ndarray, ...] = ()
    fixed_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.min_decay < 1.0:
            raise ValueError("min_decay (r) must lie in (0, 1)")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must lie in [0, 1], got {self.nu}")
        if self.gap_mode not in ("max", "mean"):
            raise ValueError(f"unknown gap mode {self.gap_mode!r}")
        if self.loss_form not in ("simplified", "full"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")

    @classmethod
    def initial(
        cls,
        num_tasks: int,
        eta: float,
        epsilon: float = 0.7,
        min_decay: float = 0.7,
        gap_mode: GapMode = "mean",
        loss_form: LossForm = "simplified",
        fixed_weights: Sequence[float] | None = None,
    ) -> MetaState:
        """State before the first iteration. With no meta-tasks the meta term is switched off."""
        fixed = None
        if fixed_weights is not None:
            fixed = np.asarray(fixed_weights, dtype=float)
            if fixed.shape != (num_tasks,):
                raise ValueError(f"fixed_weights has length {fixed.size}, expected {num_tasks}")
            check_simplex(fixed)
        weights = fixed.copy() if fixed is not None else np.full(num_tasks, 1.0 / max(num_tasks, 1))
        return cls(
            weights=weights,
            nu=1.0 if num_tasks else 0.0,
            cumulative_losses=np.zeros(num_tasks),
            eta=eta,
            epsilon=epsilon,
            min_decay=min_decay,
            gap_mode=gap_mode,
            loss_form=loss_form,
            fixed_weights=fixed,
        )

    @property
    def num_tasks(self) -> int:
        return self.weights.shape[0]


def check_simplex(weights: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(weights < 0) or abs(float(np.sum(weights)) - 1.0) > tol:
        raise ValueError(f"weights are not on the probability simplex: {weights}")


def confidence_bounds(target_post: GpPosterior, x, beta_next: float) -> tuple[float, float]:
    u, l = confidence_bounds_many(target_post, np.atleast_2d(np.asarray(x, dtype=float)), beta_next)
    return float(u[0]), float(l[0])


def confidence_bounds_many(target_post: GpPosterior, x: np.ndarray, beta_next: float) -> tuple[np.ndarray, np.ndarray]:
    if beta_next < 0:
        raise ValueError("beta must be nonnegative")
    mean, var = target_post.predict_many(x)
    width = beta_next * np.sqrt(var)
    return mean + width, mean - width


def noise_correction(noise_variance: float, total_meta_obs: int, delta: float) -> float:
    return math.sqrt(2.0 * noise_variance * math.log(8.0 * total_meta_obs / delta))


def estimate_gap_bound(
    task: MetaTask,
    target_post: GpPosterior,
    beta_next: float,
    delta: float,
    total_meta_obs: int,
    mode: GapMode = "mean",
) -> GapBound:
    """High-probability upper bound on the gap between the target and ``task``.

    Each meta-observation is compared with the target's confidence band at the
    same input; the per-point deviations are aggregated by ``max`` or by the
    empirical mean, and a noise term covering all meta-observations is added.
    """
    if task.size < 1:
        raise ValueError("task has no observations")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    upper, lower = confidence_bounds_many(target_post, task.data.inputs, beta_next)
    y = task.data.outputs
    deviation = np.maximum(np.abs(y - upper), np.abs(y - lower))
    agg = float(np.max(deviation)) if mode == "max" else float(np.mean(deviation))
    correction = noise_correction(target_post.kernel.noise_variance, total_meta_obs, delta)
    return GapBound(task.id, correction + agg, correction)


def loss_vector(
    gaps: Sequence[GapBound],
    task_sizes: Sequence[int],
    sigma2: float,
    delta: float,
    simplified: bool = False,
) -> np.ndarray:
    """Per-task linear losses for the weight learner.

    The full form is ``N_i * (2 * sqrt(2 sigma2 log(8 N_i / delta)) + gap_i)``.
    The simplified form ``N * gap_i`` uses ``N = max N_i``; it differs from the
    full form by a task-independent constant when all ``N_i`` are equal.
    """
    if len(gaps) != len(task_sizes):
        raise ValueError("gaps and task_sizes have different lengths")
    d = np.array([g.value for g in gaps], dtype=float)
    sizes = np.asarray(task_sizes, dtype=float)
    if simplified:
        return (sizes.max() if sizes.size else 0.0) * d
    noise = 2.0 * np.sqrt(2.0 * sigma2 * np.log(8.0 * sizes / delta))
    return sizes * (noise + d)


def ftrl_update(cumulative_losses: np.ndarray, eta: float) -> np.ndarray:
    """Entropy-regularized FTRL on the simplex: ``softmax(-eta * cumulative_losses)``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    losses = np.asarray(cumulative_losses, dtype=float)
    if losses.size == 0:
        return losses.copy()
    z = -eta * losses
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def nu_update(state: MetaState, weighted_gap: float) -> float:
    """Shrink nu by ``min(r, weighted_gap ** -epsilon)``; a zero gap shrinks by exactly ``r``."""
    if weighted_gap < 0:
        raise ValueError("weighted gap must be nonnegative")
    if weighted_gap == 0.0:
        factor = state.min_decay
    else:
        factor = min(state.min_decay, weighted_gap ** (-state.epsilon))
    return float(min(1.0, max(0.0, state.nu * factor)))


def step_meta_state(
    state: MetaState,
    tasks: Sequence[MetaTask],
    target_post: GpPosterior,
    beta_next: float,
    delta: float,
) -> MetaState:
    """Advance the meta state by one iteration.

    The gap bounds computed from the current target posterior are recorded and
    added to the cumulative losses. On the first iteration weights stay uniform
    and nu stays at 1; afterwards weights come from FTRL over all recorded
    losses and nu decays with the weighted gap.
    """
    if len(tasks) != state.num_tasks:
        raise ValueError(f"state tracks {state.num_tasks} tasks, got {len(tasks)}")
    t = state.t + 1
    if not tasks:
        return replace(state, t=t, nu=0.0, gap_history=state.gap_history + (np.empty(0),))

    total = sum(task.size for task in tasks)
    gaps = [estimate_gap_bound(task, target_post, beta_next, delta, total, state.gap_mode) for task in tasks]
    values = np.array([g.value for g in gaps])
    losses = loss_vector(
        gaps,
        [task.size for task in tasks],
        target_post.kernel.noise_variance,
        delta,
        simplified=state.loss_form == "simplified",
    )
    cumulative = state.cumulative_losses + losses

    if t == 1:
        weights = state.weights.copy() if state.fixed_weights is not None else np.full(len(tasks), 1.0 / len(tasks))
        nu = 1.0
    else:
        weights = state.fixed_weights.copy() if state.fixed_weights is not None else ftrl_update(cumulative, state.eta)
        nu = nu_update(state, float(weights @ values))

    return replace(
        state,
        weights=weights,
        nu=nu,
        cumulative_losses=cumulative,
        t=t,
        gap_history=state.gap_history + (values,),
    )
