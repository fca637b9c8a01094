"""The outer optimization loop (RM-GP-UCB, RM-GP-TS, plain GP-UCB) and regret traces."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.spatial import cKDTree

from robust_metabo.acquisition import (
    ConfidenceParams,
    beta_t,
    build_rff_sampler,
    meta_information_gain,
    sample_function,
    tau,
    ts_select_index,
    ucb_scores,
    argmax_first,
)
from robust_metabo.gp import Dataset, KernelSpec, fit, gain_from_variance
from robust_metabo.meta import GapMode, LossForm, MetaState, MetaTask, check_simplex, step_meta_state

log = logging.getLogger(__name__)

Algorithm = Literal["rm_gp_ucb", "rm_gp_ts", "gp_ucb"]
ALGORITHMS: tuple[str, ...] = ("rm_gp_ucb", "rm_gp_ts", "gp_ucb")


class ObjectiveError(RuntimeError):
    """Raised by an objective that cannot be evaluated."""


@dataclass(frozen=True)
class Domain:
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ValueError("domain must be a nonempty (n, D) array")
        if cKDTree(pts).query_pairs(r=1e-12):
            raise ValueError("domain contains duplicate points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def grid(cls, resolution: int = 300, dim: int = 1) -> Domain:
        axis = np.linspace(0.0, 1.0, resolution)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        return cls(np.column_stack([m.reshape(-1) for m in mesh]))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


class TabulatedObjective:
    """Known function values on the domain grid. Observations add Gaussian noise."""

    def __init__(self, values: np.ndarray, noise_variance: float):
        self.values = np.asarray(values, dtype=float).reshape(-1)
        self.noise_std = math.sqrt(noise_variance)

    @property
    def optimum(self) -> float | None:
        return float(self.values.max())

    def evaluate(self, index: int, x: np.ndarray, rng: np.random.Generator) -> tuple[float, float | None]:
        f = float(self.values[index])
        return f + self.noise_std * float(rng.standard_normal()), f


class LookupObjective:
    """Recorded observations per domain point; the true optimum is unknown."""

    def __init__(self, outputs: np.ndarray):
        self.outputs = np.asarray(outputs, dtype=float).reshape(-1)

    optimum = None

    def evaluate(self, index: int, x: np.ndarray, rng: np.random.Generator) -> tuple[float, float | None]:
        return float(self.outputs[index]), None


class CallableObjective:
    """Wraps ``fn(x) -> float``; noise is added when ``noise_variance`` > 0."""

    def __init__(self, fn: Callable[[np.ndarray], float], noise_variance: float = 0.0, optimum: float | None = None):
        self.fn = fn
        self.noise_std = math.sqrt(noise_variance)
        self.optimum = optimum

    def evaluate(self, index: int, x: np.ndarray, rng: np.random.Generator) -> tuple[float, float | None]:
        try:
            f = float(self.fn(x))
        except Exception as exc:
            raise ObjectiveError(f"objective failed at {x.tolist()}: {exc}") from exc
        if not math.isfinite(f):
            raise ObjectiveError(f"objective returned {f} at {x.tolist()}")
        y = f + self.noise_std * float(rng.standard_normal()) if self.noise_std else f
        return y, (f if self.optimum is not None else None)


@dataclass(frozen=True)
class RunConfig:
    algorithm: Algorithm = "rm_gp_ucb"
    horizon: int = 50
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(0.05, 1.0, 0.01, 0.01))
    rkhs_bound: float = 1.0
    delta: float = 0.1
    fixed_beta: float | None = None
    eta: float = 0.05
    epsilon: float = 0.7
    min_decay: float = 0.7
    gap_mode: GapMode = "mean"
    loss_form: LossForm = "simplified"
    rff_features: int = 120
    resample_meta: bool = False
    n_init: int = 2
    seed: int = 0
    fixed_weights: tuple[float, ...] | None = None
    fixed_nu_schedule: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.n_init < 1:
            raise ValueError("need at least one initial observation")
        if self.fixed_weights is not None:
            check_simplex(np.asarray(self.fixed_weights, dtype=float))
        if self.fixed_nu_schedule is not None:
            sched = np.asarray(self.fixed_nu_schedule, dtype=float)
            if sched.size == 0 or np.any(sched < 0) or np.any(sched > 1) or np.any(np.diff(sched) > 0):
                raise ValueError("fixed_nu_schedule must be non-increasing values in [0, 1]")

    def confidence(self) -> ConfidenceParams:
        return ConfidenceParams(
            rkhs_bound=self.rkhs_bound,
            delta=self.delta,
            sigma=math.sqrt(self.kernel.noise_variance),
            fixed_beta=self.fixed_beta,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("fixed_weights", "fixed_nu_schedule"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        raw = dict(raw)
        raw["kernel"] = KernelSpec(**raw["kernel"])
        for key in ("fixed_weights", "fixed_nu_schedule"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class TraceRow:
    t: int
    index: int
    x: np.ndarray
    y: float
    f: float | None
    inst_regret: float | None
    cum_regret: float | None
    simple_regret: float | None
    best_observed: float
    nu: float
    weights: np.ndarray
    gaps: np.ndarray
    beta: float
    meta_branch: bool
    wall_time: float = field(compare=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceRow):
            return NotImplemented
        return (
            self.t == other.t
            and self.index == other.index
            and np.array_equal(self.x, other.x)
            and self.y == other.y
            and self.f == other.f
            and self.inst_regret == other.inst_regret
            and self.cum_regret == other.cum_regret
            and self.simple_regret == other.simple_regret
            and self.best_observed == other.best_observed
            and self.nu == other.nu
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.gaps, other.gaps)
            and self.beta == other.beta
            and self.meta_branch == other.meta_branch
        )


@dataclass
class RegretTrace:
    algorithm: str
    seed: int
    num_tasks: int
    rows: list[TraceRow] = field(default_factory=list)
    init_indices: list[int] = field(default_factory=list)
    complete: bool = True
    error: str | None = None
    target_fits: int = 0

    @property
    def truth_known(self) -> bool:
        return bool(self.rows) and self.rows[0].inst_regret is not None

    @property
    def indices(self) -> list[int]:
        return [row.index for row in self.rows]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.rows], dtype=float)

    def weight_matrix(self) -> np.ndarray:
        return np.vstack([row.weights for row in self.rows]) if self.rows else np.empty((0, self.num_tasks))


def simple_regret(trace: RegretTrace) -> float | None:
    """Smallest instantaneous regret over the run, or None without ground truth."""
    if not trace.truth_known:
        return None
    return float(min(row.inst_regret for row in trace.rows))


def cumulative_regret(trace: RegretTrace) -> float | None:
    if not trace.truth_known:
        return None
    return float(sum(row.inst_regret for row in trace.rows))


def _seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("init", "noise", "rff", "ts", "meta_samples")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def run(config: RunConfig, objective, tasks: Sequence[MetaTask], domain: Domain) -> RegretTrace:
    """Run one optimization; deterministic given ``config.seed``.

    ``objective`` exposes ``evaluate(index, x, rng) -> (y, f_or_None)`` and an
    ``optimum`` attribute (None when the ground truth is unknown).
    """
    tasks = list(tasks) if config.algorithm != "gp_ucb" else []
    m_tasks = len(tasks)
    for task in tasks:
        if task.data.dim != domain.dim:
            raise ValueError(f"meta-task {task.id} has dimension {task.data.dim}, domain has {domain.dim}")
    if config.fixed_weights is not None and len(config.fixed_weights) != m_tasks and config.algorithm != "gp_ucb":
        raise ValueError(f"fixed_weights has {len(config.fixed_weights)} entries for {m_tasks} tasks")

    streams = _seed_streams(config.seed)
    init_rng = np.random.default_rng(streams["init"])
    noise_rng = np.random.default_rng(streams["noise"])
    ts_rng = np.random.default_rng(streams["ts"])
    meta_rng = np.random.default_rng(streams["meta_samples"])
    rff_seed = _int_seed(streams["rff"])

    kernel = config.kernel
    noise = kernel.noise_variance
    pts = domain.points
    optimum = objective.optimum
    trace = RegretTrace(config.algorithm, config.seed, m_tasks)

    state = MetaState.initial(
        m_tasks,
        eta=config.eta,
        epsilon=config.epsilon,
        min_decay=config.min_decay,
        gap_mode=config.gap_mode,
        loss_form=config.loss_form,
        fixed_weights=config.fixed_weights if m_tasks else None,
    )
    conf = replace(
        config.confidence(),
        num_meta=m_tasks,
        max_meta_obs=max((t.size for t in tasks), default=0),
    )
    tau_value = tau(conf, max((meta_information_gain(t) for t in tasks), default=0.0))

    meta_means = np.empty((0, len(domain)))
    meta_stds = np.empty((0, len(domain)))
    meta_samplers = []
    meta_values = np.empty((0, len(domain)))
    if tasks:
        preds = [t.posterior.predict_many(pts) for t in tasks]
        meta_means = np.vstack([p[0] for p in preds])
        meta_stds = np.sqrt(np.vstack([p[1] for p in preds]))
        if config.algorithm == "rm_gp_ts":
            meta_samplers = [
                build_rff_sampler(t.posterior, config.rff_features, tau_value, rff_seed + 1 + i) for i, t in enumerate(tasks)
            ]
            meta_values = np.vstack([sample_function(s, meta_rng)(pts) for s in meta_samplers])

    data = Dataset.empty(domain.dim)
    post = fit(kernel, data, "target")
    gamma = 0.0
    best_observed = -math.inf
    try:
        init_idx = init_rng.choice(len(domain), size=min(config.n_init, len(domain)), replace=False)
        for idx in init_idx:
            x = pts[idx]
            y, _ = objective.evaluate(int(idx), x, noise_rng)
            gamma += gain_from_variance(post.predict_many(x)[1][0], noise)
            data = data.append(x, y)
            post = fit(kernel, data, "target")
            trace.target_fits += 1
            trace.init_indices.append(int(idx))
    except ObjectiveError as exc:
        trace.complete = False
        trace.error = str(exc)
        return trace

    cum = 0.0
    simple = math.inf
    for t in range(1, config.horizon + 1):
        started = time.perf_counter()
        beta = beta_t(replace(conf, gamma_running=gamma), t)
        if m_tasks:
            state = step_meta_state(state, tasks, post, beta, config.delta)
        if config.fixed_nu_schedule is not None and m_tasks:
            sched = config.fixed_nu_schedule
            state = replace(state, nu=float(sched[min(t, len(sched)) - 1]))

        meta_branch = False
        if config.algorithm == "rm_gp_ts":
            sampler = build_rff_sampler(post, config.rff_features, beta, rff_seed)
            if config.resample_meta and meta_samplers:
                meta_values = np.vstack([sample_function(s, meta_rng)(pts) for s in meta_samplers])
            idx, meta_branch = ts_select_index(pts, sampler, meta_values, state, int(ts_rng.integers(2**63)))
        else:
            mean, var = post.predict_many(pts)
            scores = ucb_scores(mean, np.sqrt(var), meta_means, meta_stds, state.weights, state.nu, beta, tau_value)
            idx = argmax_first(scores)

        x = pts[idx]
        try:
            y, f = objective.evaluate(idx, x, noise_rng)
        except ObjectiveError as exc:
            log.warning("run aborted at t=%d: %s", t, exc)
            trace.complete = False
            trace.error = str(exc)
            break
        gamma += gain_from_variance(post.predict_many(x)[1][0], noise)
        data = data.append(x, y)
        post = fit(kernel, data, "target")
        trace.target_fits += 1

        best_observed = max(best_observed, y)
        if optimum is not None and f is not None:
            inst = optimum - f
            cum += inst
            simple = min(simple, inst)
            regrets = (inst, cum, simple)
        else:
            regrets = (None, None, None)
        trace.rows.append(
            TraceRow(
                t=t,
                index=idx,
                x=x.copy(),
                y=y,
                f=f,
                inst_regret=regrets[0],
                cum_regret=regrets[1],
                simple_regret=regrets[2],
                best_observed=best_observed,
                nu=state.nu,
                weights=state.weights.copy(),
                gaps=state.gap_history[-1].copy() if state.gap_history else np.empty(0),
                beta=beta,
                meta_branch=meta_branch,
                wall_time=time.perf_counter() - started,
            )
        )
    return trace
