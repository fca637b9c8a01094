"""Synthetic GP benchmark, multi-seed experiments, meta-task files and report export."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from robust_metabo.gp import Dataset, KernelSpec, NumericError, kernel_matrix
from robust_metabo.meta import MetaTask
from robust_metabo.optimizer import Domain, RegretTrace, RunConfig, TabulatedObjective, run

log = logging.getLogger(__name__)

CSV_FIXED_COLUMNS = [
    "seed", "algorithm", "t", "x", "y", "inst_regret", "cum_regret", "simple_regret", "nu", "beta",
]
CURVES = ("simple_regret", "cum_regret", "nu")


class RecordError(ValueError):
    """A meta-task record is malformed."""


@dataclass(frozen=True)
class SyntheticSpec:
    resolution: int = 300
    dim: int = 1
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(0.05, 1.0, 0.01, 0.01))
    task_sizes: tuple[int, ...] = (20, 20, 20, 20)
    task_gaps: tuple[float, ...] = (0.05, 0.05, 4.0, 4.0)
    noise_variance: float = 0.01
    base_seed: int = 0

    def __post_init__(self) -> None:
        if len(self.task_sizes) != len(self.task_gaps):
            raise ValueError("task_sizes and task_gaps must have the same length")
        if any(n < 1 for n in self.task_sizes):
            raise ValueError("every meta-task needs at least one observation")
        if any(d < 0 for d in self.task_gaps):
            raise ValueError("function gaps must be nonnegative")
        if self.resolution < 1:
            raise ValueError("grid resolution must be positive")

    @property
    def num_tasks(self) -> int:
        return len(self.task_sizes)

    def domain(self) -> Domain:
        return Domain.grid(self.resolution, self.dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping) -> SyntheticSpec:
        raw = dict(raw)
        raw["kernel"] = KernelSpec(**raw["kernel"])
        raw["task_sizes"] = tuple(raw["task_sizes"])
        raw["task_gaps"] = tuple(raw["task_gaps"])
        return cls(**raw)


@dataclass(frozen=True)
class TabulatedFunction:
    domain: Domain
    values: np.ndarray


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def sample_target_function(spec: SyntheticSpec, seed: int) -> TabulatedFunction:
    """One exact draw from the GP prior over the whole grid."""
    domain = spec.domain()
    cov = kernel_matrix(spec.kernel, domain.points, domain.points)
    cov[np.diag_indices_from(cov)] += 1e-9
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("prior covariance over the grid is not positive definite") from exc
    z = np.random.default_rng(seed).standard_normal(len(domain))
    return TabulatedFunction(domain, chol @ z)


def make_meta_task(
    target: TabulatedFunction,
    d_i: float,
    N_i: int,
    noise_variance: float,
    seed: int,
    task_id: int = 0,
    kernel: KernelSpec | None = None,
) -> MetaTask:
    """Perturb the target by Uniform(-d_i, d_i) at N_i random grid points, then add noise.

    The realized gap ``max |f_i - f|`` is stored on the task as ``true_gap``.
    """
    if N_i < 1:
        raise ValueError("N_i must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(target.domain), size=N_i)
    shift = rng.uniform(-d_i, d_i, size=N_i) if d_i > 0 else np.zeros(N_i)
    meta_f = target.values[idx] + shift
    y = meta_f + math.sqrt(noise_variance) * rng.standard_normal(N_i)
    data = Dataset(target.domain.points[idx], y)
    if kernel is None:
        kernel = KernelSpec(0.05, 1.0, noise_variance, noise_variance)
    true_gap = float(np.max(np.abs(meta_f - target.values[idx])))
    return MetaTask.from_data(task_id, data, kernel, true_gap)


def synthetic_problem(spec: SyntheticSpec, seed: int) -> tuple[TabulatedFunction, list[MetaTask]]:
    target = sample_target_function(spec, int(_rng(spec.base_seed, seed, 0).integers(2**63)))
    tasks = [
        make_meta_task(
            target, d, n, spec.noise_variance, int(_rng(spec.base_seed, seed, 1, i).integers(2**63)), i, spec.kernel
        )
        for i, (n, d) in enumerate(zip(spec.task_sizes, spec.task_gaps))
    ]
    return target, tasks


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    spec: SyntheticSpec
    variants: dict[str, RunConfig]
    seeds: list[int]
    traces: dict[tuple[str, int], RegretTrace] = field(default_factory=dict)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def ok_traces(self, variant: str) -> list[RegretTrace]:
        return [
            self.traces[(variant, s)]
            for s in self.seeds
            if (variant, s) in self.traces and (variant, s) not in self.failures
        ]

    def matrix(self, variant: str, curve: str) -> np.ndarray:
        """``(num_seeds, T)`` array of one curve; ``omega_<i>`` selects a weight column."""
        traces = self.ok_traces(variant)
        if curve.startswith("omega_"):
            i = int(curve.split("_", 1)[1])
            return np.vstack([tr.weight_matrix()[:, i] for tr in traces])
        return np.vstack([tr.column(curve) for tr in traces])

    def curve(self, variant: str, curve: str) -> tuple[np.ndarray, np.ndarray]:
        return mean_stderr(self.matrix(variant, curve))

    def aggregates(self) -> dict[str, list[list[float]]]:
        out: dict[str, list[list[float]]] = {}
        for variant in self.variants:
            traces = self.ok_traces(variant)
            if not traces:
                continue
            names = [c for c in CURVES if traces[0].truth_known or c == "nu"]
            names += [f"omega_{i}" for i in range(traces[0].num_tasks)]
            for name in names:
                mean, se = self.curve(variant, name)
                out[f"{variant}/{name}"] = [[float(a), float(b)] for a, b in zip(mean, se)]
        return out


def mean_stderr(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and standard errors ``std(ddof=1) / sqrt(n)``; zero error for one row."""
    values = np.atleast_2d(values)
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, values.std(axis=0, ddof=1) / math.sqrt(n)


def _run_seed(spec: SyntheticSpec, variants: Mapping[str, RunConfig], seed: int):
    target, tasks = synthetic_problem(spec, seed)
    objective = TabulatedObjective(target.values, spec.noise_variance)
    results = {}
    for name, cfg in variants.items():
        try:
            results[name] = (run(replace(cfg, seed=seed), objective, tasks, target.domain), None)
        except Exception as exc:  # one failed run must not sink the sweep
            log.exception("variant %s seed %d failed", name, seed)
            results[name] = (None, f"{type(exc).__name__}: {exc}")
    return seed, results


def run_experiment(
    spec: SyntheticSpec,
    run_config: RunConfig | Mapping[str, RunConfig],
    num_seeds: int,
    workers: int = 1,
) -> ExperimentReport:
    """Run every variant on ``num_seeds`` fresh synthetic problems.

    All variants share a seed's target function, meta-tasks, initial points and
    noise stream, so comparisons across variants are paired.
    """
    if num_seeds < 1:
        raise ValueError("num_seeds must be at least 1")
    variants = dict(run_config) if isinstance(run_config, Mapping) else {run_config.algorithm: run_config}
    seeds = list(range(num_seeds))
    report = ExperimentReport(spec, variants, seeds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_seed, [spec] * num_seeds, [variants] * num_seeds, seeds))
    else:
        outcomes = [_run_seed(spec, variants, s) for s in seeds]
    for seed, results in sorted(outcomes, key=lambda item: item[0]):
        for name, (trace, err) in results.items():
            if trace is not None:
                report.traces[(name, seed)] = trace
                if not trace.complete:
                    report.failures[(name, seed)] = trace.error or "incomplete trace"
            else:
                report.failures[(name, seed)] = err
    return report


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def save_meta_tasks(tasks: Sequence[MetaTask], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            record = {
                "id": task.id,
                "inputs": task.data.inputs.tolist(),
                "outputs": task.data.outputs.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def _parse_record(raw: object, lineno: int) -> tuple[int, np.ndarray, np.ndarray]:
    where = f"record {lineno}"
    if not isinstance(raw, dict):
        raise RecordError(f"{where}: expected a JSON object")
    for key in ("id", "inputs", "outputs"):
        if key not in raw:
            raise RecordError(f"{where}: missing field '{key}'")
    if not isinstance(raw["id"], int) or isinstance(raw["id"], bool):
        raise RecordError(f"{where}: field 'id' must be an integer")
    inputs, outputs = raw["inputs"], raw["outputs"]
    if not isinstance(inputs, list) or not all(isinstance(row, list) and row for row in inputs):
        raise RecordError(f"{where}: field 'inputs' must be a list of nonempty vectors")
    if not isinstance(outputs, list):
        raise RecordError(f"{where}: field 'outputs' must be a list of numbers")
    dims = {len(row) for row in inputs}
    if len(dims) > 1:
        raise RecordError(f"{where}: field 'inputs' mixes dimensions {sorted(dims)}")
    try:
        x = np.array(inputs, dtype=float)
        y = np.array(outputs, dtype=float)
    except (TypeError, ValueError) as exc:
        raise RecordError(f"{where}: non-numeric value ({exc})") from exc
    if y.ndim != 1 or (x.size and x.shape[0] != y.shape[0]):
        raise RecordError(f"{where}: field 'outputs' length does not match 'inputs'")
    if y.size == 0:
        raise RecordError(f"{where}: field 'inputs' is empty")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise RecordError(f"{where}: non-finite value")
    return raw["id"], x, y


def load_meta_tasks(path: str | Path, kernel: KernelSpec) -> list[MetaTask]:
    """Read line-delimited JSON meta-task records and fit each surrogate once."""
    parsed = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"record {lineno}: invalid JSON ({exc.msg})") from exc
            parsed.append(_parse_record(raw, lineno))
    dims = {x.shape[1] for _, x, _ in parsed}
    if len(dims) > 1:
        raise ValueError(f"meta-tasks have inconsistent input dimensions {sorted(dims)}")
    return [MetaTask.from_data(task_id, Dataset(x, y), kernel) for task_id, x, y in parsed]


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _fmt_x(x: np.ndarray) -> str:
    return ";".join(repr(float(v)) for v in x)


def write_traces_csv(report: ExperimentReport, path: Path) -> int:
    num_tasks = report.spec.num_tasks
    header = CSV_FIXED_COLUMNS + [f"omega_{i}" for i in range(num_tasks)]
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for variant in report.variants:
            for seed in report.seeds:
                trace = report.traces.get((variant, seed))
                if trace is None:
                    continue
                for row in trace.rows:
                    weights = list(row.weights) if row.weights.size else [None] * num_tasks
                    writer.writerow(
                        [seed, variant, row.t, _fmt_x(row.x), _fmt(row.y), _fmt(row.inst_regret),
                         _fmt(row.cum_regret), _fmt(row.simple_regret), _fmt(row.nu), _fmt(row.beta)]
                        + [_fmt(w) for w in weights]
                    )
                    count += 1
    return count


def manifest(report: ExperimentReport) -> dict:
    from robust_metabo import __version__

    return {
        "library_version": __version__,
        "spec": report.spec.to_dict(),
        "variants": {name: cfg.to_dict() for name, cfg in report.variants.items()},
        "seeds": report.seeds,
        "num_seeds": len(report.seeds),
        "failures": {f"{v}/{s}": msg for (v, s), msg in report.failures.items()},
    }


def export_report(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write ``traces.csv``, ``aggregate.json`` and ``manifest.json`` into ``out_dir``."""
    if not report.traces:
        raise ValueError("report has no traces")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "traces": out / "traces.csv",
        "aggregate": out / "aggregate.json",
        "manifest": out / "manifest.json",
    }
    write_traces_csv(report, paths["traces"])
    paths["aggregate"].write_text(json.dumps(report.aggregates(), indent=1))
    paths["manifest"].write_text(json.dumps(manifest(report), indent=2))
    return paths


def replay_manifest(path: str | Path, workers: int = 1) -> ExperimentReport:
    raw = json.loads(Path(path).read_text())
    spec = SyntheticSpec.from_dict(raw["spec"])
    variants = {name: RunConfig.from_dict(cfg) for name, cfg in raw["variants"].items()}
    return run_experiment(spec, variants, int(raw["num_seeds"]), workers=workers)


def aggregate_traces_csv(path: str | Path) -> dict[str, list[list[float]]]:
    """Recompute the aggregate curves from a raw traces CSV."""
    rows: dict[tuple[str, str], dict[int, dict[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        omega_cols = [c for c in reader.fieldnames or [] if c.startswith("omega_")]
        for rec in reader:
            for name in CURVES + tuple(omega_cols):
                if rec[name] == "":
                    continue
                series = rows.setdefault((rec["algorithm"], name), {})
                series.setdefault(int(rec["seed"]), {})[int(rec["t"])] = float(rec[name])
    out = {}
    for (variant, name), by_seed in rows.items():
        seeds = sorted(by_seed)
        horizon = sorted(by_seed[seeds[0]])
        mat = np.array([[by_seed[s][t] for t in horizon] for s in seeds])
        mean, se = mean_stderr(mat)
        out[f"{variant}/{name}"] = [[float(a), float(b)] for a, b in zip(mean, se)]
    return out
