"""Command-line entry point: ``robust-metabo {synthetic,run-data,export-only,replay}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from robust_metabo.bench import (
    ExperimentReport,
    RecordError,
    SyntheticSpec,
    aggregate_traces_csv,
    export_report,
    load_meta_tasks,
    replay_manifest,
    run_experiment,
)
from robust_metabo.gp import KernelSpec
from robust_metabo.optimizer import ALGORITHMS, Domain, LookupObjective, RunConfig, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which we reserve for runtime failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algo", action="append", choices=ALGORITHMS, help="repeatable; default rm_gp_ucb and gp_ucb")
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--eta", type=float, default=None, help="FTRL learning rate (default 1/N)")
    p.add_argument("--epsilon", type=float, default=0.7)
    p.add_argument("--r", type=float, default=0.7, dest="min_decay")
    p.add_argument("--gap-mode", choices=("mean", "max"), default="mean")
    p.add_argument("--loss-form", choices=("simplified", "full"), default="simplified")
    p.add_argument("--fixed-weights", default=None, help="'uniform' or comma-separated simplex weights")
    p.add_argument("--fixed-beta", type=float, default=None)
    p.add_argument("--rkhs-bound", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--rff-features", type=int, default=120)
    p.add_argument("--resample-meta", action="store_true")
    p.add_argument("--lengthscale", type=float, default=0.05)
    p.add_argument("--signal-variance", type=float, default=1.0)
    p.add_argument("--noise-variance", type=float, default=0.01)
    p.add_argument("--regularization", type=float, default=None, help="target-GP diagonal term (default: noise variance)")
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-metabo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    syn = sub.add_parser("synthetic", help="benchmark on functions drawn from a GP prior")
    _add_run_flags(syn)
    syn.add_argument("--seeds", type=int, default=20)
    syn.add_argument("--base-seed", type=int, default=0)
    syn.add_argument("--gaps", type=_floats, default=(0.05, 0.05, 4.0, 4.0))
    syn.add_argument("--sizes", type=_ints, default=None, help="meta-task sizes (default 20 each)")
    syn.add_argument("--resolution", type=int, default=300)
    syn.add_argument("--dim", type=int, default=1)
    syn.add_argument("--workers", type=int, default=1)

    data = sub.add_parser("run-data", help="optimize over a recorded lookup table")
    _add_run_flags(data)
    data.add_argument("--meta-file", type=Path, required=True)
    data.add_argument("--objective-file", type=Path, required=True)
    data.add_argument("--seed", type=int, default=0)

    exp = sub.add_parser("export-only", help="recompute aggregate.json from an existing traces.csv")
    exp.add_argument("--traces", type=Path, required=True)
    exp.add_argument("--out", type=Path, required=True)

    rep = sub.add_parser("replay", help="rerun an experiment from its manifest.json")
    rep.add_argument("--manifest", type=Path, required=True)
    rep.add_argument("--out", type=Path, required=True)
    rep.add_argument("--workers", type=int, default=1)
    return parser


def _kernel(args) -> KernelSpec:
    reg = args.regularization if args.regularization is not None else args.noise_variance
    return KernelSpec(args.lengthscale, args.signal_variance, args.noise_variance, reg)


def _fixed_weights(text: str | None, num_tasks: int) -> tuple[float, ...] | None:
    if text is None:
        return None
    if text == "uniform":
        return tuple([1.0 / num_tasks] * num_tasks)
    weights = _floats(text)
    if len(weights) != num_tasks:
        raise ConfigError(f"--fixed-weights has {len(weights)} entries for {num_tasks} meta-tasks")
    return weights


def _configs(args, num_tasks: int, max_size: int) -> dict[str, RunConfig]:
    eta = args.eta if args.eta is not None else 1.0 / max(max_size, 1)
    fixed = _fixed_weights(args.fixed_weights, num_tasks)
    base = RunConfig(
        horizon=args.horizon,
        kernel=_kernel(args),
        rkhs_bound=args.rkhs_bound,
        delta=args.delta,
        fixed_beta=args.fixed_beta,
        eta=eta,
        epsilon=args.epsilon,
        min_decay=args.min_decay,
        gap_mode=args.gap_mode,
        loss_form=args.loss_form,
        rff_features=args.rff_features,
        resample_meta=args.resample_meta,
        fixed_weights=fixed,
    )
    algos = args.algo or ["rm_gp_ucb", "gp_ucb"]
    return {a: replace(base, algorithm=a) for a in dict.fromkeys(algos)}


def _summary(report: ExperimentReport) -> str:
    lines = []
    for variant in report.variants:
        traces = report.ok_traces(variant)
        if traces and traces[0].truth_known:
            s = report.matrix(variant, "simple_regret")[:, -1]
            lines.append(f"{variant}: mean simple regret {s.mean():.4f} over {len(traces)} seeds")
    return "\n".join(lines)


def _cmd_synthetic(args) -> int:
    sizes = args.sizes or tuple([20] * len(args.gaps))
    kernel = _kernel(args)
    spec = SyntheticSpec(
        resolution=args.resolution,
        dim=args.dim,
        kernel=kernel,
        task_sizes=tuple(sizes),
        task_gaps=tuple(args.gaps),
        noise_variance=args.noise_variance,
        base_seed=args.base_seed,
    )
    variants = _configs(args, spec.num_tasks, max(sizes, default=0))
    report = run_experiment(spec, variants, args.seeds, workers=args.workers)
    export_report(report, args.out)
    print(_summary(report))
    if report.failures:
        for key, msg in report.failures.items():
            print(f"failed {key}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_run_data(args) -> int:
    kernel = _kernel(args)
    tasks = load_meta_tasks(args.meta_file, kernel)
    raw = json.loads(args.objective_file.read_text())
    domain = Domain(np.asarray(raw["inputs"], dtype=float))
    objective = LookupObjective(np.asarray(raw["outputs"], dtype=float))
    if len(objective.outputs) != len(domain):
        raise ConfigError("objective file: 'outputs' length does not match 'inputs'")
    configs = _configs(args, len(tasks), max((t.size for t in tasks), default=0))
    args.out.mkdir(parents=True, exist_ok=True)
    failed = False
    summary = {}
    for name, cfg in configs.items():
        trace = run(replace(cfg, seed=args.seed), objective, tasks, domain)
        failed |= not trace.complete
        summary[name] = {
            "best_observed": [row.best_observed for row in trace.rows],
            "queries": [row.x.tolist() for row in trace.rows],
            "nu": [row.nu for row in trace.rows],
            "weights": [row.weights.tolist() for row in trace.rows],
            "complete": trace.complete,
            "error": trace.error,
        }
        print(f"{name}: best observed {trace.rows[-1].best_observed if trace.rows else float('nan'):.6g}")
    (args.out / "run_data.json").write_text(json.dumps(summary, indent=1))
    return EXIT_RUNTIME if failed else EXIT_OK


def _cmd_export_only(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "aggregate.json").write_text(json.dumps(aggregate_traces_csv(args.traces), indent=1))
    return EXIT_OK


def _cmd_replay(args) -> int:
    report = replay_manifest(args.manifest, workers=args.workers)
    export_report(report, args.out)
    print(_summary(report))
    return EXIT_RUNTIME if report.failures else EXIT_OK


COMMANDS = {
    "synthetic": _cmd_synthetic,
    "run-data": _cmd_run_data,
    "export-only": _cmd_export_only,
    "replay": _cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, RecordError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logging.getLogger(__name__).exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
