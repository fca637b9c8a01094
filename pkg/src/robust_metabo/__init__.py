"""Robust meta-Bayesian optimization: RM-GP-UCB and RM-GP-TS on discrete domains."""

from robust_metabo.gp import Dataset, GpPosterior, KernelSpec, fit, predict
from robust_metabo.meta import GapBound, MetaState, MetaTask
from robust_metabo.optimizer import Domain, RegretTrace, RunConfig, run

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Domain",
    "GapBound",
    "GpPosterior",
    "KernelSpec",
    "MetaState",
    "MetaTask",
    "RegretTrace",
    "RunConfig",
    "fit",
    "predict",
    "run",
    "__version__",
]
