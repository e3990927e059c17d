"""Off-grid Bayesian channel covariance estimation for near-field holographic MIMO arrays."""

__version__ = "0.1.0"

from .array import (
    PathSet,
    Perturbation,
    SnapshotBatch,
    UpaConfig,
    array_response,
    generate_snapshots,
    make_pathset,
    rayleigh_bounds,
    sample_pathset,
    true_covariance,
)
from .covariance import CovarianceSet, build_covariance_set
from .estimators import SCHEMES, DeReVM, SparseOffGridVBI, scheme_estimator
from .grids import CsProblem, OffGridModel, assemble_cs_problem
from .recovery import FactoredCovariance, nmse, reconstruct_R, to_db
from .vbi import LayeredPrior, SolverConfig, run_dere_vm

__all__ = [
    "__version__",
    "UpaConfig",
    "PathSet",
    "SnapshotBatch",
    "Perturbation",
    "array_response",
    "generate_snapshots",
    "make_pathset",
    "sample_pathset",
    "rayleigh_bounds",
    "true_covariance",
    "CovarianceSet",
    "build_covariance_set",
    "CsProblem",
    "OffGridModel",
    "assemble_cs_problem",
    "LayeredPrior",
    "SolverConfig",
    "run_dere_vm",
    "SparseOffGridVBI",
    "DeReVM",
    "scheme_estimator",
    "SCHEMES",
    "FactoredCovariance",
    "reconstruct_R",
    "nmse",
    "to_db",
]
