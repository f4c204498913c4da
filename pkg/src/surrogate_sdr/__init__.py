"""Likelihood-based sufficient dimension reduction with error-contaminated
covariates: corrected LAD, invariance-law LAD, sparse corrected LAD and the
inverse-moment baselines, computed on the Grassmann manifold."""

from .errors import (
    DegenerateMeasurementErrorError,
    InvalidArgumentError,
    NonConvergenceError,
    NumericalDegeneracyError,
)
from .estimators import (
    DeltaEstimate,
    Method,
    SubspaceEstimate,
    SurrogateProblem,
    clad_objective,
    estimate_delta,
    fit_clad,
    fit_il_lad,
    fit_il_save,
    fit_il_sir,
    fit_lad,
    lad_objective,
)
from .evalmetrics import projection_error, selection_counts, true_projection
from .manifold import GrassmannPoint, TrustRegionOptions, trust_region_maximize
from .slices import SlicedMoments, slice_covariances, slice_response
from .sparse import SparsePath, fit_sclad, lambda_grid, penalized_objective, pic

__version__ = "0.1.0"

__all__ = [
    "DegenerateMeasurementErrorError",
    "DeltaEstimate",
    "GrassmannPoint",
    "InvalidArgumentError",
    "Method",
    "NonConvergenceError",
    "NumericalDegeneracyError",
    "SlicedMoments",
    "SparsePath",
    "SubspaceEstimate",
    "SurrogateProblem",
    "TrustRegionOptions",
    "clad_objective",
    "estimate_delta",
    "fit_clad",
    "fit_il_lad",
    "fit_il_save",
    "fit_il_sir",
    "fit_lad",
    "fit_sclad",
    "lad_objective",
    "lambda_grid",
    "penalized_objective",
    "pic",
    "projection_error",
    "selection_counts",
    "slice_covariances",
    "slice_response",
    "trust_region_maximize",
    "true_projection",
]
