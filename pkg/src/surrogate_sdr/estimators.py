"""Likelihood-based central-subspace estimators for surrogate covariates.

The estimators work from sliced covariance statistics of the surrogates
``W = X + U``:

* naive LAD ignores the measurement error;
* cLAD maximizes the LAD likelihood of ``V = L W`` with
  ``L = Delta (Delta + Sigma_u)^{-1}``, ``Delta`` estimated by the method of
  moments from the naive fit;
* IL-LAD, IL-SIR and IL-SAVE apply LAD / SIR / SAVE to the invariance-law
  adjusted covariates ``X* = Sigma_x Sigma_w^{-1} W``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateMeasurementErrorError,
    InvalidArgumentError,
    NumericalDegeneracyError,
)
from .manifold import (
    GrassmannPoint,
    ObjectiveEvaluation,
    TrustRegionOptions,
    trust_region_maximize,
)
from .matops import inv_sqrt_spd, pd_repair, symmetrize
from .slices import (
    DEFAULT_SLICES,
    SlicedMoments,
    require_slice_counts,
    slice_covariances,
    slice_response,
)

PD_FLOOR = 1e-6
COND_LIMIT = 1e12


class Method(str, enum.Enum):
    LAD = "LAD"
    CLAD = "cLAD"
    IL_LAD = "IL-LAD"
    IL_SIR = "IL-SIR"
    IL_SAVE = "IL-SAVE"
    SCLAD = "scLAD"


@dataclass
class SurrogateProblem:
    """Observed surrogates ``W`` (n x p), response ``y`` and the known
    measurement-error covariance ``sigma_u``."""

    W: np.ndarray
    y: np.ndarray
    sigma_u: np.ndarray
    d: int = 1
    M: Optional[int] = DEFAULT_SLICES
    y_is_categorical: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.y = np.asarray(self.y).ravel()
        if self.W.ndim != 2:
            raise InvalidArgumentError("W must be an n x p matrix")
        n, p = self.W.shape
        if self.y.size != n:
            raise InvalidArgumentError(f"y has {self.y.size} entries, W has {n} rows")
        self.sigma_u = np.asarray(self.sigma_u, dtype=float)
        if self.sigma_u.shape != (p, p):
            raise InvalidArgumentError(f"sigma_u must be {p}x{p}, got {self.sigma_u.shape}")
        if np.max(np.abs(self.sigma_u - self.sigma_u.T), initial=0.0) > 1e-10 * max(
            1.0, float(np.max(np.abs(self.sigma_u)))
        ):
            raise InvalidArgumentError("sigma_u must be symmetric")
        self.sigma_u = symmetrize(self.sigma_u)
        lam_min = np.linalg.eigvalsh(self.sigma_u)[0]
        if lam_min < -1e-10 * max(1.0, float(np.max(np.abs(self.sigma_u)))):
            raise InvalidArgumentError("sigma_u must be positive semi-definite")
        if not 1 <= self.d < p:
            raise InvalidArgumentError(f"need 1 <= d < p, got d={self.d}, p={p}")
        if n <= p:
            raise InvalidArgumentError(f"need n > p, got n={n}, p={p}")
        if not np.all(np.isfinite(self.W)) or not np.all(np.isfinite(self.sigma_u)):
            raise InvalidArgumentError("W and sigma_u must be finite")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    def slices(self):
        return require_slice_counts(
            slice_response(self.y, self.M, self.y_is_categorical, self.d), self.d
        )

    def moments(self) -> SlicedMoments:
        return slice_covariances(self.W, self.slices())


@dataclass
class DeltaEstimate:
    delta_n: np.ndarray  # estimate of E{Var(W | y)}
    delta: np.ndarray  # repaired delta_n - sigma_u
    L_hat: np.ndarray  # delta (delta + sigma_u)^{-1}
    n_repaired: int = 0


@dataclass
class SubspaceEstimate:
    basis: GrassmannPoint
    objective_value: float
    converged: bool
    iterations: int
    method_tag: Method
    adjustment: Optional[np.ndarray] = None  # maps W_i to the adjusted covariate
    delta: Optional[DeltaEstimate] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def projection(self) -> np.ndarray:
        return self.basis.projection

    @property
    def d(self) -> int:
        return self.basis.d

    def sufficient_predictors(self, W) -> np.ndarray:
        """``beta' A W_i`` for each row, ``A`` the adjustment (identity if none)."""
        W = np.asarray(W, dtype=float)
        V = W if self.adjustment is None else W @ self.adjustment.T
        return V @ self.basis.basis


# ---------------------------------------------------------------------------
# likelihood objectives
# ---------------------------------------------------------------------------


class LogdetObjective:
    """``log|Psi' S Psi| - sum_m f_m log|Psi' D_m Psi|`` and its Euclidean gradient.

    Matrices are stacked once so each evaluation is a handful of batched
    products; instances are callables usable by :func:`trust_region_maximize`.
    """

    def __init__(self, moments: SlicedMoments):
        self.stack = np.concatenate([moments.marginal_cov[None], moments.slice_covs])
        self.weights = np.concatenate([[1.0], -np.asarray(moments.proportions, float)])

    def __call__(self, point) -> ObjectiveEvaluation:
        Psi = point.basis if isinstance(point, GrassmannPoint) else np.asarray(point, float)
        AP = self.stack @ Psi  # (K, p, d)
        inner = np.swapaxes(AP, 1, 2) @ Psi  # (K, d, d)
        sign, logdet = np.linalg.slogdet(inner)
        bad = np.flatnonzero((sign <= 0) | ~np.isfinite(logdet))
        if bad.size:
            k = int(bad[0])
            what = "marginal covariance" if k == 0 else f"slice {k - 1}"
            raise NumericalDegeneracyError(
                f"Psi' A Psi is singular for the {what}"
            )
        value = float(self.weights @ logdet)
        # A Psi (Psi' A Psi)^{-1}, via symmetric solves
        X = np.linalg.solve(inner, np.swapaxes(AP, 1, 2))  # (K, d, p)
        grad = 2.0 * np.einsum("k,kdp->pd", self.weights, X)
        return ObjectiveEvaluation(value, grad)


def lad_objective(point, moments: SlicedMoments) -> ObjectiveEvaluation:
    """LAD log-likelihood (up to constants) of the subspace spanned by ``point``."""
    return LogdetObjective(moments)(point)


def clad_objective(point, moments: SlicedMoments, L_hat) -> ObjectiveEvaluation:
    """Corrected LAD objective: the LAD objective of the moments of ``L_hat W``."""
    return LogdetObjective(moments.transformed(L_hat))(point)


# ---------------------------------------------------------------------------
# inverse-moment directions (SIR / SAVE) on given moments
# ---------------------------------------------------------------------------


def _standardizer(moments: SlicedMoments) -> np.ndarray:
    S = moments.marginal_cov
    lam = np.linalg.eigvalsh(S)
    if lam[0] <= lam[-1] / COND_LIMIT:
        raise NumericalDegeneracyError("marginal covariance is singular; cannot standardize")
    return inv_sqrt_spd(S)


def _top_directions(K: np.ndarray, root_inv: np.ndarray, d: int):
    lam, V = np.linalg.eigh(symmetrize(K))
    top = lam[::-1][:d]
    dirs = root_inv @ V[:, ::-1][:, :d]
    informative = bool(top[-1] > 1e-12 * max(1.0, abs(lam).max()))
    return GrassmannPoint.from_matrix(dirs), top, informative


def sir_directions(moments: SlicedMoments, d: int):
    """Top-``d`` SIR directions: eigenvectors of the standardized between-slice
    covariance mapped back to the original scale.

    Returns ``(point, eigenvalues, informative)``.
    """
    R = _standardizer(moments)
    dev = (moments.slice_means - moments.grand_mean) @ R
    K = (dev.T * moments.proportions) @ dev
    return _top_directions(K, R, d)


def save_directions(moments: SlicedMoments, d: int):
    """Top-``d`` SAVE directions from ``sum_m f_m (I - Z_m)^2``, ``Z_m`` the
    standardized within-slice covariances."""
    R = _standardizer(moments)
    p = R.shape[0]
    Z = R @ moments.slice_covs @ R
    D = np.eye(p) - Z
    K = np.einsum("m,mij->ij", moments.proportions, D @ D)
    return _top_directions(K, R, d)


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def _maximize(objective, starts: Sequence[GrassmannPoint], options):
    best = None
    for k, start in enumerate(starts):
        try:
            pt, diag = trust_region_maximize(objective, start, options)
        except (InvalidArgumentError, NumericalDegeneracyError):
            if k == len(starts) - 1 and best is None:
                raise
            continue
        if best is None or diag.final_value > best[1].final_value:
            best = (pt, diag, k)
    return best


def _estimate(method, pt, diag, start_index=0, **extra) -> SubspaceEstimate:
    info = diag.summary()
    info["start_index"] = start_index
    return SubspaceEstimate(
        basis=pt,
        objective_value=diag.final_value,
        converged=diag.converged,
        iterations=diag.iterations,
        method_tag=method,
        diagnostics=info,
        **extra,
    )


def _start_points(moments: SlicedMoments, d: int):
    starts = []
    for fn in (save_directions, sir_directions):
        try:
            starts.append(fn(moments, d)[0])
        except NumericalDegeneracyError:
            pass
    if not starts:
        raise NumericalDegeneracyError("no usable initial subspace")
    return starts


def fit_lad_moments(moments: SlicedMoments, d: int,
                    options: Optional[TrustRegionOptions] = None,
                    method: Method = Method.LAD, adjustment=None) -> SubspaceEstimate:
    """Maximize the LAD objective for precomputed moments.

    The solver is started from the SAVE and the SIR directions of the same
    moments; the higher of the two local maxima is returned.
    """
    objective = LogdetObjective(moments)
    pt, diag, k = _maximize(objective, _start_points(moments, d), options)
    return _estimate(method, pt, diag, k, adjustment=adjustment)


def fit_lad(W, y, d: int, M: Optional[int] = DEFAULT_SLICES, y_is_categorical: bool = False,
            options: Optional[TrustRegionOptions] = None) -> SubspaceEstimate:
    """Naive LAD on the observed data (measurement error ignored)."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or not 1 <= d < W.shape[1]:
        raise InvalidArgumentError("need an n x p matrix W with 1 <= d < p")
    assign = require_slice_counts(slice_response(y, M, y_is_categorical, d), d)
    moments = slice_covariances(W, assign)
    return fit_lad_moments(moments, d, options)


def estimate_delta(problem: SurrogateProblem, naive: SubspaceEstimate,
                   moments: SlicedMoments, pd_floor: float = PD_FLOOR) -> DeltaEstimate:
    """Method-of-moments estimate of ``Delta = E{Var(X | y)}`` from a naive fit."""
    Psi = naive.basis.basis
    S = moments.marginal_cov
    D = moments.pooled_within_cov
    lam = np.linalg.eigvalsh(S)
    if lam[0] <= lam[-1] / COND_LIMIT:
        raise NumericalDegeneracyError("marginal covariance of W is singular")
    S_inv = np.linalg.inv(S)
    inner = (
        Psi @ np.linalg.solve(Psi.T @ D @ Psi, Psi.T)
        + S_inv
        - Psi @ np.linalg.solve(Psi.T @ S @ Psi, Psi.T)
    )
    delta_n = symmetrize(np.linalg.inv(symmetrize(inner)))
    sigma_u = problem.sigma_u
    if not np.any(sigma_u):
        return DeltaEstimate(delta_n, delta_n.copy(), np.eye(S.shape[0]), 0)
    delta, n_raised = pd_repair(delta_n - sigma_u, pd_floor)
    if n_raised == delta.shape[0]:
        raise DegenerateMeasurementErrorError(
            "every eigenvalue of Delta_n - Sigma_u fell below the positive-definite floor"
        )
    # L = delta (delta + sigma_u)^{-1}; both factors symmetric
    L = np.linalg.solve(delta + sigma_u, delta).T
    return DeltaEstimate(delta_n, delta, L, n_raised)


def fit_clad(problem: SurrogateProblem, options: Optional[TrustRegionOptions] = None,
             pd_floor: float = PD_FLOOR, moments: Optional[SlicedMoments] = None) -> SubspaceEstimate:
    """Corrected LAD: naive LAD, then Delta / L estimation, then maximization of
    the corrected objective started at the naive solution."""
    moments = problem.moments() if moments is None else moments
    naive = fit_lad_moments(moments, problem.d, options)
    delta = estimate_delta(problem, naive, moments, pd_floor)
    objective = LogdetObjective(moments.transformed(delta.L_hat))
    pt, diag = trust_region_maximize(objective, naive.basis, options)
    est = _estimate(Method.CLAD, pt, diag, adjustment=delta.L_hat, delta=delta)
    est.diagnostics["naive"] = naive.diagnostics
    est.diagnostics["naive_objective"] = naive.objective_value
    est.diagnostics["delta_repaired_eigenvalues"] = delta.n_repaired
    return est


def invariance_adjustment(problem: SurrogateProblem, pd_floor: float = PD_FLOOR):
    """``R = Sigma_x Sigma_w^{-1}`` with the uncentered second moment
    ``Sigma_w = n^{-1} sum W_i W_i'`` and ``Sigma_x = Sigma_w - Sigma_u`` repaired
    to positive definite."""
    W = problem.W
    Sw = symmetrize(W.T @ W / W.shape[0])
    lam = np.linalg.eigvalsh(Sw)
    if lam[0] <= lam[-1] / COND_LIMIT:
        raise NumericalDegeneracyError("second-moment matrix of W is singular")
    if not np.any(problem.sigma_u):
        return np.eye(W.shape[1]), 0
    Sx, n_raised = pd_repair(Sw - problem.sigma_u, pd_floor)
    if n_raised == Sx.shape[0]:
        raise DegenerateMeasurementErrorError("Sigma_w - Sigma_u is not repairable")
    return np.linalg.solve(Sw, Sx).T, n_raised


def _il_moments(problem, moments, pd_floor):
    R, n_raised = invariance_adjustment(problem, pd_floor)
    moments = problem.moments() if moments is None else moments
    return R, moments.transformed(R)


def fit_il_lad(problem: SurrogateProblem, options: Optional[TrustRegionOptions] = None,
               pd_floor: float = PD_FLOOR, moments: Optional[SlicedMoments] = None) -> SubspaceEstimate:
    """LAD applied to the invariance-law adjusted covariates."""
    R, adj = _il_moments(problem, moments, pd_floor)
    return fit_lad_moments(adj, problem.d, options, Method.IL_LAD, adjustment=R)


def _inverse_moment_fit(fn, method, problem, pd_floor, moments):
    R, adj = _il_moments(problem, moments, pd_floor)
    pt, eigvals, informative = fn(adj, problem.d)
    obj = LogdetObjective(adj)
    try:
        value = obj(pt).value
    except NumericalDegeneracyError:
        value = float("nan")
    return SubspaceEstimate(
        basis=pt,
        objective_value=value,
        converged=informative,
        iterations=0,
        method_tag=method,
        adjustment=R,
        diagnostics={"eigenvalues": eigvals.tolist(), "informative": informative},
    )


def fit_il_sir(problem: SurrogateProblem, pd_floor: float = PD_FLOOR,
               moments: Optional[SlicedMoments] = None) -> SubspaceEstimate:
    """Sliced inverse regression on the adjusted covariates.

    A zero between-slice covariance yields ``converged=False``.
    """
    return _inverse_moment_fit(sir_directions, Method.IL_SIR, problem, pd_floor, moments)


def fit_il_save(problem: SurrogateProblem, pd_floor: float = PD_FLOOR,
                moments: Optional[SlicedMoments] = None) -> SubspaceEstimate:
    """Sliced average variance estimation on the adjusted covariates."""
    return _inverse_moment_fit(save_directions, Method.IL_SAVE, problem, pd_floor, moments)
