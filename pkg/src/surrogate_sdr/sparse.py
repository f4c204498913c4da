"""Sparse corrected LAD: l1 penalty on the projection matrix, the lambda
path with warm starts, and tuning by the projection information criterion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linprog

from .errors import InvalidArgumentError, NumericalDegeneracyError
from .estimators import (
    PD_FLOOR,
    LogdetObjective,
    Method,
    SubspaceEstimate,
    SurrogateProblem,
    fit_clad,
)
from .evalmetrics import DIAG_TOL, estimated_support
from .manifold import (

    GrassmannPoint,
    ObjectiveEvaluation,
    TrustRegionOptions,
    trust_region_maximize,
)
from .matops import commutation_matrix, ivec, kron, sign_matrix, vec
from .slices import SlicedMoments

log = logging.getLogger(__name__)

SIGN_ZERO_TOL = 1e-12
SNAP_TOL = 1e-2


def penalty_value_and_gradient(point: GrassmannPoint, zero_tol: float = SIGN_ZERO_TOL):
    """``||Psi Psi'||_1`` and its Euclidean gradient ``2 sgn(Psi Psi') Psi``."""
    Psi = point.basis
    P = Psi @ Psi.T
    S = sign_matrix(P, zero_tol)
    return float(np.abs(P).sum()), 2.0 * S @ Psi


def penalty_gradient_kron(point: GrassmannPoint, zero_tol: float = SIGN_ZERO_TOL) -> np.ndarray:
    """The same gradient through ``vec{sgn(PsiPsi')}' (I + T_pp)(Psi kron I_p)``.

    Quadratic in ``p^2`` memory; kept as an independent cross-check of the
    closed form used by the optimizer.
    """
    Psi = point.basis
    p, d = Psi.shape
    S = sign_matrix(Psi @ Psi.T, zero_tol)
    dP = (np.eye(p * p) + commutation_matrix(p, p)) @ kron(Psi, np.eye(p))
    return ivec(vec(S) @ dP, p, d)


class PenalizedObjective:
    """Corrected LAD objective minus ``lam * ||P||_1`` for fixed moments."""

    def __init__(self, corrected_moments, lam: float, zero_tol: float = SIGN_ZERO_TOL):
        if lam < 0:
            raise InvalidArgumentError("lambda must be non-negative")
        self.base = LogdetObjective(corrected_moments)
        self.lam = float(lam)
        self.zero_tol = zero_tol

    def __call__(self, point) -> ObjectiveEvaluation:
        ev = self.base(point)
        if self.lam == 0.0:
            return ev
        pen, g = penalty_value_and_gradient(point, self.zero_tol)
        return ObjectiveEvaluation(ev.value - self.lam * pen,
                                   ev.euclidean_gradient - self.lam * g)


def penalized_objective(point, moments, L_hat, lam: float) -> ObjectiveEvaluation:
    """``clad_objective - lam * ||Psi Psi'||_1`` with matching gradient."""
    return PenalizedObjective(moments.transformed(L_hat), lam)(point)


def _submoments(moments: SlicedMoments, rows) -> SlicedMoments:
    rows = np.asarray(rows)
    ix = np.ix_(rows, rows)
    return SlicedMoments(
        marginal_cov=moments.marginal_cov[ix],
        slice_covs=moments.slice_covs[:, rows][:, :, rows],
        slice_means=moments.slice_means[:, rows],
        grand_mean=moments.grand_mean[rows],
        pooled_within_cov=moments.pooled_within_cov[ix],
        proportions=moments.proportions,
    )


def kkt_ratio(grad_row, Psi, lam: float) -> float:
    """Smallest ``t`` with ``grad_row = 2 lam Psi' s`` for some ``|s|_inf <= t``.

    A zero row of the basis is a stationary point of the penalized objective
    in that row iff the ratio is at most 1.  For ``d = 1`` this is
    ``|g_j| / (2 lam |psi|_1)``.
    """
    g = np.asarray(grad_row, dtype=float).ravel()
    Psi = np.asarray(Psi, dtype=float)
    if lam <= 0:
        return np.inf if np.any(g) else 0.0
    target = g / (2.0 * lam)
    if Psi.shape[1] == 1:
        denom = np.abs(Psi).sum()
        return abs(target[0]) / denom if denom > 0 else np.inf
    # variables (s, t): minimize t subject to Psi' s = target, -t <= s <= t
    k, d = Psi.shape
    c = np.zeros(k + 1)
    c[-1] = 1.0
    eye = np.eye(k)
    A_ub = np.block([[eye, -np.ones((k, 1))], [-eye, -np.ones((k, 1))]])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(2 * k), A_eq=np.hstack([Psi.T, np.zeros((d, 1))]),
                  b_eq=target, bounds=[(None, None)] * k + [(0, None)], method="highs")
    return float(res.x[-1]) if res.status == 0 else np.inf


def _embed(sub_basis, rows, p):
    Psi = np.zeros((p, sub_basis.shape[1]))
    Psi[rows] = sub_basis
    return GrassmannPoint(Psi)


def refine_support(corrected: SlicedMoments, lam: float, point: GrassmannPoint,
                   snap_tol: float = SNAP_TOL, options: Optional[TrustRegionOptions] = None,
                   max_rounds: Optional[int] = None):
    """Active-set polish of a penalized fit.

    Rows of the basis with squared norm below ``snap_tol`` are set to zero
    and the penalized objective is maximized over the remaining rows.  Zero
    rows whose stationarity condition fails (:func:`kkt_ratio` above 1) are
    released one at a time, worst first, and rows that shrink below
    ``snap_tol`` are dropped, until neither happens or ``max_rounds`` is
    reached.

    Returns ``(point, value, rounds, stationary)``.  ``stationary`` certifies
    that the restricted solve converged and every zero row passes the
    stationarity check.  The input point is returned, uncertified, when the
    polish does not increase the penalized objective.
    """
    full = PenalizedObjective(corrected, lam)
    start_value = full(point).value
    p, d = point.p, point.d
    base = LogdetObjective(corrected)
    row_norms = np.sum(point.basis ** 2, axis=1)
    support = sorted(np.flatnonzero(row_norms >= snap_tol).tolist())
    if len(support) < d:
        support = sorted(np.argsort(row_norms)[::-1][:d].tolist())
    current = point.basis
    max_rounds = p if max_rounds is None else max_rounds
    cand = point
    rounds = 0
    stationary = False
    for rounds in range(1, max_rounds + 1):
        rows = np.asarray(support)
        if rows.size == d:
            cand = _embed(np.eye(d), rows, p)
            sub_converged = True
        else:
            sub = current[rows]
            if np.linalg.matrix_rank(sub) < d:
                sub = sub + 1e-3 * np.eye(rows.size, d)
            sub_pt = GrassmannPoint.from_matrix(sub)
            sub_obj = PenalizedObjective(_submoments(corrected, rows), lam)
            sub_pt, sub_diag = trust_region_maximize(sub_obj, sub_pt, options)
            sub_converged = sub_diag.converged
            cand = _embed(sub_pt.basis, rows, p)
        current = cand.basis
        norms = np.sum(current ** 2, axis=1)
        small = [j for j in support if norms[j] < snap_tol]
        if small and len(support) - len(small) >= d:
            support = [j for j in support if j not in small]
            continue
        g = base(cand).euclidean_gradient
        Psi_s = current[rows]
        outside = [j for j in range(p) if j not in set(support)]
        ratios = np.array([kkt_ratio(g[j], Psi_s, lam) for j in outside])
        if ratios.size == 0 or ratios.max() <= 1.0 + 1e-8:
            stationary = sub_converged
            break
        support = sorted(support + [outside[int(np.argmax(ratios))]])
    value = full(cand).value
    if value >= start_value:
        return cand, value, rounds, stationary
    return point, start_value, rounds, False


def lambda_grid(lambda_max: float = 1.0, G: int = 40) -> np.ndarray:
    """0 followed by ``G - 1`` log-spaced values from ``1e-3 * lambda_max`` to ``lambda_max``."""
    if not lambda_max > 0:
        raise InvalidArgumentError("lambda_max must be positive")
    if G < 2:
        raise InvalidArgumentError("grid needs at least 2 points")
    if G == 2:
        return np.array([0.0, float(lambda_max)])
    tail = np.geomspace(1e-3 * lambda_max, lambda_max, G - 1)
    tail[-1] = lambda_max
    return np.concatenate([[0.0], tail])


def support_size(P, diag_tol: float = DIAG_TOL) -> int:
    return int(np.sum(np.diag(np.asarray(P)) > diag_tol))


def pic(P_lambda, P_0, p: int, d: int, diag_tol: float = DIAG_TOL) -> float:
    """Projection information criterion
    ``||P_lambda - P_0||_F^2 + log(p)/p * s (s - d)``, ``s`` the number of
    diagonal entries of ``P_lambda`` above ``diag_tol``.  When ``s < d`` the
    complexity term is floored at zero.
    """
    s = support_size(P_lambda, diag_tol)
    df = max(s * (s - d), 0)
    fit = float(np.linalg.norm(np.asarray(P_lambda) - np.asarray(P_0)) ** 2)
    return fit + np.log(p) / p * df


@dataclass
class SparsePath:
    lambdas: np.ndarray
    estimates: List[Optional[SubspaceEstimate]]
    pic_values: np.ndarray
    selected_index: int
    support: set
    reference: SubspaceEstimate  # unpenalized cLAD fit
    failed: np.ndarray = None  # fit raised; excluded from selection
    support_sizes: np.ndarray = None
    diag_tol: float = DIAG_TOL
    errors: dict = field(default_factory=dict)

    @property
    def selected(self) -> SubspaceEstimate:
        return self.estimates[self.selected_index]

    @property
    def degenerate_support(self) -> np.ndarray:
        d = self.reference.d
        return np.array([s < d for s in self.support_sizes])


def _fit_one_lambda(corrected, lam, start, options, refine, snap_tol, shortcut):
    """Penalized fit at one lambda: trust region on the full problem, then
    the active-set polish.  With ``shortcut`` (the warm start was certified
    stationary) the polish is tried first and the full solve is skipped when
    it certifies again."""
    if refine and shortcut:
        pt, value, rounds, stationary = refine_support(corrected, lam, start, snap_tol, options)
        if stationary:
            info = {"lambda": float(lam), "iterations": 0, "stop_reason": "warm_polish",
                    "refine_rounds": rounds, "refined": True, "stationary": True,
                    "final_value": value}
            return pt, value, True, info
    pt, diag = trust_region_maximize(PenalizedObjective(corrected, lam), start, options)
    value, rounds, stationary = diag.final_value, 0, False
    if refine:
        pt, value, rounds, stationary = refine_support(corrected, lam, pt, snap_tol, options)
    info = diag.summary()
    info.update({"lambda": float(lam), "refine_rounds": rounds,
                 "refined": bool(value > diag.final_value), "stationary": bool(stationary),
                 "final_value": value})
    return pt, value, bool(diag.converged or stationary), info


def fit_sclad(problem: SurrogateProblem, lambda_max: float = 1.0, grid_size: int = 40,
              diag_tol: float = DIAG_TOL, options: Optional[TrustRegionOptions] = None,
              pd_floor: float = PD_FLOOR, clad: Optional[SubspaceEstimate] = None,
              moments=None, refine: bool = True, snap_tol: float = SNAP_TOL) -> SparsePath:
    """Sparse cLAD over a lambda grid, tuned by PIC against the cLAD fit.

    The grid is swept in increasing order, each fit warm-started at the
    previous solution.  With ``refine`` each trust-region solution is
    polished by :func:`refine_support`, since the smooth trust-region model
    stalls at the kinks of the penalty.  A grid point whose fit raises is
    recorded as failed and excluded from selection; the sweep continues from
    the last good solution.
    """
    moments = problem.moments() if moments is None else moments
    if clad is None:
        clad = fit_clad(problem, options, pd_floor, moments)
    L = clad.adjustment
    corrected = moments.transformed(L)
    lambdas = lambda_grid(lambda_max, grid_size)
    G = lambdas.size
    P0 = clad.projection
    p, d = problem.p, problem.d

    estimates: List[Optional[SubspaceEstimate]] = [None] * G
    pic_values = np.full(G, np.inf)
    sizes = np.zeros(G, dtype=int)
    failed = np.zeros(G, dtype=bool)
    errors = {}
    current = clad.basis
    shortcut = False
    for g, lam in enumerate(lambdas):
        if g == 0:
            est = SubspaceEstimate(
                basis=clad.basis, objective_value=clad.objective_value,
                converged=clad.converged, iterations=clad.iterations,
                method_tag=Method.SCLAD, adjustment=L, delta=clad.delta,
                diagnostics={"lambda": 0.0, **clad.diagnostics},
            )
        else:
            try:
                pt, value, converged, info = _fit_one_lambda(
                    corrected, lam, current, options, refine, snap_tol, shortcut)
            except (InvalidArgumentError, NumericalDegeneracyError, np.linalg.LinAlgError) as exc:
                log.warning("scLAD fit failed at lambda=%g: %s", lam, exc)
                failed[g] = True
                errors[g] = str(exc)
                continue
            shortcut = info["stationary"]
            est = SubspaceEstimate(
                basis=pt, objective_value=value, converged=converged,
                iterations=info["iterations"], method_tag=Method.SCLAD, adjustment=L,
                delta=clad.delta, diagnostics=info,
            )
            current = pt
        estimates[g] = est
        sizes[g] = support_size(est.projection, diag_tol)
        pic_values[g] = pic(est.projection, P0, p, d, diag_tol)

    if failed.all():
        raise NumericalDegeneracyError("every point of the lambda path failed")
    sel = int(np.argmin(np.where(failed, np.inf, pic_values)))
    return SparsePath(
        lambdas=lambdas,
        estimates=estimates,
        pic_values=pic_values,
        selected_index=sel,
        support=estimated_support(estimates[sel].projection, diag_tol),
        reference=clad,
        failed=failed,
        support_sizes=sizes,
        diag_tol=diag_tol,
        errors=errors,
    )
