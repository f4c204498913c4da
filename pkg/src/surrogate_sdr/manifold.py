"""Grassmann-manifold geometry and a Riemannian trust-region maximizer.

Points are represented by semi-orthogonal ``p x d`` bases; tangent vectors
by ``p x d`` matrices ``xi`` with ``basis.T @ xi == 0`` (horizontal lifts).
The maximizer follows the classical accept / expand / shrink trust-region
scheme with a truncated conjugate-gradient (Steihaug-Toint) inner solver and
Hessian-vector products approximated by finite differences of the
Riemannian gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import InvalidArgumentError, NumericalDegeneracyError

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class GrassmannPoint:
    """A ``d``-dimensional subspace of R^p given by an orthonormal basis."""

    basis: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.basis, dtype=float)
        if B.ndim != 2:
            raise InvalidArgumentError("basis must be a p x d matrix")
        p, d = B.shape
        if not 1 <= d < p:
            raise InvalidArgumentError(f"need 1 <= d < p, got p={p}, d={d}")
        err = np.linalg.norm(B.T @ B - np.eye(d))
        if err > ORTHO_TOL:
            raise InvalidArgumentError(
                f"basis is not semi-orthogonal (||B'B - I||_F = {err:.2e})"
            )
        B.setflags(write=False)
        object.__setattr__(self, "basis", B)

    @classmethod
    def from_matrix(cls, A) -> "GrassmannPoint":
        """Orthonormalize the columns of a full-rank ``p x d`` matrix."""
        return cls(_orthonormalize(np.asarray(A, dtype=float)))

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def projection(self) -> np.ndarray:
        return self.basis @ self.basis.T


@dataclass
class ObjectiveEvaluation:
    value: float
    euclidean_gradient: np.ndarray


@dataclass
class TrustRegionOptions:
    """Solver settings. ``None`` radii resolve from ``d`` at solve time."""

    max_outer_iters: int = 200
    grad_tol: float = 1e-6
    initial_radius: Optional[float] = None  # 0.5 * sqrt(d)
    max_radius: Optional[float] = None  # (pi / 2) * sqrt(d)
    rho_accept: float = 0.1
    rho_expand: float = 0.75
    rho_shrink: float = 0.25
    fd_step: float = 1e-6
    max_inner_iters: Optional[int] = None  # d * (p - d)
    min_radius: float = 1e-10

    def __post_init__(self):
        if not 0 < self.rho_accept < self.rho_expand < 1:
            raise InvalidArgumentError("need 0 < rho_accept < rho_expand < 1")
        if not self.rho_accept <= self.rho_shrink <= self.rho_expand:
            raise InvalidArgumentError("need rho_accept <= rho_shrink <= rho_expand")
        for name in ("grad_tol", "fd_step", "min_radius"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("initial_radius", "max_radius"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.max_outer_iters < 1:
            raise InvalidArgumentError("max_outer_iters must be >= 1")
        if self.max_inner_iters is not None and self.max_inner_iters < 1:
            raise InvalidArgumentError("max_inner_iters must be >= 1")

    def resolved(self, p: int, d: int):
        r0 = self.initial_radius if self.initial_radius is not None else 0.5 * math.sqrt(d)
        rmax = self.max_radius if self.max_radius is not None else 0.5 * math.pi * math.sqrt(d)
        rmax = max(rmax, r0)
        inner = self.max_inner_iters if self.max_inner_iters is not None else d * (p - d)
        return r0, rmax, inner


@dataclass
class StepRecord:
    iteration: int
    value: float
    radius: float
    rho: float
    accepted: bool
    inner_iters: int
    step_norm: float
    hit_boundary: bool


@dataclass
class TrustRegionDiagnostics:
    iterations: int = 0
    grad_norm: float = float("nan")
    converged: bool = False
    stop_reason: str = ""
    n_evaluations: int = 0
    initial_value: float = float("nan")
    final_value: float = float("nan")
    history: List[StepRecord] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return sum(rec.accepted for rec in self.history)

    @property
    def n_rejected(self) -> int:
        return sum(not rec.accepted for rec in self.history)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "n_evaluations": self.n_evaluations,
            "n_accepted": self.n_accepted,
            "n_rejected": self.n_rejected,
            "initial_value": self.initial_value,
            "final_value": self.final_value,
        }


Objective = Callable[[GrassmannPoint], ObjectiveEvaluation]


def _orthonormalize(A: np.ndarray) -> np.ndarray:
    """Thin QR with the diagonal of R made positive."""
    if A.shape[1] == 1:
        nrm = np.linalg.norm(A)
        if not nrm > 0 or not np.isfinite(nrm):
            raise NumericalDegeneracyError("cannot orthonormalize a zero column")
        return A / nrm
    Q, R = np.linalg.qr(A)
    diag = np.diag(R)
    scale = np.max(np.abs(diag)) if diag.size else 0.0
    if not np.all(np.isfinite(diag)) or np.min(np.abs(diag)) <= 1e-13 * max(scale, 1e-300):
        raise NumericalDegeneracyError("matrix is numerically rank deficient")
    return Q * np.where(diag < 0, -1.0, 1.0)


def _check_shape(point: GrassmannPoint, G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.shape != point.basis.shape:
        raise InvalidArgumentError(
            f"expected a {point.basis.shape} matrix, got {G.shape}"
        )
    return G


def project_tangent(point: GrassmannPoint, G) -> np.ndarray:
    """Project ``G`` onto the tangent space at ``point``: ``(I - PsiPsi')G``."""
    G = _check_shape(point, G)
    Psi = point.basis
    return G - Psi @ (Psi.T @ G)


def retract(point: GrassmannPoint, xi) -> GrassmannPoint:
    """QR retraction: the span of the orthonormalized ``Psi + xi``."""
    xi = _check_shape(point, xi)
    return GrassmannPoint(_orthonormalize(point.basis + xi))


def inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b))


def riemannian_gradient(objective: Objective, point: GrassmannPoint):
    ev = objective(point)
    return ev.value, project_tangent(point, ev.euclidean_gradient)


def fd_hessian_apply(
    objective: Objective,
    point: GrassmannPoint,
    xi,
    fd_step: float = 1e-6,
    grad_at_point: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Finite-difference approximation of the Riemannian Hessian applied to ``xi``.

    The gradient at ``retract(point, h * xi / |xi|)`` is brought back to the
    tangent space at ``point`` by orthogonal projection.
    """
    xi = _check_shape(point, xi)
    nrm = np.linalg.norm(xi)
    if nrm == 0.0:
        return np.zeros_like(xi)
    if grad_at_point is None:
        _, grad_at_point = riemannian_gradient(objective, point)
    moved = retract(point, (fd_step / nrm) * xi)
    _, g_new = riemannian_gradient(objective, moved)
    return project_tangent(point, g_new - grad_at_point) * (nrm / fd_step)


def _truncated_cg(grad, hess, radius, max_iters, kappa=0.1, theta=1.0):
    """Steihaug-Toint CG for min <grad, eta> + 0.5 <eta, H eta>, |eta| <= radius.

    Returns (eta, H eta, iterations, hit_boundary).
    """
    eta = np.zeros_like(grad)
    Heta = np.zeros_like(grad)
    r = grad.copy()
    r_r = inner(r, r)
    norm_r0 = math.sqrt(r_r)
    delta = -r
    e_Pe = 0.0
    e_Pd = 0.0
    d_Pd = r_r
    radius2 = radius * radius
    j = 0
    for j in range(1, max_iters + 1):
        Hd = hess(delta)
        d_Hd = inner(delta, Hd)
        alpha = r_r / d_Hd if d_Hd != 0 else math.inf
        e_Pe_new = e_Pe + 2.0 * alpha * e_Pd + alpha * alpha * d_Pd
        if d_Hd <= 0 or not np.isfinite(d_Hd) or e_Pe_new >= radius2:
            disc = max(e_Pd * e_Pd + d_Pd * (radius2 - e_Pe), 0.0)
            tau = (-e_Pd + math.sqrt(disc)) / d_Pd
            eta = eta + tau * delta
            if np.all(np.isfinite(Hd)):
                Heta = Heta + tau * Hd
            return _clip(eta, Heta, radius), j, True
        eta = eta + alpha * delta
        Heta = Heta + alpha * Hd
        e_Pe = e_Pe_new
        r = r + alpha * Hd
        r_r_new = inner(r, r)
        if math.sqrt(r_r_new) <= norm_r0 * min(norm_r0 ** theta, kappa):
            return (eta, Heta), j, False
        beta = r_r_new / r_r
        r_r = r_r_new
        delta = -r + beta * delta
        e_Pd = beta * (e_Pd + alpha * d_Pd)
        d_Pd = r_r + beta * beta * d_Pd
    return (eta, Heta), j, False


def _clip(eta, Heta, radius):
    # absorb round-off so that |eta| never exceeds the radius
    nrm = np.linalg.norm(eta)
    if nrm > radius:
        s = radius / nrm
        return eta * s, Heta * s
    return eta, Heta


def _ascent_from_critical(evaluate, x, fx, radius, fd_step):
    """Probe the curvature along a basis of the tangent space at a point with
    zero gradient and step along the direction of largest positive curvature.

    Returns ``(point, value, gradient, step_norm)`` or ``None`` when no probed
    direction increases the objective.
    """
    p, d = x.basis.shape
    Q = np.linalg.qr(x.basis, mode="complete")[0][:, d:]
    _, g0 = evaluate(x)
    best, best_curv = None, 0.0
    for k in range(p - d):
        for j in range(d):
            xi = np.zeros((p, d))
            xi[:, j] = Q[:, k]
            try:
                _, g = evaluate(retract(x, fd_step * xi))
            except (ArithmeticError, np.linalg.LinAlgError):
                continue
            curv = inner(xi, project_tangent(x, g - g0)) / fd_step
            if np.isfinite(curv) and curv > best_curv:
                best, best_curv = xi, curv
    if best is None or best_curv <= math.sqrt(np.finfo(float).eps) * max(1.0, abs(fx)):
        return None
    t = radius
    for _ in range(30):
        try:
            x_new = retract(x, t * best)
            f_new, g_new = evaluate(x_new)
        except (ArithmeticError, np.linalg.LinAlgError):
            f_new = math.nan
        if np.isfinite(f_new) and f_new > fx:
            return x_new, f_new, g_new, t
        t *= 0.5
    return None


def trust_region_maximize(
    objective: Objective,
    init: GrassmannPoint,
    opts: Optional[TrustRegionOptions] = None,
):
    """Maximize a smooth function on the Grassmann manifold.

    Parameters
    ----------
    objective : callable
        Maps a :class:`GrassmannPoint` to an :class:`ObjectiveEvaluation`
        holding the value and the Euclidean gradient.
    init : GrassmannPoint
        Starting subspace.
    opts : TrustRegionOptions, optional

    Returns
    -------
    point : GrassmannPoint
    diagnostics : TrustRegionDiagnostics
    """
    opts = opts or TrustRegionOptions()
    if not isinstance(init, GrassmannPoint):
        init = GrassmannPoint(init)
    p, d = init.basis.shape
    radius, max_radius, max_inner = opts.resolved(p, d)
    diag = TrustRegionDiagnostics()

    n_evals = 0

    def evaluate(pt):
        nonlocal n_evals
        n_evals += 1
        ev = objective(pt)
        g = project_tangent(pt, ev.euclidean_gradient)
        return float(ev.value), g

    x = init
    try:
        fx, gx = evaluate(x)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise InvalidArgumentError(f"objective failed at the initial point: {exc}") from exc
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise InvalidArgumentError("objective is not finite at the initial point")
    diag.initial_value = fx

    gnorm = float(np.linalg.norm(gx))
    it = 0
    stop = "max_outer_iters"
    if gnorm <= opts.grad_tol and opts.max_outer_iters > 0:
        # a start at an exact critical point (e.g. a minimum) gives no first-order
        # information; use second-order probes before declaring convergence
        escape = _ascent_from_critical(evaluate, x, fx, radius, opts.fd_step)
        if escape is not None:
            it = 1
            x, f_new, gx, step = escape
            diag.history.append(StepRecord(it, f_new, radius, math.inf, True, 0, step, True))
            fx = f_new
            gnorm = float(np.linalg.norm(gx))
    while True:
        if gnorm <= opts.grad_tol:
            stop = "grad_tol"
            break
        if it >= opts.max_outer_iters:
            stop = "max_outer_iters"
            break
        if radius < opts.min_radius:
            stop = "min_radius"
            break
        it += 1

        # minimize the negated model: m(eta) = -f - <g, eta> - 0.5 <eta, H eta>
        def neg_hess(v, _x=x, _g=gx):
            nrm = np.linalg.norm(v)
            if nrm == 0.0:
                return np.zeros_like(v)
            try:
                moved = retract(_x, (opts.fd_step / nrm) * v)
                _, g_new = evaluate(moved)
            except (ArithmeticError, np.linalg.LinAlgError):
                return np.full_like(v, np.nan)
            return -project_tangent(_x, g_new - _g) * (nrm / opts.fd_step)

        (eta, Heta), n_inner, boundary = _truncated_cg(-gx, neg_hess, radius, max_inner)
        step_norm = float(np.linalg.norm(eta))

        model_decrease = inner(gx, eta) - 0.5 * inner(eta, Heta)
        accepted = False
        rho = -math.inf
        x_new = None
        try:
            x_new = retract(x, eta)
            f_new, g_new = evaluate(x_new)
            finite = np.isfinite(f_new) and np.all(np.isfinite(g_new))
        except (ArithmeticError, np.linalg.LinAlgError):
            finite = False
        if finite and np.isfinite(model_decrease):
            reg = max(1.0, abs(fx)) * np.finfo(float).eps * 1e3
            actual = f_new - fx
            rho = (actual + reg) / (model_decrease + reg) if model_decrease + reg > 0 else -math.inf
            accepted = rho >= opts.rho_accept and actual >= 0.0

        if not finite:
            radius *= 0.5
            if radius < 1e-14:
                raise NumericalDegeneracyError(
                    "trust region radius underflow after non-finite objective values"
                )
        elif rho < opts.rho_shrink:
            radius *= 0.5
        elif rho > opts.rho_expand and boundary:
            radius = min(2.0 * radius, max_radius)

        diag.history.append(
            StepRecord(it, f_new if finite else math.nan, radius, float(rho),
                       accepted, n_inner, step_norm, boundary)
        )
        if accepted:
            x, fx, gx = x_new, f_new, g_new
            gnorm = float(np.linalg.norm(gx))

    diag.iterations = it
    diag.grad_norm = gnorm
    diag.converged = stop == "grad_tol"
    diag.stop_reason = stop
    diag.n_evaluations = n_evals
    diag.final_value = fx
    return x, diag
