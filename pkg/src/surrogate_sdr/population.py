"""Exact population moments of a Gaussian inverse-regression model with
additive measurement error.

Within slice ``m`` the true covariates are ``X | m ~ N(mu + Delta Psi v_m, Delta_m)``
with ``Delta_m = Delta + Delta Psi C_m Psi' Delta``; the surrogates are
``W = X + U``, ``U ~ N(0, Sigma_u)``.  The weighted averages of ``v_m`` and
``C_m`` vanish, so ``E{Var(X | y)} = Delta``.  In this model ``span(Psi)`` is
the central subspace, which makes it a ground truth for the population
versions of every estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import null_space

from .errors import InvalidArgumentError
from .estimators import LogdetObjective, save_directions
from .manifold import GrassmannPoint, TrustRegionOptions, trust_region_maximize
from .matops import symmetrize
from .slices import SlicedMoments


@dataclass
class InverseRegressionModel:
    Psi: np.ndarray  # p x d, orthonormal columns
    delta: np.ndarray  # E{Var(X | y)}
    proportions: np.ndarray
    v: np.ndarray  # M x d slice mean coordinates, weighted mean zero
    C: np.ndarray  # M x d x d slice covariance coordinates, weighted mean zero
    sigma_u: np.ndarray
    mu: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Psi = np.asarray(self.Psi, dtype=float)
        p, d = self.Psi.shape
        f = np.asarray(self.proportions, dtype=float)
        self.proportions = f
        self.v = np.asarray(self.v, dtype=float).reshape(f.size, d)
        self.C = np.asarray(self.C, dtype=float).reshape(f.size, d, d)
        self.mu = np.zeros(p) if self.mu is None else np.asarray(self.mu, dtype=float)
        if not np.isclose(f.sum(), 1.0) or np.any(f <= 0):
            raise InvalidArgumentError("proportions must be positive and sum to 1")
        if np.linalg.norm(self.Psi.T @ self.Psi - np.eye(d)) > 1e-10:
            raise InvalidArgumentError("Psi must have orthonormal columns")
        if np.linalg.norm(f @ self.v) > 1e-10 or np.linalg.norm(np.einsum("m,mij->ij", f, self.C)) > 1e-10:
            raise InvalidArgumentError("slice coordinates must have weighted mean zero")
        for m in range(f.size):
            if np.linalg.eigvalsh(self.slice_covs_x[m])[0] <= 0:
                raise InvalidArgumentError(f"slice {m} covariance is not positive definite")

    @property
    def p(self) -> int:
        return self.Psi.shape[0]

    @property
    def d(self) -> int:
        return self.Psi.shape[1]

    @property
    def slice_means(self) -> np.ndarray:
        return self.mu + self.v @ (self.delta @ self.Psi).T

    @property
    def slice_covs_x(self) -> np.ndarray:
        DP = self.delta @ self.Psi
        return self.delta + DP @ self.C @ DP.T

    @property
    def sigma_x(self) -> np.ndarray:
        DP = self.delta @ self.Psi
        between = (self.v.T * self.proportions) @ self.v
        return symmetrize(self.delta + DP @ between @ DP.T)

    @property
    def sigma_w(self) -> np.ndarray:
        return self.sigma_x + self.sigma_u

    @property
    def L(self) -> np.ndarray:
        """``Delta (Delta + Sigma_u)^{-1}``."""
        return np.linalg.solve(self.delta + self.sigma_u, self.delta).T

    @property
    def R(self) -> np.ndarray:
        """``Sigma_x Sigma_w^{-1}``."""
        return np.linalg.solve(self.sigma_w, self.sigma_x).T

    def moments_x(self) -> SlicedMoments:
        return SlicedMoments.from_population(self.sigma_x, self.slice_covs_x,
                                             self.proportions, self.slice_means)

    def moments_w(self) -> SlicedMoments:
        return SlicedMoments.from_population(self.sigma_w, self.slice_covs_x + self.sigma_u,
                                             self.proportions, self.slice_means)

    def clad_moments(self) -> SlicedMoments:
        return self.moments_w().transformed(self.L)

    def il_moments(self) -> SlicedMoments:
        return self.moments_w().transformed(self.R)

    def naive_basis(self) -> np.ndarray:
        """Population naive LAD subspace ``span{(Delta + Sigma_u)^{-1} Delta Psi}``."""
        B = np.linalg.solve(self.delta + self.sigma_u, self.delta @ self.Psi)
        return np.linalg.qr(B)[0]

    def complement(self) -> np.ndarray:
        return null_space(self.Psi.T)

    def sample(self, n: int, seed=None):
        """Draw ``(X, W, labels)``; slice labels are multinomial with the proportions."""
        rng = np.random.default_rng(seed)
        labels = rng.choice(self.proportions.size, size=n, p=self.proportions)
        X = np.empty((n, self.p))
        means = self.slice_means
        covs = self.slice_covs_x
        for m in range(self.proportions.size):
            idx = np.flatnonzero(labels == m)
            X[idx] = rng.multivariate_normal(means[m], covs[m], size=idx.size, method="cholesky")
        U = rng.multivariate_normal(np.zeros(self.p), self.sigma_u, size=n, method="eigh")
        return X, X + U, labels


def constructed_model(p: int = 4, d: int = 1, M: int = 3, seed=0, error_scale: float = 0.5,
                      proportions=None) -> InverseRegressionModel:
    """A random model with non-trivial ``Delta``, ``Sigma_u`` and slice structure."""
    rng = np.random.default_rng(seed)
    Psi = np.linalg.qr(rng.standard_normal((p, d)))[0]
    A = rng.standard_normal((p, p))
    delta = A @ A.T / p + np.eye(p)
    B = rng.standard_normal((p, p))
    sigma_u = error_scale * (B @ B.T / p + 0.1 * np.eye(p))
    f = np.full(M, 1.0 / M) if proportions is None else np.asarray(proportions, dtype=float)
    v = rng.standard_normal((M, d))
    v -= f @ v
    DP = delta @ Psi
    scale = 1.0 / np.linalg.eigvalsh(DP.T @ DP)[-1]
    C = np.empty((M, d, d))
    for m in range(M):
        G = rng.standard_normal((d, d))
        C[m] = 0.5 * scale * (G @ G.T / d - 0.5 * np.eye(d))
    C -= np.einsum("m,mij->ij", f, C)
    return InverseRegressionModel(Psi, delta, f, v, C, sigma_u)


def population_lad(moments: SlicedMoments, d: int, start: Optional[GrassmannPoint] = None,
                   grad_tol: float = 1e-10) -> GrassmannPoint:
    """Maximizer of the LAD objective of exact moments, started at SAVE."""
    if start is None:
        start = save_directions(moments, d)[0]
    opts = TrustRegionOptions(grad_tol=grad_tol, max_outer_iters=500)
    pt, _ = trust_region_maximize(LogdetObjective(moments), start, opts)
    return pt
