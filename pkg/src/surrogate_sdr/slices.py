"""Slicing of the response and the sliced covariance statistics of the
surrogates.

All covariances use divisor ``n`` (maximum-likelihood form), both for the
marginal covariance and within each slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_SLICES = 10


@dataclass(frozen=True)
class SliceAssignment:
    labels: np.ndarray  # slice index per observation, 0..M-1
    counts: np.ndarray
    proportions: np.ndarray
    levels: Optional[np.ndarray] = None  # category values, categorical y only

    @property
    def n_slices(self) -> int:
        return int(self.counts.size)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @classmethod
    def from_labels(cls, labels, n_slices: Optional[int] = None, levels=None):
        labels = np.asarray(labels, dtype=int)
        M = int(labels.max()) + 1 if n_slices is None else int(n_slices)
        counts = np.bincount(labels, minlength=M)
        return cls(labels, counts, counts / labels.size, levels)


@dataclass(frozen=True)
class SlicedMoments:
    """Sufficient statistics of the likelihood objectives.

    ``slice_covs`` is stacked as an ``(M, p, p)`` array and ``slice_means``
    as ``(M, p)``.
    """

    marginal_cov: np.ndarray
    slice_covs: np.ndarray
    slice_means: np.ndarray
    grand_mean: np.ndarray
    pooled_within_cov: np.ndarray
    proportions: np.ndarray

    @property
    def p(self) -> int:
        return self.marginal_cov.shape[0]

    @property
    def n_slices(self) -> int:
        return self.slice_covs.shape[0]

    def between_cov(self) -> np.ndarray:
        dev = self.slice_means - self.grand_mean
        return (dev.T * self.proportions) @ dev

    def transformed(self, L: np.ndarray) -> "SlicedMoments":
        """Moments of ``L @ W``: covariances become ``L S L'``, means ``L m``."""
        L = np.asarray(L, dtype=float)
        sym = lambda A: 0.5 * (A + np.swapaxes(A, -1, -2))
        return SlicedMoments(
            marginal_cov=sym(L @ self.marginal_cov @ L.T),
            slice_covs=sym(L @ self.slice_covs @ L.T),
            slice_means=self.slice_means @ L.T,
            grand_mean=L @ self.grand_mean,
            pooled_within_cov=sym(L @ self.pooled_within_cov @ L.T),
            proportions=self.proportions,
        )

    @classmethod
    def from_population(cls, marginal_cov, slice_covs, proportions, slice_means=None):
        """Exact (population) moments, e.g. for consistency oracles."""
        slice_covs = np.asarray(slice_covs, dtype=float)
        f = np.asarray(proportions, dtype=float)
        M, p, _ = slice_covs.shape
        means = np.zeros((M, p)) if slice_means is None else np.asarray(slice_means, float)
        return cls(
            marginal_cov=np.asarray(marginal_cov, dtype=float),
            slice_covs=slice_covs,
            slice_means=means,
            grand_mean=f @ means,
            pooled_within_cov=np.einsum("m,mij->ij", f, slice_covs),
            proportions=f,
        )


def slice_response(y, M: Optional[int] = DEFAULT_SLICES, y_is_categorical: bool = False,
                   d: int = 1) -> SliceAssignment:
    """Partition observations into slices of the response.

    Continuous responses get equal-frequency slices built from the order
    statistics; a run of tied values is never split and goes to the lower
    slice.  Categorical responses get one slice per distinct value.

    Raises
    ------
    InvalidArgumentError
        If a continuous-response slice ends up with fewer than ``d + 2``
        observations.  Categorical slices are checked by the fitting code
        (see :func:`require_slice_counts`).
    """
    y = np.asarray(y)
    if y.ndim != 1:
        y = y.ravel()
    n = y.size
    if y_is_categorical:
        levels, labels = np.unique(y, return_inverse=True)
        if M is not None and M != levels.size:
            raise InvalidArgumentError(
                f"categorical response has {levels.size} levels but M={M} slices requested"
            )
        assign = SliceAssignment.from_labels(labels, levels.size, levels)
    else:
        if M is None or M < 2:
            raise InvalidArgumentError("need M >= 2 slices")
        if n < M * (d + 2):
            raise InvalidArgumentError(
                f"n={n} observations cannot fill {M} slices of at least {d + 2}"
            )
        y = y.astype(float)
        order = np.argsort(y, kind="stable")
        ys = y[order]
        labels = np.empty(n, dtype=int)
        pos = 0
        for k in range(M):
            if pos >= n:
                raise InvalidArgumentError(
                    f"slice {k} is empty: too many tied response values for {M} slices"
                )
            if k == M - 1:
                end = n
            else:
                end = pos + max(1, int(round((n - pos) / (M - k))))
                while end < n and ys[end] == ys[end - 1]:
                    end += 1
            labels[order[pos:end]] = k
            pos = end
        assign = SliceAssignment.from_labels(labels, M)
        require_slice_counts(assign, d)
    return assign


def require_slice_counts(assignment: SliceAssignment, d: int) -> SliceAssignment:
    """Raise unless every slice holds at least ``d + 2`` observations."""
    short = np.flatnonzero(assignment.counts < d + 2)
    if short.size:
        m = int(short[0])
        raise InvalidArgumentError(
            f"slice {m} has {assignment.counts[m]} observations; at least {d + 2} required"
        )
    return assignment


def slice_covariances(W, assignment: SliceAssignment) -> SlicedMoments:
    """Marginal, within-slice and pooled covariances of the rows of ``W``."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != assignment.n:
        raise InvalidArgumentError(
            f"W has shape {W.shape}, expected {assignment.n} rows"
        )
    n, p = W.shape
    M = assignment.n_slices
    labels = assignment.labels
    counts = assignment.counts
    f = counts / n
    grand = W.mean(axis=0)
    Wc = W - grand
    marginal = Wc.T @ Wc / n

    sums = np.zeros((M, p))
    np.add.at(sums, labels, W)
    means = sums / counts[:, None]
    covs = np.empty((M, p, p))
    for m in range(M):
        Z = W[labels == m] - means[m]
        covs[m] = Z.T @ Z / counts[m]
    pooled = np.einsum("m,mij->ij", f, covs)
    return SlicedMoments(
        marginal_cov=0.5 * (marginal + marginal.T),
        slice_covs=0.5 * (covs + np.swapaxes(covs, 1, 2)),
        slice_means=means,
        grand_mean=grand,
        pooled_within_cov=0.5 * (pooled + pooled.T),
        proportions=f,
    )
