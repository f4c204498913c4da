"""Matrix primitives: vec/ivec, commutation matrix, Kronecker product,
sign matrix and pseudo-determinant.

``vec`` is column-major (columns stacked in order) independently of the
memory layout of the input array.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, NumericalDegeneracyError

DEFAULT_RANK_TOL = 1e-9
SYMMETRY_TOL = 1e-12


def vec(A) -> np.ndarray:
    """Stack the columns of ``A`` into a vector of length ``m * n``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return A.reshape(-1, order="F").copy()


def ivec(v, m: int, n: int) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild an ``m x n`` matrix from its columns."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != m * n:
        raise InvalidArgumentError(
            f"ivec: vector of length {v.size} cannot fill a {m}x{n} matrix"
        )
    return v.reshape((m, n), order="F").copy()


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """Return the ``mn x mn`` permutation matrix ``T`` with
    ``vec(A) == T @ vec(A.T)`` for every ``m x n`` matrix ``A``.
    """
    if m < 1 or n < 1:
        raise InvalidArgumentError("commutation_matrix needs m, n >= 1")
    # vec(A)[j*m + i] = A[i, j] = vec(A.T)[i*n + j]
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    rows = (j * m + i).ravel()
    cols = (i * n + j).ravel()
    T = np.zeros((m * n, m * n))
    T[rows, cols] = 1.0
    return T


def kron(A, B) -> np.ndarray:
    """Kronecker product; ``kron(A, B) @ vec(X) == vec(B @ X @ A.T)``."""
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def sign_matrix(A, zero_tol: float = 1e-12) -> np.ndarray:
    """Entrywise sign with ``|a| <= zero_tol`` mapped to 0."""
    if zero_tol < 0:
        raise InvalidArgumentError("zero_tol must be non-negative")
    A = np.asarray(A, dtype=float)
    S = np.sign(A)
    S[np.abs(A) <= zero_tol] = 0.0
    return S


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def check_symmetric(A, tol: float = SYMMETRY_TOL, name: str = "matrix") -> np.ndarray:
    """Return ``A`` as a float array, raising if it is not square-symmetric.

    The tolerance is absolute, scaled by ``max(1, max|A|)`` so that large
    covariance entries with round-off do not trip the check.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > tol * scale:
        raise InvalidArgumentError(f"{name} is not symmetric")
    return A


def pseudo_det(A, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Product of the non-zero eigenvalues of a symmetric matrix.

    An eigenvalue counts as non-zero when ``|lam| > rank_tol * max(|lam|_max, 1)``.
    The empty product (all eigenvalues below threshold) is 1.
    """
    if rank_tol <= 0:
        raise InvalidArgumentError("rank_tol must be positive")
    A = check_symmetric(A, name="pseudo_det argument")
    lam = np.linalg.eigvalsh(symmetrize(A))
    if lam.size == 0:
        return 1.0
    thresh = rank_tol * max(float(np.max(np.abs(lam))), 1.0)
    keep = lam[np.abs(lam) > thresh]
    return float(np.prod(keep)) if keep.size else 1.0


def pd_repair(A, floor_rel: float = 1e-6):
    """Floor the eigenvalues of a symmetric matrix at ``floor_rel * max(lam_max, 1)``.

    Returns the repaired matrix and the number of eigenvalues that were raised.
    """
    A = symmetrize(A)
    lam, Q = np.linalg.eigh(A)
    floor = floor_rel * max(float(lam[-1]), 1.0)
    n_raised = int(np.sum(lam < floor))
    if n_raised == 0:
        return A, 0
    lam = np.maximum(lam, floor)
    return symmetrize((Q * lam) @ Q.T), n_raised


def inv_sqrt_spd(A) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    lam, Q = np.linalg.eigh(symmetrize(A))
    if lam[0] <= 0:
        raise NumericalDegeneracyError("matrix is not positive definite")
    return (Q / np.sqrt(lam)) @ Q.T
