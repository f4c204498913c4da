"""Estimation-error and variable-selection metrics for projection matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError

DIAG_TOL = 1e-4


@dataclass(frozen=True)
class SelectionCounts:
    tp: int
    fp: int
    fn_: int
    f1: float


def projection_error(P_hat, P_true) -> float:
    """Frobenius distance between two projection matrices."""
    P_hat = np.asarray(P_hat, dtype=float)
    P_true = np.asarray(P_true, dtype=float)
    if P_hat.shape != P_true.shape:
        raise InvalidArgumentError(
            f"projection shapes differ: {P_hat.shape} vs {P_true.shape}"
        )
    return float(np.linalg.norm(P_hat - P_true))


def true_projection(B) -> np.ndarray:
    """Orthogonal projection onto the column space of ``B``: ``B (B'B)^{-1} B'``."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    s = np.linalg.svd(B, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise InvalidArgumentError("B must have full column rank")
    P = B @ np.linalg.solve(B.T @ B, B.T)
    return 0.5 * (P + P.T)


def estimated_support(P_hat, diag_tol: float = DIAG_TOL) -> set:
    return {int(j) for j in np.flatnonzero(np.diag(np.asarray(P_hat)) > diag_tol)}


def selection_counts(P_hat, true_support: Iterable[int], diag_tol: float = DIAG_TOL) -> SelectionCounts:
    """TP/FP/FN of the estimated support ``{j : P_hat[j, j] > diag_tol}`` and F1."""
    P_hat = np.asarray(P_hat, dtype=float)
    truth = {int(j) for j in true_support}
    p = P_hat.shape[0]
    if any(j < 0 or j >= p for j in truth):
        raise InvalidArgumentError("true support index out of range")
    est = estimated_support(P_hat, diag_tol)
    tp = len(est & truth)
    fp = len(est - truth)
    fn_ = len(truth - est)
    denom = 2 * tp + fp + fn_
    f1 = 2 * tp / denom if denom > 0 else 0.0
    return SelectionCounts(tp, fp, fn_, f1)
