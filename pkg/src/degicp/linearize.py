"""Point-to-plane least-squares system.

Row ``i`` of the stacked system is ``[(p_i x n_i)^T, n_i^T]`` and its
right-hand side is ``n_i . (q_i - p_i)``; the 6x6 normal equations are the
sums of the outer products of those rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import CorrespondenceSet


class EmptyCorrespondences(ValueError):
    pass


@dataclass(frozen=True)
class ResidualRows:
    rows: np.ndarray       # (N, 6)
    residuals: np.ndarray  # (N,)

    def __len__(self):
        return len(self.residuals)


@dataclass(frozen=True)
class NormalEquations:
    A: np.ndarray
    b: np.ndarray
    n_pairs: int

    @property
    def A_rr(self) -> np.ndarray:
        return self.A[:3, :3]

    @property
    def A_tt(self) -> np.ndarray:
        return self.A[3:, 3:]


def build_rows(corr: CorrespondenceSet) -> ResidualRows:
    if len(corr) == 0:
        raise EmptyCorrespondences("no correspondences to linearize")
    p, q, n = corr.source_pts, corr.ref_pts, corr.ref_normals
    rows = np.hstack([np.cross(p, n), n])
    residuals = np.einsum("ij,ij->i", n, q - p)
    return ResidualRows(rows, residuals)


def _pairwise_sum(terms: np.ndarray) -> np.ndarray:
    # numpy reduces contiguous axes pairwise; put the summation axis last
    return np.ascontiguousarray(terms.T).sum(axis=-1)


def build_normal_equations(rows: ResidualRows, weights=None) -> NormalEquations:
    """``A = sum w_i row_i row_i^T`` and ``b = sum w_i row_i residual_i``."""
    J, r = rows.rows, rows.residuals
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        Jw = J * w[:, None]
    else:
        Jw = J
    outer = (Jw[:, :, None] * J[:, None, :]).reshape(len(r), 36)
    A = _pairwise_sum(outer).reshape(6, 6)
    A = 0.5 * (A + A.T)
    b = _pairwise_sum(Jw * r[:, None])
    return NormalEquations(A, b, len(r))


def residual_cost(corr_or_rows, x=None) -> float:
    """Squared linearized residual ``sum (row_i . x - residual_i)^2``."""
    rows = corr_or_rows if isinstance(corr_or_rows, ResidualRows) else build_rows(corr_or_rows)
    e = -rows.residuals if x is None else rows.rows @ np.asarray(x, dtype=float) - rows.residuals
    return float(np.sum(e * e))
