"""Confounder residualization by OLS with an intercept column."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ContractError, RankDeficient, ShapeMismatch

RANK_RTOL = 1e-10


def design(Z: np.ndarray) -> np.ndarray:
    """``[1 | Z]``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def fit_ols(Z: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Least-squares coefficients of ``T`` on ``[1 | Z]``, shape ``(C + 1, k)``.

    Solved by column-pivoted QR; raises :class:`RankDeficient` when the
    design has a pivot below ``RANK_RTOL`` relative to the largest.
    """
    D = design(Z)
    T = np.asarray(T, dtype=float)
    vec = T.ndim == 1
    if vec:
        T = T[:, None]
    if T.shape[0] != D.shape[0]:
        raise ShapeMismatch("Z and T row counts differ")
    n, c = D.shape
    if n < c:
        raise RankDeficient(f"{n} rows cannot determine {c} coefficients")
    Q, R, piv = linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[-1] <= RANK_RTOL * diag[0]:
        raise RankDeficient("confounder design is rank deficient")
    B = np.empty((c, T.shape[1]))
    B[piv] = linalg.solve_triangular(R, Q.T @ T)
    return B[:, 0] if vec else B


@dataclass(frozen=True, eq=False)
class ResidualizationCoefs:
    gamma_hat: np.ndarray
    beta_hat: np.ndarray
    train_row_ids: tuple[str, ...] = ()

    def __post_init__(self):
        for a in (self.gamma_hat, self.beta_hat):
            if not np.all(np.isfinite(a)):
                raise ContractError("non-finite residualization coefficients")


def fit_residualization(X: np.ndarray, Y: np.ndarray, Z: np.ndarray, row_ids=()) -> ResidualizationCoefs:
    """Fit feature and target coefficients on training rows only."""
    return ResidualizationCoefs(fit_ols(Z, X), fit_ols(Z, Y), tuple(row_ids))


def _apply(M, Z, coef):
    M = np.asarray(M, dtype=float)
    D = design(Z)
    coef = np.asarray(coef, dtype=float)
    if coef.ndim == 1:
        coef = coef[:, None]
    if D.shape[0] != M.shape[0] or D.shape[1] != coef.shape[0] or M.shape[1] != coef.shape[1]:
        raise ShapeMismatch(
            f"shapes do not conform: data {M.shape}, design {D.shape}, coefficients {coef.shape}"
        )
    return D @ coef


def residualize(X: np.ndarray, Z: np.ndarray, gamma_hat: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X - _apply(X, Z, gamma_hat)


def reconstruct(pred_residuals: np.ndarray, Z: np.ndarray, beta_hat: np.ndarray) -> np.ndarray:
    pred_residuals = np.asarray(pred_residuals, dtype=float)
    return pred_residuals + _apply(pred_residuals, Z, beta_hat)


def orthogonality_residual(eps: np.ndarray, Z: np.ndarray) -> float:
    """``max |[1|Z]^T eps|`` over all entries."""
    return float(np.max(np.abs(design(Z).T @ np.asarray(eps, dtype=float))))
