"""Distribution comparison (shared-bin KL, KS, ECDF) and prediction metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConstantInput, ContractError, EmptySample, LengthMismatch

DEFAULT_BINS = 50
DEFAULT_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class SharedBinHistogramPair:
    bin_edges: np.ndarray
    P: np.ndarray
    Q: np.ndarray


def shared_bins(observed, imputed, K: int = DEFAULT_BINS) -> SharedBinHistogramPair:
    """Equal-width bins over the union range; P from ``observed``, Q from ``imputed``.

    Bins are half-open ``[b_k, b_{k+1})`` except the last, which is closed.
    A zero-width union range is widened to ``[x - 0.5, x + 0.5]``.
    """
    a = np.asarray(observed, dtype=float).ravel()
    b = np.asarray(imputed, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    if K < 2:
        raise ContractError("K must be at least 2")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, K + 1)
    P = np.histogram(a, bins=edges)[0] / a.size
    Q = np.histogram(b, bins=edges)[0] / b.size
    return SharedBinHistogramPair(edges, P, Q)


def kl_divergence(pair: SharedBinHistogramPair, eps: float = DEFAULT_EPS) -> float:
    """KL(P || Q) in nats after adding ``eps`` to every bin."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    p = pair.P + eps
    q = pair.Q + eps
    return float(np.sum(p * np.log(p / q)))


@dataclass(frozen=True)
class DivergenceScore:
    """Per-feature KL values grouped by modality.

    ``overall_sum`` follows the modality-averaged sum over features;
    ``overall_mean`` replaces the inner sum by a mean.
    """

    per_feature: dict[str, dict[str, float]]
    per_modality_sum: dict[str, float]
    per_modality_mean: dict[str, float]
    overall_sum: float
    overall_mean: float
    eps: float


def aggregate_kl(per_feature: Mapping[str, Mapping[str, float]], eps: float) -> DivergenceScore:
    mods = [m for m, feats in per_feature.items() if feats]
    if not mods:
        raise ContractError("no scored features")
    sums = {m: float(math.fsum(per_feature[m].values())) for m in mods}
    means = {m: sums[m] / len(per_feature[m]) for m in mods}
    return DivergenceScore(
        {m: dict(per_feature[m]) for m in mods},
        sums,
        means,
        sum(sums.values()) / len(mods),
        sum(means.values()) / len(mods),
        eps,
    )


def ecdf(sample):
    """Return ``(sorted values, cumulative fractions)``."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    if x.size == 0:
        raise EmptySample("sample is empty")
    return x, np.arange(1, x.size + 1) / x.size


def _kolmogorov_sf(lam: float) -> float:
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi-theta form; converges fast for small lambda.
        c = math.sqrt(2 * math.pi) / lam
        total = 0.0
        k = 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
            total += term
            if term < 1e-12 or k > 1000:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - c * total))
    total = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        total += (-1) ** (k - 1) * term
        if term < 1e-12 or k > 1000:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * total))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample KS statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be non-empty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.max(np.abs(fa - fb)))
    lam = d * math.sqrt(a.size * b.size / (a.size + b.size))
    return d, _kolmogorov_sf(lam)


def pearson_r(y, yhat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size != yhat.size:
        raise LengthMismatch("y and yhat differ in length")
    if y.size < 2:
        raise ContractError("need at least two points")
    if np.ptp(y) == 0 or np.ptp(yhat) == 0:
        raise ConstantInput("correlation undefined for constant input")
    dy = y - y.mean()
    dh = yhat - yhat.mean()
    sy = math.sqrt(float(dy @ dy))
    sh = math.sqrt(float(dh @ dh))
    if sy == 0 or sh == 0:
        raise ConstantInput("correlation undefined for constant input")
    return float(np.clip((dy @ dh) / (sy * sh), -1.0, 1.0))


def mae(y, yhat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size != yhat.size:
        raise LengthMismatch("y and yhat differ in length")
    return float(np.mean(np.abs(y - yhat)))


def per_target_metrics(Y: np.ndarray, Yhat: np.ndarray) -> tuple[list[float], list[float]]:
    """Column-wise Pearson r and MAE."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Yhat = np.atleast_2d(np.asarray(Yhat, dtype=float))
    if Y.shape != Yhat.shape:
        raise LengthMismatch("Y and Yhat shapes differ")
    return (
        [pearson_r(Y[:, t], Yhat[:, t]) for t in range(Y.shape[1])],
        [mae(Y[:, t], Yhat[:, t]) for t in range(Y.shape[1])],
    )


def row_mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample std across a report row's per-target values."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
