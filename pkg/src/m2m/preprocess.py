"""Expression preprocessing and train-statistics standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateComponent,
    EmptyGroup,
    UnmappedProbe,
)

_SD_FLOOR = 1e-8


def load_probe_map(path: str | Path) -> dict[str, str]:
    """Read a ``probe,gene`` CSV."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != ["probe", "gene"]:
        raise ContractError(f"{path}: header must be 'probe,gene'")
    out = {}
    for r in rows[1:]:
        if len(r) != 2 or not r[0] or not r[1]:
            raise ContractError(f"{path}: bad row {r}")
        if r[0] in out and out[r[0]] != r[1]:
            raise ContractError(f"probe {r[0]!r} mapped to two genes")
        out[r[0]] = r[1]
    return out


def merge_probes_max(
    expression: np.ndarray,
    probe_names: Sequence[str],
    probe_to_gene: Mapping[str, str],
) -> tuple[np.ndarray, list[str]]:
    """Collapse probe columns onto genes, keeping the per-sample maximum.

    Genes appear in order of their first probe.
    """
    expression = np.asarray(expression, dtype=float)
    if expression.ndim != 2 or expression.shape[1] != len(probe_names):
        raise ContractError("expression must be samples x probes, matching probe_names")
    genes: list[str] = []
    members: dict[str, list[int]] = {}
    for j, probe in enumerate(probe_names):
        if probe not in probe_to_gene:
            raise UnmappedProbe(f"probe {probe!r} has no gene")
        g = probe_to_gene[probe]
        if g not in members:
            members[g] = []
            genes.append(g)
        members[g].append(j)
    out = np.column_stack([expression[:, members[g]].max(axis=1) for g in genes])
    return out, genes


@dataclass(frozen=True)
class Gmm2Fit:
    mean1: float
    sd1: float
    weight1: float
    mean2: float
    sd2: float
    weight2: float
    iterations: int
    converged: bool
    log_likelihood: tuple[float, ...] = field(default=(), repr=False)


def _normal_logpdf(x, mu, sd):
    return -0.5 * ((x - mu) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)


def _kmeanspp_split(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c1 = x[rng.integers(x.size)]
    d2 = (x - c1) ** 2
    c2 = x[rng.choice(x.size, p=d2 / d2.sum())]
    centers = np.array([c1, c2])
    for _ in range(20):
        lab = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
        if lab.min() == lab.max():
            break
        new = np.array([x[lab == 0].mean(), x[lab == 1].mean()])
        if np.array_equal(new, centers):
            break
        centers = new
    return lab


def fit_gmm2(
    values: Sequence[float], max_iter: int = 500, tol: float = 1e-10, seed: int = 0
) -> Gmm2Fit:
    """EM for a two-component univariate Gaussian mixture.

    Components are returned ordered so that ``mean1 <= mean2``. The
    log-likelihood is checked to be non-decreasing at every iteration.
    """
    x = np.asarray(values, dtype=float).ravel()
    if np.unique(x).size < 4:
        raise DegenerateComponent("need at least 4 distinct values")
    rng = np.random.default_rng(seed)
    lab = _kmeanspp_split(x, rng)
    resp = np.column_stack([lab == 0, lab == 1]).astype(float)
    if resp.sum(axis=0).min() == 0:
        raise DegenerateComponent("initial split left a component empty")

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        nk = resp.sum(axis=0)
        w = nk / x.size
        mu = resp.T @ x / nk
        var = (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk
        sd = np.sqrt(var)
        if sd.min() < _SD_FLOOR:
            raise DegenerateComponent(f"component sd collapsed to {sd.min():.3g}")
        logp = np.column_stack(
            [np.log(w[k]) + _normal_logpdf(x, mu[k], sd[k]) for k in range(2)]
        )
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        ll = float(lse.sum())
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise AssertionError(f"EM log-likelihood decreased: {history[-1]} -> {ll}")
        history.append(ll)
        resp = np.exp(logp - lse[:, None])
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break

    order = np.argsort(mu)
    a, b = order
    return Gmm2Fit(
        float(mu[a]), float(sd[a]), float(w[a]),
        float(mu[b]), float(sd[b]), float(w[b]),
        it, converged, tuple(history),
    )


def expression_threshold(fit: Gmm2Fit) -> float:
    """Midpoint between the two component means."""
    return (fit.mean1 + fit.mean2) / 2.0


def filter_low_expression(
    genes: np.ndarray, gene_names: Sequence[str], seed: int = 0
) -> tuple[np.ndarray, list[str], float]:
    """Drop genes whose median across samples falls below the mixture threshold."""
    genes = np.asarray(genes, dtype=float)
    med = np.median(genes, axis=0)
    thr = expression_threshold(fit_gmm2(med, seed=seed))
    keep = med >= thr
    return genes[:, keep], [g for g, k in zip(gene_names, keep) if k], thr


@dataclass(frozen=True)
class RankedFeatures:
    features: tuple[tuple[str, float], ...]
    group_a: str
    group_b: str

    @property
    def names(self) -> list[str]:
        return [f for f, _ in self.features]


def log2_fold_change(
    genes: np.ndarray,
    gene_names: Sequence[str],
    labels: Sequence[str],
    group_a: str,
    group_b: str,
) -> RankedFeatures:
    """Rank genes by |mean(group_a) - mean(group_b)| on log2-scale data."""
    genes = np.asarray(genes, dtype=float)
    labels = np.asarray(labels)
    in_a, in_b = labels == group_a, labels == group_b
    if not in_a.any() or not in_b.any():
        raise EmptyGroup(f"groups {group_a!r}/{group_b!r} need at least one sample each")
    fc = genes[in_a].mean(axis=0) - genes[in_b].mean(axis=0)
    order = np.argsort(-np.abs(fc), kind="stable")
    return RankedFeatures(
        tuple((gene_names[k], float(fc[k])) for k in order), group_a, group_b
    )


@dataclass(frozen=True, eq=False)
class ColumnStats:
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray


def fit_column_stats(values: np.ndarray, mask: np.ndarray | None = None) -> ColumnStats:
    """Per-column mean and sample sd over observed cells.

    Columns with fewer than two observations or zero spread are flagged
    constant; they pass through :func:`standardize` unchanged.
    """
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.isfinite(values)
    p = values.shape[1]
    mean = np.zeros(p)
    sd = np.ones(p)
    constant = np.zeros(p, dtype=bool)
    for j in range(p):
        col = values[mask[:, j], j]
        if col.size == 0:
            constant[j] = True
            continue
        mean[j] = col.mean()
        s = col.std(ddof=1) if col.size > 1 else 0.0
        if s > 0:
            sd[j] = s
        else:
            constant[j] = True
    mean[constant] = 0.0
    return ColumnStats(mean, sd, constant)


def standardize(values: np.ndarray, stats: ColumnStats) -> np.ndarray:
    return (np.asarray(values, dtype=float) - stats.mean) / stats.sd


def unstandardize(values: np.ndarray, stats: ColumnStats) -> np.ndarray:
    return np.asarray(values, dtype=float) * stats.sd + stats.mean
