"""Permutation importance, exact Shapley values and region tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .divergence import pearson_r
from .errors import (
    ConstantInput,
    ConstantPrediction,
    ContractError,
    MalformedAtlasRow,
    ShapeMismatch,
    TooManyFeatures,
)

MAX_SHAPLEY_FEATURES = 15


def _predict_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    f = model.predict if hasattr(model, "predict") else model
    if not callable(f):
        raise ContractError("model must be callable or expose predict()")

    def run(X):
        out = np.asarray(f(X), dtype=float)
        return out[:, None] if out.ndim == 1 else out

    return run


def _r_per_target(Y, Yhat):
    try:
        return np.array([pearson_r(Y[:, t], Yhat[:, t]) for t in range(Y.shape[1])])
    except ConstantInput as exc:
        raise ConstantPrediction(str(exc)) from None


@dataclass(frozen=True, eq=False)
class ImportanceReport:
    """Feature scores, ``scores[feature, target]``; ``mean`` averages targets."""

    method: str
    feature_names: tuple[str, ...]
    target_names: tuple[str, ...]
    scores: np.ndarray
    repeats: int | None = None
    seed: int | None = None
    baseline_r: np.ndarray | None = None
    per_repeat: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def score_of(self, feature: str) -> float:
        return float(self.mean[self.feature_names.index(feature)])

    def rows(self):
        k = "" if self.repeats is None else self.repeats
        s = "" if self.seed is None else self.seed
        for j, f in enumerate(self.feature_names):
            for t, name in enumerate(self.target_names):
                yield [f, name, repr(float(self.scores[j, t])), self.method, k, s]
            if len(self.target_names) > 1:
                yield [f, "mean", repr(float(self.mean[j])), self.method, k, s]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "target", "score", "method", "K", "seed"])
            w.writerows(self.rows())


def permutation_importance(
    model,
    X: np.ndarray,
    Y: np.ndarray,
    K: int = 10,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
    target_names: Sequence[str] | None = None,
    shuffle: Callable[[np.random.Generator, int], np.ndarray] | None = None,
) -> ImportanceReport:
    """Drop in per-target Pearson r when one column is shuffled, averaged over K shuffles.

    ``shuffle(rng, n)`` returns the row permutation; it defaults to
    ``rng.permutation``. Features are visited in column order, each drawing
    its K permutations from one seeded generator.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ShapeMismatch("X and Y rows differ")
    if K < 1:
        raise ContractError("K must be >= 1")
    f = _predict_fn(model)
    shuffle = shuffle or (lambda rng, n: rng.permutation(n))
    rng = np.random.default_rng(seed)
    base = _r_per_target(Y, f(X))
    n, p = X.shape
    drops = np.zeros((p, K, Y.shape[1]))
    for j in range(p):
        for k in range(K):
            Xp = X.copy()
            Xp[:, j] = X[shuffle(rng, n), j]
            drops[j, k] = base - _r_per_target(Y, f(Xp))
    return ImportanceReport(
        "permutation",
        tuple(feature_names or (f"x{j}" for j in range(p))),
        tuple(target_names or (f"y{t}" for t in range(Y.shape[1]))),
        drops.mean(axis=1),
        K,
        seed,
        base,
        drops,
    )


@dataclass(frozen=True, eq=False)
class ShapleyReport:
    """``phi[feature, target]`` for one explained row."""

    phi: np.ndarray
    features: tuple[int, ...]
    background: np.ndarray
    prediction: np.ndarray
    base_value: np.ndarray

    @property
    def q(self) -> int:
        return len(self.features)

    def efficiency_residual(self) -> float:
        return float(np.max(np.abs(self.phi.sum(axis=0) - (self.prediction - self.base_value))))


def shapley_exact(model, x, background, features: Sequence[int] | None = None) -> ShapleyReport:
    """Exact Shapley values by enumerating all 2**q coalitions.

    Features outside the coalition are set to ``background`` (training
    means); features not in ``features`` stay at ``x``. Sums use
    ``math.fsum``, so features whose coalition values are exactly symmetric
    get bit-identical values.
    """
    x = np.asarray(x, dtype=float).ravel()
    background = np.asarray(background, dtype=float).ravel()
    if background.shape != x.shape:
        raise ShapeMismatch("background must match the row length")
    feats = tuple(range(x.size)) if features is None else tuple(int(j) for j in features)
    q = len(feats)
    if q > MAX_SHAPLEY_FEATURES:
        raise TooManyFeatures(f"exact enumeration supports q <= {MAX_SHAPLEY_FEATURES}, got {q}")
    if q == 0:
        raise ContractError("no features to explain")
    f = _predict_fn(model)

    codes = np.arange(2 ** q)
    bits = ((codes[:, None] >> np.arange(q)) & 1).astype(bool)
    rows = np.tile(x, (codes.size, 1))
    idx = np.array(feats)
    rows[:, idx] = np.where(bits, x[idx], background[idx])
    v = f(rows)

    size = bits.sum(axis=1)
    weight = np.array(
        [math.factorial(s) * math.factorial(q - s - 1) / math.factorial(q) for s in range(q)]
    )
    phi = np.zeros((q, v.shape[1]))
    for j in range(q):
        without = codes[~bits[:, j]]
        w = weight[size[without]]
        for t in range(v.shape[1]):
            terms = w * (v[without | (1 << j), t] - v[without, t])
            phi[j, t] = math.fsum(terms.tolist())
    return ShapleyReport(phi, feats, background, v[-1], v[0])


def shapley_importance(
    model, X, background, features=None, feature_names=None, target_names=None
) -> ImportanceReport:
    """Mean |phi| over the rows of ``X``, as an importance report."""
    X = np.asarray(X, dtype=float)
    reps = [shapley_exact(model, row, background, features) for row in X]
    mean_abs = np.mean([np.abs(r.phi) for r in reps], axis=0)
    feats = reps[0].features
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    return ImportanceReport(
        "shapley",
        tuple(names[j] for j in feats),
        tuple(target_names or (f"y{t}" for t in range(mean_abs.shape[1]))),
        mean_abs,
    )


def mask_report(importance, feature_names) -> ImportanceReport:
    """Wrap averaged attention-mask importance (one score per feature)."""
    g = np.asarray(importance.global_importance)[:, None]
    return ImportanceReport("mask", tuple(feature_names), ("all",), g)


@dataclass(frozen=True)
class RegionRow:
    rank: int
    feature: str
    region: str
    network: str
    score: float


@dataclass(frozen=True)
class RegionTable:
    rows: tuple[RegionRow, ...]
    overflow: tuple[tuple[str, float], ...]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "feature", "region", "network", "score"])
            for r in self.rows:
                w.writerow([r.rank, r.feature, r.region, r.network, repr(r.score)])
            for name, score in self.overflow:
                w.writerow(["", name, "", "", repr(score)])


def load_atlas(path: str | Path) -> dict[str, tuple[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != ["feature", "region", "network"]:
        raise MalformedAtlasRow(f"{path}: header must be 'feature,region,network'")
    out = {}
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != 3 or not r[0] or not r[1]:
            raise MalformedAtlasRow(f"{path}:{n}: expected feature,region,network, got {r}")
        if r[0] in out:
            raise MalformedAtlasRow(f"{path}:{n}: feature {r[0]!r} listed twice")
        out[r[0]] = (r[1], r[2])
    return out


def region_importance_table(report: ImportanceReport, atlas_map) -> RegionTable:
    """Join target-averaged scores to regions, highest first.

    ``atlas_map`` is a path to a ``feature,region,network`` CSV or an
    already-loaded mapping. Unmapped features go to ``overflow``.
    """
    atlas = atlas_map if isinstance(atlas_map, dict) else load_atlas(atlas_map)
    scores = report.mean
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    rows, overflow = [], []
    for j in order:
        name = report.feature_names[j]
        if name in atlas:
            region, network = atlas[name]
            rows.append(RegionRow(len(rows) + 1, name, region, network, float(scores[j])))
        else:
            overflow.append((name, float(scores[j])))
    return RegionTable(tuple(rows), tuple(overflow))
