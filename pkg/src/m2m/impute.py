"""Imputer family and divergence-based imputer selection.

Imputers are assigned per modality. Continuous methods work on columns
standardized with training statistics; every observed cell of the input is
copied through untouched, so the completed matrix agrees bit-for-bit with
the source wherever the source was observed.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .datamodel import CONTINUOUS, ORDINAL, MultimodalDataset
from .divergence import DEFAULT_BINS, DEFAULT_EPS, aggregate_kl, kl_divergence, shared_bins
from .errors import (
    AllMissingColumn,
    ContractError,
    InvalidConfig,
    NoCoObservedFeatures,
    NoMissingCells,
    SchemaMismatch,
)
from .preprocess import ColumnStats, fit_column_stats, standardize

METHODS = ("mean", "most_frequent", "constant", "knn", "iterative")
_KINDS_FOR = {
    "mean": frozenset({CONTINUOUS}),
    "iterative": frozenset({CONTINUOUS}),
    "most_frequent": frozenset({ORDINAL}),
    "constant": frozenset({ORDINAL}),
    "knn": frozenset({CONTINUOUS, ORDINAL}),
}
_CONVERGED = 1e-6


@dataclass(frozen=True)
class ImputerSpec:
    method: str
    k: int = 1
    value: float = -1.0
    max_rounds: int = 10
    ridge_lambda: float = 1e-3
    normalized_distance: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown imputer {self.method!r}")
        if self.method == "knn" and self.k < 1:
            raise InvalidConfig("knn needs k >= 1")
        if self.method == "iterative" and (self.max_rounds < 1 or self.ridge_lambda < 0):
            raise InvalidConfig("iterative needs max_rounds >= 1 and ridge_lambda >= 0")

    @property
    def applicable_kinds(self) -> frozenset:
        return _KINDS_FOR[self.method]

    @property
    def label(self) -> str:
        if self.method == "knn":
            return f"knn({self.k})"
        if self.method == "constant":
            v = int(self.value) if float(self.value).is_integer() else self.value
            return f"constant({v})"
        return self.method

    @classmethod
    def parse(cls, item: Union[str, Mapping, "ImputerSpec"]) -> "ImputerSpec":
        """Accept ``"knn(2)"``, ``"constant(-1)"``, ``"mean"`` or a dict of fields."""
        if isinstance(item, ImputerSpec):
            return item
        if isinstance(item, Mapping):
            return cls(**item)
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", str(item))
        if not m:
            raise InvalidConfig(f"cannot parse imputer {item!r}")
        name, arg = m.group(1), m.group(2)
        if name == "knn":
            return cls("knn", k=int(arg) if arg else 1)
        if name == "constant":
            return cls("constant", value=float(arg) if arg else -1.0)
        if arg is not None:
            raise InvalidConfig(f"imputer {name!r} takes no argument")
        return cls(name)


CONTINUOUS_CANDIDATES = tuple(
    ImputerSpec.parse(s) for s in ("mean", "knn(1)", "knn(2)", "knn(5)", "iterative")
)
ORDINAL_CANDIDATES = tuple(
    ImputerSpec.parse(s) for s in ("most_frequent", "knn(1)", "constant(-1)")
)
_KIND_DEFAULT = {CONTINUOUS: ImputerSpec("mean"), ORDINAL: ImputerSpec("most_frequent")}

PlanLike = Union[ImputerSpec, str, Mapping[str, Union[ImputerSpec, str, Mapping]]]


def resolve_plan(spec: PlanLike, dataset: MultimodalDataset) -> dict[str, ImputerSpec]:
    """Map every modality to an imputer.

    A single spec covers every modality it applies to; the others get the
    kind default (mean / most_frequent). A mapping may be keyed by modality
    name or by kind.
    """
    plan = {}
    if isinstance(spec, (ImputerSpec, str)):
        one = ImputerSpec.parse(spec)
        for m in dataset.schema:
            plan[m.name] = one if m.kind in one.applicable_kinds else _KIND_DEFAULT[m.kind]
        return plan
    known = {m.name for m in dataset.schema} | {CONTINUOUS, ORDINAL}
    for key in spec:
        if key not in known:
            raise InvalidConfig(f"imputer plan key {key!r} is neither a modality nor a kind")
    for m in dataset.schema:
        raw = spec.get(m.name, spec.get(m.kind))
        s = _KIND_DEFAULT[m.kind] if raw is None else ImputerSpec.parse(raw)
        if m.kind not in s.applicable_kinds:
            raise InvalidConfig(f"{s.label} does not apply to {m.kind} modality {m.name!r}")
        plan[m.name] = s
    return plan


def plan_label(plan: Mapping[str, ImputerSpec], dataset: MultimodalDataset) -> str:
    """Short text such as ``knn(1)|constant(-1)`` (continuous | ordinal)."""
    parts = []
    for kind in (CONTINUOUS, ORDINAL):
        labels = sorted({plan[m.name].label for m in dataset.schema if m.kind == kind})
        if labels:
            parts.append("+".join(labels))
    return "|".join(parts)


@dataclass(frozen=True, eq=False)
class _Iterative:
    columns: np.ndarray
    coef: dict[int, tuple[np.ndarray, float]]
    max_rounds: int


@dataclass(frozen=True, eq=False)
class FittedImputer:
    """Everything needed to impute rows not seen during fitting."""

    plan: dict[str, ImputerSpec]
    schema: tuple
    feature_names: tuple[str, ...]
    train_row_ids: tuple[str, ...]
    stats: ColumnStats
    column_fill: dict[int, float] = field(repr=False)
    train_raw: np.ndarray | None = field(default=None, repr=False)
    train_std: np.ndarray | None = field(default=None, repr=False)
    train_mask: np.ndarray | None = field(default=None, repr=False)
    iterative: _Iterative | None = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    """Imputer output; ``values`` has no missing cells."""

    source: MultimodalDataset
    values: np.ndarray
    provenance: dict[str, ImputerSpec]
    donors: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict, repr=False)

    @property
    def dataset(self) -> MultimodalDataset:
        return self.source.with_values(self.values, np.ones_like(self.source.mask))

    def donor_ids(self) -> set[str]:
        return {d for ds in self.donors.values() for d in ds}


def _mode(col: np.ndarray) -> float:
    vals, counts = np.unique(col, return_counts=True)
    return float(vals[np.argmax(counts)])  # np.unique sorts, so ties go to the smallest


def _ridge(A: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    am = A.mean(axis=0)
    ym = y.mean()
    Ac = A - am
    G = Ac.T @ Ac + lam * np.eye(A.shape[1])
    w = np.linalg.lstsq(G, Ac.T @ (y - ym), rcond=None)[0]
    return w, float(ym - am @ w)


def _fit_iterative(xs, mask, columns, spec):
    x = np.where(mask, xs, 0.0)
    p = x.shape[1]
    coef = {}
    for _ in range(spec.max_rounds):
        change = 0.0
        for j in columns:
            obs = mask[:, j]
            others = np.array([c for c in range(p) if c != j], dtype=int)
            if obs.sum() < 2 or others.size == 0:
                coef[j] = (np.zeros(others.size), float(x[obs, j].mean()) if obs.any() else 0.0)
            else:
                coef[j] = _ridge(x[obs][:, others], x[obs, j], spec.ridge_lambda)
            miss = ~obs
            if miss.any():
                w, b = coef[j]
                pred = x[miss][:, others] @ w + b
                change = max(change, float(np.max(np.abs(pred - x[miss, j]))))
                x[miss, j] = pred
        if change < _CONVERGED:
            break
    return _Iterative(np.asarray(columns, dtype=int), coef, spec.max_rounds)


def _apply_iterative(it: _Iterative, xs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, xs, 0.0)
    p = x.shape[1]
    for _ in range(it.max_rounds):
        change = 0.0
        for j in it.columns:
            miss = ~mask[:, j]
            if not miss.any():
                continue
            others = np.array([c for c in range(p) if c != j], dtype=int)
            w, b = it.coef[j]
            pred = x[miss][:, others] @ w + b
            change = max(change, float(np.max(np.abs(pred - x[miss, j]))))
            x[miss, j] = pred
        if change < _CONVERGED:
            break
    return x


def fit_imputer(spec: PlanLike, train: MultimodalDataset) -> FittedImputer:
    """Capture the statistics each modality's imputer needs."""
    plan = resolve_plan(spec, train)
    return _fit(plan, train)


def _fit(plan: Mapping[str, ImputerSpec], train: MultimodalDataset) -> FittedImputer:
    stats = fit_column_stats(train.values, train.mask)
    column_fill: dict[int, float] = {}
    knn_needed = False
    iter_cols: list[int] = []
    iter_spec = None
    for m in train.schema:
        if m.name not in plan:
            continue
        s = plan[m.name]
        cols = train.columns_of(m.name)
        observed = train.mask[:, cols].sum(axis=0)
        if s.method != "constant" and np.any(observed == 0):
            bad = [m.feature_names[k] for k in np.flatnonzero(observed == 0)]
            raise AllMissingColumn(f"no observed training values for {bad}")
        if s.method == "mean":
            for j in cols:
                column_fill[j] = float(train.values[train.mask[:, j], j].mean())
        elif s.method == "most_frequent":
            for j in cols:
                column_fill[j] = _mode(train.values[train.mask[:, j], j])
        elif s.method == "constant":
            for j in cols:
                column_fill[j] = float(s.value)
        elif s.method == "knn":
            if train.n_rows < s.k:
                raise ContractError(f"knn({s.k}) needs at least {s.k} training rows")
            knn_needed = True
        elif s.method == "iterative":
            if iter_spec is not None and iter_spec != s:
                raise InvalidConfig("all iterative modalities must share one configuration")
            iter_spec = s
            iter_cols.extend(int(j) for j in cols)

    xs = standardize(train.values, stats)
    iterative = None
    if iter_spec is not None:
        iterative = _fit_iterative(xs, train.mask, sorted(iter_cols), iter_spec)
    return FittedImputer(
        plan=dict(plan),
        schema=train.schema,
        feature_names=tuple(train.feature_names),
        train_row_ids=train.row_ids,
        stats=stats,
        column_fill=column_fill,
        train_raw=train.values if knn_needed else None,
        train_std=np.where(train.mask, xs, 0.0) if knn_needed else None,
        train_mask=train.mask if knn_needed else None,
        iterative=iterative,
    )


def _sq_distances(xt, mt, xr, mr, normalized, chunk=64):
    """Squared Euclidean distance over co-observed features; inf if none shared."""
    n_t, p = xt.shape
    out = np.empty((n_t, xr.shape[0]))
    for s in range(0, n_t, chunk):
        a, am = xt[s:s + chunk, None, :], mt[s:s + chunk, None, :]
        both = am & mr[None, :, :]
        d2 = np.where(both, (a - xr[None, :, :]) ** 2, 0.0).sum(axis=2)
        cnt = both.sum(axis=2)
        if normalized:
            d2 = np.where(cnt > 0, d2 * p / np.maximum(cnt, 1), 0.0)
        out[s:s + chunk] = np.where(cnt > 0, d2, np.inf)
    return out


def _fill_knn(fitted, target, filled, columns_k, donors):
    need = np.flatnonzero((~target.mask[:, [j for j, _ in columns_k]]).any(axis=1))
    if need.size == 0:
        return
    xt = np.where(target.mask, standardize(target.values, fitted.stats), 0.0)[need]
    d2 = _sq_distances(
        xt,
        target.mask[need],
        fitted.train_std,
        fitted.train_mask,
        any(fitted.plan[m.name].normalized_distance for m in fitted.schema
            if fitted.plan.get(m.name) is not None and fitted.plan[m.name].method == "knn"),
    )
    kinds = target.column_kinds
    names = target.feature_names
    for r, i in enumerate(need):
        if not np.isfinite(d2[r]).any():
            raise NoCoObservedFeatures(
                f"row {target.row_ids[i]!r} shares no observed feature with any training row"
            )
        for j, k in columns_k:
            if target.mask[i, j]:
                continue
            cand = np.flatnonzero(fitted.train_mask[:, j] & np.isfinite(d2[r]))
            if cand.size == 0:
                raise NoCoObservedFeatures(
                    f"row {target.row_ids[i]!r}: no comparable training row observes {names[j]!r}"
                )
            order = np.argsort(d2[r, cand], kind="stable")[:k]
            picked = cand[order]
            v = fitted.train_raw[picked, j].mean()
            if kinds[j] == ORDINAL and picked.size > 1:
                v = float(np.round(v))
            filled[i, j] = v
            donors[(target.row_ids[i], names[j])] = tuple(fitted.train_row_ids[t] for t in picked)


def _check_schema(fitted: FittedImputer, target: MultimodalDataset) -> None:
    if tuple(target.feature_names) != fitted.feature_names or [
        (m.name, m.kind) for m in target.schema
    ] != [(m.name, m.kind) for m in fitted.schema]:
        raise SchemaMismatch("target schema differs from the training schema")


def _fill(fitted: FittedImputer, target: MultimodalDataset, donors: dict) -> np.ndarray:
    _check_schema(fitted, target)
    filled = np.array(target.values, dtype=float)
    for j, v in fitted.column_fill.items():
        filled[~target.mask[:, j], j] = v
    knn_cols = []
    for m in target.schema:
        s = fitted.plan.get(m.name)
        if s is not None and s.method == "knn":
            knn_cols.extend((int(j), s.k) for j in target.columns_of(m.name))
    if knn_cols:
        _fill_knn(fitted, target, filled, knn_cols, donors)
    if fitted.iterative is not None:
        cols = fitted.iterative.columns
        if (~target.mask[:, cols]).any():
            xs = standardize(target.values, fitted.stats)
            done = _apply_iterative(fitted.iterative, xs, target.mask)
            back = done * fitted.stats.sd + fitted.stats.mean
            for j in cols:
                miss = ~target.mask[:, j]
                filled[miss, j] = back[miss, j]
    return np.where(target.mask, target.values, filled)


def impute(fitted: FittedImputer, target: MultimodalDataset) -> CompletedDataset:
    """Fill every missing cell of ``target``; observed cells are copied as-is."""
    donors: dict = {}
    values = _fill(fitted, target, donors)
    if not np.all(np.isfinite(values)):
        raise ContractError("imputation left missing cells (modality without an imputer?)")
    return CompletedDataset(target, values, dict(fitted.plan), donors)


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionEntry:
    modality: str
    imputer: str
    kl_sum: float
    kl_mean: float
    n_features: int


@dataclass(frozen=True)
class ImputerSelectionReport:
    entries: tuple[SelectionEntry, ...]
    chosen: dict[str, ImputerSpec]
    overall: dict[str, float]
    bins: int
    eps: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["modality", "imputer", "kl_sum", "kl_mean", "n_features", "chosen"])
            for e in self.entries:
                w.writerow([
                    e.modality, e.imputer, repr(e.kl_sum), repr(e.kl_mean), e.n_features,
                    int(self.chosen[e.modality].label == e.imputer),
                ])


def modality_kl(
    data: MultimodalDataset, completed: np.ndarray, modality: str, bins: int, eps: float
):
    """Per-feature KL between observed cells and imputed cells of one modality."""
    names = data.feature_names
    out = {}
    for j in data.columns_of(modality):
        obs = data.mask[:, j]
        if obs.all() or not obs.any():
            continue
        pair = shared_bins(data.values[obs, j], completed[~obs, j], bins)
        out[names[j]] = kl_divergence(pair, eps)
    return out


def select_imputer(
    candidates: Sequence[ImputerSpec | str],
    data: MultimodalDataset,
    bins: int = DEFAULT_BINS,
    eps: float = DEFAULT_EPS,
) -> ImputerSelectionReport:
    """Score each applicable candidate per modality by KL and keep the argmin.

    Ties go to the earlier candidate in ``candidates``.
    """
    specs = [ImputerSpec.parse(c) for c in candidates]
    entries = []
    chosen = {}
    per_candidate: dict[str, dict[str, dict[str, float]]] = {}
    scored_any = False
    for m in data.schema:
        cols = data.columns_of(m.name)
        if data.mask[:, cols].all():
            continue
        pool = [s for s in specs if m.kind in s.applicable_kinds]
        if not pool:
            raise InvalidConfig(f"no candidate imputer for {m.kind} modality {m.name!r}")
        best = None
        for s in pool:
            fitted = _fit({m.name: s}, data)
            kl = modality_kl(data, _fill(fitted, data, {}), m.name, bins, eps)
            if not kl:
                continue
            scored_any = True
            total = float(sum(kl.values()))
            entries.append(SelectionEntry(m.name, s.label, total, total / len(kl), len(kl)))
            per_candidate.setdefault(s.label, {})[m.name] = kl
            if best is None or total < best[0]:
                best = (total, s)
        if best is not None:
            chosen[m.name] = best[1]
    if not scored_any:
        raise NoMissingCells("no modality has both observed and missing cells")
    overall = {lab: aggregate_kl(v, eps).overall_sum for lab, v in per_candidate.items()}
    return ImputerSelectionReport(tuple(entries), chosen, overall, bins, eps)
