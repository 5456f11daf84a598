"""Cross-validation scenarios, leakage audit and model-comparison reports."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .datamodel import (
    ConfounderMatrix,
    Study,
    TargetMatrix,
    load_study,
    split_complete_incomplete,
)
from .divergence import DEFAULT_BINS, DEFAULT_EPS, mae, pearson_r, row_mean_std
from .errors import (
    ConstantInput,
    ContractError,
    EmptyTestSet,
    InvalidConfig,
    LeakageDetected,
    TestRowIncomplete,
    TooFewCompleteRows,
)
from .impute import (
    CONTINUOUS_CANDIDATES,
    ORDINAL_CANDIDATES,
    FittedImputer,
    ImputerSpec,
    fit_imputer,
    impute,
    plan_label,
    resolve_plan,
)
from .predict import fit_predictor, predictor_label
from .residual import ResidualizationCoefs, fit_residualization, reconstruct, residualize

SCENARIOS = ("train_test", "loco", "lomo")
DEFAULT_TEST_SIZE = {"train_test": 12, "lomo": 20}
FAULTS = (None, "imputer_train", "residual_train", "predictor_train")


def n_threads() -> int:
    env = os.environ.get("M2M_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidConfig(f"M2M_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class CvScenario:
    kind: str
    test_ids: tuple[str, ...] = ()
    test_size: int | None = None
    seed: int = 0
    imputer: Any = field(default_factory=lambda: {"continuous": "knn(1)", "ordinal": "constant(-1)"})
    predictor: Mapping = field(default_factory=lambda: {"kind": "linear"})
    residualize: bool = True
    fault_injection: str | None = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise InvalidConfig(f"unknown scenario {self.kind!r}")
        if self.fault_injection not in FAULTS:
            raise InvalidConfig(f"unknown fault injection {self.fault_injection!r}")
        object.__setattr__(self, "test_ids", tuple(str(t) for t in self.test_ids))


@dataclass
class FittedPipeline:
    """Imputer, optional confounder correction and predictor fitted together."""

    imputer: FittedImputer
    coefs: ResidualizationCoefs | None
    model: Any
    train_row_ids: tuple[str, ...]

    def predict_completed(self, X_completed, Z) -> np.ndarray:
        if self.coefs is None:
            return np.asarray(self.model.predict(X_completed), dtype=float)
        Xr = residualize(X_completed, Z, self.coefs.gamma_hat)
        return reconstruct(self.model.predict(Xr), Z, self.coefs.beta_hat)

    def predict(self, study: Study, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=int)
        Xc = impute(self.imputer, study.dataset.subset(rows)).values
        return self.predict_completed(Xc, study.confounders.values[rows])

    def to_json(self) -> dict:
        return {
            "format": "m2m.pipeline",
            "version": 1,
            "imputer_plan": {m: s.label for m, s in self.imputer.plan.items()},
            "feature_names": list(self.imputer.feature_names),
            "train_row_ids": list(self.train_row_ids),
            "residualization": None if self.coefs is None else {
                "gamma_hat": self.coefs.gamma_hat.tolist(),
                "beta_hat": self.coefs.beta_hat.tolist(),
            },
            "predictor": self.model.to_json() if hasattr(self.model, "to_json") else {"kind": getattr(self.model, "kind", "?")},
        }


def fit_pipeline(study: Study, rows, imputer, predictor: Mapping, residualize_: bool = True,
                 seed: int = 0, imputer_rows=None) -> FittedPipeline:
    """Fit on ``rows`` only. ``imputer_rows`` overrides the imputer's rows (fault injection)."""
    rows = np.asarray(rows, dtype=int)
    ds = study.dataset
    imp_rows = rows if imputer_rows is None else np.asarray(imputer_rows, dtype=int)
    fitted = fit_imputer(imputer, ds.subset(imp_rows))
    Xtr = impute(fitted, ds.subset(rows)).values
    Ytr = study.targets.values[rows]
    Ztr = study.confounders.values[rows]
    ids = tuple(ds.row_ids[i] for i in rows)
    coefs = None
    if residualize_ and Ztr.shape[1] > 0:
        coefs = fit_residualization(Xtr, Ytr, Ztr, ids)
        Xtr = residualize(Xtr, Ztr, coefs.gamma_hat)
        Ytr = residualize(Ytr, Ztr, coefs.beta_hat)
    model = fit_predictor(predictor, Xtr, Ytr, seed=seed)
    return FittedPipeline(fitted, coefs, model, ids)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldResult:
    fold: int
    test_rows: np.ndarray
    predictions: np.ndarray
    audit: dict


def _run_fold(study: Study, fold: int, train_rows, test_rows, sc: CvScenario) -> FoldResult:
    ds = study.dataset
    ids = ds.row_ids
    train_rows = np.asarray(train_rows, dtype=int)
    test_rows = np.asarray(test_rows, dtype=int)
    fault = sc.fault_injection
    imp_rows = np.concatenate([train_rows, test_rows]) if fault == "imputer_train" else train_rows
    res_rows = np.concatenate([train_rows, test_rows]) if fault == "residual_train" else train_rows
    fit_rows = np.concatenate([train_rows, test_rows]) if fault == "predictor_train" else train_rows

    fitted = fit_imputer(sc.imputer, ds.subset(imp_rows))
    X_fit = impute(fitted, ds.subset(fit_rows)).values
    completed_test = impute(fitted, ds.subset(test_rows))
    Y_fit = study.targets.values[fit_rows]
    Z = study.confounders.values
    coefs = None
    X_test = completed_test.values
    if sc.residualize and Z.shape[1] > 0:
        X_res = X_fit if res_rows is fit_rows else impute(fitted, ds.subset(res_rows)).values
        res_ids = tuple(ids[i] for i in res_rows)
        coefs = fit_residualization(X_res, study.targets.values[res_rows], Z[res_rows], res_ids)
        X_fit = residualize(X_fit, Z[fit_rows], coefs.gamma_hat)
        Y_fit = residualize(Y_fit, Z[fit_rows], coefs.beta_hat)
        X_test = residualize(X_test, Z[test_rows], coefs.gamma_hat)
    model = fit_predictor(sc.predictor, X_fit, Y_fit, seed=sc.seed)
    pred = model.predict(X_test)
    if coefs is not None:
        pred = reconstruct(pred, Z[test_rows], coefs.beta_hat)

    consumed = {
        "imputer": sorted(fitted.train_row_ids),
        "standardization": sorted(fitted.train_row_ids),
        "residualization": sorted(coefs.train_row_ids) if coefs is not None else [],
        "predictor": sorted(ids[i] for i in fit_rows),
        "knn_donors": sorted(completed_test.donor_ids()),
    }
    test_ids = sorted(ids[i] for i in test_rows)
    violations = {k: sorted(set(v) & set(test_ids)) for k, v in consumed.items()}
    audit = {
        "fold": fold,
        "test_ids": test_ids,
        "n_train": int(train_rows.size),
        "consumed": consumed,
        "violations": {k: v for k, v in violations.items() if v},
    }
    return FoldResult(fold, test_rows, np.asarray(pred, dtype=float), audit)


def _choose(rng, pool, size):
    pool = list(pool)
    if size is None or size >= len(pool):
        return pool
    pick = sorted(rng.choice(len(pool), size=size, replace=False))
    return [pool[i] for i in pick]


def design_folds(study: Study, sc: CvScenario) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(train_rows, test_rows)`` per fold, in fold order."""
    ds = study.dataset
    complete, incomplete = split_complete_incomplete(ds)
    rng = np.random.default_rng(sc.seed)
    size = sc.test_size if sc.test_size is not None else DEFAULT_TEST_SIZE.get(sc.kind)
    all_rows = np.arange(ds.n_rows)

    if sc.kind == "train_test":
        test = list(sc.test_ids) or _choose(rng, complete, size)
        if not test:
            raise EmptyTestSet("train-test split has no test rows")
        bad = sorted(set(test) - set(complete))
        if bad:
            raise TestRowIncomplete(f"test rows must be fully observed: {bad[:5]}")
        te = ds.rows_for_ids(test)
        return [(np.setdiff1d(all_rows, te), te)]

    if sc.kind == "loco":
        test = list(sc.test_ids) or _choose(rng, complete, sc.test_size)
        bad = sorted(set(test) - set(complete))
        if bad:
            raise TestRowIncomplete(f"LOCO test rows must be fully observed: {bad[:5]}")
        if len(test) < 2:
            raise TooFewCompleteRows(f"LOCO needs at least 2 complete rows, found {len(test)}")
        te = ds.rows_for_ids(test)
        return [(np.setdiff1d(all_rows, [t]), np.array([t])) for t in te]

    test = list(sc.test_ids) or _choose(rng, incomplete, size)
    if not test:
        raise EmptyTestSet("LOMO needs at least one incomplete row")
    bad = sorted(set(test) - set(incomplete))
    if bad:
        raise ContractError(f"LOMO test rows must have missing cells: {bad[:5]}")
    te = ds.rows_for_ids(test)
    train = np.setdiff1d(all_rows, te)
    return [(train, np.array([t])) for t in te]


# ---------------------------------------------------------------------------
# reports


def _metrics(Y: np.ndarray, pred: np.ndarray) -> tuple[list[float], list[float]]:
    """Per-target r and MAE; r is NaN where a prediction column is constant."""
    r = []
    for t in range(Y.shape[1]):
        try:
            r.append(pearson_r(Y[:, t], pred[:, t]))
        except ConstantInput:
            r.append(float("nan"))
    return r, [mae(Y[:, t], pred[:, t]) for t in range(Y.shape[1])]


@dataclass
class ReportRow:
    model: str
    imputer: str
    scenario: str
    features: str
    n_folds: int
    n_test: int
    r: list[float]
    mae: list[float]

    @property
    def r_mean(self):
        return row_mean_std(self.r)[0]

    @property
    def r_std(self):
        return row_mean_std(self.r)[1]

    @property
    def mae_mean(self):
        return row_mean_std(self.mae)[0]

    @property
    def mae_std(self):
        return row_mean_std(self.mae)[1]


@dataclass
class RunReport:
    rows: list[ReportRow]
    target_names: tuple[str, ...]
    seed: int
    config_hash: str
    audit: list[dict] = field(default_factory=list)
    predictions: dict[str, dict[str, list[float]]] = field(default_factory=dict, repr=False)

    def violations(self) -> list[dict]:
        return [a for a in self.audit if a["violations"]]

    def header(self) -> list[str]:
        t = list(self.target_names)
        return (
            ["model", "imputer", "scenario", "features", "n_folds", "n_test"]
            + [f"r_{n}" for n in t] + ["r_mean", "r_std"]
            + [f"mae_{n}" for n in t] + ["mae_mean", "mae_std", "seed", "config_hash"]
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                w.writerow(
                    [r.model, r.imputer, r.scenario, r.features, r.n_folds, r.n_test]
                    + [repr(x) for x in r.r] + [repr(r.r_mean), repr(r.r_std)]
                    + [repr(x) for x in r.mae] + [repr(r.mae_mean), repr(r.mae_std)]
                    + [self.seed, self.config_hash]
                )

    def audit_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.audit, fh, indent=1, sort_keys=True)
            fh.write("\n")


def config_hash(doc: Mapping) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_scenario(study: Study, sc: CvScenario, features: str = "multimodal",
                 threads: int | None = None) -> tuple[ReportRow, list[dict], dict]:
    """Run every fold, check the audit, and score the out-of-fold predictions."""
    folds = design_folds(study, sc)
    jobs = [(k, tr, te) for k, (tr, te) in enumerate(folds)]
    workers = min(threads or n_threads(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _run_fold(study, j[0], j[1], j[2], sc), jobs))
    else:
        results = [_run_fold(study, k, tr, te, sc) for k, tr, te in jobs]
    results.sort(key=lambda r: r.fold)
    audit = [dict(r.audit, scenario=sc.kind) for r in results]
    bad = [a for a in audit if a["violations"]]
    if bad:
        first = bad[0]
        raise LeakageDetected(
            f"fold {first['fold']}: test ids reached training fits {first['violations']}"
        )
    rows = np.concatenate([r.test_rows for r in results])
    pred = np.vstack([r.predictions for r in results])
    Y = study.targets.values[rows]
    r, m = _metrics(Y, pred)
    ids = study.dataset.row_ids
    preds = {ids[i]: pred[k].tolist() for k, i in enumerate(rows)}
    row = ReportRow(
        predictor_label(sc.predictor),
        plan_label(resolve_plan(sc.imputer, study.dataset), study.dataset),
        sc.kind, features, len(results), int(rows.size), r, m,
    )
    return row, audit, preds


def _report(study, rows, audit, preds, seed, chash, sort_by):
    if sort_by == "r":
        rows.sort(key=lambda r: (np.isnan(r.r_mean), -r.r_mean))
    elif sort_by == "mae":
        rows.sort(key=lambda r: (np.isnan(r.mae_mean), r.mae_mean))
    elif sort_by is not None:
        raise InvalidConfig(f"sort_by must be 'r' or 'mae', got {sort_by!r}")
    return RunReport(rows, study.targets.target_names, seed, chash, audit, preds)


def run_train_test(study: Study, sc: CvScenario, chash: str = "") -> RunReport:
    if sc.kind != "train_test":
        raise InvalidConfig("run_train_test needs a train_test scenario")
    row, audit, preds = run_scenario(study, sc)
    return _report(study, [row], audit, {row.model: preds}, sc.seed, chash, None)


def run_loco(study: Study, sc: CvScenario, chash: str = "") -> RunReport:
    if sc.kind != "loco":
        raise InvalidConfig("run_loco needs a loco scenario")
    row, audit, preds = run_scenario(study, sc)
    return _report(study, [row], audit, {row.model: preds}, sc.seed, chash, None)


def run_lomo(study: Study, sc: CvScenario, chash: str = "") -> RunReport:
    if sc.kind != "lomo":
        raise InvalidConfig("run_lomo needs a lomo scenario")
    row, audit, preds = run_scenario(study, sc)
    return _report(study, [row], audit, {row.model: preds}, sc.seed, chash, None)


def _unimodal_study(study: Study, modality: str) -> Study:
    """One modality, keeping only rows that observe at least one of its cells."""
    ds = study.dataset.select_modalities([modality])
    keep = np.flatnonzero(ds.mask.any(axis=1))
    return Study(
        ds.subset(keep),
        TargetMatrix(study.targets.values[keep], study.targets.target_names),
        ConfounderMatrix(study.confounders.values[keep], study.confounders.names),
    )


def compare_models(
    study: Study,
    catalog: Sequence[tuple[Any, Mapping]],
    scenario_kind: str,
    seed: int = 0,
    test_size: int | None = None,
    test_ids: Sequence[str] = (),
    residualize_: bool = True,
    sort_by: str = "r",
    reference_modality: str | None = None,
    chash: str = "",
) -> RunReport:
    """Run every (imputer, predictor) pair under one scenario on shared test rows.

    With ``reference_modality`` the best multimodal pair is re-run on that
    modality alone and added as a unimodal row.
    """
    if not catalog:
        raise InvalidConfig("catalog is empty")
    rows, audit, preds = [], [], {}
    best = None
    for imp, pred_spec in catalog:
        sc = CvScenario(scenario_kind, tuple(test_ids), test_size, seed, imp, pred_spec, residualize_)
        row, a, p = run_scenario(study, sc)
        rows.append(row)
        audit.extend(dict(x, model=row.model, imputer=row.imputer) for x in a)
        preds[f"{row.model}|{row.imputer}|multimodal"] = p
        if best is None or row.r_mean > best[0].r_mean or np.isnan(best[0].r_mean):
            best = (row, sc)
    if reference_modality is not None:
        uni = _unimodal_study(study, reference_modality)
        sc = best[1]
        fixed = tuple(sorted(
            t for a in audit
            if a["model"] == best[0].model and a["imputer"] == best[0].imputer
            for t in a["test_ids"]
        ))
        uni_sc = CvScenario(sc.kind, fixed, None, seed, sc.imputer, sc.predictor, residualize_)
        try:
            row, a, p = run_scenario(uni, uni_sc, features=reference_modality)
        except (TestRowIncomplete, ContractError) as exc:
            raise InvalidConfig(f"unimodal comparison on {reference_modality!r} failed: {exc}") from exc
        rows.append(row)
        audit.extend(dict(x, model=row.model, imputer=row.imputer) for x in a)
        preds[f"{row.model}|{row.imputer}|{reference_modality}"] = p
    return _report(study, rows, audit, preds, seed, chash, sort_by)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Parsed run-config JSON; relative paths resolve against the config's folder."""

    features: Path
    schema: Path
    targets: Path
    confounders: Path
    continuous_imputers: list[ImputerSpec]
    ordinal_imputers: list[ImputerSpec]
    predictors: list[dict]
    scenario: str = "loco"
    test_size: int | None = None
    test_ids: list[str] = field(default_factory=list)
    seed: int = 0
    bins: int = DEFAULT_BINS
    eps: float = DEFAULT_EPS
    output_dir: Path = Path("out")
    residualize: bool = True
    reference_modality: str | None = None
    sort_by: str = "r"
    importance: dict = field(default_factory=dict)
    fault_injection: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return config_hash(doc)

    def plans(self) -> list[dict]:
        return [
            {"continuous": c.label, "ordinal": o.label}
            for c in self.continuous_imputers for o in self.ordinal_imputers
        ]

    def catalog(self) -> list[tuple[dict, dict]]:
        return [(plan, p) for plan in self.plans() for p in self.predictors]

    def load(self) -> Study:
        return load_study(self.schema, self.features, self.targets, self.confounders)


_CONFIG_KEYS = {
    "features", "schema", "targets", "confounders", "imputers", "predictors", "scenario",
    "test_size", "test_ids", "seed", "bins", "eps", "output_dir", "residualize",
    "reference_modality", "sort_by", "importance", "fault_injection",
}


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    return parse_config(doc, path.parent)


def parse_config(doc: Mapping, base: Path = Path(".")) -> RunConfig:
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
    for key in ("features", "schema", "targets", "confounders"):
        if key not in doc:
            raise InvalidConfig(f"config needs {key!r}")
    imps = doc.get("imputers", {})
    cont = [ImputerSpec.parse(s) for s in imps.get("continuous", [c.label for c in CONTINUOUS_CANDIDATES])]
    ordi = [ImputerSpec.parse(s) for s in imps.get("ordinal", [c.label for c in ORDINAL_CANDIDATES])]
    preds = [dict(p) for p in doc.get("predictors", [{"kind": "linear"}])]
    if not cont or not ordi or not preds:
        raise InvalidConfig("imputer and predictor catalogs must be non-empty")
    for p in preds:
        if "kind" not in p:
            raise InvalidConfig(f"predictor entry without kind: {p}")
    scenario = doc.get("scenario", "loco")
    if scenario not in SCENARIOS:
        raise InvalidConfig(f"unknown scenario {scenario!r}")

    def rel(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    return RunConfig(
        features=rel(doc["features"]),
        schema=rel(doc["schema"]),
        targets=rel(doc["targets"]),
        confounders=rel(doc["confounders"]),
        continuous_imputers=cont,
        ordinal_imputers=ordi,
        predictors=preds,
        scenario=scenario,
        test_size=doc.get("test_size"),
        test_ids=[str(t) for t in doc.get("test_ids", [])],
        seed=int(doc.get("seed", 0)),
        bins=int(doc.get("bins", DEFAULT_BINS)),
        eps=float(doc.get("eps", DEFAULT_EPS)),
        output_dir=rel(doc.get("output_dir", "out")),
        residualize=bool(doc.get("residualize", True)),
        reference_modality=doc.get("reference_modality"),
        sort_by=doc.get("sort_by", "r"),
        importance=dict(doc.get("importance", {})),
        fault_injection=doc.get("fault_injection"),
        raw=dict(doc),
    )
