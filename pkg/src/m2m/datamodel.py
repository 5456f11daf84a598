"""Multimodal tabular data model, CSV/JSON loading and synthetic generation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DuplicateRowId,
    InvalidRate,
    NonNumericCell,
    OrdinalNonInteger,
    SchemaMismatch,
    ShapeMismatch,
    UnknownColumn,
    UnmatchedId,
)

CONTINUOUS = "continuous"
ORDINAL = "ordinal"
KINDS = (CONTINUOUS, ORDINAL)
GROUPS = ("CN", "MCI", "AD")


@dataclass(frozen=True)
class ModalitySchema:
    modality_id: int
    name: str
    kind: str
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaMismatch(f"modality {self.name!r}: unknown kind {self.kind!r}")
        if len(self.feature_names) < 1:
            raise SchemaMismatch(f"modality {self.name!r} declares no features")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


def _check_schema(schema: Sequence[ModalitySchema]) -> None:
    seen = set()
    for mod in schema:
        for name in mod.feature_names:
            if name in seen:
                raise SchemaMismatch(f"feature {name!r} declared twice")
            seen.add(name)
    names = [m.name for m in schema]
    if len(set(names)) != len(names):
        raise SchemaMismatch("modality names must be unique")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultimodalDataset:
    """Feature matrix partitioned into modalities plus an observation mask.

    ``mask[i, j]`` is True where the cell is observed. Missing cells hold NaN
    in ``values`` and must not be read.
    """

    schema: tuple[ModalitySchema, ...]
    values: np.ndarray
    mask: np.ndarray
    row_ids: tuple[str, ...]
    group_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        schema = tuple(self.schema)
        _check_schema(schema)
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        n_cols = sum(len(m.feature_names) for m in schema)
        if values.ndim != 2 or values.shape != mask.shape:
            raise ShapeMismatch("values and mask must be 2-D with identical shape")
        if values.shape[1] != n_cols:
            raise ShapeMismatch(f"expected {n_cols} columns, got {values.shape[1]}")
        if values.shape[0] < 1:
            raise ContractError("dataset needs at least one row")
        if len(self.row_ids) != values.shape[0]:
            raise ShapeMismatch("row_ids length differs from number of rows")
        ids = tuple(str(r) for r in self.row_ids)
        if len(set(ids)) != len(ids):
            raise DuplicateRowId("row ids must be unique")
        if self.group_labels is not None:
            labels = tuple(self.group_labels)
            if len(labels) != len(ids):
                raise ShapeMismatch("group_labels length differs from number of rows")
            bad = set(labels) - set(GROUPS)
            if bad:
                raise ContractError(f"unknown group labels {sorted(bad)}")
            object.__setattr__(self, "group_labels", labels)
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "row_ids", ids)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [f for m in self.schema for f in m.feature_names]

    @property
    def column_modality(self) -> np.ndarray:
        """Index into ``schema`` for every column."""
        return np.concatenate(
            [np.full(len(m.feature_names), k) for k, m in enumerate(self.schema)]
        )

    @property
    def column_kinds(self) -> list[str]:
        return [m.kind for m in self.schema for _ in m.feature_names]

    def modality(self, name: str) -> ModalitySchema:
        for m in self.schema:
            if m.name == name:
                return m
        raise SchemaMismatch(f"no modality named {name!r}")

    def columns_of(self, name: str) -> np.ndarray:
        k = [m.name for m in self.schema].index(self.modality(name).name)
        return np.flatnonzero(self.column_modality == k)

    def subset(self, rows: Iterable[int]) -> "MultimodalDataset":
        idx = np.asarray(list(rows), dtype=int)
        return MultimodalDataset(
            self.schema,
            self.values[idx],
            self.mask[idx],
            tuple(self.row_ids[i] for i in idx),
            None if self.group_labels is None else tuple(self.group_labels[i] for i in idx),
        )

    def rows_for_ids(self, ids: Iterable[str]) -> np.ndarray:
        lookup = {r: i for i, r in enumerate(self.row_ids)}
        try:
            return np.array([lookup[str(r)] for r in ids], dtype=int)
        except KeyError as exc:
            raise UnmatchedId(f"row id {exc.args[0]!r} not in dataset") from None

    def select_modalities(self, names: Sequence[str]) -> "MultimodalDataset":
        mods = [self.modality(n) for n in names]
        cols = np.concatenate([self.columns_of(n) for n in names])
        schema = tuple(
            ModalitySchema(k + 1, m.name, m.kind, m.feature_names) for k, m in enumerate(mods)
        )
        return MultimodalDataset(
            schema, self.values[:, cols], self.mask[:, cols], self.row_ids, self.group_labels
        )

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "MultimodalDataset":
        return MultimodalDataset(
            self.schema,
            values,
            self.mask if mask is None else mask,
            self.row_ids,
            self.group_labels,
        )


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    values: np.ndarray
    target_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[1] != len(self.target_names) or v.shape[1] < 1:
            raise ShapeMismatch("targets: column count differs from names")
        if not np.all(np.isfinite(v)):
            raise ContractError("targets contain missing or non-finite entries")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "target_names", tuple(self.target_names))


@dataclass(frozen=True, eq=False)
class ConfounderMatrix:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[1] != len(self.names):
            raise ShapeMismatch("confounders: column count differs from names")
        if not np.all(np.isfinite(v)):
            raise ContractError("confounders must be fully observed")
        if v.shape[0] > 1 and np.any(np.ptp(v, axis=0) == 0):
            raise ContractError("confounder columns must not be constant")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "names", tuple(self.names))


@dataclass(frozen=True)
class StudySchema:
    modalities: tuple[ModalitySchema, ...]
    targets: tuple[str, ...] = ()
    confounders: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "modalities": [
                {"name": m.name, "kind": m.kind, "features": list(m.feature_names)}
                for m in self.modalities
            ],
            "targets": list(self.targets),
            "confounders": list(self.confounders),
        }


@dataclass(frozen=True, eq=False)
class Study:
    """A dataset with aligned targets and confounders."""

    dataset: MultimodalDataset
    targets: TargetMatrix
    confounders: ConfounderMatrix

    def __post_init__(self):
        n = self.dataset.n_rows
        if self.targets.values.shape[0] != n or self.confounders.values.shape[0] != n:
            raise ShapeMismatch("targets/confounders rows differ from dataset rows")


# ---------------------------------------------------------------------------
# index sets


def observed_index_set(d: MultimodalDataset) -> set[tuple[int, int, int]]:
    """Triples ``(row, column, modality_id)`` for every observed cell."""
    mod_ids = np.array([d.schema[k].modality_id for k in d.column_modality])
    rows, cols = np.nonzero(d.mask)
    return {(int(i), int(j), int(mod_ids[j])) for i, j in zip(rows, cols)}


def missing_index_set(d: MultimodalDataset) -> set[tuple[int, int, int]]:
    mod_ids = np.array([d.schema[k].modality_id for k in d.column_modality])
    rows, cols = np.nonzero(~d.mask)
    return {(int(i), int(j), int(mod_ids[j])) for i, j in zip(rows, cols)}


def split_complete_incomplete(d: MultimodalDataset) -> tuple[list[str], list[str]]:
    complete = d.mask.all(axis=1)
    ids = np.asarray(d.row_ids, dtype=object)
    return list(ids[complete]), list(ids[~complete])


# ---------------------------------------------------------------------------
# IO


def load_schema(path: str | Path) -> StudySchema:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "modalities" not in doc:
        raise SchemaMismatch("schema JSON needs a 'modalities' list")
    mods = []
    for k, entry in enumerate(doc["modalities"], start=1):
        try:
            mods.append(
                ModalitySchema(k, str(entry["name"]), str(entry["kind"]), tuple(entry["features"]))
            )
        except (KeyError, TypeError):
            raise SchemaMismatch(f"modality entry {k} malformed") from None
    _check_schema(mods)
    return StudySchema(
        tuple(mods), tuple(doc.get("targets", ())), tuple(doc.get("confounders", ()))
    )


def save_schema(schema: StudySchema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(schema.to_json(), fh, indent=2)
        fh.write("\n")


def _parse_cell(text: str, where: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise NonNumericCell(f"{where}: {text!r} is not numeric") from None
    if not math.isfinite(x):
        raise NonNumericCell(f"{where}: {text!r} is not a finite number")
    return x


def _read_id_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaMismatch(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    for r in body:
        if len(r) != len(header):
            raise SchemaMismatch(f"{path}: row {r[:1]} has {len(r)} fields, header has {len(header)}")
    return header, body


def load_dataset(features_path: str | Path, schema_path: str | Path) -> MultimodalDataset:
    """Load a features CSV; empty cells are missing."""
    schema = load_schema(schema_path)
    header, body = _read_id_csv(features_path)
    declared = [f for m in schema.modalities for f in m.feature_names]
    kinds = {f: m.kind for m in schema.modalities for f in m.feature_names}
    columns = header[1:]
    for c in columns:
        if c not in kinds:
            raise UnknownColumn(f"column {c!r} is not declared in the schema")
    if len(set(columns)) != len(columns):
        raise SchemaMismatch("duplicate column in features CSV")
    absent = [f for f in declared if f not in columns]
    if absent:
        raise SchemaMismatch(f"schema features absent from CSV: {absent}")
    pos = {c: i + 1 for i, c in enumerate(columns)}

    ids = [r[0] for r in body]
    if len(set(ids)) != len(ids):
        raise DuplicateRowId("duplicate row id in features CSV")
    n, p = len(body), len(declared)
    values = np.full((n, p), np.nan)
    mask = np.zeros((n, p), dtype=bool)
    for i, r in enumerate(body):
        for j, f in enumerate(declared):
            cell = r[pos[f]]
            if cell == "":
                continue
            x = _parse_cell(cell, f"row {r[0]!r}, column {f!r}")
            if kinds[f] == ORDINAL and (not float(x).is_integer() or x < 0):
                raise OrdinalNonInteger(f"row {r[0]!r}, column {f!r}: {cell!r}")
            values[i, j] = x
            mask[i, j] = True
    return MultimodalDataset(schema.modalities, values, mask, tuple(ids))


def format_number(x: float, ordinal: bool = False) -> str:
    """Canonical text for a cell; ``repr`` gives the shortest exact round trip."""
    if ordinal:
        return str(int(x))
    return repr(float(x))


def save_dataset(d: MultimodalDataset, path: str | Path) -> None:
    kinds = d.column_kinds
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *d.feature_names])
        for i, rid in enumerate(d.row_ids):
            cells = [
                format_number(d.values[i, j], kinds[j] == ORDINAL) if d.mask[i, j] else ""
                for j in range(d.n_features)
            ]
            w.writerow([rid, *cells])


def load_table(path: str | Path, names: Sequence[str], row_ids: Sequence[str]) -> np.ndarray:
    """Load an id-keyed CSV and align it to ``row_ids``. Empty cells become NaN."""
    header, body = _read_id_csv(path)
    for c in header[1:]:
        if c not in names:
            raise UnknownColumn(f"{path}: column {c!r} not expected")
    missing_cols = [c for c in names if c not in header[1:]]
    if missing_cols:
        raise SchemaMismatch(f"{path}: columns {missing_cols} absent")
    pos = {c: header.index(c) for c in names}
    by_id: dict[str, list[str]] = {}
    for r in body:
        if r[0] in by_id:
            raise DuplicateRowId(f"{path}: duplicate id {r[0]!r}")
        by_id[r[0]] = r
    if set(by_id) != set(row_ids):
        extra = sorted(set(by_id) ^ set(row_ids))[:5]
        raise UnmatchedId(f"{path}: ids do not match the features file (e.g. {extra})")
    out = np.full((len(row_ids), len(names)), np.nan)
    for i, rid in enumerate(row_ids):
        r = by_id[rid]
        for j, c in enumerate(names):
            if r[pos[c]] != "":
                out[i, j] = _parse_cell(r[pos[c]], f"{path}: row {rid!r}, column {c!r}")
    return out


def save_table(values: np.ndarray, names: Sequence[str], row_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for rid, row in zip(row_ids, np.asarray(values)):
            w.writerow([rid, *(format_number(x) for x in row)])


def load_study(
    schema_path: str | Path,
    features_path: str | Path,
    targets_path: str | Path,
    confounders_path: str | Path,
) -> Study:
    """Load and join features, targets and confounders on row id.

    Rows with any missing target are dropped; a missing confounder is an error.
    """
    schema = load_schema(schema_path)
    if not schema.targets:
        raise SchemaMismatch("schema declares no targets")
    ds = load_dataset(features_path, schema_path)
    y = load_table(targets_path, schema.targets, ds.row_ids)
    z = load_table(confounders_path, schema.confounders, ds.row_ids) if schema.confounders else np.zeros((ds.n_rows, 0))
    keep = np.flatnonzero(np.isfinite(y).all(axis=1))
    if keep.size == 0:
        raise ContractError("no row has a complete set of targets")
    ds = ds.subset(keep)
    return Study(
        ds,
        TargetMatrix(y[keep], schema.targets),
        ConfounderMatrix(z[keep], schema.confounders),
    )


def save_study(study: Study, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "schema": d / "schema.json",
        "features": d / "features.csv",
        "targets": d / "targets.csv",
        "confounders": d / "confounders.csv",
    }
    save_schema(
        StudySchema(study.dataset.schema, study.targets.target_names, study.confounders.names),
        paths["schema"],
    )
    save_dataset(study.dataset, paths["features"])
    save_table(study.targets.values, study.targets.target_names, study.dataset.row_ids, paths["targets"])
    save_table(study.confounders.values, study.confounders.names, study.dataset.row_ids, paths["confounders"])
    return paths


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for :func:`generate_synthetic`.

    ``mechanism`` is ``"block"`` (a whole modality of a row goes missing) or
    ``"cell"`` (independent cells). With ``duplicate_twins`` the first half
    of the rows are complete originals and the second half are exact copies
    with missingness applied, so every incomplete row has a complete twin.
    """

    n_targets: int = 4
    n_confounders: int = 3
    noise_sd: float = 0.1
    missingness_rate: float = 0.3
    mechanism: str = "block"
    duplicate_twins: bool = False
    weight_scale: float = 1.0
    ordinal_levels: int = 3


@dataclass(frozen=True, eq=False)
class SyntheticGroundTruth:
    weights: np.ndarray
    confounder_weights: np.ndarray
    noise_sd: float
    missingness_rate: float
    seed: int
    complete_values: np.ndarray = field(repr=False, default=None)
    twin_of: tuple[int, ...] | None = None


def default_schema(
    continuous: Sequence[int] = (4, 4, 4), ordinal: Sequence[int] = (1,)
) -> tuple[ModalitySchema, ...]:
    """Schema with the given continuous and ordinal block sizes."""
    mods = []
    k = 1
    for size in continuous:
        mods.append(ModalitySchema(k, f"mod{k}", CONTINUOUS, tuple(f"m{k}_f{j}" for j in range(size))))
        k += 1
    for size in ordinal:
        mods.append(ModalitySchema(k, f"mod{k}", ORDINAL, tuple(f"m{k}_g{j}" for j in range(size))))
        k += 1
    return tuple(mods)


_CONFOUNDER_NAMES = ("age", "sex", "education")


def _confounders(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    cols = []
    for k in range(c):
        if k == 0:
            cols.append(rng.normal(72.0, 7.0, n))
        elif k == 1:
            s = rng.integers(0, 2, n).astype(float)
            if n > 1 and s.min() == s.max():
                s[0] = 1.0 - s[0]
            cols.append(s)
        elif k == 2:
            cols.append(rng.normal(16.0, 2.5, n))
        else:
            cols.append(rng.normal(0.0, 1.0, n))
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _block_mask(rng, n, schema, rate, keep_continuous):
    p = sum(len(m.feature_names) for m in schema)
    mask = np.ones((n, p), dtype=bool)
    starts = np.cumsum([0] + [len(m.feature_names) for m in schema])
    drop = rng.random((n, len(schema))) < rate
    cont = [k for k, m in enumerate(schema) if m.kind == CONTINUOUS]
    for i in range(n):
        eligible = cont if (keep_continuous and cont) else list(range(len(schema)))
        if drop[i, eligible].all():
            drop[i, eligible[rng.integers(len(eligible))]] = False
    for k in range(len(schema)):
        mask[drop[:, k], starts[k]:starts[k + 1]] = False
    return mask


def _cell_mask(rng, n, p, rate):
    mask = rng.random((n, p)) >= rate
    for i in np.flatnonzero(~mask.any(axis=1)):
        mask[i, rng.integers(p)] = True
    return mask


def generate_synthetic(
    n_rows: int,
    schema: Sequence[ModalitySchema] | None = None,
    config: SyntheticConfig | None = None,
    seed: int = 0,
) -> tuple[MultimodalDataset, TargetMatrix, ConfounderMatrix, SyntheticGroundTruth]:
    """Draw a dataset with linear ground truth ``Y = X W + Z beta + noise``."""
    schema = tuple(schema) if schema is not None else default_schema()
    cfg = config or SyntheticConfig()
    if n_rows < 2:
        raise ContractError("n_rows must be at least 2")
    if not (0.0 <= cfg.missingness_rate < 1.0):
        raise InvalidRate(f"missingness_rate must lie in [0, 1), got {cfg.missingness_rate}")
    if cfg.mechanism not in ("block", "cell"):
        raise ContractError(f"unknown missingness mechanism {cfg.mechanism!r}")
    _check_schema(schema)
    rng = np.random.default_rng(seed)

    n_src = (n_rows + 1) // 2 if cfg.duplicate_twins else n_rows
    blocks = []
    for m in schema:
        pm = len(m.feature_names)
        if m.kind == CONTINUOUS:
            mu, sd = rng.uniform(-2.0, 2.0), rng.uniform(0.5, 2.0)
            blocks.append(rng.normal(mu, sd, (n_src, pm)))
        else:
            levels = cfg.ordinal_levels
            probs = np.linspace(2.0, 1.0, levels)
            probs /= probs.sum()
            blocks.append(rng.choice(levels, size=(n_src, pm), p=probs).astype(float))
    x_src = np.hstack(blocks)
    z_src = _confounders(rng, n_src, cfg.n_confounders)

    twin_of = None
    if cfg.duplicate_twins:
        copies = np.arange(n_rows - n_src)
        x = np.vstack([x_src, x_src[copies]])
        z = np.vstack([z_src, z_src[copies]])
        twin_of = tuple([-1] * n_src + [int(c) for c in copies])
    else:
        x, z = x_src, z_src

    p = x.shape[1]
    w = rng.normal(0.0, cfg.weight_scale / math.sqrt(p), (p, cfg.n_targets))
    z_sd = z.std(axis=0) if z.shape[1] else np.ones(0)
    z_sd[z_sd == 0] = 1.0
    beta = rng.normal(0.0, 0.5, (cfg.n_confounders, cfg.n_targets)) / z_sd[:, None]
    y = x @ w + z @ beta + rng.normal(0.0, cfg.noise_sd, (n_rows, cfg.n_targets))

    if cfg.missingness_rate == 0.0:
        mask = np.ones_like(x, dtype=bool)
    elif cfg.mechanism == "block":
        mask = _block_mask(rng, n_rows, schema, cfg.missingness_rate, cfg.duplicate_twins)
    else:
        mask = _cell_mask(rng, n_rows, p, cfg.missingness_rate)
    if cfg.duplicate_twins:
        mask[:n_src] = True

    ids = tuple(f"s{i:05d}" for i in range(n_rows))
    ds = MultimodalDataset(schema, x, mask, ids)
    targets = TargetMatrix(y, tuple(f"y{t}" for t in range(cfg.n_targets)))
    znames = tuple(
        _CONFOUNDER_NAMES[k] if k < len(_CONFOUNDER_NAMES) else f"z{k}"
        for k in range(cfg.n_confounders)
    )
    conf = ConfounderMatrix(z, znames)
    truth = SyntheticGroundTruth(
        weights=w,
        confounder_weights=beta,
        noise_sd=cfg.noise_sd,
        missingness_rate=cfg.missingness_rate,
        seed=seed,
        complete_values=x,
        twin_of=twin_of,
    )
    return ds, targets, conf, truth
