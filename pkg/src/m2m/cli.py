"""Command-line entry point: ``m2m <subcommand> ...``.

Exit codes: 0 success, 2 contract error, 3 leakage detected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attentive
from .datamodel import Study, SyntheticConfig, default_schema, generate_synthetic, save_study
from .errors import ContractError, InvalidConfig, LeakageDetected, M2MError
from .explain import (
    ImportanceReport,
    mask_report,
    permutation_importance,
    region_importance_table,
    shapley_exact,
)
from .harness import (
    CvScenario,
    RunConfig,
    RunReport,
    compare_models,
    fit_pipeline,
    load_config,
    run_scenario,
)
from .impute import impute, select_imputer
from .residual import residualize

EXIT_OK, EXIT_CONTRACT, EXIT_LEAKAGE = 0, 2, 3


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _outdir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    schema = default_schema(_ints(args.continuous), _ints(args.ordinal))
    config = SyntheticConfig(
        n_targets=args.targets,
        noise_sd=args.noise_sd,
        missingness_rate=args.missingness,
        mechanism=args.mechanism,
        duplicate_twins=args.twins,
    )
    ds, y, z, _ = generate_synthetic(args.rows, schema, config, seed=args.seed)
    out = Path(args.out)
    paths = save_study(Study(ds, y, z), out)
    run = {
        "features": paths["features"].name,
        "schema": paths["schema"].name,
        "targets": paths["targets"].name,
        "confounders": paths["confounders"].name,
        "imputers": {"continuous": ["knn(1)"], "ordinal": ["constant(-1)"]},
        "predictors": [{"kind": "linear"}],
        "scenario": "loco",
        "seed": args.seed,
        "output_dir": "out",
    }
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2)
        fh.write("\n")
    print(f"wrote {ds.n_rows} rows to {out}")
    return EXIT_OK


def cmd_select_imputer(args) -> int:
    cfg = load_config(args.config)
    study = cfg.load()
    candidates = cfg.continuous_imputers + [
        s for s in cfg.ordinal_imputers if s not in cfg.continuous_imputers
    ]
    report = select_imputer(candidates, study.dataset, bins=cfg.bins, eps=cfg.eps)
    path = _outdir(cfg, args.output_dir) / "selection.csv"
    report.to_csv(path)
    for mod, spec in report.chosen.items():
        print(f"{mod}: {spec.label}")
    print(f"wrote {path}")
    return EXIT_OK


def _first_pair(cfg: RunConfig):
    return cfg.plans()[0], cfg.predictors[0]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    study = cfg.load()
    plan, pred = _first_pair(cfg)
    pipe = fit_pipeline(study, np.arange(study.dataset.n_rows), plan, pred, cfg.residualize, cfg.seed)
    doc = pipe.to_json()
    doc["target_names"] = list(study.targets.target_names)
    doc["config_hash"] = cfg.hash
    path = _outdir(cfg, args.output_dir) / "model.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    study = cfg.load()
    plan, pred = _first_pair(cfg)
    sc = CvScenario(
        cfg.scenario, tuple(cfg.test_ids), cfg.test_size, cfg.seed, plan, pred,
        cfg.residualize, cfg.fault_injection,
    )
    row, audit, preds = run_scenario(study, sc)
    report = RunReport([row], study.targets.target_names, cfg.seed, cfg.hash, audit, {row.model: preds})
    out = _outdir(cfg, args.output_dir)
    report.to_csv(out / "report.csv")
    report.audit_json(out / "audit.json")
    print(f"{row.model} / {row.imputer} / {row.scenario}: mean r = {row.r_mean:.4f}, mean MAE = {row.mae_mean:.4f}")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if cfg.fault_injection is not None:
        raise InvalidConfig("fault_injection is only honoured by 'evaluate'")
    study = cfg.load()
    report = compare_models(
        study, cfg.catalog(), cfg.scenario, seed=cfg.seed, test_size=cfg.test_size,
        test_ids=cfg.test_ids, residualize_=cfg.residualize, sort_by=cfg.sort_by,
        reference_modality=cfg.reference_modality, chash=cfg.hash,
    )
    out = _outdir(cfg, args.output_dir)
    report.to_csv(out / "report.csv")
    report.audit_json(out / "audit.json")
    for r in report.rows:
        print(f"{r.model:24s} {r.imputer:40s} {r.features:12s} r={r.r_mean:.4f} mae={r.mae_mean:.4f}")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = load_config(args.config)
    study = cfg.load()
    imp = cfg.importance
    method = imp.get("method", "permutation")
    plan, pred = _first_pair(cfg)
    rows = np.arange(study.dataset.n_rows)
    pipe = fit_pipeline(study, rows, plan, pred, cfg.residualize, cfg.seed)
    Xc = impute(pipe.imputer, study.dataset).values
    Z = study.confounders.values
    names = study.dataset.feature_names
    tnames = study.targets.target_names

    if method == "permutation":
        report = permutation_importance(
            lambda Xp: pipe.predict_completed(Xp, Z), Xc, study.targets.values,
            K=int(imp.get("K", 10)), seed=cfg.seed, feature_names=names, target_names=tnames,
        )
    elif method == "shapley":
        feats = imp.get("features")
        if feats is None:
            feats = list(range(min(len(names), 12)))
        feats = [names.index(f) if isinstance(f, str) else int(f) for f in feats]
        background = Xc.mean(axis=0)
        phis = []
        for i in range(min(int(imp.get("rows", 20)), Xc.shape[0])):
            zi = Z[i : i + 1]
            rep = shapley_exact(
                lambda Xp, zi=zi: pipe.predict_completed(Xp, np.repeat(zi, Xp.shape[0], 0)),
                Xc[i], background, feats,
            )
            phis.append(np.abs(rep.phi))
        report = ImportanceReport(
            "shapley", tuple(names[j] for j in feats), tuple(tnames), np.mean(phis, axis=0)
        )
    elif method == "mask":
        if not isinstance(pipe.model, attentive.AttentiveModel):
            raise InvalidConfig("mask importance needs the attentive predictor")
        Xr = Xc if pipe.coefs is None else residualize(Xc, Z, pipe.coefs.gamma_hat)
        report = mask_report(pipe.model.mask_importance(Xr, imp.get("variant", "normalized")), names)
    else:
        raise InvalidConfig(f"unknown importance method {method!r}")

    out = _outdir(cfg, args.output_dir)
    report.to_csv(out / "importance.csv")
    print(f"wrote {out / 'importance.csv'}")
    atlas = imp.get("atlas")
    if atlas:
        atlas_path = Path(atlas)
        if not atlas_path.is_absolute():
            atlas_path = Path(args.config).parent / atlas_path
        region_importance_table(report, atlas_path).to_csv(out / "regions.csv")
        print(f"wrote {out / 'regions.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2m", description="Multimodal many-to-many prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic study and a starter config")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--targets", type=int, default=4)
    s.add_argument("--continuous", default="4,4,4", help="features per continuous modality")
    s.add_argument("--ordinal", default="1", help="features per ordinal modality")
    s.add_argument("--missingness", type=float, default=0.3)
    s.add_argument("--mechanism", choices=("block", "cell"), default="block")
    s.add_argument("--noise-sd", type=float, default=0.1)
    s.add_argument("--twins", action="store_true", help="duplicate-twin mode")
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("select-imputer", cmd_select_imputer, "score imputer candidates by KL divergence"),
        ("train", cmd_train, "fit the first imputer/predictor pair on all rows"),
        ("evaluate", cmd_evaluate, "run the configured cross-validation scenario"),
        ("compare", cmd_compare, "run every imputer/predictor pair and rank them"),
        ("explain", cmd_explain, "feature importance of the fitted pipeline"),
    ):
        c = sub.add_parser(name, help=help_)
        c.add_argument("config", help="run-config JSON")
        c.add_argument("--output-dir", default=None)
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LeakageDetected as exc:
        print(f"leakage detected: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (ContractError, M2MError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
