import json

import numpy as np
import pytest

from m2m.datamodel import (
    ConfounderMatrix,
    Study,
    SyntheticConfig,
    TargetMatrix,
    default_schema,
    generate_synthetic,
    split_complete_incomplete,
)
from m2m.errors import (
    EmptyTestSet,
    InvalidConfig,
    LeakageDetected,
    TestRowIncomplete,
    TooFewCompleteRows,
)
from m2m.harness import (
    CvScenario,
    RunReport,
    ReportRow,
    compare_models,
    design_folds,
    fit_pipeline,
    parse_config,
    run_lomo,
    run_loco,
    run_scenario,
    run_train_test,
)
from m2m.residual import design

from conftest import make_dataset

PLAN = {"continuous": "knn(1)", "ordinal": "constant(-1)"}


def synth(n=80, seed=0, rate=0.3, noise=0.1, schema=None, **kw):
    ds, y, z, truth = generate_synthetic(
        n, schema or default_schema((3, 3), (1,)),
        SyntheticConfig(n_targets=3, noise_sd=noise, missingness_rate=rate, **kw), seed=seed,
    )
    return Study(ds, y, z), truth


class TestTrainTest:
    def test_linear_no_missing(self):
        study, _ = synth(n=120, rate=0.0, noise=0.1)
        rep = run_train_test(study, CvScenario("train_test", seed=1, imputer=PLAN))
        row = rep.rows[0]
        assert row.n_test == 12 and row.n_folds == 1
        assert min(row.r) > 0.95

    def test_mean_baseline_mae_closed_form(self):
        study, _ = synth(n=50, rate=0.0, seed=3)
        sc = CvScenario("train_test", seed=2, predictor={"kind": "mean"}, residualize=False)
        row, audit, _ = run_scenario(study, sc)
        test = study.dataset.rows_for_ids(audit[0]["test_ids"])
        train = np.setdiff1d(np.arange(50), test)
        Y = study.targets.values
        expected = np.abs(Y[test] - Y[train].mean(axis=0)).mean(axis=0)
        np.testing.assert_allclose(row.mae, expected, rtol=1e-12)
        assert all(np.isnan(row.r))

    def test_empty_test_set(self):
        study, _ = synth(n=30, rate=0.0)
        with pytest.raises(EmptyTestSet):
            run_train_test(study, CvScenario("train_test", test_size=0))

    def test_incomplete_test_row_rejected(self):
        study, _ = synth(n=60, rate=0.4)
        _, incomplete = split_complete_incomplete(study.dataset)
        with pytest.raises(TestRowIncomplete):
            run_train_test(study, CvScenario("train_test", test_ids=incomplete[:1]))

    def test_wrong_kind(self):
        study, _ = synth(n=30, rate=0.0)
        with pytest.raises(InvalidConfig):
            run_loco(study, CvScenario("train_test"))


class TestLoco:
    def test_one_fold_per_complete_row(self):
        study, _ = synth(n=60, rate=0.3)
        complete, _ = split_complete_incomplete(study.dataset)
        ids = complete[:12]
        rep = run_loco(study, CvScenario("loco", test_ids=ids, imputer=PLAN))
        assert rep.rows[0].n_folds == 12
        assert sorted(a["test_ids"][0] for a in rep.audit) == sorted(ids)
        assert sorted(rep.predictions["linear"]) == sorted(ids)

    def test_two_complete_rows(self):
        vals = np.array([[1.0, 2.0], [2.0, 1.0], [np.nan, 3.0], [4.0, np.nan], [5.0, np.nan], [0.5, np.nan]])
        ds = make_dataset(vals)
        ids = ds.row_ids
        study = Study(ds, TargetMatrix(np.arange(6.0)[:, None] ** 2, ("y",)), ConfounderMatrix(np.zeros((6, 0)), ()))
        folds = design_folds(study, CvScenario("loco"))
        assert len(folds) == 2
        for (train, test), other in zip(folds, (1, 0)):
            assert other in train and test.tolist() == [1 - other]
        row, _, _ = run_scenario(study, CvScenario("loco", imputer={"continuous": "mean"}), threads=1)
        assert row.n_test == 2

    def test_too_few_complete(self):
        vals = np.array([[1.0, 2.0], [np.nan, 3.0], [4.0, np.nan]])
        study = Study(make_dataset(vals), TargetMatrix(np.ones((3, 1)) * [[1], [2], [3]], ("y",)),
                      ConfounderMatrix(np.zeros((3, 0)), ()))
        with pytest.raises(TooFewCompleteRows):
            run_loco(study, CvScenario("loco"))

    def test_partition(self):
        study, _ = synth(n=40, rate=0.3, seed=5)
        folds = design_folds(study, CvScenario("loco"))
        complete, _ = split_complete_incomplete(study.dataset)
        tested = np.concatenate([te for _, te in folds])
        assert sorted(tested.tolist()) == sorted(study.dataset.rows_for_ids(complete).tolist())
        for train, test in folds:
            assert np.intersect1d(train, test).size == 0
            assert train.size + test.size == study.dataset.n_rows


class TestLomo:
    def test_twenty_folds_and_clean_audit(self):
        study, _ = synth(n=100, rate=0.3, seed=2)
        rep = run_lomo(study, CvScenario("lomo", seed=4, imputer=PLAN))
        assert rep.rows[0].n_folds == 20
        assert rep.violations() == []
        for a in rep.audit:
            tid = set(a["test_ids"])
            for key, used in a["consumed"].items():
                assert not tid & set(used), key
        # folds whose test row lacks a continuous block consult knn donors
        assert any(a["consumed"]["knn_donors"] for a in rep.audit)

    def test_knn_donors_come_from_training_rows(self):
        study, _ = synth(n=80, rate=0.3, seed=6)
        _, audit, _ = run_scenario(study, CvScenario("lomo", test_size=10, imputer=PLAN), threads=1)
        for a in audit:
            assert set(a["consumed"]["knn_donors"]) <= set(a["consumed"]["imputer"])

    def test_test_rows_are_incomplete(self):
        study, _ = synth(n=60, rate=0.3)
        complete, incomplete = split_complete_incomplete(study.dataset)
        folds = design_folds(study, CvScenario("lomo", test_size=5))
        ids = study.dataset.row_ids
        assert all(ids[te[0]] in incomplete for _, te in folds)
        tested = {int(te[0]) for _, te in folds}
        assert all(not tested & set(tr.tolist()) for tr, _ in folds)

    def test_no_incomplete_rows(self):
        study, _ = synth(n=30, rate=0.0)
        with pytest.raises(EmptyTestSet):
            run_lomo(study, CvScenario("lomo"))

    @pytest.mark.parametrize("fault", ["imputer_train", "residual_train", "predictor_train"])
    def test_fault_injection_detected(self, fault):
        study, _ = synth(n=60, rate=0.3, seed=1)
        with pytest.raises(LeakageDetected):
            run_lomo(study, CvScenario("lomo", test_size=3, imputer=PLAN, fault_injection=fault))


class TestPipeline:
    def test_residualization_is_train_only(self):
        study, _ = synth(n=60, rate=0.3, seed=8)
        rows = np.arange(40)
        pipe = fit_pipeline(study, rows, PLAN, {"kind": "linear"})
        assert set(pipe.coefs.train_row_ids) == {study.dataset.row_ids[i] for i in rows}
        assert pipe.predict(study, np.arange(40, 60)).shape == (20, 3)

    def test_orthogonality_after_fit(self):
        from m2m.impute import fit_imputer, impute
        from m2m.residual import residualize

        study, _ = synth(n=60, rate=0.3, seed=9)
        rows = np.arange(60)
        pipe = fit_pipeline(study, rows, PLAN, {"kind": "linear"})
        Xc = impute(pipe.imputer, study.dataset).values
        Z = study.confounders.values
        D = design(Z)
        for T, coef in ((Xc, pipe.coefs.gamma_hat), (study.targets.values, pipe.coefs.beta_hat)):
            eps = residualize(T, Z, coef)
            assert np.abs(D.T @ eps).max() < 1e-8 * max(1.0, np.abs(D).max() * np.abs(T).max())


class TestCompare:
    def test_catalog_of_one(self):
        study, _ = synth(n=50, rate=0.3)
        rep = compare_models(study, [(PLAN, {"kind": "linear"})], "loco", test_size=8)
        assert len(rep.rows) == 1

    def test_empty_catalog(self):
        study, _ = synth(n=30)
        with pytest.raises(InvalidConfig):
            compare_models(study, [], "loco")

    def test_sorted_by_r_and_mae(self):
        study, _ = synth(n=60, rate=0.3, seed=3)
        cat = [(PLAN, {"kind": "mean"}), (PLAN, {"kind": "linear"}), (PLAN, {"kind": "pls", "n_components": 1})]
        by_r = compare_models(study, cat, "train_test", seed=1)
        rs = [r.r_mean for r in by_r.rows]
        assert rs == sorted(rs, reverse=True) and by_r.rows[0].model == "linear"
        by_mae = compare_models(study, cat, "train_test", seed=1, sort_by="mae")
        maes = [r.mae_mean for r in by_mae.rows]
        assert maes == sorted(maes)

    def test_noise_ranks_below_linear(self):
        wins = 0
        for seed in range(100):
            study, _ = synth(n=40, rate=0.0, seed=seed)
            rep = compare_models(study, [(PLAN, {"kind": "noise"}), (PLAN, {"kind": "linear"})],
                                 "train_test", seed=seed)
            wins += rep.rows[0].model == "linear"
        assert wins >= 95

    def test_reference_modality_row(self):
        study, _ = synth(n=60, rate=0.3, seed=4)
        rep = compare_models(study, [(PLAN, {"kind": "linear"})], "loco", test_size=6,
                             reference_modality="mod1")
        feats = {r.features for r in rep.rows}
        assert feats == {"multimodal", "mod1"}
        assert all(r.n_test == 6 for r in rep.rows)

    def test_identical_r_has_zero_std(self):
        row = ReportRow("m", "i", "loco", "multimodal", 1, 3, [0.5, 0.5, 0.5], [1.0, 2.0, 3.0])
        assert row.r_std == 0.0 and row.mae_std == 1.0


class TestReportAndDeterminism:
    def test_csv_header_and_byte_identity(self, tmp_path):
        study, _ = synth(n=50, rate=0.3, seed=11)
        cat = [(PLAN, {"kind": "linear"}), ({"continuous": "mean", "ordinal": "most_frequent"}, {"kind": "linear"})]
        paths = []
        for k, threads in enumerate(("1", "4")):
            with pytest.MonkeyPatch.context() as mp:
                mp.setenv("M2M_THREADS", threads)
                rep = compare_models(study, cat, "loco", test_size=10, seed=3, chash="abc")
            paths.append(tmp_path / f"r{k}.csv")
            rep.to_csv(paths[-1])
        text = paths[0].read_text()
        assert text == paths[1].read_text()
        header = text.splitlines()[0].split(",")
        assert header[:6] == ["model", "imputer", "scenario", "features", "n_folds", "n_test"]
        assert header[-2:] == ["seed", "config_hash"]
        assert "r_y0" in header and "mae_mean" in header

    def test_audit_json(self, tmp_path):
        study, _ = synth(n=40, rate=0.3)
        rep = run_lomo(study, CvScenario("lomo", test_size=3, imputer=PLAN))
        rep.audit_json(tmp_path / "a.json")
        doc = json.loads((tmp_path / "a.json").read_text())
        assert [a["fold"] for a in doc] == [0, 1, 2]


class TestConfig:
    BASE = {"features": "f.csv", "schema": "s.json", "targets": "t.csv", "confounders": "c.csv"}

    def test_defaults(self, tmp_path):
        cfg = parse_config(self.BASE, tmp_path)
        assert cfg.scenario == "loco" and cfg.features == tmp_path / "f.csv"
        assert len(cfg.plans()) == 5 * 3
        assert cfg.catalog()[0][1] == {"kind": "linear"}

    def test_hash_ignores_output_dir(self):
        a = parse_config(dict(self.BASE, output_dir="x"))
        b = parse_config(dict(self.BASE, output_dir="y"))
        c = parse_config(dict(self.BASE, seed=1))
        assert a.hash == b.hash != c.hash

    @pytest.mark.parametrize("doc", [
        {"bogus": 1},
        {"scenario": "kfold"},
        {"predictors": []},
        {"predictors": [{"alpha": 1}]},
        {"imputers": {"continuous": ["median"]}},
    ])
    def test_invalid(self, doc):
        with pytest.raises(InvalidConfig):
            parse_config(dict(self.BASE, **doc))

    def test_missing_path(self):
        with pytest.raises(InvalidConfig):
            parse_config({"features": "f.csv"})

    def test_bad_fault_name(self):
        with pytest.raises(InvalidConfig):
            CvScenario("lomo", fault_injection="everything")
