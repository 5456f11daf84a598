import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2m.datamodel import SyntheticConfig, default_schema, generate_synthetic
from m2m.errors import (
    AllMissingColumn,
    InvalidConfig,
    NoCoObservedFeatures,
    NoMissingCells,
    SchemaMismatch,
)
from m2m.impute import (
    CONTINUOUS_CANDIDATES,
    ORDINAL_CANDIDATES,
    ImputerSpec,
    fit_imputer,
    impute,
    plan_label,
    resolve_plan,
    select_imputer,
)

from conftest import make_dataset

ALL_SPECS = ["mean", "knn(1)", "knn(2)", "knn(5)", "iterative",
             {"continuous": "knn(1)", "ordinal": "constant(-1)"},
             {"continuous": "iterative", "ordinal": "most_frequent"},
             {"continuous": "knn(2)", "ordinal": "knn(1)"}]


def _knn_oracle(train, target, k):
    """Plain-loop nearest neighbours on train-standardized, co-observed features."""
    xtr, mtr = train.values, train.mask
    mean = np.array([xtr[mtr[:, j], j].mean() for j in range(xtr.shape[1])])
    sd = np.array([xtr[mtr[:, j], j].std(ddof=1) for j in range(xtr.shape[1])])
    out = target.values.copy()
    for i in range(target.n_rows):
        dist = []
        for t in range(train.n_rows):
            d, shared = 0.0, 0
            for j in range(xtr.shape[1]):
                if target.mask[i, j] and mtr[t, j]:
                    d += ((target.values[i, j] - mean[j]) / sd[j] - (xtr[t, j] - mean[j]) / sd[j]) ** 2
                    shared += 1
            dist.append(d if shared else np.inf)
        for j in range(xtr.shape[1]):
            if target.mask[i, j]:
                continue
            cand = sorted((dist[t], t) for t in range(train.n_rows) if mtr[t, j] and np.isfinite(dist[t]))
            out[i, j] = np.mean([xtr[t, j] for _, t in cand[:k]])
    return out


class TestImputerSpec:
    @pytest.mark.parametrize("text,label", [("mean", "mean"), ("knn(2)", "knn(2)"),
                                            ("constant(-1)", "constant(-1)"), ("knn", "knn(1)")])
    def test_parse_label(self, text, label):
        assert ImputerSpec.parse(text).label == label

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            ImputerSpec.parse("knn(0)")
        with pytest.raises(InvalidConfig):
            ImputerSpec.parse("median")
        with pytest.raises(InvalidConfig):
            ImputerSpec.parse("mean(3)")

    def test_applicable_kinds(self):
        assert ImputerSpec("constant").applicable_kinds == {"ordinal"}
        assert ImputerSpec("most_frequent").applicable_kinds == {"ordinal"}
        assert ImputerSpec("mean").applicable_kinds == {"continuous"}
        assert ImputerSpec("iterative").applicable_kinds == {"continuous"}

    def test_default_catalog(self):
        assert [s.label for s in CONTINUOUS_CANDIDATES] == ["mean", "knn(1)", "knn(2)", "knn(5)", "iterative"]
        assert [s.label for s in ORDINAL_CANDIDATES] == ["most_frequent", "knn(1)", "constant(-1)"]

    def test_resolve_plan(self):
        ds = make_dataset(np.ones((2, 2)), [("a", "continuous", 1), ("g", "ordinal", 1)])
        plan = resolve_plan("mean", ds)
        assert plan["a"].label == "mean" and plan["g"].label == "most_frequent"
        plan = resolve_plan({"g": "constant(-1)"}, ds)
        assert plan_label(plan, ds) == "mean|constant(-1)"
        with pytest.raises(InvalidConfig):
            resolve_plan({"a": "constant(-1)"}, ds)
        with pytest.raises(InvalidConfig):
            resolve_plan({"nope": "mean"}, ds)


class TestFitImputer:
    def test_mean(self):
        ds = make_dataset([[1.0], [3.0], [np.nan]])
        fitted = fit_imputer("mean", ds)
        assert fitted.column_fill[0] == 2.0
        assert impute(fitted, ds).values[2, 0] == 2.0

    def test_most_frequent(self):
        ds = make_dataset([[0.0], [0.0], [1.0], [np.nan]], [("g", "ordinal", 1)])
        fitted = fit_imputer("most_frequent", ds)
        assert fitted.column_fill[0] == 0.0

    def test_knn_keeps_training_reference(self):
        ds = make_dataset([[1.0, 2.0], [3.0, 4.0]])
        fitted = fit_imputer("knn(1)", ds)
        assert fitted.train_raw is ds.values
        assert fitted.train_row_ids == ("r0", "r1")

    def test_all_missing_column(self):
        ds = make_dataset([[1.0, np.nan], [2.0, np.nan]])
        with pytest.raises(AllMissingColumn):
            fit_imputer("mean", ds)


class TestImpute:
    def test_knn1_nearest_on_shared_feature(self):
        train = make_dataset([[1.0, 2.0], [10.0, 20.0]])
        target = make_dataset([[1.1, np.nan]])
        assert impute(fit_imputer("knn(1)", train), target).values[0, 1] == 2.0

    def test_constant_minus_one(self):
        ds = make_dataset([[1.0, 0.0], [2.0, np.nan]], [("a", "continuous", 1), ("g", "ordinal", 1)])
        out = impute(fit_imputer({"g": "constant(-1)"}, ds), ds)
        assert out.values[1, 1] == -1.0

    def test_zero_distance_twin_restored(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 4))
        train = make_dataset(x)
        row = x[3].copy()
        row[2] = np.nan
        out = impute(fit_imputer("knn(1)", train), make_dataset(row[None, :]))
        assert out.values[0, 2] == x[3, 2]
        assert out.donors[("r0", "mod1_c2")] == ("r3",)

    def test_knn_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for k in (1, 2, 5):
            x = rng.normal(size=(30, 5)) * [1, 10, 100, 0.1, 3]
            x[rng.random(x.shape) < 0.25] = np.nan
            x[:, 0] = np.where(np.isnan(x[:, 0]), 0.5, x[:, 0])  # every row shares column 0
            train, target = make_dataset(x[:20]), make_dataset(x[20:])
            got = impute(fit_imputer(f"knn({k})", train), target).values
            np.testing.assert_allclose(got, _knn_oracle(train, target, k), rtol=0, atol=1e-12)

    def test_knn_tie_breaks_on_lowest_index(self):
        train = make_dataset([[0.0, 5.0], [2.0, 7.0], [0.0, 9.0], [2.0, 1.0]])
        out = impute(fit_imputer("knn(1)", train), make_dataset([[0.0, np.nan]]))
        assert out.values[0, 1] == 5.0

    def test_knn_ignores_donors_missing_the_feature(self):
        train = make_dataset([[1.0, np.nan], [5.0, 50.0], [0.0, 1.0]])
        out = impute(fit_imputer("knn(1)", train), make_dataset([[1.0, np.nan]]))
        assert out.values[0, 1] == 1.0

    def test_no_co_observed(self):
        train = make_dataset([[1.0, np.nan], [2.0, np.nan], [np.nan, 3.0]])
        with pytest.raises(NoCoObservedFeatures):
            impute(fit_imputer("knn(1)", train), make_dataset([[np.nan, 3.5]]))

    def test_ordinal_knn_average_rounded(self):
        train = make_dataset([[0.0, 0.0], [0.1, 1.0], [5.0, 2.0]],
                             [("a", "continuous", 1), ("g", "ordinal", 1)])
        out = impute(fit_imputer({"g": "knn(2)"}, train), make_dataset(
            [[0.05, np.nan]], [("a", "continuous", 1), ("g", "ordinal", 1)]))
        assert out.values[0, 1] in (0.0, 1.0)

    def test_iterative_recovers_linear_relation(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=200)
        x = np.column_stack([a, 3 * a + 1, rng.normal(size=200)])
        x[rng.random(200) < 0.3, 1] = np.nan
        ds = make_dataset(x)
        out = impute(fit_imputer("iterative", ds), ds).values
        miss = np.isnan(x[:, 1])
        np.testing.assert_allclose(out[miss, 1], 3 * a[miss] + 1, atol=0.05)

    def test_iterative_deterministic(self):
        ds, *_ = generate_synthetic(60, config=SyntheticConfig(missingness_rate=0.3), seed=2)
        a = impute(fit_imputer("iterative", ds), ds).values
        b = impute(fit_imputer("iterative", ds), ds).values
        np.testing.assert_array_equal(a, b)

    def test_schema_mismatch(self):
        train = make_dataset(np.ones((3, 2)))
        with pytest.raises(SchemaMismatch):
            impute(fit_imputer("mean", train), make_dataset(np.ones((1, 3))))

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=str)
    def test_complete_input_unchanged(self, spec):
        ds, *_ = generate_synthetic(30, config=SyntheticConfig(missingness_rate=0.0), seed=1)
        out = impute(fit_imputer(spec, ds), ds)
        np.testing.assert_array_equal(out.values, ds.values)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(ALL_SPECS))
    def test_observed_cells_bit_exact(self, seed, spec):
        cfg = SyntheticConfig(missingness_rate=0.3, mechanism="cell")
        ds, *_ = generate_synthetic(25, config=cfg, seed=seed)
        out = impute(fit_imputer(spec, ds), ds).values
        assert np.all(np.isfinite(out))
        assert np.array_equal(out[ds.mask], ds.values[ds.mask])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 5]))
    def test_knn_within_donor_range(self, seed, k):
        cfg = SyntheticConfig(missingness_rate=0.3)
        ds, *_ = generate_synthetic(30, config=cfg, seed=seed)
        out = impute(fit_imputer(f"knn({k})", ds), ds)
        names = ds.feature_names
        for (rid, feat), donors in out.donors.items():
            j = names.index(feat)
            vals = ds.values[ds.rows_for_ids(donors), j]
            v = out.values[ds.row_ids.index(rid), j]
            assert vals.min() - 0.5 <= v <= vals.max() + 0.5
            if ds.column_kinds[j] == "continuous":
                assert vals.min() <= v <= vals.max()


class TestSelectImputer:
    def test_knn1_wins_on_twins(self):
        cfg = SyntheticConfig(missingness_rate=0.3, duplicate_twins=True)
        ds, _, _, truth = generate_synthetic(200, config=cfg, seed=0)
        report = select_imputer(["mean", "knn(1)", "iterative"], ds)
        for mod in ("mod1", "mod2", "mod3"):
            assert report.chosen[mod].label == "knn(1)"
            kl = {e.imputer: e.kl_sum for e in report.entries if e.modality == mod}
            assert kl["knn(1)"] <= min(kl.values())
            assert kl["mean"] > kl["knn(1)"]

    def test_single_candidate(self):
        cfg = SyntheticConfig(missingness_rate=0.3, mechanism="cell")
        ds, *_ = generate_synthetic(40, default_schema((3,), ()), cfg, seed=0)
        report = select_imputer(["knn(2)"], ds)
        assert all(s.label == "knn(2)" for s in report.chosen.values())

    def test_ties_go_to_first_candidate(self):
        # three donors observe column 1, so knn(3) and knn(4) fill identically
        ds = make_dataset([[0.0, 1.0], [1.0, 2.0], [2.0, 4.0], [3.0, np.nan], [4.0, np.nan]])
        report = select_imputer(["knn(4)", "knn(3)"], ds)
        kl = [e.kl_sum for e in report.entries]
        assert kl[0] == kl[1]
        assert report.chosen["mod1"].label == "knn(4)"

    def test_no_missing_cells(self):
        with pytest.raises(NoMissingCells):
            select_imputer(["mean"], make_dataset(np.ones((3, 2))))

    def test_csv(self, tmp_path):
        ds, *_ = generate_synthetic(60, config=SyntheticConfig(missingness_rate=0.3), seed=0)
        report = select_imputer(list(CONTINUOUS_CANDIDATES) + list(ORDINAL_CANDIDATES[::2]), ds)
        path = tmp_path / "sel.csv"
        report.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "modality,imputer,kl_sum,kl_mean,n_features,chosen"
        chosen = [l for l in lines[1:] if l.endswith(",1")]
        assert len(chosen) == len(report.chosen)
