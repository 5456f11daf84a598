import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2m.datamodel import (
    Study,
    SyntheticConfig,
    default_schema,
    generate_synthetic,
    load_dataset,
    load_study,
    missing_index_set,
    observed_index_set,
    save_dataset,
    save_study,
    split_complete_incomplete,
)
from m2m.errors import (
    DuplicateRowId,
    InvalidRate,
    NonNumericCell,
    OrdinalNonInteger,
    SchemaMismatch,
    UnknownColumn,
    UnmatchedId,
)

from conftest import make_dataset


class TestLoadDataset:
    def test_empty_cell_is_missing(self, tmp_path, write_schema):
        schema = write_schema([("a", "continuous", ["f1", "f2", "f3"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,f1,f2,f3\ns1,1.5,,2\n")
        ds = load_dataset(csv, schema)
        np.testing.assert_array_equal(ds.mask, [[True, False, True]])
        assert ds.values[0, 0] == 1.5 and ds.values[0, 2] == 2.0
        assert np.isnan(ds.values[0, 1])

    def test_column_order_follows_schema(self, tmp_path, write_schema):
        schema = write_schema([("a", "continuous", ["f1", "f2"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,f2,f1\ns1,2,1\n")
        ds = load_dataset(csv, schema)
        assert ds.feature_names == ["f1", "f2"]
        np.testing.assert_array_equal(ds.values, [[1.0, 2.0]])

    def test_unknown_column(self, tmp_path, write_schema):
        schema = write_schema([("a", "continuous", ["f1"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,f1,extra\ns1,1,2\n")
        with pytest.raises(UnknownColumn):
            load_dataset(csv, schema)

    def test_declared_column_absent(self, tmp_path, write_schema):
        schema = write_schema([("a", "continuous", ["f1", "f2"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,f1\ns1,1\n")
        with pytest.raises(SchemaMismatch):
            load_dataset(csv, schema)

    def test_ordinal_non_integer(self, tmp_path, write_schema):
        schema = write_schema([("g", "ordinal", ["snp"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,snp\ns1,1.5\n")
        with pytest.raises(OrdinalNonInteger):
            load_dataset(csv, schema)

    @pytest.mark.parametrize("cell", ["NA", "abc", "nan", "inf"])
    def test_sentinels_rejected(self, tmp_path, write_schema, cell):
        schema = write_schema([("a", "continuous", ["f1"])])
        csv = tmp_path / "x.csv"
        csv.write_text(f"id,f1\ns1,{cell}\n")
        with pytest.raises(NonNumericCell):
            load_dataset(csv, schema)

    def test_duplicate_row_id(self, tmp_path, write_schema):
        schema = write_schema([("a", "continuous", ["f1"])])
        csv = tmp_path / "x.csv"
        csv.write_text("id,f1\ns1,1\ns1,2\n")
        with pytest.raises(DuplicateRowId):
            load_dataset(csv, schema)

    def test_round_trip_bit_identical(self, tmp_path):
        ds, y, z, _ = generate_synthetic(40, config=SyntheticConfig(missingness_rate=0.3), seed=3)
        paths = save_study(Study(ds, y, z), tmp_path / "a")
        again = load_study(paths["schema"], paths["features"], paths["targets"], paths["confounders"])
        np.testing.assert_array_equal(again.dataset.mask, ds.mask)
        assert np.array_equal(again.dataset.values, ds.values, equal_nan=True)
        np.testing.assert_array_equal(again.targets.values, y.values)
        np.testing.assert_array_equal(again.confounders.values, z.values)
        save_dataset(again.dataset, tmp_path / "b.csv")
        assert (tmp_path / "b.csv").read_bytes() == paths["features"].read_bytes()

    def test_unmatched_target_ids(self, tmp_path):
        ds, y, z, _ = generate_synthetic(10, seed=0)
        paths = save_study(Study(ds, y, z), tmp_path)
        text = paths["targets"].read_text().replace("s00003", "zzz")
        paths["targets"].write_text(text)
        with pytest.raises(UnmatchedId):
            load_study(paths["schema"], paths["features"], paths["targets"], paths["confounders"])

    def test_rows_with_missing_target_dropped(self, tmp_path):
        ds, y, z, _ = generate_synthetic(10, seed=0)
        paths = save_study(Study(ds, y, z), tmp_path)
        lines = paths["targets"].read_text().splitlines()
        cells = lines[2].split(",")
        cells[1] = ""
        lines[2] = ",".join(cells)
        paths["targets"].write_text("\n".join(lines) + "\n")
        s = load_study(paths["schema"], paths["features"], paths["targets"], paths["confounders"])
        assert s.dataset.n_rows == 9
        assert ds.row_ids[1] not in s.dataset.row_ids


class TestIndexSets:
    def test_full_2x2(self):
        ds = make_dataset([[1.0, 2.0], [3.0, 4.0]])
        assert len(observed_index_set(ds)) == 4
        assert missing_index_set(ds) == set()

    def test_all_missing_column(self):
        ds = make_dataset([[1.0, np.nan], [3.0, np.nan]])
        assert all(j != 1 for _, j, _ in observed_index_set(ds))

    def test_mixed_3x2(self):
        x = np.array([[1.0, np.nan], [np.nan, 2.0], [3.0, 4.0]])
        ds = make_dataset(x, [("a", "continuous", 1), ("b", "continuous", 1)])
        assert observed_index_set(ds) == {(0, 0, 1), (1, 1, 2), (2, 0, 1), (2, 1, 2)}
        assert missing_index_set(ds) == {(0, 1, 2), (1, 0, 1)}

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_partition(self, n, p, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, p))
        x[rng.random((n, p)) < 0.4] = np.nan
        ds = make_dataset(x)
        obs, mis = observed_index_set(ds), missing_index_set(ds)
        assert obs.isdisjoint(mis)
        assert len(obs) + len(mis) == n * p
        assert len(obs) == int(ds.mask.sum())


class TestSplitCompleteIncomplete:
    def test_no_missing(self):
        ds = make_dataset(np.ones((3, 2)))
        assert split_complete_incomplete(ds) == (["r0", "r1", "r2"], [])

    def test_one_missing_cell(self):
        ds = make_dataset([[1.0, 2.0], [1.0, np.nan]])
        assert split_complete_incomplete(ds) == (["r0"], ["r1"])

    def test_block_missing_partition(self):
        ds, *_ = generate_synthetic(100, config=SyntheticConfig(missingness_rate=0.3), seed=1)
        complete, incomplete = split_complete_incomplete(ds)
        assert len(complete) + len(incomplete) == 100
        assert set(complete).isdisjoint(incomplete)
        assert len(incomplete) > 0


class TestGenerateSynthetic:
    def test_zero_rate_all_observed(self):
        ds, *_ = generate_synthetic(30, config=SyntheticConfig(missingness_rate=0.0), seed=0)
        assert ds.mask.all()

    def test_same_seed_bit_identical(self):
        a = generate_synthetic(50, seed=7)
        b = generate_synthetic(50, seed=7)
        assert np.array_equal(a[0].values, b[0].values, equal_nan=True)
        np.testing.assert_array_equal(a[1].values, b[1].values)
        np.testing.assert_array_equal(a[2].values, b[2].values)
        np.testing.assert_array_equal(a[3].weights, b[3].weights)

    def test_different_seed_differs(self):
        a, *_ = generate_synthetic(50, seed=1)
        b, *_ = generate_synthetic(50, seed=2)
        assert not np.array_equal(a.values, b.values, equal_nan=True)

    def test_block_mechanism_masks_whole_modalities(self):
        ds, *_ = generate_synthetic(200, config=SyntheticConfig(missingness_rate=0.3), seed=4)
        for m in ds.schema:
            block = ds.mask[:, ds.columns_of(m.name)]
            assert np.all(block.all(axis=1) | ~block.any(axis=1))
        rate = 1 - ds.mask.mean()
        assert 0.15 < rate < 0.4

    def test_targets_follow_ground_truth(self):
        cfg = SyntheticConfig(missingness_rate=0.0, noise_sd=0.0)
        ds, y, z, truth = generate_synthetic(30, config=cfg, seed=5)
        expected = ds.values @ truth.weights + z.values @ truth.confounder_weights
        np.testing.assert_allclose(y.values, expected, atol=1e-10)

    def test_ordinal_codes_are_integers(self):
        ds, *_ = generate_synthetic(60, seed=0)
        cols = ds.columns_of("mod4")
        vals = ds.values[:, cols][ds.mask[:, cols]]
        np.testing.assert_array_equal(vals, np.round(vals))
        assert vals.min() >= 0

    def test_twins_at_zero_distance(self):
        cfg = SyntheticConfig(missingness_rate=0.3, duplicate_twins=True)
        ds, _, _, truth = generate_synthetic(200, config=cfg, seed=0)
        x, m = ds.values, ds.mask
        _, incomplete = split_complete_incomplete(ds)
        assert incomplete
        for rid in incomplete:
            i = ds.row_ids.index(rid)
            found = False
            for t in range(ds.n_rows):
                if t == i or not m[t].all():
                    continue
                co = m[i] & m[t]
                if co.any() and np.array_equal(x[i, co], x[t, co]):
                    found = True
                    break
            assert found, rid

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_invalid_rate(self, rate):
        with pytest.raises(InvalidRate):
            generate_synthetic(10, config=SyntheticConfig(missingness_rate=rate))

    def test_default_schema_shape(self):
        s = default_schema()
        assert [m.kind for m in s] == ["continuous"] * 3 + ["ordinal"]
        assert sum(len(m.feature_names) for m in s) == 13
