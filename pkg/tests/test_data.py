import numpy as np
import pytest

from jkconformal.data import (
    Dataset,
    ModelOutputs,
    ParseError,
    RiskLevel,
    SplitSpec,
    load_dataset,
    save_dataset,
    split,
)


def make_dataset(n=50, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(features=rng.normal(size=(n, d)), labels=rng.normal(size=n))


class TestDataset:
    def test_shapes(self):
        ds = make_dataset(10, 3)
        assert len(ds) == 10
        assert ds.n_features == 3

    def test_1d_features_promoted(self):
        ds = Dataset(features=np.arange(4.0), labels=np.zeros(4))
        assert ds.features.shape == (4, 1)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Dataset(features=np.array([[0.0], [np.nan]]), labels=np.zeros(2))
        with pytest.raises(ValueError):
            Dataset(features=np.zeros((2, 1)), labels=np.array([0.0, np.inf]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(features=np.zeros((3, 1)), labels=np.zeros(2))

    def test_arrays_read_only(self):
        ds = make_dataset()
        with pytest.raises(ValueError):
            ds.labels[0] = 1.0


class TestModelOutputs:
    def test_embedding_row_check(self):
        with pytest.raises(ValueError):
            ModelOutputs(predictions=np.zeros(3), embeddings=np.zeros((2, 2)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ModelOutputs(predictions=np.array([np.nan]))


class TestRiskLevel:
    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_boundary(self, alpha):
        with pytest.raises(ValueError):
            RiskLevel(alpha)

    def test_accepts_interior(self):
        assert RiskLevel(0.05).alpha == 0.05


class TestSplit:
    def test_partition_properties(self):
        ds = make_dataset(100)
        spec = SplitSpec(seed=7, n_train=30, n_cal=40, n_test=20)
        tr, ca, te = split(ds, spec)
        assert len(tr) == 30 and len(ca) == 40 and len(te) == 20
        combined = np.concatenate([tr, ca, te])
        assert len(np.unique(combined)) == 90  # disjoint
        for part in (tr, ca, te):
            assert np.all(np.diff(part) > 0)  # sorted

    def test_deterministic(self):
        ds = make_dataset(100)
        spec = SplitSpec(seed=3, n_train=10, n_cal=10, n_test=10)
        a = split(ds, spec)
        b = split(ds, spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_repetitions_differ(self):
        ds = make_dataset(100)
        a = split(ds, SplitSpec(seed=3, n_train=40, n_cal=40, n_test=20))
        b = split(
            ds,
            SplitSpec(seed=3, n_train=40, n_cal=40, n_test=20, repetition_index=1),
        )
        assert not np.array_equal(a[0], b[0])

    def test_oversized_request_rejected(self):
        ds = make_dataset(10)
        with pytest.raises(ValueError):
            split(ds, SplitSpec(seed=0, n_train=5, n_cal=5, n_test=5))


class TestCSV:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = make_dataset(20, 3, seed=5)
        path = tmp_path / "d.csv"
        save_dataset(path, ds)
        loaded, outputs = load_dataset(path)
        assert outputs is None
        np.testing.assert_array_equal(loaded.features, ds.features)
        np.testing.assert_array_equal(loaded.labels, ds.labels)

    def test_round_trip_with_outputs(self, tmp_path):
        ds = make_dataset(15, 2, seed=1)
        rng = np.random.default_rng(2)
        out = ModelOutputs(
            predictions=rng.normal(size=15), embeddings=rng.normal(size=(15, 4))
        )
        path = tmp_path / "d.csv"
        save_dataset(path, ds, out)
        loaded, loaded_out = load_dataset(path)
        np.testing.assert_array_equal(loaded_out.predictions, out.predictions)
        np.testing.assert_array_equal(loaded_out.embeddings, out.embeddings)

    def test_parse_error_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,y\n0.1,0.2\nfoo,0.3\n")
        with pytest.raises(ParseError, match="row 3"):
            load_dataset(path)

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,x1\n0.1,0.2\n")
        with pytest.raises(ParseError):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError):
            load_dataset(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0,y\n0.1,0.2\n0.3\n")
        with pytest.raises(ParseError, match="row 3"):
            load_dataset(path)
