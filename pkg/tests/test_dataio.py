import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infsel.dataio import (SYNTHETIC_KINDS, SplitSpec, Standardizer, fingerprint, gen_synthetic, load_csv, split,
                           split_indices, standardize_splits, with_intercept)
from infsel.errors import ConfigError, EmptyDatasetError, ParseError, SchemaError
from infsel.losskernels import Dataset, LossKernel, fit_erm


@pytest.fixture
def write(tmp_path):
    def _write(text: str, name: str = "d.csv"):
        p = tmp_path / name
        p.write_text(text)
        return p
    return _write


class TestLoadCSV:
    def test_direct_read(self, write):
        data = load_csv(write("x,y\n1,2\n3,4\n5,6\n"), "y")
        np.testing.assert_array_equal(data.features, [[1], [3], [5]])
        np.testing.assert_array_equal(data.targets, [2, 4, 6])

    def test_index_target_and_no_header(self, write):
        data = load_csv(write("1,2,3\n4,5,6\n"), 0, header=False)
        np.testing.assert_array_equal(data.targets, [1, 4])
        np.testing.assert_array_equal(data.features, [[2, 3], [5, 6]])

    def test_empty_data_section(self, write):
        with pytest.raises(EmptyDatasetError):
            load_csv(write("x,y\n"), "y")

    def test_empty_file(self, write):
        with pytest.raises(EmptyDatasetError):
            load_csv(write(""), "y")

    def test_first_appearance_labels(self, write):
        data = load_csv(write("x,c\n0,b\n1,a\n2,b\n"), "c", task="classification")
        np.testing.assert_array_equal(data.targets, [0, 1, 0])
        assert data.n_classes == 2

    def test_unparseable_cell_coordinates(self, write):
        with pytest.raises(ParseError) as exc:
            load_csv(write("x,z,y\n1,2,3\n4,oops,6\n"), "y")
        assert (exc.value.row, exc.value.column) == (3, 2)

    def test_missing_target(self, write):
        with pytest.raises(SchemaError):
            load_csv(write("x,y\n1,2\n"), "target")

    def test_ragged_row(self, write):
        with pytest.raises(ParseError):
            load_csv(write("x,y\n1,2\n3\n"), "y")

    def test_non_numeric_regression_target(self, write):
        with pytest.raises(ParseError):
            load_csv(write("x,y\n1,a\n"), "y")

    def test_unknown_task(self, write):
        with pytest.raises(ConfigError):
            load_csv(write("x,y\n1,2\n"), "y", task="ranking")


class TestSplit:
    def test_sizes(self):
        s = split_indices(100)
        assert (s.test.size, s.validation.size, s.train.size) == (20, 16, 64)

    def test_deterministic(self):
        a, b = split_indices(57, SplitSpec(seed=3)), split_indices(57, SplitSpec(seed=3))
        for f in ("train", "validation", "test"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_n5_empty_validation(self):
        with pytest.raises(ConfigError):
            split_indices(5)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.2])
    def test_bad_fractions(self, frac):
        with pytest.raises(ConfigError):
            SplitSpec(test_fraction=frac)

    def test_split_datasets(self):
        data = Dataset(np.arange(20.0)[:, None], np.arange(20.0))
        tr, va, te = split(data, SplitSpec(seed=1))
        assert (tr.n, va.n, te.n) == (13, 3, 4)
        assert sorted(np.concatenate([tr.targets, va.targets, te.targets]).tolist()) == list(range(20))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(7, 3000), seed=st.integers(0, 2**32 - 1))
def test_split_is_partition(n, seed):
    s = split_indices(n, SplitSpec(seed=seed))
    allidx = np.concatenate([s.train, s.validation, s.test])
    assert allidx.size == n and np.array_equal(np.sort(allidx), np.arange(n))


class TestStandardizer:
    def test_train_moments(self):
        X = np.random.default_rng(0).normal(5, 3, (200, 4))
        Z = Standardizer.fit(X).transform(X)
        assert np.abs(Z.mean(0)).max() <= 1e-9 and np.abs(Z.std(0) - 1).max() <= 1e-9

    def test_constant_column(self):
        X = np.column_stack([np.full(10, 4.0), np.arange(10.0)])
        st_ = Standardizer.fit(X)
        assert st_.sd[0] == 1.0
        np.testing.assert_array_equal(st_.transform(X)[:, 0], 0.0)

    def test_no_peeking(self):
        data = gen_synthetic("outlier_regression", 100, 3, seed=1)
        tr, va, te = split(data, SplitSpec(seed=0))
        mutated = Dataset(te.features * 1000 + 7, te.targets)
        a = standardize_splits(tr, va, te)
        b = standardize_splits(tr, va, mutated)
        np.testing.assert_array_equal(a[0].features, b[0].features)
        np.testing.assert_array_equal(a[1].features, b[1].features)

    def test_intercept(self):
        data = with_intercept(Dataset(np.zeros((3, 2)), [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(data.features[:, -1], 1.0)


class TestSynthetic:
    @pytest.mark.parametrize("kind", SYNTHETIC_KINDS)
    def test_deterministic(self, kind):
        a, b = gen_synthetic(kind, 50, 3, seed=9), gen_synthetic(kind, 50, 3, seed=9)
        assert fingerprint(a) == fingerprint(b)
        assert fingerprint(a) != fingerprint(gen_synthetic(kind, 50, 3, seed=10))

    def test_two_gaussians_separable(self):
        data = gen_synthetic("two_gaussians", 4, 2, seed=0, separation=10.0)
        model = fit_erm(LossKernel("logistic", 2, 1e-4), data, range(4))
        pred = (data.features @ model.theta > 0).astype(int)
        np.testing.assert_array_equal(pred, data.targets)

    def test_outlier_fraction_zero_is_homoscedastic(self):
        # with no outliers the residuals share one noise scale; compare against the default's tail
        clean = gen_synthetic("outlier_regression", 4000, 2, seed=3, outlier_fraction=0.0)
        dirty = gen_synthetic("outlier_regression", 4000, 2, seed=3)
        def resid(d):
            beta = np.linalg.lstsq(d.features, d.targets, rcond=None)[0]
            return d.targets - d.features @ beta
        assert np.abs(resid(clean)).max() < 6
        assert np.abs(resid(dirty)).max() > 20

    def test_label_noise_flips(self):
        clean = gen_synthetic("two_gaussians", 1000, 2, seed=4)
        noisy = gen_synthetic("two_gaussians", 1000, 2, seed=4, label_noise=0.1)
        assert np.sum(clean.targets != noisy.targets) == 100

    def test_multiclass(self):
        data = gen_synthetic("multiclass_blobs", 300, 2, seed=0, n_classes=4)
        assert data.n_classes == 4 and set(data.targets.tolist()) == {0, 1, 2, 3}

    def test_hetero_noise_grows_with_first_feature(self):
        data = gen_synthetic("hetero_regression", 5000, 2, seed=0)
        beta = np.linalg.lstsq(data.features, data.targets, rcond=None)[0]
        r = data.targets - data.features @ beta
        x0 = data.features[:, 0]
        assert np.std(r[x0 > 1]) > 5 * np.std(r[x0 < -1])

    def test_errors(self):
        with pytest.raises(ConfigError):
            gen_synthetic("spirals", 10, 2)
        with pytest.raises(ConfigError):
            gen_synthetic("hetero_regression", 10, 2, separation=3.0)
        with pytest.raises(ConfigError):
            gen_synthetic("two_gaussians", 0, 2)


def test_fingerprint_fields():
    fp = fingerprint(Dataset(np.zeros((3, 2)), [1.0, 2.0, 3.0]))
    assert fp["rows"] == 3 and fp["cols"] == 2 and fp["task"] == "regression" and len(fp["sha256"]) == 64
