import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadmed.data import (DataValidationError, Dataset, Scheme, build_fold_plan, clip_probability,
                          clip_ratio, csv_header, read_csv, validate_dataset, write_csv)


def small(a=(1, 0, 1, 0), y=None):
    n = len(a)
    y = np.arange(n, dtype=float) if y is None else y
    x = np.column_stack([np.ones(n), np.linspace(-1, 1, n)])
    return Dataset(y, np.asarray(a, float), x, np.linspace(0, 1, n))


class TestValidate:
    def test_accepts_valid(self):
        ds = small()
        assert validate_dataset(ds) is ds

    def test_non_binary_treatment(self):
        with pytest.raises(DataValidationError, match="non-binary"):
            validate_dataset(small(a=(1, 2, 0, 0)))

    def test_non_finite(self):
        with pytest.raises(DataValidationError, match="non-finite"):
            validate_dataset(small(y=np.array([0.0, np.nan, 1.0, 2.0])))

    def test_single_group(self):
        with pytest.raises(DataValidationError, match="single-group"):
            validate_dataset(small(a=(1, 1, 1, 1)))

    def test_intercept_checked(self):
        ds = Dataset([1.0, 2.0], [0.0, 1.0], [[1.0, 0.0], [2.0, 1.0]], [0.0, 1.0])
        with pytest.raises(DataValidationError, match="intercept"):
            validate_dataset(ds)

    def test_dimension_mismatch(self):
        ds = Dataset([1.0, 2.0, 3.0], [0.0, 1.0], np.ones((2, 1)), [0.0, 1.0])
        with pytest.raises(DataValidationError, match="dimension"):
            validate_dataset(ds)

    def test_too_small_for_folds(self):
        with pytest.raises(DataValidationError):
            validate_dataset(small(), k_folds=5)

    def test_idempotent(self):
        ds = small()
        assert validate_dataset(validate_dataset(ds)) == validate_dataset(ds)

    def test_read_only(self):
        ds = small()
        with pytest.raises(ValueError):
            ds.y[0] = 5.0


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 30
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
        ds = Dataset(rng.normal(size=n), rng.integers(0, 2, n), x, rng.normal(size=(n, 2)))
        path = tmp_path / "d.csv"
        write_csv(ds, path)
        assert path.read_text().splitlines()[0] == ",".join(csv_header(4, 2))
        assert read_csv(path) == ds

    def test_header_layout(self):
        assert csv_header(2, 1) == ["y", "a", "x1", "x2", "m1"]

    def test_bad_cell_reports_location(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,a,x1,m1\n1,0,1,0.5\n2,1,1,abc\n")
        with pytest.raises(DataValidationError, match=r"line 3.*m1"):
            read_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,treat,x1,m1\n1,0,1,0.5\n")
        with pytest.raises(DataValidationError):
            read_csv(path)

    def test_non_binary_treatment_in_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,a,x1,m1\n1,0,1,0.5\n2,3,1,0.1\n")
        with pytest.raises(DataValidationError):
            read_csv(path)


class TestFoldPlan:
    def test_full_sizes(self):
        plan = build_fold_plan(10, 5, "FULL", seed=1)
        for k in range(5):
            assert len(plan.eval_indices(k)) == 2
            assert len(plan.train_indices(k)) == 8
            assert np.array_equal(plan.role(k, "anything"), plan.train_indices(k))

    def test_qr3_role_sizes(self):
        plan = build_fold_plan(20, 5, "QR3", seed=3)
        for k in range(5):
            sizes = sorted(len(plan.role(k, r)) for r in ("I0", "I1", "I2"))
            assert sizes == [5, 5, 6]

    def test_deterministic(self):
        a = build_fold_plan(37, 4, "MQR5", seed=9)
        b = build_fold_plan(37, 4, "MQR5", seed=9)
        assert np.array_equal(a.eval_fold_of, b.eval_fold_of)
        for ra, rb in zip(a.roles, b.roles):
            assert all(np.array_equal(p, q) for p, q in zip(ra, rb))

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            build_fold_plan(7, 4)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(10, 300), k=st.integers(2, 5),
           scheme=st.sampled_from(list(Scheme)), seed=st.integers(0, 2**32))
    def test_partition_invariants(self, n, k, scheme, seed):
        plan = build_fold_plan(n, k, scheme, seed)
        evals = [plan.eval_indices(j) for j in range(k)]
        assert np.array_equal(np.sort(np.concatenate(evals)), np.arange(n))
        sizes = [len(e) for e in evals]
        assert max(sizes) - min(sizes) <= 1
        for j in range(k):
            parts = plan.roles[j]
            joined = np.concatenate(parts)
            assert len(joined) == len(set(joined.tolist()))
            assert np.array_equal(np.sort(joined), plan.train_indices(j))
            rs = [len(p) for p in parts]
            assert max(rs) - min(rs) <= 1


def test_clipping():
    assert np.allclose(clip_probability(np.array([0.0, 0.5, 1.0])), [0.01, 0.5, 0.99])
    assert np.allclose(clip_ratio(np.array([0.0, 1.0, 1e9])), [1e-4, 1.0, 1e4])
