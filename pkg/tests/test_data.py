import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oofdistill.data import DataError, load_dataset, make_folds


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadDataset:
    def test_dense_reindex_by_first_appearance(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,label\n1,a\n2,b\n3,a\n4,b\n")
        ds = load_dataset(p, "label", min_class_count=2)
        assert ds.C == 2
        assert ds.labels.tolist() == [0, 1, 0, 1]

    def test_zero_imputation(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,label\n1.5,a\n,b\n2.0,a\nnan,b\n")
        ds = load_dataset(p, "label", min_class_count=2)
        assert ds.features[:, 0].tolist() == [1.5, 0.0, 2.0, 0.0]

    def test_zero_imputation_preserves_observed_values(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,label\n-3.25,a\n7,b\n0.125,a\n9,b\n")
        ds = load_dataset(p, "label", min_class_count=2)
        assert ds.features[:, 0].tolist() == [-3.25, 7.0, 0.125, 9.0]

    def test_categorical_first_appearance_encoding(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "c,label\nred,a\nblue,b\nred,a\ngreen,b\n")
        ds = load_dataset(p, "label", min_class_count=2)
        assert ds.features[:, 0].tolist() == [0.0, 1.0, 0.0, 2.0]
        assert ds.categorical_flags.tolist() == [True]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_dataset(tmp_path / "absent.csv", "label")

    def test_label_column_absent(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,y\n1,2\n")
        with pytest.raises(DataError, match="label column"):
            load_dataset(p, "label")

    def test_small_class_reported_with_id(self, tmp_path):
        p = write_csv(tmp_path / "t.csv",
                      "x,label\n" + "".join(f"{i},a\n" for i in range(10)) + "99,b\n")
        with pytest.raises(DataError, match="class 1 has 1"):
            load_dataset(p, "label", min_class_count=5)

    def test_single_class(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,label\n" + "".join(f"{i},a\n" for i in range(10)))
        with pytest.raises(DataError, match="single-class"):
            load_dataset(p, "label", min_class_count=2)

    def test_missing_label_rejected(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,label\n1,a\n2,\n3,a\n4,b\n")
        with pytest.raises(DataError, match="missing label"):
            load_dataset(p, "label", min_class_count=1)

    def test_idempotent_load(self, tmp_path):
        p = write_csv(tmp_path / "t.csv",
                      "x,c,label\n1.5,u,a\n,v,b\n2.25,u,a\n-1,w,b\n3,v,a\n4,u,b\n")
        a = load_dataset(p, "label", min_class_count=3)
        b = load_dataset(p, "label", min_class_count=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_no_nan_after_preprocessing(self, tmp_path):
        p = write_csv(tmp_path / "t.csv", "x,y,label\nnan,1,a\n,2,b\n3,NA,a\n4,?,b\n")
        ds = load_dataset(p, "label", min_class_count=2)
        assert np.all(np.isfinite(ds.features))


class TestMakeFolds:
    def test_balanced_divisible(self):
        labels = np.array([0, 1] * 50)
        plan = make_folds(labels, K=5, seed=0)
        for k in range(5):
            idx = plan.fold_indices(k)
            assert len(idx) == 20
            assert (labels[idx] == 0).sum() == 10
            assert (labels[idx] == 1).sum() == 10

    def test_remainder_counts_differ_by_at_most_one(self):
        # 7 rows of class 1 across 5 folds: brute-force check of the counts
        labels = np.array([0] * 10 + [1] * 7)
        plan = make_folds(labels, K=5, seed=3)
        counts = sorted(
            int(((labels == 1) & (plan.assignment == k)).sum()) for k in range(5)
        )
        assert counts == [1, 1, 1, 2, 2]

    def test_deterministic(self):
        labels = np.array([0, 1, 2] * 20)
        a = make_folds(labels, K=4, seed=9)
        b = make_folds(labels, K=4, seed=9)
        assert np.array_equal(a.assignment, b.assignment)
        assert a.digest() == b.digest()

    def test_seed_changes_assignment(self):
        labels = np.array([0, 1] * 30)
        a = make_folds(labels, K=5, seed=0)
        b = make_folds(labels, K=5, seed=1)
        assert not np.array_equal(a.assignment, b.assignment)

    def test_class_too_small(self):
        labels = np.array([0] * 10 + [1] * 3)
        with pytest.raises(DataError, match="class 1 has 3"):
            make_folds(labels, K=5, seed=0)

    def test_k_too_small(self):
        with pytest.raises(DataError, match="at least 2"):
            make_folds(np.array([0, 1] * 5), K=1, seed=0)

    @settings(max_examples=50, deadline=None)
    @given(
        class_sizes=st.lists(st.integers(min_value=5, max_value=40), min_size=2, max_size=5),
        K=st.integers(min_value=2, max_value=5),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_stratification_and_partition_properties(self, class_sizes, K, seed):
        labels = np.concatenate([np.full(sz, c) for c, sz in enumerate(class_sizes)])
        rng = np.random.default_rng(seed)
        labels = rng.permutation(labels)
        plan = make_folds(labels, K=K, seed=seed)
        # partition: each row in exactly one fold
        assert plan.assignment.min() >= 0 and plan.assignment.max() < K
        # stratification: per-class counts differ by at most one across folds
        for c in range(len(class_sizes)):
            counts = [int(((labels == c) & (plan.assignment == k)).sum()) for k in range(K)]
            assert max(counts) - min(counts) <= 1
        # every fold non-empty
        assert all(plan.fold_indices(k).size > 0 for k in range(K))
