import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oofdistill.data import make_folds
from oofdistill.labeling import (AnnotationConfig, LabelingError, SoftLabelSet,
                                 annotate, collect_leaky, collect_oof)
from oofdistill.synth import gaussian_mixture_task
from oofdistill.teachers import TeacherSpec
from oofdistill.util import entropy_nats

KNN1 = TeacherSpec(kind="knn", name="knn1", k=1, smoothing=0.0)
KNN5 = TeacherSpec(kind="knn", name="knn5", k=5, smoothing=1e-3)
LOGIT = TeacherSpec(kind="multinomial-logistic", name="logit")


@pytest.fixture(scope="module")
def task():
    ds = gaussian_mixture_task(n=300, n_classes=3, seed=12)
    plan = make_folds(ds.labels, K=5, seed=0)
    return ds, plan


class TestCollectOof:
    def test_single_teacher_equals_foldwise_predictions(self, task):
        ds, plan = task
        from oofdistill.teachers import fit_teacher
        from oofdistill.util import derive_seed

        out = collect_oof(ds, plan, [KNN5], seed=0)
        expected = np.zeros_like(out.probs)
        for k in range(plan.K):
            ctx = plan.complement_indices(k)
            t = fit_teacher(KNN5, ds.features[ctx], ds.labels[ctx], ds.C,
                            seed=derive_seed(0, KNN5.name, k))
            expected[plan.fold_indices(k)] = t.predict_proba(ds.features[plan.fold_indices(k)])
        np.testing.assert_array_equal(out.probs, expected)

    def test_two_teacher_equal_weight_mean(self, task):
        ds, plan = task
        both = collect_oof(ds, plan, [KNN5, LOGIT], seed=0)
        a = collect_oof(ds, plan, [KNN5], seed=0)
        b = collect_oof(ds, plan, [LOGIT], seed=0)
        np.testing.assert_array_equal(both.probs, (a.probs + b.probs) / 2.0)

    def test_three_vector_mean(self):
        rows = [np.array([[0.6, 0.4]]), np.array([[0.8, 0.2]]), np.array([[0.7, 0.3]])]
        np.testing.assert_allclose(np.mean(rows, axis=0), [[0.7, 0.3]], atol=1e-12)

    def test_every_row_labeled_once_and_simplex(self, task):
        ds, plan = task
        out = collect_oof(ds, plan, [KNN5], seed=1)
        assert out.probs.shape == (ds.n_rows, ds.C)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)

    def test_leakage_freedom_provenance(self, task):
        ds, plan = task
        out = collect_oof(ds, plan, [KNN5], seed=0)
        assert out.provenance["leaky"] is False
        assert out.provenance["fold_plan"] == plan.digest()
        # the contributing teacher for row i saw only folds != fold(i)
        np.testing.assert_array_equal(out.provenance["fold_of_row"], plan.assignment)

    def test_plan_mismatch(self, task):
        ds, plan = task
        bad = make_folds(ds.labels[:200], K=5, seed=0)
        with pytest.raises(LabelingError, match="covers 200 rows"):
            collect_oof(ds, bad, [KNN5], seed=0)

    def test_teacher_error_carries_fold_context(self, task):
        ds, plan = task
        broken = TeacherSpec(kind="cache", name="nope", path="/does/not/exist.csv")
        with pytest.raises(LabelingError, match=r"teacher 'nope' on fold 0"):
            collect_oof(ds, plan, [broken], seed=0)

    def test_deterministic(self, task):
        ds, plan = task
        a = collect_oof(ds, plan, [KNN5, LOGIT], seed=3)
        b = collect_oof(ds, plan, [KNN5, LOGIT], seed=3)
        np.testing.assert_array_equal(a.probs, b.probs)


class TestCollectLeaky:
    def test_knn1_no_smoothing_is_exact_one_hot(self, task):
        ds, _ = task
        out = collect_leaky(ds, [KNN1], seed=0)
        onehot = np.zeros((ds.n_rows, ds.C))
        onehot[np.arange(ds.n_rows), ds.labels] = 1.0
        np.testing.assert_array_equal(out.probs, onehot)
        assert out.provenance["leaky"] is True

    def test_leaky_entropy_below_oof_entropy(self, task):
        ds, plan = task
        leaky = collect_leaky(ds, [KNN5], seed=0)
        oof = collect_oof(ds, plan, [KNN5], seed=0)
        assert entropy_nats(leaky.probs).mean() < entropy_nats(oof.probs).mean()

    def test_cache_kind_rejected(self, task):
        ds, _ = task
        spec = TeacherSpec(kind="cache", name="c", path="whatever.csv")
        with pytest.raises(LabelingError, match="cache teachers cannot"):
            collect_leaky(ds, [spec], seed=0)


class TestAnnotate:
    def test_one_hot_closed_forms(self):
        # frozen from an arbitrary-precision oracle: w(0) = exp(-6.125)
        soft = SoftLabelSet(probs=np.array([[1.0, 0.0]]))
        ann = annotate(soft, AnnotationConfig(), C=2)
        assert ann.entropy[0] == 0.0
        assert ann.temperature[0] == 1.0
        np.testing.assert_allclose(ann.weight[0], 0.0021874911181828851, atol=1e-12)

    def test_weight_peak_at_mu(self):
        # a distribution with entropy exactly 0.7 nats gets weight 1
        # (needs C >= 3: binary entropy tops out at ln 2 < 0.7)
        p = _three_class_with_entropy(0.7)
        ann = annotate(SoftLabelSet(probs=np.array([p])), AnnotationConfig(), C=3)
        np.testing.assert_allclose(ann.entropy[0], 0.7, atol=1e-12)
        np.testing.assert_allclose(ann.weight[0], 1.0, atol=1e-9)

    def test_uniform_row_hits_t_max(self):
        soft = SoftLabelSet(probs=np.array([[0.5, 0.5]]))
        ann = annotate(soft, AnnotationConfig(), C=2)
        np.testing.assert_allclose(ann.entropy[0], np.log(2.0), atol=1e-12)
        assert ann.temperature[0] == 5.0

    def test_rejects_non_simplex(self):
        soft = SoftLabelSet(probs=np.array([[0.5, 0.4]]))
        with pytest.raises(LabelingError, match="sum to"):
            annotate(soft, AnnotationConfig(), C=2)

    def test_rejects_single_class(self):
        soft = SoftLabelSet(probs=np.ones((3, 1)))
        with pytest.raises(LabelingError, match="at least 2 classes"):
            annotate(soft, AnnotationConfig(), C=1)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="t_min"):
            annotate(SoftLabelSet(probs=np.array([[1.0, 0.0]])),
                     AnnotationConfig(t_min=0.5), C=2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=6),
           st.integers(min_value=0, max_value=2**31))
    def test_annotation_properties(self, raw, seed):
        p = np.asarray(raw)
        p = p / p.sum()
        C = len(p)
        ann = annotate(SoftLabelSet(probs=p[None, :]), AnnotationConfig(), C=C)
        H, T, w = ann.entropy[0], ann.temperature[0], ann.weight[0]
        assert 0.0 <= H <= np.log(C) + 1e-12
        assert 1.0 <= T <= 5.0
        assert 0.0 < w <= 1.0
        # weight hits 1 iff entropy equals mu
        if abs(H - 0.7) > 1e-9:
            assert w < 1.0

    def test_temperature_monotone_in_entropy(self):
        ps = np.array([[0.99, 0.01], [0.9, 0.1], [0.7, 0.3], [0.5, 0.5]])
        ann = annotate(SoftLabelSet(probs=ps), AnnotationConfig(), C=2)
        order = np.argsort(ann.entropy)
        assert np.all(np.diff(ann.temperature[order]) >= 0)


def _three_class_with_entropy(target_nats: float) -> np.ndarray:
    """Bisect for (p, q, q) with the requested entropy; entropy is strictly
    decreasing in p on [1/3, 1)."""
    lo, hi = 1.0 / 3.0, 1.0 - 1e-15
    for _ in range(200):
        mid = (lo + hi) / 2.0
        q = (1.0 - mid) / 2.0
        h = -(mid * np.log(mid) + 2.0 * q * np.log(q))
        if h > target_nats:
            lo = mid
        else:
            hi = mid
    p = (lo + hi) / 2.0
    return np.array([p, (1.0 - p) / 2.0, (1.0 - p) / 2.0])
