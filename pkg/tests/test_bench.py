import numpy as np
import pytest

from oofdistill.bench import BenchError, measure_latency, speedup
from oofdistill.gbdt import GbdtConfig, fit_gbdt, predict_gbdt
from oofdistill.synth import gaussian_mixture_task


def slow_predict(X):
    s = 0.0
    for _ in range(50):
        s += float(np.sum(X[:, 0] * 1.000001))
    return s


class TestMeasureLatency:
    def test_macro_mean_of_dataset_means(self):
        rng = np.random.default_rng(0)
        report = measure_latency(
            slow_predict,
            [("a", rng.normal(size=(50, 3))), ("b", rng.normal(size=(50, 3)))],
            batch_size=20, warmup=2, iters=5,
        )
        means = list(report.per_dataset_ms.values())
        assert report.macro_mean_ms == pytest.approx(np.mean(means))
        assert all(v > 0 for v in means)

    def test_mean_within_min_max_and_raw_retained(self):
        rng = np.random.default_rng(1)
        report = measure_latency(slow_predict, [("a", rng.normal(size=(40, 2)))],
                                 batch_size=10, warmup=1, iters=8)
        raw = np.array(report.raw_samples_ms["a"])
        assert len(raw) == 8
        assert raw.min() <= report.per_dataset_ms["a"] <= raw.max()

    def test_fast_function_triggers_inner_repetition(self):
        report = measure_latency(lambda X: None, [("a", np.zeros((4, 2)))],
                                 batch_size=2, warmup=1, iters=3)
        assert report.inner_reps["a"] > 1

    def test_fixed_batch_is_cycled_to_batch_size(self):
        seen = {}

        def probe(X):
            seen["shape"] = X.shape

        measure_latency(probe, [("a", np.zeros((7, 3)))], batch_size=20,
                        warmup=0, iters=1)
        assert seen["shape"] == (20, 3)

    def test_measured_region_spawns_no_threads(self):
        rng = np.random.default_rng(2)
        ds = gaussian_mixture_task(n=120, n_classes=2, seed=3)
        onehot = np.zeros((120, 2))
        onehot[np.arange(120), ds.labels] = 1.0
        model = fit_gbdt(ds.features, onehot, np.ones(120),
                         GbdtConfig(n_rounds=5, patience=5), hard_labels=ds.labels)
        report = measure_latency(lambda X: predict_gbdt(model, X),
                                 [("a", rng.normal(size=(50, ds.n_features)))],
                                 batch_size=50, warmup=3, iters=10)
        if report.threads_before["a"] is not None:
            assert report.threads_after["a"] == report.threads_before["a"]

    def test_more_rounds_strictly_slower(self):
        ds = gaussian_mixture_task(n=200, n_classes=2, seed=4, center_scale=0.3)
        onehot = np.zeros((200, 2))
        onehot[np.arange(200), ds.labels] = 1.0
        small = fit_gbdt(ds.features, onehot, np.ones(200),
                         GbdtConfig(n_rounds=10, patience=10, learning_rate=0.05),
                         hard_labels=ds.labels)
        big = fit_gbdt(ds.features, onehot, np.ones(200),
                       GbdtConfig(n_rounds=80, patience=80, learning_rate=0.05),
                       hard_labels=ds.labels)
        assert big.n_rounds > small.n_rounds
        batch = np.random.default_rng(5).normal(size=(500, ds.n_features))
        r_small = measure_latency(lambda X: predict_gbdt(small, X), [("a", batch)],
                                  batch_size=500, warmup=3, iters=15)
        r_big = measure_latency(lambda X: predict_gbdt(big, X), [("a", batch)],
                                batch_size=500, warmup=3, iters=15)
        assert r_big.macro_mean_ms > r_small.macro_mean_ms

    def test_bad_arguments(self):
        with pytest.raises(BenchError):
            measure_latency(lambda X: None, [("a", np.zeros((3, 1)))], iters=0)


class TestSpeedup:
    def test_ratio(self):
        # the published teacher/student pair: 151 ms vs 1.9 ms is about 79x
        assert speedup(151.0, 1.9) == pytest.approx(79.47, abs=0.01)

    def test_zero_student(self):
        with pytest.raises(BenchError):
            speedup(100.0, 0.0)
