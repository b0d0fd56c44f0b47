import numpy as np
import pytest

from oofdistill import losses
from oofdistill.labeling import SoftLabelSet
from oofdistill.losses import (LossConfig, LossError, kl, mixed_loss,
                               mixed_loss_grad, smooth_target, temper)
from oofdistill.util import softmax

# Frozen with mpmath at 50 digits before implementation:
#   temper((0.8, 0.2), 2)                       -> (2/3, 1/3)
#   temper((0.6, 0.4), 2)                       -> (0.5505102572168219, 0.4494897427831781)
#   kl((0.5, 0.5), (0.75, 0.25))                -> 0.14384103622589046
#   single-sample mixed loss (see below)        -> 0.23157219960509322
TEMPER_08_02_T2 = (2.0 / 3.0, 1.0 / 3.0)
TEMPER_06_04_T2 = (0.5505102572168219, 0.4494897427831781)
KL_HALF_VS_3Q = 0.14384103622589046
MIXED_SINGLE = 0.23157219960509322


def annotated(probs, T, w):
    probs = np.asarray(probs, dtype=np.float64)
    return SoftLabelSet(
        probs=probs,
        entropy=np.zeros(len(probs)),
        temperature=np.asarray(T, dtype=np.float64),
        weight=np.asarray(w, dtype=np.float64),
    )


class TestTemper:
    def test_identity_at_t1(self):
        p = np.array([0.3, 0.2, 0.5])
        np.testing.assert_allclose(temper(p, 1.0), p, atol=1e-9)

    def test_sqrt_softening(self):
        np.testing.assert_allclose(temper(np.array([0.8, 0.2]), 2.0),
                                   TEMPER_08_02_T2, atol=1e-9)

    def test_uniform_fixed_point(self):
        p = np.full(4, 0.25)
        for T in (1.0, 2.0, 5.0):
            np.testing.assert_allclose(temper(p, T), p, atol=1e-12)

    def test_rejects_t_below_one(self):
        with pytest.raises(LossError, match="T >= 1"):
            temper(np.array([0.5, 0.5]), 0.5)

    def test_preserves_argmax_and_simplex(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            T = rng.uniform(1.0, 5.0)
            q = temper(p, T)
            assert q.argmax() == p.argmax()
            np.testing.assert_allclose(q.sum(), 1.0, atol=1e-12)

    def test_one_hot_stays_finite(self):
        q = temper(np.array([1.0, 0.0]), 3.0)
        assert np.all(np.isfinite(q))
        np.testing.assert_allclose(q.sum(), 1.0, atol=1e-12)


class TestKl:
    def test_zero_for_identical(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform_is_ln2(self):
        assert kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
            np.log(2.0), abs=1e-12)

    def test_oracle_value(self):
        assert kl(np.array([0.5, 0.5]), np.array([0.75, 0.25])) == pytest.approx(
            KL_HALF_VS_3Q, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = rng.dirichlet(np.ones(4))
            q = rng.dirichlet(np.ones(4))
            assert kl(p, q) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(LossError, match="shape"):
            kl(np.array([1.0, 0.0]), np.array([0.4, 0.3, 0.3]))


class TestSmoothTarget:
    def test_binary(self):
        np.testing.assert_allclose(smooth_target(0, 2, 0.05), [0.975, 0.025], atol=1e-12)

    def test_zero_smoothing_exact_one_hot(self):
        np.testing.assert_array_equal(smooth_target(1, 3, 0.0), [0.0, 1.0, 0.0])

    def test_four_class(self):
        np.testing.assert_allclose(smooth_target(2, 4, 0.2),
                                   [0.05, 0.05, 0.85, 0.05], atol=1e-12)


class TestMixedLoss:
    def test_alpha_zero_reduces_to_weighted_ce(self):
        rng = np.random.default_rng(2)
        probs = rng.dirichlet(np.ones(3), size=8)
        q = rng.dirichlet(np.ones(3), size=8)
        y = rng.integers(0, 3, size=8)
        w = rng.uniform(0.1, 1.0, size=8)
        soft = annotated(probs, np.full(8, 2.0), w)
        cfg = LossConfig(alpha=0.0)
        expected = float(np.sum(w * -np.log(np.maximum(q[np.arange(8), y], 1e-6))))
        assert mixed_loss(soft, q, y, cfg) == pytest.approx(expected, rel=1e-12)

    def test_alpha_one_zero_when_student_equals_teacher(self):
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(4), size=5)
        soft = annotated(probs, rng.uniform(1, 5, 5), np.ones(5))
        y = np.zeros(5, dtype=int)
        assert mixed_loss(soft, probs.copy(), y, LossConfig(alpha=1.0)) == pytest.approx(
            0.0, abs=1e-10)

    def test_single_sample_oracle(self):
        soft = annotated([[0.8, 0.2]], [2.0], [1.0])
        got = mixed_loss(soft, np.array([[0.6, 0.4]]), np.array([0]),
                         LossConfig(alpha=0.7, label_smoothing=0.0))
        assert got == pytest.approx(MIXED_SINGLE, abs=1e-9)

    def test_weight_scaling_linearity(self):
        rng = np.random.default_rng(4)
        probs = rng.dirichlet(np.ones(3), size=6)
        q = rng.dirichlet(np.ones(3), size=6)
        y = rng.integers(0, 3, size=6)
        w = rng.uniform(0.2, 1.0, size=6)
        T = rng.uniform(1, 5, size=6)
        lam = 3.7
        base = mixed_loss(annotated(probs, T, w), q, y, LossConfig())
        scaled = mixed_loss(annotated(probs, T, lam * w), q, y, LossConfig())
        assert scaled == pytest.approx(lam * base, rel=1e-12)

    def test_continuous_in_alpha_between_endpoints(self):
        rng = np.random.default_rng(5)
        probs = rng.dirichlet(np.ones(3), size=4)
        q = rng.dirichlet(np.ones(3), size=4)
        y = rng.integers(0, 3, size=4)
        soft = annotated(probs, np.full(4, 1.5), np.ones(4))
        l0 = mixed_loss(soft, q, y, LossConfig(alpha=0.0))
        l1 = mixed_loss(soft, q, y, LossConfig(alpha=1.0))
        lm = mixed_loss(soft, q, y, LossConfig(alpha=0.4))
        assert lm == pytest.approx(0.6 * l0 + 0.4 * l1, rel=1e-10)

    def test_requires_annotations(self):
        soft = SoftLabelSet(probs=np.array([[0.5, 0.5]]))
        with pytest.raises(LossError, match="annotations"):
            mixed_loss(soft, np.array([[0.5, 0.5]]), np.array([0]), LossConfig())

    def test_mean_reduction(self):
        soft = annotated([[0.8, 0.2], [0.3, 0.7]], [1.0, 1.0], [1.0, 1.0])
        q = np.array([[0.6, 0.4], [0.4, 0.6]])
        y = np.array([0, 1])
        s = mixed_loss(soft, q, y, LossConfig(reduction="sum"))
        m = mixed_loss(soft, q, y, LossConfig(reduction="mean"))
        assert m == pytest.approx(s / 2.0, rel=1e-12)


class TestMixedLossGrad:
    def test_zero_at_stationary_point(self):
        # student logits reproduce the teacher distribution and the hard
        # target equals the student output -> both terms vanish
        p = np.array([[0.7, 0.3]])
        logits = np.log(p)
        soft = annotated(p, [1.0], [1.0])
        cfg = LossConfig(alpha=1.0)
        g = mixed_loss_grad(soft, logits, np.array([0]), cfg)
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_alpha_zero_is_softmax_ce_gradient(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(5, 4))
        y = rng.integers(0, 4, size=5)
        w = rng.uniform(0.1, 1, size=5)
        soft = annotated(rng.dirichlet(np.ones(4), 5), np.ones(5), w)
        g = mixed_loss_grad(soft, logits, y, LossConfig(alpha=0.0))
        target = np.zeros((5, 4))
        target[np.arange(5), y] = 1.0
        np.testing.assert_allclose(g, w[:, None] * (softmax(logits) - target), atol=1e-12)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7, 1.0])
    def test_finite_difference_agreement(self, alpha):
        rng = np.random.default_rng(7)
        n, C = 4, 5
        probs = rng.dirichlet(np.ones(C), size=n)
        logits = rng.normal(scale=1.0, size=(n, C))
        y = rng.integers(0, C, size=n)
        soft = annotated(probs, rng.uniform(1, 5, n), rng.uniform(0.1, 1, n))
        cfg = LossConfig(alpha=alpha, label_smoothing=0.03)
        g = mixed_loss_grad(soft, logits, y, cfg)
        h = 1e-5
        fd = np.zeros_like(logits)
        for i in range(n):
            for c in range(C):
                zp, zm = logits.copy(), logits.copy()
                zp[i, c] += h
                zm[i, c] -= h
                fd[i, c] = (mixed_loss(soft, softmax(zp), y, cfg)
                            - mixed_loss(soft, softmax(zm), y, cfg)) / (2 * h)
        rel = np.linalg.norm(fd - g) / max(np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4

    def test_rejects_non_finite_logits(self):
        soft = annotated([[0.5, 0.5]], [1.0], [1.0])
        with pytest.raises(LossError, match="non-finite"):
            mixed_loss_grad(soft, np.array([[np.inf, 0.0]]), np.array([0]), LossConfig())


class TestKlInstrumentation:
    def test_alpha_zero_performs_no_kl_evaluations(self):
        losses.reset_kl_eval_count()
        rng = np.random.default_rng(8)
        soft = annotated(rng.dirichlet(np.ones(3), 10), np.ones(10), np.ones(10))
        q = rng.dirichlet(np.ones(3), 10)
        y = rng.integers(0, 3, 10)
        mixed_loss(soft, q, y, LossConfig(alpha=0.0))
        mixed_loss_grad(soft, np.log(q), y, LossConfig(alpha=0.0))
        assert losses.kl_eval_count() == 0
        mixed_loss(soft, q, y, LossConfig(alpha=0.5))
        assert losses.kl_eval_count() == 10
