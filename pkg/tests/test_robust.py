import numpy as np
import pytest

from diffloc.autodiff import finite_diff
from diffloc.geom import SceneCoordinateField, random_pose
from diffloc.robust import (
    EstimatorConfig,
    ExhaustedSamplingError,
    NoInliersError,
    estimate,
    refine,
    sample_hypotheses,
    score_hard,
    score_soft,
    select,
)
from diffloc.solvers import CorrespondenceSet, Mode

from conftest import posed_points


def rgbd_set(h, e, y):
    return CorrespondenceSet(Mode.RGBD, e, y)


class TestScore:
    def test_all_at_threshold_gives_half(self, rng):
        h = random_pose(rng)
        e = rng.normal(size=(10, 3))
        d = rng.normal(size=(10, 3))
        d *= 0.1 / np.linalg.norm(d, axis=1, keepdims=True)
        s, _ = score_soft(h, rgbd_set(h, e, h.apply(e) + d), EstimatorConfig(tau=0.1))
        assert s == pytest.approx(5.0)

    def test_zero_residual_sigmoid(self, rng):
        # r = 0 with beta * tau = 5 gives sigmoid(5) per point
        h, e, y = posed_points(rng, 1)
        s, _ = score_soft(h, rgbd_set(h, e, y), EstimatorConfig(tau=0.1))
        assert s == pytest.approx(0.993307, abs=1e-6)

    def test_gradient(self, rng):
        h, e, y = posed_points(rng, 12)
        y = y + rng.normal(scale=0.08, size=y.shape)
        cfg = EstimatorConfig(tau=0.1)
        c = rgbd_set(h, e, y)
        _, g, gh = score_soft(h, c, cfg, with_pose_grad=True)
        num = finite_diff(lambda Y: score_soft(h, c.with_scene(Y), cfg)[0], y, 1e-7)[0]
        np.testing.assert_allclose(g.ravel(), num, rtol=1e-5, atol=1e-8)
        num_h = finite_diff(lambda d: score_soft(h.retract(d), c, cfg)[0], np.zeros(6), 1e-7)[0]
        np.testing.assert_allclose(gh, num_h, rtol=1e-5, atol=1e-8)

    def test_far_residuals_have_zero_gradient(self, rng):
        h, e, y = posed_points(rng, 5)
        c = rgbd_set(h, e, y + 2.0)  # residual ~3.5 m, far beyond 10 tau
        _, g = score_soft(h, c, EstimatorConfig(tau=0.1))
        assert np.abs(g).max() < 1e-12

    def test_monotone_in_residual(self, rng):
        h, e, y = posed_points(rng, 1)
        cfg = EstimatorConfig(tau=0.1)
        prev = np.inf
        for r in np.linspace(0.0, 0.5, 30):
            s = score_soft(h, rgbd_set(h, e, y + [r, 0.0, 0.0]), cfg)[0]
            assert s <= prev
            prev = s

    def test_soft_approaches_hard(self, rng):
        h, e, y = posed_points(rng, 50)
        cfg = EstimatorConfig(tau=0.1, beta=1e4)
        off = rng.choice([-1.0, 1.0], 50) * rng.uniform(0.01, 0.09, 50)
        d = rng.normal(size=(50, 3))
        d *= (0.1 + off)[:, None] / np.linalg.norm(d, axis=1, keepdims=True)
        c = rgbd_set(h, e, y + d)
        assert abs(score_soft(h, c, cfg)[0] - score_hard(h, c, cfg)) < 1e-2

    def test_rgb_score_uses_pixels(self, K, rng):
        h, e, y = posed_points(rng, 8)
        c = CorrespondenceSet(Mode.RGB, K.project_camera(e), y)
        assert score_hard(h, c, EstimatorConfig(mode=Mode.RGB), K) == 8


class TestSelect:
    def test_argmax_ties_low_index(self):
        assert select([1.0, 3.0, 3.0, 2.0], EstimatorConfig()) == 1

    def test_softmax_values(self):
        _, p = select([1.0, 2.0, 3.0], EstimatorConfig(alpha=1.0), train=True, rng=np.random.default_rng(0))
        np.testing.assert_allclose(p, [0.0900, 0.2447, 0.6652], atol=1e-4)

    def test_uniform_and_shift_invariance(self):
        cfg = EstimatorConfig(alpha=0.7)
        _, p = select([4.0] * 5, cfg, train=True, rng=np.random.default_rng(0))
        np.testing.assert_allclose(p, 0.2)
        s = np.array([0.3, 5.0, 2.0])
        _, p1 = select(s, cfg, train=True, rng=np.random.default_rng(0))
        _, p2 = select(s + 1000.0, cfg, train=True, rng=np.random.default_rng(0))
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        assert p1.sum() == pytest.approx(1.0, abs=1e-9)

    def test_monotone_transform_keeps_argmax(self, rng):
        s = rng.normal(size=20)
        cfg = EstimatorConfig()
        assert select(s, cfg) == select(np.exp(3 * s) + 7, cfg)

    def test_default_alpha(self):
        assert EstimatorConfig().alpha_value(50) == pytest.approx(2.0)
        assert EstimatorConfig(tau=0.1).beta_value == pytest.approx(50.0)


class TestSampling:
    def test_noiseless_hypotheses_exact(self, rng):
        h, e, y = posed_points(rng, 40)
        hyps = sample_hypotheses(rgbd_set(h, e, y), EstimatorConfig(M=16), rng)
        assert len(hyps) == 16
        for hy in hyps:
            np.testing.assert_allclose(hy.pose.matrix, h.matrix, atol=1e-9)

    def test_all_outliers_exhaust(self, K, rng):
        h, e, y = posed_points(rng, 30)
        c = CorrespondenceSet(Mode.RGB, rng.uniform(0, 640, size=(30, 2)), rng.normal(size=(30, 3)) * 5)
        cfg = EstimatorConfig(mode=Mode.RGB, M=4, tau=1.0, max_resample_attempts=20)
        with pytest.raises(ExhaustedSamplingError):
            sample_hypotheses(c, cfg, rng, K)

    def test_too_few_points(self, rng):
        h, e, y = posed_points(rng, 2)
        with pytest.raises(ExhaustedSamplingError):
            sample_hypotheses(rgbd_set(h, e, y), EstimatorConfig(M=1), rng)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EstimatorConfig(M=0)
        with pytest.raises(ValueError):
            EstimatorConfig(tau=-1.0)


class TestRefine:
    def test_fixed_point(self, rng):
        h, e, y = posed_points(rng, 30)
        ref = refine(h, rgbd_set(h, e, y), EstimatorConfig())
        assert ref.converged and ref.iterations == 1
        assert len(ref.inliers) == 30
        np.testing.assert_allclose(ref.pose.matrix, h.matrix, atol=1e-9)

    def test_excludes_outliers(self, rng):
        h, e, y = posed_points(rng, 40)
        y = y.copy()
        y[:10] += 1.0
        start = h.retract(rng.normal(scale=0.005, size=6))
        ref = refine(start, rgbd_set(h, e, y), EstimatorConfig(tau=0.1))
        np.testing.assert_array_equal(ref.inliers, np.arange(10, 40))
        np.testing.assert_allclose(ref.pose.matrix, h.matrix, atol=1e-9)

    def test_iteration_cap(self, rng):
        h, e, y = posed_points(rng, 40)
        y = y + rng.normal(scale=0.05, size=y.shape)
        ref = refine(h.retract(rng.normal(scale=0.02, size=6)), rgbd_set(h, e, y), EstimatorConfig(max_refine_iters=1))
        assert ref.iterations == 1

    def test_no_inliers(self, rng):
        h, e, y = posed_points(rng, 10)
        with pytest.raises(NoInliersError):
            refine(h, rgbd_set(h, e, y + 5.0), EstimatorConfig())


class TestEstimate:
    def _outlier_instance(self, rng, n=200, frac=0.3, noise=0.01):
        h, e, y = posed_points(rng, n)
        y = y + rng.normal(scale=noise, size=y.shape)
        bad = rng.random(n) < frac
        y[bad] = rng.uniform(-5, 5, size=(bad.sum(), 3))
        return h, e, y

    def test_recovers_pose_with_outliers(self, rng):
        h, e, y = self._outlier_instance(rng)
        res = estimate(SceneCoordinateField.from_points(y), e, EstimatorConfig(M=64), rng=rng)
        assert np.linalg.norm(res.pose.translation - h.translation) < 0.05

    def test_rgb_noiseless(self, K, rng):
        h, e, y = posed_points(rng, 50)
        res = estimate(SceneCoordinateField.from_points(y), K.project_camera(e), EstimatorConfig(mode=Mode.RGB, M=8), K=K, rng=rng)
        np.testing.assert_allclose(res.pose.matrix, h.matrix, atol=1e-6)

    def test_deterministic(self, rng):
        h, e, y = self._outlier_instance(rng)
        f = SceneCoordinateField.from_points(y)
        a = estimate(f, e, EstimatorConfig(M=16), train=True, rng=np.random.default_rng(5))
        b = estimate(f, e, EstimatorConfig(M=16), train=True, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a.pose.matrix, b.pose.matrix)
        np.testing.assert_array_equal(a.probabilities, b.probabilities)
        assert a.selected == b.selected

    def test_single_hypothesis_train(self, rng):
        h, e, y = posed_points(rng, 20)
        res = estimate(SceneCoordinateField.from_points(y), e, EstimatorConfig(M=1), train=True, rng=rng)
        np.testing.assert_allclose(res.probabilities, [1.0])
        assert res.selected == 0

    def test_train_refines_every_hypothesis(self, rng):
        h, e, y = self._outlier_instance(rng, n=60)
        res = estimate(SceneCoordinateField.from_points(y), e, EstimatorConfig(M=6), train=True, rng=rng)
        assert all(r is not None for r in res.refinements)

    def test_rgb_needs_intrinsics(self, rng):
        with pytest.raises(ValueError):
            estimate(SceneCoordinateField.from_points(np.ones((5, 3))), np.ones((5, 2)), EstimatorConfig(mode=Mode.RGB), rng=rng)
