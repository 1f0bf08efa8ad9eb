import numpy as np
import pytest

from diffloc.geom import Pose, random_pose
from diffloc.solvers import (
    CorrespondenceSet,
    DegenerateConfigurationError,
    Mode,
    NoSolutionError,
    kabsch,
    minimal_pnp,
    p3p,
    pnp_refine_lm,
    reprojection_terms,
)

from conftest import posed_points


def close_pose(a: Pose, b: Pose, atol):
    np.testing.assert_allclose(a.matrix, b.matrix, atol=atol)


class TestCorrespondenceSet:
    def test_shapes(self):
        with pytest.raises(ValueError):
            CorrespondenceSet(Mode.RGB, np.zeros((3, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            CorrespondenceSet(Mode.RGBD, np.zeros((3, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            CorrespondenceSet(Mode.RGBD, np.zeros((0, 3)), np.zeros((0, 3)))

    def test_subset_keeps_indices(self):
        c = CorrespondenceSet(Mode.RGBD, np.arange(15.0).reshape(5, 3), np.arange(15.0).reshape(5, 3), [10, 11, 12, 13, 14])
        np.testing.assert_array_equal(c.subset([1, 3]).indices, [11, 13])


class TestKabsch:
    def test_identity(self, rng):
        e = rng.normal(size=(3, 3))
        close_pose(kabsch(CorrespondenceSet(Mode.RGBD, e, e)), Pose.identity(), 1e-12)

    def test_recovery(self, rng):
        for _ in range(100):
            h = random_pose(rng, 3.0)
            e = rng.normal(size=(int(rng.integers(3, 30)), 3))
            close_pose(kabsch(CorrespondenceSet(Mode.RGBD, e, h.apply(e))), h, 1e-9)

    def test_proper_rotation_under_noise(self, rng):
        h = random_pose(rng)
        e = rng.normal(size=(10, 3))
        y = h.apply(e) + rng.normal(scale=0.5, size=(10, 3))
        R = kabsch(CorrespondenceSet(Mode.RGBD, e, y)).R
        assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_least_squares_optimum(self, rng):
        h = random_pose(rng)
        e = rng.normal(size=(12, 3))
        y = h.apply(e) + rng.normal(scale=0.1, size=(12, 3))
        best = kabsch(CorrespondenceSet(Mode.RGBD, e, y))
        cost = lambda p: np.sum((p.apply(e) - y) ** 2)
        for _ in range(50):
            assert cost(best) <= cost(best.retract(rng.normal(scale=1e-3, size=6))) + 1e-12

    def test_collinear_and_too_few(self):
        line = np.outer(np.arange(4.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfigurationError):
            kabsch(CorrespondenceSet(Mode.RGBD, line, line))
        e = np.eye(3)[:2]
        with pytest.raises(DegenerateConfigurationError):
            kabsch(CorrespondenceSet(Mode.RGBD, e, e))


class TestMinimalPnP:
    def test_identity_square(self, K):
        y = np.array([[-0.5, -0.5, 4.0], [0.5, -0.5, 4.0], [0.5, 0.5, 4.0], [-0.5, 0.5, 4.0]])
        c = CorrespondenceSet(Mode.RGB, K.project_camera(y), y)
        close_pose(minimal_pnp(c, K), Pose.identity(), 1e-8)

    def test_round_trip(self, K, rng):
        ok = 0
        for _ in range(200):
            h, e, y = posed_points(rng, 4)
            c = CorrespondenceSet(Mode.RGB, K.project_camera(e), y)
            est = minimal_pnp(c, K)
            ok += np.allclose(est.matrix, h.matrix, atol=1e-6)
        assert ok >= 198  # the fourth point almost never leaves two solutions tied

    def test_all_solutions_reproject(self, K, rng):
        h, e, y = posed_points(rng, 3)
        sols = p3p(K.project_camera(e), y, K)
        assert any(np.allclose(s.matrix, h.matrix, atol=1e-6) for s in sols)
        for s in sols:
            np.testing.assert_allclose(K.project_camera(s.to_camera(y)), K.project_camera(e), atol=1e-5)

    def test_collinear(self, K):
        y = np.array([[0.0, 0.0, 4.0], [0.2, 0.0, 4.0], [0.4, 0.0, 4.0], [0.6, 0.0, 4.0]])
        with pytest.raises((NoSolutionError, DegenerateConfigurationError)):
            minimal_pnp(CorrespondenceSet(Mode.RGB, K.project_camera(y), y), K)

    def test_wrong_count(self, K):
        y = np.ones((5, 3))
        with pytest.raises(ValueError):
            minimal_pnp(CorrespondenceSet(Mode.RGB, np.ones((5, 2)), y), K)


class TestLM:
    def test_fixed_point(self, K, rng):
        h, e, y = posed_points(rng, 20)
        c = CorrespondenceSet(Mode.RGB, K.project_camera(e), y)
        close_pose(pnp_refine_lm(h, c, K), h, 1e-9)

    def test_descent_and_recovery(self, K, rng):
        for _ in range(20):
            h, e, y = posed_points(rng, 20)
            c = CorrespondenceSet(Mode.RGB, K.project_camera(e), y)
            start = h.retract(rng.normal(scale=0.05, size=6))
            est, rep = pnp_refine_lm(start, c, K, return_report=True)
            assert rep.final_cost <= rep.initial_cost
            close_pose(est, h, 1e-7)

    def test_noisy_cost_not_above_init(self, K, rng):
        h, e, y = posed_points(rng, 30)
        c = CorrespondenceSet(Mode.RGB, K.project_camera(e) + rng.normal(size=(30, 2)), y)
        _, rep = pnp_refine_lm(h, c, K, return_report=True)
        assert rep.final_cost <= rep.initial_cost

    def test_reprojection_jacobians(self, K, rng):
        from diffloc.autodiff import finite_diff

        h, e, y = posed_points(rng, 5)
        p = K.project_camera(e) + 3.0
        r, J_pose, J_scene, front = reprojection_terms(h, p, y, K)
        assert front.all()
        num = finite_diff(lambda d: reprojection_terms(h.retract(d), p, y, K)[0], np.zeros(6), 1e-6)
        np.testing.assert_allclose(J_pose, num, rtol=1e-5, atol=1e-6)
        num_y = finite_diff(lambda Y: reprojection_terms(h, p, Y, K)[0], y, 1e-6).reshape(5, 2, 5, 3)
        for i in range(5):
            np.testing.assert_allclose(J_scene[i], num_y[i, :, i, :], rtol=1e-5, atol=1e-6)
