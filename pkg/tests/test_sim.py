import numpy as np
import pytest

from diffloc.geom import Pose, Rotation, look_at, residual_rgb, residual_rgbd, rotation_angle_deg
from diffloc.sim import (
    EmptyViewError,
    default_intrinsics,
    gen_scene,
    gen_trajectory,
    load_json,
    observation_from_dict,
    observation_to_dict,
    render,
    save_json,
    scene_from_dict,
    scene_to_dict,
    split_views,
    trajectory_from_dict,
    trajectory_to_dict,
    visible,
)
from diffloc.solvers import CorrespondenceSet, Mode, kabsch


@pytest.fixture(scope="module")
def scene():
    return gen_scene(1000, 2.0, seed=0)


def _view(scene):
    return look_at([0.0, -4.5, 0.5], [0.0, 0.0, 0.0])


class TestScene:
    def test_seeded(self):
        a, b = gen_scene(50, 1.0, 4), gen_scene(50, 1.0, 4)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)
        assert not np.array_equal(a.points, gen_scene(50, 1.0, 5).points)

    def test_count_and_bounds(self):
        assert len(gen_scene(10, 1.0, 0)) == 10
        s = gen_scene(500, 5.0, 1)
        assert np.abs(s.points).max() <= 2.5
        np.testing.assert_allclose(np.linalg.norm(s.descriptors, axis=1), 1.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_scene(9, 1.0, 0)
        with pytest.raises(ValueError):
            gen_scene(100, 0.0, 0)


class TestTrajectory:
    def test_single_view(self, scene):
        (pose,) = gen_trajectory(scene, 1, seed=0)
        assert len(visible(scene, pose, default_intrinsics())) > 0

    def test_seeded(self, scene):
        a, b = gen_trajectory(scene, 5, 3), gen_trajectory(scene, 5, 3)
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.matrix, q.matrix)

    def test_every_view_sees_half_the_scene(self, scene):
        K = default_intrinsics()
        for pose in gen_trajectory(scene, 64, seed=1):
            assert len(visible(scene, pose, K)) >= 0.5 * len(scene)

    def test_split(self):
        train, test = split_views(10, 3, 0)
        assert len(test) == 3 and len(train) == 7
        assert set(train) | set(test) == set(range(10))
        np.testing.assert_array_equal(split_views(10, 3, 0)[1], test)
        with pytest.raises(ValueError):
            split_views(3, 4, 0)


class TestRender:
    def test_noiseless_identity(self, scene):
        pose = _view(scene)
        K = default_intrinsics()
        obs = render(scene, pose, K)
        np.testing.assert_allclose(obs.pixels, K.project_camera(pose.to_camera(obs.scene_coords)), atol=1e-9)
        np.testing.assert_allclose(pose.apply(obs.cam_points), obs.scene_coords, atol=1e-12)
        assert np.all(obs.depth > 0)

    def test_kabsch_round_trip(self, scene):
        pose = _view(scene)
        obs = render(scene, pose)
        est = kabsch(CorrespondenceSet(Mode.RGBD, obs.cam_points, obs.scene_coords))
        assert rotation_angle_deg(est.rotation, pose.rotation) < 1e-6
        assert np.linalg.norm(est.translation - pose.translation) < 1e-9

    def test_outlier_count_exact(self, scene):
        pose = _view(scene)
        obs = render(scene, pose, outlier_frac=0.3, max_pixels=1000, seed=2)
        assert len(obs) == 1000
        assert obs.outlier.sum() == 300

    def test_outlier_labels_are_sound(self, scene):
        pose = _view(scene)
        K = default_intrinsics()
        obs = render(scene, pose, K, outlier_frac=0.3, pixel_sigma=1.0, point_sigma=0.01, seed=3)
        o = obs.outlier
        assert np.all(residual_rgbd(obs.scene_coords[o], pose, obs.cam_points[o]) > 0.5)
        assert np.all(residual_rgb(obs.scene_coords[o], pose, obs.pixels[o], K) > 50.0)
        # inliers: residuals consistent with the noise levels
        assert np.all(residual_rgbd(obs.scene_coords[~o], pose, obs.cam_points[~o]) < 6 * 0.01 * np.sqrt(3))

    def test_seeded_bit_identical(self, scene):
        pose = _view(scene)
        a = render(scene, pose, pixel_sigma=1.0, outlier_frac=0.2, seed=9, descriptor_jitter=0.05)
        b = render(scene, pose, pixel_sigma=1.0, outlier_frac=0.2, seed=9, descriptor_jitter=0.05)
        for name in ("pixels", "scene_coords", "descriptors", "outlier", "point_ids"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_empty_view(self, scene):
        away = Pose(Rotation(), [0.0, 0.0, 10.0])  # looking along +z away from the scene
        with pytest.raises(EmptyViewError):
            render(scene, away)


class TestPersistence:
    def test_scene_round_trip(self, scene, tmp_path):
        save_json(scene_to_dict(scene), tmp_path / "s.json")
        back = scene_from_dict(load_json(tmp_path / "s.json"))
        np.testing.assert_array_equal(back.points, scene.points)
        np.testing.assert_array_equal(back.descriptors, scene.descriptors)

    def test_observation_round_trip(self, scene, tmp_path):
        obs = render(scene, _view(scene), outlier_frac=0.1, pixel_sigma=0.5, seed=1, max_pixels=50)
        save_json(observation_to_dict(obs), tmp_path / "o.json")
        back = observation_from_dict(load_json(tmp_path / "o.json"))
        np.testing.assert_array_equal(back.pixels, obs.pixels)
        np.testing.assert_array_equal(back.outlier, obs.outlier)
        np.testing.assert_array_equal(back.pose.matrix, obs.pose.matrix)

    def test_trajectory_round_trip(self, scene, tmp_path):
        poses = gen_trajectory(scene, 4, 0)
        train, test = split_views(4, 1, 0)
        save_json(trajectory_to_dict(poses, train, test), tmp_path / "t.json")
        back, back_train, back_test = trajectory_from_dict(load_json(tmp_path / "t.json"))
        assert list(back_train) == list(train) and list(back_test) == list(test)
        for p, q in zip(poses, back):
            # the quaternion is renormalised on load, which may move the last bit
            np.testing.assert_allclose(p.matrix, q.matrix, rtol=0, atol=1e-15)

    def test_wrong_format(self, scene):
        d = scene_to_dict(scene)
        d["format"] = "something-else"
        with pytest.raises(ValueError):
            scene_from_dict(d)
