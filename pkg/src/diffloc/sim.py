"""Synthetic scenes, camera trajectories and rendered observations.

Scenes are random point clouds in an axis-aligned cube centred at the origin.
Each point carries a fixed random unit descriptor; an observation jitters the
descriptors so that the regressor has to generalise rather than look up.
Outliers corrupt the scene coordinate of a pixel (the regression target), not
the pixel itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Intrinsics, Pose, Rotation, look_at, residual_rgb, residual_rgbd

SCENE_FORMAT = "diffloc-scene"
OBSERVATION_FORMAT = "diffloc-observation"
TRAJECTORY_FORMAT = "diffloc-trajectory"
FORMAT_VERSION = 1

MIN_DEPTH = 0.1


class EmptyViewError(ValueError):
    """The camera sees none of the scene."""


def default_intrinsics() -> Intrinsics:
    return Intrinsics(400.0, 400.0, 320.0, 240.0)


@dataclass
class SyntheticScene:
    points: np.ndarray
    descriptors: np.ndarray
    extent: float
    seed: int

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def gen_scene(n_points: int, extent: float, seed: int, descriptor_dim: int = 16) -> SyntheticScene:
    """Uniform points in ``[-extent/2, extent/2]^3`` with unit-norm random descriptors."""
    if n_points < 10:
        raise ValueError("n_points must be >= 10")
    if not extent > 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    points = rng.uniform(-extent / 2, extent / 2, size=(n_points, 3))
    desc = rng.normal(size=(n_points, descriptor_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return SyntheticScene(points, desc, float(extent), int(seed))


def gen_trajectory(
    scene: SyntheticScene,
    n_views: int,
    seed: int,
    distance: tuple[float, float] = (1.8, 2.4),
    max_elevation_deg: float = 60.0,
    max_roll_deg: float = 15.0,
) -> list[Pose]:
    """Cameras on a shell around the scene, each looking near the centroid.

    ``distance`` is in multiples of the scene extent.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    c = scene.centroid
    poses = []
    for _ in range(n_views):
        az = rng.uniform(0, 2 * np.pi)
        el = np.radians(rng.uniform(-max_elevation_deg, max_elevation_deg))
        d = scene.extent * rng.uniform(*distance)
        center = c + d * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        target = c + rng.normal(scale=0.05 * scene.extent, size=3)
        pose = look_at(center, target)
        roll = Rotation.from_rotvec([0.0, 0.0, np.radians(rng.uniform(-max_roll_deg, max_roll_deg))])
        poses.append(Pose(pose.rotation @ roll, pose.translation))
    return poses


def split_views(n_views: int, n_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test split of view indices."""
    if not 0 <= n_test <= n_views:
        raise ValueError("n_test out of range")
    perm = np.random.default_rng(seed).permutation(n_views)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass
class Observation:
    """A rendered view. Per-pixel arrays are aligned; pixel ``i`` is row ``i``."""

    pose: Pose
    K: Intrinsics
    grid: tuple[int, int]
    point_ids: np.ndarray
    descriptors: np.ndarray
    pixels_true: np.ndarray
    pixels: np.ndarray
    scene_true: np.ndarray
    scene_coords: np.ndarray
    cam_points: np.ndarray
    outlier: np.ndarray
    pixel_sigma: float = 0.0
    point_sigma: float = 0.0
    outlier_frac: float = 0.0

    def __len__(self):
        return len(self.point_ids)

    @property
    def depth(self) -> np.ndarray:
        return self.cam_points[:, 2]


def visible(scene: SyntheticScene, pose: Pose, K: Intrinsics, grid=(640, 480)) -> np.ndarray:
    x = pose.to_camera(scene.points)
    front = x[:, 2] > MIN_DEPTH
    uv = K.project_camera(np.where(front[:, None], x, 1.0))
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < grid[0]) & (uv[:, 1] >= 0) & (uv[:, 1] < grid[1])
    return np.flatnonzero(front & inside)


def render(
    scene: SyntheticScene,
    pose: Pose,
    K: Intrinsics | None = None,
    grid: tuple[int, int] = (640, 480),
    *,
    pixel_sigma: float = 0.0,
    point_sigma: float = 0.0,
    outlier_frac: float = 0.0,
    seed: int = 0,
    max_pixels: int | None = None,
    descriptor_jitter: float = 0.0,
    tau_rgb: float = 10.0,
    tau_rgbd: float = 0.1,
) -> Observation:
    """Project the visible scene points into a camera.

    Exactly ``round(outlier_frac * n)`` pixels get their scene coordinate
    replaced by a random point whose residual under the true pose exceeds
    ``5 * tau`` for both residual kinds.
    """
    K = default_intrinsics() if K is None else K
    rng = np.random.default_rng(seed)
    ids = visible(scene, pose, K, grid)
    if len(ids) == 0:
        raise EmptyViewError("no scene point is visible from this pose")
    if max_pixels is not None and len(ids) > max_pixels:
        ids = np.sort(rng.choice(ids, size=max_pixels, replace=False))
    n = len(ids)
    y_true = scene.points[ids]
    e = pose.to_camera(y_true)
    p_true = K.project_camera(e)
    pixels = p_true + (rng.normal(scale=pixel_sigma, size=p_true.shape) if pixel_sigma > 0 else 0.0)
    coords = y_true + (rng.normal(scale=point_sigma, size=y_true.shape) if point_sigma > 0 else 0.0)

    outlier = np.zeros(n, dtype=bool)
    n_out = int(round(outlier_frac * n))
    if n_out:
        out_idx = rng.choice(n, size=n_out, replace=False)
        outlier[out_idx] = True
        half = scene.extent / 2
        todo = out_idx
        while len(todo):
            cand = rng.uniform(-half, half, size=(len(todo), 3)) + scene.centroid
            ok = (residual_rgbd(cand, pose, e[todo]) > 5 * tau_rgbd) & (
                residual_rgb(cand, pose, pixels[todo], K) > 5 * tau_rgb
            )
            coords[todo[ok]] = cand[ok]
            todo = todo[~ok]

    desc = scene.descriptors[ids]
    if descriptor_jitter > 0:
        desc = desc + rng.normal(scale=descriptor_jitter, size=desc.shape)
    return Observation(
        pose=pose,
        K=K,
        grid=tuple(int(g) for g in grid),
        point_ids=ids,
        descriptors=desc,
        pixels_true=p_true,
        pixels=pixels,
        scene_true=y_true,
        scene_coords=coords,
        cam_points=e,
        outlier=outlier,
        pixel_sigma=float(pixel_sigma),
        point_sigma=float(point_sigma),
        outlier_frac=float(outlier_frac),
    )


# -- persistence -------------------------------------------------------------


def pose_to_dict(pose: Pose) -> dict:
    return {"quaternion_wxyz": pose.rotation.quaternion.tolist(), "translation_m": pose.translation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(Rotation(d["quaternion_wxyz"]), d["translation_m"])


def _check_header(d: dict, fmt: str):
    if d.get("format") != fmt:
        raise ValueError(f"expected a {fmt} file, got {d.get('format')!r}")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {fmt} version {d.get('version')!r}")


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "units": {"points": "m", "extent": "m"},
        "seed": scene.seed,
        "extent": scene.extent,
        "points": scene.points.tolist(),
        "descriptors": scene.descriptors.tolist(),
    }


def scene_from_dict(d: dict) -> SyntheticScene:
    _check_header(d, SCENE_FORMAT)
    return SyntheticScene(np.array(d["points"], dtype=float), np.array(d["descriptors"], dtype=float), float(d["extent"]), int(d["seed"]))


def observation_to_dict(obs: Observation) -> dict:
    return {
        "format": OBSERVATION_FORMAT,
        "version": FORMAT_VERSION,
        "units": {"pixels": "px", "scene": "m", "camera": "m", "pixel_sigma": "px", "point_sigma": "m"},
        "pose": pose_to_dict(obs.pose),
        "intrinsics": obs.K.to_dict(),
        "grid": list(obs.grid),
        "pixel_sigma": obs.pixel_sigma,
        "point_sigma": obs.point_sigma,
        "outlier_frac": obs.outlier_frac,
        "point_ids": obs.point_ids.tolist(),
        "descriptors": obs.descriptors.tolist(),
        "pixels_true": obs.pixels_true.tolist(),
        "pixels": obs.pixels.tolist(),
        "scene_true": obs.scene_true.tolist(),
        "scene_coords": obs.scene_coords.tolist(),
        "cam_points": obs.cam_points.tolist(),
        "outlier": obs.outlier.astype(int).tolist(),
    }


def observation_from_dict(d: dict) -> Observation:
    _check_header(d, OBSERVATION_FORMAT)

    def arr(key, shape):
        return np.array(d[key], dtype=float).reshape(shape)

    n = len(d["point_ids"])
    return Observation(
        pose=pose_from_dict(d["pose"]),
        K=Intrinsics(**d["intrinsics"]),
        grid=tuple(d["grid"]),
        point_ids=np.array(d["point_ids"], dtype=np.int64),
        descriptors=arr("descriptors", (n, -1)),
        pixels_true=arr("pixels_true", (n, 2)),
        pixels=arr("pixels", (n, 2)),
        scene_true=arr("scene_true", (n, 3)),
        scene_coords=arr("scene_coords", (n, 3)),
        cam_points=arr("cam_points", (n, 3)),
        outlier=np.array(d["outlier"], dtype=bool),
        pixel_sigma=float(d["pixel_sigma"]),
        point_sigma=float(d["point_sigma"]),
        outlier_frac=float(d["outlier_frac"]),
    )


def trajectory_to_dict(poses, train_idx=None, test_idx=None) -> dict:
    return {
        "format": TRAJECTORY_FORMAT,
        "version": FORMAT_VERSION,
        "units": {"translation": "m"},
        "poses": [pose_to_dict(p) for p in poses],
        "train": None if train_idx is None else [int(i) for i in train_idx],
        "test": None if test_idx is None else [int(i) for i in test_idx],
    }


def trajectory_from_dict(d: dict):
    _check_header(d, TRAJECTORY_FORMAT)
    return [pose_from_dict(p) for p in d["poses"]], d.get("train"), d.get("test")


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
