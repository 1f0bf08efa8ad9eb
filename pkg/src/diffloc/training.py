"""Dataset assembly, two-phase training and pose evaluation.

Phase 1 fits the regressor with the mode's initialisation loss. Phase 2
minimises the expected pose loss of the differentiable estimator. Both use
one rendered view per iteration.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .geom import Intrinsics, Pose, SceneCoordinateField, rotation_angle_deg, translation_error
from .losses import (
    TrainingTarget,
    expected_pose_loss,
    loss_rgb_model,
    loss_rgb_only,
    loss_rgbd,
)
from .regressor import AdamState, RegressorParams, adam_step, backward, forward, init_params, layer_sizes, save_checkpoint
from .robust import ExhaustedSamplingError, estimate
from .sim import (
    EmptyViewError,
    Observation,
    SyntheticScene,
    gen_scene,
    gen_trajectory,
    load_json,
    render,
    scene_from_dict,
    split_views,
    trajectory_from_dict,
)

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class Dataset:
    scene: SyntheticScene
    K: Intrinsics
    poses: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    train: list
    test: list


def intrinsics_of(cfg: RunConfig) -> Intrinsics:
    v = cfg.views
    return Intrinsics(v.fx, v.fy, v.cx, v.cy)


def load_scene(cfg: RunConfig) -> SyntheticScene:
    s = cfg.scene
    if s.file is None:
        return gen_scene(s.n_points, s.extent, s.seed, s.descriptor_dim)
    try:
        return scene_from_dict(load_json(s.file))
    except FileNotFoundError as exc:
        raise ConfigError(f"scene file not found: {s.file}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad scene file {s.file}: {exc}") from exc


def load_trajectory(cfg: RunConfig, scene: SyntheticScene):
    v = cfg.views
    if v.trajectory_file is not None:
        try:
            poses, train, test = trajectory_from_dict(load_json(v.trajectory_file))
        except FileNotFoundError as exc:
            raise ConfigError(f"trajectory file not found: {v.trajectory_file}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad trajectory file {v.trajectory_file}: {exc}") from exc
        if train is None or test is None:
            train, test = split_views(len(poses), v.n_test, v.seed)
        return poses, np.asarray(train, dtype=int), np.asarray(test, dtype=int)
    n = v.n_train + v.n_test
    poses = gen_trajectory(scene, n, v.seed)
    train, test = split_views(n, v.n_test, v.seed)
    return poses, train, test


def render_view(cfg: RunConfig, scene: SyntheticScene, pose: Pose, K: Intrinsics, view: int) -> Observation:
    v = cfg.views
    return render(
        scene, pose, K, v.grid,
        pixel_sigma=v.pixel_sigma,
        point_sigma=v.point_sigma,
        seed=int(np.random.SeedSequence([v.seed, view]).generate_state(1)[0]),
        max_pixels=v.pixels_per_view,
        descriptor_jitter=v.descriptor_jitter,
    )


def build_dataset(cfg: RunConfig) -> Dataset:
    scene = load_scene(cfg)
    K = intrinsics_of(cfg)
    poses, train, test = load_trajectory(cfg, scene)
    try:
        obs = {int(i): render_view(cfg, scene, poses[i], K, int(i)) for i in np.concatenate([train, test])}
    except EmptyViewError as exc:
        raise ConfigError(f"a configured view sees no scene points: {exc}") from exc
    return Dataset(scene, K, poses, train, test, [obs[int(i)] for i in train], [obs[int(i)] for i in test])


# -- training ----------------------------------------------------------------


def init_loss(mode: str, Y, obs: Observation, K: Intrinsics, loss_cfg):
    if mode == "rgbd":
        return loss_rgbd(Y, obs.scene_true)
    if mode == "rgb-model":
        return loss_rgb_model(Y, TrainingTarget(obs.pose, obs.pixels, obs.scene_true), K, loss_cfg)
    return loss_rgb_only(Y, TrainingTarget(obs.pose, obs.pixels), K, loss_cfg)


def observed_of(obs: Observation, mode: str):
    return obs.cam_points if mode == "rgbd" else obs.pixels


def train_features(scene: SyntheticScene, obs: Observation, jitter: float, rng) -> np.ndarray:
    f = scene.descriptors[obs.point_ids]
    if jitter > 0:
        f = f + rng.normal(scale=jitter, size=f.shape)
    return f


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (phase, iteration, view, loss)
    skipped: int = 0

    def add(self, phase: str, it: int, view: int, loss: float):
        self.rows.append((phase, it, view, loss))

    def losses(self, phase: str) -> np.ndarray:
        return np.array([r[3] for r in self.rows if r[0] == phase])


def _check_finite(value: float, phase: str, it: int):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {phase} loss at iteration {it}")


def _view_schedule(n_views: int, n_iters: int, rng) -> np.ndarray:
    """Epoch-wise shuffled view order."""
    n_epochs = -(-n_iters // n_views) if n_iters else 0
    return np.concatenate([rng.permutation(n_views) for _ in range(n_epochs)])[:n_iters] if n_epochs else np.zeros(0, int)


def new_params(cfg: RunConfig, scene: SyntheticScene) -> RegressorParams:
    sizes = layer_sizes(scene.descriptors.shape[1], cfg.train.preset)
    return init_params(sizes, cfg.seed, output_bias=scene.centroid if cfg.mode != "rgb-only" else None)


def train_init(params: RegressorParams, data: Dataset, cfg: RunConfig, log_: TrainLog, *, checkpoint_dir=None) -> AdamState:
    t = cfg.train
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.for_params(params, lr=t.init_lr)
    for it, v in enumerate(_view_schedule(len(data.train), t.init_iters, rng), start=1):
        obs = data.train[v]
        Y, cache = forward(params, train_features(data.scene, obs, t.feature_jitter, rng))
        res = init_loss(cfg.mode, Y, obs, data.K, cfg.loss)
        _check_finite(res.value, "init", it)
        dW, db, _ = backward(params, cache, res.grad)
        adam_step(params, (dW, db), state)
        log_.add("init", it, int(data.train_idx[v]), res.value)
        if checkpoint_dir is not None and t.checkpoint_every and it % t.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"init_{it:08d}.ckpt", params, state, it, {"phase": "init"})
    return state


def train_e2e(params: RegressorParams, data: Dataset, cfg: RunConfig, log_: TrainLog, *, checkpoint_dir=None) -> AdamState:
    t = cfg.train
    rng = np.random.default_rng([cfg.seed, 2])
    ecfg = cfg.estimator_config(train=True)
    state = AdamState.for_params(params, lr=t.e2e_lr)
    for it, v in enumerate(_view_schedule(len(data.train), t.e2e_iters, rng), start=1):
        obs = data.train[v]
        Y, cache = forward(params, train_features(data.scene, obs, t.feature_jitter, rng))
        try:
            result = estimate(SceneCoordinateField.from_points(Y), observed_of(obs, cfg.mode), ecfg, K=data.K, train=True, rng=rng)
        except ExhaustedSamplingError:
            log_.skipped += 1
            continue
        res = expected_pose_loss(result, obs.pose, cfg.loss)
        _check_finite(res.value, "e2e", it)
        if not np.all(np.isfinite(res.grad)):
            raise DivergenceError(f"non-finite e2e gradient at iteration {it}")
        dW, db, _ = backward(params, cache, res.grad)
        adam_step(params, (dW, db), state)
        log_.add("e2e", it, int(data.train_idx[v]), res.value)
        if checkpoint_dir is not None and t.checkpoint_every and it % t.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"e2e_{it:08d}.ckpt", params, state, it, {"phase": "e2e"})
    return state


# -- evaluation --------------------------------------------------------------


@dataclass
class ViewError:
    view: int
    translation_cm: float
    rotation_deg: float
    inliers: int


def _eval_one(args) -> ViewError:
    view, Y, observed, K, ecfg, pose_true, seed = args
    rng = np.random.default_rng([seed, view])
    try:
        res = estimate(SceneCoordinateField.from_points(Y), observed, ecfg, K=K, train=False, rng=rng)
    except ExhaustedSamplingError:
        return ViewError(view, float("inf"), 180.0, 0)
    return ViewError(
        view,
        100.0 * translation_error(res.pose, pose_true),
        rotation_angle_deg(res.pose.rotation, pose_true.rotation),
        len(res.inliers),
    )


def evaluate(params: RegressorParams | None, data: Dataset, cfg: RunConfig, *, oracle: bool = False) -> list[ViewError]:
    """Per-test-view pose errors. ``oracle`` feeds the simulator's scene coordinates instead of predictions."""
    if len(data.test) == 0:
        raise ConfigError("the test split is empty")
    ecfg = cfg.estimator_config(train=False)
    jobs = []
    for v, obs in zip(data.test_idx, data.test):
        Y = obs.scene_coords if oracle else forward(params, obs.descriptors)[0]
        jobs.append((int(v), Y, observed_of(obs, cfg.mode), data.K, ecfg, obs.pose, cfg.seed))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            return list(ex.map(_eval_one, jobs))
    return [_eval_one(j) for j in jobs]


def summarize(errors: list[ViewError], thresholds) -> dict:
    t = np.array([e.translation_cm for e in errors])
    r = np.array([e.rotation_deg for e in errors])
    out = {
        "n_views": len(errors),
        "median_translation_cm": float(np.median(t)),
        "median_rotation_deg": float(np.median(r)),
        "accuracy": {},
    }
    for cm, deg in thresholds:
        key = f"{float(cm):g}cm_{float(deg):g}deg"
        out["accuracy"][key] = float(100.0 * np.mean((t < cm) & (r < deg)))
    return out
