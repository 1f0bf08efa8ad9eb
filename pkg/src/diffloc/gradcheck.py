"""Finite-difference checks of every analytic gradient in the package.

Each check draws ``n`` seeded instances, compares the analytic gradient with
central differences and reports the worst instance. ``corrupt=True`` negates
the analytic gradient before comparison so that the harness itself can be
shown to fail.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NearDegenerateSVDError, SingularNormalEquationsError, finite_diff, kabsch_backward, pnp_backward, refinement_backward
from .geom import Intrinsics, Pose, SceneCoordinateField, random_pose
from .losses import (
    LossConfig,
    TrainingTarget,
    expected_pose_loss,
    expected_pose_loss_frozen,
    loss_rgb_model,
    loss_rgb_only,
    loss_rgbd,
    pose_loss_clamped,
    soft_clamped_reproj,
)
from .robust import EstimatorConfig, estimate, score_soft
from .solvers import CorrespondenceSet, Mode, kabsch, pnp_refine_lm

REL_TOL = 1e-4
EXPECTED_TOL = 1e-3
COSINE_TOL = 0.95
RATIO_RANGE = (0.5, 2.0)
FD_STEPS = (1e-6, 1e-7)

K_DEFAULT = Intrinsics(400.0, 400.0, 320.0, 240.0)


@dataclass
class CheckResult:
    name: str
    n: int
    metric: str
    value: float
    tol: float
    passed: bool
    skipped: int = 0
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def cosine(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _rng(seed: int, check: str, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, sum(map(ord, check)), i])


def _maybe_corrupt(g, corrupt: bool):
    return -g if corrupt else g


def _camera_scene(rng, n, depth=(3.0, 6.0), half=1.0):
    """A pose and ``n`` camera points inside the view frustum."""
    e = np.column_stack([rng.uniform(-half, half, n), rng.uniform(-half, half, n), rng.uniform(*depth, n)])
    h = random_pose(rng, 2.0)
    return h, e, h.apply(e)


def _chart_fd(fn, pose: Pose, eps=1e-6):
    """Gradient of ``fn(pose)`` w.r.t. the local chart at ``pose``."""
    return finite_diff(lambda d: fn(pose.retract(d)), np.zeros(6), eps)[0]


# -- solver backward passes --------------------------------------------------


def check_kabsch_backward(n: int, seed: int, corrupt: bool = False) -> CheckResult:
    worst, skipped = 0.0, 0
    for i in range(n):
        rng = _rng(seed, "kabsch", i)
        k = int(rng.integers(3, 12))
        h, e, y = _camera_scene(rng, k)
        y = y + rng.normal(scale=0.05, size=y.shape)
        g = rng.normal(size=6)
        corrs = CorrespondenceSet(Mode.RGBD, e, y)
        h0 = kabsch(corrs)
        try:
            ana = _maybe_corrupt(kabsch_backward(corrs, g), corrupt)
        except NearDegenerateSVDError:
            skipped += 1
            continue
        num = finite_diff(lambda Y: g @ h0.local(kabsch(corrs.with_scene(Y))), y, 1e-6)[0]
        worst = max(worst, rel_error(ana.ravel(), num))
    return CheckResult("kabsch_backward", n, "max_rel_error", worst, REL_TOL, worst < REL_TOL, skipped)


def _pnp_instance(rng, k, sigma):
    h, e, y = _camera_scene(rng, k)
    p = K_DEFAULT.project_camera(e) + rng.normal(scale=sigma, size=(k, 2)) if sigma > 0 else K_DEFAULT.project_camera(e)
    corrs = CorrespondenceSet(Mode.RGB, p, y)
    pose = pnp_refine_lm(h, corrs, K_DEFAULT, 200)
    return corrs, pose


def _pnp_fd(corrs, pose, g):
    def f(Y):
        return g @ pose.local(pnp_refine_lm(pose, corrs.with_scene(Y), K_DEFAULT, 200))

    return finite_diff(f, corrs.scene, 1e-6)[0]


def check_pnp_backward_noisy(n: int, seed: int, corrupt: bool = False) -> CheckResult:
    """Well-conditioned, noisy instances: direction and magnitude of the approximate gradient."""
    worst_cos, worst_ratio, skipped = 1.0, 1.0, 0
    for i in range(n):
        rng = _rng(seed, "pnp_noisy", i)
        corrs, pose = _pnp_instance(rng, 30, 1.0)
        g = rng.normal(size=6)
        try:
            ana = _maybe_corrupt(pnp_backward(corrs, K_DEFAULT, pose, g), corrupt).ravel()
        except SingularNormalEquationsError:
            skipped += 1
            continue
        num = _pnp_fd(corrs, pose, g)
        c = cosine(ana, num)
        ratio = np.linalg.norm(ana) / np.linalg.norm(num)
        worst_cos = min(worst_cos, c)
        if abs(np.log(ratio)) > abs(np.log(worst_ratio)):
            worst_ratio = ratio
    ok = worst_cos > COSINE_TOL and RATIO_RANGE[0] <= worst_ratio <= RATIO_RANGE[1]
    return CheckResult("pnp_backward_noisy", n, f"min_cosine (worst norm ratio {worst_ratio:.3f})", worst_cos, COSINE_TOL, ok, skipped)


def check_pnp_backward_exact(n: int, seed: int, corrupt: bool = False) -> CheckResult:
    worst, skipped = 0.0, 0
    for i in range(n):
        rng = _rng(seed, "pnp_exact", i)
        corrs, pose = _pnp_instance(rng, int(rng.integers(4, 20)), 0.0)
        g = rng.normal(size=6)
        try:
            ana = _maybe_corrupt(pnp_backward(corrs, K_DEFAULT, pose, g), corrupt).ravel()
        except SingularNormalEquationsError:
            skipped += 1
            continue
        worst = max(worst, rel_error(ana, _pnp_fd(corrs, pose, g)))
    return CheckResult("pnp_backward_zero_residual", n, "max_rel_error", worst, EXPECTED_TOL, worst < EXPECTED_TOL, skipped)


def check_refinement_backward(n: int, seed: int, corrupt: bool = False) -> CheckResult:
    """RGB-D refinement on a frozen inlier set; outliers must get exactly zero gradient."""
    worst, skipped = 0.0, 0
    for i in range(n):
        rng = _rng(seed, "refinement", i)
        k = 20
        h, e, y = _camera_scene(rng, k)
        y = y + rng.normal(scale=0.02, size=y.shape)
        inl = np.sort(rng.choice(k, size=int(rng.integers(5, k)), replace=False))
        corrs = CorrespondenceSet(Mode.RGBD, e, y)
        pose = kabsch(corrs.subset(inl))
        g = rng.normal(size=6)
        try:
            ana = _maybe_corrupt(refinement_backward(inl, corrs, pose, g), corrupt)
        except NearDegenerateSVDError:
            skipped += 1
            continue
        num = finite_diff(lambda Y: g @ pose.local(kabsch(corrs.with_scene(Y).subset(inl))), y, 1e-6)[0]
        worst = max(worst, rel_error(ana.ravel(), num))
    return CheckResult("refinement_backward", n, "max_rel_error", worst, REL_TOL, worst < REL_TOL, skipped)


# -- scoring -----------------------------------------------------------------


def _score_check(mode: Mode, n: int, seed: int, corrupt: bool) -> CheckResult:
    name = f"score_soft_{mode.value}"
    worst = 0.0
    for i in range(n):
        rng = _rng(seed, name, i)
        k = 15
        h, e, y = _camera_scene(rng, k)
        if mode is Mode.RGBD:
            cfg = EstimatorConfig(mode=mode)
            y = y + rng.normal(scale=0.08, size=y.shape)
            obs = e
        else:
            cfg = EstimatorConfig(mode=mode)
            obs = K_DEFAULT.project_camera(e) + rng.normal(scale=8.0, size=(k, 2))
        corrs = CorrespondenceSet(mode, obs, y)
        _, gy, gh = score_soft(h, corrs, cfg, K_DEFAULT, with_pose_grad=True)
        ana = _maybe_corrupt(np.concatenate([gy.ravel(), gh]), corrupt)
        num_y = finite_diff(lambda Y: score_soft(h, corrs.with_scene(Y), cfg, K_DEFAULT)[0], y, 1e-6)[0]
        num_h = _chart_fd(lambda P: score_soft(P, corrs, cfg, K_DEFAULT)[0], h)
        worst = max(worst, rel_error(ana, np.concatenate([num_y, num_h])))
    return CheckResult(name, n, "max_rel_error", worst, REL_TOL, worst < REL_TOL)


def check_score_soft_rgbd(n, seed, corrupt=False):
    return _score_check(Mode.RGBD, n, seed, corrupt)


def check_score_soft_rgb(n, seed, corrupt=False):
    return _score_check(Mode.RGB, n, seed, corrupt)


# -- losses ------------------------------------------------------------------


def _away_from(values, boundaries, margin):
    v = np.asarray(values, dtype=float)
    return all(np.all(np.abs(v - b) > margin) for b in boundaries)


def _mixed_predictions(rng, h, e, y, frac_bad=0.3):
    """Predictions near the truth with a fraction thrown far away or behind the camera."""
    k = len(y)
    pred = y + rng.normal(scale=0.05, size=y.shape)
    bad = rng.random(k) < frac_bad
    kind = rng.integers(0, 3, size=k)
    # behind the camera
    sel = bad & (kind == 0)
    pred[sel] = h.apply(e[sel] * np.array([1.0, 1.0, -1.0]))
    # far off to the side (huge re-projection error)
    sel = bad & (kind == 1)
    pred[sel] = h.apply(e[sel] + np.array([40.0, 0.0, 0.0]))
    # moderately wrong (in front, small re-projection error, but far from the target)
    sel = bad & (kind == 2)
    pred[sel] = h.apply(e[sel] * 1.3 + rng.normal(scale=0.05, size=(int(sel.sum()), 3)))
    return pred


def _loss_instance(rng, cfg: LossConfig, kind: str, k: int = 20):
    """Draw instances until no prediction is within a margin of a non-smooth point."""
    while True:
        h, e, y = _camera_scene(rng, k)
        pred = _mixed_predictions(rng, h, e, y)
        pix = K_DEFAULT.project_camera(e)
        has = rng.random(k) < 0.8
        target = TrainingTarget(h, pix, y, has)
        x = h.to_camera(pred)
        r = np.linalg.norm(K_DEFAULT.project_camera(x) - pix, axis=1)
        r = np.where(x[:, 2] > 0, r, np.inf)
        dist = np.linalg.norm(pred - y, axis=1)
        ybar = h.apply(K_DEFAULT.backproject(pix, cfg.heuristic_depth))
        checks = [
            _away_from(x[:, 2], [cfg.min_depth, cfg.max_depth, 0.0], 1e-3),
            _away_from(r[np.isfinite(r)], [cfg.max_reproj, cfg.reproj_clamp, 0.0], 1e-3),
            _away_from(dist, [cfg.max_dist, 0.0], 1e-4),
        ]
        if kind == "rgb_only":
            checks.append(_away_from(pred - ybar, [0.0], 1e-4))
        if all(checks):
            return h, pred, y, target


def _loss_check(name, n, seed, corrupt, fn):
    worst = 0.0
    cfg = LossConfig()
    for i in range(n):
        rng = _rng(seed, name, i)
        h, pred, y, target = _loss_instance(rng, cfg, name)
        value, grad = fn(pred, h, y, target, cfg)
        ana = _maybe_corrupt(grad, corrupt)
        num = finite_diff(lambda Y: fn(Y, h, y, target, cfg)[0], pred, 1e-6)[0]
        worst = max(worst, rel_error(ana.ravel(), num))
    return CheckResult(f"loss_{name}", n, "max_rel_error", worst, REL_TOL, worst < REL_TOL)


def check_loss_reproj(n, seed, corrupt=False):
    def fn(Y, h, y, target, cfg):
        v, g = soft_clamped_reproj(Y, h, target.pixels, K_DEFAULT, cfg.reproj_clamp)
        front = h.to_camera(Y)[:, 2] > 0
        return float(v[front].sum()), g * front[:, None]

    return _loss_check("reproj", n, seed, corrupt, fn)


def check_loss_rgbd(n, seed, corrupt=False):
    def fn(Y, h, y, target, cfg):
        r = loss_rgbd(Y, y, target.has_coord)
        return r.value, r.grad

    return _loss_check("rgbd", n, seed, corrupt, fn)


def check_loss_rgb_model(n, seed, corrupt=False):
    def fn(Y, h, y, target, cfg):
        r = loss_rgb_model(Y, target, K_DEFAULT, cfg)
        return r.value, r.grad

    return _loss_check("rgb_model", n, seed, corrupt, fn)


def check_loss_rgb_only(n, seed, corrupt=False):
    def fn(Y, h, y, target, cfg):
        r = loss_rgb_only(Y, TrainingTarget(target.pose, target.pixels), K_DEFAULT, cfg)
        return r.value, r.grad

    return _loss_check("rgb_only", n, seed, corrupt, fn)


def check_pose_loss(n, seed, corrupt=False):
    worst = 0.0
    for i in range(n):
        rng = _rng(seed, "pose_loss", i)
        h_star = random_pose(rng, 2.0)
        while True:
            # errors from sub-centimeter up to far above the clamp
            scale = 10.0 ** rng.uniform(-3, 0)
            h = h_star.retract(rng.normal(scale=scale, size=6))
            v = pose_loss_clamped(h, h_star)
            if abs(v - 100.0) > 1e-3 and v > 1e-3:
                break
        _, g = pose_loss_clamped(h, h_star, with_grad=True)
        ana = _maybe_corrupt(g, corrupt)
        num = _chart_fd(lambda P: pose_loss_clamped(P, h_star), h)
        worst = max(worst, rel_error(ana, num))
    return CheckResult("pose_loss_clamped", n, "max_rel_error", worst, REL_TOL, worst < REL_TOL)


# -- expected loss -----------------------------------------------------------


def _expected_instance(rng, mode: Mode):
    """A small estimation problem whose hypotheses end up with different losses.

    RGB-D: noisy coordinates with a single refinement step. RGB: two groups of
    correspondences consistent with two different poses up to 30 um noise, so
    that every refinement lands on a near-zero-residual optimum (where the
    Gauss-Newton derivative is exact to first order) while the hypotheses
    still disagree. The noise keeps residuals away from the kink at zero.
    """
    if mode is Mode.RGBD:
        h, e, y = _camera_scene(rng, 16)
        pred = y + rng.normal(scale=0.04, size=y.shape)
        cfg = EstimatorConfig(mode=mode, M=5, max_refine_iters=1, alpha=0.5)
        res = estimate(SceneCoordinateField.from_points(pred), e, cfg, train=True, rng=rng)
        return h, pred, res
    group_b = np.arange(12) >= 7
    groups = (np.flatnonzero(~group_b), np.flatnonzero(group_b))
    while True:
        h, e, y = _camera_scene(rng, 12)
        other = h.retract(np.concatenate([rng.normal(scale=0.1, size=3), 0.6 * _unit(rng)]))
        pred = np.where(group_b[:, None], other.apply(e), y) + rng.normal(scale=3e-5, size=y.shape)
        cfg = EstimatorConfig(mode=mode, M=4, alpha=0.5)
        res = estimate(SceneCoordinateField.from_points(pred), K_DEFAULT.project_camera(e), cfg, K=K_DEFAULT, train=True, rng=rng)
        pure = all(r.fell_back or any(np.array_equal(r.inliers, g) for g in groups) for r in res.refinements)
        if pure:
            return h.retract(rng.normal(scale=0.01, size=6)), pred, res


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _expected_check(mode: Mode, n: int, seed: int, corrupt: bool) -> CheckResult:
    name = f"expected_pose_loss_{mode.value}"
    worst, skipped, i, done = 0.0, 0, 0, 0
    while done < n:
        rng = _rng(seed, name, i)
        i += 1
        h_star, pred, res = _expected_instance(rng, mode)
        out = expected_pose_loss(res, h_star)
        if out.skipped:
            skipped += 1
            continue
        ana = _maybe_corrupt(out.grad, corrupt)
        err = np.inf
        for eps in FD_STEPS:
            # a sharply curved instance can need the smaller step; keep the better estimate
            num = finite_diff(lambda Y: expected_pose_loss_frozen(Y, res, h_star), pred, eps)[0]
            err = min(err, rel_error(ana.ravel(), num))
            if err < EXPECTED_TOL:
                break
        worst = max(worst, err)
        done += 1
    return CheckResult(name, n, "max_rel_error", worst, EXPECTED_TOL, worst < EXPECTED_TOL, skipped)


def check_expected_loss_rgbd(n, seed, corrupt=False):
    return _expected_check(Mode.RGBD, n, seed, corrupt)


def check_expected_loss_rgb(n, seed, corrupt=False):
    return _expected_check(Mode.RGB, n, seed, corrupt)


CHECKS = {
    "kabsch_backward": check_kabsch_backward,
    "refinement_backward": check_refinement_backward,
    "pnp_backward_noisy": check_pnp_backward_noisy,
    "pnp_backward_zero_residual": check_pnp_backward_exact,
    "score_soft_rgbd": check_score_soft_rgbd,
    "score_soft_rgb": check_score_soft_rgb,
    "loss_reproj": check_loss_reproj,
    "loss_rgbd": check_loss_rgbd,
    "loss_rgb_model": check_loss_rgb_model,
    "loss_rgb_only": check_loss_rgb_only,
    "pose_loss_clamped": check_pose_loss,
    "expected_pose_loss_rgbd": check_expected_loss_rgbd,
    "expected_pose_loss_rgb": check_expected_loss_rgb,
}


def run_all(n: int = 100, seed: int = 0, corrupt: bool = False, names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        res = CHECKS[name](n, seed, corrupt)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
