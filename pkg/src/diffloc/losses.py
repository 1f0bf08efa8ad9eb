"""Initialisation losses, the clamped pose loss and the expected pose loss.

Unit convention: translations are meters everywhere else in the package; the
pose loss converts them to centimeters so that ``gamma = 100`` weighs one
degree of rotation error against one centimeter of translation error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import NearDegenerateSVDError, SingularNormalEquationsError, kabsch_backward, pnp_backward, refinement_backward
from .geom import Intrinsics, Pose, residual_rgb_grad, rotation_angle_deg
from .robust import EstimateResult, score_soft
from .solvers import Mode

log = logging.getLogger(__name__)

# per-pixel branch labels reported by the initialisation losses
BRANCH_NONE = 0
BRANCH_REPROJ = 1
BRANCH_EUCLID = 2
BRANCH_L1 = 3

M_TO_CM = 100.0


@dataclass
class LossConfig:
    gamma: float = 100.0
    reproj_clamp: float = 100.0
    pose_clamp: float = 100.0
    min_depth: float = 0.1
    max_depth: float = 1000.0
    max_reproj: float = 1000.0
    max_dist: float = 0.1
    heuristic_depth: float = 10.0

    def __post_init__(self):
        for name in ("gamma", "reproj_clamp", "pose_clamp", "min_depth", "max_depth", "max_reproj", "max_dist", "heuristic_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainingTarget:
    """Per-pixel supervision for one image.

    ``coords`` are ground-truth scene coordinates; ``has_coord`` marks which of
    them exist (a missing coordinate is never encoded as a zero vector).
    """

    pose: Pose
    pixels: np.ndarray
    coords: np.ndarray | None = None
    has_coord: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
            if self.has_coord is None:
                self.has_coord = np.ones(len(self.coords), dtype=bool)
        if self.has_coord is not None:
            self.has_coord = np.asarray(self.has_coord, dtype=bool)


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    branch: np.ndarray | None = None


def soft_clamp(x, threshold: float):
    """``x`` below ``threshold``, ``sqrt(threshold * x)`` above; returns value and derivative.

    At exactly ``threshold`` the derivative of the lower branch (1) is used.
    """
    x = np.asarray(x, dtype=float)
    above = x > threshold
    safe = np.where(above, x, threshold)
    value = np.where(above, np.sqrt(threshold * safe), x)
    deriv = np.where(above, 0.5 * np.sqrt(threshold / safe), 1.0)
    return value, deriv


def soft_clamped_reproj(y, h: Pose, p, K: Intrinsics, clamp: float = 100.0):
    """Robust re-projection residual per point, with its gradient w.r.t. ``y``."""
    r, dr = residual_rgb_grad(y, h, p, K)
    value, d = soft_clamp(r, clamp)
    return value, d[:, None] * dr


def loss_rgbd(points, target_coords, has_coord=None) -> LossResult:
    """Mean Euclidean distance to the ground-truth coordinates.

    Pixels without a target are excluded from both sum and count.
    """
    y = np.asarray(points, dtype=float)
    t = np.asarray(target_coords, dtype=float)
    has = np.ones(len(y), dtype=bool) if has_coord is None else np.asarray(has_coord, dtype=bool)
    grad = np.zeros_like(y)
    count = int(has.sum())
    if count == 0:
        return LossResult(0.0, grad, np.where(has, BRANCH_EUCLID, BRANCH_NONE))
    d = y[has] - t[has]
    dist = np.linalg.norm(d, axis=1)
    g = np.zeros_like(d)
    nz = dist > 0
    g[nz] = d[nz] / dist[nz, None]
    grad[has] = g / count
    return LossResult(float(dist.sum() / count), grad, np.where(has, BRANCH_EUCLID, BRANCH_NONE))


def _reproj_branch(y, h, p, K, cfg):
    x = h.to_camera(y)
    r, dr = residual_rgb_grad(y, h, p, K)
    return x[:, 2], r, dr


def loss_rgb_model(points, target: TrainingTarget, K: Intrinsics, cfg: LossConfig | None = None) -> LossResult:
    """Per-pixel switch between the clamped re-projection error and the 3D distance.

    A prediction uses the re-projection branch when it lies more than
    ``min_depth`` in front of the camera, re-projects within ``max_reproj`` and,
    if a target exists, is within ``max_dist`` of it. Otherwise it is pulled to
    its target; invalid pixels without a target contribute nothing. The mean
    runs over all pixels.
    """
    cfg = cfg or LossConfig()
    y = np.asarray(points, dtype=float)
    n = len(y)
    has = target.has_coord if target.has_coord is not None else np.zeros(n, dtype=bool)
    coords = target.coords if target.coords is not None else np.zeros_like(y)
    depth, r, dr = _reproj_branch(y, target.pose, target.pixels, K, cfg)
    dist = np.linalg.norm(coords - y, axis=1)
    valid = (depth > cfg.min_depth) & (r < cfg.max_reproj) & (~has | (dist < cfg.max_dist))

    loss = np.zeros(n)
    grad = np.zeros_like(y)
    branch = np.full(n, BRANCH_NONE)
    vr, dv = soft_clamp(r[valid], cfg.reproj_clamp)
    loss[valid] = vr
    grad[valid] = dv[:, None] * dr[valid]
    branch[valid] = BRANCH_REPROJ

    pull = ~valid & has
    loss[pull] = dist[pull]
    nz = pull & (dist > 0)
    grad[nz] = (y[nz] - coords[nz]) / dist[nz, None]
    branch[pull] = BRANCH_EUCLID
    return LossResult(float(loss.sum() / n), grad / n, branch)


def heuristic_targets(target: TrainingTarget, K: Intrinsics, depth: float = 10.0) -> np.ndarray:
    """Scene points obtained by back-projecting each pixel at a constant depth."""
    return target.pose.apply(K.backproject(target.pixels, depth))


def loss_rgb_only(points, target: TrainingTarget, K: Intrinsics, cfg: LossConfig | None = None) -> LossResult:
    """Clamped re-projection error for valid predictions, L1 pull to a constant-depth heuristic otherwise.

    Valid means depth in ``(min_depth, max_depth)`` and re-projection error
    below ``max_reproj``.
    """
    cfg = cfg or LossConfig()
    y = np.asarray(points, dtype=float)
    n = len(y)
    ybar = heuristic_targets(target, K, cfg.heuristic_depth)
    depth, r, dr = _reproj_branch(y, target.pose, target.pixels, K, cfg)
    valid = (depth > cfg.min_depth) & (depth < cfg.max_depth) & (r < cfg.max_reproj)

    loss = np.zeros(n)
    grad = np.zeros_like(y)
    vr, dv = soft_clamp(r[valid], cfg.reproj_clamp)
    loss[valid] = vr
    grad[valid] = dv[:, None] * dr[valid]
    diff = y[~valid] - ybar[~valid]
    loss[~valid] = np.abs(diff).sum(axis=1)
    grad[~valid] = np.sign(diff)
    branch = np.where(valid, BRANCH_REPROJ, BRANCH_L1)
    return LossResult(float(loss.sum() / n), grad / n, branch)


def pose_loss(h: Pose, h_star: Pose, gamma: float = 100.0, *, with_grad: bool = False):
    """Translation error in cm plus ``gamma`` times the rotation error in degrees.

    With ``with_grad`` also returns the gradient w.r.t. the local chart of ``h``.
    """
    dt = h.translation - h_star.translation
    tn = np.linalg.norm(dt)
    phi = (h_star.rotation.inverse() @ h.rotation).as_rotvec()
    angle = rotation_angle_deg(h.rotation, h_star.rotation)
    value = M_TO_CM * tn + gamma * angle
    if not with_grad:
        return value
    g = np.zeros(6)
    if tn > 0:
        g[3:] = M_TO_CM * dt / tn
    theta = np.linalg.norm(phi)
    if theta > 0:
        # d|Log(Exp(phi) Exp(w))|/dw at w = 0 is phi / |phi|
        g[:3] = gamma * np.degrees(1.0) * phi / theta
    return value, g


def pose_loss_clamped(h: Pose, h_star: Pose, gamma: float = 100.0, clamp: float = 100.0, *, with_grad: bool = False):
    if not with_grad:
        return float(soft_clamp(pose_loss(h, h_star, gamma), clamp)[0])
    value, g = pose_loss(h, h_star, gamma, with_grad=True)
    v, d = soft_clamp(value, clamp)
    return float(v), float(d) * g


@dataclass
class ExpectedLossResult:
    value: float
    grad: np.ndarray
    losses: np.ndarray
    probabilities: np.ndarray
    skipped: int = 0


def hypothesis_backward(result: EstimateResult, j: int, upstream) -> np.ndarray:
    """Gradient of hypothesis ``j`` (before refinement) w.r.t. the field.

    RGB hypotheses come from P3P on the first three points of the minimal set,
    so the exact derivative follows from the square Gauss-Newton system there.
    """
    corrs, K = result.corrs, result.K
    idx = np.asarray(result.hypotheses[j].indices)
    out = np.zeros_like(corrs.scene)
    if corrs.mode is Mode.RGBD:
        out[idx] = kabsch_backward(corrs.subset(idx), upstream)
    else:
        out[idx[:3]] = pnp_backward(corrs.subset(idx[:3]), K, result.hypotheses[j].pose, upstream)
    return out


def expected_pose_loss(
    result: EstimateResult,
    h_star: Pose,
    cfg: LossConfig | None = None,
    *,
    min_prob: float = 1e-12,
) -> ExpectedLossResult:
    """Exact expectation of the clamped pose loss over the hypothesis distribution.

    The gradient is ``sum_j p_j [l_j dlog p_j/dY + dl_j/dY]``: the score term
    flows through every soft score (directly and through its minimal solve),
    the loss term through the frozen final refinement. Hypotheses with
    probability below ``min_prob`` are skipped in the backward pass.
    """
    cfg = cfg or LossConfig()
    if result.probabilities is None:
        raise ValueError("expected_pose_loss needs a train-mode estimate")
    p = np.asarray(result.probabilities)
    corrs, K, ecfg = result.corrs, result.K, result.cfg
    M = len(p)
    losses = np.empty(M)
    upstreams = []
    for j, ref in enumerate(result.refinements):
        lj, gj = pose_loss_clamped(ref.pose, h_star, cfg.gamma, cfg.pose_clamp, with_grad=True)
        losses[j] = lj
        upstreams.append(gj)
    E = float(p @ losses)

    alpha = ecfg.alpha_value(len(corrs))
    grad = np.zeros_like(corrs.scene)
    skipped = 0
    for j, ref in enumerate(result.refinements):
        if p[j] < min_prob:
            continue
        try:
            if ref.fell_back:
                dl = hypothesis_backward(result, j, upstreams[j])
            else:
                dl = refinement_backward(ref.inliers, corrs, ref.pose, upstreams[j], K)
            grad += p[j] * dl
            w = p[j] * (losses[j] - E) * alpha
            if w != 0:
                h = result.hypotheses[j]
                _, ds_dy, ds_dh = score_soft(h.pose, corrs, ecfg, K, with_pose_grad=True)
                grad += w * (ds_dy + hypothesis_backward(result, j, ds_dh))
        except (NearDegenerateSVDError, SingularNormalEquationsError) as exc:
            skipped += 1
            log.debug("skipping gradient of hypothesis %d: %s", j, exc)
    return ExpectedLossResult(E, grad, losses, p, skipped)


def expected_pose_loss_frozen(points, result: EstimateResult, h_star: Pose, cfg: LossConfig | None = None) -> float:
    """Re-evaluate the expected loss at new coordinates with all discrete choices frozen.

    Minimal-set indices and each hypothesis's final inlier set are reused from
    ``result``; poses are re-solved with the forward solvers. Used as the
    finite-difference oracle for :func:`expected_pose_loss`.
    """
    from .robust import solve

    cfg = cfg or LossConfig()
    corrs = result.corrs.with_scene(points)
    K, ecfg = result.K, result.cfg
    scores, losses = [], []
    for h, ref in zip(result.hypotheses, result.refinements):
        hyp = solve(corrs.subset(h.indices), K)
        scores.append(score_soft(hyp, corrs, ecfg, K)[0])
        if ref.fell_back:
            final = hyp
        else:
            final = solve(corrs.subset(ref.inliers), K, init=ref.pose, lm_max_iters=200)
        losses.append(pose_loss_clamped(final, h_star, cfg.gamma, cfg.pose_clamp))
    s = np.array(scores) * ecfg.alpha_value(len(corrs))
    p = np.exp(s - s.max())
    p /= p.sum()
    return float(p @ np.array(losses))
