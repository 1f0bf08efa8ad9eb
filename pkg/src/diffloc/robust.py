"""RANSAC / DSAC pose estimation over a scene coordinate field."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .geom import BEHIND_CAMERA_RESIDUAL, Intrinsics, Pose, SceneCoordinateField, hat, projection_jacobian
from .solvers import (
    CorrespondenceSet,
    DegenerateConfigurationError,
    Mode,
    NoSolutionError,
    kabsch,
    minimal_pnp,
    pnp_refine_lm,
)

log = logging.getLogger(__name__)

MINIMAL_SET_SIZE = {Mode.RGB: 4, Mode.RGBD: 3}


class ExhaustedSamplingError(RuntimeError):
    """No acceptable minimal set found within the attempt budget."""


class NoInliersError(RuntimeError):
    """A hypothesis has too few inliers to be re-solved."""


@dataclass
class EstimatorConfig:
    """Hyper-parameters of the estimator.

    ``beta`` defaults to ``5 / tau`` and ``alpha`` to ``100 / |Y|`` when left as
    None. ``tau`` is in pixels for RGB and meters for RGB-D.
    """

    mode: Mode = Mode.RGBD
    M: int = 64
    tau: float | None = None
    beta: float | None = None
    alpha: float | None = None
    max_refine_iters: int = 100
    max_resample_attempts: int = 1000
    lm_max_iters: int = 100
    hard_test_score: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.tau is None:
            self.tau = 10.0 if self.mode is Mode.RGB else 0.1
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def beta_value(self) -> float:
        return 5.0 / self.tau if self.beta is None else self.beta

    def alpha_value(self, n: int) -> float:
        return 100.0 / n if self.alpha is None else self.alpha

    @property
    def minimal_size(self) -> int:
        return MINIMAL_SET_SIZE[self.mode]


@dataclass
class Hypothesis:
    pose: Pose
    indices: np.ndarray
    score: float = 0.0


@dataclass
class Refinement:
    pose: Pose
    inliers: np.ndarray
    iterations: int
    converged: bool
    fell_back: bool = False


@dataclass
class EstimateResult:
    pose: Pose
    selected: int
    hypotheses: list
    inliers: np.ndarray
    probabilities: np.ndarray | None = None
    refinements: list = field(default_factory=list)
    corrs: CorrespondenceSet | None = None
    K: Intrinsics | None = None
    cfg: EstimatorConfig | None = None

    @property
    def scores(self) -> np.ndarray:
        return np.array([h.score for h in self.hypotheses])


def residual_terms(pose: Pose, corrs: CorrespondenceSet, K: Intrinsics | None = None, want_grad: bool = True):
    """Per-correspondence residuals, with ``dr/dy`` (n, 3) and ``dr/d(omega, v)`` (n, 6).

    Behind-camera RGB points get :data:`BEHIND_CAMERA_RESIDUAL` and zero gradients.
    """
    x = pose.to_camera(corrs.scene)
    if corrs.mode is Mode.RGBD:
        d = x - corrs.observed
        r = np.linalg.norm(d, axis=1)
        ok = r > 0
        if not want_grad:
            return r, None, None
        u = np.zeros_like(d)
        u[ok] = d[ok] / r[ok, None]
        dr_dx = u
    else:
        front = x[:, 2] > 0
        d = K.project_camera(x) - corrs.observed
        r = np.where(front, np.linalg.norm(np.where(front[:, None], d, 0.0), axis=1), BEHIND_CAMERA_RESIDUAL)
        if not want_grad:
            return r, None, None
        ok = front & (r > 0)
        dr_dx = np.zeros_like(x)
        if np.any(ok):
            Jp = projection_jacobian(K, x[ok])
            dr_dx[ok] = np.einsum("nij,ni->nj", Jp, d[ok] / r[ok, None])
    dr_dy = dr_dx @ pose.R.T
    dr_dh = np.concatenate([np.einsum("nj,njk->nk", dr_dx, hat(x)), -dr_dx @ pose.R.T], axis=1)
    return r, dr_dy, dr_dh


def _residuals(pose, corrs, K):
    return residual_terms(pose, corrs, K, want_grad=False)[0]


def solve(corrs: CorrespondenceSet, K: Intrinsics | None = None, init: Pose | None = None, lm_max_iters: int = 100) -> Pose:
    """Minimal or full solve, dispatched on the correspondence mode."""
    if corrs.mode is Mode.RGBD:
        return kabsch(corrs)
    if init is None:
        return minimal_pnp(corrs, K)
    return pnp_refine_lm(init, corrs, K, lm_max_iters)


def sample_hypotheses(corrs: CorrespondenceSet, cfg: EstimatorConfig, rng: np.random.Generator, K: Intrinsics | None = None):
    """Draw ``cfg.M`` hypotheses from random minimal sets.

    Each slot owns an independent child stream of ``rng``. A minimal set whose
    own residuals are not all below ``tau`` is rejected and redrawn.
    """
    k = cfg.minimal_size
    n = len(corrs)
    if n < k:
        raise ExhaustedSamplingError(f"need at least {k} correspondences, got {n}")
    hyps = []
    for slot_rng in rng.spawn(cfg.M):
        for _ in range(cfg.max_resample_attempts):
            idx = slot_rng.choice(n, size=k, replace=False)
            sub = corrs.subset(idx)
            try:
                pose = solve(sub, K)
            except (DegenerateConfigurationError, NoSolutionError):
                continue
            if np.all(_residuals(pose, sub, K) < cfg.tau):
                hyps.append(Hypothesis(pose, idx))
                break
        else:
            raise ExhaustedSamplingError(f"no valid minimal set after {cfg.max_resample_attempts} attempts")
    return hyps


def score_soft(pose: Pose, corrs: CorrespondenceSet, cfg: EstimatorConfig, K: Intrinsics | None = None, *, with_pose_grad: bool = False):
    """Soft inlier count ``sum sigmoid(beta tau - beta r_i)`` and its gradient w.r.t. each ``y_i``.

    With ``with_pose_grad`` also returns the gradient w.r.t. the pose chart.
    """
    beta = cfg.beta_value
    r, dr_dy, dr_dh = residual_terms(pose, corrs, K)
    sig = expit(beta * (cfg.tau - r))
    w = -beta * sig * (1.0 - sig)
    score = float(np.sum(sig))
    grad = w[:, None] * dr_dy
    if with_pose_grad:
        return score, grad, w @ dr_dh
    return score, grad


def score_hard(pose: Pose, corrs: CorrespondenceSet, cfg: EstimatorConfig, K: Intrinsics | None = None) -> int:
    return int(np.sum(_residuals(pose, corrs, K) < cfg.tau))


def select(scores, cfg: EstimatorConfig, *, train: bool = False, rng: np.random.Generator | None = None, n: int | None = None):
    """Pick a hypothesis index.

    Test mode: argmax, ties to the lowest index. Train mode: sample from
    ``softmax(alpha * s)`` and also return the probabilities.
    """
    scores = np.asarray(scores, dtype=float)
    if not train:
        return int(np.argmax(scores))
    alpha = cfg.alpha_value(n if n is not None else 1)
    p = softmax(alpha * scores)
    j = int(rng.choice(len(p), p=p)) if rng is not None else int(np.argmax(p))
    return j, p


def inlier_set(pose: Pose, corrs: CorrespondenceSet, cfg: EstimatorConfig, K=None) -> np.ndarray:
    return np.flatnonzero(_residuals(pose, corrs, K) < cfg.tau)


def refine(pose: Pose, corrs: CorrespondenceSet, cfg: EstimatorConfig, K: Intrinsics | None = None) -> Refinement:
    """Alternate full re-solves on the inlier set and inlier re-computation.

    Stops when the inlier set repeats or after ``cfg.max_refine_iters`` solves.
    The returned pose is always the solve over the returned inlier set.
    Raises :class:`NoInliersError` if ``pose`` has fewer inliers than a
    minimal set.
    """
    k = cfg.minimal_size
    inliers = inlier_set(pose, corrs, cfg, K)
    if len(inliers) < k:
        raise NoInliersError(f"{len(inliers)} inliers, need {k}")
    current, used = pose, None
    for it in range(1, cfg.max_refine_iters + 1):
        try:
            new = solve(corrs.subset(inliers), K, init=current, lm_max_iters=cfg.lm_max_iters)
        except DegenerateConfigurationError:
            break
        current, used = new, inliers
        nxt = inlier_set(current, corrs, cfg, K)
        if np.array_equal(nxt, inliers):
            return Refinement(current, inliers, it, True)
        if len(nxt) < k:
            return Refinement(current, used, it, False)
        inliers = nxt
    if used is None:
        raise NoInliersError("inlier set is degenerate")
    return Refinement(current, used, it, False)


def _refine_or_fallback(h: Hypothesis, corrs, cfg, K) -> Refinement:
    try:
        return refine(h.pose, corrs, cfg, K)
    except NoInliersError:
        return Refinement(h.pose, np.asarray(h.indices), 0, False, fell_back=True)


def estimate(
    field: SceneCoordinateField,
    observed,
    cfg: EstimatorConfig,
    *,
    K: Intrinsics | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> EstimateResult:
    """Sample, score, select and refine.

    ``observed`` are pixels (RGB) or camera points (RGB-D) aligned with
    ``field``. In train mode every hypothesis is refined so that the expected
    loss over the selection distribution can be formed.
    """
    if len(field) == 0:
        raise ValueError("empty scene coordinate field")
    if cfg.mode is Mode.RGB and K is None:
        raise ValueError("RGB estimation needs intrinsics")
    rng = np.random.default_rng() if rng is None else rng
    corrs = CorrespondenceSet(cfg.mode, observed, field.points, field.indices)
    hyps = sample_hypotheses(corrs, cfg, rng, K)
    for h in hyps:
        if cfg.hard_test_score and not train:
            h.score = float(score_hard(h.pose, corrs, cfg, K))
        else:
            h.score = score_soft(h.pose, corrs, cfg, K)[0]
    scores = np.array([h.score for h in hyps])
    if not train:
        j = select(scores, cfg)
        ref = _refine_or_fallback(hyps[j], corrs, cfg, K)
        refinements = [None] * len(hyps)
        refinements[j] = ref
        return EstimateResult(ref.pose, j, hyps, ref.inliers, None, refinements, corrs, K, cfg)
    j, p = select(scores, cfg, train=True, rng=rng, n=len(corrs))
    refinements = [_refine_or_fallback(h, corrs, cfg, K) for h in hyps]
    ref = refinements[j]
    return EstimateResult(ref.pose, j, hyps, ref.inliers, p, refinements, corrs, K, cfg)
