"""Forward pose solvers: Kabsch (3D-3D), P3P minimal PnP and LM refinement (2D-3D)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geom import Intrinsics, Pose


class Mode(str, Enum):
    RGB = "rgb"
    RGBD = "rgbd"


class DegenerateConfigurationError(ValueError):
    """The correspondences do not determine a unique pose."""


class NoSolutionError(ValueError):
    """The minimal solver found no physically valid pose."""


@dataclass
class CorrespondenceSet:
    """Paired observations and scene coordinates.

    ``observed`` holds pixels (n, 2) in RGB mode or camera points (n, 3) in
    RGB-D mode. ``indices`` point back into the originating field so gradients
    can be routed to the right coordinates.
    """

    mode: Mode
    observed: np.ndarray
    scene: np.ndarray
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.observed = np.asarray(self.observed, dtype=float)
        self.scene = np.asarray(self.scene, dtype=float).reshape(-1, 3)
        dim = 2 if self.mode is Mode.RGB else 3
        if self.observed.ndim != 2 or self.observed.shape[1] != dim:
            raise ValueError(f"{self.mode.value} observations must have shape (n, {dim})")
        if len(self.observed) != len(self.scene) or len(self.scene) == 0:
            raise ValueError("correspondence set must be non-empty and paired")
        if self.indices is None:
            self.indices = np.arange(len(self.scene))
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.scene)

    def subset(self, idx) -> CorrespondenceSet:
        idx = np.asarray(idx)
        return CorrespondenceSet(self.mode, self.observed[idx], self.scene[idx], self.indices[idx])

    def with_scene(self, scene) -> CorrespondenceSet:
        return CorrespondenceSet(self.mode, self.observed, scene, self.indices)


def kabsch_svd(e: np.ndarray, y: np.ndarray):
    """Centered covariance and its SVD; shared with the backward pass."""
    e_mean = e.mean(axis=0)
    y_mean = y.mean(axis=0)
    H = (e - e_mean).T @ (y - y_mean)
    U, S, Vt = np.linalg.svd(H)
    return e_mean, y_mean, H, U, S, Vt


def kabsch(corrs: CorrespondenceSet) -> Pose:
    """Least-squares rigid transform mapping camera points onto scene points."""
    if corrs.mode is not Mode.RGBD:
        raise ValueError("kabsch needs 3D-3D correspondences")
    if len(corrs) < 3:
        raise DegenerateConfigurationError("kabsch needs at least 3 correspondences")
    e_mean, y_mean, _, U, S, Vt = kabsch_svd(corrs.observed, corrs.scene)
    if S[0] == 0 or S[1] <= 1e-10 * S[0]:
        raise DegenerateConfigurationError("covariance rank < 2 (collinear or coincident points)")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose.from_rt(R, y_mean - R @ e_mean)


def _cross(a, b):
    # np.cross carries heavy per-call overhead for single 3-vectors
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _triangle_frame(pts: np.ndarray) -> np.ndarray:
    a = pts[1] - pts[0]
    b = pts[2] - pts[0]
    x = a / np.sqrt(a @ a)
    z = _cross(a, b)
    z /= np.sqrt(z @ z)
    return np.column_stack([x, _cross(z, x), z])


def p3p(pixels: np.ndarray, scene: np.ndarray, K: Intrinsics, polish: bool = True) -> list[Pose]:
    """All real P3P solutions for three 2D-3D correspondences (Grunert).

    The law-of-cosines system in the depth ratios ``u = s2/s1`` and
    ``v = s3/s1`` is reduced to a quartic in ``v`` via the resultant of the two
    quadratics in ``u``. Returns an empty list for collinear scene points.
    """
    scene = np.asarray(scene, dtype=float)
    rays = np.column_stack([(pixels[:3, 0] - K.cx) / K.fx, (pixels[:3, 1] - K.cy) / K.fy, np.ones(3)])
    rays /= np.sqrt(np.sum(rays * rays, axis=1))[:, None]

    d12, d02, d01 = scene[1] - scene[2], scene[0] - scene[2], scene[0] - scene[1]
    a2, b2, c2 = d12 @ d12, d02 @ d02, d01 @ d01
    cr = _cross(d01, d02)
    if min(a2, b2, c2) == 0 or cr @ cr <= 1e-18 * max(a2, b2, c2) ** 2:
        return []

    cos_a = rays[1] @ rays[2]
    cos_b = rays[0] @ rays[2]
    cos_g = rays[0] @ rays[1]
    A, C = a2 / b2, c2 / b2

    # coefficient arrays are low-to-high order in v
    # p(u) = u^2 + p1 u + p0(v),  p1 = -2 cos_g,  p0 = 1 - C (1 + v^2 - 2 v cos_b)
    # q(u) = u^2 + q1(v) u + q0(v),  q1 = -2 v cos_a,  q0 = v^2 - A (1 + v^2 - 2 v cos_b)
    p1 = -2.0 * cos_g
    p0 = np.array([1.0 - C, 2.0 * C * cos_b, -C])
    q1 = np.array([0.0, -2.0 * cos_a])
    q0 = np.array([-A, 2.0 * A * cos_b, 1.0 - A])
    m = q0 - p0  # resultant pieces; u = -m(v) / n1(v)
    n1 = np.array([-p1, -2.0 * cos_a])
    n2 = np.append(p1 * q0, 0.0) - np.convolve(p0, q1)
    quartic = np.convolve(m, m)
    quartic -= np.convolve(n1, n2)

    roots = np.roots(quartic[::-1]) if np.any(quartic[1:]) else np.array([])
    dq = quartic[1:] * np.arange(1, 5)
    F_scene = _triangle_frame(scene[:3])
    poses, seen = [], []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = root.real
        for _ in range(2):
            f = quartic[0] + v * (quartic[1] + v * (quartic[2] + v * (quartic[3] + v * quartic[4])))
            df = dq[0] + v * (dq[1] + v * (dq[2] + v * dq[3]))
            if df == 0:
                break
            v -= f / df
        if v <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b)
        if not s1_sq > 0:
            continue
        s1 = np.sqrt(s1_sq)
        for u in _common_u(v, p1, p0, q1, q0, m, n1):
            depths = np.array([s1, u * s1, v * s1])
            if any(np.max(np.abs(depths - s) / s) < 1e-9 for s in seen):
                continue
            seen.append(depths)
            cam = rays * depths[:, None]
            R = F_scene @ _triangle_frame(cam).T
            pose = Pose.from_rt(R, scene[0] - R @ cam[0])
            poses.append(_polish_p3p(pose, pixels[:3], scene[:3], K) if polish else pose)
    return poses


def _common_u(v, p1, p0, q1, q0, m, n1, tol=1e-6):
    """Positive ``u`` that solve both quadratics at ``v``.

    Usually the linear combination of the two gives ``u`` directly. When its
    coefficient vanishes (symmetric configurations) the quadratics coincide,
    so both roots of the first one are candidates.
    """
    a0 = p0[0] + v * (p0[1] + v * p0[2])
    b1 = q1[0] + v * q1[1]
    b0 = q0[0] + v * (q0[1] + v * q0[2])
    den = n1[0] + n1[1] * v
    cands = []
    if abs(den) > 1e-9:
        cands.append(-(m[0] + v * (m[1] + v * m[2])) / den)
    disc = p1 * p1 - 4.0 * a0
    if disc >= 0:
        r = np.sqrt(disc)
        cands += [(-p1 + r) / 2.0, (-p1 - r) / 2.0]
    out = []
    for u in cands:
        if u <= 0:
            continue
        scale = 1.0 + u * u
        if abs(u * u + p1 * u + a0) > tol * scale or abs(u * u + b1 * u + b0) > tol * scale:
            continue
        if all(abs(u - w) > 1e-9 * scale for w in out):
            out.append(u)
    return out


def _polish_p3p(pose: Pose, pixels, scene, K: Intrinsics, iters: int = 4) -> Pose:
    # Newton on the square 6x6 system; near-double quartic roots lose digits otherwise
    best, best_cost = pose, _cost(pose, pixels, scene, K)
    for _ in range(iters):
        if best_cost < 1e-24:
            break
        r, J, _, _ = reprojection_terms(best, pixels, scene, K)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        cand = best.retract(step)
        c = _cost(cand, pixels, scene, K)
        if not c < best_cost:
            break
        best, best_cost = cand, c
    return best


def minimal_pnp(corrs: CorrespondenceSet, K: Intrinsics) -> Pose:
    """Pose from four 2D-3D correspondences.

    P3P on the first three, the fourth picks among the algebraic solutions.
    Raises :class:`NoSolutionError` when no solution puts all four points in
    front of the camera.
    """
    if corrs.mode is not Mode.RGB or len(corrs) != 4:
        raise ValueError("minimal_pnp needs exactly four 2D-3D correspondences")
    best, best_err = None, np.inf
    for pose in p3p(corrs.observed[:3], corrs.scene[:3], K, polish=False):
        x = pose.to_camera(corrs.scene)
        if np.any(x[:, 2] <= 0):
            continue
        d = K.project_camera(x[3]) - corrs.observed[3]
        err = d @ d
        if err < best_err:  # strict: ties keep the lowest-index solution
            best, best_err = pose, err
    if best is None:
        raise NoSolutionError("P3P produced no valid solution")
    return _polish_p3p(best, corrs.observed[:3], corrs.scene[:3], K)


def reprojection_terms(pose: Pose, pixels: np.ndarray, scene: np.ndarray, K: Intrinsics):
    """Stacked residual ``proj - p`` (2n,) with Jacobians w.r.t. the pose chart and the scene points.

    Returns ``(r, J_pose (2n, 6), J_scene (n, 2, 3), in_front)``.
    """
    R = pose.R
    x = (scene - pose.translation) @ R
    z = x[:, 2]
    in_front = z > 0
    iz = 1.0 / z
    n = len(x)
    # rows of the projection Jacobian d(u, v)/dx
    a = np.zeros((n, 3))
    b = np.zeros((n, 3))
    a[:, 0] = K.fx * iz
    a[:, 2] = -K.fx * x[:, 0] * iz * iz
    b[:, 1] = K.fy * iz
    b[:, 2] = -K.fy * x[:, 1] * iz * iz
    r = np.empty((n, 2))
    r[:, 0] = K.fx * x[:, 0] * iz + K.cx - pixels[:, 0]
    r[:, 1] = K.fy * x[:, 1] * iz + K.cy - pixels[:, 1]
    # x = Exp(-omega) R^T (y - t - v)  =>  dx/domega = [x]_x, dx/dv = -R^T
    J_scene = np.empty((n, 2, 3))
    J_scene[:, 0] = a @ R.T
    J_scene[:, 1] = b @ R.T
    J_pose = np.empty((n, 2, 6))
    J_pose[:, 0, :3] = _cross_rows(a, x)
    J_pose[:, 1, :3] = _cross_rows(b, x)
    J_pose[:, :, 3:] = -J_scene
    return r.reshape(-1), J_pose.reshape(-1, 6), J_scene, in_front


def _cross_rows(a, b):
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def _cost(pose, pixels, scene, K):
    x = (scene - pose.translation) @ pose.R
    z = x[:, 2]
    if np.any(z <= 0):
        return np.inf
    du = K.fx * x[:, 0] / z + K.cx - pixels[:, 0]
    dv = K.fy * x[:, 1] / z + K.cy - pixels[:, 1]
    return float(du @ du + dv @ dv)


@dataclass
class LMReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


def pnp_refine_lm(
    init: Pose,
    corrs: CorrespondenceSet,
    K: Intrinsics,
    max_iters: int = 100,
    *,
    lam: float = 1e-3,
    grad_tol: float = 1e-9,
    step_tol: float = 1e-12,
    cost_tol: float = 1e-14,
    return_report: bool = False,
):
    """Levenberg-Marquardt minimisation of the squared re-projection error.

    Returns the best iterate; the objective never increases between accepted
    steps. Stops on a small gradient, a small step, or an accepted step whose
    relative cost decrease is below ``cost_tol`` (rounding level).
    """
    if corrs.mode is not Mode.RGB or len(corrs) < 4:
        raise ValueError("pnp_refine_lm needs at least four 2D-3D correspondences")
    pixels, scene = corrs.observed, corrs.scene
    pose = init
    cost = _cost(pose, pixels, scene, K)
    initial = cost
    converged = False
    it = 0
    while it < max_iters and np.isfinite(cost):
        r, J, _, _ = reprojection_terms(pose, pixels, scene, K)
        g = J.T @ r
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pose.retract(step)
            new_cost = _cost(cand, pixels, scene, K)
            if new_cost <= cost:
                decrease = cost - new_cost
                pose, cost = cand, new_cost
                lam *= 0.1
                accepted = True
                break
            lam *= 10
            if np.linalg.norm(step) < step_tol:
                break
        it += 1
        if not accepted or np.linalg.norm(step) < step_tol or decrease <= cost_tol * (cost + decrease):
            converged = True
            break
    if return_report:
        return pose, LMReport(it, initial, cost, converged)
    return pose
