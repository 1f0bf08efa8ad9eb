"""Backward passes through the pose solvers.

Every pose gradient here lives in the local chart of :meth:`Pose.retract`:
an upstream gradient is a 6-vector ``dL/d(omega, v)`` at the solved pose, and
the result is one 3-vector ``dL/dy_i`` per scene coordinate of the solved set.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

from .geom import Intrinsics, Pose, hat
from .solvers import CorrespondenceSet, Mode, kabsch_svd, reprojection_terms

log = logging.getLogger(__name__)

SVD_GAP_TOL = 1e-8
NORMAL_COND_TOL = 1e12


class NearDegenerateSVDError(ArithmeticError):
    """Singular values too close for a stable SVD derivative."""


class SingularNormalEquationsError(ArithmeticError):
    """J^T J of the re-projection residuals is (numerically) singular."""


def finite_diff(fn, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``, one column per input entry."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    f0 = np.atleast_1d(np.asarray(fn(x), dtype=float))
    J = np.empty((f0.size, flat.size))
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += eps
        xm[k] -= eps
        fp = np.asarray(fn(xp.reshape(x.shape)), dtype=float).reshape(-1)
        fm = np.asarray(fn(xm.reshape(x.shape)), dtype=float).reshape(-1)
        J[:, k] = (fp - fm) / (2 * eps)
    return J


def kabsch_backward(corrs: CorrespondenceSet, upstream) -> np.ndarray:
    """``dL/dy_i`` for the Kabsch solution given ``dL/d(omega, v)``.

    Differentiates covariance assembly, the SVD (Papadopoulo-Lourakis), the
    reflection-corrected rotation and the translation recovery.
    """
    g = np.asarray(upstream, dtype=float)
    e, y = corrs.observed, corrs.scene
    if not np.any(g):
        return np.zeros_like(y)
    e_mean, _, _, U, S, Vt = kabsch_svd(e, y)
    gaps = np.abs(S[:, None] - S[None, :])[np.triu_indices(3, 1)]
    if gaps.min() < SVD_GAP_TOL * S[0] or S[0] == 0:
        raise NearDegenerateSVDError(f"singular values {S} too close")
    V = Vt.T
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(V @ U.T))])
    R = V @ D @ U.T

    g_rot, g_t = g[:3], g[3:]
    # dL = g_rot . vee(R^T dR) + g_t . dt, with t = y_mean - R e_mean
    G_R = 0.5 * R @ hat(g_rot) - np.outer(g_t, e_mean)

    # dR = V (Om_V D - D Om_U) U^T with Om_U = U^T dU, Om_V = V^T dV
    M = V.T @ G_R @ U
    G_U = -D @ M
    G_V = M @ D
    s = S
    denom = s[None, :] ** 2 - s[:, None] ** 2  # [i, j] = s_j^2 - s_i^2
    np.fill_diagonal(denom, 1.0)
    F = 1.0 / denom
    np.fill_diagonal(F, 0.0)
    G_P = F * (s[None, :] * (G_U - G_U.T) + s[:, None] * (G_V - G_V.T))
    G_H = U @ G_P @ Vt

    return (e - e_mean) @ G_H + g_t / len(y)


def pnp_jacobians(corrs: CorrespondenceSet, K: Intrinsics, pose: Pose):
    _, J_pose, J_scene, _ = reprojection_terms(pose, corrs.observed, corrs.scene, K)
    return J_pose, J_scene


def pnp_backward(corrs: CorrespondenceSet, K: Intrinsics, converged: Pose, upstream) -> np.ndarray:
    """Approximate ``dL/dy_i`` for an iterative PnP solution.

    The last Gauss-Newton step is frozen at the converged pose, giving
    ``dh/dY ~ -(J^T J)^-1 J^T dr/dY`` over the stacked 2-component residuals.
    """
    g = np.asarray(upstream, dtype=float)
    if not np.any(g):
        return np.zeros_like(corrs.scene)
    J_pose, J_scene = pnp_jacobians(corrs, K, converged)
    A = J_pose.T @ J_pose
    if np.linalg.cond(A) > NORMAL_COND_TOL:
        raise SingularNormalEquationsError("normal equations are ill-conditioned")
    z = scipy.linalg.solve(A, g, assume_a="pos")
    w = -(J_pose @ z).reshape(-1, 2)
    return np.einsum("nij,ni->nj", J_scene, w)


def solver_backward(corrs: CorrespondenceSet, pose: Pose, upstream, K: Intrinsics | None = None):
    if corrs.mode is Mode.RGBD:
        return kabsch_backward(corrs, upstream)
    return pnp_backward(corrs, K, pose, upstream)


def refinement_backward(final_inliers, corrs: CorrespondenceSet, pose: Pose, upstream, K: Intrinsics | None = None):
    """Gradient of a refined pose, with the final inlier set held fixed.

    ``final_inliers`` are positions into ``corrs``. Returns an array shaped like
    ``corrs.scene``; coordinates outside the inlier set get exactly zero.
    """
    out = np.zeros_like(corrs.scene)
    idx = np.asarray(final_inliers)
    out[idx] = solver_backward(corrs.subset(idx), pose, upstream, K)
    return out
