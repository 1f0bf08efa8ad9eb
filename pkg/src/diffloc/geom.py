"""Rigid poses, pinhole intrinsics, projection and residual functions.

Conventions
-----------
A :class:`Pose` maps camera coordinates to scene coordinates, ``y = R e + t``.
Rotations are stored as unit quaternions ``(w, x, y, z)``. Distances are in
meters, angles in degrees at the reporting boundary, pixels only at the image
interface.

Local increments (the "chart" used by every Jacobian in this package) are
6-vectors ``(omega, v)``: ``retract(h, (omega, v)) = (R Exp(omega), t + v)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Residual assigned to scene points that land behind the camera (pixels).
BEHIND_CAMERA_RESIDUAL = 10000.0

_EPS_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric cross-product matrix of a 3-vector (or a stack of them)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` applied to the skew part of ``m``."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < _EPS_SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _quat_log(q: np.ndarray) -> np.ndarray:
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = np.linalg.norm(v)
    if n < _EPS_SMALL_ANGLE:
        return 2.0 * v / q[0]
    return 2.0 * np.arctan2(n, q[0]) * v / n


def so3_log(m: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    return _quat_log(_matrix_to_quat(m))


class Rotation:
    """Unit-quaternion rotation. Immutable."""

    __slots__ = ("_q", "_m")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0)):
        q = np.array(q, dtype=float)
        n = np.linalg.norm(q)
        if q.shape != (4,) or not np.isfinite(n) or n == 0:
            raise ValueError(f"invalid quaternion {q!r}")
        q = q / n
        # canonical hemisphere so equal rotations compare equal
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        self._q = q
        self._m = None

    @classmethod
    def identity(cls) -> Rotation:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        return cls(_matrix_to_quat(np.asarray(m, dtype=float)))

    @classmethod
    def from_rotvec(cls, omega) -> Rotation:
        omega = np.asarray(omega, dtype=float)
        theta = np.linalg.norm(omega)
        if theta < _EPS_SMALL_ANGLE:
            return cls(np.concatenate([[1.0], 0.5 * omega]))
        return cls(np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * omega / theta]))

    @property
    def quaternion(self) -> np.ndarray:
        return self._q

    @property
    def matrix(self) -> np.ndarray:
        if self._m is None:
            m = _quat_to_matrix(self._q)
            m.setflags(write=False)
            self._m = m
        return self._m

    def as_rotvec(self) -> np.ndarray:
        return _quat_log(self._q)

    def compose(self, other: Rotation) -> Rotation:
        return Rotation(_quat_mul(self._q, other._q))

    def inverse(self) -> Rotation:
        q = self._q.copy()
        q[1:] *= -1
        return Rotation(q)

    def apply(self, v):
        return np.asarray(v, dtype=float) @ self.matrix.T

    def __matmul__(self, other: Rotation) -> Rotation:
        return self.compose(other)

    def __repr__(self):
        return "Rotation(q=[{:.6g}, {:.6g}, {:.6g}, {:.6g}])".format(*self._q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-scene rigid transform ``y = R e + t``."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(Rotation(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> Pose:
        return cls(Rotation.from_matrix(R), t)

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, e):
        return np.asarray(e, dtype=float) @ self.R.T + self.translation

    def inverse(self) -> Pose:
        inv = self.rotation.inverse()
        return Pose(inv, -inv.apply(self.translation))

    def compose(self, other: Pose) -> Pose:
        return Pose(self.rotation @ other.rotation, self.apply(other.translation))

    def to_camera(self, y):
        """Scene points expressed in the camera frame, ``R^T (y - t)``."""
        return (np.asarray(y, dtype=float) - self.translation) @ self.R

    def retract(self, delta) -> Pose:
        """Apply a local increment ``(omega, v)``: ``(R Exp(omega), t + v)``."""
        delta = np.asarray(delta, dtype=float)
        return Pose(self.rotation @ Rotation.from_rotvec(delta[:3]), self.translation + delta[3:])

    def local(self, other: Pose) -> np.ndarray:
        """Inverse of :meth:`retract`: the increment taking ``self`` to ``other``."""
        omega = (self.rotation.inverse() @ other.rotation).as_rotvec()
        return np.concatenate([omega, other.translation - self.translation])

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def __repr__(self):
        return f"Pose(rotvec={np.round(self.rotation.as_rotvec(), 6)}, t={np.round(self.translation, 6)})"


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project_camera(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * x[..., 0] / x[..., 2] + self.cx
            v = self.fy * x[..., 1] / x[..., 2] + self.cy
        return np.stack([u, v], axis=-1)

    def backproject(self, p, depth):
        p = np.asarray(p, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (p[..., 0] - self.cx) / self.fx * depth
        y = (p[..., 1] - self.cy) / self.fy * depth
        return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class SceneCoordinateField:
    """Predicted scene coordinates, one per pixel index, plus an optional gradient buffer."""

    indices: np.ndarray
    points: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.indices) != len(self.points):
            raise ValueError("one pixel index per scene coordinate required")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("pixel indices must be unique")
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=float)
            if self.grad.shape != self.points.shape:
                raise ValueError("gradient buffer must match the coordinate shape")

    @classmethod
    def from_points(cls, points) -> SceneCoordinateField:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(np.arange(len(points)), points)

    def __len__(self):
        return len(self.points)

    def zero_grad(self):
        self.grad = np.zeros_like(self.points)


def pose_apply(h: Pose, e):
    return h.apply(e)


def pose_inverse(h: Pose) -> Pose:
    return h.inverse()


def project(K: Intrinsics, h: Pose, y):
    """Project scene points through ``K h^-1``.

    Returns ``(uv, in_front)``; ``in_front`` is False where the camera-frame depth
    is not positive, and the corresponding ``uv`` entries are meaningless.
    """
    x = h.to_camera(y)
    in_front = x[..., 2] > 0
    return K.project_camera(x), in_front


def residual_rgb(y, h: Pose, p, K: Intrinsics):
    """Re-projection error in pixels; :data:`BEHIND_CAMERA_RESIDUAL` behind the camera."""
    uv, ok = project(K, h, y)
    r = np.linalg.norm(np.asarray(p, dtype=float) - uv, axis=-1)
    return np.where(ok, r, BEHIND_CAMERA_RESIDUAL)


def residual_rgbd(y, h: Pose, e):
    """3D distance between observed camera points and ``h^-1 y``, in meters."""
    return np.linalg.norm(np.asarray(e, dtype=float) - h.to_camera(y), axis=-1)


def projection_jacobian(K: Intrinsics, x: np.ndarray) -> np.ndarray:
    """d(u, v)/d(camera point), shape (n, 2, 3)."""
    x = np.atleast_2d(x)
    iz = 1.0 / x[:, 2]
    J = np.zeros((len(x), 2, 3))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x[:, 0] * iz * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * x[:, 1] * iz * iz
    return J


def residual_rgb_grad(y, h: Pose, p, K: Intrinsics):
    """Residuals and their gradients w.r.t. the scene points, ``(r, dr/dy)``.

    Behind-camera points and exact zeros get a zero gradient.
    """
    y = np.atleast_2d(y)
    x = h.to_camera(y)
    ok = x[:, 2] > 0
    d = K.project_camera(x) - np.atleast_2d(p)
    r = np.linalg.norm(d, axis=1)
    safe = ok & (r > 0)
    g = np.zeros_like(y)
    if np.any(safe):
        Jp = projection_jacobian(K, x[safe])
        dx = np.einsum("nij,ni->nj", Jp, d[safe] / r[safe, None])
        g[safe] = dx @ h.R.T
    return np.where(ok, r, BEHIND_CAMERA_RESIDUAL), g


def residual_rgbd_grad(y, h: Pose, e):
    y = np.atleast_2d(y)
    d = h.to_camera(y) - np.atleast_2d(e)
    r = np.linalg.norm(d, axis=1)
    g = np.zeros_like(y)
    nz = r > 0
    g[nz] = (d[nz] / r[nz, None]) @ h.R.T
    return r, g


def rotation_angle_deg(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, in degrees within [0, 180]."""
    q = _quat_mul(a.inverse().quaternion, b.quaternion)
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))))


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def random_rotation(rng: np.random.Generator) -> Rotation:
    return Rotation(rng.normal(size=4))


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(scale=scale, size=3))


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``center`` with its optical (+z) axis through ``target``.

    Camera axes follow the image convention: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_rt(np.stack([x, y, z], axis=1), center)
