"""Rotations, rigid transforms, pose interpolation and pinhole projection.

Conventions
-----------
* Quaternions are Hamilton, scalar first ``(w, x, y, z)``, canonicalized to
  ``w >= 0`` on construction so that file output is deterministic.
* A :class:`Pose` ``T = (R, t)`` maps points ``p`` of its child frame into its
  parent frame, ``p' = R p + t``.  ``compose(a, b)`` is the matrix product
  ``a @ b``.
* Manifold perturbations of a rotation are applied on the right,
  ``R <- R Exp(delta)``.

The array helpers (``so3_exp``, ``quat_to_matrix``, ...) operate on stacks of
shape ``(..., 3)`` / ``(..., 4)`` / ``(..., 3, 3)`` and are what the solver uses
for its vectorized residual evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateInterval, InvalidIntrinsics, NonPositiveFocal, OutOfRange

# Quaternions whose norm is within this band of 1 are left untouched, which
# keeps parse/emit round trips bit-exact.
NORM_TOLERANCE = 1e-9
DEPTH_EPSILON = 1e-6


# ---------------------------------------------------------------------------
# array helpers
# ---------------------------------------------------------------------------

def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w):
    """Rodrigues' formula for rotation vectors of shape ``(..., 3)``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    K2 = K @ K
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R):
    """Rotation vector of rotation matrices ``(..., 3, 3)``, via quaternions."""
    q = matrix_to_quat(R)
    return quat_to_rotvec(q)


def quat_to_rotvec(q):
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    vn = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(vn, q[..., 0])
    small = vn < 1e-300
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return q[..., 1:] * scale[..., None]


def rotvec_to_quat(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half)[..., None], w * k[..., None]], axis=-1)


def quat_to_matrix(q):
    """Rotation matrices of quaternions ``(..., 4)``; exact for non-unit input."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    s = 2.0 / (w * w + x * x + y * y + z * z)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - s * (y * y + z * z)
    R[..., 0, 1] = s * (x * y - w * z)
    R[..., 0, 2] = s * (x * z + w * y)
    R[..., 1, 0] = s * (x * y + w * z)
    R[..., 1, 1] = 1.0 - s * (x * x + z * z)
    R[..., 1, 2] = s * (y * z - w * x)
    R[..., 2, 0] = s * (x * z - w * y)
    R[..., 2, 1] = s * (y * z + w * x)
    R[..., 2, 2] = 1.0 - s * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Unit quaternions (``w >= 0``) of rotation matrices ``(..., 3, 3)``.

    Uses the symmetric 4x4 eigen-formulation, so slightly non-orthonormal
    input (e.g. matrices printed to a few digits) yields the closest rotation.
    """
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    K = np.empty((m.shape[0], 4, 4))
    xx, xy, xz = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    yx, yy, yz = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    zx, zy, zz = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    K[:, 0, 0] = xx + yy + zz
    K[:, 0, 1] = K[:, 1, 0] = zy - yz
    K[:, 0, 2] = K[:, 2, 0] = xz - zx
    K[:, 0, 3] = K[:, 3, 0] = yx - xy
    K[:, 1, 1] = xx - yy - zz
    K[:, 1, 2] = K[:, 2, 1] = xy + yx
    K[:, 1, 3] = K[:, 3, 1] = xz + zx
    K[:, 2, 2] = yy - xx - zz
    K[:, 2, 3] = K[:, 3, 2] = yz + zy
    K[:, 3, 3] = zz - xx - yy
    _, vecs = np.linalg.eigh(K / 3.0)
    q = vecs[:, :, -1]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(R.shape[:-2] + (4,))


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def vec_flatten(m):
    """Stack the columns of a square matrix (or a stack of them) into a vector."""
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != m.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {m.shape}")
    d = m.shape[-1]
    return np.swapaxes(m, -1, -2).reshape(m.shape[:-2] + (d * d,))


def _canonical(q):
    q = np.asarray(q, dtype=float)
    for c in q:
        if c != 0.0:
            return -q if c < 0 else q
    return q


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quat:
    """Unit quaternion, scalar first, canonicalized to ``w >= 0``."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = [float(self.w), float(self.x), float(self.y), float(self.z)]
        if not all(math.isfinite(c) for c in q):
            raise ValueError("quaternion components must be finite")
        n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
        if n == 0.0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > NORM_TOLERANCE:
            q = [c / n for c in q]
        for c in q:
            if c != 0.0:
                if c < 0:
                    q = [-c for c in q]
                break
        for name, v in zip("wxyz", q):
            object.__setattr__(self, name, v)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        w, x, y, z = (float(v) for v in q)
        return cls(w, x, y, z)

    @classmethod
    def from_matrix(cls, R):
        return cls.from_array(matrix_to_quat(R))

    @classmethod
    def from_rotvec(cls, w):
        return cls.from_array(rotvec_to_quat(w))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_rotvec(axis * angle)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def canonicalize(self):
        return Quat.from_array(_canonical(self.as_array()))

    def normalized(self):
        q = self.as_array()
        return Quat.from_array(q / np.linalg.norm(q))

    def conjugate(self):
        return Quat(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def __mul__(self, other):
        if not isinstance(other, Quat):
            return NotImplemented
        aw, ax, ay, az = self.w, self.x, self.y, self.z
        bw, bx, by, bz = other.w, other.x, other.y, other.z
        return Quat(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )

    def matrix(self):
        # cached: poses are rotated many times during synchronization
        R = self.__dict__.get("_matrix")
        if R is None:
            w, x, y, z = self.w, self.x, self.y, self.z
            s = 2.0 / (w * w + x * x + y * y + z * z)
            R = np.array([
                [1.0 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
                [s * (x * y + w * z), 1.0 - s * (x * x + z * z), s * (y * z - w * x)],
                [s * (x * z - w * y), s * (y * z + w * x), 1.0 - s * (x * x + y * y)],
            ])
            object.__setattr__(self, "_matrix", R)
        return R.copy()

    def rotvec(self):
        return quat_to_rotvec(self.as_array())

    def angle(self):
        """Rotation angle in radians, in ``[0, pi]``."""
        return float(2.0 * math.atan2(math.sqrt(self.x**2 + self.y**2 + self.z**2), abs(self.w)))

    def rotate(self, v):
        return np.asarray(v, dtype=float) @ self.matrix().T


def _readonly(v, shape):
    a = np.array(v, dtype=float).reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Timestamped rigid transform."""

    t_stamp: float = 0.0
    rot: Quat = field(default_factory=Quat.identity)
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not isinstance(self.rot, Quat):
            raise TypeError("rot must be a Quat")
        object.__setattr__(self, "t_stamp", float(self.t_stamp))
        object.__setattr__(self, "trans", _readonly(self.trans, (3,)))

    @classmethod
    def identity(cls, t_stamp=0.0):
        return cls(t_stamp, Quat.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, t_stamp=0.0):
        T = np.asarray(T, dtype=float)
        return cls(t_stamp, Quat.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t, t_stamp=0.0):
        return cls(t_stamp, Quat.from_matrix(R), t)

    @property
    def rotation_matrix(self):
        return self.rot.matrix()

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rot.matrix()
        T[:3, 3] = self.trans
        return T

    def apply(self, points):
        """Map points ``(..., 3)`` from the child frame into the parent frame."""
        return np.asarray(points, dtype=float) @ self.rot.matrix().T + self.trans

    def with_stamp(self, t_stamp):
        return Pose(t_stamp, self.rot, self.trans)

    def __repr__(self):
        q = self.rot
        return (f"Pose(t={self.t_stamp!r}, q=({q.w:.6g}, {q.x:.6g}, {q.y:.6g}, {q.z:.6g}), "
                f"t=({self.trans[0]:.6g}, {self.trans[1]:.6g}, {self.trans[2]:.6g}))")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of a rectified camera (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise NonPositiveFocal(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise InvalidIntrinsics(f"image size must be positive ({self.width}x{self.height})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv):
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition ``a @ b``; keeps ``a``'s timestamp."""
    q = a.rot * b.rot
    n = math.sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z)
    t = a.rot.matrix() @ b.trans + a.trans
    return Pose(a.t_stamp, Quat(q.w / n, q.x / n, q.y / n, q.z / n), t)


def inverse(a: Pose) -> Pose:
    qi = a.rot.conjugate()
    return Pose(a.t_stamp, qi, -(qi.matrix() @ a.trans))


def relative(a: Pose, b: Pose) -> Pose:
    """``inverse(a) @ b``: motion from ``a`` to ``b`` expressed in ``a``."""
    q = a.rot.conjugate() * b.rot
    n = math.sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z)
    t = (b.trans - a.trans) @ a.rot.matrix()
    return Pose(a.t_stamp, Quat(q.w / n, q.x / n, q.y / n, q.z / n), t)


def slerp_array(a, b, alpha):
    """Vectorized :func:`slerp` on quaternion arrays ``(..., 4)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    b = np.where((np.sum(a * b, axis=-1) < 0)[..., None], -b, b)
    # angle between the 4-vectors, accurate near 0 where acos is not
    phi = 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))[..., None]
    small = phi < 1e-10
    s = np.sin(np.where(small, 1.0, phi))
    wa = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * phi) / s)
    wb = np.where(small, alpha, np.sin(alpha * phi) / s)
    q = wa * a + wb * b
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def slerp(q0: Quat, q1: Quat, alpha: float) -> Quat:
    """Geodesic interpolation along the shorter arc."""
    return Quat.from_array(slerp_array(q0.as_array(), q1.as_array(), alpha))


def relative_arrays(qa, ta, qb, tb):
    """Vectorized :func:`relative` on quaternion/translation arrays."""
    qa = np.asarray(qa, dtype=float)
    q = quat_multiply(qa * np.array([1.0, -1.0, -1.0, -1.0]), qb)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    t = np.einsum("...ji,...j->...i", quat_to_matrix(qa), np.asarray(tb) - np.asarray(ta))
    return q, t


def interpolate_pose(p0: Pose, p1: Pose, t: float) -> Pose:
    """Pose at time ``t`` from the bracketing poses (lerp + slerp), no extrapolation."""
    t0, t1 = p0.t_stamp, p1.t_stamp
    if t1 - t0 < 1e-9:
        raise DegenerateInterval(f"interval [{t0}, {t1}] too short to interpolate")
    if t < t0 or t > t1:
        raise OutOfRange(f"t={t} outside [{t0}, {t1}]")
    if t == t0:
        return p0.with_stamp(t)
    if t == t1:
        return p1.with_stamp(t)
    alpha = (t - t0) / (t1 - t0)
    trans = (1.0 - alpha) * p0.trans + alpha * p1.trans
    return Pose(t, slerp(p0.rot, p1.rot, alpha), trans)


def project_points(points, k: CameraIntrinsics, R, t, depth_epsilon=DEPTH_EPSILON):
    """Vectorized pinhole projection.

    Returns ``(uv, valid)``; rows with depth at or below ``depth_epsilon`` are
    flagged invalid and their ``uv`` is NaN.
    """
    X = np.asarray(points, dtype=float) @ np.asarray(R).T + np.asarray(t)
    z = X[..., 2]
    valid = z > depth_epsilon
    zs = np.where(valid, z, np.nan)
    uv = np.stack([k.fx * X[..., 0] / zs + k.cx, k.fy * X[..., 1] / zs + k.cy], axis=-1)
    return uv, valid


def project(p, k: CameraIntrinsics, t_calib: Pose, depth_epsilon=DEPTH_EPSILON):
    """Pixel coordinates of LiDAR point(s) ``p`` under extrinsics ``t_calib``."""
    uv, valid = project_points(p, k, t_calib.rot.matrix(), t_calib.trans, depth_epsilon)
    if not np.all(valid):
        raise BehindCamera(f"point depth at or below {depth_epsilon} m")
    return uv


def rotation_angle_between(q0: Quat, q1: Quat) -> float:
    """Geodesic distance in radians."""
    return (q0.conjugate() * q1).angle()
