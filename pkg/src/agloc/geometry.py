"""Rigid-body transforms, the 4-DoF relative pose, pinhole projection and
the Huber robust norm.

Conventions used throughout the package:

- World frames are right-handed with z up (maps are gravity aligned), and
  yaw is measured counterclockwise about +z starting from +x.
- Camera frames follow the usual optical convention: x right, y down,
  z forward.
- Quaternions are stored as (w, x, y, z), unit norm, canonicalized to
  w >= 0 so that pose comparisons are unambiguous.
- T_AB maps coordinates expressed in frame B into frame A:
  p_A = R_AB p_B + t_AB.

All geometry values are immutable after construction and safe to share
between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AglocError

_UNIT_TOL = 1e-9


class NonPositiveDepth(AglocError):
    """Point is behind or on the camera plane (z <= ~0)."""


class OutOfImage(AglocError):
    """Pixel lies outside [0, width) x [0, height)."""


class GimbalDegenerate(AglocError):
    """Yaw is undefined: the rotated x-axis is (anti)parallel to z."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    if w <= -math.pi:
        w = math.pi
    return w


# --- quaternion helpers (w, x, y, z layout) ---

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion."""
    w = q[0]
    v = q[1:]
    t = 2.0 * np.cross(v, p)
    return p + w * t + np.cross(v, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return _canonicalize(q)


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> unit quaternion."""
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
        return _canonicalize(q)
    axis = w / angle
    half = 0.5 * angle
    q = np.concatenate(([math.cos(half)], math.sin(half) * axis))
    return _canonicalize(q)


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Logarithm map, inverse of quat_from_rotvec; angle in [0, pi]."""
    w = min(1.0, max(-1.0, float(q[0])))
    v = np.asarray(q[1:], dtype=float)
    if w < 0:
        w, v = -w, -v
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, w)
    return v * (angle / s)


def quat_slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between two unit quaternions, u in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        q = a + u * (b - a)
        return _canonicalize(q / np.linalg.norm(q))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    q = (math.sin((1.0 - u) * theta) / s) * a + (math.sin(u * theta) / s) * b
    return _canonicalize(q / np.linalg.norm(q))


def _canonicalize(q: np.ndarray) -> np.ndarray:
    if q[0] < 0 or (q[0] == 0 and _first_nonzero_negative(q)):
        q = -q
    return q


def _first_nonzero_negative(q: np.ndarray) -> bool:
    for v in q[1:]:
        if v != 0:
            return v < 0
    return False


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose as a unit quaternion plus a translation in meters."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        n = float(np.linalg.norm(q))
        if not math.isfinite(n) or n < 1e-6:
            raise ValueError("quaternion norm too far from 1 to normalize")
        q = _canonicalize(q / n)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rotvec(cls, w, t) -> "RigidTransform":
        return cls(quat_from_rotvec(np.asarray(w, dtype=float)),
                   np.asarray(t, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a . b: applies b first, then a."""
    return RigidTransform(quat_multiply(a.q, b.q), a.t + quat_rotate(a.q, b.t))


def invert(t: RigidTransform) -> RigidTransform:
    qc = quat_conjugate(t.q)
    return RigidTransform(qc, -quat_rotate(qc, t.t))


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return quat_rotate(t.q, np.asarray(p, dtype=float)) + t.t


def transform_points(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    """Vectorized transform of an (N, 3) array."""
    pts = np.asarray(pts, dtype=float)
    return pts @ quat_to_matrix(t.q).T + t.t


def yaw_of(t: RigidTransform) -> float:
    """Rotation angle about z, read off the image of the x-axis.

    Raises GimbalDegenerate when that image is within 1e-9 of +-z and the
    xy projection vanishes.
    """
    ex = quat_rotate(t.q, np.array([1.0, 0.0, 0.0]))
    if math.hypot(ex[0], ex[1]) < 1e-9:
        raise GimbalDegenerate("rotated x-axis is parallel to z; yaw undefined")
    return math.atan2(ex[1], ex[0])


@dataclass(frozen=True)
class RelPose4:
    """4-DoF transform: translation plus yaw about z (gravity-aligned maps).

    yaw is wrapped to (-pi, pi] at construction.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        t.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def to_rigid(self) -> RigidTransform:
        half = 0.5 * self.yaw
        return RigidTransform(np.array([math.cos(half), 0.0, 0.0, math.sin(half)]),
                              self.t)

    @classmethod
    def from_rigid(cls, t: RigidTransform) -> "RelPose4":
        """Project onto the yaw-only manifold, dropping roll and pitch."""
        return cls(t.t, yaw_of(t))

    def inverse(self) -> "RelPose4":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        tx, ty, tz = self.t
        return RelPose4(np.array([-(c * tx + s * ty), -(-s * tx + c * ty), -tz]),
                        -self.yaw)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def project(k: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates."""
    p = np.asarray(p_cam, dtype=float)
    if p[2] <= 1e-9:
        raise NonPositiveDepth(f"depth {p[2]:.3g} <= 1e-9")
    return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])


def project_many(k: CameraIntrinsics, pts: np.ndarray):
    """Vectorized projection; returns (pixels (N,2), valid mask) without raising."""
    pts = np.asarray(pts, dtype=float)
    z = pts[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    px = np.stack([k.fx * pts[:, 0] / zs + k.cx, k.fy * pts[:, 1] / zs + k.cy], axis=1)
    return px, valid


def backproject_ray(k: CameraIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Unit direction in the camera frame through a pixel; z > 0."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise OutOfImage(f"pixel ({u:.1f}, {v:.1f}) outside {k.width}x{k.height}")
    d = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    return d / np.linalg.norm(d)


@dataclass(frozen=True)
class RobustNorm:
    """Robust loss applied to reprojection residuals. Only Huber for now."""

    kind: str = "huber"
    threshold: float = 2.0

    def __post_init__(self):
        if self.kind != "huber":
            raise ValueError(f"unknown robust norm kind {self.kind!r}")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


def robust_eval(norm: RobustNorm, r: np.ndarray) -> tuple[float, float]:
    """Huber cost and IRLS weight for a residual vector.

    cost = 0.5*||r||^2 inside the threshold, delta*(||r|| - delta/2) outside;
    weight is cost'(||r||)/||r|| (1 inside, delta/||r|| outside).
    """
    n = float(np.linalg.norm(np.asarray(r, dtype=float)))
    d = norm.threshold
    if n <= d:
        return 0.5 * n * n, 1.0
    return d * (n - 0.5 * d), d / n


def huber_weights(norm: RobustNorm, norms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Huber: (costs, IRLS weights) for an array of residual norms."""
    norms = np.asarray(norms, dtype=float)
    d = norm.threshold
    out = norms > d
    costs = np.where(out, d * (norms - 0.5 * d), 0.5 * norms * norms)
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.where(out, d / np.maximum(norms, 1e-300), 1.0)
    return costs, weights
