"""Rigid-body transforms and the pinhole camera model.

Conventions
-----------
``RigidTransform`` named ``a_from_b`` maps points expressed in frame ``b``
into frame ``a``: ``p_a = R p_b + t``. ``compose(a, b)`` applies ``b`` first.
Quaternions are stored in ``(x, y, z, w)`` order. Euler angles follow the
intrinsic Z-Y-X (yaw, pitch, roll) convention, so ``R = Rz(yaw) Ry(pitch)
Rx(roll)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from .errors import BehindCameraError, ConfigError, NonPositiveDepthError

UNDISTORT_ITERATIONS = 10
UNDISTORT_TOL = 1e-8


def _quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    # canonical hemisphere keeps equality checks meaningful
    if q[3] < 0.0:
        q = -q
    return q


def _quat_mul(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s,
             0.25 * s, (m[1, 0] - m[0, 1]) / s]
    return _quat_normalize(q)


def project_to_so3(m):
    """Closest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotvec_to_matrix(w):
    """Rodrigues formula for an axis-angle vector (radians)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def rotation_angle_deg(r):
    """Geodesic angle of a rotation matrix, degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    # acos is ill-conditioned near 0; use the antisymmetric part there
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return math.degrees(math.atan2(s, c))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion stored as unit quaternion + translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape == (4, 4):
            return cls(matrix_to_quat(project_to_so3(m[:3, :3])), m[:3, 3])
        if m.shape == (3, 3):
            return cls(matrix_to_quat(project_to_so3(m)), np.zeros(3))
        raise ValueError(f"expected 3x3 or 4x4 matrix, got {m.shape}")

    @classmethod
    def from_rt(cls, r, t):
        return cls(matrix_to_quat(project_to_so3(r)), t)

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(q=[{q}], t=[{t}])"

    def to_dict(self):
        e = to_euler(self)
        return {
            "translation": [float(v) for v in self.translation],
            "quaternion_xyzw": [float(v) for v in self.rotation],
            "euler": e.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if "matrix" in d:
            return cls.from_matrix(np.asarray(d["matrix"], dtype=float))
        if "quaternion_xyzw" in d:
            return cls(np.asarray(d["quaternion_xyzw"], dtype=float), d.get("translation", [0, 0, 0]))
        if "euler" in d:
            return from_euler(EulerPose.from_dict(d["euler"]))
        raise ConfigError("transform needs 'matrix', 'quaternion_xyzw' or 'euler'")


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    q = _quat_mul(a.rotation, b.rotation)
    t = a.rotation_matrix @ b.translation + a.translation
    return RigidTransform(q, t)


def invert(t: RigidTransform) -> RigidTransform:
    q = t.rotation * np.array([-1.0, -1.0, -1.0, 1.0])
    return RigidTransform(q, -(quat_to_matrix(q) @ t.translation))


def apply(t: RigidTransform, p) -> np.ndarray:
    """Apply ``t`` to one point ``(3,)`` or a batch ``(N, 3)``."""
    p = np.asarray(p, dtype=float)
    return p @ t.rotation_matrix.T + t.translation


def interpolate(a: RigidTransform, b: RigidTransform, alpha: float) -> RigidTransform:
    """Linear translation / spherical rotation blend, ``alpha`` in [0, 1]."""
    qa, qb = a.rotation, b.rotation
    d = float(np.dot(qa, qb))
    if d < 0.0:
        qb, d = -qb, -d
    if d > 0.9995:
        q = qa + alpha * (qb - qa)
    else:
        theta = math.acos(d)
        q = (math.sin((1 - alpha) * theta) * qa + math.sin(alpha * theta) * qb) / math.sin(theta)
    t = (1 - alpha) * a.translation + alpha * b.translation
    return RigidTransform(q, t)


def _wrap_deg(a):
    return a - 360.0 * math.ceil((a - 180.0) / 360.0)


@dataclass(frozen=True)
class EulerPose:
    """Pose in reporting form: meters and degrees, intrinsic Z-Y-X."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, _wrap_deg(float(getattr(self, name))))

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in ("x", "y", "z", "roll", "pitch", "yaw")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d.get(k, 0.0)) for k in ("x", "y", "z", "roll", "pitch", "yaw")})


def to_euler(t: RigidTransform) -> EulerPose:
    """Decompose into yaw-pitch-roll.

    At gimbal lock (``|pitch| = 90``) yaw is set to 0 and roll absorbs the
    remaining rotation about the shared axis.
    """
    r = t.rotation_matrix
    cp = math.hypot(r[0, 0], r[1, 0])
    pitch = math.atan2(-r[2, 0], cp)
    if cp > 1e-9:
        yaw = math.atan2(r[1, 0], r[0, 0])
        roll = math.atan2(r[2, 1], r[2, 2])
    else:
        yaw = 0.0
        if r[2, 0] < 0:
            roll = math.atan2(r[0, 1], r[1, 1])
        else:
            roll = math.atan2(-r[0, 1], r[1, 1])
    x, y, z = (float(v) for v in t.translation)
    return EulerPose(x, y, z, math.degrees(roll), math.degrees(pitch), math.degrees(yaw))


def euler_matrix(roll_deg, pitch_deg, yaw_deg):
    cr, sr = math.cos(math.radians(roll_deg)), math.sin(math.radians(roll_deg))
    cp, sp = math.cos(math.radians(pitch_deg)), math.sin(math.radians(pitch_deg))
    cy, sy = math.cos(math.radians(yaw_deg)), math.sin(math.radians(yaw_deg))
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def from_euler(e: EulerPose) -> RigidTransform:
    return RigidTransform.from_rt(euler_matrix(e.roll, e.pitch, e.yaw), [e.x, e.y, e.z])


class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with plumb-bob (k1, k2, p1, p2) distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive", "intrinsics")
        if not (self.width >= 1 and self.height >= 1):
            raise ConfigError("image size must be at least 1x1", "intrinsics")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self):
        return any((self.k1, self.k2, self.p1, self.p2))

    def to_dict(self):
        d = {k: float(getattr(self, k)) for k in ("fx", "fy", "cx", "cy")}
        d.update(width=int(self.width), height=int(self.height))
        d.update({k: float(getattr(self, k)) for k in ("k1", "k2", "p1", "p2")})
        return d

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in d]
        if missing:
            raise ConfigError(f"missing keys {missing}", "intrinsics")
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
            *(float(d.get(k, 0.0)) for k in ("k1", "k2", "p1", "p2")),
        )


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path) as f:
        return CameraIntrinsics.from_dict(yaml.safe_load(f))


def save_intrinsics(k: CameraIntrinsics, path):
    Path(path).write_text(json.dumps(k.to_dict(), indent=2) + "\n")


def distort(k: CameraIntrinsics, xn):
    """Apply lens distortion to normalized coordinates ``(..., 2)``."""
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
    xd = x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_jacobian(k: CameraIntrinsics, xn):
    """d(distorted)/d(normalized), shape ``(..., 2, 2)``."""
    x, y = xn[..., 0], xn[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
    drad = 2.0 * k.k1 + 4.0 * k.k2 * r2  # d(radial)/d(r2) * 2
    j = np.empty(xn.shape[:-1] + (2, 2))
    j[..., 0, 0] = radial + x * drad * x + 2.0 * k.p1 * y + 6.0 * k.p2 * x
    j[..., 0, 1] = x * drad * y + 2.0 * k.p1 * x + 2.0 * k.p2 * y
    j[..., 1, 0] = y * drad * x + 2.0 * k.p1 * x + 2.0 * k.p2 * y
    j[..., 1, 1] = radial + y * drad * y + 6.0 * k.p1 * y + 2.0 * k.p2 * x
    return j


def undistort(k: CameraIntrinsics, xd):
    """Invert :func:`distort` for normalized coordinates ``(..., 2)``.

    Fixed-point iteration (10 steps) followed by Newton polishing for
    points where the fixed point has not reached ``UNDISTORT_TOL``.
    """
    xd = np.asarray(xd, dtype=float)
    if not k.has_distortion:
        return xd.copy()
    xn = xd.copy()
    for _ in range(UNDISTORT_ITERATIONS):
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + k.k1 * r2 + k.k2 * r2 * r2
        dx = 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x)
        dy = k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y
        xn = np.stack([(xd[..., 0] - dx) / radial, (xd[..., 1] - dy) / radial], axis=-1)
    for _ in range(20):
        res = distort(k, xn) - xd
        if np.all(np.abs(res) < 1e-15):
            break
        step = np.linalg.solve(distort_jacobian(k, xn), res[..., None])[..., 0]
        xn = xn - step
    return xn


def project(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Camera-frame point(s) to pixel(s); raises if any point has z <= 0."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0.0):
        raise BehindCameraError("point at or behind the camera plane (z <= 0)")
    return project_unchecked(k, p)


def project_unchecked(k: CameraIntrinsics, p):
    p = np.asarray(p, dtype=float)
    xn = p[..., :2] / p[..., 2:3]
    if k.has_distortion:
        xn = distort(k, xn)
    return np.stack([k.fx * xn[..., 0] + k.cx, k.fy * xn[..., 1] + k.cy], axis=-1)


def pixel_to_normalized(k: CameraIntrinsics, px):
    px = np.asarray(px, dtype=float)
    xd = np.stack([(px[..., 0] - k.cx) / k.fx, (px[..., 1] - k.cy) / k.fy], axis=-1)
    return undistort(k, xd)


def unproject(k: CameraIntrinsics, px, depth) -> np.ndarray:
    """Pixel(s) and z-depth (meters) to camera-frame point(s)."""
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0.0):
        raise NonPositiveDepthError("depth must be positive")
    xn = pixel_to_normalized(k, px)
    d = depth[..., None]
    return np.concatenate([xn * d, d], axis=-1)
