"""SE(3) pose algebra on unit quaternions.

Conventions:
    - Quaternions are stored (w, x, y, z), Hamilton product.
    - ``Pose(R, t)`` maps a point p expressed in the child frame to
      ``R p + t`` in the parent frame; ``compose(a, b)`` applies b, then a.
    - Euler angles are intrinsic Z-Y-X (yaw, then pitch, then roll), so
      ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
    - Serialized poses are ``tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_NORM_EPS = 1e-300


def _normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if not np.isfinite(n) or n < _NORM_EPS:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) wxyz arrays."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(..., 4) wxyz -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (yy + zz)
    m[..., 0, 1] = 2 * (xy - wz)
    m[..., 0, 2] = 2 * (xz + wy)
    m[..., 1, 0] = 2 * (xy + wz)
    m[..., 1, 1] = 1 - 2 * (xx + zz)
    m[..., 1, 2] = 2 * (yz - wx)
    m[..., 2, 0] = 2 * (xz - wy)
    m[..., 2, 1] = 2 * (yz + wx)
    m[..., 2, 2] = 1 - 2 * (xx + yy)
    return m


def quat_slerp(q0: np.ndarray, q1: np.ndarray, s: np.ndarray | float) -> np.ndarray:
    """Shortest-arc slerp between wxyz quaternions, vectorized over s and rows."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    s = np.asarray(s, dtype=float)
    dot = np.sum(q0 * q1, axis=-1)
    q1 = np.where((dot < 0)[..., None], -q1, q1)
    dot = np.abs(dot)
    dot = np.minimum(dot, 1.0)
    theta = np.arccos(dot)
    sin_t = np.sin(theta)
    small = sin_t < 1e-9
    safe = np.where(small, 1.0, sin_t)
    w0 = np.where(small, 1.0 - s, np.sin((1.0 - s) * theta) / safe)
    w1 = np.where(small, s, np.sin(s * theta) / safe)
    out = w0[..., None] * q0 + w1[..., None] * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


class Rotation:
    """Immutable 3D rotation backed by a unit quaternion."""

    __slots__ = ("_q",)

    def __init__(self, wxyz) -> None:
        q = np.array(wxyz, dtype=float).reshape(4)
        q = _normalize(q)
        q.flags.writeable = False
        object.__setattr__(self, "_q", q)

    def __setattr__(self, name, value):
        raise AttributeError("Rotation is immutable")

    def __reduce__(self):
        return (Rotation, (self._q.copy(),))

    @classmethod
    def identity(cls) -> Rotation:
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_xyzw(cls, xyzw) -> Rotation:
        x, y, z, w = xyzw
        return cls((w, x, y, z))

    @classmethod
    def from_rotvec(cls, v) -> Rotation:
        v = np.asarray(v, dtype=float)
        angle = math.sqrt(float(v @ v))
        if angle < 1e-12:
            # second-order series keeps exp/log consistent near zero
            return cls((1.0 - angle * angle / 8.0, *(0.5 * v)))
        axis = v / angle
        h = 0.5 * angle
        return cls((math.cos(h), *(math.sin(h) * axis)))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Rotation:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        return cls.from_rotvec(axis * angle)

    @classmethod
    def from_matrix(cls, m) -> Rotation:
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(q)

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> Rotation:
        cr, sr = math.cos(roll / 2), math.sin(roll / 2)
        cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
        cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
        return cls(
            (
                cy * cp * cr + sy * sp * sr,
                cy * cp * sr - sy * sp * cr,
                cy * sp * cr + sy * cp * sr,
                sy * cp * cr - cy * sp * sr,
            )
        )

    @property
    def wxyz(self) -> np.ndarray:
        return self._q

    @property
    def xyzw(self) -> np.ndarray:
        w, x, y, z = self._q
        return np.array([x, y, z, w])

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self._q)

    def as_rotvec(self) -> np.ndarray:
        q = self._q if self._q[0] >= 0 else -self._q
        v = q[1:]
        s = math.sqrt(float(v @ v))
        if s < 1e-12:
            return 2.0 * v
        angle = 2.0 * math.atan2(s, q[0])
        return v * (angle / s)

    def to_rpy(self) -> tuple[float, float, float]:
        """(roll, pitch, yaw) in radians. Precision degrades near pitch = +-pi/2."""
        w, x, y, z = self._q
        roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
        sp = 2 * (w * y - z * x)
        pitch = math.asin(max(-1.0, min(1.0, sp)))
        yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
        return roll, pitch, yaw

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        w = min(1.0, abs(float(self._q[0])))
        s = math.sqrt(float(self._q[1:] @ self._q[1:]))
        return 2.0 * math.atan2(s, w)

    def inverse(self) -> Rotation:
        w, x, y, z = self._q
        return Rotation((w, -x, -y, -z))

    def __mul__(self, other: Rotation) -> Rotation:
        return Rotation(quat_mul(self._q, other._q))

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v @ self.as_matrix().T

    def slerp(self, other: Rotation, s: float) -> Rotation:
        return Rotation(quat_slerp(self._q, other._q, s))

    def angle_to(self, other: Rotation) -> float:
        return (self.inverse() * other).angle()

    def isclose(self, other: Rotation, atol: float = 1e-9) -> bool:
        return self.angle_to(other) <= atol

    def __eq__(self, other) -> bool:
        if not isinstance(other, Rotation):
            return NotImplemented
        # q and -q are the same rotation
        return bool(np.array_equal(self._q, other._q) or np.array_equal(self._q, -other._q))

    def __hash__(self):
        # canonical sign: first nonzero component positive; +0.0 folds -0.0
        lead = self._q[np.flatnonzero(self._q)[0]]
        q = (self._q if lead > 0 else -self._q) + 0.0
        return hash(q.tobytes())

    def __repr__(self) -> str:
        return "Rotation(wxyz=[{:.6g}, {:.6g}, {:.6g}, {:.6g}])".format(*self._q)


class Pose:
    """Immutable rigid transform (rotation, translation in meters)."""

    __slots__ = ("_rotation", "_translation")

    def __init__(self, rotation: Rotation | None = None, translation=(0.0, 0.0, 0.0)) -> None:
        t = np.array(translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t!r}")
        t.flags.writeable = False
        object.__setattr__(self, "_rotation", rotation if rotation is not None else Rotation.identity())
        object.__setattr__(self, "_translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __reduce__(self):
        return (Pose, (self._rotation, self._translation.copy()))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_array7(cls, a) -> Pose:
        """From ``tx ty tz qx qy qz qw``."""
        a = np.asarray(a, dtype=float).reshape(7)
        return cls(Rotation.from_xyzw(a[3:]), a[:3])

    @classmethod
    def from_rpy(cls, x: float, y: float, z: float, roll: float, pitch: float, yaw: float) -> Pose:
        return cls(Rotation.from_rpy(roll, pitch, yaw), (x, y, z))

    @classmethod
    def exp(cls, delta) -> Pose:
        """Pose(Exp(phi), rho) for ``delta = [rho, phi]``.

        Left-multiplying by this perturbation moves a world point p to
        ``Exp(phi) p + rho``, the parameterization the GICP solver uses.
        """
        delta = np.asarray(delta, dtype=float)
        return cls(Rotation.from_rotvec(delta[3:]), delta[:3])

    @property
    def rotation(self) -> Rotation:
        return self._rotation

    @property
    def translation(self) -> np.ndarray:
        return self._translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self._rotation.as_matrix()
        m[:3, 3] = self._translation
        return m

    def as_array7(self) -> np.ndarray:
        return np.concatenate([self._translation, self._rotation.xyzw])

    def inverse(self) -> Pose:
        rinv = self._rotation.inverse()
        return Pose(rinv, -rinv.apply(self._translation))

    def __matmul__(self, other: Pose) -> Pose:
        return Pose(self._rotation * other._rotation, self._rotation.apply(other._translation) + self._translation)

    def apply(self, points) -> np.ndarray:
        """Transform (3,) or (N, 3) points."""
        points = np.asarray(points, dtype=float)
        return points @ self._rotation.as_matrix().T + self._translation

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self._translation))

    def rotation_angle(self) -> float:
        return self._rotation.angle()

    def isclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return (
            float(np.linalg.norm(self._translation - other._translation)) <= atol
            and self._rotation.isclose(other._rotation, atol)
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return self._rotation == other._rotation and bool(np.array_equal(self._translation, other._translation))

    def __hash__(self):
        return hash((self._rotation, self._translation.tobytes()))

    def __repr__(self) -> str:
        r, p, y = self._rotation.to_rpy()
        t = self._translation
        return (
            f"Pose(t=[{t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}], "
            f"rpy_deg=[{math.degrees(r):.4g}, {math.degrees(p):.4g}, {math.degrees(y):.4g}])"
        )


@dataclass(frozen=True)
class StampedPose:
    time: float
    pose: Pose

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise ValueError(f"stamp must be finite and non-negative, got {self.time}")


def translate(x: float, y: float, z: float) -> Pose:
    return Pose(Rotation.identity(), (x, y, z))


def compose(a: Pose, b: Pose) -> Pose:
    """Apply b, then a."""
    return a @ b


def inverse(p: Pose) -> Pose:
    return p.inverse()


def relative(a: Pose, b: Pose) -> Pose:
    """``inverse(a) @ b``: pose of b expressed in a's frame."""
    return a.inverse() @ b


def to_rpy(r: Rotation) -> tuple[float, float, float]:
    return r.to_rpy()


def from_rpy(roll: float, pitch: float, yaw: float) -> Rotation:
    return Rotation.from_rpy(roll, pitch, yaw)


def interpolate(a: StampedPose, b: StampedPose, t: float) -> Pose:
    """Linear translation + shortest-arc slerp rotation between two stamped poses."""
    if not a.time < b.time:
        if a.time == b.time:
            raise ValueError(f"degenerate interpolation interval at t={a.time}")
        raise ValueError(f"interval reversed: {a.time} > {b.time}")
    if not a.time <= t <= b.time:
        raise ValueError(f"t={t} outside [{a.time}, {b.time}]")
    if t == a.time:
        return a.pose
    if t == b.time:
        return b.pose
    s = (t - a.time) / (b.time - a.time)
    trans = (1.0 - s) * a.pose.translation + s * b.pose.translation
    return Pose(a.pose.rotation.slerp(b.pose.rotation, s), trans)


def pose_distance(a: Pose, b: Pose) -> float:
    """Translation distance plus rotation angle (radians); a crude metric for continuity checks."""
    return float(np.linalg.norm(a.translation - b.translation)) + a.rotation.angle_to(b.rotation)
