"""Quaternion, rotation and pose primitives.

All quaternions are stored scalar-last, ``(x, y, z, w)``, both internally and
in every serialized format. Functions broadcast over leading dimensions where
that costs nothing extra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_NORM = 1e-12


class DegenerateIncrementWarning(RuntimeWarning):
    """An additive quaternion update collapsed to (near) zero norm."""


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_product(a, b):
    """Raw Hamilton product ``a ⊗ b`` without renormalization.

    Needed for products involving pure (non-unit) quaternions such as
    ``[ω, 0] ⊗ q``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_multiply(a, b):
    """Hamilton product of two unit quaternions, renormalized."""
    return quat_normalize(quat_product(a, b))


def pure_quat(v):
    v = np.asarray(v, dtype=float)
    return np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    m[..., 0, 1] = 2.0 * (x * y - z * w)
    m[..., 0, 2] = 2.0 * (x * z + y * w)
    m[..., 1, 0] = 2.0 * (x * y + z * w)
    m[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    m[..., 1, 2] = 2.0 * (y * z - x * w)
    m[..., 2, 0] = 2.0 * (x * z - y * w)
    m[..., 2, 1] = 2.0 * (y * z + x * w)
    m[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return m


def quat_from_matrix(m) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(m, dtype=float)).as_quat()


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.append(np.sin(half) * axis, np.cos(half))


def quat_from_rotvec(rv) -> np.ndarray:
    """Exponential map from a rotation vector (axis * angle)."""
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(θ/2)/θ with its Taylor expansion near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([k * rv, np.cos(half)], axis=-1)


def quat_to_rotvec(q) -> np.ndarray:
    """Logarithm map; the returned angle lies in [0, π]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    s = np.linalg.norm(q[..., :3], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., 3:4])
    small = s < 1e-12
    k = np.where(small, 2.0, angle / np.where(small, 1.0, s))
    return k * q[..., :3]


def yaw_of(q) -> float:
    """Heading angle about +z of a rotation."""
    x, y, z, w = np.asarray(q, dtype=float)
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def wrap_angle(a):
    """Wrap to (-π, π]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return float(out) if out.ndim == 0 else out


def apply_angular_delta(q, dq):
    """Return ``normalize(q + dq)``.

    If the sum is degenerate (norm below 1e-12) the input is returned
    unchanged and a :class:`DegenerateIncrementWarning` is emitted.
    """
    q = np.asarray(q, dtype=float)
    s = q + np.asarray(dq, dtype=float)
    n = np.linalg.norm(s)
    if n < DEGENERATE_NORM:
        warnings.warn("degenerate quaternion increment ignored", DegenerateIncrementWarning, stacklevel=2)
        return q.copy()
    return s / n


def geodesic_angle(a, b):
    """Rotation angle in [0, π] between two unit quaternions (sign invariant)."""
    rel = quat_product(quat_conjugate(a), b)
    s = np.linalg.norm(rel[..., :3], axis=-1)
    return 2.0 * np.arctan2(s, np.abs(rel[..., 3]))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class Pose:
    """Rigid transform ``x -> R(orientation) x + position``."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def apply(self, points):
        return quat_rotate(self.orientation, points) + self.position

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.apply(other.position), quat_multiply(self.orientation, other.orientation))

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.orientation)
        return Pose(-quat_rotate(qi, self.position), qi)

    @classmethod
    def from_rotvec(cls, translation, rotvec) -> "Pose":
        return cls(translation, quat_from_rotvec(rotvec))
