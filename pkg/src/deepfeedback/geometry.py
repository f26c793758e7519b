"""Rotations, rigid transforms and error metrics.

Conventions
-----------
- Quaternions are stored scalar-first, ``(w, x, y, z)``, as float64 arrays
  whose last axis has length 4. Every function accepts batches.
- ``q`` and ``-q`` describe the same rotation; angular metrics use ``|q1.q2|``.
- Euler angles are radians in the intrinsic XYZ convention, i.e. the rotation
  matrix is ``Rx(a) @ Ry(b) @ Rz(c)``.
- Angles passed to :func:`axis_angle_to_quat` and returned by
  :func:`quat_angle` are in degrees.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


class DegenerateRotationError(ValueError):
    """Raised for zero-norm quaternions or zero rotation axes."""


class NonUnitQuaternionError(ValueError):
    """Raised when a unit quaternion is required but not supplied."""


def _as_quat(q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion arrays need a trailing axis of 4, got shape {q.shape}")
    return q


def _check_unit(q, name="q"):
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise NonUnitQuaternionError(
            f"{name} must be unit length (|norm-1| <= {UNIT_TOL}), got norms {np.atleast_1d(n)[:4]}"
        )


def identity_quat(n=None):
    """Identity rotation, or ``n`` stacked copies of it."""
    if n is None:
        return np.array([1.0, 0.0, 0.0, 0.0])
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_normalize(q):
    """Scale ``q`` to unit length.

    Raises
    ------
    DegenerateRotationError
        If any quaternion has zero norm.
    """
    q = _as_quat(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0) or not np.all(np.isfinite(n)):
        raise DegenerateRotationError("cannot normalize a zero-norm quaternion")
    return q / n


def quat_conj(q):
    q = _as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(q1, q2):
    """Hamilton product ``q1 * q2`` (apply ``q2`` first, then ``q1``)."""
    q1 = _as_quat(q1)
    q2 = _as_quat(q2)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_matrix(q):
    """Rotation matrices for unit quaternions, shape ``(..., 3, 3)``."""
    q = _as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_rotate(q, v, check=True):
    """Rotate vectors ``v`` by unit quaternions ``q``.

    Uses ``v' = v + 2w (u x v) + 2 u x (u x v)`` with ``u`` the vector part,
    broadcasting over leading axes.
    """
    q = _as_quat(q)
    if check:
        _check_unit(q)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_angle(q1, q2):
    """Angle in degrees of the relative rotation between ``q1`` and ``q2``.

    Invariant to the sign of either argument; the result lies in [0, 180].
    """
    q1 = _as_quat(q1)
    q2 = _as_quat(q2)
    _check_unit(q1, "q1")
    _check_unit(q2, "q2")
    d = np.abs(np.sum(q1 * q2, axis=-1))
    return np.degrees(2.0 * np.arccos(np.clip(d, 0.0, 1.0)))


def axis_angle_to_quat(axis, angle_deg):
    """Quaternion for a rotation of ``angle_deg`` degrees about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateRotationError("rotation axis must be non-zero")
    half = 0.5 * np.radians(np.asarray(angle_deg, dtype=np.float64))[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis / n], axis=-1)


def quat_to_axis_angle(q):
    """Inverse of :func:`axis_angle_to_quat`; angle in degrees within [0, 360)."""
    q = quat_normalize(q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    angle = np.degrees(2.0 * np.arctan2(s, q[..., 0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        axis = np.where(s[..., None] > 0, q[..., 1:] / s[..., None], np.array([1.0, 0.0, 0.0]))
    return axis, angle


def _axis_quat(axis_index, angles):
    angles = np.asarray(angles, dtype=np.float64)
    q = np.zeros(angles.shape + (4,))
    q[..., 0] = np.cos(0.5 * angles)
    q[..., 1 + axis_index] = np.sin(0.5 * angles)
    return q


def quat_from_euler(angles, order="XYZ"):
    """Compose intrinsic Euler angles (radians) into a quaternion.

    ``order`` lists the rotation axes outermost first, so ``"XYZ"`` yields
    ``Rx(a) Ry(b) Rz(c)``.
    """
    angles = np.asarray(angles, dtype=np.float64)
    q = identity_quat() * np.ones(angles.shape[:-1] + (1,))
    for i, ax in enumerate(order.upper()):
        q = quat_mul(q, _axis_quat("XYZ".index(ax), angles[..., i]))
    return q


def euler_from_quat(q):
    """Intrinsic XYZ Euler angles (radians) of unit quaternions.

    At gimbal lock (``|pitch| = 90``) the arcsine argument is clamped and the
    third angle is set to zero.
    """
    q = _as_quat(q)
    _check_unit(q)
    m = quat_to_matrix(q)
    sb = np.clip(m[..., 0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    locked = np.abs(sb) > 1.0 - 1e-12
    a = np.where(locked, np.arctan2(m[..., 2, 1], m[..., 1, 1]), np.arctan2(-m[..., 1, 2], m[..., 2, 2]))
    c = np.where(locked, 0.0, np.arctan2(-m[..., 0, 1], m[..., 0, 0]))
    return np.stack([a, b, c], axis=-1)


def random_unit_quat(rng, n=None):
    """Uniformly distributed rotations (normalized 4-D Gaussians)."""
    shape = (4,) if n is None else (n, 4)
    q = rng.standard_normal(shape)
    return quat_normalize(q)


def random_unit_vector(rng, n=None):
    shape = (3,) if n is None else (n, 3)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Pose6DoF:
    """Rigid pose: unit rotation followed by translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(identity_quat(), np.zeros(3))

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:4].copy(), x[4:7].copy())

    def to_vector(self):
        return np.concatenate([self.rotation, self.translation])

    def normalized(self):
        return Pose6DoF(quat_normalize(self.rotation), np.asarray(self.translation, dtype=np.float64))

    def apply(self, points):
        """Transform ``(n, 3)`` points into the parent frame."""
        return quat_rotate(self.rotation, points) + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m
