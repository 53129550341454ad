"""SO(3) / SE(3) helpers.

Rotations are stored as unit quaternions ``(w, x, y, z)`` canonicalized to
``w >= 0``.  Orientation increments use the right-perturbation convention
``R <- R @ exp(delta)`` everywhere in the package.

The ``*_batch`` functions work on stacked rotation matrices and are what the
solver uses in its inner loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stack of skew matrices for ``v`` of shape (N, 3)."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _canonical(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    if abs(q[0]) < 1e-12:
        # half-turn: pick the sign that makes the first nonzero vector entry positive
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    elif q[0] < 0.0:
        q = -q
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion ``(w, x, y, z)``."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0.0:
            raise ValueError(f"invalid quaternion {q}")
        object.__setattr__(self, "q", _canonical(q))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "Rotation":
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        # Shepperd's method: branch on the largest diagonal term
        if tr > 0.0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls(np.array(q))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_mul(self.q, other.q))

    def __repr__(self):
        return f"Rotation(q={np.array2string(self.q, precision=6)})"


def so3_exp(omega: np.ndarray) -> Rotation:
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise ValueError(f"non-finite rotation vector {omega}")
    theta = np.linalg.norm(omega)
    if theta < SMALL_ANGLE:
        q = np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * omega])
    else:
        half = 0.5 * theta
        q = np.concatenate([[np.cos(half)], np.sin(half) / theta * omega])
    return Rotation(q)


def so3_log(r: Rotation) -> np.ndarray:
    """Rotation vector of ``r`` with angle in [0, pi].

    At exactly pi the branch follows the quaternion canonicalization: the
    first nonzero component of the returned axis is positive.
    """
    w, v = r.q[0], r.q[1:]
    n = np.linalg.norm(v)
    if n < SMALL_ANGLE:
        return 2.0 * v / w * (1.0 - n * n / (3.0 * w * w))
    return 2.0 * np.arctan2(n, w) / n * v


def so3_right_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) - (1.0 - np.cos(theta)) / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * K @ K


def so3_right_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


# ---------------------------------------------------------------- batched ---

def exp_batch(omega: np.ndarray) -> np.ndarray:
    """Rodrigues on a stack of rotation vectors (N, 3) -> (N, 3, 3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew_batch(omega)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(ts)) / ts**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def log_batch(R: np.ndarray) -> np.ndarray:
    """Rotation vectors of a stack of rotation matrices (N, 3, 3)."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-3
    ts = np.where(small | near_pi, 1.0, theta)
    scale = np.where(small, 0.5 + theta**2 / 12.0, ts / (2.0 * np.sin(ts)))
    out = scale[..., None] * vee
    if R.ndim == 2:
        return so3_log(Rotation.from_matrix(R)) if near_pi else out
    for i in zip(*np.nonzero(near_pi)):
        out[i] = so3_log(Rotation.from_matrix(R[i]))
    return out


def right_jacobian_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew_batch(omega)
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(ts)) / ts**2)
    b = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / ts**3)
    return np.eye(3) - a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_inv_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew_batch(omega)
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    c = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, 1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)))
    return np.eye(3) + 0.5 * K + c[..., None, None] * (K @ K)


def project_to_so3(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


# ------------------------------------------------------------------ SE(3) ---

@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidTransform":
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation * other.rotation, self.rotation.rotate(other.translation) + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        inv = self.rotation.inverse()
        return RigidTransform(inv, -inv.rotate(self.translation))


def transform_point(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.rotation.rotate(p) + t.translation
