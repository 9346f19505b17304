"""Ground-plane rigid transforms, yaw extraction, and 6D rotation codecs.

Conventions used throughout the package:
  - world frame is Y-up, the ground is the XZ plane
  - a body faces +Z at yaw 0; yaw is measured about +Y, so yaw(theta)
    maps +Z onto (sin(theta), 0, cos(theta)) (counterclockwise seen
    from above)
  - a 6D rotation is the first two columns of the rotation matrix,
    flattened column-first: (m00, m10, m20, m01, m11, m21)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DEGENERATE_EPS = 1e-8


def wrap_angle(theta):
    """Wrap angle(s) into [-pi, pi]."""
    return np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi


def yaw_matrix(yaw: float) -> np.ndarray:
    """3x3 rotation about +Y by `yaw` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Decode a 6D rotation into an orthonormal matrix (det +1) via Gram-Schmidt.

    Accepts (..., 6) and returns (..., 3, 3). If the second column is exactly
    parallel to the first, it is replaced by the unit axis least aligned with
    the first column before orthogonalization (deterministic tie-break).
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a0 = r6[..., 0:3]
    a1 = r6[..., 3:6]

    n0 = np.linalg.norm(a0, axis=-1, keepdims=True)
    if np.any(n0 < _DEGENERATE_EPS):
        raise ValueError("first 6D column has near-zero norm")
    b0 = a0 / n0

    proj = np.sum(b0 * a1, axis=-1, keepdims=True)
    b1 = a1 - proj * b0
    n1 = np.linalg.norm(b1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_EPS):
        # exactly parallel columns: substitute the axis least aligned with b0
        flat_b0 = b0.reshape(-1, 3)
        flat_b1 = b1.reshape(-1, 3)
        flat_n1 = n1.reshape(-1)
        for i in np.nonzero(flat_n1 < _DEGENERATE_EPS)[0]:
            axis = np.zeros(3)
            axis[int(np.argmin(np.abs(flat_b0[i])))] = 1.0
            v = axis - np.dot(flat_b0[i], axis) * flat_b0[i]
            flat_b1[i] = v
        b1 = flat_b1.reshape(b1.shape)
        n1 = np.linalg.norm(b1, axis=-1, keepdims=True)
    b1 = b1 / n1

    b2 = np.cross(b0, b1)
    return np.stack([b0, b1, b2], axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as 6D vectors (..., 6)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def identity_rot6d() -> np.ndarray:
    return matrix_to_rot6d(np.eye(3))


def yaw_from_root_rotation(m: np.ndarray, fallback: float | None = None) -> float:
    """Yaw of the rotation's forward axis (R @ +Z) projected onto the ground.

    Degenerate case (forward axis vertical): returns `fallback` if given,
    else raises. Callers tracking a sequence pass the previous frame's yaw;
    the first frame of a track falls back to 0.
    """
    m = np.asarray(m, dtype=np.float64)
    fwd = m @ np.array([0.0, 0.0, 1.0])
    fx, fz = fwd[0], fwd[2]
    if fx * fx + fz * fz < _DEGENERATE_EPS**2:
        if fallback is None:
            raise ValueError("forward axis is vertical; yaw undefined")
        return float(fallback)
    return float(np.arctan2(fx, fz))


@dataclass(frozen=True)
class RigidTransform2D:
    """Ground-plane rigid motion: rotate about +Y by `yaw`, then translate.

    Acts on 3D points as p' = R_y(yaw) @ p + (t_x, 0, t_z); the Y component
    passes through untouched.
    """

    t_x: float
    t_z: float
    yaw: float

    @staticmethod
    def identity() -> "RigidTransform2D":
        return RigidTransform2D(0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        out = p @ self.matrix().T
        out[..., 0] += self.t_x
        out[..., 2] += self.t_z
        return out

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.matrix().T

    def apply_yaw(self, yaw) -> np.ndarray:
        return wrap_angle(np.asarray(yaw) + self.yaw)

    def inverse(self) -> "RigidTransform2D":
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        # inverse of p -> R p + t is p -> R^-1 (p - t)
        tx = -(c * self.t_x - s * self.t_z)
        tz = -(s * self.t_x + c * self.t_z)
        return RigidTransform2D(tx, tz, float(wrap_angle(-self.yaw)))

    def compose(self, other: "RigidTransform2D") -> "RigidTransform2D":
        """Transform equal to applying `other` first, then `self`."""
        t = self.apply_points(np.array([other.t_x, 0.0, other.t_z]))
        return RigidTransform2D(
            float(t[0]), float(t[2]), float(wrap_angle(self.yaw + other.yaw))
        )
