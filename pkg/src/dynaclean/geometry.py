"""Rigid and similarity transforms, pinhole projection, Umeyama alignment.

Quaternions are stored ``(x, y, z, w)``, the order used by TUM trajectory
files. Poses are camera-to-world unless stated otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, DegenerateError


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a quaternion (or ``(n, 4)`` stack), normalizing first."""
    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateError("zero-norm quaternion")
    return q / n


def rot_x(angle: float) -> np.ndarray:
    return Rotation.from_euler("x", angle).as_matrix()


def rot_y(angle: float) -> np.ndarray:
    return Rotation.from_euler("y", angle).as_matrix()


def rot_z(angle: float) -> np.ndarray:
    return Rotation.from_euler("z", angle).as_matrix()


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(R) -> np.ndarray:
    """Rotation angle in radians of one matrix or a ``(n, 3, 3)`` stack."""
    return Rotation.from_matrix(np.asarray(R, dtype=float)).magnitude()


@dataclass(frozen=True)
class PoseSE3:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", normalize_quat(np.asarray(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "PoseSE3":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        r = Rotation.from_quat(self.q)
        return PoseSE3((r * Rotation.from_quat(other.q)).as_quat(), r.apply(other.t) + self.t)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        r_inv = Rotation.from_quat(self.q).inv()
        return PoseSE3(r_inv.as_quat(), -r_inv.apply(self.t))

    def apply(self, p) -> np.ndarray:
        """Transform a point or an ``(n, 3)`` array of points."""
        return Rotation.from_quat(self.q).apply(np.asarray(p, dtype=float)) + self.t


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def inverse(a: PoseSE3) -> PoseSE3:
    return a.inverse()


def apply(a: PoseSE3, p) -> np.ndarray:
    return a.apply(p)


@dataclass(frozen=True)
class Sim3:
    scale: float
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "q", normalize_quat(np.asarray(self.q, dtype=float).reshape(4)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.R
        T[:3, 3] = self.t
        return T

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.scale * (p @ self.R.T) + self.t


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy]

    def normalize(self, px) -> np.ndarray:
        """Pixel coordinates ``(n, 2)`` to normalized image coordinates."""
        px = np.asarray(px, dtype=float)
        return np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)


def project(K: Intrinsics, p_cam) -> np.ndarray:
    """Pinhole projection of camera-frame points; raises for ``z <= 0``."""
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (z <= 0)")
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)


def umeyama_align(src, dst, with_scale: bool = True) -> Sim3:
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama, 1991).

    With ``with_scale=False`` the scale is fixed to 1 (rigid alignment).
    The rotation is kept proper by flipping the sign attached to the
    smallest singular value of the cross-covariance when needed.
    """
    x = np.asarray(src, dtype=float)
    y = np.asarray(dst, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) arrays, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DegenerateError(f"need at least 3 point pairs, got {n}")

    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    var_x = (dx**2).sum() / n
    var_y = (dy**2).sum() / n
    cov = dy.T @ dx / n
    U, d, Vt = np.linalg.svd(cov)
    if var_x == 0 or var_y == 0 or d[1] <= 1e-10 * np.sqrt(var_x * var_y):
        raise DegenerateError("degenerate point configuration (covariance rank < 2)")

    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float((d * S).sum() / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return Sim3(s, matrix_to_quat(R), t)
