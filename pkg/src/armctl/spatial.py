"""Rigid-body geometry: quaternions, poses, twists and SE(3) kernels.

Screw/twist 6-vectors inside the numba kernels use the (omega; v) order.
Everything that leaves this package as a task-space 6-vector uses
[linear; angular] instead; `screw_to_task` converts between the two.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

QUAT_DRIFT_TOL = 1e-9


# ---------------------------------------------------------------------------
# quaternions, (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError(f"cannot normalize quaternion {q}")
    if abs(n - 1.0) > QUAT_DRIFT_TOL:
        q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_log(q) -> np.ndarray:
    """Axis-angle 3-vector of a unit quaternion, shortest path (angle <= pi)."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        # first-order expansion around the identity
        return 2.0 * q[1:] / max(q[0], 1e-300)
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] * (angle / s)


def quat_exp(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        return quat_normalize(np.concatenate(([1.0], 0.5 * rotvec)))
    axis = rotvec / angle
    return np.concatenate(([np.cos(angle / 2)], np.sin(angle / 2) * axis))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the w >= 0 representative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def euler_zyx(R) -> tuple[float, float, float]:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    pitch = float(np.arcsin(np.clip(-R[2, 0], -1.0, 1.0)))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    return yaw, pitch, roll


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) plus translation in metres.

    The quaternion is renormalized only when it drifts past 1e-9 and is
    always stored with w >= 0.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        p = np.array(self.translation, dtype=float).reshape(3)
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", p)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        R = self.rotation_matrix
        return Pose(quat_mul(self.rotation, other.rotation),
                    self.translation + R @ other.translation)

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -(quat_to_matrix(qi) @ self.translation))

    def as_vector(self) -> np.ndarray:
        """(px, py, pz, qw, qx, qy, qz)."""
        return np.concatenate((self.translation, self.rotation))

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[3:7], vec[:3])

    def isclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        dq = min(np.abs(self.rotation - other.rotation).max(),
                 np.abs(self.rotation + other.rotation).max())
        return bool(dq <= atol and np.abs(self.translation - other.translation).max() <= atol)


@dataclass(frozen=True)
class Twist:
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = np.array(self.linear, dtype=float).reshape(3)
        ang = np.array(self.angular, dtype=float).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.linear, self.angular))

    @classmethod
    def from_vector(cls, vec) -> "Twist":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:3], vec[3:6])


def screw_to_task(xi) -> np.ndarray:
    """(omega; v) -> [v; omega]; works on 6-vectors and 6xN matrices."""
    xi = np.asarray(xi)
    return np.concatenate((xi[3:6], xi[0:3]), axis=0)


# ---------------------------------------------------------------------------
# SE(3) kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def skew(w):
    S = np.zeros((3, 3))
    S[0, 1] = -w[2]
    S[0, 2] = w[1]
    S[1, 0] = w[2]
    S[1, 2] = -w[0]
    S[2, 0] = -w[1]
    S[2, 1] = w[0]
    return S


@njit(cache=True)
def exp6(omega, v, theta):
    """e^{[s] theta} for a screw with unit (revolute) or zero (prismatic) omega."""
    T = np.eye(4)
    if omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2] < 1e-24:
        T[0, 3] = v[0] * theta
        T[1, 3] = v[1] * theta
        T[2, 3] = v[2] * theta
        return T
    W = skew(omega)
    W2 = W @ W
    s = np.sin(theta)
    c = np.cos(theta)
    R = np.eye(3) + s * W + (1.0 - c) * W2
    G = np.eye(3) * theta + (1.0 - c) * W + (theta - s) * W2
    T[:3, :3] = R
    T[:3, 3] = G @ v
    return T


@njit(cache=True)
def inv_transform(T):
    Ti = np.eye(4)
    Rt = T[:3, :3].T.copy()
    Ti[:3, :3] = Rt
    Ti[:3, 3] = -(Rt @ T[:3, 3].copy())
    return Ti


@njit(cache=True)
def adjoint(T):
    R = T[:3, :3].copy()
    p = T[:3, 3].copy()
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[3:, 3:] = R
    Ad[3:, :3] = skew(p) @ R
    return Ad


@njit(cache=True)
def ad(V):
    """Lie bracket matrix: ad(V) @ X = [V, X]."""
    out = np.zeros((6, 6))
    W = skew(V[:3].copy())
    out[:3, :3] = W
    out[3:, 3:] = W
    out[3:, :3] = skew(V[3:].copy())
    return out
