"""Product-of-exponentials kinematics.

The task Jacobian returned here maps joint rates to
[linear velocity of the end-effector origin; angular velocity], both
expressed in the base frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from armctl.model import RobotModel, ScrewAxis
from armctl.spatial import Pose, Twist, ad, adjoint, exp6


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.array(self.q, dtype=float).reshape(-1))
        object.__setattr__(self, "qd", np.array(self.qd, dtype=float).reshape(-1))
        if self.q.shape != self.qd.shape:
            raise ValueError("q and qd must have the same length")

    @classmethod
    def at_rest(cls, q) -> "JointState":
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _chain(screws, q):
    """Cumulative products T[i] = exp(s_1 q_1) ... exp(s_i q_i); T[0] = I."""
    n = screws.shape[0]
    T = np.empty((n + 1, 4, 4))
    T[0] = np.eye(4)
    for i in range(n):
        T[i + 1] = T[i] @ exp6(screws[i, :3].copy(), screws[i, 3:].copy(), q[i])
    return T


@njit(cache=True)
def _space_screws(screws, T):
    """Columns xi_i = Ad(T[i]) s_i, (omega; v) order."""
    n = screws.shape[0]
    Js = np.empty((6, n))
    for i in range(n):
        Js[:, i] = adjoint(T[i]) @ screws[i]
    return Js


@njit(cache=True)
def _fk(screws, home, q):
    T = _chain(screws, q)
    return T[-1] @ home


@njit(cache=True)
def _task_jacobian(screws, home, q):
    T = _chain(screws, q)
    Js = _space_screws(screws, T)
    p = (T[-1] @ home)[:3, 3].copy()
    n = screws.shape[0]
    J = np.empty((6, n))
    for i in range(n):
        w = Js[:3, i].copy()
        J[:3, i] = Js[3:, i] + np.cross(w, p)
        J[3:, i] = w
    return J


@njit(cache=True)
def _kinematics(screws, home, q, qd):
    """End-effector transform, task Jacobian and task-space Jdot*qd in one pass."""
    n = screws.shape[0]
    T = _chain(screws, q)
    Js = _space_screws(screws, T)
    Tee = T[-1] @ home
    p = Tee[:3, 3].copy()
    J = np.empty((6, n))
    for i in range(n):
        w = Js[:3, i].copy()
        J[:3, i] = Js[3:, i] + np.cross(w, p)
        J[3:, i] = w
    # d/dt xi_i = [V_{i-1}, xi_i] with V_{i-1} the spatial twist of link i-1
    V = np.zeros(6)
    a = np.zeros(6)
    for i in range(n):
        a += (ad(V) @ Js[:, i].copy()) * qd[i]
        V += Js[:, i] * qd[i]
    w = V[:3].copy()
    pdot = V[3:] + np.cross(w, p)
    jdqd = np.empty(6)
    jdqd[:3] = a[3:] + np.cross(a[:3].copy(), p) + np.cross(w, pdot)
    jdqd[3:] = a[:3]
    return Tee, J, jdqd


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _q(model: RobotModel, q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=float)
    if q.shape != (model.n,):
        raise ValueError(f"expected {model.n} joint values, got shape {q.shape}")
    return q


def exp_screw(axis: ScrewAxis, theta: float) -> Pose:
    return Pose.from_matrix(exp6(np.ascontiguousarray(axis.omega), np.ascontiguousarray(axis.v),
                                 float(theta)))


def forward_kinematics(model: RobotModel, q) -> Pose:
    return Pose.from_matrix(fk_matrix(model, q))


def fk_matrix(model: RobotModel, q) -> np.ndarray:
    return _fk(model.screws, model.home_matrix, _q(model, q))


def space_jacobian(model: RobotModel, q) -> np.ndarray:
    """6 x n task Jacobian, rows [linear; angular]."""
    return _task_jacobian(model.screws, model.home_matrix, _q(model, q))


def jacobian_dot_qdot(model: RobotModel, q, qdot) -> np.ndarray:
    return _kinematics(model.screws, model.home_matrix, _q(model, q), _q(model, qdot))[2]


def kinematics(model: RobotModel, q, qdot):
    """(end-effector 4x4, J, Jdot*qdot) evaluated together."""
    return _kinematics(model.screws, model.home_matrix, _q(model, q), _q(model, qdot))


def end_effector_twist(model: RobotModel, q, qdot) -> Twist:
    return Twist.from_vector(space_jacobian(model, q) @ np.asarray(qdot, dtype=float))


def manipulability(J) -> float:
    """sqrt(det(J J^T)); zero when J has rank below its row count.

    Evaluated as |prod diag(R)| from a QR factorization of J^T, which is the
    same quantity without squaring the condition number, so near-singular
    values stay accurate down to round-off instead of to its square root.
    """
    J = np.asarray(J, dtype=float)
    if J.shape[1] < J.shape[0]:
        return 0.0
    r = np.linalg.qr(J.T, mode="r")
    return float(abs(np.prod(np.diag(r))))


def joint_manipulability(J, i: int) -> float:
    """Per-joint manipulability of column `i`.

    The determinant form sqrt(det(J_i J_i^T)) vanishes identically for a
    single 6x1 column, so the column's own Gram determinant
    sqrt(J_i^T J_i) = |J_i| is used instead. Removing column i and taking
    the manipulability of the remainder is the other reading; see
    `manipulability_without_joint`.
    """
    col = np.asarray(J, dtype=float)[:, i]
    return float(np.sqrt(col @ col))


def manipulability_without_joint(J, i: int) -> float:
    J = np.asarray(J, dtype=float)
    return manipulability(np.delete(J, i, axis=1))
