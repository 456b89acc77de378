"""Joint-space dynamics and task-space inertia.

Inverse dynamics uses the body-frame recursive Newton-Euler algorithm;
the mass matrix uses a composite-rigid-body pass written in base-frame
(spatial) coordinates. The two share only the SE(3) helpers, so each
serves as an oracle for the other in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from armctl.model import RobotModel
from armctl.spatial import ad, adjoint, exp6, inv_transform

DEFAULT_LAMBDA_DAMPING = 1e-6


class SingularityError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class JointDynamicsTerms:
    mass_matrix: np.ndarray
    bias: np.ndarray
    gravity: np.ndarray


@dataclass(frozen=True)
class TaskInertia:
    lam: np.ndarray
    lam_sqrt: np.ndarray
    lam_inv: np.ndarray


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _spatial_inertia(mass, inertia):
    G = np.zeros((6, 6))
    G[:3, :3] = inertia
    for k in range(3):
        G[3 + k, 3 + k] = mass
    return G


@njit(cache=True)
def _rnea(screws, coms, masses, inertias, gravity, q, qd, qdd):
    n = screws.shape[0]
    # link frames sit at the com, base-aligned at q = 0
    A = np.empty((n, 6))
    Tprev = np.empty((n, 4, 4))     # T_{i,i-1}
    V = np.zeros((n, 6))
    Vd = np.zeros((n, 6))
    Vp = np.zeros(6)
    Vdp = np.zeros(6)
    Vdp[3:] = -gravity
    prev_com = np.zeros(3)
    for i in range(n):
        Mi_inv = np.eye(4)
        Mi_inv[:3, 3] = -coms[i]
        A[i] = adjoint(Mi_inv) @ screws[i]
        M_i_prev = np.eye(4)
        M_i_prev[:3, 3] = prev_com - coms[i]
        Tprev[i] = exp6(-A[i, :3].copy(), -A[i, 3:].copy(), q[i]) @ M_i_prev
        AdT = adjoint(Tprev[i])
        V[i] = AdT @ Vp + A[i] * qd[i]
        Vd[i] = AdT @ Vdp + (ad(V[i]) @ A[i]) * qd[i] + A[i] * qdd[i]
        Vp = V[i]
        Vdp = Vd[i]
        prev_com = coms[i]
    tau = np.empty(n)
    F = np.zeros(6)
    for i in range(n - 1, -1, -1):
        G = _spatial_inertia(masses[i], inertias[i])
        Fi = G @ Vd[i] - ad(V[i]).T @ (G @ V[i])
        if i < n - 1:
            Fi += adjoint(Tprev[i + 1]).T @ F
        F = Fi
        tau[i] = F @ A[i]
    return tau


@njit(cache=True)
def _crba(screws, coms, masses, inertias, q):
    n = screws.shape[0]
    T = np.eye(4)
    xi = np.empty((n, 6))
    Is = np.empty((n, 6, 6))
    for i in range(n):
        xi[i] = adjoint(T) @ screws[i]
        T = T @ exp6(screws[i, :3].copy(), screws[i, 3:].copy(), q[i])
        X = T.copy()
        R = T[:3, :3].copy()
        X[:3, 3] = R @ coms[i] + T[:3, 3]
        Ad_inv = adjoint(inv_transform(X))
        Is[i] = Ad_inv.T @ _spatial_inertia(masses[i], inertias[i]) @ Ad_inv
    # composite inertias from the tip inwards
    Ic = np.zeros((n, 6, 6))
    acc = np.zeros((6, 6))
    for i in range(n - 1, -1, -1):
        acc = acc + Is[i]
        Ic[i] = acc
    M = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            M[i, j] = xi[i] @ (Ic[j] @ xi[j])
            M[j, i] = M[i, j]
    return M


@njit(cache=True)
def _forward_dynamics(screws, coms, masses, inertias, gravity, q, qd, tau):
    n = screws.shape[0]
    M = _crba(screws, coms, masses, inertias, q)
    h = _rnea(screws, coms, masses, inertias, gravity, q, qd, np.zeros(n))
    L = np.linalg.cholesky(M)
    y = np.linalg.solve(L, tau - h)
    return np.linalg.solve(L.T, y)


@njit(cache=True)
def _mass_bias_gravity(screws, coms, masses, inertias, gravity, q, qd):
    n = screws.shape[0]
    M = _crba(screws, coms, masses, inertias, q)
    zero = np.zeros(n)
    h = _rnea(screws, coms, masses, inertias, gravity, q, qd, zero)
    g = _rnea(screws, coms, masses, inertias, gravity, q, zero, zero)
    return M, h, g


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _v(model, x):
    x = np.ascontiguousarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"expected {model.n} joint values, got shape {x.shape}")
    return x


def _args(model: RobotModel):
    return model.screws, model.coms, model.masses, model.inertias


def inverse_dynamics(model: RobotModel, q, qdot, qddot) -> np.ndarray:
    return _rnea(*_args(model), model.gravity, _v(model, q), _v(model, qdot), _v(model, qddot))


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    return _crba(*_args(model), _v(model, q))


def bias_forces(model: RobotModel, q, qdot) -> np.ndarray:
    """C(q, qdot) qdot + G(q)."""
    return _rnea(*_args(model), model.gravity, _v(model, q), _v(model, qdot), np.zeros(model.n))


def gravity_torques(model: RobotModel, q) -> np.ndarray:
    z = np.zeros(model.n)
    return _rnea(*_args(model), model.gravity, _v(model, q), z, z)


def forward_dynamics(model: RobotModel, q, qdot, tau) -> np.ndarray:
    return _forward_dynamics(*_args(model), model.gravity, _v(model, q), _v(model, qdot),
                             _v(model, tau))


def dynamics_terms(model: RobotModel, q, qdot) -> JointDynamicsTerms:
    M, h, g = _mass_bias_gravity(*_args(model), model.gravity, _v(model, q), _v(model, qdot))
    return JointDynamicsTerms(M, h, g)


def kinetic_energy(model: RobotModel, q, qdot) -> float:
    qdot = np.asarray(qdot, dtype=float)
    return 0.5 * float(qdot @ mass_matrix(model, q) @ qdot)


def task_space_inertia(M, J, damping: float = DEFAULT_LAMBDA_DAMPING) -> TaskInertia:
    """Lambda = (J M^-1 J^T + damping I)^-1 and its symmetric square root."""
    M = np.asarray(M, dtype=float)
    J = np.asarray(J, dtype=float)
    L = np.linalg.cholesky(M)
    X = np.linalg.solve(L, J.T)              # L^-1 J^T
    lam_inv = X.T @ X + damping * np.eye(J.shape[0])
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    w, P = np.linalg.eigh(lam_inv)
    if w[0] < 1e-12:
        raise SingularityError(f"task-space inertia is singular (min eigenvalue {w[0]:.3g})")
    lam = (P / w) @ P.T
    lam_sqrt = (P / np.sqrt(w)) @ P.T
    return TaskInertia(0.5 * (lam + lam.T), 0.5 * (lam_sqrt + lam_sqrt.T), lam_inv)


def critical_damping(lam_sqrt, K_des) -> np.ndarray:
    """D = Lambda^1/2 K^1/2 + K^1/2 Lambda^1/2 for a diagonal stiffness K."""
    lam_sqrt = np.asarray(lam_sqrt, dtype=float)
    k = np.sqrt(np.diag(np.asarray(K_des, dtype=float)))
    return lam_sqrt * k[None, :] + k[:, None] * lam_sqrt
