"""Motion controllers: damped-least-squares IK, inverse dynamics and the
QP compliance controller with fixed or dynamic nullspace.

All three sit behind the same `Controller` interface: `reset(state)` then
one `step(state, target)` per control tick, returning a ControlCommand.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from armctl import dynamics as dyn
from armctl import kinematics as kin
from armctl.kinematics import JointState
from armctl.model import RobotModel
from armctl.qp import QPProblem, QPSettings, QPSolver, QPStatus
from armctl.spatial import Pose, Twist, quat_conj, quat_log, quat_mul

log = logging.getLogger(__name__)

# Reference gains, weights and control period of the QP controller
DEFAULT_K_DES = (80.0, 80.0, 80.0, 5.0, 5.0, 5.0)
DEFAULT_SELECTION = (1, 1, 0, 0, 0, 0, 0)
DEFAULT_W_TRACK = 15.0
DEFAULT_W_JOINT = 1.0
DEFAULT_DT = 0.001

HYSTERESIS_FACTOR = 1.5


class CommandKind(str, enum.Enum):
    POSITION = "position"
    TORQUE = "torque"


class NullspaceMode(str, enum.Enum):
    FIXED = "fixed"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class ControlTarget:
    pose_des: Pose
    twist_des: Twist = field(default_factory=Twist)


@dataclass(frozen=True)
class ControlCommand:
    kind: CommandKind
    q_des: np.ndarray | None = None
    tau_des: np.ndarray | None = None
    qd_cmd: np.ndarray | None = None    # commanded joint velocity, for logging

    def __post_init__(self):
        if self.kind == CommandKind.POSITION and (self.q_des is None or self.tau_des is not None):
            raise ValueError("position command carries q_des only")
        if self.kind == CommandKind.TORQUE and (self.tau_des is None or self.q_des is not None):
            raise ValueError("torque command carries tau_des only")


@dataclass(frozen=True)
class DLSParams:
    damping_lambda: float = 0.01
    epsilon: float = 0.005
    dt: float = DEFAULT_DT
    feedback_gain_max: float = 10.0

    def __post_init__(self):
        if self.damping_lambda <= 0 or self.dt <= 0 or self.epsilon < 0:
            raise ValueError("DLS parameters must be positive")

    @property
    def feedback_gain(self) -> float:
        return min(1.0 / self.dt, self.feedback_gain_max)


def _diag(x, size) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.full(size, float(a))
    if a.ndim == 2:
        if np.abs(a - np.diag(np.diag(a))).max() > 0:
            raise ValueError("gain matrices must be diagonal")
        a = np.diag(a)
    if a.shape != (size,):
        raise ValueError(f"expected {size} diagonal entries, got {a.shape}")
    return a.copy()


@dataclass(frozen=True)
class QPControllerParams:
    """Gains and weights of the QP compliance controller.

    Matrices that must be diagonal are stored as their diagonals.
    `q_null_target=None` means "the configuration at reset".
    """

    k_des: np.ndarray = DEFAULT_K_DES
    selection: np.ndarray = DEFAULT_SELECTION
    w_track: float | np.ndarray = DEFAULT_W_TRACK
    w_joint: float | np.ndarray = DEFAULT_W_JOINT
    k_null: float | np.ndarray = 40.0
    d_null: float | np.ndarray = 2.0 * np.sqrt(40.0)
    q_null_target: np.ndarray | None = None
    dt: float = DEFAULT_DT
    nullspace_mode: NullspaceMode = NullspaceMode.FIXED
    lambda_threshold: float = 1.02
    hysteresis: bool = False
    weight_exponent: float = 1.0
    lambda_damping: float = dyn.DEFAULT_LAMBDA_DAMPING
    n: int = 7

    def __post_init__(self):
        n = self.n
        object.__setattr__(self, "k_des", _diag(self.k_des, 6))
        sel = _diag(self.selection, n)
        if not np.all((sel == 0) | (sel == 1)):
            raise ValueError("selection entries must be 0 or 1")
        object.__setattr__(self, "selection", sel)
        W = np.asarray(self.w_track, dtype=float)
        object.__setattr__(self, "w_track", W * np.eye(6) if W.ndim == 0 else W.copy())
        W = np.asarray(self.w_joint, dtype=float)
        object.__setattr__(self, "w_joint", W * np.eye(n) if W.ndim == 0 else W.copy())
        object.__setattr__(self, "k_null", _diag(self.k_null, n))
        object.__setattr__(self, "d_null", _diag(self.d_null, n))
        if self.q_null_target is not None:
            object.__setattr__(self, "q_null_target", _diag(self.q_null_target, n))
        object.__setattr__(self, "nullspace_mode", NullspaceMode(self.nullspace_mode))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.lambda_threshold <= 0:
            raise ValueError("lambda_threshold must be positive")
        if np.any(self.k_des <= 0):
            raise ValueError("k_des must be positive definite")
        if np.linalg.eigvalsh(0.5 * (self.w_track + self.w_track.T))[0] <= 0:
            raise ValueError("w_track must be positive definite")
        if np.linalg.eigvalsh(0.5 * (self.w_joint + self.w_joint.T))[0] < 0:
            raise ValueError("w_joint must be positive semidefinite")

    def replace(self, **changes) -> "QPControllerParams":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# task-space helpers
# ---------------------------------------------------------------------------

def pose_error(current: Pose, desired: Pose) -> np.ndarray:
    """[p_des - p; axis-angle of q_des * q_cur^-1], shortest path."""
    rot = quat_log(quat_mul(desired.rotation, quat_conj(current.rotation)))
    return np.concatenate((desired.translation - current.translation, rot))


def derive_desired_twist(prev: Pose, curr: Pose, dt: float) -> Twist:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Twist.from_vector(pose_error(prev, curr) / dt)


def impedance_wrench(K_des, D_des, pose: Pose, twist, target: ControlTarget) -> np.ndarray:
    """K (x_des - x) + D (xd_des - xd); `twist` is the measured J qd."""
    K = np.asarray(K_des, dtype=float)
    if K.ndim == 1:
        K = np.diag(K)
    xd = twist.as_vector() if isinstance(twist, Twist) else np.asarray(twist, dtype=float)
    return K @ pose_error(pose, target.pose_des) + np.asarray(D_des) @ (target.twist_des.as_vector() - xd)


def nullspace_feedback(K_n, D_n, q_null_target, state: JointState, qd_target=None) -> np.ndarray:
    n = state.q.size
    qd_t = np.zeros(n) if qd_target is None else np.asarray(qd_target, dtype=float)
    return _diag(K_n, n) * (np.asarray(q_null_target) - state.q) + _diag(D_n, n) * (qd_t - state.qd)


# ---------------------------------------------------------------------------
# IK / ID
# ---------------------------------------------------------------------------

def dls_velocity(J, xd_cmd, params: DLSParams, delta: float | None = None) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if delta is None:
        delta = kin.manipulability(J)
    JJt = J @ J.T
    if delta <= params.epsilon:
        JJt = JJt + params.damping_lambda * np.eye(J.shape[0])
    try:
        return J.T @ np.linalg.solve(JJt, xd_cmd)
    except np.linalg.LinAlgError:
        return J.T @ np.linalg.lstsq(JJt, xd_cmd, rcond=None)[0]


def dls_ik_step(model: RobotModel, state: JointState, target: ControlTarget,
                params: DLSParams) -> ControlCommand:
    pose = kin.forward_kinematics(model, state.q)
    J = kin.space_jacobian(model, state.q)
    xd_cmd = target.twist_des.as_vector() + params.feedback_gain * pose_error(pose, target.pose_des)
    qd_des = dls_velocity(J, xd_cmd, params)
    return ControlCommand(CommandKind.POSITION, q_des=state.q + qd_des * params.dt, qd_cmd=qd_des)


def id_step(model: RobotModel, state: JointState, target: ControlTarget, params: DLSParams,
            prev_qd_des=None) -> ControlCommand:
    """IK velocity, then qdd by differencing against the previous tick's qd_des."""
    ik = dls_ik_step(model, state, target, params)
    prev = np.zeros(model.n) if prev_qd_des is None else np.asarray(prev_qd_des, dtype=float)
    qdd_des = (ik.qd_cmd - prev) / params.dt
    tau = dyn.inverse_dynamics(model, state.q, state.qd, qdd_des)
    return ControlCommand(CommandKind.TORQUE, tau_des=tau, qd_cmd=ik.qd_cmd)


# ---------------------------------------------------------------------------
# QP compliance controller
# ---------------------------------------------------------------------------

@dataclass
class NullspaceState:
    selection: np.ndarray
    q_null_target: np.ndarray
    w_joint_eff: np.ndarray


def dynamic_nullspace_update(J, params: QPControllerParams, state: JointState,
                             prev: NullspaceState | None = None) -> NullspaceState:
    """Lock joints whose column manipulability is at or below the threshold.

    A newly locked joint is retargeted to its current angle; the nullspace
    weight is divided by (1 + n_locked) ** weight_exponent.
    """
    n = state.q.size
    m = np.sqrt(np.einsum("ij,ij->j", J, J))
    locked_before = prev.selection > 0 if prev is not None else np.zeros(n, dtype=bool)
    lock = m <= params.lambda_threshold
    if params.hysteresis:
        lock |= locked_before & (m <= HYSTERESIS_FACTOR * params.lambda_threshold)
    if prev is not None:
        target = prev.q_null_target.copy()
    elif params.q_null_target is not None:
        target = params.q_null_target.copy()
    else:
        target = state.q.copy()
    newly = lock & ~locked_before
    target[newly] = state.q[newly]
    n_locked = int(lock.sum())
    w_eff = params.w_joint / (1.0 + n_locked) ** params.weight_exponent
    return NullspaceState(lock.astype(float), target, w_eff)


def build_qp(model: RobotModel, state: JointState, target: ControlTarget,
             params: QPControllerParams, dyn_terms: dyn.JointDynamicsTerms,
             task_inertia: dyn.TaskInertia, *, J=None, jdqd=None, pose: Pose | None = None,
             nullspace: NullspaceState | None = None) -> QPProblem:
    """Assemble the QP over qdd.

    Objective e_track' W_track e_track + e_joint' W_joint e_joint with
    e_track = J qdd + Jd qd - Lambda^-1 f_des and e_joint = S (qdd - qdd_fb).
    Rows: 1/2 dt^2 qdd (position), dt qdd (velocity), M qdd (torque).
    """
    q, qd = state.q, state.qd
    if J is None or jdqd is None or pose is None:
        T, J, jdqd = kin.kinematics(model, q, qd)
        pose = Pose.from_matrix(T)
    if nullspace is None:
        q_t = params.q_null_target if params.q_null_target is not None else q
        nullspace = NullspaceState(params.selection, q_t, params.w_joint)
    D_des = dyn.critical_damping(task_inertia.lam_sqrt, np.diag(params.k_des))
    f_des = impedance_wrench(params.k_des, D_des, pose, J @ qd, target)
    qdd_fb = nullspace_feedback(params.k_null, params.d_null, nullspace.q_null_target, state)

    Wt = params.w_track
    S = nullspace.selection
    SWS = S[:, None] * nullspace.w_joint_eff * S[None, :]
    b = jdqd - task_inertia.lam_inv @ f_des
    JtW = J.T @ Wt
    P = 2.0 * (JtW @ J + SWS)
    P = 0.5 * (P + P.T)
    c = 2.0 * (JtW @ b) - 2.0 * (SWS @ qdd_fb)

    dt = params.dt
    lim = model.limits
    n = model.n
    eye = np.eye(n)
    A = np.vstack((0.5 * dt * dt * eye, dt * eye, dyn_terms.mass_matrix))
    l = np.concatenate((lim.q_min - qd * dt - q, lim.qd_min - qd, lim.tau_min - dyn_terms.bias))
    u = np.concatenate((lim.q_max - qd * dt - q, lim.qd_max - qd, lim.tau_max - dyn_terms.bias))
    return QPProblem(P, c, A, l, u)


@dataclass
class StepInfo:
    iterations: int = 0
    status: str = ""
    manipulability: float = float("nan")
    lock_mask: np.ndarray | None = None
    hessian_min_eig: float = float("nan")


class Controller:
    kind: str = ""

    def __init__(self, model: RobotModel):
        self.model = model
        self.last_info = StepInfo()

    def reset(self, state: JointState) -> None:
        self.last_info = StepInfo()

    def step(self, state: JointState, target: ControlTarget) -> ControlCommand:
        raise NotImplementedError


class IKController(Controller):
    """DLS inverse kinematics emitting joint position commands.

    The joint reference is integrated from the commanded joint velocity
    starting at the configuration seen at reset, and clamped to the
    position limits; a joint servo downstream is expected to track it.
    """

    kind = "ik"

    def __init__(self, model: RobotModel, params: DLSParams | None = None):
        super().__init__(model)
        self.params = params or DLSParams()
        self._ref: JointState | None = None

    def reset(self, state: JointState) -> None:
        super().reset(state)
        self._ref = JointState(state.q.copy(), np.zeros_like(state.q))

    def step(self, state, target):
        if self._ref is None:
            self.reset(state)
        cmd = dls_ik_step(self.model, self._ref, target, self.params)
        q_des = self.model.clamp_q(cmd.q_des)
        self._ref = JointState(q_des, cmd.qd_cmd)
        J = kin.space_jacobian(self.model, state.q)
        self.last_info = StepInfo(manipulability=kin.manipulability(J))
        return ControlCommand(CommandKind.POSITION, q_des=q_des, qd_cmd=cmd.qd_cmd)


class IDController(Controller):
    kind = "id"

    def __init__(self, model: RobotModel, params: DLSParams | None = None):
        super().__init__(model)
        self.params = params or DLSParams()
        self._prev_qd_des = np.zeros(model.n)

    def reset(self, state):
        super().reset(state)
        self._prev_qd_des = np.zeros(self.model.n)

    def step(self, state, target):
        cmd = id_step(self.model, state, target, self.params, self._prev_qd_des)
        self._prev_qd_des = cmd.qd_cmd
        J = kin.space_jacobian(self.model, state.q)
        self.last_info = StepInfo(manipulability=kin.manipulability(J))
        return cmd


class QPController(Controller):
    kind = "qp"

    def __init__(self, model: RobotModel, params: QPControllerParams | None = None,
                 solver_settings: QPSettings | None = None):
        super().__init__(model)
        self.params = params or QPControllerParams(n=model.n)
        self.solver = QPSolver(solver_settings or QPSettings())
        self._nullspace: NullspaceState | None = None
        self.last_problem: QPProblem | None = None

    def reset(self, state):
        super().reset(state)
        self.solver.reset()
        p = self.params
        q_t = p.q_null_target.copy() if p.q_null_target is not None else state.q.copy()
        if p.nullspace_mode == NullspaceMode.FIXED:
            self._nullspace = NullspaceState(p.selection.copy(), q_t, p.w_joint.copy())
        else:
            self._nullspace = None

    def step(self, state, target):
        if self._nullspace is None and self.params.nullspace_mode == NullspaceMode.FIXED:
            self.reset(state)
        cmd, info, problem, ns = qp_compliance_step(
            self.model, state, target, self.params, self.solver, self._nullspace)
        self._nullspace = ns
        self.last_info = info
        self.last_problem = problem
        return cmd


def qp_compliance_step(model: RobotModel, state: JointState, target: ControlTarget,
                       params: QPControllerParams, solver: QPSolver,
                       nullspace: NullspaceState | None = None):
    """One QP tick. Returns (command, info, problem, nullspace state).

    On a solver failure the command falls back to gravity compensation.
    """
    q, qd = state.q, state.qd
    T, J, jdqd = kin.kinematics(model, q, qd)
    pose = Pose.from_matrix(T)
    terms = dyn.dynamics_terms(model, q, qd)
    if params.nullspace_mode == NullspaceMode.DYNAMIC:
        nullspace = dynamic_nullspace_update(J, params, state, nullspace)
    elif nullspace is None:
        q_t = params.q_null_target if params.q_null_target is not None else q.copy()
        nullspace = NullspaceState(params.selection, q_t, params.w_joint)
    lam = dyn.task_space_inertia(terms.mass_matrix, J, params.lambda_damping)
    problem = build_qp(model, state, target, params, terms, lam, J=J, jdqd=jdqd, pose=pose,
                       nullspace=nullspace)
    sol = solver.solve(problem)
    info = StepInfo(iterations=sol.iterations, status=str(sol.status),
                    manipulability=kin.manipulability(J), lock_mask=nullspace.selection.copy(),
                    hessian_min_eig=float(np.linalg.eigvalsh(problem.P)[0]))
    if sol.status == QPStatus.SOLVED:
        qdd = sol.x
        tau = terms.mass_matrix @ qdd + terms.bias
    else:
        log.warning("QP %s after %d iterations; holding gravity compensation",
                    sol.status, sol.iterations)
        qdd = None
        tau = terms.gravity.copy()
    qd_cmd = qd + qdd * params.dt if qdd is not None else qd.copy()
    return ControlCommand(CommandKind.TORQUE, tau_des=tau, qd_cmd=qd_cmd), info, problem, nullspace


CONTROLLER_KINDS = ("ik", "id", "qp")
