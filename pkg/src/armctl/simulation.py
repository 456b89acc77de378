"""Torque-driven plant, reference trajectories, the experiment loop and
tracking/effort metrics."""
from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from armctl import dynamics as dyn
from armctl import kinematics as kin
from armctl.controllers import CommandKind, ControlTarget, Controller, derive_desired_twist
from armctl.kinematics import JointState
from armctl.model import RobotModel
from armctl.spatial import (Pose, Twist, euler_zyx, quat_exp, quat_mul, quat_normalize,
                            quat_to_matrix)

log = logging.getLogger(__name__)

BLOWUP_QD = 1e3
GIMBAL_MARGIN = 0.01
TRAJECTORY_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]


class PlantBlowUp(RuntimeError):
    """Joint velocity exceeded the plant's sanity bound."""


class TrajectoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# plant
# ---------------------------------------------------------------------------

def integrate_step(model: RobotModel, state: JointState, tau, dt: float) -> JointState:
    """Semi-implicit Euler with hard joint stops (velocity zeroed on contact)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    qdd = dyn.forward_dynamics(model, state.q, state.qd, tau)
    qd = state.qd + qdd * dt
    q = state.q + qd * dt
    if not np.all(np.isfinite(qd)) or np.linalg.norm(qd) > BLOWUP_QD:
        raise PlantBlowUp(f"|qd| = {np.linalg.norm(qd):.3g} rad/s")
    lo, hi = model.limits.q_min, model.limits.q_max
    hit = (q < lo) | (q > hi)
    if hit.any():
        q = np.clip(q, lo, hi)
        qd = np.where(hit, 0.0, qd)
    return JointState(q, qd)


@dataclass(frozen=True)
class ServoGains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=float))
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=float))
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("servo gains must be positive")

    @classmethod
    def critically_damped(cls, model: RobotModel, q, bandwidth: float = 100.0) -> "ServoGains":
        """Per-joint PD tuned on the diagonal of M(q)."""
        m = np.diag(dyn.mass_matrix(model, q))
        return cls(bandwidth ** 2 * m, 2.0 * bandwidth * m)


def position_servo(model: RobotModel, state: JointState, q_des, gains: ServoGains,
                   clamp: bool = True) -> np.ndarray:
    """Joint PD plus gravity feed-forward emulating a position-controlled joint."""
    tau = (gains.kp * (np.asarray(q_des) - state.q) - gains.kd * state.qd
           + dyn.gravity_torques(model, state.q))
    if clamp:
        tau = np.clip(tau, model.limits.tau_min, model.limits.tau_max)
    return tau


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySample:
    """One reference sample. `quat` is stored as filtered, not canonicalized,
    so consecutive samples stay on the same hemisphere."""

    t: float
    position: np.ndarray
    quat: np.ndarray
    twist: Twist | None = None

    @property
    def pose(self) -> Pose:
        return Pose(self.quat, self.position)


def continuity_filter(quats) -> np.ndarray:
    """Flip signs so consecutive quaternions have non-negative dot product."""
    out = np.array(quats, dtype=float, copy=True)
    for k in range(1, len(out)):
        if out[k] @ out[k - 1] < 0.0:
            out[k] = -out[k]
    return out


def _make_samples(t, pos, quats) -> list[TrajectorySample]:
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        raise TrajectoryError("trajectory is empty")
    if np.any(np.diff(t) <= 0):
        raise TrajectoryError("timestamps must be strictly increasing")
    quats = np.asarray(quats, dtype=float)
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(quats)):
        raise TrajectoryError("invalid quaternion in trajectory")
    quats = continuity_filter(quats / norms[:, None])
    return [TrajectorySample(float(t[k]), np.asarray(pos[k], dtype=float), quats[k])
            for k in range(t.size)]


def load_trajectory(path) -> list[TrajectorySample]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise TrajectoryError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise TrajectoryError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header != TRAJECTORY_HEADER:
        raise TrajectoryError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise TrajectoryError(f"{path}: {exc}") from None
    if data.size == 0:
        raise TrajectoryError(f"{path}: no samples")
    if data.shape[1] != 8:
        raise TrajectoryError(f"{path}: expected 8 columns")
    return _make_samples(data[:, 0], data[:, 1:4], data[:, 4:8])


def write_trajectory(samples, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for s in samples:
            w.writerow([repr(float(v)) for v in (s.t, *s.position, *s.quat)])


@dataclass(frozen=True)
class SynthParams:
    """Shape parameters for `synth_trajectory`.

    lissajous: p(t) = c + A * sin(2 pi f t + phase), rotation
        exp(R * sin(2 pi f t + phase)) applied in the base frame.
    circle: radius r in the plane normal to `circle_normal`, starting at c
        (the circle's centre is c - r * e1).
    step: c until `step_time_s`, then c + step_m with the rotation step.
    """

    center_position: tuple = (0.0, 0.0, 0.0)
    center_quat: tuple = (1.0, 0.0, 0.0, 0.0)
    amplitude_m: tuple = (0.0, 0.0, 0.0)
    frequency_hz: tuple = (0.2, 0.2, 0.2)
    phase_rad: tuple = (0.0, 0.0, 0.0)
    rot_amplitude_rad: tuple = (0.0, 0.0, 0.0)
    radius_m: float = 0.0
    circle_frequency_hz: float = 0.5
    circle_normal: str = "x"
    step_m: tuple = (0.0, 0.0, 0.0)
    rot_step_rad: tuple = (0.0, 0.0, 0.0)
    step_time_s: float = 0.5
    noise_std_m: float = 0.0


_AXES = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}

# Workspace radius of the shipped arm (upper arm + forearm) measured from
# the shoulder-roll joint; lissajous amplitudes that carry the reference
# past it force the elbow straight.
WORKSPACE_RADIUS_M = 0.54


# Lissajous shape that drags the end effector back and forth along x by
# 0.25 m around the ready pose of the shipped arm. The far extreme lies
# about 0.61 m from the shoulder, beyond WORKSPACE_RADIUS_M, so a tracking
# controller is pulled through the stretched-elbow singularity twice per
# period.
SINGULAR_SWEEP = {"amplitude_m": (0.25, 0.0, 0.0), "frequency_hz": (0.25, 0.25, 0.25)}


def circle_center(params: SynthParams) -> np.ndarray:
    e1, _ = _circle_basis(params.circle_normal)
    return np.asarray(params.center_position, dtype=float) - params.radius_m * e1


def _circle_basis(normal: str):
    nrm = _AXES[normal]
    e1 = _AXES["yzx"["xyz".index(normal)]]
    return e1, np.cross(nrm, e1)


def synth_trajectory(kind: str, params: SynthParams, duration: float, rate: float,
                     seed: int = 0) -> list[TrajectorySample]:
    if duration <= 0 or rate <= 0:
        raise ValueError("duration and rate must be positive")
    count = int(round(duration * rate))
    t = np.arange(count) / rate
    c = np.asarray(params.center_position, dtype=float)
    qc = quat_normalize(params.center_quat)
    rotvecs = np.zeros((count, 3))
    if kind == "lissajous":
        arg = 2 * np.pi * np.outer(t, params.frequency_hz) + np.asarray(params.phase_rad)
        pos = c + np.sin(arg) * np.asarray(params.amplitude_m)
        rotvecs = np.sin(arg) * np.asarray(params.rot_amplitude_rad)
    elif kind == "circle":
        e1, e2 = _circle_basis(params.circle_normal)
        w = 2 * np.pi * params.circle_frequency_hz * t
        pos = (circle_center(params) + params.radius_m * np.outer(np.cos(w), e1)
               + params.radius_m * np.outer(np.sin(w), e2))
    elif kind == "step":
        on = (t >= params.step_time_s)[:, None]
        pos = c + on * np.asarray(params.step_m)
        rotvecs = on * np.asarray(params.rot_step_rad)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if params.noise_std_m > 0:
        pos = pos + np.random.default_rng(seed).normal(0.0, params.noise_std_m, pos.shape)
    quats = np.array([quat_mul(quat_exp(r), qc) for r in rotvecs])
    return _make_samples(t, pos, quats)


def _hold_index(times, t: float) -> int:
    """Index of the last sample at or before t (-1 before the first)."""
    return bisect.bisect_right(times, t + 1e-12) - 1


def resample_hold(trajectory, t: float) -> ControlTarget:
    """Zero-order hold of the reference at time t.

    The held pose is the last sample at or before t; the desired twist is
    the finite difference over the enclosing sample pair (zero before the
    first sample and after the last one).
    """
    if not trajectory:
        raise TrajectoryError("trajectory is empty")
    times = [s.t for s in trajectory]
    k = _hold_index(times, t)
    if k < 0:
        return ControlTarget(trajectory[0].pose, Twist())
    return _target_at(trajectory, k)


def _target_at(trajectory, k: int) -> ControlTarget:
    s = trajectory[k]
    if s.twist is not None:
        return ControlTarget(s.pose, s.twist)
    if k + 1 >= len(trajectory):
        return ControlTarget(s.pose, Twist())
    nxt = trajectory[k + 1]
    return ControlTarget(s.pose, derive_desired_twist(s.pose, nxt.pose, nxt.t - s.t))


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

def _joint_cols(prefix, n):
    return [f"{prefix}_{j + 1}" for j in range(n)]


@dataclass
class RunLog:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qd_cmd: np.ndarray
    tau_raw: np.ndarray
    tau_clamped: np.ndarray
    pose_actual: np.ndarray          # (N, 7): px py pz qw qx qy qz
    pose_des: np.ndarray
    solver_iterations: np.ndarray
    solver_status: list
    manipulability: np.ndarray
    lock_mask: np.ndarray
    hessian_min_eig: np.ndarray
    dt: float
    unstable: bool = False
    label: str = ""
    controller: str = ""

    @property
    def ticks(self) -> int:
        return int(self.t.size)

    @property
    def n(self) -> int:
        return int(self.q.shape[1])

    @classmethod
    def empty(cls, n: int, dt: float, **kw) -> "RunLog":
        z = np.zeros((0, n))
        return cls(np.zeros(0), z, z, z, z, z, np.zeros((0, 7)), np.zeros((0, 7)),
                   np.zeros(0, dtype=int), [], np.zeros(0), z, np.zeros(0), dt, **kw)

    def columns(self) -> list[str]:
        n = self.n
        pose = ["px", "py", "pz", "qw", "qx", "qy", "qz"]
        return (["t"] + _joint_cols("q", n) + _joint_cols("qd", n) + _joint_cols("qd_cmd", n)
                + _joint_cols("tau_raw", n) + _joint_cols("tau_clamped", n) + pose
                + ["des_" + p for p in pose]
                + ["solver_iterations", "solver_status", "manipulability"]
                + _joint_cols("lock", n) + ["hessian_min_eig"])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            num = np.column_stack((self.t, self.q, self.qd, self.qd_cmd, self.tau_raw,
                                   self.tau_clamped, self.pose_actual, self.pose_des))
            for k in range(self.ticks):
                w.writerow([repr(float(v)) for v in num[k]]
                           + [str(int(self.solver_iterations[k])), self.solver_status[k],
                              repr(float(self.manipulability[k]))]
                           + [str(int(v)) for v in self.lock_mask[k]]
                           + [repr(float(self.hessian_min_eig[k]))])


def read_runlog(path, label: str | None = None) -> RunLog:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty run log")
    header = rows[0]
    n = sum(1 for h in header if h.startswith("q_") and h[2:].isdigit())
    idx = {h: i for i, h in enumerate(header)}
    body = rows[1:]

    def num(cols, dtype=float):
        if not body:
            return np.zeros((0, len(cols)))
        return np.array([[r[idx[c]] for c in cols] for r in body], dtype=float).astype(dtype)

    def jc(prefix):
        return num(_joint_cols(prefix, n))

    pose = ["px", "py", "pz", "qw", "qx", "qy", "qz"]
    t = num(["t"]).reshape(-1)
    dt = float(np.median(np.diff(t))) if t.size > 1 else 0.0
    return RunLog(
        t=t, q=jc("q"), qd=jc("qd"), qd_cmd=jc("qd_cmd"), tau_raw=jc("tau_raw"),
        tau_clamped=jc("tau_clamped"), pose_actual=num(pose),
        pose_des=num(["des_" + p for p in pose]),
        solver_iterations=num(["solver_iterations"]).reshape(-1).astype(int),
        solver_status=[r[idx["solver_status"]] for r in body],
        manipulability=num(["manipulability"]).reshape(-1),
        lock_mask=jc("lock").astype(int), hessian_min_eig=num(["hessian_min_eig"]).reshape(-1),
        dt=dt, label=label if label is not None else path.parent.name)


# ---------------------------------------------------------------------------
# experiment loop
# ---------------------------------------------------------------------------

def run_experiment(model: RobotModel, controller: Controller, trajectory, dt: float,
                   duration: float, initial_state: JointState | None = None,
                   servo: ServoGains | None = None, label: str = "") -> RunLog:
    """Closed-loop simulation: one controller step and one plant step per tick.

    A plant blow-up stops the loop and returns the partial log flagged
    `unstable`.
    """
    n = model.n
    if initial_state is None:
        initial_state = JointState.at_rest(np.zeros(n))
    ticks = int(round(duration / dt)) if trajectory else 0
    if ticks == 0:
        return RunLog.empty(n, dt, label=label, controller=controller.kind)
    if servo is None:
        servo = ServoGains.critically_damped(model, initial_state.q)

    times = [s.t for s in trajectory]
    targets: dict[int, ControlTarget] = {}
    first = ControlTarget(trajectory[0].pose, Twist())

    buf = {k: np.zeros((ticks, n)) for k in ("q", "qd", "qd_cmd", "tau_raw", "tau_clamped", "lock")}
    pose_act = np.zeros((ticks, 7))
    pose_des = np.zeros((ticks, 7))
    iters = np.zeros(ticks, dtype=int)
    status: list[str] = []
    manip = np.zeros(ticks)
    hmin = np.zeros(ticks)

    state = initial_state
    controller.reset(state)
    lo, hi = model.limits.tau_min, model.limits.tau_max
    prev_q_act = None
    unstable = False
    done = 0
    for k in range(ticks):
        t = k * dt
        idx = _hold_index(times, t)
        if idx < 0:
            target, q_des_raw = first, trajectory[0].quat
        else:
            target = targets.get(idx)
            if target is None:
                target = targets[idx] = _target_at(trajectory, idx)
            q_des_raw = trajectory[idx].quat
        cmd = controller.step(state, target)
        if cmd.kind == CommandKind.POSITION:
            tau_raw = position_servo(model, state, cmd.q_des, servo, clamp=False)
        else:
            tau_raw = cmd.tau_des
        tau = np.clip(tau_raw, lo, hi)

        T = kin.fk_matrix(model, state.q)
        qa = Pose.from_matrix(T).rotation
        if prev_q_act is not None and qa @ prev_q_act < 0:
            qa = -qa
        prev_q_act = qa
        info = controller.last_info
        buf["q"][k] = state.q
        buf["qd"][k] = state.qd
        buf["qd_cmd"][k] = cmd.qd_cmd if cmd.qd_cmd is not None else np.nan
        buf["tau_raw"][k] = tau_raw
        buf["tau_clamped"][k] = tau
        buf["lock"][k] = info.lock_mask if info.lock_mask is not None else 0
        pose_act[k, :3] = T[:3, 3]
        pose_act[k, 3:] = qa
        pose_des[k, :3] = target.pose_des.translation
        pose_des[k, 3:] = q_des_raw
        iters[k] = info.iterations
        status.append(info.status or "-")
        manip[k] = info.manipulability
        hmin[k] = info.hessian_min_eig
        done = k + 1
        try:
            state = integrate_step(model, state, tau, dt)
        except PlantBlowUp as exc:
            log.warning("plant blow-up at t=%.4f s: %s", t, exc)
            unstable = True
            break

    sl = slice(0, done)
    return RunLog(
        t=np.arange(done) * dt, q=buf["q"][sl], qd=buf["qd"][sl], qd_cmd=buf["qd_cmd"][sl],
        tau_raw=buf["tau_raw"][sl], tau_clamped=buf["tau_clamped"][sl],
        pose_actual=pose_act[sl], pose_des=pose_des[sl], solver_iterations=iters[sl],
        solver_status=status[:done], manipulability=manip[sl],
        lock_mask=buf["lock"][sl].astype(int), hessian_min_eig=hmin[sl], dt=dt,
        unstable=unstable, label=label, controller=controller.kind)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    e_p: float
    e_phi: float
    V: float
    T: float
    window: tuple
    n: int = 0
    gimbal_flags: int = 0
    unstable: bool = False

    def as_row(self) -> dict:
        return {"t0": self.window[0], "t1": self.window[1], "n": self.n, "e_p": self.e_p,
                "e_phi": self.e_phi, "V": self.V, "T": self.T,
                "gimbal_flags": self.gimbal_flags, "unstable": int(self.unstable)}


def orientation_error_zyx(q_des, q_act):
    """(yaw, pitch, roll) of R_des^T R_act."""
    R = quat_to_matrix(q_des).T @ quat_to_matrix(q_act)
    return euler_zyx(R)


def compute_metrics(log_: RunLog, window=None) -> MetricsReport:
    """Mean position error, mean ZYX orientation error, mean |qd| and mean |tau_raw|.

    The window is half-open, [t0, t1), so adjacent windows split a log
    without double counting.
    """
    if window is None:
        window = (0.0, float("inf"))
    t0, t1 = float(window[0]), float(window[1])
    eps = 1e-9 * max(1.0, abs(t1) if np.isfinite(t1) else 1.0)
    sel = (log_.t >= t0 - eps) & (log_.t < t1 - eps)
    count = int(sel.sum())
    if count == 0:
        raise ValueError(f"window [{t0}, {t1}) contains no ticks")
    dp = log_.pose_des[sel, :3] - log_.pose_actual[sel, :3]
    e_p = float(np.mean(np.linalg.norm(dp, axis=1)))
    angles = np.array([orientation_error_zyx(d, a)
                       for d, a in zip(log_.pose_des[sel, 3:], log_.pose_actual[sel, 3:])])
    e_phi = float(np.mean(np.linalg.norm(angles, axis=1)))
    flags = int(np.sum(np.abs(angles[:, 1]) > np.pi / 2 - GIMBAL_MARGIN))
    V = float(np.mean(np.abs(log_.qd[sel])))
    T = float(np.mean(np.abs(log_.tau_raw[sel])))
    return MetricsReport(e_p, e_phi, V, T, (t0, t1), count, flags, log_.unstable)
