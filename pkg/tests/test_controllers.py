import numpy as np
import pytest

from armctl import dynamics as dyn
from armctl import kinematics as kin
from armctl.controllers import (CommandKind, ControlCommand, ControlTarget, DLSParams,
                                IDController, IKController, NullspaceMode, NullspaceState,
                                DEFAULT_K_DES, QPController, QPControllerParams, build_qp,
                                derive_desired_twist, dls_ik_step, dls_velocity,
                                dynamic_nullspace_update, id_step, impedance_wrench,
                                nullspace_feedback, pose_error, qp_compliance_step)
from armctl.kinematics import JointState
from armctl.qp import QPSettings, QPSolver
from armctl.simulation import integrate_step
from armctl.spatial import Pose, Twist, quat_exp, quat_mul

from conftest import random_q
from helpers import polish_active_set

K_DES = np.diag(DEFAULT_K_DES)


def test_pose_error_examples():
    a = Pose(quat_exp([0.1, 0.2, 0.3]), [1, 2, 3])
    assert np.allclose(pose_error(a, a), 0, atol=1e-15)
    b = Pose(quat_mul(quat_exp([0, 0, np.pi / 2]), a.rotation), a.translation)
    assert np.allclose(pose_error(a, b), [0, 0, 0, 0, 0, np.pi / 2], atol=1e-12)
    # opposite quaternion sign, same rotation
    c = Pose(-a.rotation, a.translation)
    assert np.allclose(pose_error(a, c), 0, atol=1e-15)


def test_pose_error_shortest_path():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = Pose(quat_exp(rng.normal(size=3) * 2), rng.normal(size=3))
        b = Pose(quat_exp(rng.normal(size=3) * 2), rng.normal(size=3))
        assert np.linalg.norm(pose_error(a, b)[3:]) <= np.pi + 1e-12


def test_derive_desired_twist_examples():
    p = Pose(quat_exp([0.3, 0, 0]), [0.1, 0, 0])
    assert np.array_equal(derive_desired_twist(p, p, 1e-3).as_vector(), np.zeros(6))
    q = Pose(p.rotation, p.translation + [0.001, 0, 0])
    assert np.allclose(derive_desired_twist(p, q, 1e-3).linear, [1, 0, 0], atol=1e-9)
    r = Pose(quat_mul(quat_exp([0, 0.002, 0]), p.rotation), p.translation)
    assert np.allclose(derive_desired_twist(p, r, 1e-3).angular, [0, 2, 0], atol=1e-9)
    with pytest.raises(ValueError):
        derive_desired_twist(p, p, 0.0)


def test_ik_holds_current_pose(model, rng):
    q = random_q(model, rng)
    s = JointState.at_rest(q)
    cmd = dls_ik_step(model, s, ControlTarget(kin.forward_kinematics(model, q)), DLSParams())
    assert cmd.kind == CommandKind.POSITION and np.abs(cmd.q_des - q).max() < 1e-9


def test_ik_pseudo_inverse_consistency(model, ready_q):
    J = kin.space_jacobian(model, ready_q)
    xd = np.array([0.1, -0.05, 0.02, 0.3, 0.1, -0.2])
    qd = dls_velocity(J, xd, DLSParams())
    assert np.abs(J @ qd - xd).max() < 1e-8


def test_dls_bound_at_synthetic_singularity():
    rng = np.random.default_rng(4)
    U, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    V, _ = np.linalg.qr(rng.normal(size=(7, 7)))
    sig = np.array([2.0, 1.5, 1.0, 0.5, 0.2, 0.0])   # one lost direction
    J = U @ np.hstack((np.diag(sig), np.zeros((6, 1)))) @ V.T
    p = DLSParams(damping_lambda=0.01, epsilon=0.005)
    assert kin.manipulability(J) <= p.epsilon
    for _ in range(100):
        xd = rng.normal(size=6)
        qd = dls_velocity(J, xd, p)
        # |qd| <= |xd| max_i sigma_i / (sigma_i^2 + lambda) <= |xd| / (2 sqrt(lambda))
        bound = np.max(sig / (sig ** 2 + p.damping_lambda))
        assert np.linalg.norm(qd) <= np.linalg.norm(xd) * bound + 1e-12
        assert np.linalg.norm(qd) <= np.linalg.norm(xd) / (2 * np.sqrt(p.damping_lambda))


def test_dls_switches_on_manipulability(model, ready_q):
    J = kin.space_jacobian(model, ready_q)
    xd = np.ones(6)
    undamped = dls_velocity(J, xd, DLSParams(epsilon=0.0))
    # delta(q) at the ready posture is above 0.005 but below 1.0
    assert np.array_equal(dls_velocity(J, xd, DLSParams()), undamped)
    assert not np.allclose(dls_velocity(J, xd, DLSParams(epsilon=1.0)), undamped)


def test_id_gravity_compensation(model, gravity_free, rng):
    q = random_q(model, rng)
    s = JointState.at_rest(q)
    tgt = ControlTarget(kin.forward_kinematics(model, q))
    cmd = id_step(model, s, tgt, DLSParams())
    assert cmd.kind == CommandKind.TORQUE
    assert np.allclose(cmd.tau_des, dyn.gravity_torques(model, q), atol=1e-6)
    assert np.allclose(id_step(gravity_free, s, tgt, DLSParams()).tau_des, 0, atol=1e-6)


def test_id_pipeline_decomposition(model, rng):
    p = DLSParams()
    for _ in range(20):
        q, qd = random_q(model, rng), rng.normal(size=7) * 0.3
        prev = rng.normal(size=7) * 0.3
        s = JointState(q, qd)
        tgt = ControlTarget(Pose(quat_exp(rng.normal(size=3) * 0.1), rng.normal(size=3) * 0.3))
        cmd = id_step(model, s, tgt, p, prev)
        ik = dls_ik_step(model, s, tgt, p)
        want = dyn.inverse_dynamics(model, q, qd, (ik.qd_cmd - prev) / p.dt)
        assert np.array_equal(cmd.tau_des, want)


def test_impedance_wrench_examples(rng):
    cur = Pose(quat_exp([0.2, 0.1, 0]), [0.3, 0.2, 0.1])
    tgt = ControlTarget(Pose(cur.rotation, cur.translation + [0.01, 0, 0]))
    f = impedance_wrench(K_DES, np.eye(6), cur, np.zeros(6), tgt)
    assert np.allclose(f, [0.8, 0, 0, 0, 0, 0], atol=1e-12)
    assert np.allclose(impedance_wrench(K_DES, np.eye(6), cur, np.zeros(6), ControlTarget(cur)), 0)
    for _ in range(50):
        D = rng.normal(size=(6, 6))
        tw = Twist.from_vector(rng.normal(size=6))
        x = rng.normal(size=6)
        t = ControlTarget(Pose(quat_exp(rng.normal(size=3)), rng.normal(size=3)), tw)
        want = K_DES @ pose_error(cur, t.pose_des) + D @ (tw.as_vector() - x)
        assert np.abs(impedance_wrench(K_DES, D, cur, x, t) - want).max() < 1e-12


def test_nullspace_feedback_examples(rng):
    s = JointState([0.3, -0.2], [0.0, 0.0])
    assert np.array_equal(nullspace_feedback(40, 12, [0.3, -0.2], s), [0, 0])
    one = JointState([0.0], [0.5])
    assert nullspace_feedback(100, 20, [0.1], one)[0] == pytest.approx(0.0, abs=1e-12)
    K, D = rng.uniform(1, 50, 7), rng.uniform(1, 20, 7)
    q, qd, qt = rng.normal(size=(3, 7))
    got = nullspace_feedback(K, D, qt, JointState(q, qd))
    assert np.allclose(got, K * (qt - q) - D * qd, atol=1e-14)


def _dyn_params(**kw):
    return QPControllerParams(nullspace_mode="dynamic", **kw)


def test_dynamic_nullspace_no_locks():
    J = np.vstack((np.eye(7)[:6] * 3, np.zeros((0, 7))))
    J = np.hstack((J[:, :6], np.full((6, 1), 2.0)))
    s = JointState.at_rest(np.arange(7.0))
    ns = dynamic_nullspace_update(J, _dyn_params(lambda_threshold=1.0), s)
    assert np.array_equal(ns.selection, np.zeros(7))
    assert np.array_equal(ns.w_joint_eff, np.eye(7))


def test_dynamic_nullspace_single_and_double_lock():
    J = np.full((6, 7), 1.0)
    J[:, 2] = 0.0
    s = JointState.at_rest(np.linspace(-1, 1, 7))
    ns = dynamic_nullspace_update(J, _dyn_params(lambda_threshold=0.5), s)
    assert np.array_equal(ns.selection, np.eye(7)[2])
    assert ns.q_null_target[2] == s.q[2]
    J[:, 5] = 0.1
    ns = dynamic_nullspace_update(J, _dyn_params(lambda_threshold=0.5), s)
    assert np.array_equal(np.flatnonzero(ns.selection), [2, 5])
    assert np.allclose(ns.w_joint_eff, np.eye(7) / 3)


def test_dynamic_nullspace_keeps_target_while_locked():
    J = np.zeros((6, 7))
    p = _dyn_params(lambda_threshold=0.5)
    first = dynamic_nullspace_update(J, p, JointState.at_rest(np.zeros(7)))
    later = dynamic_nullspace_update(J, p, JointState.at_rest(np.full(7, 0.2)), first)
    assert np.array_equal(later.q_null_target, np.zeros(7))


def test_hysteresis_keeps_joint_locked():
    p = _dyn_params(lambda_threshold=1.0, hysteresis=True)
    J = np.zeros((6, 7))
    s = JointState.at_rest(np.zeros(7))
    ns = dynamic_nullspace_update(J, p, s)
    J[0, :] = 1.2                      # above threshold, below 1.5x
    assert dynamic_nullspace_update(J, p, s, ns).selection.sum() == 7
    assert dynamic_nullspace_update(J, p.replace(hysteresis=False), s, ns).selection.sum() == 0


def _qp_inputs(model, q, qd, params):
    s = JointState(q, qd)
    terms = dyn.dynamics_terms(model, q, qd)
    T, J, jdqd = kin.kinematics(model, q, qd)
    lam = dyn.task_space_inertia(terms.mass_matrix, J)
    return s, terms, lam, J, jdqd, Pose.from_matrix(T)


def test_build_qp_stationarity_on_identity_jacobian(model, ready_q, rng):
    params = QPControllerParams(w_joint=0.0)
    qd = rng.normal(size=7) * 0.2
    s, terms, _, _, jdqd, pose = _qp_inputs(model, ready_q, qd, params)
    J = np.hstack((np.eye(6), np.zeros((6, 1))))
    lam = dyn.task_space_inertia(terms.mass_matrix, J)
    tgt = ControlTarget(Pose(pose.rotation, pose.translation + [0.02, -0.01, 0.03]))
    prob = build_qp(model, s, tgt, params, terms, lam, J=J, jdqd=jdqd, pose=pose)
    x = np.linalg.lstsq(prob.P, -prob.c, rcond=None)[0]
    f = impedance_wrench(params.k_des, dyn.critical_damping(lam.lam_sqrt, np.diag(params.k_des)),
                         pose, J @ qd, tgt)
    assert np.abs(J @ x - (lam.lam_inv @ f - jdqd)).max() < 1e-9


def test_build_qp_selection_block(model, ready_q):
    params = QPControllerParams()
    s, terms, lam, J, jdqd, pose = _qp_inputs(model, ready_q, np.zeros(7), params)
    prob = build_qp(model, s, ControlTarget(pose), params, terms, lam)
    SWS = 0.5 * prob.P - J.T @ params.w_track @ J
    assert np.allclose(SWS[2:, :], 0, atol=1e-10) and np.allclose(SWS[:, 2:], 0, atol=1e-10)
    assert np.allclose(np.diag(SWS)[:2], 1.0)


def test_build_qp_objective_matches_definition(model, rng):
    params = QPControllerParams(w_joint=np.diag(rng.uniform(0.5, 2, 7)))
    q, qd = random_q(model, rng), rng.normal(size=7) * 0.3
    s, terms, lam, J, jdqd, pose = _qp_inputs(model, q, qd, params)
    tgt = ControlTarget(Pose(quat_exp(rng.normal(size=3) * 0.1), pose.translation + 0.01),
                        Twist.from_vector(rng.normal(size=6) * 0.1))
    prob = build_qp(model, s, tgt, params, terms, lam)
    f = impedance_wrench(params.k_des, dyn.critical_damping(lam.lam_sqrt, np.diag(params.k_des)),
                         pose, J @ qd, tgt)
    fb = nullspace_feedback(params.k_null, params.d_null, q, s)
    S = np.diag(params.selection)

    def definition(x):
        e_t = J @ x + jdqd - lam.lam_inv @ f
        e_j = S @ (x - fb)
        return e_t @ params.w_track @ e_t + e_j @ params.w_joint @ e_j

    xs = rng.normal(size=(100, 7)) * 5
    diffs = [prob.objective(x) - definition(x) for x in xs]
    const = prob.objective(np.zeros(7)) - definition(np.zeros(7))
    scale = max(abs(definition(x)) for x in xs)
    assert max(abs(d - const) for d in diffs) < 1e-9 * max(1.0, scale)


def test_build_qp_constraint_rows(model, ready_q):
    params = QPControllerParams()
    qd = np.full(7, 0.1)
    s, terms, lam, *_ = _qp_inputs(model, ready_q, qd, params)
    prob = build_qp(model, s, ControlTarget(Pose()), params, terms, lam)
    dt = params.dt
    assert np.allclose(prob.A[:7], 0.5 * dt * dt * np.eye(7))
    assert np.allclose(prob.A[7:14], dt * np.eye(7))
    assert np.allclose(prob.A[14:], terms.mass_matrix)
    lim = model.limits
    assert np.allclose(prob.u[7:14], lim.qd_max - qd)
    assert np.allclose(prob.l[14:], lim.tau_min - terms.bias)
    assert np.allclose(prob.u[:7], lim.q_max - qd * dt - ready_q)


def test_qp_step_holds_gravity(model, ready_q):
    s = JointState.at_rest(ready_q)
    cmd, info, prob, _ = qp_compliance_step(model, s, ControlTarget(kin.forward_kinematics(model, ready_q)),
                                            QPControllerParams(), QPSolver())
    assert info.status == "solved"
    assert np.abs(cmd.tau_des - dyn.gravity_torques(model, ready_q)).max() < 1e-4


def test_qp_step_respects_constraints(model, rng):
    solver = QPSolver()
    params = QPControllerParams()
    lim = model.limits
    for _ in range(300):
        q, qd = random_q(model, rng, 0.0), rng.uniform(lim.qd_min, lim.qd_max) * 0.5
        s = JointState(q, qd)
        tgt = ControlTarget(Pose(quat_exp(rng.normal(size=3)), rng.normal(size=3) * 0.4))
        cmd, info, prob, _ = qp_compliance_step(model, s, tgt, params, solver)
        if info.status != "solved":
            continue
        qdd = np.linalg.solve(dyn.mass_matrix(model, q), cmd.tau_des - dyn.bias_forces(model, q, qd))
        # violations are measured relative to max(1, |bound|)
        for val, lo, hi in ((qd + qdd * params.dt, lim.qd_min, lim.qd_max),
                            (cmd.tau_des, lim.tau_min, lim.tau_max)):
            viol = np.maximum(val - hi, lo - val) / np.maximum(1.0, np.maximum(abs(lo), abs(hi)))
            assert viol.max() <= 1e-5


def test_qp_solver_failure_falls_back_to_gravity(model, ready_q, caplog):
    s = JointState(ready_q, np.full(7, 0.3))
    tgt = ControlTarget(Pose(translation=[0.6, 0.0, 0.0]))
    cmd, info, *_ = qp_compliance_step(model, s, tgt, QPControllerParams(),
                                       QPSolver(QPSettings(max_iter=1, eps_abs=1e-14, eps_rel=1e-14)))
    assert info.status == "max_iterations"
    assert np.array_equal(cmd.tau_des, dyn.gravity_torques(model, ready_q))
    assert "gravity compensation" in caplog.text


def test_argmin_invariant_under_weight_scaling(model, rng):
    solver_settings = QPSettings(eps_abs=1e-9, eps_rel=1e-9, max_iter=20000)
    checked = 0
    for _ in range(20):
        q, qd = random_q(model, rng, 0.2), rng.normal(size=7) * 0.2
        s = JointState(q, qd)
        tgt = ControlTarget(Pose(quat_exp(rng.normal(size=3) * 0.1),
                                 kin.forward_kinematics(model, q).translation + rng.normal(size=3) * 0.02))
        base = QPControllerParams(w_track=15.0, w_joint=1.0)
        p1 = qp_compliance_step(model, s, tgt, base, QPSolver(solver_settings))[2]
        p2 = qp_compliance_step(model, s, tgt, base.replace(w_track=150.0, w_joint=10.0),
                                QPSolver(solver_settings))[2]
        # same feasible set, objective scaled by exactly 10
        assert np.array_equal(p1.A, p2.A) and np.array_equal(p1.l, p2.l) and np.array_equal(p1.u, p2.u)
        assert np.allclose(p2.P, 10 * p1.P, rtol=1e-13) and np.allclose(p2.c, 10 * p1.c, rtol=1e-13)
        r1, r2 = QPSolver(solver_settings).solve(p1), QPSolver(solver_settings).solve(p2)
        if not (r1.solved and r2.solved):
            continue
        x1, lam1, rows1 = polish_active_set(p1, r1.y)
        x2, lam2, rows2 = polish_active_set(p2, r2.y)
        for prob, x, lam, rows in ((p1, x1, lam1, rows1), (p2, x2, lam2, rows2)):
            # the polished point is a KKT point, hence the unique argmin
            assert prob.violation(x) <= 1e-9 * max(1.0, np.abs(prob.u[np.isfinite(prob.u)]).max())
            assert np.abs(prob.P @ x + prob.c + prob.A.T @ lam).max() <= 1e-8 * max(1.0, np.abs(prob.c).max())
            # complementarity: a positive multiplier sits on the upper bound,
            # a negative one on the lower bound
            Ax = prob.A @ x
            up, lo = lam > 0, lam < 0
            assert np.allclose(Ax[up], prob.u[up], rtol=1e-9, atol=1e-9)
            assert np.allclose(Ax[lo], prob.l[lo], rtol=1e-9, atol=1e-9)
        assert np.abs(x1 - x2).max() < 1e-7
        checked += 1
    assert checked >= 15


def test_dynamic_hessian_psd_and_fixed_rank_deficiency(model):
    # sweep the arm through the stretched (singular) configuration
    params_d = QPControllerParams(nullspace_mode="dynamic")
    params_f = QPControllerParams(w_joint=0.0)
    worst_dyn, min_fixed = np.inf, np.inf
    for elbow in np.linspace(0.0, 1.3, 60):
        q = np.array([0.0, 0.25, 0.0, elbow, 0.0, 0.3, 0.0])
        s, terms, lam, J, jdqd, pose = _qp_inputs(model, q, np.zeros(7), params_d)
        ns = dynamic_nullspace_update(J, params_d, s)
        P = build_qp(model, s, ControlTarget(pose), params_d, terms, lam, nullspace=ns).P
        worst_dyn = min(worst_dyn, np.linalg.eigvalsh(P)[0])
        P0 = build_qp(model, s, ControlTarget(pose), params_f, terms, lam).P
        min_fixed = min(min_fixed, np.linalg.eigvalsh(P0)[0])
    assert worst_dyn >= -1e-8
    # J^T W J has rank <= 6 for 7 joints: without nullspace weight the
    # Hessian is singular, which is what the nullspace term repairs
    assert min_fixed < 1e-8 < worst_dyn


def test_command_payload_validation():
    with pytest.raises(ValueError):
        ControlCommand(CommandKind.POSITION, tau_des=np.zeros(7))
    with pytest.raises(ValueError):
        ControlCommand(CommandKind.TORQUE, q_des=np.zeros(7), tau_des=np.zeros(7))


def test_params_validation():
    with pytest.raises(ValueError):
        QPControllerParams(selection=(1, 2, 0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        QPControllerParams(k_null=np.ones((7, 7)))
    with pytest.raises(ValueError):
        QPControllerParams(dt=0.0)
    with pytest.raises(ValueError):
        DLSParams(damping_lambda=0.0)
    assert QPControllerParams(nullspace_mode="dynamic").nullspace_mode == NullspaceMode.DYNAMIC


@pytest.mark.parametrize("make", [
    lambda m: IKController(m), lambda m: IDController(m), lambda m: QPController(m),
    lambda m: QPController(m, QPControllerParams(nullspace_mode="dynamic")),
], ids=["ik", "id", "qp_fixed", "qp_dynamic"])
def test_interface_law_gravity_free(gravity_free, ready_q, make):
    from armctl.simulation import ServoGains, position_servo
    ctrl = make(gravity_free)
    s = JointState.at_rest(ready_q)
    ctrl.reset(s)
    tgt = ControlTarget(kin.forward_kinematics(gravity_free, ready_q))
    gains = ServoGains.critically_damped(gravity_free, ready_q)
    for _ in range(100):
        cmd = ctrl.step(s, tgt)
        tau = position_servo(gravity_free, s, cmd.q_des, gains) if cmd.q_des is not None else cmd.tau_des
        s = integrate_step(gravity_free, s, tau, 1e-3)
    assert np.linalg.norm(s.q - ready_q) < 1e-6


def test_ik_reference_is_clamped(model, ready_q):
    ctrl = IKController(model)
    s = JointState.at_rest(ready_q)
    ctrl.reset(s)
    far = ControlTarget(Pose(translation=[2.0, 0.0, 0.0]))
    for _ in range(500):
        cmd = ctrl.step(s, far)
        assert np.all(cmd.q_des <= model.limits.q_max) and np.all(cmd.q_des >= model.limits.q_min)


def test_nullspace_state_fixed_mode(model, ready_q):
    ctrl = QPController(model)
    ctrl.reset(JointState.at_rest(ready_q))
    assert isinstance(ctrl._nullspace, NullspaceState)
    assert np.array_equal(ctrl._nullspace.q_null_target, ready_q)
