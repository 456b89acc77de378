"""Turn an ExperimentConfig into runs: build the model, reference and
controllers, execute (optionally in a worker pool) and collect metrics."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from armctl import kinematics as kin
from armctl.config import ControllerEntry, ExperimentConfig
from armctl.controllers import Controller, IDController, IKController, QPController
from armctl.kinematics import JointState
from armctl.model import RobotModel, load_model
from armctl.simulation import (MetricsReport, RunLog, ServoGains, SynthParams,
                               compute_metrics, load_trajectory, run_experiment,
                               synth_trajectory)


@dataclass
class RunResult:
    label: str
    controller: str
    log: RunLog
    metrics: list[MetricsReport]


def build_controller(cfg: ExperimentConfig, entry: ControllerEntry, model: RobotModel) -> Controller:
    if entry.kind == "ik":
        return IKController(model, cfg.dls_params(entry.overrides))
    if entry.kind == "id":
        return IDController(model, cfg.dls_params(entry.overrides))
    if entry.kind == "qp":
        return QPController(model, cfg.qp_params(entry.overrides, n=model.n), cfg.solver_settings())
    raise ValueError(f"unknown controller {entry.kind!r}")


def build_trajectory(cfg: ExperimentConfig, model: RobotModel):
    t = cfg.trajectory
    if t.kind == "file":
        return load_trajectory(cfg.trajectory_path())
    home = kin.forward_kinematics(model, np.asarray(cfg.initial_q_rad, dtype=float))
    params = SynthParams(
        center_position=t.center_position_m if t.center_position_m is not None
        else tuple(home.translation),
        center_quat=t.center_quat if t.center_quat is not None else tuple(home.rotation),
        amplitude_m=t.amplitude_m, frequency_hz=t.frequency_hz, phase_rad=t.phase_rad,
        rot_amplitude_rad=t.rot_amplitude_rad, radius_m=t.radius_m,
        circle_frequency_hz=t.circle_frequency_hz, circle_normal=t.circle_normal,
        step_m=t.step_m, rot_step_rad=t.rot_step_rad, step_time_s=t.step_time_s,
        noise_std_m=t.noise_std_m)
    return synth_trajectory(t.kind, params, max(cfg.duration_s, 1.0 / t.rate_hz), t.rate_hz,
                            seed=cfg.seed)


def run_single(cfg: ExperimentConfig, entry: ControllerEntry, label: str | None = None,
               model: RobotModel | None = None, trajectory=None) -> RunResult:
    model = model or load_model(cfg.model_path())
    trajectory = trajectory if trajectory is not None else build_trajectory(cfg, model)
    q0 = np.asarray(cfg.initial_q_rad, dtype=float)
    state = JointState.at_rest(q0)
    servo = ServoGains.critically_damped(model, q0, cfg.servo_bandwidth_rad_per_s)
    controller = build_controller(cfg, entry, model)
    label = label or entry.name
    log = run_experiment(model, controller, trajectory, cfg.dt_s, cfg.duration_s, state,
                         servo=servo, label=label)
    metrics = []
    if log.ticks:
        span = log.t[-1] + log.dt
        for w in cfg.metric_windows():
            window = (w[0], min(w[1], span))
            if window[0] < window[1]:
                metrics.append(compute_metrics(log, window))
    return RunResult(label, entry.kind, log, metrics)


def plan_runs(cfg: ExperimentConfig) -> list[tuple[ExperimentConfig, ControllerEntry, str]]:
    """Every (config, controller, label) combination a compare/sweep covers."""
    points = cfg.sweep_points()
    entries = cfg.controller_entries()
    runs = []
    for point in points:
        sub = cfg.with_overrides(point)
        suffix = ",".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())
        for e in entries:
            if suffix:
                label = f"{e.name}[{suffix}]" if len(entries) > 1 else suffix
            else:
                label = e.name
            runs.append((sub, e, label))
    return runs


def _run_job(job):
    cfg, entry, label = job
    return run_single(cfg, entry, label)


def run_many(jobs, workers: int | None = None) -> list[RunResult]:
    """Run jobs on a bounded process pool; results keep job order."""
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))
