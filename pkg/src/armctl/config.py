"""Experiment configuration files.

Configs are YAML with the physical unit spelled into each key name
(`dt_s`, `k_des_trans_n_per_m`, ...). Relative paths inside a config are
resolved against the config file's directory (except `output_dir`, which is
relative to the working directory); the bare names of shipped
models, trajectories and presets resolve to package data.
"""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from armctl.controllers import (CONTROLLER_KINDS, DLSParams, NullspaceMode, QPControllerParams,
                                DEFAULT_DT, DEFAULT_K_DES, DEFAULT_SELECTION, DEFAULT_W_JOINT,
                                DEFAULT_W_TRACK)
from armctl.model import READY_Q, SHIPPED_MODELS, resolve_model_path
from armctl.qp import QPSettings

PRESETS = ("qp_default", "weight_sweep", "nullspace_compare", "controller_compare",
           "singular_compare")
SHIPPED_TRAJECTORIES = ("sample_lissajous",)
TRAJECTORY_KINDS = ("file", "lissajous", "circle", "step")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DLSConfig:
    damping_lambda: float = 0.01
    epsilon: float = 0.005
    feedback_gain_max_per_s: float = 10.0


@dataclass(frozen=True)
class QPConfig:
    k_des_trans_n_per_m: tuple = DEFAULT_K_DES[:3]
    k_des_rot_nm_per_rad: tuple = DEFAULT_K_DES[3:]
    selection: tuple = DEFAULT_SELECTION
    w_track: float = DEFAULT_W_TRACK
    w_joint: float = DEFAULT_W_JOINT
    k_null_per_s2: float = 40.0
    d_null_per_s: float = float(2.0 * np.sqrt(40.0))
    q_null_target_rad: tuple | None = None
    nullspace_mode: str = "fixed"
    lambda_threshold: float = 1.02
    hysteresis: bool = False
    weight_exponent: float = 1.0


@dataclass(frozen=True)
class SolverConfig:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 4000


@dataclass(frozen=True)
class TrajectoryConfig:
    """Reference source: a CSV file or one of the synthetic shapes.

    Centre position/orientation left as None default to the end-effector
    pose at the initial configuration.
    """

    kind: str = "lissajous"
    file: str | None = None
    rate_hz: float = 100.0
    center_position_m: tuple | None = None
    center_quat: tuple | None = None
    amplitude_m: tuple = (0.05, 0.05, 0.05)
    frequency_hz: tuple = (0.2, 0.3, 0.25)
    phase_rad: tuple = (0.0, 0.0, 0.0)
    rot_amplitude_rad: tuple = (0.0, 0.0, 0.0)
    radius_m: float = 0.0
    circle_frequency_hz: float = 0.5
    circle_normal: str = "x"
    step_m: tuple = (0.0, 0.0, 0.0)
    rot_step_rad: tuple = (0.0, 0.0, 0.0)
    step_time_s: float = 0.5
    noise_std_m: float = 0.0


@dataclass(frozen=True)
class ControllerEntry:
    """One controller in a comparison: a kind plus parameter overrides.

    Override keys are field names of the `dls` or `qp` sections.
    """

    kind: str
    label: str = ""
    overrides: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "h1_arm_7dof"
    controller: str = "qp"
    controllers: tuple = ()
    dls: DLSConfig = field(default_factory=DLSConfig)
    qp: QPConfig = field(default_factory=QPConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    servo_bandwidth_rad_per_s: float = 100.0
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    initial_q_rad: tuple = READY_Q
    dt_s: float = DEFAULT_DT
    duration_s: float = 8.0
    windows_s: tuple = ()
    output_dir: str = "out"
    seed: int = 0
    workers: int | None = None
    sweep: dict = field(default_factory=dict)
    base_dir: str = field(default=".", compare=False)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- derived objects ---------------------------------------------------

    def controller_entries(self) -> list[ControllerEntry]:
        return list(self.controllers) or [ControllerEntry(self.controller)]

    def metric_windows(self) -> list[tuple]:
        return [tuple(w) for w in self.windows_s] or [(0.0, self.duration_s)]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def model_path(self) -> Path:
        if self.model in SHIPPED_MODELS:
            return resolve_model_path(self.model)
        return self.resolve(self.model)

    def trajectory_path(self) -> Path | None:
        f = self.trajectory.file
        if f is None:
            return None
        if f in SHIPPED_TRAJECTORIES:
            return Path(str(resources.files("armctl") / "data" / f"{f}.csv"))
        return self.resolve(f)

    def dls_params(self, overrides: dict | None = None) -> DLSParams:
        d = dataclasses.replace(self.dls, **_section(overrides, DLSConfig))
        return DLSParams(damping_lambda=d.damping_lambda, epsilon=d.epsilon, dt=self.dt_s,
                         feedback_gain_max=d.feedback_gain_max_per_s)

    def qp_params(self, overrides: dict | None = None, n: int = 7) -> QPControllerParams:
        c = dataclasses.replace(self.qp, **_section(overrides, QPConfig))
        return QPControllerParams(
            k_des=tuple(c.k_des_trans_n_per_m) + tuple(c.k_des_rot_nm_per_rad),
            selection=c.selection, w_track=c.w_track, w_joint=c.w_joint,
            k_null=c.k_null_per_s2, d_null=c.d_null_per_s, q_null_target=c.q_null_target_rad,
            dt=self.dt_s, nullspace_mode=c.nullspace_mode, lambda_threshold=c.lambda_threshold,
            hysteresis=c.hysteresis, weight_exponent=c.weight_exponent, n=n)

    def solver_settings(self) -> QPSettings:
        s = self.solver
        return QPSettings(eps_abs=s.eps_abs, eps_rel=s.eps_rel, max_iter=s.max_iter)

    def sweep_points(self) -> list[dict]:
        """Cartesian product of the sweep axes, as dotted-name -> value maps."""
        if not self.sweep:
            return [{}]
        names = list(self.sweep)
        return [dict(zip(names, vals)) for vals in itertools.product(*self.sweep.values())]

    def with_overrides(self, point: dict) -> "ExperimentConfig":
        """Apply a sweep point such as {"qp.w_track": 30}."""
        cfg = self
        for name, value in point.items():
            section, _, key = name.partition(".")
            if key:
                sub = dataclasses.replace(getattr(cfg, section), **{key: _coerce(value)})
                cfg = dataclasses.replace(cfg, **{section: sub})
            else:
                cfg = dataclasses.replace(cfg, **{section: _coerce(value)})
        return cfg


def _section(overrides, cls) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: _coerce(v) for k, v in (overrides or {}).items() if k in names}


def _coerce(v):
    return tuple(_coerce(x) for x in v) if isinstance(v, (list, tuple)) else v


# ---------------------------------------------------------------------------
# dict <-> config
# ---------------------------------------------------------------------------

_SECTIONS = {"dls": DLSConfig, "qp": QPConfig, "solver": SolverConfig,
             "trajectory": TrajectoryConfig}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name == "base_dir":
            continue
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = {g.name: _plain(getattr(v, g.name)) for g in dataclasses.fields(v)}
        elif f.name == "controllers":
            v = [{"kind": e.kind, "label": e.label, **_plain(e.overrides)} for e in v]
        out[f.name] = _plain(v)
    return out


def _build_section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(name, "must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    return cls(**{k: _coerce(v) for k, v in data.items()})


def config_from_dict(data: dict, base_dir=".") -> ExperimentConfig:
    """Build and validate a config from parsed YAML."""
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    kw = {}
    for key, val in data.items():
        if key not in known:
            raise ConfigError(key, "unknown field")
        if key in _SECTIONS:
            kw[key] = _build_section(_SECTIONS[key], val, key)
        elif key == "controllers":
            kw[key] = tuple(_parse_entry(e, i) for i, e in enumerate(val or ()))
        elif key == "sweep":
            if val is not None and not isinstance(val, dict):
                raise ConfigError("sweep", "must map parameter names to value lists")
            kw[key] = {k: _coerce(v) for k, v in (val or {}).items()}
        else:
            kw[key] = _coerce(val)
    cfg = ExperimentConfig(**kw, base_dir=str(base_dir))
    validate_config(cfg)
    return cfg


def _parse_entry(e, i) -> ControllerEntry:
    if isinstance(e, str):
        return ControllerEntry(e)
    if not isinstance(e, dict) or "kind" not in e:
        raise ConfigError(f"controllers[{i}]", "needs a kind")
    rest = {k: _coerce(v) for k, v in e.items() if k not in ("kind", "label")}
    return ControllerEntry(e["kind"], e.get("label", "") or "", rest)


def validate_config(cfg: ExperimentConfig, check_files: bool = True) -> None:
    """Raise ConfigError naming the first bad field."""
    if cfg.controller not in CONTROLLER_KINDS:
        raise ConfigError("controller", f"unknown controller {cfg.controller!r} "
                          f"(expected one of {', '.join(CONTROLLER_KINDS)})")
    param_names = ({f.name for f in dataclasses.fields(DLSConfig)}
                   | {f.name for f in dataclasses.fields(QPConfig)})
    labels = set()
    for i, e in enumerate(cfg.controllers):
        if e.kind not in CONTROLLER_KINDS:
            raise ConfigError(f"controllers[{i}].kind", f"unknown controller {e.kind!r}")
        for k in e.overrides:
            if k not in param_names:
                raise ConfigError(f"controllers[{i}].{k}", "not a controller parameter")
        if e.name in labels:
            raise ConfigError(f"controllers[{i}].label", f"duplicate label {e.name!r}")
        labels.add(e.name)
    if cfg.dt_s <= 0:
        raise ConfigError("dt_s", "must be positive")
    if cfg.duration_s < 0:
        raise ConfigError("duration_s", "must be non-negative")
    if cfg.servo_bandwidth_rad_per_s <= 0:
        raise ConfigError("servo_bandwidth_rad_per_s", "must be positive")
    if cfg.workers is not None and cfg.workers < 1:
        raise ConfigError("workers", "must be at least 1")
    for i, w in enumerate(cfg.windows_s):
        if len(w) != 2 or not (0 <= w[0] < w[1] <= cfg.duration_s + 1e-9):
            raise ConfigError(f"windows_s[{i}]", "need 0 <= t0 < t1 <= duration_s")
    t = cfg.trajectory
    if t.kind not in TRAJECTORY_KINDS:
        raise ConfigError("trajectory.kind", f"unknown kind {t.kind!r} "
                          f"(expected one of {', '.join(TRAJECTORY_KINDS)})")
    if t.kind == "file" and not t.file:
        raise ConfigError("trajectory.file", "required when kind is 'file'")
    if t.rate_hz <= 0:
        raise ConfigError("trajectory.rate_hz", "must be positive")
    if t.circle_normal not in ("x", "y", "z"):
        raise ConfigError("trajectory.circle_normal", "must be x, y or z")
    if cfg.qp.nullspace_mode not in {m.value for m in NullspaceMode}:
        raise ConfigError("qp.nullspace_mode", "must be 'fixed' or 'dynamic'")
    for name, values in cfg.sweep.items():
        section, _, key = name.partition(".")
        sub = getattr(cfg, section, None) if key else None
        ok = (dataclasses.is_dataclass(sub) and key in {f.name for f in dataclasses.fields(sub)}
              ) or (not key and section in {f.name for f in dataclasses.fields(cfg)})
        if not ok:
            raise ConfigError(f"sweep.{name}", "not a parameter name")
        if not isinstance(values, tuple) or not values:
            raise ConfigError(f"sweep.{name}", "needs a non-empty list of values")
    if check_files:
        if not cfg.model_path().is_file():
            raise ConfigError("model", f"file not found: {cfg.model_path()}")
        tp = cfg.trajectory_path()
        if t.kind == "file" and not tp.is_file():
            raise ConfigError("trajectory.file", f"file not found: {tp}")
    # parameter-level checks live in the controller parameter classes
    for i, e in enumerate(cfg.controller_entries()):
        try:
            cfg.dls_params(e.overrides)
            cfg.qp_params(e.overrides, n=len(cfg.initial_q_rad))
        except (ValueError, TypeError) as exc:
            where = f"controllers[{i}]" if cfg.controllers else "qp"
            raise ConfigError(where, str(exc)) from None


def resolve_config_path(path) -> Path:
    if str(path) in PRESETS:
        return Path(str(resources.files("armctl") / "configs" / f"{path}.yaml"))
    return Path(path)


def load_config(path) -> ExperimentConfig:
    path = resolve_config_path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    return config_from_dict(data or {}, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
