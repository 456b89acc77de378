"""Manipulator description: screw axes, home pose, link inertias and limits."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from armctl.spatial import Pose

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)
SHIPPED_MODELS = ("h1_arm_7dof",)

# Bent-elbow posture of the shipped arm, well away from its singularities
# (the home configuration hangs straight and is singular).
READY_Q = (0.0, 0.25, 0.0, 1.3, 0.0, 0.3, 0.0)


class ModelError(ValueError):
    """Raised when a model file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class ScrewAxis:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _vec(self.omega, 3))
        object.__setattr__(self, "v", _vec(self.v, 3))

    def as_array(self) -> np.ndarray:
        """(omega; v) 6-vector."""
        return np.concatenate((self.omega, self.v))


@dataclass(frozen=True)
class LinkInertia:
    """Mass properties of one link.

    `com` and `inertia` are expressed in base-frame axes with the arm at
    q = 0; `inertia` is taken about the centre of mass.
    """

    mass: float
    com: np.ndarray
    inertia: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "com", _vec(self.com, 3))
        I = np.array(self.inertia, dtype=float)
        if I.shape != (3, 3):
            raise ModelError(f"inertia must be 3x3, got shape {I.shape}")
        I.flags.writeable = False
        object.__setattr__(self, "inertia", I)


@dataclass(frozen=True)
class JointLimits:
    q_min: np.ndarray
    q_max: np.ndarray
    qd_min: np.ndarray
    qd_max: np.ndarray
    tau_min: np.ndarray
    tau_max: np.ndarray

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, _vec(getattr(self, f.name)))


@dataclass(frozen=True)
class RobotModel:
    n: int
    axes: tuple
    home: Pose
    links: tuple
    limits: JointLimits
    gravity: np.ndarray = dataclasses.field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "gravity", _vec(self.gravity, 3))

    # flat arrays consumed by the numba kernels
    @cached_property
    def screws(self) -> np.ndarray:
        return np.ascontiguousarray([a.as_array() for a in self.axes], dtype=float).reshape(self.n, 6)

    @cached_property
    def home_matrix(self) -> np.ndarray:
        return self.home.as_matrix()

    @cached_property
    def masses(self) -> np.ndarray:
        return np.array([l.mass for l in self.links], dtype=float)

    @cached_property
    def coms(self) -> np.ndarray:
        return np.ascontiguousarray([l.com for l in self.links], dtype=float).reshape(self.n, 3)

    @cached_property
    def inertias(self) -> np.ndarray:
        return np.ascontiguousarray([l.inertia for l in self.links], dtype=float).reshape(self.n, 3, 3)

    def replace(self, **changes) -> "RobotModel":
        """Copy with some fields replaced (cached arrays are rebuilt)."""
        return dataclasses.replace(self, **changes)

    def with_gravity(self, gravity) -> "RobotModel":
        return self.replace(gravity=np.asarray(gravity, dtype=float))

    def clamp_q(self, q) -> np.ndarray:
        return np.clip(q, self.limits.q_min, self.limits.q_max)


def _vec(x, size: int | None = None) -> np.ndarray:
    a = np.array(x, dtype=float).reshape(-1)
    if size is not None and a.shape != (size,):
        raise ModelError(f"expected a {size}-vector, got {x!r}")
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_model(model: RobotModel) -> list[str]:
    """Return one human-readable message per violated invariant (empty if valid).

    Joint and link numbers in the messages are 1-based.
    """
    out: list[str] = []
    n = model.n
    if n < 1:
        return [f"n: must be positive, got {n}"]
    if len(model.axes) != n:
        out.append(f"axes: expected {n} entries, got {len(model.axes)}")
    if len(model.links) != n:
        out.append(f"links: expected {n} entries, got {len(model.links)}")

    for i, ax in enumerate(model.axes, start=1):
        wn = np.linalg.norm(ax.omega)
        if abs(wn - 1.0) <= 1e-9:
            continue
        if wn <= 1e-9:
            if abs(np.linalg.norm(ax.v) - 1.0) > 1e-9:
                out.append(f"joint {i}/axis: prismatic axis needs |v| = 1, got {np.linalg.norm(ax.v):.6g}")
        else:
            out.append(f"joint {i}/axis: |omega| must be 0 or 1, got {wn:.6g}")

    for i, link in enumerate(model.links, start=1):
        if not link.mass > 0.0:
            out.append(f"link {i}/mass: must be > 0, got {link.mass}")
        I = link.inertia
        if np.abs(I - I.T).max() > 1e-12:
            out.append(f"link {i}/inertia: not symmetric")
            continue
        eig = np.linalg.eigvalsh(I)
        if eig.min() <= 0.0:
            out.append(f"link {i}/inertia: not positive-definite (min eigenvalue {eig.min():.6g})")
            continue
        a, b, c = eig
        if a + b < c - 1e-12:
            out.append(f"link {i}/inertia: principal moments violate the triangle inequality")

    lim = model.limits
    for name in ("q_min", "q_max", "qd_min", "qd_max", "tau_min", "tau_max"):
        arr = getattr(lim, name)
        if arr.shape != (n,):
            out.append(f"limits.{name}: expected {n} entries, got {arr.size}")
    if not out:
        for j in range(n):
            k = j + 1
            if not lim.q_min[j] < lim.q_max[j]:
                out.append(f"joint {k}/limits: q_min must be < q_max")
            if not lim.qd_min[j] < 0.0 < lim.qd_max[j]:
                out.append(f"joint {k}/limits: need qd_min < 0 < qd_max")
            if not lim.tau_min[j] < 0.0 < lim.tau_max[j]:
                out.append(f"joint {k}/limits: need tau_min < 0 < tau_max")

    R = model.home.rotation_matrix
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
        out.append("home/rotation: not a proper rotation")
    if not np.all(np.isfinite(model.gravity)):
        out.append("gravity: must be finite")
    return out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def model_to_dict(model: RobotModel) -> dict:
    lim = model.limits
    return {
        "n": model.n,
        "axes": [{"omega": a.omega.tolist(), "v": a.v.tolist()} for a in model.axes],
        "home": {"rotation": model.home.rotation.tolist(),
                 "translation": model.home.translation.tolist()},
        "links": [{"mass": l.mass, "com": l.com.tolist(), "inertia": l.inertia.tolist()}
                  for l in model.links],
        "limits": {k: getattr(lim, k).tolist()
                   for k in ("q_min", "q_max", "qd_min", "qd_max", "tau_min", "tau_max")},
        "gravity": model.gravity.tolist(),
    }


def model_from_dict(data: dict, name: str = "") -> RobotModel:
    if not isinstance(data, dict):
        raise ModelError("model file must contain a mapping at top level")
    try:
        n = int(data["n"])
        axes = [ScrewAxis(a["omega"], a["v"]) for a in data["axes"]]
        home = data["home"]
        rot = np.asarray(home["rotation"], dtype=float)
        if rot.shape != (4,) or np.linalg.norm(rot) == 0.0:
            raise ModelError("home.rotation must be a nonzero quaternion (w, x, y, z)")
        links = [LinkInertia(l["mass"], l["com"], l["inertia"]) for l in data["links"]]
        lim = data["limits"]
        limits = JointLimits(**{k: lim[k] for k in
                                ("q_min", "q_max", "qd_min", "qd_max", "tau_min", "tau_max")})
        gravity = data.get("gravity", DEFAULT_GRAVITY)
    except KeyError as exc:
        raise ModelError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed field: {exc}") from None
    return RobotModel(n=n, axes=axes, home=Pose(rot, home["translation"]), links=links,
                      limits=limits, gravity=gravity, name=name)


def write_model(model: RobotModel, path) -> None:
    Path(path).write_text(yaml.safe_dump(model_to_dict(model), sort_keys=False))


def resolve_model_path(path) -> Path:
    """Accept a file path or the bare name of a shipped model."""
    if str(path) in SHIPPED_MODELS:
        return Path(str(resources.files("armctl") / "data" / f"{path}.yaml"))
    return Path(path)


def load_model(path) -> RobotModel:
    path = resolve_model_path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelError(f"cannot parse model file {path}: {exc}") from None
    model = model_from_dict(data, name=path.stem)
    problems = validate_model(model)
    if problems:
        raise ModelError(f"invalid model {path}: " + "; ".join(problems))
    return model


def default_model() -> RobotModel:
    return load_model("h1_arm_7dof")
