"""Command-line front end.

    armctl run      --config PATH [--out DIR] [--seed N]
    armctl compare  --config PATH [--out DIR] [--workers N] [--seed N]
    armctl plotdata RUNLOG [RUNLOG ...] --kind KIND [--out DIR]
    armctl validate --config PATH

Exit codes: 0 success, 1 configuration or input error, 2 a run went
unstable (plant blow-up). Output files are still written for unstable runs.
"""
from __future__ import annotations

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

import numpy as np

from armctl.config import ConfigError, ExperimentConfig, load_config
from armctl.experiments import RunResult, plan_runs, run_many, run_single
from armctl.model import ModelError
from armctl.simulation import TrajectoryError, read_runlog
from armctl.spatial import euler_zyx, quat_to_matrix

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNSTABLE = 2

METRIC_COLUMNS = ["label", "controller", "t0_s", "t1_s", "n", "e_p_m", "e_phi_rad",
                  "V_rad_per_s", "T_nm", "gimbal_flags", "unstable"]
PLOT_KINDS = ("cartesian", "joint_pos", "joint_vel", "joint_torque")

log = logging.getLogger("armctl")


def _err(msg: str) -> None:
    print(f"armctl: error: {msg}", file=sys.stderr)


def _safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=,-]+", "_", label) or "run"


def _metric_rows(res: RunResult) -> list[list]:
    rows = []
    for m in res.metrics:
        rows.append([res.label, res.controller, repr(m.window[0]), repr(m.window[1]), m.n,
                     repr(m.e_p), repr(m.e_phi), repr(m.V), repr(m.T), m.gimbal_flags,
                     int(res.log.unstable)])
    return rows


def write_metrics(results, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in results:
            w.writerows(_metric_rows(r))


def read_metrics(path) -> list[dict]:
    """Rows of a metrics/comparison CSV with numeric fields converted."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("t0_s", "t1_s", "e_p_m", "e_phi_rad", "V_rad_per_s", "T_nm"):
            r[k] = float(r[k])
        for k in ("n", "gimbal_flags", "unstable"):
            r[k] = int(r[k])
    return rows


def _load(path, seed) -> ExperimentConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_run(config, out=None, seed=None) -> int:
    """Run the config's single controller; writes runlog.csv and metrics.csv."""
    try:
        cfg = _load(config, seed) if not isinstance(config, ExperimentConfig) else config
        out_dir = Path(out) if out is not None else Path(cfg.output_dir)
        entry = cfg.controller_entries()[0]
        res = run_single(cfg, entry)
    except (ConfigError, ModelError, TrajectoryError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out_dir.mkdir(parents=True, exist_ok=True)
    res.log.write_csv(out_dir / "runlog.csv")
    write_metrics([res], out_dir / "metrics.csv")
    if res.log.unstable:
        _err(f"run {res.label!r} went unstable at t = {res.log.t[-1]:.3f} s")
        return EXIT_UNSTABLE
    return EXIT_OK


def cmd_compare(config, out=None, workers=None, seed=None) -> int:
    """Run every controller (and sweep point) on the same reference."""
    try:
        cfg = _load(config, seed) if not isinstance(config, ExperimentConfig) else config
        jobs = plan_runs(cfg)
        if len(jobs) < 2:
            raise ConfigError("controllers", "compare needs at least two controllers or a sweep")
        out_dir = Path(out) if out is not None else Path(cfg.output_dir)
        results = run_many(jobs, workers if workers is not None else cfg.workers)
    except (ConfigError, ModelError, TrajectoryError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in results:
        d = out_dir / _safe_name(res.label)
        d.mkdir(exist_ok=True)
        res.log.write_csv(d / "runlog.csv")
        write_metrics([res], d / "metrics.csv")
    write_metrics(results, out_dir / "comparison.csv")
    bad = [r.label for r in results if r.log.unstable]
    if bad:
        _err("unstable runs: " + ", ".join(bad))
        return EXIT_UNSTABLE
    return EXIT_OK


def plot_series(logs, kind: str) -> list[tuple[float, str, float]]:
    """Long-format (t, series, value) rows for one plot kind."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r} (expected one of {', '.join(PLOT_KINDS)})")
    dts = {round(float(lg.dt), 12) for lg in logs if lg.ticks > 1}
    if len(dts) > 1:
        raise ValueError(f"run logs have different tick rates: {sorted(dts)}")
    rows = []
    for lg in logs:
        prefix = f"{lg.label}/" if len(logs) > 1 else ""
        series: dict[str, np.ndarray] = {}
        if kind == "cartesian":
            for which, pose in (("actual", lg.pose_actual), ("desired", lg.pose_des)):
                ang = np.array([euler_zyx(quat_to_matrix(qq)) for qq in pose[:, 3:]]).reshape(-1, 3)
                for i, ax in enumerate("xyz"):
                    series[f"{ax}_{which}"] = pose[:, i]
                for i, ax in enumerate(("yaw", "pitch", "roll")):
                    series[f"{ax}_{which}"] = ang[:, i]
        else:
            data = {"joint_pos": lg.q, "joint_vel": lg.qd, "joint_torque": lg.tau_raw}[kind]
            for j in range(data.shape[1]):
                series[f"joint_{j + 1}"] = data[:, j]
        for name, vals in series.items():
            rows.extend((t, prefix + name, v) for t, v in zip(lg.t, vals))
    return rows


def cmd_plotdata(runlogs, kind: str, out=None, labels=None) -> int:
    try:
        paths = [Path(p) for p in runlogs]
        if labels is None:
            labels = [p.parent.name or p.stem for p in paths]
            if len(set(labels)) < len(labels):
                labels = [f"run{i + 1}" for i in range(len(paths))]
        logs = [read_runlog(p, label=lab) for p, lab in zip(paths, labels)]
        rows = plot_series(logs, kind)
    except (OSError, ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out_dir = Path(out) if out is not None else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / f"plotdata_{kind}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "series", "value"])
        w.writerows((repr(float(t)), s, repr(float(v))) for t, s, v in rows)
    return EXIT_OK


def read_plotdata(path) -> list[tuple[float, str, float]]:
    with Path(path).open(newline="") as fh:
        return [(float(r["t"]), r["series"], float(r["value"])) for r in csv.DictReader(fh)]


def cmd_validate(config) -> int:
    try:
        cfg = load_config(config)
    except (ConfigError, ModelError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    runs = len(plan_runs(cfg))
    print(f"ok: {cfg.controller_entries()[0].kind if runs == 1 else f'{runs} runs'}, "
          f"{cfg.duration_s:g} s at dt = {cfg.dt_s:g} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="armctl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one controller")
    r.add_argument("--config", required=True, help="config file or preset name")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.add_argument("--seed", type=int)

    c = sub.add_parser("compare", help="simulate several controllers or a parameter sweep")
    c.add_argument("--config", required=True)
    c.add_argument("--out")
    c.add_argument("--workers", type=int)
    c.add_argument("--seed", type=int)

    d = sub.add_parser("plotdata", help="long-format plot data from run logs")
    d.add_argument("runlogs", nargs="+")
    d.add_argument("--kind", choices=PLOT_KINDS, default="cartesian")
    d.add_argument("--out")

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed)
    if args.command == "compare":
        if args.workers is not None and args.workers < 1:
            _err("--workers must be at least 1")
            return EXIT_CONFIG
        return cmd_compare(args.config, args.out, args.workers, args.seed)
    if args.command == "plotdata":
        return cmd_plotdata(args.runlogs, args.kind, args.out)
    return cmd_validate(args.config)


if __name__ == "__main__":
    sys.exit(main())
