"""YAML config loading for vehicle parameters, run configs, and experiments.

Vehicle parameter schema (units SI):

    m: 3.47            # kg
    lf: 0.15           # m, front axle to COG
    lr: 0.17           # m, rear axle to COG
    Iz: 0.04           # kg m^2
    tire_front: {B: 5.0, C: 1.2, D: 11.914245}
    tire_rear:  {B: 5.0, C: 1.2, D: 11.914245}
    drivetrain: {Cm1: 12.0, Cm2: 2.5, Cr0: 0.6, Cr2: 0.1}
    d_min: -1.0
    d_max: 1.0
    delta_max: 0.4     # rad
    vx_guard: 0.3      # m/s

Run / experiment config keys (all optional, shown with defaults):

    mode: sim                  # sim | wall
    workers: [1, 2, 3]         # experiment sweep; single int for one run
    min_gap_ms: 10
    duration_s: 10
    repetitions: 1
    seed: 0
    latency: "uniform:15,25"   # const:MS | uniform:LO,HI | lognormal:MU,SIG,CAP
    controller: hold           # hold | mpcc
    pinning: false
    priority: false
    track: path/to/track.csv   # omitted -> built-in oval
    params: path/to/vehicle.yaml
    out: results/
    mpcc: {N: 20, Ts: 0.025, ...}   # MpccConfig fields
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .bench import ExperimentConfig
from .clock import parse_latency
from .dynamics import DrivetrainCoeffs, PacejkaCoeffs, VehicleParams
from .mpcc import MpccConfig
from .runtime import RunConfig
from .track import build_track, load_waypoints_csv


def load_vehicle_params(path: str | Path) -> VehicleParams:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        return VehicleParams(
            m=float(raw["m"]),
            lf=float(raw["lf"]),
            lr=float(raw["lr"]),
            Iz=float(raw["Iz"]),
            tire_front=PacejkaCoeffs(**{k: float(v) for k, v in raw["tire_front"].items()}),
            tire_rear=PacejkaCoeffs(**{k: float(v) for k, v in raw["tire_rear"].items()}),
            drivetrain=DrivetrainCoeffs(
                **{k: float(v) for k, v in raw["drivetrain"].items()}
            ),
            d_min=float(raw.get("d_min", -1.0)),
            d_max=float(raw.get("d_max", 1.0)),
            delta_max=float(raw.get("delta_max", 0.4)),
            vx_guard=float(raw.get("vx_guard", 0.3)),
        )
    except KeyError as exc:
        raise ValueError(f"vehicle params file {path} missing key {exc}") from exc


def save_vehicle_params(params: VehicleParams, path: str | Path) -> None:
    doc = {
        "m": params.m,
        "lf": params.lf,
        "lr": params.lr,
        "Iz": params.Iz,
        "tire_front": vars(params.tire_front).copy(),
        "tire_rear": vars(params.tire_rear).copy(),
        "drivetrain": vars(params.drivetrain).copy(),
        "d_min": params.d_min,
        "d_max": params.d_max,
        "delta_max": params.delta_max,
        "vx_guard": params.vx_guard,
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _mpcc_from_dict(raw: dict) -> MpccConfig:
    valid = {f.name for f in fields(MpccConfig)}
    unknown = set(raw) - valid
    if unknown:
        raise ValueError(f"unknown mpcc config keys: {sorted(unknown)}")
    return MpccConfig(**raw)


def _resolve_common(raw: dict, base_dir: Path) -> dict:
    out: dict = {}
    if "latency" in raw:
        out["latency"] = parse_latency(str(raw["latency"]))
    if "track" in raw and raw["track"]:
        out["track"] = build_track(load_waypoints_csv(base_dir / raw["track"]))
    if "params" in raw and raw["params"]:
        out["params"] = load_vehicle_params(base_dir / raw["params"])
    if "mpcc" in raw and raw["mpcc"]:
        out["mpcc"] = _mpcc_from_dict(raw["mpcc"])
    return out


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment (sweep) config; relative paths resolve next to it."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    kw = _resolve_common(raw, path.parent)
    workers = raw.get("workers", [1, 2, 3])
    if isinstance(workers, int):
        workers = [workers]
    kw["worker_counts"] = [int(w) for w in workers]
    for src, dst in (
        ("duration_s", "duration_s"),
        ("repetitions", "repetitions"),
        ("min_gap_ms", "min_gap_ms"),
        ("mode", "mode"),
        ("seed", "seed"),
        ("controller", "controller"),
        ("pinning", "pin_cores"),
        ("priority", "elevate_priority"),
        ("out", "out_dir"),
    ):
        if src in raw:
            kw[dst] = raw[src]
    return ExperimentConfig(**kw)


def load_run_config(path: str | Path) -> RunConfig:
    """Read a single-run config (workers must be a single integer)."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    kw = _resolve_common(raw, path.parent)
    for src, dst in (
        ("mode", "mode"),
        ("workers", "workers"),
        ("min_gap_ms", "min_gap_ms"),
        ("duration_s", "duration_s"),
        ("seed", "seed"),
        ("controller", "controller"),
        ("pinning", "pin_cores"),
        ("priority", "elevate_priority"),
        ("decimation", "trajectory_decimation"),
        ("input_topic", "input_topic"),
    ):
        if src in raw:
            kw[dst] = raw[src]
    return RunConfig(**kw)
