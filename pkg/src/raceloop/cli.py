"""Command-line interface.

Subcommands:
    bench run       execute a worker-count sweep and export artifacts
    bench stats     print interval statistics for a run-log CSV
    track gen-oval  emit a stadium-shaped track CSV
    sim rollout     open-loop dynamics rollout to CSV
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .bench import BenchError, ExperimentConfig, export_results, run_experiment
from .clock import parse_latency
from .configs import load_experiment_config, load_vehicle_params
from .dynamics import ControlInput, VehicleState, default_vehicle_params, simulate
from .runtime import read_runlog_csv
from .stats import interval_stats_from_records
from .track import generate_oval, save_waypoints_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raceloop", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    top = parser.add_subparsers(dest="group", required=True)

    bench = top.add_parser("bench", help="latency benchmark harness")
    bench_sub = bench.add_subparsers(dest="command", required=True)

    run_p = bench_sub.add_parser("run", help="run a worker-count sweep")
    run_p.add_argument("--config", help="experiment config YAML")
    run_p.add_argument("--workers", help="comma-separated worker counts, e.g. 1,2,3")
    run_p.add_argument("--min-gap-ms", type=float)
    run_p.add_argument("--duration-s", type=float)
    run_p.add_argument("--mode", choices=["sim", "wall"])
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--latency", help="const:25 | uniform:15,25 | lognormal:MU,SIG,CAP")
    run_p.add_argument("--controller", choices=["hold", "mpcc"])
    run_p.add_argument("--out", help="output directory")
    run_p.add_argument("--force", action="store_true", help="overwrite existing output")

    stats_p = bench_sub.add_parser("stats", help="stats for a run-log CSV")
    stats_p.add_argument("runlog", help="run-log CSV path")

    track = top.add_parser("track", help="track utilities")
    track_sub = track.add_subparsers(dest="command", required=True)
    oval_p = track_sub.add_parser("gen-oval", help="generate a stadium track CSV")
    oval_p.add_argument("--length", type=float, default=10.0, help="overall length [m]")
    oval_p.add_argument("--width", type=float, default=6.0, help="overall width [m]")
    oval_p.add_argument("--half-width", type=float, default=0.8, help="corridor half width [m]")
    oval_p.add_argument("--n-points", type=int, default=200)
    oval_p.add_argument("--out", required=True, help="output CSV path")

    sim = top.add_parser("sim", help="dynamics utilities")
    sim_sub = sim.add_subparsers(dest="command", required=True)
    roll_p = sim_sub.add_parser("rollout", help="open-loop rollout to CSV")
    roll_p.add_argument("--params", help="vehicle params YAML (default: built-in)")
    roll_p.add_argument("--d", type=float, default=0.0, help="constant duty cycle")
    roll_p.add_argument("--delta", type=float, default=0.0, help="constant steering [rad]")
    roll_p.add_argument("--dt", type=float, default=0.001, help="step [s]")
    roll_p.add_argument("--steps", type=int, default=1000)
    roll_p.add_argument(
        "--x0",
        default="0,0,0,0,0,0",
        help="initial X,Y,phi,vx,vy,omega (comma separated)",
    )
    roll_p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _cmd_bench_run(args) -> int:
    if args.config:
        config = load_experiment_config(args.config)
    else:
        config = ExperimentConfig()
    if args.workers:
        config.worker_counts = [int(w) for w in args.workers.split(",")]
    if args.min_gap_ms is not None:
        config.min_gap_ms = args.min_gap_ms
    if args.duration_s is not None:
        config.duration_s = args.duration_s
    if args.mode:
        config.mode = args.mode
    if args.seed is not None:
        config.seed = args.seed
    if args.latency:
        config.latency = parse_latency(args.latency)
    if args.controller:
        config.controller = args.controller
    if args.out:
        config.out_dir = args.out
    if config.out_dir is None:
        raise BenchError("no output directory (set --out or 'out:' in the config)")

    result = run_experiment(config)
    export_results(result, config.out_dir, force=args.force)
    for cell in result.cells:
        s = cell.stats
        print(
            f"workers={cell.workers} rep={cell.repetition}: "
            f"mean={s.mean_ms:.2f}ms std={s.std_ms:.2f}ms max={s.max_ms:.2f}ms "
            f"p99={s.p99_ms:.2f}ms publishes={s.count + 1}"
        )
    print(f"artifacts written to {config.out_dir}")
    return 0


def _cmd_bench_stats(args) -> int:
    records = read_runlog_csv(args.runlog)
    stats = interval_stats_from_records(records)
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_track_gen_oval(args) -> int:
    pts = generate_oval(args.length, args.width, args.half_width, args.n_points)
    save_waypoints_csv(pts, args.out)
    print(f"wrote {len(pts)} waypoints to {args.out}")
    return 0


def _cmd_sim_rollout(args) -> int:
    params = load_vehicle_params(args.params) if args.params else default_vehicle_params()
    x0 = [float(v) for v in args.x0.split(",")]
    if len(x0) != 6:
        raise ValueError("--x0 needs six comma-separated values")
    state = VehicleState(*x0, timestamp_ns=0)
    traj = simulate(state, ControlInput(args.d, args.delta), params, args.dt, args.steps)
    with open(args.out, "w") as fh:
        fh.write("t_ns,x_m,y_m,phi_rad,vx_mps,vy_mps,omega_radps\n")
        for s in traj:
            fh.write(
                f"{s.timestamp_ns},{s.X!r},{s.Y!r},{s.phi!r},{s.vx!r},{s.vy!r},{s.omega!r}\n"
            )
    print(f"wrote {len(traj)} states to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.group == "bench" and args.command == "run":
            return _cmd_bench_run(args)
        if args.group == "bench" and args.command == "stats":
            return _cmd_bench_stats(args)
        if args.group == "track" and args.command == "gen-oval":
            return _cmd_track_gen_oval(args)
        if args.group == "sim" and args.command == "rollout":
            return _cmd_sim_rollout(args)
        parser.error("unknown command")
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
