#!/usr/bin/env python3
"""Worker-count sweep over several latency models.

Runs the simulated pool at W = 1, 2, 3 under a narrow uniform and a
heavy-tailed lognormal latency model, prints the interval statistics table,
and writes plot-ready artifacts per model under the output directory.

Usage:
    python scripts/run_worker_sweep.py [--out results/sweep] [--duration-s 10]
"""

import argparse
from pathlib import Path

from raceloop.bench import ExperimentConfig, export_results, run_experiment
from raceloop.clock import LognormalLatency, UniformLatency


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/sweep")
    parser.add_argument("--duration-s", type=float, default=10.0)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    models = {
        "uniform_15_25": UniformLatency(15.0, 25.0),
        "lognormal_heavy": LognormalLatency(3.0, 0.6, 100.0),
    }
    for name, model in models.items():
        config = ExperimentConfig(
            worker_counts=[1, 2, 3],
            duration_s=args.duration_s,
            min_gap_ms=10.0,
            latency=model,
            seed=args.seed,
            controller="hold",
        )
        result = run_experiment(config)
        print(f"\n=== latency model: {model} ===")
        print(f"{'W':>3} {'mean':>8} {'std':>8} {'max':>8} {'p99':>8} {'stale':>6}")
        for cell in result.cells:
            s = cell.stats
            print(
                f"{cell.workers:>3} {s.mean_ms:>8.2f} {s.std_ms:>8.2f} "
                f"{s.max_ms:>8.2f} {s.p99_ms:>8.2f} {s.stale_discards:>6}"
            )
        outdir = Path(args.out) / name
        export_results(result, outdir, force=args.force)
        print(f"artifacts: {outdir}")


if __name__ == "__main__":
    main()
