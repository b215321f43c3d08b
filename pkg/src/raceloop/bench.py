"""Worker-count sweep harness: run cells, aggregate stats, export artifacts.

Cells run sequentially so wall-mode timing is unperturbed.  Every cell uses
the configured base seed, so sweeps across worker counts compare like for
like on a common latency stream; in simulated mode repetitions of a cell are
therefore identical by construction (repetitions exist for wall mode, where
real timing varies).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .clock import LatencyModel, UniformLatency
from .dynamics import VehicleParams
from .mpcc import MpccConfig
from .runtime import RunConfig, RunLog, run_system
from .stats import IntervalStats, compute_interval_stats, interval_histogram
from .track import Track


class BenchError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    worker_counts: list[int] = field(default_factory=lambda: [1, 2, 3])
    duration_s: float = 10.0
    repetitions: int = 1
    min_gap_ms: float = 10.0
    mode: str = "sim"
    latency: LatencyModel = field(default_factory=lambda: UniformLatency(15.0, 25.0))
    seed: int = 0
    controller: str = "hold"
    pin_cores: bool = False
    elevate_priority: bool = False
    track: Track | None = None
    params: VehicleParams | None = None
    mpcc: MpccConfig = field(default_factory=MpccConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if not self.worker_counts or any(w < 1 for w in self.worker_counts):
            raise ValueError("worker_counts must be non-empty positive integers")
        if self.duration_s < 1.0:
            raise ValueError("duration_s must be >= 1 s")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def run_config(self, workers: int) -> RunConfig:
        return RunConfig(
            mode=self.mode,
            workers=workers,
            min_gap_ms=self.min_gap_ms,
            duration_s=self.duration_s,
            seed=self.seed,
            latency=self.latency,
            controller=self.controller,
            pin_cores=self.pin_cores,
            elevate_priority=self.elevate_priority,
            track=self.track,
            params=self.params,
            mpcc=self.mpcc,
        )


@dataclass
class ExperimentCell:
    workers: int
    repetition: int
    log: RunLog
    stats: IntervalStats


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[ExperimentCell]

    def cell(self, workers: int, repetition: int = 0) -> ExperimentCell:
        for c in self.cells:
            if c.workers == workers and c.repetition == repetition:
                return c
        raise KeyError(f"no cell workers={workers} rep={repetition}")


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute every (worker count, repetition) cell and aggregate stats."""
    cells = []
    for workers in config.worker_counts:
        for rep in range(config.repetitions):
            try:
                log = run_system(config.run_config(workers))
                stats = compute_interval_stats(log)
            except Exception as exc:
                raise BenchError(
                    f"cell workers={workers} repetition={rep} failed: {exc}"
                ) from exc
            cells.append(
                ExperimentCell(workers=workers, repetition=rep, log=log, stats=stats)
            )
    return ExperimentResult(config=config, cells=cells)


def export_results(
    result: ExperimentResult, outdir: str | Path, force: bool = False
) -> None:
    """Write per-cell run logs, summary.json, and the interval histogram.

    Refuses to write into a non-empty directory unless force is set.
    """
    outdir = Path(outdir)
    if outdir.exists() and any(outdir.iterdir()) and not force:
        raise BenchError(
            f"output directory {outdir} is not empty; pass force=True (--force)"
        )
    outdir.mkdir(parents=True, exist_ok=True)

    summary: dict[str, list] = {}
    hist_rows: list[tuple[int, int, int]] = []
    for cell in result.cells:
        stem = f"w{cell.workers}_rep{cell.repetition}"
        cell.log.write_csv(outdir / f"{stem}.csv")
        cell.log.write_header_json(outdir / f"{stem}_header.json")
        summary.setdefault(str(cell.workers), []).append(cell.stats.to_dict())
        if cell.repetition == 0:
            for edge, count in interval_histogram(cell.log.records):
                hist_rows.append((cell.workers, edge, count))

    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(outdir / "intervals_hist.csv", "w") as fh:
        fh.write("workers,bin_ms,count\n")
        for workers, edge, count in hist_rows:
            fh.write(f"{workers},{edge},{count}\n")
