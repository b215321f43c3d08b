"""Publish-interval statistics aggregated from run logs.

Percentiles use the nearest-rank definition on sorted data (no interpolation)
so results are exactly reproducible across implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .runtime import GATE_DISCARD, PUBLISHED, PUBLISHED_HELD, STALE_DISCARD, RunLog, RunRecord

NS_PER_MS = 1_000_000


@dataclass(frozen=True)
class WorkerSolveStats:
    count: int
    mean_ms: float
    max_ms: float


@dataclass(frozen=True)
class IntervalStats:
    count: int  # number of intervals = publishes - 1
    mean_ms: float
    std_ms: float  # population standard deviation
    min_ms: float
    max_ms: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    gate_discards: int
    stale_discards: int
    per_worker: dict[int, WorkerSolveStats] = field(default_factory=dict)

    def __post_init__(self):
        if not (
            self.min_ms <= self.p50_ms <= self.p95_ms <= self.p99_ms <= self.max_ms
        ):
            raise ValueError("percentile ordering violated")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "p50_ms": self.p50_ms,
            "p95_ms": self.p95_ms,
            "p99_ms": self.p99_ms,
            "gate_discards": self.gate_discards,
            "stale_discards": self.stale_discards,
            "per_worker": {
                str(w): {"count": s.count, "mean_ms": s.mean_ms, "max_ms": s.max_ms}
                for w, s in sorted(self.per_worker.items())
            },
        }


def nearest_rank(sorted_values, pct: float):
    """Nearest-rank percentile of pre-sorted data."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no values")
    return sorted_values[max(0, math.ceil(pct / 100.0 * n) - 1)]


def interval_stats_from_records(records: list[RunRecord]) -> IntervalStats:
    """Compute interval statistics from run-log records.

    Intervals are wall-time gaps between consecutive published commands;
    requires at least two publishes.
    """
    published = [r for r in records if r.flag in (PUBLISHED, PUBLISHED_HELD)]
    if len(published) < 2:
        raise ValueError(f"need at least 2 publishes, got {len(published)}")
    times = [r.event_time_ns for r in published]
    intervals_ms = [(b - a) / NS_PER_MS for a, b in zip(times, times[1:])]
    ordered = sorted(intervals_ms)
    n = len(ordered)
    mean = sum(intervals_ms) / n
    var = sum((v - mean) ** 2 for v in intervals_ms) / n

    per_worker: dict[int, WorkerSolveStats] = {}
    by_worker: dict[int, list[int]] = {}
    for r in published:
        by_worker.setdefault(r.worker_id, []).append(r.solve_ns)
    for wid, solves in by_worker.items():
        per_worker[wid] = WorkerSolveStats(
            count=len(solves),
            mean_ms=sum(solves) / len(solves) / NS_PER_MS,
            max_ms=max(solves) / NS_PER_MS,
        )

    return IntervalStats(
        count=n,
        mean_ms=mean,
        std_ms=math.sqrt(var),
        min_ms=ordered[0],
        max_ms=ordered[-1],
        p50_ms=nearest_rank(ordered, 50),
        p95_ms=nearest_rank(ordered, 95),
        p99_ms=nearest_rank(ordered, 99),
        gate_discards=sum(1 for r in records if r.flag == GATE_DISCARD),
        stale_discards=sum(1 for r in records if r.flag == STALE_DISCARD),
        per_worker=per_worker,
    )


def compute_interval_stats(log: RunLog) -> IntervalStats:
    return interval_stats_from_records(log.records)


def interval_histogram(records: list[RunRecord], bin_ms: float = 1.0):
    """(bin lower edge, count) pairs over publish intervals; 1 ms bins."""
    published = [r for r in records if r.flag in (PUBLISHED, PUBLISHED_HELD)]
    times = [r.event_time_ns for r in published]
    counts: dict[int, int] = {}
    for a, b in zip(times, times[1:]):
        edge = int((b - a) / NS_PER_MS // bin_ms * bin_ms)
        counts[edge] = counts.get(edge, 0) + 1
    return sorted(counts.items())
