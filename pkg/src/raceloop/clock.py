"""Wall and virtual clocks, plus simulated solve-latency models.

The simulated clock doubles as a discrete-event queue: events are ordered by
virtual time with a monotone sequence number as the tie-breaker, so runs are
bit-reproducible for a given (config, seed).
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

NS_PER_MS = 1_000_000


class WallClock:
    """Monotonic wall clock with time zero at construction."""

    def __init__(self):
        self._epoch = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._epoch

    def sleep_until_ns(self, target_ns: int) -> None:
        delta = target_ns - self.now_ns()
        if delta > 0:
            time.sleep(delta / 1e9)


class SimulatedClock:
    """Virtual-time event queue with deterministic FIFO tie-breaking."""

    def __init__(self):
        self._now = 0
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def now_ns(self) -> int:
        return self._now

    def schedule(self, at_ns: int, fn: Callable[[], None]) -> None:
        if at_ns < self._now:
            raise ValueError(f"cannot schedule in the past ({at_ns} < {self._now})")
        heapq.heappush(self._heap, (at_ns, next(self._seq), fn))

    def run_until(self, end_ns: int) -> None:
        """Process events with time <= end_ns in (time, insertion) order."""
        while self._heap and self._heap[0][0] <= end_ns:
            at_ns, _, fn = heapq.heappop(self._heap)
            self._now = at_ns
            fn()
        self._now = max(self._now, end_ns)


@dataclass(frozen=True)
class ConstantLatency:
    ms: float

    def __post_init__(self):
        if not self.ms > 0.0:
            raise ValueError("latency must be positive")

    def sample_ns(self, rng) -> int:
        return max(1, round(self.ms * NS_PER_MS))

    def __str__(self):
        return f"const:{self.ms:g}"


@dataclass(frozen=True)
class UniformLatency:
    lo_ms: float
    hi_ms: float

    def __post_init__(self):
        if not (0.0 < self.lo_ms <= self.hi_ms):
            raise ValueError("need 0 < lo <= hi")

    def sample_ns(self, rng) -> int:
        return max(1, round(rng.uniform(self.lo_ms, self.hi_ms) * NS_PER_MS))

    def __str__(self):
        return f"uniform:{self.lo_ms:g},{self.hi_ms:g}"


@dataclass(frozen=True)
class LognormalLatency:
    """exp(N(mu, sigma)) milliseconds, capped at cap_ms."""

    mu: float
    sigma: float
    cap_ms: float

    def __post_init__(self):
        if not (self.cap_ms > 0.0 and self.sigma >= 0.0):
            raise ValueError("need cap_ms > 0 and sigma >= 0")

    def sample_ns(self, rng) -> int:
        ms = min(math.exp(rng.normal(self.mu, self.sigma)), self.cap_ms)
        return max(1, round(ms * NS_PER_MS))

    def __str__(self):
        return f"lognormal:{self.mu:g},{self.sigma:g},{self.cap_ms:g}"


LatencyModel = ConstantLatency | UniformLatency | LognormalLatency


def parse_latency(spec: str) -> LatencyModel:
    """Parse 'const:25', 'uniform:15,25', or 'lognormal:3.0,0.5,100'."""
    kind, _, rest = spec.partition(":")
    try:
        args = [float(v) for v in rest.split(",")] if rest else []
        if kind == "const" and len(args) == 1:
            return ConstantLatency(args[0])
        if kind == "uniform" and len(args) == 2:
            return UniformLatency(args[0], args[1])
        if kind == "lognormal" and len(args) == 3:
            return LognormalLatency(args[0], args[1], args[2])
    except ValueError as exc:
        raise ValueError(f"bad latency spec {spec!r}: {exc}") from exc
    raise ValueError(
        f"bad latency spec {spec!r} (expected const:MS | uniform:LO,HI "
        f"| lognormal:MU,SIGMA,CAP)"
    )
