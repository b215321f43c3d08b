"""Closed-loop control runtime: integrator node plus multi-threaded controller.

The loop has two nodes wired over the topic bus.  The integrator advances the
vehicle at 1000 Hz applying the most recently received control input and
publishes each new state on `nextState`.  The controller node admits state
messages through a minimum-gap gate on their timestamps, parks the freshest
admitted state in a single-slot mailbox, and lets a pool of workers solve the
control problem in parallel.  A completed result is published only if no
result computed from a newer state was already published (staleness check);
a dedicated publisher drains a single-slot result box so that only the
freshest unpublished result goes out.

Two execution modes share the pool logic: a wall-clock mode with real threads
(optionally core-pinned at elevated priority, best effort) and a simulated
mode that runs the whole system on a deterministic virtual-time event queue,
modeling solve latency with a configurable distribution.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bus import INPUT_CMD_TOPIC, NEXT_STATE_TOPIC, Bus, canonical_topic
from .clock import ConstantLatency, LatencyModel, SimulatedClock, WallClock
from .dynamics import (
    ControlInput,
    NonFiniteStateError,
    VehicleParams,
    VehicleState,
    default_vehicle_params,
    rk4_step,
)
from .mpcc import ControllerMemory, MpccConfig, mpc_step
from .track import Track, build_track, generate_oval
from . import qp

logger = logging.getLogger(__name__)

INTEGRATOR_PERIOD_NS = 1_000_000  # 1000 Hz
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

# Run-log event flags.
PUBLISHED = 0
GATE_DISCARD = 1
STALE_DISCARD = 2
PUBLISHED_HELD = 3  # published, but the controller held its previous input

RUNLOG_CSV_HEADER = (
    "publish_wall_ns,source_state_ns,worker_id,solve_ns,interval_ns,discarded_flag"
)


class RunAborted(RuntimeError):
    """The run stopped early (integrator blow-up or configuration problem)."""


@dataclass
class RunConfig:
    """Everything needed to execute one closed-loop run."""

    mode: str = "sim"  # "sim" | "wall"
    workers: int = 1
    min_gap_ms: float = 10.0
    duration_s: float = 10.0
    seed: int = 0
    latency: LatencyModel = field(default_factory=lambda: ConstantLatency(25.0))
    controller: str = "hold"  # "hold" | "mpcc"
    pin_cores: bool = False
    elevate_priority: bool = False
    trajectory_decimation: int = 1
    input_topic: str = INPUT_CMD_TOPIC
    track: Track | None = None
    params: VehicleParams | None = None
    mpcc: MpccConfig = field(default_factory=MpccConfig)
    initial_state: VehicleState | None = None

    def __post_init__(self):
        if self.mode not in ("sim", "wall"):
            raise ValueError(f"mode must be 'sim' or 'wall', got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.min_gap_ms > 0.0:
            raise ValueError("min_gap_ms must be positive")
        if not self.duration_s > 0.0:
            raise ValueError("duration_s must be positive")
        if self.controller not in ("hold", "mpcc"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.trajectory_decimation < 1:
            raise ValueError("trajectory_decimation must be >= 1")
        self.input_topic = canonical_topic(self.input_topic)

    def resolved_track(self) -> Track:
        if self.track is None:
            self.track = build_track(generate_oval(10.0, 6.0, 0.8, 200), ds=0.05)
        return self.track

    def resolved_params(self) -> VehicleParams:
        if self.params is None:
            self.params = default_vehicle_params()
        return self.params

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "workers": self.workers,
            "min_gap_ms": self.min_gap_ms,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "latency": str(self.latency),
            "controller": self.controller,
            "pin_cores": self.pin_cores,
            "elevate_priority": self.elevate_priority,
            "input_topic": self.input_topic,
        }


@dataclass(frozen=True)
class RunRecord:
    """One run-log event: a publish or a discard."""

    event_time_ns: int
    source_state_ns: int
    worker_id: int  # -1 for gate discards
    solve_ns: int
    interval_ns: int  # gap to the previous publish; 0 for discards and first
    flag: int

    def csv_row(self) -> str:
        return (
            f"{self.event_time_ns},{self.source_state_ns},{self.worker_id},"
            f"{self.solve_ns},{self.interval_ns},{self.flag}"
        )


@dataclass
class RunLog:
    """Per-publish and per-discard records plus the sampled state trajectory."""

    config: dict
    records: list[RunRecord] = field(default_factory=list)
    trajectory: np.ndarray | None = None  # columns: t_ns, X, Y, phi, vx, vy, omega
    events: dict[str, list] = field(default_factory=dict)  # replay/debugging aid

    def published(self) -> list[RunRecord]:
        return [r for r in self.records if r.flag in (PUBLISHED, PUBLISHED_HELD)]

    def gate_discards(self) -> int:
        return sum(1 for r in self.records if r.flag == GATE_DISCARD)

    def stale_discards(self) -> int:
        return sum(1 for r in self.records if r.flag == STALE_DISCARD)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(RUNLOG_CSV_HEADER + "\n")
            for r in self.records:
                fh.write(r.csv_row() + "\n")

    def write_header_json(self, path: str | Path) -> None:
        header = dict(self.config)
        header["publishes"] = len(self.published())
        header["gate_discards"] = self.gate_discards()
        header["stale_discards"] = self.stale_discards()
        with open(path, "w") as fh:
            json.dump(header, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_runlog_csv(path: str | Path) -> list[RunRecord]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RUNLOG_CSV_HEADER:
            raise ValueError(f"bad run-log header {header!r}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            vals = [int(v) for v in line.split(",")]
            out.append(RunRecord(*vals))
    return out


class Mailbox:
    """Linearizable single-slot container with overwrite semantics."""

    def __init__(self):
        self._lock = threading.Lock()
        self._slot = None

    def swap_in(self, item):
        """Store item, returning whatever it displaced (None if empty)."""
        with self._lock:
            old = self._slot
            self._slot = item
            return old

    def take(self):
        """Remove and return the slot content (None if empty)."""
        with self._lock:
            item = self._slot
            self._slot = None
            return item

    def is_empty(self) -> bool:
        with self._lock:
            return self._slot is None


@dataclass
class _Result:
    control: ControlInput
    worker_id: int
    solve_ns: int
    held: bool


class ControllerPool:
    """Shared controller-node state: gate, mailbox, staleness-checked slot.

    All transitions happen under one re-entrant lock; the two condition
    variables share it so wakeups can never race the predicates they guard.
    """

    def __init__(self, min_gap_ns: int, workers: int):
        if min_gap_ns <= 0 or workers < 1:
            raise ValueError("need min_gap_ns > 0 and workers >= 1")
        self.min_gap_ns = min_gap_ns
        self.workers = workers
        self.lock = threading.RLock()
        self.worker_cv = threading.Condition(self.lock)
        self.publisher_cv = threading.Condition(self.lock)
        self.state_box: Mailbox = Mailbox()
        self.result_box: Mailbox = Mailbox()
        self.last_queued_timestamp_ns = 0
        self.last_output_time_ns = 0
        self.shutdown = False

    def offer_state(self, state: VehicleState) -> bool:
        """Admission gate: accept only states sufficiently newer than the last
        pickup; accepted states overwrite the mailbox and wake one worker."""
        with self.lock:
            if state.timestamp_ns - self.last_queued_timestamp_ns > self.min_gap_ns:
                self.state_box.swap_in(state)
                self.worker_cv.notify(1)
                return True
            return False

    def pickup(self) -> VehicleState | None:
        """Take the mailbox state (if any) and mark its timestamp as queued."""
        with self.lock:
            state = self.state_box.take()
            if state is not None:
                self.last_queued_timestamp_ns = state.timestamp_ns
            return state

    def commit_result(self, result: _Result) -> bool:
        """Atomically run the staleness check and deposit the result.

        Returns False when a result from a newer state was already committed,
        in which case the caller must discard this one.
        """
        with self.lock:
            ts = result.control.source_timestamp_ns
            if ts < self.last_output_time_ns:
                return False
            self.last_output_time_ns = ts
            self.result_box.swap_in(result)
            self.publisher_cv.notify(1)
            return True

    def request_shutdown(self):
        with self.lock:
            self.shutdown = True
            self.worker_cv.notify_all()
            self.publisher_cv.notify_all()


class HoldStationController:
    """Constant-input stand-in controller for latency benchmarking.

    Commands the duty cycle that exactly cancels rolling resistance at
    standstill, so arbitrarily long runs stay at rest and timing measurements
    are undisturbed by solve cost.
    """

    def __init__(self, params: VehicleParams):
        self._d = params.stall_duty()

    def step(self, state: VehicleState) -> tuple[ControlInput, bool]:
        return ControlInput(self._d, 0.0, source_timestamp_ns=state.timestamp_ns), False


class MpccRuntimeController:
    """Real MPCC controller; owns one private memory (one instance per worker)."""

    def __init__(self, track: Track, config: MpccConfig, params: VehicleParams):
        self._track = track
        self._config = config
        self._params = params
        self._memory = ControllerMemory()

    def step(self, state: VehicleState) -> tuple[ControlInput, bool]:
        control, solution = mpc_step(
            state, self._memory, self._track, self._config, self._params
        )
        return control, solution.status != qp.OPTIMAL


def _make_controller(config: RunConfig):
    if config.controller == "hold":
        return HoldStationController(config.resolved_params())
    return MpccRuntimeController(
        config.resolved_track(), config.mpcc, config.resolved_params()
    )


def default_initial_state(track: Track) -> VehicleState:
    x, y = track.position_at(0.0)
    return VehicleState(
        X=float(x),
        Y=float(y),
        phi=float(track.heading_at(0.0)),
        vx=0.0,
        vy=0.0,
        omega=0.0,
        timestamp_ns=0,
    )


class _LogCollector:
    """Thread-safe event accumulator; rows are ordered at finalize time."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows: list[tuple[int, int, RunRecord]] = []
        self._seq = 0
        self.events: dict[str, list] = {
            "admission": [],  # (wall_ns, source_ns)
            "pickup": [],  # (wall_ns, source_ns, worker_id)
            "completion": [],  # (wall_ns, source_ns, worker_id, committed)
        }

    def add(self, record: RunRecord):
        with self._lock:
            self._rows.append((record.event_time_ns, self._seq, record))
            self._seq += 1

    def note(self, kind: str, *payload):
        with self._lock:
            self.events[kind].append(payload)

    def finalize(self) -> tuple[list[RunRecord], dict[str, list]]:
        with self._lock:
            rows = sorted(self._rows, key=lambda r: (r[0], r[1]))
        records: list[RunRecord] = []
        last_publish_ns = None
        for _, _, rec in rows:
            if rec.flag in (PUBLISHED, PUBLISHED_HELD):
                interval = 0 if last_publish_ns is None else rec.event_time_ns - last_publish_ns
                last_publish_ns = rec.event_time_ns
                records.append(
                    RunRecord(
                        rec.event_time_ns,
                        rec.source_state_ns,
                        rec.worker_id,
                        rec.solve_ns,
                        interval,
                        rec.flag,
                    )
                )
            else:
                records.append(rec)
        return records, self.events


class _Integrator:
    """Vehicle plant: holds the latest input and steps the model by 1 ms."""

    def __init__(self, initial: VehicleState, params: VehicleParams, decimation: int):
        self.state = initial
        self.params = params
        self.latest_input = ControlInput(0.0, 0.0)  # neutral until first command
        self._input_lock = threading.Lock()
        self._decimation = decimation
        self._tick_count = 0
        self.samples: list[tuple] = [self._sample(initial)]

    @staticmethod
    def _sample(s: VehicleState):
        return (s.timestamp_ns, s.X, s.Y, s.phi, s.vx, s.vy, s.omega)

    def set_input(self, control: ControlInput):
        with self._input_lock:
            self.latest_input = control

    def tick(self, stamp_ns: int | None = None) -> VehicleState:
        """Advance by 1 ms under the latest input; stamp_ns overrides the
        nominal timestamp with the tick's actual clock time (wall mode)."""
        with self._input_lock:
            control = self.latest_input
        state = rk4_step(self.state, control, self.params, 0.001)
        if stamp_ns is not None:
            state = replace(state, timestamp_ns=stamp_ns)
        self.state = state
        self._tick_count += 1
        if self._tick_count % self._decimation == 0:
            self.samples.append(self._sample(state))
        return state

    def trajectory(self) -> np.ndarray:
        return np.array(self.samples)


class SimEngine:
    """Deterministic single-threaded virtual-time execution of the loop."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.clock = SimulatedClock()
        self.bus = Bus(self.clock, scheduler=self.clock.schedule)
        self.bus.register_topic(NEXT_STATE_TOPIC)
        self.bus.register_topic(config.input_topic)
        self.pool = ControllerPool(
            min_gap_ns=round(config.min_gap_ms * NS_PER_MS), workers=config.workers
        )
        self.rng = np.random.default_rng(config.seed)
        params = config.resolved_params()
        track = config.resolved_track()
        initial = config.initial_state or default_initial_state(track)
        self.integrator = _Integrator(initial, params, config.trajectory_decimation)
        self.controllers = [_make_controller(config) for _ in range(config.workers)]
        self.busy = [False] * config.workers
        self.log = _LogCollector()
        self.end_ns = round(config.duration_s * NS_PER_S)

    def run(self) -> RunLog:
        self.bus.subscribe(NEXT_STATE_TOPIC, self._on_state)
        self.bus.subscribe(self.config.input_topic, self._on_input)
        self.clock.schedule(INTEGRATOR_PERIOD_NS, self._tick)
        self.clock.run_until(self.end_ns)
        records, events = self.log.finalize()
        return RunLog(
            config=self.config.summary(),
            records=records,
            trajectory=self.integrator.trajectory(),
            events=events,
        )

    def _tick(self):
        try:
            state = self.integrator.tick()
        except NonFiniteStateError as exc:
            raise RunAborted(
                f"integrator blow-up at t={self.clock.now_ns()} ns: {exc}"
            ) from exc
        next_tick = self.clock.now_ns() + INTEGRATOR_PERIOD_NS
        if next_tick <= self.end_ns:
            self.clock.schedule(next_tick, self._tick)
        self.bus.publish(NEXT_STATE_TOPIC, state)

    def _on_state(self, msg):
        state = msg.payload
        now = self.clock.now_ns()
        if not self.pool.offer_state(state):
            self.log.add(
                RunRecord(now, state.timestamp_ns, -1, 0, 0, GATE_DISCARD)
            )
            return
        self.log.note("admission", now, state.timestamp_ns)
        for wid in range(self.config.workers):
            if not self.busy[wid]:
                self._start_pickup(wid)
                break

    def _start_pickup(self, worker_id: int):
        state = self.pool.pickup()
        if state is None:
            return
        now = self.clock.now_ns()
        self.log.note("pickup", now, state.timestamp_ns, worker_id)
        self.busy[worker_id] = True
        control, held = self.controllers[worker_id].step(state)
        solve_ns = self.config.latency.sample_ns(self.rng)
        self.clock.schedule(
            now + solve_ns,
            lambda: self._complete(worker_id, state, control, held, solve_ns),
        )

    def _complete(self, worker_id, state, control, held, solve_ns):
        now = self.clock.now_ns()
        result = _Result(control, worker_id, solve_ns, held)
        committed = self.pool.commit_result(result)
        self.log.note("completion", now, state.timestamp_ns, worker_id, committed)
        if committed:
            self.clock.schedule(now, self._publisher_wake)
        else:
            self.log.add(
                RunRecord(
                    now, state.timestamp_ns, worker_id, solve_ns, 0, STALE_DISCARD
                )
            )
        self.busy[worker_id] = False
        if not self.pool.state_box.is_empty():
            self._start_pickup(worker_id)

    def _publisher_wake(self):
        result = self.pool.result_box.take()
        if result is None:
            return  # a newer deposit was already drained by an earlier wake
        self.bus.publish(self.config.input_topic, result.control)
        self.log.add(
            RunRecord(
                self.clock.now_ns(),
                result.control.source_timestamp_ns,
                result.worker_id,
                result.solve_ns,
                0,
                PUBLISHED_HELD if result.held else PUBLISHED,
            )
        )

    def _on_input(self, msg):
        self.integrator.set_input(msg.payload)


def _try_pin_and_elevate(worker_id: int, pin: bool, elevate: bool):
    if pin:
        try:
            cpus = sorted(os.sched_getaffinity(0))
            target = cpus[worker_id % len(cpus)]
            os.sched_setaffinity(0, {target})
        except (OSError, AttributeError) as exc:
            logger.warning("core pinning failed for worker %d: %s", worker_id, exc)
    if elevate:
        try:
            os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(10))
        except (OSError, AttributeError, PermissionError) as exc:
            logger.warning("priority elevation failed for worker %d: %s", worker_id, exc)


class WallEngine:
    """Real-threads execution: one context per worker, publisher, integrator."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.clock = WallClock()
        self.bus = Bus(self.clock)
        self.bus.register_topic(NEXT_STATE_TOPIC)
        self.bus.register_topic(config.input_topic)
        self.pool = ControllerPool(
            min_gap_ns=round(config.min_gap_ms * NS_PER_MS), workers=config.workers
        )
        params = config.resolved_params()
        track = config.resolved_track()
        initial = config.initial_state or default_initial_state(track)
        self.integrator = _Integrator(initial, params, config.trajectory_decimation)
        self.controllers = [_make_controller(config) for _ in range(config.workers)]
        self.log = _LogCollector()
        self._stop = threading.Event()
        self._error: list[BaseException] = []

    def run(self) -> RunLog:
        self.bus.subscribe(NEXT_STATE_TOPIC, self._on_state)
        self.bus.subscribe(self.config.input_topic, self._on_input)
        threads = [
            threading.Thread(target=self._publisher_loop, name="publisher", daemon=True)
        ]
        for wid in range(self.config.workers):
            threads.append(
                threading.Thread(
                    target=self._worker_loop, args=(wid,), name=f"worker-{wid}",
                    daemon=True,
                )
            )
        integ = threading.Thread(target=self._integrator_loop, name="integrator", daemon=True)

        for t in threads:
            t.start()
        integ.start()
        integ.join(timeout=self.config.duration_s + 30.0)
        self._stop.set()
        self.pool.request_shutdown()
        for t in threads:
            t.join(timeout=10.0)
        if self._error:
            raise RunAborted("wall run aborted") from self._error[0]
        records, events = self.log.finalize()
        return RunLog(
            config=self.config.summary(),
            records=records,
            trajectory=self.integrator.trajectory(),
            events=events,
        )

    def _integrator_loop(self):
        end_ns = round(self.config.duration_s * NS_PER_S)
        next_tick = INTEGRATOR_PERIOD_NS
        try:
            while not self._stop.is_set() and next_tick <= end_ns:
                self.clock.sleep_until_ns(next_tick)
                # Stamp with the tick's actual clock time in wall mode.
                state = self.integrator.tick(stamp_ns=self.clock.now_ns())
                self.bus.publish(NEXT_STATE_TOPIC, state)
                next_tick += INTEGRATOR_PERIOD_NS
        except BaseException as exc:  # propagate to run()
            self._error.append(exc)
            self._stop.set()

    def _on_state(self, msg):
        state = msg.payload
        now = self.clock.now_ns()
        if not self.pool.offer_state(state):
            self.log.add(RunRecord(now, state.timestamp_ns, -1, 0, 0, GATE_DISCARD))
        else:
            self.log.note("admission", now, state.timestamp_ns)

    def _worker_loop(self, worker_id: int):
        _try_pin_and_elevate(
            worker_id, self.config.pin_cores, self.config.elevate_priority
        )
        controller = self.controllers[worker_id]
        pool = self.pool
        try:
            while True:
                with pool.lock:
                    while pool.state_box.is_empty() and not pool.shutdown:
                        pool.worker_cv.wait()
                    if pool.state_box.is_empty() and pool.shutdown:
                        return
                    state = pool.pickup()
                if state is None:
                    continue
                self.log.note("pickup", self.clock.now_ns(), state.timestamp_ns, worker_id)
                t0 = self.clock.now_ns()
                control, held = controller.step(state)
                solve_ns = max(1, self.clock.now_ns() - t0)
                result = _Result(control, worker_id, solve_ns, held)
                committed = pool.commit_result(result)
                self.log.note(
                    "completion",
                    self.clock.now_ns(),
                    state.timestamp_ns,
                    worker_id,
                    committed,
                )
                if not committed:
                    self.log.add(
                        RunRecord(
                            self.clock.now_ns(),
                            state.timestamp_ns,
                            worker_id,
                            solve_ns,
                            0,
                            STALE_DISCARD,
                        )
                    )
        except BaseException as exc:
            self._error.append(exc)
            self._stop.set()
            self.pool.request_shutdown()

    def _publisher_loop(self):
        pool = self.pool
        try:
            while True:
                with pool.lock:
                    while pool.result_box.is_empty() and not pool.shutdown:
                        pool.publisher_cv.wait()
                    result = pool.result_box.take()
                    if result is None and pool.shutdown:
                        return
                if result is None:
                    continue
                self.bus.publish(self.config.input_topic, result.control)
                self.log.add(
                    RunRecord(
                        self.clock.now_ns(),
                        result.control.source_timestamp_ns,
                        result.worker_id,
                        result.solve_ns,
                        0,
                        PUBLISHED_HELD if result.held else PUBLISHED,
                    )
                )
        except BaseException as exc:
            self._error.append(exc)
            self._stop.set()
            self.pool.request_shutdown()

    def _on_input(self, msg):
        self.integrator.set_input(msg.payload)


def run_system(config: RunConfig) -> RunLog:
    """Execute one closed-loop run and return its RunLog."""
    if config.mode == "sim":
        return SimEngine(config).run()
    return WallEngine(config).run()
