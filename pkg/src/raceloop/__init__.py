"""raceloop: closed-loop MPCC racing simulator and latency benchmark.

Modules:
    dynamics  - bicycle model, Pacejka tires, RK4 integrator
    track     - arc-length centerline geometry and projections
    qp        - sparse operator-splitting QP solver
    mpcc      - contouring controller (linearize, assemble, solve, step)
    clock     - wall/virtual clocks and latency models
    bus       - in-process publish-subscribe topics
    runtime   - integrator node + multi-threaded worker pool (sim and wall)
    stats     - publish-interval statistics
    bench     - worker-count sweep harness and exports
    configs   - YAML config loading
    cli       - command-line entry points
"""

__version__ = "0.1.0"

from .bench import ExperimentConfig, run_experiment, export_results  # noqa: F401
from .clock import (  # noqa: F401
    ConstantLatency,
    LognormalLatency,
    UniformLatency,
    parse_latency,
)
from .dynamics import (  # noqa: F401
    ControlInput,
    VehicleParams,
    VehicleState,
    default_vehicle_params,
    rk4_step,
    simulate,
)
from .mpcc import ControllerMemory, MpccConfig, mpc_step  # noqa: F401
from .runtime import RunConfig, RunLog, run_system  # noqa: F401
from .stats import IntervalStats, compute_interval_stats  # noqa: F401
from .track import (  # noqa: F401
    Track,
    Waypoint,
    build_track,
    generate_oval,
    load_waypoints_csv,
)
