"""Model predictive contouring controller over the bicycle model.

Each control cycle projects the vehicle onto the centerline, linearizes the
RK4-discretized dynamics along a warm-start trajectory (the previous solution
shifted by one stage), assembles a sparse convex QP trading contouring and lag
error against progress along the track, solves it, and applies only the first
input of the horizon.

The augmented state is (X, Y, phi, vx, vy, omega, theta); the augmented input
is (d, delta, v_theta) where v_theta is the virtual progress speed along the
centerline.  Border constraints are softened with per-stage slack variables.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp
from .dynamics import (
    MAX_RK4_DT_S,
    ControlInput,
    VehicleParams,
    VehicleState,
    rk4_array,
)
from .track import ProjectionError, Track, global_project, project_progress

NX = 7  # augmented states per stage
NU = 3  # augmented inputs per stage
NS = 2  # border slacks per stage

FD_STEP = 1e-6  # relative central-difference step for Jacobians


class LinearizationError(RuntimeError):
    """Finite-difference Jacobian produced non-finite entries."""


@dataclass
class MpccConfig:
    """Horizon, weights, and solver knobs.  Defaults are implementer choices."""

    N: int = 20
    Ts: float = 0.025  # s
    q_c: float = 0.1  # contouring weight
    q_l: float = 100.0  # lag weight
    gamma: float = 1.0  # progress reward
    r_d: float = 0.01  # duty rate penalty
    r_delta: float = 0.1  # steering rate penalty
    r_vtheta: float = 0.001  # progress-speed rate penalty
    q_s: float = 1000.0  # border slack penalty
    v_theta_max: float = 5.0  # m/s
    border_margin: float = 0.1  # m
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000
    n_sqp: int = 1  # sequential re-linearizations per step
    hessian_reg: float = 1e-8
    debug_checks: bool = False

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon N must be >= 2")
        if not self.Ts > 0.0:
            raise ValueError("Ts must be positive")
        if self.Ts > 0.05:
            raise ValueError("Ts must be <= 50 ms")
        if not self.q_l > 0.0:
            raise ValueError("lag weight q_l must be positive")
        for name in ("q_c", "gamma", "r_d", "r_delta", "r_vtheta", "q_s"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"weight {name} must be non-negative")


@dataclass(frozen=True)
class AugmentedState:
    X: float
    Y: float
    phi: float
    vx: float
    vy: float
    omega: float
    theta: float

    @classmethod
    def from_vehicle_state(cls, s: VehicleState, theta: float) -> "AugmentedState":
        return cls(s.X, s.Y, s.phi, s.vx, s.vy, s.omega, theta)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.X, self.Y, self.phi, self.vx, self.vy, self.omega, self.theta]
        )


@dataclass
class HorizonSolution:
    """Solved horizon: N+1 augmented states, N inputs, N slack pairs."""

    states: np.ndarray  # (N+1, 7)
    inputs: np.ndarray  # (N, 3)
    slacks: np.ndarray  # (N, 2)
    status: str
    objective: float
    iterations: int
    solve_time_s: float
    dual: np.ndarray | None = None  # stacked QP duals, kept for warm starting

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.states.shape != (n + 1, NX) or self.slacks.shape != (n, NS):
            raise ValueError("inconsistent horizon solution shapes")


@dataclass
class ControllerMemory:
    """Per-worker mutable controller state; never share across workers."""

    solution: HorizonSolution | None = None
    theta: float | None = None
    last_applied: np.ndarray = field(default_factory=lambda: np.zeros(NU))
    last_control: ControlInput | None = None
    rho_scale: float = 1.0  # carried QP step-size adaptation


@dataclass(frozen=True)
class ContouringErrors:
    e_c: float
    e_l: float
    grad_c: np.ndarray  # d(e_c)/d(X, Y, theta)
    grad_l: np.ndarray


def _contouring_batch(track: Track, thetas, Xs, Ys):
    """Vectorized contouring/lag errors and exact gradients of the evaluated
    spline interpolant (so finite differences of the same quantities agree)."""
    thetas = np.asarray(thetas, dtype=float)
    Xs = np.asarray(Xs, dtype=float)
    Ys = np.asarray(Ys, dtype=float)
    xr, yr = track.position_at(thetas)
    dx, dy, ddx, ddy = track.derivatives_at(thetas)
    nrm = np.hypot(dx, dy)
    cphi = dx / nrm
    sphi = dy / nrm
    dheading = (dx * ddy - dy * ddx) / nrm**2  # d(heading)/d(theta)
    ex = Xs - xr
    ey = Ys - yr
    e_c = sphi * ex - cphi * ey
    e_l = -cphi * ex - sphi * ey
    grad_c = np.stack([sphi, -cphi, -dheading * e_l], axis=-1)
    grad_l = np.stack([-cphi, -sphi, dheading * e_c + nrm], axis=-1)
    return e_c, e_l, grad_c, grad_l


def contouring_errors(track: Track, theta: float, X: float, Y: float) -> ContouringErrors:
    """Contouring and lag error at (X, Y) relative to progress theta."""
    e_c, e_l, g_c, g_l = _contouring_batch(track, [theta], [X], [Y])
    return ContouringErrors(
        e_c=float(e_c[0]), e_l=float(e_l[0]), grad_c=g_c[0], grad_l=g_l[0]
    )


def _discrete_map_batch(x: np.ndarray, u: np.ndarray, params: VehicleParams, Ts: float):
    """Apply the discrete map to columns: x is (7, K), u is (3, K)."""
    n_sub = max(1, math.ceil(Ts / MAX_RK4_DT_S - 1e-12))
    dt = Ts / n_sub
    x6 = x[:6]
    for _ in range(n_sub):
        x6 = rk4_array(x6, u[:2], params, dt)
    theta_next = x[6] + u[2] * Ts
    return np.vstack([x6, theta_next])


def linearize_stages(
    ref_states: np.ndarray, ref_inputs: np.ndarray, params: VehicleParams, Ts: float
):
    """Central-difference Jacobians of the discrete map at each reference stage.

    ref_states is (N, 7), ref_inputs is (N, 3); returns A (N, 7, 7),
    B (N, 7, 3), and the affine residual g (N, 7) making the linear model
    exact at the linearization points.
    """
    if Ts > 0.05:
        raise ValueError("Ts must be <= 50 ms")
    n_stages = ref_states.shape[0]
    nv = NX + NU
    cols_per = 2 * nv + 1

    xu = np.concatenate([ref_states, ref_inputs], axis=1)  # (N, 10)
    steps = FD_STEP * np.maximum(1.0, np.abs(xu))  # (N, 10)

    # Column layout per stage: [nominal, +h e_0, -h e_0, ..., +h e_9, -h e_9]
    batch = np.repeat(xu[:, :, None], cols_per, axis=2)  # (N, 10, cols)
    for i in range(nv):
        batch[:, i, 1 + 2 * i] += steps[:, i]
        batch[:, i, 2 + 2 * i] -= steps[:, i]

    flat = batch.transpose(1, 0, 2).reshape(nv, n_stages * cols_per)
    out = _discrete_map_batch(flat[:NX], flat[NX:], params, Ts)
    if not np.all(np.isfinite(out)):
        raise LinearizationError("non-finite entries in discrete-map evaluation")
    out = out.reshape(NX, n_stages, cols_per).transpose(1, 0, 2)  # (N, 7, cols)

    nominal = out[:, :, 0]
    plus = out[:, :, 1::2]
    minus = out[:, :, 2::2]
    jac = (plus - minus) / (2.0 * steps[:, None, :])  # (N, 7, 10)
    if not np.all(np.isfinite(jac)):
        raise LinearizationError("non-finite Jacobian entries")
    A = jac[:, :, :NX]
    B = jac[:, :, NX:]
    g = nominal - np.einsum("nij,nj->ni", A, ref_states) - np.einsum(
        "nij,nj->ni", B, ref_inputs
    )
    return A, B, g


def discretize_linearize(
    aug_state: np.ndarray, aug_input: np.ndarray, params: VehicleParams, Ts: float
):
    """Single-point linearization: returns (A 7x7, B 7x3, g 7)."""
    A, B, g = linearize_stages(
        np.asarray(aug_state, float)[None, :],
        np.asarray(aug_input, float)[None, :],
        params,
        Ts,
    )
    return A[0], B[0], g[0]


def _z_layout(N: int):
    off_u = NX * (N + 1)
    off_s = off_u + NU * N
    n_z = off_s + NS * N
    return off_u, off_s, n_z


def assemble_qp(
    current: AugmentedState,
    reference: HorizonSolution,
    track: Track,
    config: MpccConfig,
    params: VehicleParams,
    u_prev: np.ndarray | None = None,
) -> qp.QpProblem:
    """Build the stacked sparse QP around the reference trajectory.

    Decision vector: N+1 augmented states, N augmented inputs, N border slack
    pairs.  Stage cost is linearized contouring/lag error plus progress reward
    and input-rate penalties; dynamics enter as linearized equalities; borders
    are soft halfspaces at each stage's reference progress.  u_prev is the
    input applied in the previous cycle, anchoring the first rate penalty.
    """
    N = config.N
    ref_states = reference.states
    ref_inputs = reference.inputs
    if ref_states.shape != (N + 1, NX) or ref_inputs.shape != (N, NU):
        raise ValueError("reference trajectory does not match horizon length")

    off_u, off_s, n_z = _z_layout(N)
    H = np.zeros((n_z, n_z))
    g_vec = np.zeros(n_z)

    # Contouring / lag errors at stages 1..N, linearized at the reference.
    thetas = ref_states[1:, 6]
    e_c, e_l, grad_c, grad_l = _contouring_batch(
        track, thetas, ref_states[1:, 0], ref_states[1:, 1]
    )
    for k in range(1, N + 1):
        idx = np.array([NX * k + 0, NX * k + 1, NX * k + 6])
        v_ref = np.array([ref_states[k, 0], ref_states[k, 1], ref_states[k, 6]])
        for w, err, grad in (
            (config.q_c, e_c[k - 1], grad_c[k - 1]),
            (config.q_l, e_l[k - 1], grad_l[k - 1]),
        ):
            const = err - grad @ v_ref
            H[np.ix_(idx, idx)] += 2.0 * w * np.outer(grad, grad)
            g_vec[idx] += 2.0 * w * const * grad

    # Progress reward and input-rate penalties.
    R = np.diag([config.r_d, config.r_delta, config.r_vtheta])
    if u_prev is None:
        u_prev = np.zeros(NU)
    for k in range(N):
        iu = slice(off_u + NU * k, off_u + NU * (k + 1))
        g_vec.flat[off_u + NU * k + 2] -= config.gamma * config.Ts
        H[iu, iu] += 2.0 * R
        if k >= 1:
            iu_prev = slice(off_u + NU * (k - 1), off_u + NU * k)
            H[iu_prev, iu_prev] += 2.0 * R
            H[iu, iu_prev] -= 2.0 * R
            H[iu_prev, iu] -= 2.0 * R
    g_vec[off_u : off_u + NU] -= 2.0 * np.diag(R) * u_prev

    # Slack penalties and regularization.
    for k in range(N):
        i0 = off_s + NS * k
        H[i0, i0] += 2.0 * config.q_s
        H[i0 + 1, i0 + 1] += 2.0 * config.q_s
    H[np.diag_indices(n_z)] += config.hessian_reg

    # Equalities: pinned initial state plus linearized dynamics, assembled as
    # COO triplets (vectorized over stages).
    A_dyn, B_dyn, g_dyn = linearize_stages(ref_states[:N], ref_inputs, params, config.Ts)
    n_eq = NX * (N + 1)
    b_eq = np.zeros(n_eq)
    b_eq[:NX] = current.as_array()
    b_eq[NX:] = g_dyn.ravel()

    k_idx = np.arange(N)
    i_idx = np.arange(NX)
    rows_stage = (NX * (k_idx + 1))[:, None, None] + i_idx[None, :, None]
    rows_init = i_idx
    rows_I = NX * (k_idx + 1)[:, None] + i_idx[None, :]
    cols_A = (NX * k_idx)[:, None, None] + i_idx[None, None, :]
    cols_B = (off_u + NU * k_idx)[:, None, None] + np.arange(NU)[None, None, :]

    eq_rows = np.concatenate(
        [
            rows_init,
            rows_I.ravel(),
            np.broadcast_to(rows_stage, (N, NX, NX)).ravel(),
            np.broadcast_to(rows_stage, (N, NX, NU)).ravel(),
        ]
    )
    eq_cols = np.concatenate(
        [
            rows_init,
            rows_I.ravel(),
            np.broadcast_to(cols_A, (N, NX, NX)).ravel(),
            np.broadcast_to(cols_B, (N, NX, NU)).ravel(),
        ]
    )
    eq_vals = np.concatenate(
        [np.ones(NX), np.ones(N * NX), (-A_dyn).ravel(), (-B_dyn).ravel()]
    )
    A_eq = sp.coo_matrix((eq_vals, (eq_rows, eq_cols)), shape=(n_eq, n_z)).tocsc()

    # Inequalities: input boxes, soft borders, slack nonnegativity.
    n_box = NU * N
    n_border = 2 * N
    n_slack = NS * N
    n_in = n_box + n_border + n_slack
    lb = np.full(n_in, -np.inf)
    ub = np.full(n_in, np.inf)

    box_rows = np.arange(n_box)
    box_cols = off_u + np.arange(n_box)
    lb[:n_box] = np.tile([params.d_min, -params.delta_max, 0.0], N)
    ub[:n_box] = np.tile([params.d_max, params.delta_max, config.v_theta_max], N)

    xr, yr = track.position_at(thetas)
    head = track.heading_at(thetas)
    hw = track.half_width_at(thetas)
    nx_ = -np.sin(head)
    ny_ = np.cos(head)
    free = hw - config.border_margin
    nc = nx_ * xr + ny_ * yr
    stage_x = NX * (k_idx + 1)
    b_plus = np.arange(n_box, n_box + n_border, 2)
    b_minus = b_plus + 1
    border_rows = np.concatenate([b_plus, b_plus, b_plus, b_minus, b_minus, b_minus])
    border_cols = np.concatenate(
        [
            stage_x,
            stage_x + 1,
            off_s + NS * k_idx,
            stage_x,
            stage_x + 1,
            off_s + NS * k_idx + 1,
        ]
    )
    border_vals = np.concatenate([nx_, ny_, -np.ones(N), -nx_, -ny_, -np.ones(N)])
    ub[b_plus] = free + nc
    ub[b_minus] = free - nc

    slack_rows = np.arange(n_box + n_border, n_in)
    slack_cols = off_s + np.arange(n_slack)
    lb[slack_rows] = 0.0

    in_rows = np.concatenate([box_rows, border_rows, slack_rows])
    in_cols = np.concatenate([box_cols, border_cols, slack_cols])
    in_vals = np.concatenate([np.ones(n_box), border_vals, np.ones(n_slack)])
    A_in = sp.coo_matrix((in_vals, (in_rows, in_cols)), shape=(n_in, n_z)).tocsc()

    return qp.QpProblem(
        H=sp.csc_matrix(H),
        g=g_vec,
        A_eq=A_eq,
        b_eq=b_eq,
        A_in=A_in,
        lb=lb,
        ub=ub,
    )


def _stack_reference(reference: HorizonSolution, N: int) -> np.ndarray:
    off_u, off_s, n_z = _z_layout(N)
    z = np.zeros(n_z)
    z[: NX * (N + 1)] = reference.states.ravel()
    z[off_u : off_u + NU * N] = reference.inputs.ravel()
    z[off_s:] = reference.slacks.ravel()
    return z


def _unstack(z: np.ndarray, N: int):
    off_u, off_s, _ = _z_layout(N)
    states = z[: NX * (N + 1)].reshape(N + 1, NX)
    inputs = z[off_u : off_u + NU * N].reshape(N, NU)
    slacks = z[off_s:].reshape(N, NS)
    return states, inputs, slacks


def shift_solution(solution: HorizonSolution) -> HorizonSolution:
    """Shift a horizon by one stage, repeating the terminal stage."""
    states = np.vstack([solution.states[1:], solution.states[-1]])
    inputs = np.vstack([solution.inputs[1:], solution.inputs[-1]])
    slacks = np.vstack([solution.slacks[1:], solution.slacks[-1]])
    return HorizonSolution(
        states=states,
        inputs=inputs,
        slacks=slacks,
        status=solution.status,
        objective=solution.objective,
        iterations=solution.iterations,
        solve_time_s=solution.solve_time_s,
        dual=solution.dual,
    )


def cold_start_reference(
    state: VehicleState, theta0: float, config: MpccConfig, params: VehicleParams
) -> HorizonSolution:
    """Zero-input rollout of the current state used as a cold-start reference."""
    N = config.N
    states = np.zeros((N + 1, NX))
    x = AugmentedState.from_vehicle_state(state, theta0).as_array()
    states[0] = x
    zero_u = np.zeros((NU, 1))
    for k in range(N):
        x = _discrete_map_batch(x[:, None], zero_u, params, config.Ts)[:, 0]
        states[k + 1] = x
    return HorizonSolution(
        states=states,
        inputs=np.zeros((N, NU)),
        slacks=np.zeros((N, NS)),
        status=qp.OPTIMAL,
        objective=0.0,
        iterations=0,
        solve_time_s=0.0,
    )


def clamp_input(u: np.ndarray, config: MpccConfig, params: VehicleParams) -> np.ndarray:
    return np.array(
        [
            min(max(u[0], params.d_min), params.d_max),
            min(max(u[1], -params.delta_max), params.delta_max),
            min(max(u[2], 0.0), config.v_theta_max),
        ]
    )


def mpc_step(
    state: VehicleState,
    memory: ControllerMemory,
    track: Track,
    config: MpccConfig,
    params: VehicleParams,
) -> tuple[ControlInput, HorizonSolution]:
    """One receding-horizon cycle; returns the first input and the solution.

    On solver failure (iteration cap or infeasibility) the previously applied
    input is held and the returned solution carries the failure status for the
    run log.  The memory is updated in place and must be private to the caller.
    """
    t_start = time.perf_counter()
    pos = (state.X, state.Y)
    if memory.solution is None:
        theta0 = global_project(track, pos)
        reference = cold_start_reference(state, theta0, config, params)
    else:
        try:
            theta0 = project_progress(track, pos, memory.theta)
        except ProjectionError:
            theta0 = global_project(track, pos)
        reference = shift_solution(memory.solution)
        # Keep theta on the same unwrapped branch as the reference trajectory.
        L = track.total_length
        theta0 += L * round((reference.states[0, 6] - theta0) / L)
        base = L * math.floor(theta0 / L)
        if base != 0.0:
            theta0 -= base
            reference.states[:, 6] -= base

    current = AugmentedState.from_vehicle_state(state, theta0)
    reference.states[0] = current.as_array()

    solution = None
    sol = None
    for _ in range(max(1, config.n_sqp)):
        problem = assemble_qp(
            current, reference, track, config, params, u_prev=memory.last_applied
        )
        warm = qp.QpWarmStart(
            z=_stack_reference(reference, config.N),
            y=reference.dual if reference.dual is not None else None,
            rho_scale=memory.rho_scale,
        )
        sol = qp.solve_qp(problem, warm, tol=config.qp_tol, max_iter=config.qp_max_iter)
        memory.rho_scale = sol.rho_scale
        if config.debug_checks and sol.status == qp.OPTIMAL:
            assert sol.primal_residual <= config.qp_tol
            assert sol.dual_residual <= config.qp_tol * (
                1.0 + float(np.abs(problem.g).max())
            )
        if sol.status == qp.INFEASIBLE:
            break
        states, inputs, slacks = _unstack(sol.z, config.N)
        reference = HorizonSolution(
            states=states,
            inputs=inputs,
            slacks=slacks,
            status=sol.status,
            objective=sol.objective,
            iterations=sol.iterations,
            solve_time_s=0.0,
            dual=sol.y,
        )
        solution = reference

    elapsed = time.perf_counter() - t_start
    if sol.status != qp.OPTIMAL or solution is None:
        held = memory.last_control or ControlInput(0.0, 0.0)
        control = ControlInput(
            d=held.d, delta=held.delta, source_timestamp_ns=state.timestamp_ns
        )
        failed = HorizonSolution(
            states=(solution or reference).states,
            inputs=(solution or reference).inputs,
            slacks=(solution or reference).slacks,
            status=sol.status,
            objective=sol.objective,
            iterations=sol.iterations,
            solve_time_s=elapsed,
            dual=sol.y,
        )
        memory.last_control = control
        memory.theta = float(track.wrap(theta0))
        return control, failed

    solution.solve_time_s = elapsed
    u0 = clamp_input(solution.inputs[0], config, params)
    control = ControlInput(
        d=float(u0[0]), delta=float(u0[1]), source_timestamp_ns=state.timestamp_ns
    )
    memory.solution = solution
    memory.theta = float(track.wrap(theta0))
    memory.last_applied = u0
    memory.last_control = control
    return control, solution
