"""Tests for contouring errors, linearization, QP assembly, and mpc_step."""

import copy
import math

import numpy as np
import pytest

from raceloop import qp
from raceloop.dynamics import VehicleState, default_vehicle_params
from raceloop.mpcc import (
    NS,
    NU,
    NX,
    AugmentedState,
    ControllerMemory,
    HorizonSolution,
    MpccConfig,
    _discrete_map_batch,
    _z_layout,
    assemble_qp,
    cold_start_reference,
    contouring_errors,
    discretize_linearize,
    linearize_stages,
    mpc_step,
    shift_solution,
)
from raceloop.track import Waypoint, build_track, generate_oval

PARAMS = default_vehicle_params()


@pytest.fixture(scope="module")
def oval_track():
    return build_track(generate_oval(10.0, 6.0, 0.8, 200), ds=0.05)


@pytest.fixture(scope="module")
def mirrored_track():
    pts = generate_oval(10.0, 6.0, 0.8, 200)
    return build_track([Waypoint(w.x, -w.y, w.half_width) for w in pts], ds=0.05)


def rest_state_at(track, theta, timestamp_ns=0):
    x, y = track.position_at(theta)
    return VehicleState(
        X=float(x),
        Y=float(y),
        phi=float(track.heading_at(theta)),
        vx=0.0,
        vy=0.0,
        omega=0.0,
        timestamp_ns=timestamp_ns,
    )


class TestContouringErrors:
    def test_zero_on_centerline(self, oval_track):
        theta = 5.0
        x, y = oval_track.position_at(theta)
        err = contouring_errors(oval_track, theta, float(x), float(y))
        assert err.e_c == pytest.approx(0.0, abs=1e-9)
        assert err.e_l == pytest.approx(0.0, abs=1e-9)

    def test_pure_normal_offset(self, oval_track):
        theta = 7.3
        x, y = oval_track.position_at(theta)
        h = float(oval_track.heading_at(theta))
        px = float(x) - 0.2 * math.sin(h)
        py = float(y) + 0.2 * math.cos(h)
        err = contouring_errors(oval_track, theta, px, py)
        assert abs(err.e_c) == pytest.approx(0.2, abs=1e-9)
        assert err.e_l == pytest.approx(0.0, abs=1e-9)

    def test_gradients_match_finite_differences(self, oval_track):
        # Acceptance-level check: 1000 random samples, central differences.
        rng = np.random.default_rng(42)
        thetas = rng.uniform(0.0, oval_track.total_length, 1000)
        cx, cy = oval_track.position_at(thetas)
        Xs = np.asarray(cx) + rng.uniform(-0.6, 0.6, 1000)
        Ys = np.asarray(cy) + rng.uniform(-0.6, 0.6, 1000)
        h = 1e-5
        worst = 0.0
        # Gradient order is (X, Y, theta); perturb one coordinate at a time.
        perturbations = ((h, 0.0, 0.0), (0.0, h, 0.0), (0.0, 0.0, h))
        for theta, X, Y in zip(thetas, Xs, Ys):
            err = contouring_errors(oval_track, theta, X, Y)
            for grad, pick in ((err.grad_c, 0), (err.grad_l, 1)):
                fd = np.empty(3)
                for j, (dX, dY, dt) in enumerate(perturbations):
                    p = contouring_errors(oval_track, theta + dt, X + dX, Y + dY)
                    m_ = contouring_errors(oval_track, theta - dt, X - dX, Y - dY)
                    fd[j] = ((p.e_c, p.e_l)[pick] - (m_.e_c, m_.e_l)[pick]) / (2 * h)
                rel = np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(grad)))
                worst = max(worst, rel)
        assert worst <= 1e-5


class TestLinearization:
    def test_theta_row_is_linear_progress(self):
        x = np.array([0.5, -0.2, 0.1, 2.0, 0.05, 0.3, 4.0])
        u = np.array([0.4, 0.1, 2.5])
        A, B, g = discretize_linearize(x, u, PARAMS, 0.025)
        assert A[6, 6] == pytest.approx(1.0, abs=1e-8)
        assert B[6, 2] == pytest.approx(0.025, abs=1e-8)
        np.testing.assert_allclose(A[6, :6], 0.0, atol=1e-12)
        np.testing.assert_allclose(B[6, :2], 0.0, atol=1e-12)

    def test_exact_at_linearization_point(self):
        x = np.array([1.0, 2.0, 0.3, 3.0, 0.2, 0.8, 6.0])
        u = np.array([0.5, -0.1, 1.5])
        A, B, g = discretize_linearize(x, u, PARAMS, 0.02)
        fx = _discrete_map_batch(x[:, None], u[:, None], PARAMS, 0.02)[:, 0]
        np.testing.assert_allclose(A @ x + B @ u + g, fx, atol=1e-12)

    def test_directional_derivative_two_epsilons(self):
        rng = np.random.default_rng(5)
        x = np.array([0.3, -1.0, 0.4, 2.5, 0.1, 0.5, 3.0])
        u = np.array([0.6, 0.05, 2.0])
        A, B, g = discretize_linearize(x, u, PARAMS, 0.025)
        v = rng.normal(size=10)
        v /= np.linalg.norm(v)
        jv = A @ v[:7] + B @ v[7:]
        for eps in (1e-5, 1e-6):
            xp = (x + eps * v[:7])[:, None]
            xm = (x - eps * v[:7])[:, None]
            up = (u + eps * v[7:])[:, None]
            um = (u - eps * v[7:])[:, None]
            fd = (
                _discrete_map_batch(xp, up, PARAMS, 0.025)
                - _discrete_map_batch(xm, um, PARAMS, 0.025)
            )[:, 0] / (2 * eps)
            rel = np.max(np.abs(jv - fd)) / max(1.0, np.max(np.abs(jv)))
            assert rel <= 1e-5

    def test_thousand_random_samples(self):
        # Acceptance-level check, vectorized over stages.
        rng = np.random.default_rng(17)
        n = 1000
        states = np.column_stack(
            [
                rng.uniform(-5, 5, n),
                rng.uniform(-5, 5, n),
                rng.uniform(-3, 3, n),
                rng.uniform(0.3, 6.0, n),
                rng.uniform(-1.5, 1.5, n),
                rng.uniform(-4, 4, n),
                rng.uniform(0, 25, n),
            ]
        )
        inputs = np.column_stack(
            [rng.uniform(-1, 1, n), rng.uniform(-0.4, 0.4, n), rng.uniform(0, 5, n)]
        )
        A, B, g = linearize_stages(states, inputs, PARAMS, 0.025)
        eps = 1e-5
        v = rng.normal(size=(n, 10))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        jv = np.einsum("nij,nj->ni", A, v[:, :7]) + np.einsum(
            "nij,nj->ni", B, v[:, 7:]
        )
        fp = _discrete_map_batch(
            (states + eps * v[:, :7]).T, (inputs + eps * v[:, 7:]).T, PARAMS, 0.025
        )
        fm = _discrete_map_batch(
            (states - eps * v[:, :7]).T, (inputs - eps * v[:, 7:]).T, PARAMS, 0.025
        )
        fd = (fp - fm).T / (2 * eps)
        rel = np.max(np.abs(jv - fd), axis=1) / np.maximum(
            1.0, np.max(np.abs(jv), axis=1)
        )
        assert float(rel.max()) <= 1e-5


class TestAssembleQp:
    def test_dimension_bookkeeping_n2(self, oval_track):
        cfg = MpccConfig(N=2)
        state = rest_state_at(oval_track, 2.0)
        ref = cold_start_reference(state, 2.0, cfg, PARAMS)
        cur = AugmentedState.from_vehicle_state(state, 2.0)
        prob = assemble_qp(cur, ref, oval_track, cfg, PARAMS)
        assert prob.n == (cfg.N + 1) * NX + cfg.N * NU + cfg.N * NS == 31
        assert prob.A_eq.shape[0] == NX * (cfg.N + 1)
        assert prob.A_in.shape[0] == NU * cfg.N + 2 * cfg.N + NS * cfg.N

    def test_hessian_psd(self, oval_track):
        cfg = MpccConfig(N=8)
        state = rest_state_at(oval_track, 1.0)
        ref = cold_start_reference(state, 1.0, cfg, PARAMS)
        cur = AugmentedState.from_vehicle_state(state, 1.0)
        prob = assemble_qp(cur, ref, oval_track, cfg, PARAMS)
        assert prob.min_hessian_eigenvalue() >= -1e-8
        H = prob.H.toarray()
        np.testing.assert_allclose(H, H.T, atol=1e-12)

    def test_rest_fixed_point_satisfies_kkt(self, oval_track):
        # With zero progress reward, the stationary rest trajectory is the
        # optimum; verify KKT stationarity via least squares on the equality
        # duals and recover it with the solver.
        cfg = MpccConfig(N=10, gamma=0.0, qp_tol=1e-8)
        theta0 = 2.0
        state = rest_state_at(oval_track, theta0)
        d_stall = PARAMS.stall_duty()
        u_rest = np.array([d_stall, 0.0, 0.0])
        n_stage = cfg.N
        states = np.tile(
            AugmentedState.from_vehicle_state(state, theta0).as_array(), (n_stage + 1, 1)
        )
        ref = HorizonSolution(
            states=states,
            inputs=np.tile(u_rest, (n_stage, 1)),
            slacks=np.zeros((n_stage, NS)),
            status=qp.OPTIMAL,
            objective=0.0,
            iterations=0,
            solve_time_s=0.0,
        )
        cur = AugmentedState.from_vehicle_state(state, theta0)
        prob = assemble_qp(cur, ref, oval_track, cfg, PARAMS, u_prev=u_rest)

        off_u, off_s, n_z = _z_layout(cfg.N)
        z_star = np.zeros(n_z)
        z_star[: NX * (cfg.N + 1)] = states.ravel()
        z_star[off_u : off_u + NU * cfg.N] = np.tile(u_rest, cfg.N)

        np.testing.assert_allclose(prob.A_eq @ z_star, prob.b_eq, atol=1e-9)
        grad = prob.H @ z_star + prob.g
        nu, residual, *_ = np.linalg.lstsq(
            prob.A_eq.toarray().T, -grad, rcond=None
        )
        stat = grad + prob.A_eq.T @ nu
        assert np.max(np.abs(stat)) <= 1e-6

        sol = qp.solve_qp(prob, tol=1e-8)
        assert sol.status == qp.OPTIMAL
        np.testing.assert_allclose(sol.z[: NX * (cfg.N + 1)], states.ravel(), atol=2e-3)

    def test_border_violation_activates_slacks(self, oval_track):
        # Reference path pushed outside the corridor forces positive slacks.
        cfg = MpccConfig(N=5, qp_tol=1e-8)
        theta0 = 2.0
        x, y = oval_track.position_at(theta0)
        h = float(oval_track.heading_at(theta0))
        off = float(oval_track.half_width_at(theta0))  # beyond hw - margin
        state = VehicleState(
            X=float(x) - off * math.sin(h),
            Y=float(y) + off * math.cos(h),
            phi=h,
            vx=0.0,
            vy=0.0,
            omega=0.0,
        )
        mem = ControllerMemory()
        control, sol = mpc_step(state, mem, oval_track, cfg, PARAMS)
        assert sol.status == qp.OPTIMAL
        assert sol.slacks.max() > 1e-4


class TestMpcStep:
    def test_cold_start_straight_steers_near_zero(self, oval_track):
        state = rest_state_at(oval_track, 2.0)
        mem = ControllerMemory()
        control, sol = mpc_step(state, mem, oval_track, MpccConfig(), PARAMS)
        assert sol.status == qp.OPTIMAL
        assert abs(control.delta) <= 0.05
        assert control.source_timestamp_ns == state.timestamp_ns

    def test_mirror_symmetry(self, oval_track, mirrored_track):
        cfg = MpccConfig(qp_tol=1e-8)
        state = rest_state_at(oval_track, 2.0)
        m_state = VehicleState(
            X=state.X,
            Y=-state.Y,
            phi=-state.phi,
            vx=state.vx,
            vy=-state.vy,
            omega=-state.omega,
            timestamp_ns=state.timestamp_ns,
        )
        u, _ = mpc_step(state, ControllerMemory(), oval_track, cfg, PARAMS)
        u_m, _ = mpc_step(m_state, ControllerMemory(), mirrored_track, cfg, PARAMS)
        assert u_m.d == pytest.approx(u.d, abs=1e-6)
        assert u_m.delta == pytest.approx(-u.delta, abs=1e-6)

    def test_deterministic_given_state_and_memory(self, oval_track):
        cfg = MpccConfig()
        state = rest_state_at(oval_track, 2.0)
        mem = ControllerMemory()
        mpc_step(state, mem, oval_track, cfg, PARAMS)  # populate memory
        state2 = rest_state_at(oval_track, 2.05, timestamp_ns=25_000_000)
        u_a, sol_a = mpc_step(state2, copy.deepcopy(mem), oval_track, cfg, PARAMS)
        u_b, sol_b = mpc_step(state2, copy.deepcopy(mem), oval_track, cfg, PARAMS)
        assert u_a == u_b
        assert np.array_equal(sol_a.states, sol_b.states)
        assert sol_a.iterations == sol_b.iterations

    def test_solver_failure_holds_previous_input(self, oval_track):
        cfg = MpccConfig()
        state = rest_state_at(oval_track, 2.0)
        mem = ControllerMemory()
        good, _ = mpc_step(state, mem, oval_track, cfg, PARAMS)
        assert mem.last_control is not None

        starved = MpccConfig(qp_max_iter=1)
        state2 = rest_state_at(oval_track, 2.01, timestamp_ns=25_000_000)
        held, sol = mpc_step(state2, mem, oval_track, starved, PARAMS)
        assert sol.status == qp.MAX_ITER
        assert held.d == good.d and held.delta == good.delta
        assert held.source_timestamp_ns == state2.timestamp_ns

    def test_warm_start_cold_start_objectives_agree(self, oval_track):
        cfg = MpccConfig(N=10)
        state = rest_state_at(oval_track, 2.0)
        mem = ControllerMemory()
        mpc_step(state, mem, oval_track, cfg, PARAMS)
        ref = shift_solution(mem.solution)
        ref.states[0] = AugmentedState.from_vehicle_state(state, mem.theta).as_array()
        cur = AugmentedState.from_vehicle_state(state, mem.theta)
        prob = assemble_qp(cur, ref, oval_track, cfg, PARAMS, u_prev=mem.last_applied)
        from raceloop.mpcc import _stack_reference

        warm = qp.solve_qp(
            prob, qp.QpWarmStart(z=_stack_reference(ref, cfg.N), y=ref.dual)
        )
        cold = qp.solve_qp(prob)
        assert warm.status == qp.OPTIMAL and cold.status == qp.OPTIMAL
        assert abs(warm.objective - cold.objective) <= 1e-6

    def test_debug_checks_assert_kkt_residuals(self, oval_track):
        # debug_checks re-asserts the accepted solve's residual contract.
        cfg = MpccConfig(N=10, debug_checks=True)
        state = rest_state_at(oval_track, 2.0)
        mem = ControllerMemory()
        control, sol = mpc_step(state, mem, oval_track, cfg, PARAMS)
        assert sol.status == qp.OPTIMAL

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MpccConfig(N=1)
        with pytest.raises(ValueError):
            MpccConfig(Ts=0.06)
        with pytest.raises(ValueError):
            MpccConfig(q_l=0.0)
