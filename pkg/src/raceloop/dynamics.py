"""Dynamic bicycle model with simplified Pacejka tires and an RK4 integrator.

State lives in the inertial frame for pose (X, Y, phi) and in the body frame
for velocities (vx, vy, omega).  Tire lateral forces follow the magic formula
F = D*sin(C*atan(B*alpha)); rear longitudinal force is the usual duty-cycle
drivetrain map Frx = (Cm1 - Cm2*vx)*d - Cr0 - Cr2*vx^2.

Two evaluation paths are provided: a scalar path on plain floats (fast enough
for a 1000 Hz integrator loop) and a numpy-broadcasting path used for batched
rollouts and finite-difference Jacobians.  Both implement the same equations
and are cross-checked in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Hard cap on a single RK4 step; keeps local truncation error negligible at
# racing speeds for this parameter scale.
MAX_RK4_DT_S = 0.010

NS_PER_S = 1_000_000_000


class NonFiniteStateError(RuntimeError):
    """Integration produced a non-finite state (parameter or state blow-up)."""


def wrap_angle(phi: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    w = (phi + math.pi) % TWO_PI
    return w - math.pi if w > 0.0 else math.pi


def wrap_angle_array(phi: np.ndarray) -> np.ndarray:
    w = np.mod(phi + np.pi, TWO_PI)
    return np.where(w > 0.0, w, TWO_PI) - np.pi


@dataclass(frozen=True)
class PacejkaCoeffs:
    """Magic-formula lateral tire coefficients (B stiffness, C shape, D peak N)."""

    B: float
    C: float
    D: float

    def __post_init__(self):
        if not (self.B > 0.0 and self.C > 0.0 and self.D > 0.0):
            raise ValueError(f"Pacejka coefficients must be positive, got {self}")


@dataclass(frozen=True)
class DrivetrainCoeffs:
    """Duty-cycle drivetrain map coefficients, all in SI units."""

    Cm1: float
    Cm2: float
    Cr0: float
    Cr2: float


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the single-track vehicle.

    The shipped defaults are a plausible 1/10-scale set.  They are implementer
    placeholders, not identified ground truth; every operation here is valid
    for any physically consistent parameter file.
    """

    m: float  # kg
    lf: float  # m, front axle to COG
    lr: float  # m, rear axle to COG
    Iz: float  # kg m^2
    tire_front: PacejkaCoeffs
    tire_rear: PacejkaCoeffs
    drivetrain: DrivetrainCoeffs
    d_min: float = -1.0
    d_max: float = 1.0
    delta_max: float = 0.4  # rad
    vx_guard: float = 0.3  # m/s, slip-angle denominator clamp

    def __post_init__(self):
        if not (self.m > 0.0 and self.Iz > 0.0 and self.lf > 0.0 and self.lr > 0.0):
            raise ValueError("m, Iz, lf, lr must all be positive")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be smaller than d_max")
        if not (self.delta_max > 0.0 and self.vx_guard > 0.0):
            raise ValueError("delta_max and vx_guard must be positive")

    def stall_duty(self) -> float:
        """Duty cycle with zero net longitudinal force at standstill."""
        return self.drivetrain.Cr0 / self.drivetrain.Cm1


def default_vehicle_params() -> VehicleParams:
    """1/10-scale default parameter set (placeholder values, see class docs)."""
    m = 3.47
    return VehicleParams(
        m=m,
        lf=0.15,
        lr=0.17,
        Iz=0.04,
        tire_front=PacejkaCoeffs(B=5.0, C=1.2, D=0.35 * m * 9.81),
        tire_rear=PacejkaCoeffs(B=5.0, C=1.2, D=0.35 * m * 9.81),
        drivetrain=DrivetrainCoeffs(Cm1=12.0, Cm2=2.5, Cr0=0.6, Cr2=0.1),
        d_min=-1.0,
        d_max=1.0,
        delta_max=0.4,
        vx_guard=0.3,
    )


@dataclass(frozen=True)
class VehicleState:
    """Full dynamic state plus its acquisition timestamp in integer ns."""

    X: float  # m
    Y: float  # m
    phi: float  # rad
    vx: float  # m/s
    vy: float  # m/s
    omega: float  # rad/s
    timestamp_ns: int = 0

    def __post_init__(self):
        for name in ("X", "Y", "phi", "vx", "vy", "omega"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite state field {name}")
        if self.timestamp_ns < 0:
            raise ValueError("timestamp_ns must be non-negative")

    def dynamic_fields(self) -> tuple[float, float, float, float, float, float]:
        return (self.X, self.Y, self.phi, self.vx, self.vy, self.omega)


@dataclass(frozen=True)
class ControlInput:
    """Duty cycle and steering command, stamped with its source-state time."""

    d: float
    delta: float
    source_timestamp_ns: int = 0

    def __post_init__(self):
        if self.source_timestamp_ns < 0:
            raise ValueError("source_timestamp_ns must be non-negative")


NEUTRAL_INPUT = ControlInput(d=0.0, delta=0.0, source_timestamp_ns=0)


@dataclass(frozen=True)
class TireForces:
    Frx: float  # N, rear longitudinal
    Fry: float  # N, rear lateral
    Ffy: float  # N, front lateral


@dataclass(frozen=True)
class StateDerivative:
    dX: float
    dY: float
    dphi: float
    dvx: float
    dvy: float
    domega: float

    def as_tuple(self):
        return (self.dX, self.dY, self.dphi, self.dvx, self.dvy, self.domega)


def slip_angles(
    state: VehicleState, inp: ControlInput, params: VehicleParams
) -> tuple[float, float]:
    """Front and rear slip angles in rad, with the low-speed guarded denominator."""
    vxg = max(state.vx, params.vx_guard)
    alpha_f = -math.atan((state.omega * params.lf + state.vy) / vxg) + inp.delta
    alpha_r = math.atan((state.omega * params.lr - state.vy) / vxg)
    return alpha_f, alpha_r


def tire_forces(
    state: VehicleState, inp: ControlInput, params: VehicleParams
) -> TireForces:
    """Magic-formula lateral forces and the drivetrain longitudinal force."""
    alpha_f, alpha_r = slip_angles(state, inp, params)
    tf, tr = params.tire_front, params.tire_rear
    dt = params.drivetrain
    ffy = tf.D * math.sin(tf.C * math.atan(tf.B * alpha_f))
    fry = tr.D * math.sin(tr.C * math.atan(tr.B * alpha_r))
    frx = (dt.Cm1 - dt.Cm2 * state.vx) * inp.d - dt.Cr0 - dt.Cr2 * state.vx * state.vx
    return TireForces(Frx=frx, Fry=fry, Ffy=ffy)


def _deriv(x, d, delta, p: VehicleParams):
    """Scalar core of the six differential equations; x is a 6-tuple."""
    _, _, phi, vx, vy, omega = x
    vxg = vx if vx > p.vx_guard else p.vx_guard
    alpha_f = -math.atan((omega * p.lf + vy) / vxg) + delta
    alpha_r = math.atan((omega * p.lr - vy) / vxg)
    tf, tr, dt = p.tire_front, p.tire_rear, p.drivetrain
    ffy = tf.D * math.sin(tf.C * math.atan(tf.B * alpha_f))
    fry = tr.D * math.sin(tr.C * math.atan(tr.B * alpha_r))
    frx = (dt.Cm1 - dt.Cm2 * vx) * d - dt.Cr0 - dt.Cr2 * vx * vx
    cphi = math.cos(phi)
    sphi = math.sin(phi)
    cdelta = math.cos(delta)
    sdelta = math.sin(delta)
    return (
        vx * cphi - vy * sphi,
        vx * sphi + vy * cphi,
        omega,
        (frx - ffy * sdelta + p.m * vy * omega) / p.m,
        (fry + ffy * cdelta - p.m * vx * omega) / p.m,
        (ffy * p.lf * cdelta - fry * p.lr) / p.Iz,
    )


def deriv_array(x: np.ndarray, u: np.ndarray, p: VehicleParams) -> np.ndarray:
    """Vectorized derivative: x has shape (6, ...), u has shape (2, ...)."""
    phi, vx, vy, omega = x[2], x[3], x[4], x[5]
    d, delta = u[0], u[1]
    vxg = np.maximum(vx, p.vx_guard)
    alpha_f = -np.arctan((omega * p.lf + vy) / vxg) + delta
    alpha_r = np.arctan((omega * p.lr - vy) / vxg)
    tf, tr, dt = p.tire_front, p.tire_rear, p.drivetrain
    ffy = tf.D * np.sin(tf.C * np.arctan(tf.B * alpha_f))
    fry = tr.D * np.sin(tr.C * np.arctan(tr.B * alpha_r))
    frx = (dt.Cm1 - dt.Cm2 * vx) * d - dt.Cr0 - dt.Cr2 * vx * vx
    cphi, sphi = np.cos(phi), np.sin(phi)
    cdelta, sdelta = np.cos(delta), np.sin(delta)
    return np.stack(
        [
            vx * cphi - vy * sphi,
            vx * sphi + vy * cphi,
            omega + np.zeros_like(vx),
            (frx - ffy * sdelta + p.m * vy * omega) / p.m,
            (fry + ffy * cdelta - p.m * vx * omega) / p.m,
            (ffy * p.lf * cdelta - fry * p.lr) / p.Iz,
        ]
    )


def state_derivative(
    state: VehicleState, inp: ControlInput, params: VehicleParams
) -> StateDerivative:
    """Time derivatives of the six dynamic state fields."""
    out = _deriv(state.dynamic_fields(), inp.d, inp.delta, params)
    return StateDerivative(*out)


def _rk4_core(x, d, delta, p: VehicleParams, dt: float):
    k1 = _deriv(x, d, delta, p)
    x2 = tuple(xi + 0.5 * dt * ki for xi, ki in zip(x, k1))
    k2 = _deriv(x2, d, delta, p)
    x3 = tuple(xi + 0.5 * dt * ki for xi, ki in zip(x, k2))
    k3 = _deriv(x3, d, delta, p)
    x4 = tuple(xi + dt * ki for xi, ki in zip(x, k3))
    k4 = _deriv(x4, d, delta, p)
    return tuple(
        xi + dt / 6.0 * (a + 2.0 * b + 2.0 * c + e)
        for xi, a, b, c, e in zip(x, k1, k2, k3, k4)
    )


def rk4_array(
    x: np.ndarray, u: np.ndarray, p: VehicleParams, dt: float
) -> np.ndarray:
    """One classical RK4 step on the array path (no wrap, no timestamp)."""
    k1 = deriv_array(x, u, p)
    k2 = deriv_array(x + 0.5 * dt * k1, u, p)
    k3 = deriv_array(x + 0.5 * dt * k2, u, p)
    k4 = deriv_array(x + dt * k3, u, p)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(
    state: VehicleState, inp: ControlInput, params: VehicleParams, dt: float
) -> VehicleState:
    """Advance the state by one RK4 step of dt seconds with the input held.

    phi is renormalized to (-pi, pi] and the timestamp advanced by dt.
    Raises NonFiniteStateError when the step leaves the finite domain.
    """
    if not 0.0 < dt <= MAX_RK4_DT_S:
        raise ValueError(f"dt must be in (0, {MAX_RK4_DT_S}] s, got {dt}")
    out = _rk4_core(state.dynamic_fields(), inp.d, inp.delta, params, dt)
    if not all(math.isfinite(v) for v in out):
        raise NonFiniteStateError(
            f"non-finite state after RK4 step from t={state.timestamp_ns} ns"
        )
    return VehicleState(
        X=out[0],
        Y=out[1],
        phi=wrap_angle(out[2]),
        vx=out[3],
        vy=out[4],
        omega=out[5],
        timestamp_ns=state.timestamp_ns + round(dt * NS_PER_S),
    )


def simulate(
    initial: VehicleState,
    inputs: ControlInput | Sequence[ControlInput],
    params: VehicleParams,
    dt: float,
    steps: int,
) -> list[VehicleState]:
    """Roll the model forward; returns steps+1 states including the initial one.

    `inputs` is either a single ControlInput held for the whole rollout or a
    sequence of exactly `steps` inputs, one per step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(inputs, ControlInput):
        seq = [inputs] * steps
    else:
        seq = list(inputs)
        if len(seq) != steps:
            raise ValueError(f"expected {steps} inputs, got {len(seq)}")
    out = [initial]
    state = initial
    for k in range(steps):
        try:
            state = rk4_step(state, seq[k], params, dt)
        except NonFiniteStateError as exc:
            raise NonFiniteStateError(f"blow-up at step {k}: {exc}") from exc
        out.append(state)
    return out
