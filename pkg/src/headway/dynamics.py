"""Longitudinal vehicle model with engine lag.

Two faces of the same vehicle: the nonlinear plant (quadratic aerodynamic
drag, mechanical drag, first-order engine lag) integrated with RK4, and the
feedback-linearized triple integrator-with-lag propagated by its exact
zero-order-hold discretization.  With matched parameters the control law
cancels the drag terms, so both agree to integration accuracy; the controller
predicts with the linear model while the simulator steps the nonlinear one.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
import math

import numpy as np

from . import accel


@dataclass(frozen=True)
class VehicleState:
    """Position, speed and realized acceleration of one vehicle at time t."""

    x: float
    v: float
    a: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class PlantParams:
    """Engine-lag plant parameters; defaults are passenger-car scale.

    m: vehicle mass (kg), K_d: aerodynamic drag coefficient (kg/m),
    d_m: mechanical drag (N), tau_A: engine time lag (s),
    length: vehicle length (m), used when this vehicle is someone's leader.
    """

    m: float = 1500.0
    K_d: float = 0.55
    d_m: float = 150.0
    tau_A: float = 0.4
    length: float = 4.5

    def validate(self) -> None:
        if not (self.m > 0):
            raise ValueError("plant.m must be > 0")
        if not (self.tau_A > 0):
            raise ValueError("plant.tau_A must be > 0")
        if self.K_d < 0:
            raise ValueError("plant.K_d must be >= 0")
        if self.d_m < 0:
            raise ValueError("plant.d_m must be >= 0")
        if not (self.length > 0):
            raise ValueError("plant.length must be > 0")


def feedback_linearize(state: VehicleState, u: float, params: PlantParams) -> float:
    """Engine input that cancels both drag terms, leaving da/dt = (u - a)/tau_A."""
    return (
        params.m * u
        + params.K_d * state.v * state.v
        + params.d_m
        + 2.0 * params.tau_A * params.K_d * state.v * state.a
    )


@lru_cache(maxsize=512)
def zoh_matrices(tau: float, dt: float):
    """Exact one-step discretization (Ad, Bd) of the lag-linear (x, v, a) system.

    Continuous model: dx = v, dv = a, da = (u - a)/tau with u held constant
    over the step.  Closed form of the matrix exponential; cross-checked
    against the expm block construction in the test suite.
    """
    if dt <= 0 or tau <= 0:
        raise ValueError("dt and tau must be > 0")
    E = math.exp(-dt / tau)
    om = 1.0 - E
    Ad = np.array(
        [
            [1.0, dt, tau * dt - tau * tau * om],
            [0.0, 1.0, tau * om],
            [0.0, 0.0, E],
        ]
    )
    Bd = np.array(
        [
            0.5 * dt * dt - tau * dt + tau * tau * om,
            dt - tau * om,
            om,
        ]
    )
    Ad.setflags(write=False)
    Bd.setflags(write=False)
    return Ad, Bd


def linear_accel_step(state: VehicleState, u: float, tau_A: float, dt: float) -> VehicleState:
    """Propagate the linearized model one step of dt (exact ZOH)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    Ad, Bd = zoh_matrices(tau_A, dt)
    s = Ad @ np.array([state.x, state.v, state.a]) + Bd * u
    return VehicleState(x=float(s[0]), v=float(s[1]), a=float(s[2]), t=state.t + dt)


def plant_step(
    state: VehicleState,
    u: float,
    params: PlantParams,
    dt: float,
    max_substep: float = 0.01,
) -> VehicleState:
    """Advance the nonlinear plant one step of dt under desired acceleration u.

    The engine input follows the feedback-linearizing law continuously, so this
    is the simulation ground truth that the linear prediction model is meant to
    match.  Speed is clamped at zero (no reverse); at the clamp instant both v
    and a are zeroed.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    nsub = max(1, int(math.ceil(dt / max_substep)))
    x, v, a = accel.rk4_plant(
        state.x, state.v, state.a, u, params.m, params.K_d, params.d_m, params.tau_A, dt, nsub
    )
    return replace(state, x=float(x), v=float(v), a=float(a), t=state.t + dt)
