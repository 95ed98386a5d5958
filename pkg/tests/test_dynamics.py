import math

import numpy as np
import pytest
from scipy.linalg import expm

from headway.dynamics import (
    PlantParams,
    VehicleState,
    feedback_linearize,
    linear_accel_step,
    plant_step,
    zoh_matrices,
)

TAU = 0.4
DT = 0.1


def analytic_lag_response(x0, v0, a0, u, tau, t):
    """Closed-form solution of x'=v, v'=a, a'=(u-a)/tau with constant u."""
    e = math.exp(-t / tau)
    a = u + (a0 - u) * e
    v = v0 + u * t + tau * (a0 - u) * (1.0 - e)
    x = (
        x0
        + v0 * t
        + 0.5 * u * t * t
        + tau * (a0 - u) * t
        - tau * tau * (a0 - u) * (1.0 - e)
    )
    return x, v, a


def test_feedback_linearize_closed_form():
    p = PlantParams()
    st = VehicleState(x=0.0, v=12.0, a=0.8)
    eta = feedback_linearize(st, 1.5, p)
    expected = (
        p.m * 1.5
        + p.K_d * 12.0 ** 2
        + p.d_m
        + 2.0 * p.tau_A * p.K_d * 12.0 * 0.8
    )
    assert eta == pytest.approx(expected, rel=0, abs=1e-12)


def test_zoh_matrices_match_expm():
    # block-matrix exponential as the independent discretization oracle
    for tau, dt in [(0.4, 0.1), (0.25, 0.05), (1.1, 0.2)]:
        A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0 / tau]])
        B = np.array([[0.0], [0.0], [1.0 / tau]])
        M = np.zeros((4, 4))
        M[:3, :3] = A
        M[:3, 3:] = B
        Me = expm(M * dt)
        Ad, Bd = zoh_matrices(tau, dt)
        assert np.allclose(Ad, Me[:3, :3], atol=1e-13)
        assert np.allclose(Bd, Me[:3, 3], atol=1e-13)


def test_linear_accel_step_matches_analytic():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x0, v0, a0 = rng.uniform(-50, 50), rng.uniform(0, 30), rng.uniform(-3, 3)
        u = rng.uniform(-3.5, 3.0)
        st = VehicleState(x=x0, v=v0, a=a0, t=2.0)
        out = linear_accel_step(st, u, TAU, DT)
        xa, va, aa = analytic_lag_response(x0, v0, a0, u, TAU, DT)
        assert out.x == pytest.approx(xa, abs=1e-10)
        assert out.v == pytest.approx(va, abs=1e-10)
        assert out.a == pytest.approx(aa, abs=1e-10)
        assert out.t == pytest.approx(2.0 + DT)


def test_cancellation_single_step():
    """The drag/lag terms cancel: the nonlinear plant under the linearizing
    input must track the linear lag model to tight tolerance."""
    p = PlantParams()
    rng = np.random.default_rng(11)
    for _ in range(300):
        st = VehicleState(
            x=rng.uniform(-100, 100),
            v=rng.uniform(1.0, 30.0),  # away from the standstill clamp
            a=rng.uniform(-3.0, 3.0),
        )
        u = rng.uniform(-3.5, 3.0)
        nl = plant_step(st, u, p, DT)
        lin = linear_accel_step(st, u, p.tau_A, DT)
        assert abs(nl.x - lin.x) < 1e-8
        assert abs(nl.v - lin.v) < 1e-8
        assert abs(nl.a - lin.a) < 1e-8


def test_cancellation_across_params():
    rng = np.random.default_rng(13)
    for _ in range(50):
        p = PlantParams(
            m=rng.uniform(900, 2500),
            K_d=rng.uniform(0.2, 1.2),
            d_m=rng.uniform(50, 400),
            tau_A=rng.uniform(0.2, 0.8),
        )
        st = VehicleState(x=0.0, v=rng.uniform(2, 25), a=rng.uniform(-2, 2))
        u = rng.uniform(-3, 3)
        nl = plant_step(st, u, p, DT)
        lin = linear_accel_step(st, u, p.tau_A, DT)
        # RK4 truncation grows as (h/tau)^5, so small tau eats into the margin
        assert abs(nl.v - lin.v) < 1e-6 and abs(nl.a - lin.a) < 1e-6


def test_speed_never_negative():
    p = PlantParams()
    st = VehicleState(x=0.0, v=0.6, a=-1.0)
    for _ in range(40):
        st = plant_step(st, -3.5, p, DT)
        assert st.v >= 0.0
    # hard braking from a crawl ends at a full stop with zero accel
    assert st.v == 0.0
    assert st.a == 0.0


def test_stop_freezes_position():
    p = PlantParams()
    st = VehicleState(x=10.0, v=0.0, a=0.0)
    out = st
    for _ in range(20):
        out = plant_step(out, -2.0, p, DT)
    assert out.x == pytest.approx(10.0, abs=1e-12)
    assert out.v == 0.0


def test_stopping_position_bracketed():
    # decelerating at a steady -3 from 0.05 m/s stops after v0^2/6 metres;
    # the crossing interpolation should land close to that
    p = PlantParams()
    st = VehicleState(x=0.0, v=0.05, a=-3.0)
    out = plant_step(st, -3.0, p, DT)
    assert out.v == 0.0
    assert 0.0 < out.x < st.v * DT
    assert out.x == pytest.approx(st.v ** 2 / 6.0, rel=0.05)


def test_plant_params_validation():
    PlantParams().validate()
    with pytest.raises(ValueError):
        PlantParams(m=0.0).validate()
    with pytest.raises(ValueError):
        PlantParams(tau_A=-0.1).validate()
    with pytest.raises(ValueError):
        PlantParams(K_d=-1.0).validate()
    with pytest.raises(ValueError):
        PlantParams(length=0.0).validate()


def test_zoh_matrices_cached_identity():
    a1 = zoh_matrices(0.4, 0.1)
    a2 = zoh_matrices(0.4, 0.1)
    assert a1[0] is a2[0]  # lru cache hands back the same arrays
    assert not a1[0].flags.writeable
