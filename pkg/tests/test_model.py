import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from ptdfcont.model import (
    PendulumParams,
    PlantState,
    energy_lab,
    pd_torque,
    phi_accel,
    rhs_lab,
    rhs_rotating,
)


def test_defaults_load_calibrated_model():
    p = PendulumParams.default()
    assert p.l == pytest.approx(0.3)
    assert p.b == pytest.approx(0.01)
    assert p.period == pytest.approx(1.0 / 3.0)


@pytest.mark.parametrize("field,value", [("m", 0.0), ("l", -1.0), ("g", math.nan), ("b", -0.1)])
def test_invalid_constants_rejected(field, value):
    with pytest.raises(ValueError):
        PendulumParams(**{field: value})


def test_plant_state_rejects_nan():
    with pytest.raises(ValueError):
        PlantState(math.nan, 0.0, 0.0)


@given(theta=st.floats(-10, 10), theta_dot=st.floats(-50, 50), t=st.floats(0, 5))
def test_frame_round_trip(theta, theta_dot, t):
    w = 6 * math.pi
    s = PlantState.from_lab(theta, theta_dot, t, w)
    back = s.to_lab(w)
    assert back[0] == pytest.approx(theta, abs=1e-12)
    assert back[1] == pytest.approx(theta_dot, abs=1e-12)


@settings(max_examples=30)
@given(phi=st.floats(-4, 4), dphi=st.floats(-5, 5), t=st.floats(0, 1), p=st.floats(0, 0.03))
def test_rotating_acceleration_equals_lab(phi, dphi, t, p):
    params = PendulumParams()
    theta, theta_dot = PlantState(phi, dphi, t).to_lab(params.omega)
    lab = rhs_lab((theta, theta_dot), t, params, p)
    rot = rhs_rotating(PlantState(phi, dphi, t), params, p)
    assert rot[1] == pytest.approx(lab[1], rel=1e-12, abs=1e-9)


def test_rotating_trajectory_matches_lab_integration():
    params = PendulumParams()
    p = 0.01
    y0 = (0.3, 0.1)
    T = params.period
    lab = solve_ivp(lambda t, y: rhs_lab(y, t, params, p), (0, 3 * T), [y0[0], y0[1] + params.omega],
                    rtol=1e-11, atol=1e-12)
    rot = solve_ivp(lambda t, y: [y[1], phi_accel(y[0], y[1], t, params, p)], (0, 3 * T), list(y0),
                    rtol=1e-11, atol=1e-12)
    theta_end = rot.y[0, -1] + params.omega * 3 * T
    assert theta_end == pytest.approx(lab.y[0, -1], abs=1e-7)


def test_energy_conserved_without_damping_or_excitation():
    params = PendulumParams(b=0.0)
    sol = solve_ivp(lambda t, y: rhs_lab(y, t, params, 0.0), (0, 5), [1.0, 0.0], rtol=1e-11, atol=1e-12)
    e = energy_lab(sol.y[0], sol.y[1], params)
    assert np.ptp(e) < 1e-8


def test_phi_accel_broadcasts():
    params = PendulumParams()
    phi = np.linspace(-1, 1, 5)
    out = phi_accel(phi, np.zeros(5), np.zeros(5), params, 0.0)
    assert out.shape == (5,)
    assert out[2] == pytest.approx(-params.b * params.omega / params.inertia)


def test_pd_torque_sign_and_ratio():
    params = PendulumParams()
    assert pd_torque(1.0, 0.0, params, 2.0) == pytest.approx(-params.m * params.l * 2.0)
    assert pd_torque(0.0, 1.0, params, 2.0) == pytest.approx(-params.m * params.l * 1.0)
    assert pd_torque(0.3, -0.2, params, 0.0) == 0.0


def test_abel_determinant_formula():
    params = PendulumParams(m=2.0, l=0.5, b=0.1)
    assert params.abel_determinant == pytest.approx(math.exp(-0.1 * params.period / 0.5))
