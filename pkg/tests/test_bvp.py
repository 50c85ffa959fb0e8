import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from ptdfcont import bvp
from ptdfcont.model import PendulumParams, phi_accel

# fold of the calibrated model, frozen from the shooting oracle
FOLD_P0 = 3.5573114e-3
FOLD_PHASE = -3.1416483


def test_start_orbit_periodic_and_stable(params, start_orbit):
    assert start_orbit.residual < 1e-10
    assert start_orbit.stable
    end = start_orbit.evaluate(np.array([params.period]))[0]
    np.testing.assert_allclose(end, start_orbit.initial, atol=1e-9)


def test_orbit_is_attractor_of_plain_simulation(params, start_orbit):
    """Independent route: long uncontrolled integration converges to the shooting orbit."""
    T = params.period
    sol = solve_ivp(lambda t, y: [y[1], phi_accel(y[0], y[1], t, params, start_orbit.p)],
                    (0, 400 * T), [start_orbit.initial[0] + 0.05, start_orbit.initial[1]],
                    rtol=1e-10, atol=1e-11)
    y = sol.y[:, -1]
    y[0] -= 2 * math.pi * round((y[0] - start_orbit.initial[0]) / (2 * math.pi))
    np.testing.assert_allclose(y, start_orbit.initial, atol=1e-4)


def test_monodromy_determinant_matches_liouville(params, start_orbit):
    mono, mults = bvp.monodromy_ode(start_orbit)
    assert np.linalg.det(mono) == pytest.approx(params.abel_determinant, rel=1e-8)
    assert np.prod(mults).real == pytest.approx(params.abel_determinant, rel=1e-8)


def test_monodromy_against_finite_differences(params, start_orbit):
    mono, _ = bvp.monodromy_ode(start_orbit)
    h = 1e-6
    cols = []
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        plus = bvp.shoot_residual(start_orbit.initial + d, start_orbit.p, params)
        minus = bvp.shoot_residual(start_orbit.initial - d, start_orbit.p, params)
        cols.append((plus - minus) / (2 * h))
    fd = np.column_stack(cols) + np.eye(2)
    np.testing.assert_allclose(fd, mono, atol=1e-6)


def test_fold_location(oracle):
    branch, p0, fold = oracle
    ps = np.array([o.p for o in branch])
    i = int(np.argmin(ps))
    assert 0 < i < len(branch) - 1
    assert p0 == pytest.approx(FOLD_P0, rel=1e-6)
    assert fold.avg_phase == pytest.approx(FOLD_PHASE, abs=1e-5)
    assert p0 <= ps.min() + 1e-12
    assert abs(fold.dominant_multiplier - 1) < 1e-4


def test_branch_stability_changes_at_fold(oracle):
    branch, _, fold = oracle
    for o in branch:
        if o.avg_phase > fold.avg_phase + 0.02:
            assert o.stable
        elif o.avg_phase < fold.avg_phase - 0.02:
            assert not o.stable


def test_phase_solve_reproduces_branch_point(oracle):
    branch, _, _ = oracle
    o = branch[len(branch) // 3]
    again = bvp.solve_orbit_at_phase((*o.initial, o.p), o.avg_phase, o.params)
    assert again.p == pytest.approx(o.p, abs=1e-12)


def test_interpolator_orbit(interp, fold_orbit):
    o = interp.orbit_at(fold_orbit.avg_phase - 0.2)
    assert o.avg_phase == pytest.approx(fold_orbit.avg_phase - 0.2, abs=1e-12)
    assert o.p > fold_orbit.p


def test_no_rotation_for_tiny_excitation():
    params = PendulumParams.default()
    with pytest.raises(bvp.OracleError):
        bvp.solve_orbit(np.array([0.0, 0.0]), 1e-4, params)


def test_branch_save_load_round_trip(tmp_path, oracle):
    branch, _, _ = oracle
    part = branch[:6]
    path = tmp_path / "b.csv"
    bvp.save_branch(part, path, ["x"])
    back = bvp.load_branch(path, part[0].params)
    assert [o.p for o in back] == pytest.approx([o.p for o in part], abs=1e-11)


def test_orbit_save(tmp_path, start_orbit):
    start_orbit.save(tmp_path / "orbit")
    assert (tmp_path / "orbit.csv").read_text().splitlines()[0] == "t,phi,phi_dot"
    assert (tmp_path / "orbit.json").is_file()


def test_settle_rotation_wraps_phase(params):
    y = bvp.settle_rotation(params, 0.02, 0.0, periods=50)
    assert -math.pi <= y[0] < math.pi
