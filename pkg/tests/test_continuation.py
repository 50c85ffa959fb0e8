import math

import numpy as np
import pytest

from ptdfcont import continuation as cont
from ptdfcont.delay_sim import LossOfControl


@pytest.fixture(scope="module")
def settings():
    return cont.ContinuationSettings()


@pytest.fixture(scope="module")
def on_branch(params, interp, settings):
    """A converged experiment-side point on the stable segment and its oracle."""
    orbit = interp.orbit_at(-2.6)
    oracle = cont.M1Oracle(params, settings)
    start = cont.start_point(orbit.p, orbit.avg_phase, oracle)
    return start, oracle, orbit


def _point(p, phi0, tangent):
    return cont.BranchPoint(p, phi0, np.asarray(tangent, float), 0.0, cont.M1Summary(math.nan, 0, 0.0, "ok"), 0.0)


def test_settings_eps_below_newton_tolerance(settings):
    assert settings.transient_eps < settings.newton_tol * settings.sigma_phi
    assert settings.policy().eps == settings.transient_eps


def test_scale_round_trip(settings):
    x = settings.scale(0.0123, -2.5)
    assert settings.unscale(x) == pytest.approx((0.0123, -2.5))


def test_start_point_is_fixed_point(on_branch, settings):
    start, _, orbit = on_branch
    assert start.residual_norm <= settings.newton_tol
    assert start.p == orbit.p
    assert abs(start.phi0 - orbit.avg_phase) <= 3 * settings.sigma_phi
    np.testing.assert_array_equal(start.tangent, [-1.0, 0.0])


def test_residual_r1_trivial_cases(on_branch, settings):
    start, oracle, _ = on_branch
    r, _ = cont.residual(start.p, start.phi0, start, 0.0, oracle, keep=False)
    assert r[0] == 0.0
    x = settings.scale(start.p, start.phi0) + 3.0 * start.tangent
    p, phi0 = settings.unscale(x)
    r, _ = cont.residual(p, phi0, start, 3.0, oracle, keep=False)
    assert r[0] == pytest.approx(0.0, abs=1e-9)


def test_residual_slope_in_phi0(on_branch, settings):
    start, oracle, _ = on_branch
    base, _ = cont.residual(start.p, start.phi0, start, 0.0, oracle, keep=False)
    d = 5 * settings.sigma_phi
    r1, _ = cont.residual(start.p, start.phi0 + d, start, 0.0, oracle, keep=False)
    r2, _ = cont.residual(start.p, start.phi0 + 2 * d, start, 0.0, oracle, keep=False)
    s1 = (r1[1] - base[1]) / 5
    s2 = (r2[1] - base[1]) / 10
    assert s1 == pytest.approx(s2, rel=0.05)
    assert -1.0 < s1 < 0.0  # dM1/dphi0 - 1 with 0 < dM1/dphi0 < 1


def test_fd_jacobian_first_row_is_tangent_and_stable(on_branch, settings):
    start, oracle, _ = on_branch
    J = cont.fd_jacobian(start.p, start.phi0, start, 0.0, oracle)
    np.testing.assert_array_equal(J[0], start.tangent)
    half = cont.ContinuationSettings(fd_dp=0.5)
    o2 = cont.M1Oracle(oracle.params, half, history=oracle.history)
    J2 = cont.fd_jacobian(start.p, start.phi0, start, 0.0, o2)
    np.testing.assert_allclose(J2[1], J[1], rtol=0.1)
    # stable side: M1 grows with p and contracts in phi0, so J is nonsingular
    assert J[1, 0] > 0
    assert -1.0 < J[1, 1] < 0.0
    assert abs(np.linalg.det(J)) == pytest.approx(abs(J[1, 1]))


def test_newton_zero_iterations_on_solution(on_branch):
    start, oracle, _ = on_branch
    pt = cont.newton_correct((start.p, start.phi0), start, 0.0, oracle)
    assert pt.iterations == 0


def test_newton_converges_quickly_from_predictor(on_branch, settings):
    start, oracle, _ = on_branch
    tangent = np.array([0.0, -1.0])
    prev = _point(start.p, start.phi0, tangent)
    h = 100.0
    p, phi0 = settings.unscale(settings.scale(start.p, start.phi0) + h * tangent)
    pt = cont.newton_correct((p, phi0), prev, h, oracle)
    assert pt.iterations <= 5
    assert pt.residual_norm <= settings.newton_tol


def test_update_tangent(settings):
    a = _point(0.01, -2.0, [1.0, 0.0])
    b = _point(0.01, -2.0 + 1e-3, [1.0, 0.0])
    t = cont.update_tangent(np.array([0.0, -1.0]), b, a, settings)
    np.testing.assert_allclose(t, [0.0, -1.0])
    assert np.linalg.norm(t) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(cont.CoincidentPoints):
        cont.update_tangent(np.array([1.0, 0.0]), a, a, settings)


def test_loss_of_control_reported(params, interp):
    """Zero gain from an unstable orbit: the residual evaluation raises."""
    orbit = interp.orbit_at(-3.4)
    s = cont.ContinuationSettings(gain=0.0, max_periods=60)
    oracle = cont.M1Oracle(params, s)
    prev = _point(orbit.p, orbit.avg_phase, [0.0, -1.0])
    with pytest.raises(LossOfControl):
        cont.residual(orbit.p, orbit.avg_phase, prev, 0.0, oracle)


def test_branch_csv_round_trip(tmp_path):
    br = cont.Branch([_point(0.02, -1.7, [-1, 0]), _point(0.019, -1.8, [0, -1])])
    br.points[1].flag = "fold"
    path = tmp_path / "b.csv"
    br.to_csv(path, ["head"])
    back = cont.load_branch_csv(path)
    assert back.fold_index == 1
    assert [pt.p for pt in back.points] == [0.02, 0.019]
    lines = path.read_text().splitlines()
    assert lines[1] == "index,p,phi0,p_tan,phi0_tan,residual,periods_used,u_sup,flag"
