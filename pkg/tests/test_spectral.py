import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptdfcont import spectral

T = 1.0 / 3.0


def test_basis_orthonormal_under_projection():
    n = 64
    s = np.linspace(0, T, n + 1)
    for k in range(-3, 4):
        c = spectral.project(spectral.basis(k, s, T), 3, T)
        expect = np.zeros(7)
        expect[k + 3] = 1.0 / T
        np.testing.assert_allclose(c.coeffs, expect, atol=1e-13)


@settings(max_examples=40)
@given(order=st.integers(0, 6), seed=st.integers(0, 2**31 - 1))
def test_round_trip_band_limited(order, seed):
    rng = np.random.default_rng(seed)
    x = spectral.SpectralCoeffs(order, rng.normal(size=2 * order + 1), T)
    n = 4 * order + 8
    s = np.linspace(0, T, n + 1)
    c = spectral.project(x(s), order, T)
    np.testing.assert_allclose(c.coeffs / spectral.normalization(T), x.coeffs, atol=1e-10)


def test_projection_matches_fft():
    n = 128
    s = np.linspace(0, T, n + 1)
    y = 0.3 + 1.5 * np.cos(2 * math.pi * 2 * s / T) - 0.7 * np.sin(2 * math.pi * 3 * s / T)
    c = spectral.project(y, 3, T)
    f = np.fft.rfft(y[:-1]) / n
    # cos coefficient a_k = 2 Re f_k, sin coefficient b_k = -2 Im f_k
    amp = math.sqrt(2.0 / T)
    assert 2 * c[-2] / amp == pytest.approx(2 * f[2].real, abs=1e-12)
    assert 2 * c[3] / amp == pytest.approx(-2 * f[3].imag, abs=1e-12)
    assert c[0] * math.sqrt(T) == pytest.approx(f[0].real, abs=1e-12)


def test_scalar_coefficients_reconstruct_constant():
    c = spectral.SpectralCoeffs.scalar(-1.25, T)
    assert c(0.1) == pytest.approx(-1.25)
    assert c.coeffs[0] == pytest.approx(-1.25 * math.sqrt(T))


def test_aliasing_rejected():
    with pytest.raises(spectral.AliasingError):
        spectral.project(np.zeros(7), 1, T)


def test_wrong_coefficient_count():
    with pytest.raises(ValueError):
        spectral.SpectralCoeffs(2, np.zeros(3), T)


def test_reconstruct_derivative_against_difference():
    x = spectral.SpectralCoeffs(2, np.array([0.2, -0.4, 1.0, 0.3, 0.5]), T)
    t = np.linspace(0, T, 11)
    h = 1e-6
    fd = (x(t + h) - x(t - h)) / (2 * h)
    np.testing.assert_allclose(spectral.reconstruct_derivative(x, t), fd, rtol=1e-7, atol=1e-6)


@pytest.mark.parametrize("order", [0, 1, 3])
def test_feedback_kernel_is_projection_at_lag_zero(order):
    """Kernel weights on a lag window give the projected signal's value at the window end."""
    n = 64
    rng = np.random.default_rng(order)
    x = spectral.SpectralCoeffs(order + 2, rng.normal(size=2 * order + 5), T)
    t_end = 0.4
    window = x(t_end - np.arange(n + 1) * T / n)
    via_kernel = np.dot(spectral.trapezoid_weights(n), spectral.feedback_kernel(order, n) * window)
    # direct route: project one period ending at t_end, truncate to order, reconstruct at t_end
    s = t_end - T + np.arange(n + 1) * T / n
    full = spectral.project(x(s), order, T).coeffs * T
    shift = t_end - T
    direct = sum(full[k + order] * spectral.basis(k, t_end - shift, T) for k in range(-order, order + 1))
    assert via_kernel == pytest.approx(direct, abs=1e-12)


def test_kernel_order_zero_is_one():
    np.testing.assert_array_equal(spectral.feedback_kernel(0, 16), np.ones(17))
    np.testing.assert_array_equal(spectral.feedback_kernel_derivative(0, 16, T), np.zeros(17))


def test_kernel_derivative_against_difference():
    n = 400
    k = spectral.feedback_kernel(2, n)
    dk = spectral.feedback_kernel_derivative(2, n, T)
    fd = np.gradient(k, T / n)
    np.testing.assert_allclose(dk[5:-5], fd[5:-5], atol=2e-3 * np.max(np.abs(dk)))
