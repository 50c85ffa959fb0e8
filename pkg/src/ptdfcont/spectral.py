"""Real trigonometric projections onto the first Fourier modes of a period.

Basis functions are indexed ``k = -N..N``: cosines for negative ``k``,
sines for positive ``k`` and a constant for ``k = 0``, each carrying the
``sqrt(2/T)`` (or ``sqrt(1/T)``) weight.  Projection integrates against the
basis with a ``1/T`` prefactor, so ``project(reconstruct(x)) == x / T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class AliasingError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralCoeffs:
    order: int
    coeffs: np.ndarray
    period: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if self.order < 0 or c.shape != (2 * self.order + 1,):
            raise ValueError(f"need {2 * self.order + 1} coefficients for order {self.order}, got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    def __getitem__(self, k: int) -> float:
        return float(self.coeffs[k + self.order])

    @classmethod
    def scalar(cls, phi0: float, period: float) -> "SpectralCoeffs":
        """Order-0 coefficients whose reconstruction is the constant ``phi0``."""
        return cls(0, np.array([phi0 * math.sqrt(period)]), period)

    def __call__(self, t):
        return reconstruct(self, t)


def basis(k: int, t, T: float):
    """``b_k(2 pi t / T)``."""
    arg = 2.0 * math.pi * np.asarray(t, dtype=float) / T
    if k == 0:
        return np.full_like(arg, math.sqrt(1.0 / T)) if arg.ndim else math.sqrt(1.0 / T)
    amp = math.sqrt(2.0 / T)
    if k < 0:
        return amp * np.cos(-k * arg)
    return amp * np.sin(k * arg)


def basis_derivative(k: int, t, T: float):
    """Time derivative of ``b_k(2 pi t / T)``."""
    arg = 2.0 * math.pi * np.asarray(t, dtype=float) / T
    if k == 0:
        return np.zeros_like(arg) if arg.ndim else 0.0
    amp = math.sqrt(2.0 / T) * 2.0 * math.pi * abs(k) / T
    if k < 0:
        return -amp * np.sin(-k * arg)
    return amp * np.cos(k * arg)


def trapezoid_weights(n: int) -> np.ndarray:
    """Weights of the composite trapezoid rule on ``n + 1`` uniform nodes of ``[0, 1]``."""
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    return w


def project(samples, order: int, T: float) -> SpectralCoeffs:
    """Project one period of uniformly spaced samples (both endpoints included)."""
    y = np.asarray(samples, dtype=float)
    n = y.size - 1
    if y.size < 4 * order + 4:
        raise AliasingError(f"{y.size} samples cannot resolve order {order}")
    s = np.linspace(0.0, T, n + 1)
    w = trapezoid_weights(n)  # already includes the 1/T of the integral
    x = np.array([np.dot(w, basis(k, s, T) * y) for k in range(-order, order + 1)])
    return SpectralCoeffs(order, x, T)


def reconstruct(coeffs: SpectralCoeffs, t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for k in range(-coeffs.order, coeffs.order + 1):
        out = out + coeffs[k] * basis(k, t, coeffs.period)
    return out if out.ndim else float(out)


def reconstruct_derivative(coeffs: SpectralCoeffs, t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for k in range(-coeffs.order, coeffs.order + 1):
        out = out + coeffs[k] * basis_derivative(k, t, coeffs.period)
    return out if out.ndim else float(out)


def normalization(T: float) -> float:
    """The factor ``alpha`` with ``project(reconstruct(x)) = alpha * x``."""
    return 1.0 / T


def feedback_kernel(order: int, n: int) -> np.ndarray:
    """Weights turning lagged samples into ``T * Q_N P_N`` evaluated at lag zero.

    For a window ``y(s) = phi(t - s)``, ``s = j T / n``, the projected signal
    at ``s = 0`` is ``(1/T) * integral D_N(s) y(s) ds`` with the Dirichlet
    kernel ``D_N(s) = 1 + 2 sum_k cos(2 pi k s / T)``.  The sine modes vanish
    at lag zero.  For ``order == 0`` the kernel is exactly one, so the
    feedback reduces to the plain period average.
    """
    s = np.arange(n + 1) / n
    d = np.ones(n + 1)
    for k in range(1, order + 1):
        d += 2.0 * np.cos(2.0 * math.pi * k * s)
    return d


def feedback_kernel_derivative(order: int, n: int, T: float) -> np.ndarray:
    """Lag derivative of :func:`feedback_kernel`, ``dD_N/ds`` on the same nodes."""
    s = np.arange(n + 1) / n
    d = np.zeros(n + 1)
    for k in range(1, order + 1):
        d -= 2.0 * (2.0 * math.pi * k / T) * np.sin(2.0 * math.pi * k * s)
    return d
