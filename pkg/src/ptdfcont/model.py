"""Parametrically excited pendulum: lab frame, rotating frame and PD torque.

The pivot is shaken vertically with amplitude ``p`` and angular frequency
``omega``.  Rotations that lock to the excitation are T-periodic in the
rotating coordinate ``phi = theta - omega * t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

DERIV_RATIO = 0.5


def _load_defaults() -> dict:
    text = resources.files("ptdfcont").joinpath("defaults.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class PendulumParams:
    """Physical constants of the pendulum (SI units)."""

    m: float = 1.0
    l: float = 0.3
    b: float = 0.01
    g: float = 9.81
    omega: float = 6.0 * math.pi
    period: float = field(init=False)

    def __post_init__(self):
        for name in ("m", "l", "g", "omega"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if not (math.isfinite(self.b) and self.b >= 0):
            raise ValueError(f"b must be non-negative, got {self.b}")
        object.__setattr__(self, "period", 2.0 * math.pi / self.omega)

    @classmethod
    def default(cls) -> "PendulumParams":
        """Calibrated defaults shipped in ``defaults.json``."""
        d = _load_defaults()["model"]
        return cls(**{k: d[k] for k in ("m", "l", "b", "g", "omega")})

    def with_(self, **changes) -> "PendulumParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("period")
        return d

    @property
    def inertia(self) -> float:
        return self.m * self.l**2

    @property
    def abel_determinant(self) -> float:
        """Determinant of the uncontrolled monodromy matrix, exp(-b T / (m l^2))."""
        return math.exp(-self.b * self.period / self.inertia)


@dataclass(frozen=True)
class PlantState:
    phi: float
    phi_dot: float
    t: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.phi, self.phi_dot, self.t)):
            raise ValueError("PlantState fields must be finite")

    @classmethod
    def from_lab(cls, theta: float, theta_dot: float, t: float, omega: float) -> "PlantState":
        return cls(theta - omega * t, theta_dot - omega, t)

    def to_lab(self, omega: float) -> tuple[float, float]:
        return self.phi + omega * self.t, self.phi_dot + omega


def rhs_lab(state, t, params: PendulumParams, p: float) -> np.ndarray:
    """Lab-frame vector field ``(theta_dot, theta_ddot)``."""
    theta, theta_dot = state
    ml = params.m * params.l
    forcing = params.g + params.omega**2 * p * math.sin(params.omega * t)
    theta_ddot = -(params.b * theta_dot + ml * forcing * math.sin(theta)) / (ml * params.l)
    return np.array([theta_dot, theta_ddot])


def rhs_rotating(state: PlantState, params: PendulumParams, p: float, torque: float = 0.0) -> np.ndarray:
    """Rotating-frame vector field ``(phi_dot, phi_ddot)`` with an external torque."""
    phi, phi_dot, t = state.phi, state.phi_dot, state.t
    return np.array([phi_dot, phi_accel(phi, phi_dot, t, params, p, torque)])


def phi_accel(phi, phi_dot, t, params: PendulumParams, p: float, torque=0.0):
    """Angular acceleration in the rotating frame; broadcasts over numpy arrays."""
    w = params.omega
    ml = params.m * params.l
    forcing = params.g + w * w * p * np.sin(w * t)
    return (torque - params.b * phi_dot - params.b * w - ml * forcing * np.sin(phi + w * t)) / (
        ml * params.l
    )


def pd_torque(u, u_dot, params: PendulumParams, gain: float, deriv_ratio: float = DERIV_RATIO):
    """PD law ``-m l G (u + deriv_ratio * u_dot)``."""
    return -params.m * params.l * gain * (u + deriv_ratio * u_dot)


def energy_lab(theta, theta_dot, params: PendulumParams):
    """Mechanical energy of the unexcited pendulum (pivot at rest)."""
    ml = params.m * params.l
    return 0.5 * ml * params.l * theta_dot**2 - ml * params.g * np.cos(theta)
