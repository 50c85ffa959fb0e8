"""Closed-loop simulation of the pendulum under projected time-delayed feedback.

The feedback block keeps a reference trace ``phi_ref`` built from the output
one period ago, shifted so that its projection onto the first Fourier modes
(for order 0: its period average) is removed.  The PD controller sees

    u(t) = phi(t) - phi_ref(t) - reference(t)

and vanishes on any T-periodic output whose projection equals the external
reference.  ``evaluate_m1`` runs the loop until the period average settles
and reports that asymptotic average.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import spectral
from .bvp import PeriodicOrbit
from .model import DERIV_RATIO, PendulumParams, phi_accel


class HistoryUnderrun(ValueError):
    pass


class LossOfControl(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlConfig:
    gain: float
    reference: np.ndarray
    deriv_ratio: float = DERIV_RATIO
    relaxation: float = 1.0
    projection_order: int = 0

    def __post_init__(self):
        ref = np.atleast_1d(np.asarray(self.reference, dtype=float))
        object.__setattr__(self, "reference", ref)
        if not (0.0 < self.relaxation <= 1.0):
            raise ValueError(f"relaxation must satisfy 0 < R <= 1, got {self.relaxation}")
        if self.projection_order < 0 or int(self.projection_order) != self.projection_order:
            raise ValueError("projection_order must be a non-negative integer")
        if ref.shape != (2 * self.projection_order + 1,):
            raise ValueError(
                f"reference needs {2 * self.projection_order + 1} coefficients, got {ref.size}"
            )

    @classmethod
    def scalar(cls, phi0: float, period: float, gain: float, **kw) -> "ControlConfig":
        """Order-0 configuration with constant reference ``phi0`` (rad)."""
        return cls(gain=gain, reference=spectral.SpectralCoeffs.scalar(phi0, period).coeffs, **kw)

    def coeffs(self, period: float) -> spectral.SpectralCoeffs:
        return spectral.SpectralCoeffs(self.projection_order, self.reference, period)

    def phi0(self, period: float) -> float:
        """Constant part of the reference in rad."""
        return float(self.reference[self.projection_order] / math.sqrt(period))

    def with_phi0(self, phi0: float, period: float) -> "ControlConfig":
        ref = self.reference.copy()
        ref[self.projection_order] = phi0 * math.sqrt(period)
        return replace(self, reference=ref)


@dataclass(frozen=True)
class TransientPolicy:
    eps: float = 1e-6
    consecutive: int = 3
    max_periods: int = 500
    blowup: float = 1e3
    u_escape: float = 1.0


@dataclass(frozen=True)
class SimSettings:
    steps_per_period: int = 512


_CHANNELS = ("phi", "dphi", "acc", "ref", "dref", "F", "dF", "Gc", "u", "torque")


@dataclass
class HistorySegment:
    """Uniformly sampled record of the closed loop over the last ``2T`` or more.

    ``start`` is the absolute node index of the first sample; node ``j`` sits
    at time ``(start + j) * dt``.  Lookups are by lag behind the last sample.
    """

    dt: float
    steps_per_period: int
    start: int
    phi: np.ndarray
    dphi: np.ndarray
    acc: np.ndarray
    ref: np.ndarray
    dref: np.ndarray
    F: np.ndarray
    dF: np.ndarray
    Gc: np.ndarray
    u: np.ndarray
    torque: np.ndarray
    order: int = 0

    def __post_init__(self):
        if self.span < 2 * self.period * (1 - 1e-12):
            raise HistoryUnderrun(f"history spans {self.span:.6g}s, needs at least 2T")

    @property
    def period(self) -> float:
        return self.steps_per_period * self.dt

    @property
    def size(self) -> int:
        return self.phi.size

    @property
    def span(self) -> float:
        return (self.size - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return (self.start + np.arange(self.size)) * self.dt

    @property
    def t_end(self) -> float:
        return (self.start + self.size - 1) * self.dt

    def tail(self, nodes: int) -> "HistorySegment":
        k = self.size - nodes
        if k < 0:
            raise HistoryUnderrun("not enough samples")
        parts = {c: getattr(self, c)[k:].copy() for c in _CHANNELS}
        return HistorySegment(self.dt, self.steps_per_period, self.start + k, order=self.order, **parts)

    def lookup(self, lag: float, channel: str = "phi") -> float:
        """Interpolated value ``lag`` seconds before the last sample.

        ``phi``, ``F`` and ``ref`` use cubic Hermite interpolation with their
        stored derivatives; the other channels use four-point cubic Lagrange.
        """
        if lag < -1e-12 * self.dt or lag > self.span * (1 + 1e-12):
            raise HistoryUnderrun(f"lag {lag} outside [0, {self.span}]")
        x = (self.size - 1) - lag / self.dt
        k = int(math.floor(x + 1e-9))
        theta = x - k
        if theta < 1e-9:
            return float(getattr(self, channel)[k])
        if k >= self.size - 1:
            return float(getattr(self, channel)[-1])
        pairs = {"phi": "dphi", "F": "dF", "ref": "dref"}
        y = getattr(self, channel)
        if channel in pairs:
            d = getattr(self, pairs[channel])
            return _hermite(y[k], y[k + 1], d[k], d[k + 1], self.dt, theta)
        lo = min(max(k - 1, 0), self.size - 4)
        xs = np.arange(lo, lo + 4, dtype=float)
        return float(spectral_lagrange(xs, y[lo : lo + 4], x))


def _hermite(y0, y1, d0, d1, h, s):
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return float(h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1)


def spectral_lagrange(xs, ys, x):
    total = 0.0
    for j in range(len(xs)):
        w = 1.0
        for k in range(len(xs)):
            if k != j:
                w *= (x - xs[k]) / (xs[j] - xs[k])
        total += w * ys[j]
    return total


# --------------------------------------------------------------------------
# feedback block at the python level (reference implementation and API)


def period_average(history: HistorySegment, lag: float = 0.0) -> float:
    """``avg[phi(t - .)]`` over one period ending ``lag`` before the last sample."""
    window = _window(history, lag)
    return float(np.dot(spectral.trapezoid_weights(history.steps_per_period), window))


def _window(history: HistorySegment, lag: float) -> np.ndarray:
    n = history.steps_per_period
    j = (history.size - 1) - lag / history.dt
    if abs(j - round(j)) < 1e-9:
        j = int(round(j))
        if j - n < 0:
            raise HistoryUnderrun("window reaches beyond the history")
        return history.phi[j - n : j + 1][::-1].copy()
    return np.array([history.lookup(lag + m * history.dt) for m in range(n + 1)])


def ptdf_update(history: HistorySegment, config: ControlConfig, t: float, method: str = "auto") -> float:
    """Reference trace ``phi_ref(t)`` of the projected delay block.

    ``method="scalar"`` uses the plain period average (order 0 only);
    ``"projected"`` goes through the Fourier feedback kernel.
    """
    T = history.period
    if history.span < 2 * T * (1 - 1e-12):
        raise HistoryUnderrun("history must cover two periods")
    lag = history.t_end - (t - T)
    phi_T = history.lookup(lag, "phi")
    if method == "auto":
        method = "scalar" if config.projection_order == 0 else "projected"
    window = _window(history, lag)
    w = spectral.trapezoid_weights(history.steps_per_period)
    if method == "scalar":
        if config.projection_order != 0:
            raise ValueError("scalar path only exists for projection order 0")
        proj = float(np.dot(w, window))
    else:
        kern = spectral.feedback_kernel(config.projection_order, history.steps_per_period)
        proj = float(np.dot(w, kern * window))
    fresh = phi_T - proj
    R = config.relaxation
    if R == 1.0:
        return fresh
    return (1.0 - R) * history.lookup(lag, "ref") + R * fresh


def _ptdf_rate(history: HistorySegment, config: ControlConfig, t: float) -> float:
    T = history.period
    lag = history.t_end - (t - T)
    n = history.steps_per_period
    N = config.projection_order
    dphi_T = history.lookup(lag, "dphi")
    diff = history.lookup(lag, "phi") - history.lookup(lag + T, "phi")
    g = 0.0
    if N > 0:
        window = _window(history, lag)
        dk = spectral.feedback_kernel_derivative(N, n, T)
        g = float(np.dot(spectral.trapezoid_weights(n), dk * window))
    fresh = dphi_T - (((2 * N + 1) * diff) / T + g)
    R = config.relaxation
    if R == 1.0:
        return fresh
    return (1.0 - R) * history.lookup(lag, "dref") + R * fresh


def control_input(history: HistorySegment, config: ControlConfig, t: float) -> tuple[float, float]:
    """PD input ``u`` and its analytic rate at time ``t`` (at most the last sample time)."""
    T = history.period
    lag0 = history.t_end - t
    coeffs = config.coeffs(T)
    u = history.lookup(lag0, "phi") - ptdf_update(history, config, t) - spectral.reconstruct(coeffs, t)
    u_dot = (
        history.lookup(lag0, "dphi")
        - _ptdf_rate(history, config, t)
        - spectral.reconstruct_derivative(coeffs, t)
    )
    return float(u), float(u_dot)


# --------------------------------------------------------------------------
# compiled integration


@dataclass
class _Tables:
    n: int
    dt: float
    model: np.ndarray
    ctrl: np.ndarray
    order: int
    kern: np.ndarray
    dkern: np.ndarray
    wts: np.ndarray
    t_half: np.ndarray
    sin_half: np.ndarray
    r_half: np.ndarray
    dr_half: np.ndarray


def _tables(params: PendulumParams, p: float, config: ControlConfig | None, settings: SimSettings) -> _Tables:
    n = settings.steps_per_period
    T = params.period
    dt = T / n
    t_half = np.arange(2 * n) * (0.5 * dt)
    sin_half = np.sin(params.omega * t_half)
    model = np.array([params.m, params.l, params.b, params.g, params.omega, p], dtype=float)
    if config is None:
        ctrl = np.array([0.0, DERIV_RATIO, 1.0])
        order = 0
        r_half = np.zeros(2 * n)
        dr_half = np.zeros(2 * n)
    else:
        ctrl = np.array([config.gain, config.deriv_ratio, config.relaxation], dtype=float)
        order = config.projection_order
        coeffs = config.coeffs(T)
        if order == 0:
            r_half = np.full(2 * n, spectral.reconstruct(coeffs, 0.0))
            dr_half = np.zeros(2 * n)
        else:
            r_half = np.asarray(spectral.reconstruct(coeffs, t_half))
            dr_half = np.asarray(spectral.reconstruct_derivative(coeffs, t_half))
    return _Tables(
        n=n, dt=dt, model=model, ctrl=ctrl, order=order,
        kern=spectral.feedback_kernel(order, n),
        dkern=spectral.feedback_kernel_derivative(order, n, T),
        wts=spectral.trapezoid_weights(n),
        t_half=t_half, sin_half=sin_half, r_half=r_half, dr_half=dr_half,
    )


def _alloc(size: int) -> dict:
    return {c: np.zeros(size) for c in _CHANNELS}


def _fill_window_terms(buf, tab: _Tables, lo: int, hi: int) -> None:
    T = tab.n * tab.dt
    for j in range(max(lo, tab.n), hi + 1):
        K.window_terms(buf["phi"], buf["F"], buf["dF"], buf["Gc"], j, tab.n, T, tab.order,
                       tab.kern, tab.dkern, tab.wts)


@dataclass
class Trajectory:
    t: np.ndarray
    phi: np.ndarray
    phi_dot: np.ndarray
    phi_ref: np.ndarray
    u: np.ndarray
    torque: np.ndarray
    history: HistorySegment
    status: str = "ok"

    def to_csv(self, path: Path, header: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "phi", "phi_dot", "phi_ref", "u", "torque"])
            for row in zip(self.t, self.phi, self.phi_dot, self.phi_ref, self.u, self.torque):
                w.writerow([repr(float(v)) for v in row])


def warmup_history(phi0: float, params: PendulumParams, p: float, config: ControlConfig | None = None,
                   settings: SimSettings = SimSettings(), phi_dot0: float = 0.0,
                   blowup: float = 1e3) -> HistorySegment:
    """Uncontrolled run over ``2T`` from ``(phi0, phi_dot0)`` at time 0."""
    tab = _tables(params, p, config, settings)
    n = tab.n
    buf = _alloc(2 * n + 1)
    buf["phi"][0] = phi0
    buf["dphi"][0] = phi_dot0
    status, last = K.plant_advance(buf["phi"], buf["dphi"], buf["acc"], 0, 2 * n, n, 0, tab.model,
                                   tab.t_half, tab.sin_half, blowup)
    if status != K.OK:
        raise LossOfControl("warm-up run blew up")
    _fill_window_terms(buf, tab, n, 2 * n)
    return HistorySegment(tab.dt, n, 0, order=tab.order, **buf)


def history_from_orbit(orbit: PeriodicOrbit, config: ControlConfig | None = None,
                       settings: SimSettings = SimSettings()) -> HistorySegment:
    """History over ``[0, 2T]`` sampled exactly from a periodic orbit (reference trace zero)."""
    n = settings.steps_per_period
    T = orbit.params.period
    dt = T / n
    times = np.arange(2 * n + 1) * dt
    vals = orbit.evaluate(times)
    order = 0 if config is None else config.projection_order
    buf = _alloc(2 * n + 1)
    buf["phi"][:] = vals[..., 0]
    buf["dphi"][:] = vals[..., 1]
    tab = _tables(orbit.params, orbit.p, config, settings)
    buf["acc"][:] = phi_accel(buf["phi"], buf["dphi"], times, orbit.params, orbit.p)
    _fill_window_terms(buf, tab, n, 2 * n)
    return HistorySegment(dt, n, 0, order=order, **buf)


def _buffer_from_history(history: HistorySegment, extra: int) -> dict:
    size = history.size + extra
    buf = _alloc(size)
    for c in _CHANNELS:
        buf[c][: history.size] = getattr(history, c)
    return buf


def integrate_plant(history: HistorySegment, params: PendulumParams, p: float, nsteps: int,
                    settings: SimSettings = SimSettings(), blowup: float = 1e3) -> Trajectory:
    """Open-loop continuation of ``history`` (the comparison path for zero gain)."""
    tab = _tables(params, p, None, settings)
    buf = _buffer_from_history(history, nsteps)
    i0 = history.size - 1
    status, last = K.plant_advance(buf["phi"], buf["dphi"], buf["acc"], i0, nsteps, tab.n,
                                   history.start % tab.n, tab.model, tab.t_half, tab.sin_half, blowup)
    return _trajectory(buf, history, tab, i0, last, "ok" if status == K.OK else "blowup")


def integrate_controlled(history: HistorySegment, params: PendulumParams, p: float, config: ControlConfig,
                         nsteps: int, settings: SimSettings = SimSettings(), blowup: float = 1e3) -> Trajectory:
    """Fixed-step closed-loop integration continuing ``history`` by ``nsteps`` steps."""
    if history.steps_per_period != settings.steps_per_period:
        raise ValueError("history sampled with a different step")
    if history.size < 2 * history.steps_per_period + 1:
        raise HistoryUnderrun("history must cover two periods")
    tab = _tables(params, p, config, settings)
    buf = _buffer_from_history(history, nsteps)
    i0 = history.size - 1
    if history.order != tab.order:
        _fill_window_terms(buf, tab, 0, i0)
    status, last = _run_controlled(buf, tab, i0, nsteps, history.start, blowup)
    return _trajectory(buf, history, tab, i0, last, "ok" if status == K.OK else "blowup")


def _run_controlled(buf, tab: _Tables, i0: int, nsteps: int, start: int, blowup: float):
    return K.controlled_advance(
        buf["phi"], buf["dphi"], buf["acc"], buf["ref"], buf["dref"], buf["F"], buf["dF"], buf["Gc"],
        buf["u"], buf["torque"], i0, nsteps, tab.n, start % tab.n, tab.model, tab.ctrl, tab.order,
        tab.kern, tab.dkern, tab.wts, tab.t_half, tab.sin_half, tab.r_half, tab.dr_half, blowup,
    )


def _trajectory(buf, history, tab, i0, last, status) -> Trajectory:
    sl = slice(i0, last + 1)
    t = (history.start + np.arange(i0, last + 1)) * tab.dt
    full = HistorySegment(tab.dt, tab.n, history.start, order=tab.order, **{c: buf[c][: last + 1] for c in _CHANNELS})
    keep = min(full.size, 2 * tab.n + 1)
    return Trajectory(t, buf["phi"][sl].copy(), buf["dphi"][sl].copy(), buf["ref"][sl].copy(),
                      buf["u"][sl].copy(), buf["torque"][sl].copy(), full.tail(keep), status)


# --------------------------------------------------------------------------
# asymptotic average map


@dataclass
class M1Result:
    value: float
    converged: bool
    periods_used: int
    residual_u_sup: float
    final_orbit: PeriodicOrbit | None
    history: HistorySegment | None = None
    status: str = "ok"  # ok | not-settled | blowup | stopped | escaped
    averages: list = field(default_factory=list)
    coefficients: np.ndarray | None = None

    @property
    def lost(self) -> bool:
        return self.status in ("blowup", "stopped", "escaped")


def evaluate_m1(p: float, config: ControlConfig, params: PendulumParams,
                policy: TransientPolicy = TransientPolicy(), settings: SimSettings = SimSettings(),
                warm: HistorySegment | None = None) -> M1Result:
    """Run the controlled experiment at ``(p, reference)`` until the period average settles.

    Without ``warm`` the loop starts from an uncontrolled ``2T`` run from
    ``(phi0, 0)``; with it, the experiment keeps running from that history.
    """
    T = params.period
    n = settings.steps_per_period
    tab = _tables(params, p, config, settings)
    if warm is None:
        warm = warmup_history(config.phi0(T), params, p, config, settings, blowup=policy.blowup)
    hist = warm.tail(2 * n + 1)
    buf = _buffer_from_history(hist, n)
    if hist.order != tab.order:
        _fill_window_terms(buf, tab, 0, 2 * n)
    start = hist.start
    i0 = 2 * n
    w = tab.wts
    averages = []
    streak = 0
    status = "not-settled"
    u_sup = math.inf
    periods = 0
    for periods in range(1, policy.max_periods + 1):
        if periods > 1:
            for c in _CHANNELS:
                arr = buf[c]
                arr[: 2 * n + 1] = arr[n : 3 * n + 1]
            start += n
        code, last = _run_controlled(buf, tab, i0, n, start, policy.blowup)
        if code != K.OK:
            status = "blowup"
            break
        seg = buf["phi"][i0 : i0 + n + 1]
        a = float(np.dot(w, seg))
        mean_rate = (seg[-1] - seg[0]) / T + params.omega
        u_sup = float(np.max(np.abs(buf["u"][i0 : i0 + n + 1])))
        if averages and abs(a - averages[-1]) < policy.eps:
            streak += 1
        else:
            streak = 0
        averages.append(a)
        if mean_rate < 0.5 * params.omega:
            status = "stopped"
            break
        if u_sup > policy.u_escape:
            status = "escaped"
            break
        if streak >= policy.consecutive:
            status = "ok"
            break
    new_hist = HistorySegment(tab.dt, n, start + n, order=tab.order,
                              **{c: buf[c][n : 3 * n + 1].copy() for c in _CHANNELS})
    orbit = None
    coeffs = None
    if status in ("ok", "not-settled"):
        seg_phi = buf["phi"][i0 : i0 + n + 1].copy()
        seg_dphi = buf["dphi"][i0 : i0 + n + 1].copy()
        orbit = PeriodicOrbit(
            params=params, p=p, t=(start + i0 + np.arange(n + 1)) * tab.dt,
            samples=np.column_stack([seg_phi, seg_dphi]),
            avg_phase=averages[-1], monodromy=np.full((2, 2), np.nan), multipliers=np.array([]),
        )
        if config.projection_order > 0:
            coeffs = spectral.project(seg_phi, config.projection_order, T).coeffs
    value = averages[-1] if averages else math.nan
    return M1Result(
        value=value,
        converged=status == "ok",
        periods_used=periods,
        residual_u_sup=u_sup,
        final_orbit=orbit,
        history=new_hist,
        status=status,
        averages=averages,
        coefficients=coeffs,
    )
