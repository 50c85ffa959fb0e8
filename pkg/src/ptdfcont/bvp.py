"""Shooting oracle for periodic rotations of the uncontrolled pendulum.

Orbits are found as zeros of the one-period boundary mismatch of the
rotating-frame equation.  The branch of rotations is traced with a
pseudo-arclength condition posed on whole trajectories, which keeps the
problem regular at the saddle-node where the rotations disappear.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .model import PendulumParams


class OracleError(RuntimeError):
    pass


class NoConvergence(OracleError):
    pass


class SingularJacobian(OracleError):
    pass


class BlowUp(OracleError):
    pass


class NoFold(OracleError):
    pass


@dataclass(frozen=True)
class OracleSettings:
    rtol: float = 1e-11
    atol: float = 1e-12
    nodes: int = 128
    tol: float = 1e-10
    max_iter: int = 25
    blowup: float = 1e3


@dataclass
class PeriodicOrbit:
    """A T-periodic solution of the uncontrolled rotating-frame equation."""

    params: PendulumParams
    p: float
    t: np.ndarray
    samples: np.ndarray  # shape (nodes + 1, 2): phi, phi_dot on [0, T]
    avg_phase: float
    monodromy: np.ndarray
    multipliers: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    settings: OracleSettings = field(default_factory=OracleSettings)

    @property
    def initial(self) -> np.ndarray:
        return self.samples[0].copy()

    @property
    def dominant_multiplier(self) -> complex:
        return self.multipliers[np.argmax(np.abs(self.multipliers))]

    @property
    def stable(self) -> bool:
        return bool(np.all(np.abs(self.multipliers) < 1.0))

    def evaluate(self, times) -> np.ndarray:
        """Re-integrate the orbit and return ``(phi, phi_dot)`` rows at ``times``.

        Times are reduced modulo the period, so the result is exactly T-periodic.
        """
        times = np.asarray(times, dtype=float)
        T = self.params.period
        tau = np.mod(times, T)
        grid, inverse = np.unique(tau.ravel(), return_inverse=True)
        sol = solve_ivp(
            _plant_rhs,
            (0.0, T),
            self.initial,
            method="DOP853",
            t_eval=grid,
            args=(self.params, self.p),
            rtol=self.settings.rtol,
            atol=self.settings.atol,
        )
        return sol.y.T[inverse.ravel()].reshape(times.shape + (2,))

    def save(self, stem: Path, header: list[str] | None = None) -> None:
        """Write ``<stem>.csv`` with ``t,phi,phi_dot`` and a ``<stem>.json`` sidecar."""
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t", "phi", "phi_dot"])
            for t, (phi, dphi) in zip(self.t, self.samples):
                w.writerow([repr(float(t)), repr(float(phi)), repr(float(dphi))])
        side = {
            "p": self.p,
            "avg_phase": self.avg_phase,
            "multipliers": [[float(z.real), float(z.imag)] for z in self.multipliers],
        }
        stem.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")


def _plant_rhs(t, y, params: PendulumParams, p: float):
    w = params.omega
    forcing = params.g + w * w * p * math.sin(w * t)
    acc = -(params.b * (y[1] + w)) / params.inertia - forcing * math.sin(y[0] + w * t) / params.l
    return [y[1], acc]


def _augmented_rhs(t, y, params: PendulumParams, p: float):
    # y = [phi, dphi, q, Y00, Y01, Y10, Y11, z0, z1, qy0, qy1, qp]
    w = params.omega
    phi, dphi = y[0], y[1]
    s_wt = math.sin(w * t)
    arg = phi + w * t
    forcing = params.g + w * w * p * s_wt
    damp = params.b / params.inertia
    acc = -damp * (dphi + w) - forcing * math.sin(arg) / params.l
    a10 = -forcing * math.cos(arg) / params.l
    dp = -w * w * s_wt * math.sin(arg) / params.l
    Y = y[3:7]
    z = y[7:9]
    return [
        dphi,
        acc,
        phi,
        Y[2],
        Y[3],
        a10 * Y[0] - damp * Y[2],
        a10 * Y[1] - damp * Y[3],
        z[1],
        a10 * z[0] - damp * z[1] + dp,
        Y[0],
        Y[1],
        z[0],
    ]


@dataclass
class _Flow:
    t: np.ndarray
    states: np.ndarray  # (nodes+1, 2)
    sens: np.ndarray  # (nodes+1, 2, 3): d(phi, dphi)/d(phi0, dphi0, p)
    q: float  # integral of phi over [0, T]
    q_sens: np.ndarray  # (3,)

    @property
    def end(self):
        return self.states[-1]

    @property
    def monodromy(self):
        return self.sens[-1, :, :2]


def _flow(params: PendulumParams, p: float, init, settings: OracleSettings) -> _Flow:
    T = params.period
    nodes = np.linspace(0.0, T, settings.nodes + 1)
    y0 = np.zeros(12)
    y0[0:2] = init
    y0[3] = y0[6] = 1.0

    def escaped(t, y, *args):
        return settings.blowup - abs(y[1])

    escaped.terminal = True
    sol = solve_ivp(
        _augmented_rhs,
        (0.0, T),
        y0,
        method="DOP853",
        t_eval=nodes,
        args=(params, p),
        rtol=settings.rtol,
        atol=settings.atol,
        events=escaped,
    )
    if sol.status != 0 or sol.y.shape[1] != nodes.size:
        raise BlowUp(f"integration failed at p={p}: {sol.message}")
    Y = sol.y.T
    sens = np.empty((nodes.size, 2, 3))
    sens[:, 0, 0] = Y[:, 3]
    sens[:, 0, 1] = Y[:, 4]
    sens[:, 1, 0] = Y[:, 5]
    sens[:, 1, 1] = Y[:, 6]
    sens[:, 0, 2] = Y[:, 7]
    sens[:, 1, 2] = Y[:, 8]
    return _Flow(nodes, Y[:, :2].copy(), sens, Y[-1, 2], Y[-1, 9:12].copy())


def shoot_residual(init, p: float, params: PendulumParams, settings: OracleSettings = OracleSettings()):
    """Boundary mismatch ``(phi(T) - phi(0), phi_dot(T) - phi_dot(0))``."""
    flow = _flow(params, p, init, settings)
    return flow.end - np.asarray(init, dtype=float)


def _make_orbit(params, p, flow: _Flow, settings, residual=0.0, iterations=0) -> PeriodicOrbit:
    mono = flow.monodromy.copy()
    return PeriodicOrbit(
        params=params,
        p=float(p),
        t=flow.t,
        samples=flow.states,
        avg_phase=float(flow.q / params.period),
        monodromy=mono,
        multipliers=np.linalg.eigvals(mono),
        residual=float(residual),
        iterations=iterations,
        settings=settings,
    )


def solve_orbit(guess, p: float, params: PendulumParams, settings: OracleSettings = OracleSettings()) -> PeriodicOrbit:
    """Newton iteration on the boundary mismatch at fixed amplitude ``p``."""
    x = np.array(guess, dtype=float)
    for it in range(settings.max_iter + 1):
        flow = _flow(params, p, x, settings)
        r = flow.end - x
        rn = float(np.max(np.abs(r)))
        if rn <= settings.tol:
            return _make_orbit(params, p, flow, settings, rn, it)
        if not np.all(np.isfinite(r)) or rn > 10.0:
            break
        J = flow.monodromy - np.eye(2)
        if abs(np.linalg.det(J)) < 1e-13:
            raise SingularJacobian(f"monodromy has a unit multiplier at p={p}")
        x = x - np.linalg.solve(J, r)
    raise NoConvergence(f"no periodic rotation found at p={p} from guess {guess}")


def solve_orbit_at_phase(guess, phase: float, params: PendulumParams,
                         settings: OracleSettings = OracleSettings()) -> PeriodicOrbit:
    """Solve for the rotation whose average phase equals ``phase``; ``p`` is free.

    ``guess`` is ``(phi0, phi_dot0, p)``.  This parametrisation is regular at
    the fold because the phase is monotone along the branch.
    """
    x = np.array(guess, dtype=float)
    T = params.period
    for it in range(settings.max_iter + 1):
        flow = _flow(params, x[2], x[:2], settings)
        r = np.empty(3)
        r[:2] = flow.end - x[:2]
        r[2] = flow.q / T - phase
        rn = float(np.max(np.abs(r)))
        if rn <= settings.tol:
            return _make_orbit(params, x[2], flow, settings, rn, it)
        if not np.all(np.isfinite(r)) or rn > 10.0:
            break
        J = np.zeros((3, 3))
        J[:2, :] = flow.sens[-1]
        J[:2, :2] -= np.eye(2)
        J[2, :] = flow.q_sens / T
        try:
            x = x - np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
    raise NoConvergence(f"no rotation with average phase {phase} from guess {guess}")


def monodromy_ode(orbit: PeriodicOrbit):
    """Monodromy matrix of the variational equation and its eigenvalues."""
    flow = _flow(orbit.params, orbit.p, orbit.initial, orbit.settings)
    mono = flow.monodromy.copy()
    return mono, np.linalg.eigvals(mono)


def settle_rotation(params: PendulumParams, p: float, phi0: float = 0.0, periods: int = 200,
                    settings: OracleSettings = OracleSettings()) -> np.ndarray:
    """Run the uncontrolled pendulum from ``(phi0, 0)`` and return the state after
    an integer number of periods (a guess for :func:`solve_orbit`).

    The phase is wrapped to ``[-pi, pi)``; slips during the transient would
    otherwise leave it many turns away.
    """
    T = params.period
    sol = solve_ivp(_plant_rhs, (0.0, periods * T), [phi0, 0.0], method="DOP853",
                    args=(params, p), rtol=1e-9, atol=1e-10)
    y = sol.y[:, -1].copy()
    y[0] -= 2.0 * math.pi * round(y[0] / (2.0 * math.pi))
    return y


# --------------------------------------------------------------------------
# branch continuation


@dataclass(frozen=True)
class BvpContinuationSettings:
    h: float = 0.05
    h_min: float = 1e-4
    h_max: float = 0.1
    grow: float = 1.3
    max_points: int = 200
    p_max: float = 0.05
    phase_min: float = -math.inf
    phase_max: float = math.inf
    direction: float = -1.0  # sign of the initial p step
    newton_tol: float = 1e-10
    max_iter: int = 12


def _inner(params, tan, dphi_t, dphi_dot_t, dp, nodes: int) -> float:
    # (1/T) * trapezoid integral over uniform nodes on [0, T]
    w = np.full(nodes + 1, 1.0 / nodes)
    w[0] = w[-1] = 0.5 / nodes
    return float(np.dot(w, tan[0] * dphi_t + tan[1] * dphi_dot_t) + tan[2] * dp)


def _fnorm(states_diff, dp, nodes) -> float:
    w = np.full(nodes + 1, 1.0 / nodes)
    w[0] = w[-1] = 0.5 / nodes
    return math.sqrt(float(np.dot(w, states_diff[:, 0] ** 2 + states_diff[:, 1] ** 2)) + dp * dp)


def _initial_tangent(orbit: PeriodicOrbit, direction: float):
    """Null vector of the boundary-condition Jacobian, as a function-space tangent."""
    flow = _flow(orbit.params, orbit.p, orbit.initial, orbit.settings)
    A = flow.sens[-1].copy()
    A[:, :2] -= np.eye(2)
    _, _, vt = np.linalg.svd(A)
    v = vt[-1]
    if v[2] * direction < 0:
        v = -v
    fun = flow.sens @ v  # (nodes+1, 2)
    nrm = _fnorm(fun, v[2], orbit.settings.nodes)
    return v / nrm, fun / nrm


def continue_branch_bvp(start: PeriodicOrbit, settings: BvpContinuationSettings = BvpContinuationSettings()):
    """Pseudo-arclength continuation of the rotation family.

    Unknowns are ``(phi(0), phi_dot(0), p)``; the conditions are the two
    boundary mismatches and the trajectory-wide arclength condition.
    Returns the list of converged :class:`PeriodicOrbit`.
    """
    params = start.params
    osets = start.settings
    n = osets.nodes
    T = params.period
    branch = [start]
    v, fun_tan = _initial_tangent(start, settings.direction)
    h = settings.h
    successes = 0
    while len(branch) < settings.max_points:
        old = branch[-1]
        u_old = np.array([*old.initial, old.p])
        try:
            orbit = _bvp_correct(params, osets, old, u_old + h * v, v, fun_tan, h, settings)
        except OracleError:
            orbit = None
        if orbit is None:
            h *= 0.5
            successes = 0
            if h < settings.h_min:
                break
            continue
        diff = orbit.samples - old.samples
        dp = orbit.p - old.p
        nrm = _fnorm(diff, dp, n)
        u_new = np.array([*orbit.initial, orbit.p])
        v_new = (u_new - u_old) / nrm
        fun_new = diff / nrm
        tan_dot = _inner(params, (fun_tan[:, 0], fun_tan[:, 1], v[2]), fun_new[:, 0], fun_new[:, 1], v_new[2], n)
        if tan_dot <= 0:
            h *= 0.5
            successes = 0
            if h < settings.h_min:
                break
            continue
        branch.append(orbit)
        v, fun_tan = v_new, fun_new
        successes += 1
        if successes >= 2:
            h = min(h * settings.grow, settings.h_max)
            successes = 0
        if not (0.0 <= orbit.p <= settings.p_max):
            break
        if not (settings.phase_min <= orbit.avg_phase <= settings.phase_max):
            break
    return branch


def _bvp_correct(params, osets, old: PeriodicOrbit, u, v, fun_tan, h, settings):
    n = osets.nodes
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    u = u.copy()
    for it in range(settings.max_iter + 1):
        flow = _flow(params, u[2], u[:2], osets)
        diff = flow.states - old.samples
        r = np.empty(3)
        r[:2] = flow.end - u[:2]
        r[2] = float(np.dot(w, fun_tan[:, 0] * diff[:, 0] + fun_tan[:, 1] * diff[:, 1])) + v[2] * (u[2] - old.p) - h
        if np.max(np.abs(r)) <= settings.newton_tol:
            return _make_orbit(params, u[2], flow, osets, float(np.max(np.abs(r[:2]))), it)
        J = np.zeros((3, 3))
        J[:2] = flow.sens[-1]
        J[:2, :2] -= np.eye(2)
        J[2] = w @ (fun_tan[:, 0:1] * flow.sens[:, 0, :] + fun_tan[:, 1:2] * flow.sens[:, 1, :])
        J[2, 2] += v[2]
        u = u - np.linalg.solve(J, r)
    raise NoConvergence("arclength corrector did not converge")


def locate_fold(branch: list[PeriodicOrbit]):
    """Refine the minimum amplitude along a branch.

    A quadratic in arclength through the three points around the smallest
    ``p`` gives the first estimate; it is then polished by minimising ``p``
    over the average phase, which parametrises the branch regularly.
    Returns ``(p0, orbit_at_fold)``.
    """
    ps = np.array([o.p for o in branch])
    i = int(np.argmin(ps))
    if i == 0 or i == len(branch) - 1:
        raise NoFold("amplitude minimum is at the end of the branch")
    trio = branch[i - 1 : i + 2]
    n = trio[0].settings.nodes
    s = [0.0]
    for a, b in zip(trio[:-1], trio[1:]):
        s.append(s[-1] + _fnorm(b.samples - a.samples, b.p - a.p, n))
    s = np.array(s)
    c = np.polyfit(s, ps[i - 1 : i + 2], 2)
    if c[0] <= 0:
        raise NoFold("amplitude has no interior minimum")
    s_star = float(np.clip(-c[1] / (2 * c[0]), s[0], s[-1]))
    phases = np.array([o.avg_phase for o in trio])
    inits = np.array([[*o.initial, o.p] for o in trio])
    lagr = _lagrange_weights(s, s_star)
    phase_star = float(lagr @ phases)
    params = trio[0].params

    def guess_at(phase):
        wts = _lagrange_weights(phases, phase)
        return wts @ inits

    def p_of_phase(phase):
        return solve_orbit_at_phase(guess_at(phase), phase, params, trio[0].settings).p

    lo, hi = sorted((phases[0], phases[-1]))
    res = minimize_scalar(p_of_phase, bracket=None, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-9})
    phase_fold = float(res.x) if res.success else phase_star
    orbit = solve_orbit_at_phase(guess_at(phase_fold), phase_fold, params, trio[0].settings)
    return orbit.p, orbit


def _lagrange_weights(x, x0):
    x = np.asarray(x, dtype=float)
    w = np.ones(len(x))
    for j in range(len(x)):
        for k in range(len(x)):
            if k != j:
                w[j] *= (x0 - x[k]) / (x[j] - x[k])
    return w


class BranchInterpolator:
    """Phase-parametrised access to an oracle branch.

    ``orbit_at(phase)`` re-solves the orbit with the given average phase,
    seeded by local interpolation of neighbouring branch points.
    """

    def __init__(self, branch: list[PeriodicOrbit]):
        self.branch = sorted(branch, key=lambda o: o.avg_phase)
        self.phases = np.array([o.avg_phase for o in self.branch])
        self.unknowns = np.array([[*o.initial, o.p] for o in self.branch])
        self.params = branch[0].params
        self.settings = branch[0].settings

    def guess(self, phase: float) -> np.ndarray:
        j = int(np.clip(np.searchsorted(self.phases, phase), 1, len(self.phases) - 2))
        idx = [j - 1, j, j + 1]
        return _lagrange_weights(self.phases[idx], phase) @ self.unknowns[idx]

    def orbit_at(self, phase: float) -> PeriodicOrbit:
        return solve_orbit_at_phase(self.guess(phase), phase, self.params, self.settings)

    @property
    def phase_range(self):
        return float(self.phases[0]), float(self.phases[-1])


def save_branch(branch: list[PeriodicOrbit], path: Path, header: list[str] | None = None) -> None:
    """Oracle branch CSV: one row per orbit."""
    with open(path, "w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["index", "p", "avg_phase", "phi0", "phi_dot0", "mu1_re", "mu1_im", "mu2_re", "mu2_im"])
        for k, o in enumerate(branch):
            mu = sorted(o.multipliers, key=lambda z: -abs(z))
            w.writerow([k, repr(o.p), repr(o.avg_phase), repr(float(o.initial[0])), repr(float(o.initial[1])),
                        repr(float(mu[0].real)), repr(float(mu[0].imag)),
                        repr(float(mu[1].real)), repr(float(mu[1].imag))])


def load_branch(path: Path, params: PendulumParams, settings: OracleSettings = OracleSettings()):
    """Rebuild a branch from its CSV by re-solving each orbit from the stored initial data."""
    rows = [r for r in csv.DictReader(line for line in open(path) if not line.startswith("#"))]
    out = []
    for r in rows:
        guess = (float(r["phi0"]), float(r["phi_dot0"]), float(r["p"]))
        out.append(solve_orbit_at_phase(guess, float(r["avg_phase"]), params, settings))
    return out
