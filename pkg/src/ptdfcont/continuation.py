"""Pseudo-arclength continuation driven by the controlled experiment.

Unknowns are the excitation amplitude ``p`` and the reference phase
``phi0``.  Both are measured in scaled units (``p / sigma_p`` and
``phi0 / sigma_phi``), so tangents, steps and residual norms are
dimensionless.  The residual pair is

    r1 = tangent . (x - x_old) - h
    r2 = (M1(p, phi0) - phi0) / sigma_phi

and every evaluation of ``M1`` is a run of the closed loop until the period
average settles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .delay_sim import (
    ControlConfig,
    HistorySegment,
    LossOfControl,
    M1Result,
    SimSettings,
    TransientPolicy,
    evaluate_m1,
    integrate_plant,
    warmup_history,
)
from .model import PendulumParams


class ContinuationError(RuntimeError):
    pass


class StartNotConverged(ContinuationError):
    pass


class NewtonFailure(ContinuationError):
    pass


class CoincidentPoints(ValueError):
    pass


@dataclass(frozen=True)
class ContinuationSettings:
    gain: float = 4.0
    sigma_p: float = 2e-4
    sigma_phi: float = 1e-4
    fd_dp: float = 1.0  # in units of sigma_p
    fd_dphi: float = 10.0  # in units of sigma_phi
    newton_tol: float = 5e-3
    max_iter: int = 8
    max_halvings: int = 4
    h: float = 5.0
    h_min: float = 0.05
    h_max: float = 200.0
    grow: float = 1.3
    max_points: int = 400
    points_after_fold: int = 15
    p_max: float = 0.05
    max_losses: int = 3
    transient_ratio: float = 0.2  # eps_trans = ratio * newton_tol * sigma_phi
    consecutive: int = 3
    max_periods: int = 500

    def policy(self) -> TransientPolicy:
        return TransientPolicy(eps=self.transient_eps, consecutive=self.consecutive, max_periods=self.max_periods)

    @property
    def transient_eps(self) -> float:
        return self.transient_ratio * self.newton_tol * self.sigma_phi

    def scale(self, p: float, phi0: float) -> np.ndarray:
        return np.array([p / self.sigma_p, phi0 / self.sigma_phi])

    def unscale(self, x) -> tuple[float, float]:
        return float(x[0] * self.sigma_p), float(x[1] * self.sigma_phi)


@dataclass
class M1Summary:
    value: float
    periods_used: int
    u_sup: float
    status: str

    @classmethod
    def of(cls, res: M1Result) -> "M1Summary":
        return cls(res.value, res.periods_used, res.residual_u_sup, res.status)


@dataclass
class BranchPoint:
    p: float
    phi0: float
    tangent: np.ndarray
    residual_norm: float
    m1_diag: M1Summary
    step_h: float
    iterations: int = 0
    flag: str = "stable-guess"

    def __post_init__(self):
        self.tangent = np.asarray(self.tangent, dtype=float)


@dataclass
class Branch:
    points: list = field(default_factory=list)
    fold_index: int | None = None
    termination: str = ""
    calls: int = 0  # M1 evaluations
    periods: int = 0  # simulated periods

    def __len__(self) -> int:
        return len(self.points)

    @property
    def accepted(self) -> list:
        return [pt for pt in self.points if pt.flag != "lost"]

    def p_values(self) -> np.ndarray:
        return np.array([pt.p for pt in self.accepted])

    def phases(self) -> np.ndarray:
        return np.array([pt.phi0 for pt in self.accepted])

    def to_csv(self, path: Path, header: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["index", "p", "phi0", "p_tan", "phi0_tan", "residual", "periods_used", "u_sup", "flag"])
            for i, pt in enumerate(self.points):
                w.writerow([i, repr(pt.p), repr(pt.phi0), repr(float(pt.tangent[0])), repr(float(pt.tangent[1])),
                            repr(pt.residual_norm), pt.m1_diag.periods_used, repr(pt.m1_diag.u_sup), pt.flag])


def load_branch_csv(path: Path) -> Branch:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows)
    branch = Branch()
    for r in reader:
        diag = M1Summary(math.nan, int(r["periods_used"]), float(r["u_sup"]), "")
        pt = BranchPoint(float(r["p"]), float(r["phi0"]), [float(r["p_tan"]), float(r["phi0_tan"])],
                         float(r["residual"]), diag, math.nan, flag=r["flag"])
        branch.points.append(pt)
        if pt.flag == "fold":
            branch.fold_index = len(branch.points) - 1
    return branch


class M1Oracle:
    """Stateful wrapper around :func:`evaluate_m1` that keeps the experiment running.

    Each call warm-starts from the history left by the previous accepted call,
    as a physical experiment would.  Finite-difference probes branch off the
    base history without replacing it.
    """

    def __init__(self, params: PendulumParams, settings: ContinuationSettings,
                 sim: SimSettings = SimSettings(), history: HistorySegment | None = None):
        self.params = params
        self.settings = settings
        self.sim = sim
        self.history = history
        self.calls = 0
        self.periods = 0

    def config(self, phi0: float) -> ControlConfig:
        return ControlConfig.scalar(phi0, self.params.period, self.settings.gain)

    def __call__(self, p: float, phi0: float, keep: bool = True) -> M1Result:
        res = evaluate_m1(p, self.config(phi0), self.params, self.settings.policy(), self.sim, warm=self.history)
        self.calls += 1
        self.periods += res.periods_used
        if keep and not res.lost:
            self.history = res.history
        return res


def _ok(res: M1Result) -> bool:
    return res.converged and math.isfinite(res.value)


def residual(p: float, phi0: float, prev: BranchPoint, h: float, oracle: M1Oracle, keep: bool = True):
    """``(r1, r2)`` in scaled units and the raw :class:`M1Result`.

    Raises :class:`LossOfControl` when the experiment does not settle.
    """
    s = oracle.settings
    x = s.scale(p, phi0)
    x_old = s.scale(prev.p, prev.phi0)
    r1 = float(np.dot(prev.tangent, x - x_old) - h)
    res = oracle(p, phi0, keep=keep)
    if not _ok(res):
        raise LossOfControl(f"M1 evaluation {res.status} at p={p!r}, phi0={phi0!r}")
    r2 = (res.value - phi0) / s.sigma_phi
    return np.array([r1, r2]), res


def fd_jacobian(p: float, phi0: float, prev: BranchPoint, h: float, oracle: M1Oracle, base=None) -> np.ndarray:
    """Forward-difference Jacobian of the scaled residual.

    The first row is the tangent itself (``r1`` is affine); only the second
    row is sampled.  ``base`` is the residual at ``(p, phi0)`` if known.
    """
    s = oracle.settings
    if base is None:
        base, _ = residual(p, phi0, prev, h, oracle)
    dp = s.fd_dp * s.sigma_p
    dphi = s.fd_dphi * s.sigma_phi
    rp, _ = residual(p + dp, phi0, prev, h, oracle, keep=False)
    rf, _ = residual(p, phi0 + dphi, prev, h, oracle, keep=False)
    J = np.empty((2, 2))
    J[0] = prev.tangent
    J[1, 0] = (rp[1] - base[1]) / s.fd_dp
    J[1, 1] = (rf[1] - base[1]) / s.fd_dphi
    return J


def newton_correct(predictor, prev: BranchPoint, h: float, oracle: M1Oracle,
                   tol: float | None = None, max_iter: int | None = None) -> BranchPoint:
    """Damped Newton on ``(r1, r2)`` from ``predictor = (p, phi0)``.

    Full steps, halved up to ``max_halvings`` times while the residual norm
    does not decrease.  Raises :class:`NewtonFailure` or
    :class:`LossOfControl`; the caller then shortens the step.
    """
    s = oracle.settings
    tol = s.newton_tol if tol is None else tol
    max_iter = s.max_iter if max_iter is None else max_iter
    p, phi0 = predictor
    r, res = residual(p, phi0, prev, h, oracle)
    nrm = float(np.linalg.norm(r))
    it = 0
    while nrm > tol:
        if it >= max_iter:
            raise NewtonFailure(f"no convergence after {max_iter} iterations (|r| = {nrm:.3g})")
        J = fd_jacobian(p, phi0, prev, h, oracle, base=r)
        try:
            dx = -np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise NewtonFailure("singular Jacobian") from exc
        x = s.scale(p, phi0)
        lam = 1.0
        for _ in range(s.max_halvings + 1):
            p_try, phi_try = s.unscale(x + lam * dx)
            r_try, res_try = residual(p_try, phi_try, prev, h, oracle)
            n_try = float(np.linalg.norm(r_try))
            if n_try < nrm:
                break
            lam *= 0.5
        else:
            raise NewtonFailure("damped step did not reduce the residual")
        p, phi0, r, res, nrm = p_try, phi_try, r_try, res_try, n_try
        it += 1
    return BranchPoint(p, phi0, prev.tangent.copy(), nrm, M1Summary.of(res), h, it)


def update_tangent(prev_tangent, new_point: BranchPoint, prev_point: BranchPoint,
                   settings: ContinuationSettings) -> np.ndarray:
    """Secant through the last two points in scaled units, oriented like ``prev_tangent``."""
    d = settings.scale(new_point.p, new_point.phi0) - settings.scale(prev_point.p, prev_point.phi0)
    nrm = float(np.linalg.norm(d))
    if nrm == 0.0:
        raise CoincidentPoints("tangent needs two distinct points")
    t = d / nrm
    if np.dot(t, prev_tangent) < 0:
        t = -t
    return t


def measure_start_phase(params: PendulumParams, p: float, periods: int = 200, sim: SimSettings = SimSettings()):
    """Average phase of the uncontrolled rotation reached from rest in the rotating frame."""
    hist = warmup_history(0.0, params, p, None, sim)
    n = sim.steps_per_period
    traj = integrate_plant(hist, params, p, periods * n, sim)
    if traj.status != "ok":
        raise StartNotConverged("uncontrolled run from rest blew up")
    seg = traj.phi[-(n + 1) :]
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    avg = float(np.dot(w, seg))
    return avg - 2.0 * math.pi * round(avg / (2.0 * math.pi))


def start_point(p: float, phi0_guess: float, oracle: M1Oracle) -> BranchPoint:
    """Fixed point of ``M1`` at fixed ``p``: a few substitutions ``phi0 := M1`` and a Newton polish."""
    s = oracle.settings
    phi0 = phi0_guess
    res = None
    for _ in range(20):
        res = oracle(p, phi0)
        if not _ok(res):
            raise StartNotConverged(f"start experiment {res.status}")
        if abs(res.value - phi0) / s.sigma_phi <= s.newton_tol:
            break
        phi0 = res.value
    anchor = BranchPoint(p, phi0, np.array([1.0, 0.0]), math.inf, M1Summary.of(res), 0.0)
    try:
        pt = newton_correct((p, phi0), anchor, 0.0, oracle)
    except (NewtonFailure, LossOfControl) as exc:
        raise StartNotConverged(str(exc)) from exc
    pt.tangent = np.array([-1.0, 0.0])
    pt.step_h = 0.0
    return pt


def continue_branch(start, params: PendulumParams, settings: ContinuationSettings = ContinuationSettings(),
                    sim: SimSettings = SimSettings(), log=None) -> Branch:
    """Trace the rotation branch from ``start = (p, phi0_guess)`` with the controlled experiment.

    ``phi0_guess`` may be ``None``, in which case it is measured from an
    uncontrolled run.  Stops after ``max_points`` points, when ``p`` leaves
    ``[0, p_max]``, ``points_after_fold`` points past the fold, or after
    ``max_losses`` losses of control in a row at the minimum step.
    """
    p_start, phi_guess = start
    if phi_guess is None:
        phi_guess = measure_start_phase(params, p_start, sim=sim)
    oracle = M1Oracle(params, settings, sim)
    first = start_point(p_start, phi_guess, oracle)
    branch = Branch([first])
    h = settings.h
    successes = 0
    losses = 0
    past_fold = 0
    while len(branch.points) < settings.max_points:
        prev = branch.points[-1]
        x_pred = settings.scale(prev.p, prev.phi0) + h * prev.tangent
        saved = oracle.history
        try:
            pt = newton_correct(settings.unscale(x_pred), prev, h, oracle)
        except (NewtonFailure, LossOfControl) as exc:
            oracle.history = saved
            lost = isinstance(exc, LossOfControl)
            if log:
                log(f"step h={h:.4g} rejected: {exc}")
            h *= 0.5
            successes = 0
            if h < settings.h_min:
                losses += 1
                if losses >= settings.max_losses or not lost:
                    p_l, phi_l = settings.unscale(x_pred)
                    branch.points.append(BranchPoint(p_l, phi_l, prev.tangent.copy(), math.inf,
                                                     M1Summary(math.nan, 0, math.inf, "lost"), h, flag="lost"))
                    branch.termination = "loss-of-control" if lost else "step-too-small"
                    break
                h = settings.h_min
            continue
        losses = 0
        try:
            pt.tangent = update_tangent(prev.tangent, pt, prev, settings)
        except CoincidentPoints:
            h *= 0.5
            continue
        if branch.fold_index is None and prev.tangent[0] < 0 <= pt.tangent[0]:
            # amplitude stops decreasing: the fold lies between prev and pt
            idx = len(branch.points) - 1 if prev.p <= pt.p else len(branch.points)
            branch.points.append(pt)
            branch.fold_index = idx
            branch.points[idx].flag = "fold"
            for q in branch.points[idx + 1 :]:
                q.flag = "unstable-guess"
        else:
            pt.flag = "unstable-guess" if branch.fold_index is not None else "stable-guess"
            branch.points.append(pt)
        if log:
            log(f"point {len(branch.points) - 1}: p={pt.p:.6e} phi0={pt.phi0:.6f} |r|={pt.residual_norm:.2e} "
                f"it={pt.iterations} h={h:.3g} {pt.flag}")
        if branch.fold_index is not None:
            past_fold = len(branch.points) - 1 - branch.fold_index
            if past_fold >= settings.points_after_fold:
                branch.termination = "points-after-fold"
                break
        if not (0.0 <= pt.p <= settings.p_max):
            branch.termination = "p-range"
            break
        successes += 1
        if successes >= 2:
            h = min(h * settings.grow, settings.h_max)
            successes = 0
    else:
        branch.termination = "max-points"
    branch.calls = oracle.calls
    branch.periods = oracle.periods
    return branch
