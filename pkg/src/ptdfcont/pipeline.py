"""End-to-end runs built from a :class:`RunConfig`; the CLI subcommands call these."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bvp, continuation, delay_sim, floquet
from .config import RunConfig

BVP_BRANCH = "bvp_branch.csv"
BVP_FOLD = "bvp_fold.json"
EXP_BRANCH = "experiment_branch.csv"
EXP_SUMMARY = "experiment_summary.json"


def oracle_settings(cfg: RunConfig) -> bvp.OracleSettings:
    o = cfg.oracle
    return bvp.OracleSettings(rtol=o.rtol, atol=o.atol, nodes=o.nodes, tol=o.tol)


def sim_settings(cfg: RunConfig) -> delay_sim.SimSettings:
    return delay_sim.SimSettings(steps_per_period=cfg.sim.steps_per_period)


def transient_policy(cfg: RunConfig) -> delay_sim.TransientPolicy:
    t = cfg.transient
    return delay_sim.TransientPolicy(eps=t.eps, consecutive=t.consecutive, max_periods=t.max_periods,
                                     u_escape=t.u_escape)


def continuation_settings(cfg: RunConfig) -> continuation.ContinuationSettings:
    c = cfg.continuation
    t = cfg.transient
    return continuation.ContinuationSettings(
        gain=cfg.control.gain, sigma_p=c.sigma_p, sigma_phi=c.sigma_phi, fd_dp=c.fd_dp, fd_dphi=c.fd_dphi,
        newton_tol=c.newton_tol, max_iter=c.max_iter, h=c.h, h_min=c.h_min, h_max=c.h_max, grow=c.grow,
        max_points=c.max_points, points_after_fold=c.points_after_fold, p_max=c.p_max,
        transient_ratio=c.transient_ratio, consecutive=t.consecutive, max_periods=t.max_periods,
    )


def chart_settings(cfg: RunConfig) -> floquet.ChartSettings:
    ch = cfg.charts
    return floquet.ChartSettings(
        g_min=ch.g_min, g_max=ch.g_max, g_cells=ch.g_cells, phase_halfwidth=ch.phase_halfwidth,
        phase_cells=ch.phase_cells, mesh=ch.mesh, relaxation=cfg.control.relaxation,
        order=cfg.control.projection_order, deriv_ratio=cfg.control.deriv_ratio,
        sigma_p=cfg.continuation.sigma_p, sigma_phi=cfg.continuation.sigma_phi,
    )


# --------------------------------------------------------------------------
# oracle side


@dataclass
class OracleRun:
    branch: list
    fold_p: float
    fold_orbit: bvp.PeriodicOrbit

    @property
    def fold_phase(self) -> float:
        return self.fold_orbit.avg_phase

    def interpolator(self) -> bvp.BranchInterpolator:
        return bvp.BranchInterpolator(self.branch)


def oracle_branch(cfg: RunConfig) -> OracleRun:
    """Shooting continuation from the stable rotation at ``oracle.p_start`` through the fold."""
    params = cfg.params()
    osets = oracle_settings(cfg)
    p = cfg.oracle.p_start
    start = bvp.solve_orbit(bvp.settle_rotation(params, p, settings=osets), p, params, osets)
    bset = bvp.BvpContinuationSettings(h=cfg.oracle.h, h_max=cfg.oracle.h_max, max_points=cfg.oracle.max_points,
                                       phase_min=start.avg_phase - cfg.oracle.phase_span)
    branch = bvp.continue_branch_bvp(start, bset)
    p0, orbit = bvp.locate_fold(branch)
    return OracleRun(branch, p0, orbit)


def save_oracle(run: OracleRun, cfg: RunConfig, out: Path) -> None:
    out = Path(out)
    bvp.save_branch(run.branch, out / BVP_BRANCH, cfg.header("bvp-branch"))
    mu = run.fold_orbit.dominant_multiplier
    info = {
        "config_sha256": cfg.digest(),
        "p0": run.fold_p,
        "fold_phase": run.fold_phase,
        "dominant_multiplier": [float(mu.real), float(mu.imag)],
        "points": len(run.branch),
        "phi0": float(run.fold_orbit.initial[0]),
        "phi_dot0": float(run.fold_orbit.initial[1]),
    }
    (out / BVP_FOLD).write_text(json.dumps(info, indent=2) + "\n")


def load_oracle(cfg: RunConfig, out: Path) -> OracleRun:
    """Rebuild a cached oracle run (orbits are re-solved from their stored initial data)."""
    out = Path(out)
    params = cfg.params()
    osets = oracle_settings(cfg)
    branch = bvp.load_branch(out / BVP_BRANCH, params, osets)
    info = json.loads((out / BVP_FOLD).read_text())
    orbit = bvp.solve_orbit_at_phase((info["phi0"], info["phi_dot0"], info["p0"]), info["fold_phase"], params, osets)
    return OracleRun(branch, orbit.p, orbit)


def oracle_cached(cfg: RunConfig, out: Path) -> OracleRun:
    out = Path(out)
    if (out / BVP_BRANCH).is_file() and (out / BVP_FOLD).is_file():
        return load_oracle(cfg, out)
    run = oracle_branch(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_oracle(run, cfg, out)
    return run


# --------------------------------------------------------------------------
# experiment side


def experiment_branch(cfg: RunConfig, log=None) -> continuation.Branch:
    c = cfg.continuation
    phi0 = None if math.isnan(c.phi0_start) else c.phi0_start
    return continuation.continue_branch((c.p_start, phi0), cfg.params(), continuation_settings(cfg),
                                        sim_settings(cfg), log=log)


def save_experiment(branch: continuation.Branch, cfg: RunConfig, out: Path) -> None:
    out = Path(out)
    branch.to_csv(out / EXP_BRANCH, cfg.header("experiment-branch"))
    s = continuation_settings(cfg)
    info = {
        "config_sha256": cfg.digest(),
        "points": len(branch.points),
        "fold_index": branch.fold_index,
        "termination": branch.termination,
        "m1_evaluations": branch.calls,
        "simulated_periods": branch.periods,
        "transient_eps": s.transient_eps,
        "newton_tol": s.newton_tol,
    }
    (out / EXP_SUMMARY).write_text(json.dumps(info, indent=2) + "\n")


# --------------------------------------------------------------------------
# simulate


@dataclass
class SimulationReport:
    trajectory: delay_sim.Trajectory
    status: str  # ok | loss-of-control
    reason: str
    p: float
    phi0: float


def simulate(cfg: RunConfig) -> SimulationReport:
    """Closed-loop run from rest (or from an oracle orbit) for ``simulate.periods`` periods."""
    params = cfg.params()
    s = cfg.simulate
    sim = sim_settings(cfg)
    T = params.period
    n = sim.steps_per_period
    if not math.isnan(s.orbit_phase):
        interp = oracle_cached(cfg, Path(cfg.output_dir)).interpolator()
        orbit = interp.orbit_at(s.orbit_phase)
        p = orbit.p
        phi0 = orbit.avg_phase
        ctrl = _control(cfg, phi0, T)
        hist = delay_sim.history_from_orbit(orbit, ctrl, sim)
    else:
        p = s.p
        phi0 = continuation.measure_start_phase(params, p, sim=sim) if math.isnan(s.phi0) else s.phi0
        ctrl = _control(cfg, phi0, T)
        hist = delay_sim.warmup_history(phi0, params, p, ctrl, sim)
    traj = delay_sim.integrate_controlled(hist, params, p, ctrl, s.periods * n, sim)
    reason = ""
    if traj.status != "ok":
        reason = "blowup"
    else:
        rate = (traj.phi[-1] - traj.phi[0]) / (traj.t[-1] - traj.t[0]) + params.omega
        if rate < 0.5 * params.omega:
            reason = "stopped"
        elif np.max(np.abs(traj.u[-(n + 1) :])) > cfg.transient.u_escape:
            reason = "escaped"
    return SimulationReport(traj, "loss-of-control" if reason else "ok", reason, p, phi0)


def _control(cfg: RunConfig, phi0: float, T: float) -> delay_sim.ControlConfig:
    c = cfg.control
    order = c.projection_order
    ref = np.zeros(2 * order + 1)
    ref[order] = phi0 * math.sqrt(T)
    return delay_sim.ControlConfig(c.gain, ref, deriv_ratio=c.deriv_ratio, relaxation=c.relaxation,
                                   projection_order=order)


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationRecord:
    l: float
    b: float
    accepted: bool
    reason: str
    p0: float = math.nan
    fold_phase: float = math.nan
    worst_mu: float = math.nan


def calibrate(cfg: RunConfig, log=None):
    """Sweep the pendulum length at fixed damping; keep the first model that

    * has a stable rotation at ``calibrate.p_start``,
    * has a fold with ``p0`` inside ``[p0_min, p0_max]``, and
    * is uniformly stable (dominant |mu| <= margin) for all gains from
      ``g_from`` to ``charts.g_max`` across the fold window on a coarse grid.
    """
    c = cfg.calibrate
    records = []
    chosen = None
    for l in [float(x) for x in c.l_values.split(",")]:
        params = cfg.params().with_(l=l, b=c.b)
        rec = _calibrate_one(cfg, params, log)
        records.append(rec)
        if log:
            log(f"l={l:.3f}: {'accepted' if rec.accepted else 'rejected'} {rec.reason}")
        if rec.accepted:
            chosen = (params, rec)
            break
    return chosen, records


def _calibrate_one(cfg: RunConfig, params, log) -> CalibrationRecord:
    c = cfg.calibrate
    rec = CalibrationRecord(params.l, params.b, False, "")
    osets = oracle_settings(cfg)
    try:
        start = bvp.solve_orbit(bvp.settle_rotation(params, c.p_start, settings=osets), c.p_start, params, osets)
    except bvp.OracleError as exc:
        rec.reason = f"no rotation at start amplitude ({exc})"
        return rec
    if not start.stable:
        rec.reason = "rotation at start amplitude is unstable"
        return rec
    try:
        branch = bvp.continue_branch_bvp(start, bvp.BvpContinuationSettings(
            phase_min=start.avg_phase - cfg.oracle.phase_span, max_points=cfg.oracle.max_points))
        p0, fold = bvp.locate_fold(branch)
    except bvp.OracleError as exc:
        rec.reason = f"no fold ({exc})"
        return rec
    rec.p0, rec.fold_phase = p0, fold.avg_phase
    if not (c.p0_min <= p0 <= c.p0_max):
        rec.reason = f"fold amplitude {p0:.4g} outside range"
        return rec
    coarse = floquet.ChartSettings(g_min=c.g_from, g_max=cfg.charts.g_max, g_cells=15, phase_cells=7,
                                   phase_halfwidth=cfg.charts.phase_halfwidth, mesh=48)
    grid = floquet.stability_chart(bvp.BranchInterpolator(branch), fold.avg_phase, coarse)
    rec.worst_mu = float(np.nanmax(grid.values))
    if not rec.worst_mu <= c.margin:
        rec.reason = f"not uniformly stable (max |mu| = {rec.worst_mu:.4f})"
        return rec
    rec.accepted = True
    rec.reason = f"p0 = {p0:.6g} m, max |mu| = {rec.worst_mu:.4f}"
    return rec


def defaults_document(params, rec: CalibrationRecord, start_p: float) -> dict:
    return {
        "model": {"m": params.m, "l": params.l, "b": params.b, "g": params.g, "omega": params.omega},
        "calibration": {"fold_p0": rec.p0, "fold_phase": rec.fold_phase, "start_p": start_p},
    }


# --------------------------------------------------------------------------
# oracle / experiment consistency


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def oracle_match(branch: continuation.Branch, interp: bvp.BranchInterpolator, sigma_p: float, sigma_phi: float):
    """For each accepted point: amplitude offset from the oracle orbit with the same
    average phase, and both offsets to the nearest point of the oracle curve in
    scaled units.  Returns an array of rows ``(dp_same_phase, dp_near, dphi_near)``.
    """
    rows = []
    for pt in branch.accepted:
        ph = pt.phi0
        p_here = interp.orbit_at(ph).p
        dph = 1e-3
        slope = (interp.orbit_at(ph + dph).p - interp.orbit_at(ph - dph).p) / (2 * dph)
        delta = np.array([(pt.p - p_here) / sigma_p, 0.0])
        tau = np.array([slope * sigma_phi / sigma_p, 1.0])
        tau /= np.linalg.norm(tau)
        foot = np.dot(delta, tau) * tau
        near = delta - foot
        rows.append((pt.p - p_here, near[0] * sigma_p, near[1] * sigma_phi))
    return np.array(rows)


def verify(cfg: RunConfig, out: Path) -> list[Check]:
    """Consistency suite on cached artifacts in ``out`` (runs missing pieces)."""
    out = Path(out)
    run = oracle_cached(cfg, out)
    checks = []
    ps = np.array([o.p for o in run.branch])
    i = int(np.argmin(ps))
    interior = 0 < i < len(ps) - 1
    mu = run.fold_orbit.dominant_multiplier
    checks.append(Check("oracle fold interior", interior, f"argmin at {i} of {len(ps)}"))
    checks.append(Check("fold multiplier |mu-1| <= 1e-2", abs(mu - 1) <= 1e-2, f"mu = {mu:.8f}"))
    if not (out / EXP_BRANCH).is_file():
        save_experiment(experiment_branch(cfg), cfg, out)
    branch = continuation.load_branch_csv(out / EXP_BRANCH)
    s = continuation_settings(cfg)
    acc = branch.accepted
    unstable = [pt for pt in acc if pt.flag == "unstable-guess"]
    checks.append(Check("experiment fold traversed", branch.fold_index is not None,
                        f"fold index {branch.fold_index}"))
    checks.append(Check(">= 10 unstable points", len(unstable) >= 10, f"{len(unstable)} points"))
    worst = max(pt.residual_norm for pt in acc)
    checks.append(Check("residual <= newton tol", worst <= s.newton_tol, f"max |r| = {worst:.3g}"))
    m = oracle_match(branch, run.interpolator(), s.sigma_p, s.sigma_phi)
    dp = float(np.max(np.abs(m[:, 0])))
    dphi = float(np.max(np.abs(m[:, 2])))
    checks.append(Check("oracle match p within 3 sigma_p", dp <= 3 * s.sigma_p, f"max |dp| = {dp:.3g} m"))
    checks.append(Check("oracle match phase within 3 sigma_phi", dphi <= 3 * s.sigma_phi,
                        f"max |dphi| = {dphi:.3g} rad"))
    u = max(pt.m1_diag.u_sup for pt in acc)
    checks.append(Check("sup|u| <= 10 eps_trans", u <= 10 * s.transient_eps,
                        f"max sup|u| = {u:.3g}, eps = {s.transient_eps:.3g}"))
    return checks
