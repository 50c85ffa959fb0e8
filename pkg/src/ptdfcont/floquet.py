"""Floquet analysis of the controlled delay system and the stability/condition charts.

The closed loop is linearised about an uncontrolled rotation (where the
control input vanishes) and discretised with the same fixed-step scheme as
the simulator, on a coarser mesh of ``M`` nodes per period.  Its state is the
sampled history of ``(phi, phi_dot)`` over the last two periods, plus the
reference trace over the last period when the relaxation is below one.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spectral
from .bvp import BranchInterpolator, OracleError, PeriodicOrbit
from .delay_sim import ControlConfig
from .model import DERIV_RATIO


@dataclass
class MonodromyDiscretization:
    mesh_points: int
    operator: np.ndarray
    forcing: np.ndarray  # (size, 2): one-period response to unit dp and unit dphi0
    avg_row: np.ndarray  # maps a state to the average of phi over its last period
    gain: float
    relaxation: float
    order: int

    @property
    def size(self) -> int:
        return self.operator.shape[0]

    def m1_gradient(self) -> np.ndarray:
        """``(dM1/dp, dM1/dphi0)`` from the periodic response of the linear loop."""
        A = np.eye(self.size) - self.operator
        x = np.linalg.solve(A, self.forcing)
        return self.avg_row @ x


@dataclass(frozen=True)
class _Layout:
    M: int
    memory: bool

    @property
    def nodes(self) -> int:
        return 2 * self.M + 1

    @property
    def size(self) -> int:
        base = 2 * self.nodes
        return base + (2 * (self.M + 1) if self.memory else 0)


def monodromy_dde(orbit: PeriodicOrbit, config, mesh: int = 64) -> MonodromyDiscretization:
    """Period map of the closed loop linearised about ``orbit``, built column by column.

    All unit history vectors are propagated at once (one column each), plus
    two inhomogeneous columns started from zero history that carry the
    response to a unit change of ``p`` and of the scalar reference.
    """
    gain = float(config.gain)
    relaxation = float(config.relaxation)
    order = int(config.projection_order)
    deriv_ratio = float(config.deriv_ratio)
    params = orbit.params
    M = mesh
    T = params.period
    dt = T / M
    lay = _Layout(M, relaxation != 1.0)
    S = lay.size
    ncol = S + 2
    total = 3 * M + 1

    phi = np.zeros((total, ncol))
    dphi = np.zeros((total, ncol))
    ref = np.zeros((total, ncol))
    dref = np.zeros((total, ncol))
    F = np.zeros((total, ncol))
    Gc = np.zeros((total, ncol))
    eye = np.eye(S)
    nodes = lay.nodes
    phi[:nodes, :S] = eye[:nodes]
    dphi[:nodes, :S] = eye[nodes : 2 * nodes]
    if lay.memory:
        ref[M:nodes, :S] = eye[2 * nodes : 2 * nodes + M + 1]
        dref[M:nodes, :S] = eye[2 * nodes + M + 1 :]
    # inhomogeneous columns
    col_p = S
    col_r = S + 1
    drive = np.zeros(ncol)
    drive[col_p] = 1.0
    r_unit = np.zeros(ncol)
    r_unit[col_r] = 1.0

    t_half = np.arange(2 * M) * (0.5 * dt)
    star = orbit.evaluate(t_half)[:, 0]
    w = params.omega
    s_wt = np.sin(w * t_half)
    stiff = -(params.g + w * w * orbit.p * s_wt) * np.cos(star + w * t_half) / params.l
    dforce = -(w * w / params.l) * s_wt * np.sin(star + w * t_half)
    damp = params.b / params.inertia
    kgain = gain / params.l

    wts = spectral.trapezoid_weights(M)
    kern = (wts * spectral.feedback_kernel(order, M))[:, None]
    dkern = (wts * spectral.feedback_kernel_derivative(order, M, T))[:, None]
    nfac = 2 * order + 1

    def window(j):
        F[j] = (kern * phi[j - M : j + 1][::-1]).sum(axis=0)
        if order > 0:
            Gc[j] = (dkern * phi[j - M : j + 1][::-1]).sum(axis=0)

    for j in range(M, nodes):
        window(j)

    def delayed(k, half):
        if not half:
            phT, dphT, FT = phi[k], dphi[k], F[k]
            dFT = (nfac * (phi[k] - phi[k - M])) / T + Gc[k]
            rT, drT = ref[k], dref[k]
        else:
            phT = 0.5 * (phi[k] + phi[k + 1]) + 0.125 * dt * (dphi[k] - dphi[k + 1])
            ph2 = 0.5 * (phi[k - M] + phi[k - M + 1]) + 0.125 * dt * (dphi[k - M] - dphi[k - M + 1])
            dphT = (-dphi[k - 1] + 9 * dphi[k] + 9 * dphi[k + 1] - dphi[k + 2]) / 16.0
            dF0 = (nfac * (phi[k] - phi[k - M])) / T + Gc[k]
            dF1 = (nfac * (phi[k + 1] - phi[k + 1 - M])) / T + Gc[k + 1]
            FT = 0.5 * (F[k] + F[k + 1]) + 0.125 * dt * (dF0 - dF1)
            gmid = (-Gc[k - 1] + 9 * Gc[k] + 9 * Gc[k + 1] - Gc[k + 2]) / 16.0 if order > 0 else 0.0
            dFT = (nfac * (phT - ph2)) / T + gmid
            rT = drT = 0.0
            if lay.memory:
                rT = 0.5 * (ref[k] + ref[k + 1]) + 0.125 * dt * (dref[k] - dref[k + 1])
                drT = (-dref[k - 1] + 9 * dref[k] + 9 * dref[k + 1] - dref[k + 2]) / 16.0
        R = relaxation
        return (1 - R) * rT + R * (phT - FT), (1 - R) * drT + R * (dphT - dFT)

    def accel(x, v, q, rr, drr):
        uu = x - rr - r_unit
        ud = v - drr
        return -kgain * (uu + deriv_ratio * ud) - damp * v + stiff[q] * x + dforce[q] * drive

    i0 = 2 * M
    rr, drr = delayed(i0 - M, False)
    ref[i0], dref[i0] = rr, drr
    acc = accel(phi[i0], dphi[i0], 0, rr, drr)
    h2 = 0.5 * dt
    for i in range(i0, i0 + M):
        q = 2 * (i % M)
        k = i - M
        y0, y1 = phi[i], dphi[i]
        rr, drr = delayed(k, True)
        p2 = y0 + h2 * y1
        v2 = y1 + h2 * acc
        a2 = accel(p2, v2, q + 1, rr, drr)
        p3 = y0 + h2 * v2
        v3 = y1 + h2 * a2
        a3 = accel(p3, v3, q + 1, rr, drr)
        q4 = (q + 2) % (2 * M)
        rr4, drr4 = delayed(k + 1, False)
        p4 = y0 + dt * v3
        v4 = y1 + dt * a3
        a4 = accel(p4, v4, q4, rr4, drr4)
        j = i + 1
        phi[j] = y0 + dt / 6.0 * (y1 + 2 * v2 + 2 * v3 + v4)
        dphi[j] = y1 + dt / 6.0 * (acc + 2 * a2 + 2 * a3 + a4)
        window(j)
        ref[j], dref[j] = rr4, drr4
        acc = accel(phi[j], dphi[j], q4, rr4, drr4)

    new = np.empty((S, ncol))
    new[:nodes] = phi[M:]
    new[nodes : 2 * nodes] = dphi[M:]
    if lay.memory:
        new[2 * nodes : 2 * nodes + M + 1] = ref[2 * M :]
        new[2 * nodes + M + 1 :] = dref[2 * M :]
    avg_row = np.zeros(S)
    avg_row[M:nodes] = wts
    return MonodromyDiscretization(M, new[:, :S], new[:, S:], avg_row, gain, relaxation, order)


def dominant_multiplier(disc, dense_limit: int = 600, seed: int = 0) -> complex:
    """Eigenvalue of largest modulus of a monodromy operator.

    Dense eigensolve up to ``dense_limit`` columns, orthogonal iteration with
    Rayleigh-Ritz extraction above it.
    """
    A = disc.operator if isinstance(disc, MonodromyDiscretization) else np.asarray(disc)
    if A.shape[0] <= dense_limit:
        ev = np.linalg.eigvals(A)
        return complex(ev[np.argmax(np.abs(ev))])
    return orthogonal_iteration(A, seed=seed)


def orthogonal_iteration(A, k: int = 6, tol: float = 1e-12, max_iter: int = 5000, seed: int = 0) -> complex:
    """Dominant eigenvalue by subspace iteration; copes with complex-conjugate pairs."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((A.shape[0], k)))
    prev = None
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(A @ Q)
        ritz = np.linalg.eigvals(Q.T @ A @ Q)
        mu = ritz[np.argmax(np.abs(ritz))]
        if prev is not None and abs(abs(mu) - abs(prev)) <= tol * max(1.0, abs(mu)):
            return complex(mu)
        prev = mu
    return complex(prev)


# --------------------------------------------------------------------------
# charts


@dataclass
class ChartGrid:
    g_values: np.ndarray
    phase_values: np.ndarray
    values: np.ndarray  # (len(phase_values), len(g_values))
    flags: np.ndarray  # same shape, "" or "lost"
    kind: str = "stability"
    extra: dict = field(default_factory=dict)

    def save(self, stem: Path, header: list[str] | None = None, fmt: str = "wide") -> None:
        """CSV matrix (rows = phase, columns = gain) plus a JSON axes sidecar."""
        stem = Path(stem)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            for line in header or []:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            if fmt == "long":
                w.writerow(["g", "phase", "value", "flag"])
                for i, ph in enumerate(self.phase_values):
                    for j, g in enumerate(self.g_values):
                        w.writerow([repr(float(g)), repr(float(ph)), repr(float(self.values[i, j])), self.flags[i, j]])
            else:
                w.writerow(["phase"] + [repr(float(g)) for g in self.g_values])
                for i, ph in enumerate(self.phase_values):
                    w.writerow([repr(float(ph))] + [repr(float(v)) for v in self.values[i]])
        axes = {
            "kind": self.kind,
            "g_values": [float(g) for g in self.g_values],
            "phase_values": [float(p) for p in self.phase_values],
            "lost_cells": int(np.sum(self.flags == "lost")),
        }
        axes.update({k: v for k, v in self.extra.items() if isinstance(v, (int, float, str, list))})
        stem.with_suffix(".json").write_text(json.dumps(axes, indent=2) + "\n")


@dataclass(frozen=True)
class ChartSettings:
    g_min: float = 0.0
    g_max: float = 15.0
    g_cells: int = 60
    phase_halfwidth: float = 0.3
    phase_cells: int = 60
    mesh: int = 64
    relaxation: float = 1.0
    order: int = 0
    deriv_ratio: float = DERIV_RATIO
    sigma_p: float = 2e-4
    sigma_phi: float = 1e-4

    def control(self, gain: float) -> ControlConfig:
        ref = np.zeros(2 * self.order + 1)
        return ControlConfig(gain, ref, deriv_ratio=self.deriv_ratio, relaxation=self.relaxation,
                             projection_order=self.order)

    def g_values(self) -> np.ndarray:
        return np.linspace(self.g_min, self.g_max, self.g_cells)

    def phase_values(self, fold_phase: float) -> np.ndarray:
        return np.linspace(fold_phase - self.phase_halfwidth, fold_phase + self.phase_halfwidth, self.phase_cells)


@dataclass
class CellResult:
    mu: complex
    gradient: np.ndarray  # dM1/dp, dM1/dphi0
    lost: bool = False


def evaluate_cell(orbit: PeriodicOrbit, gain: float, settings: ChartSettings) -> CellResult:
    disc = monodromy_dde(orbit, settings.control(gain), settings.mesh)
    mu = dominant_multiplier(disc)
    try:
        grad = disc.m1_gradient()
    except np.linalg.LinAlgError:
        grad = np.array([math.inf, math.inf])
    return CellResult(mu, grad)


def _row_task(args):
    orbit, g_values, settings = args
    return [evaluate_cell(orbit, g, settings) for g in g_values]


def chart_cells(interp: BranchInterpolator, phase_values, g_values, settings: ChartSettings, threads: int = 1):
    """Evaluate every (phase, gain) cell; rows in phase order regardless of completion order."""
    orbits = []
    for ph in phase_values:
        try:
            orbits.append(interp.orbit_at(float(ph)))
        except OracleError:
            orbits.append(None)
    tasks = [(o, g_values, settings) for o in orbits if o is not None]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_row_task, tasks))
    else:
        rows = [_row_task(t) for t in tasks]
    it = iter(rows)
    cells = []
    for o in orbits:
        cells.append(next(it) if o is not None else [CellResult(complex(math.nan), np.full(2, math.nan), True)] * len(g_values))
    return orbits, cells


def stability_chart(interp: BranchInterpolator, fold_phase: float, settings: ChartSettings = ChartSettings(),
                    threads: int = 1, cells=None) -> ChartGrid:
    """Dominant |multiplier| over (gain, average phase) and the |mu| = 1 contour."""
    g_values = settings.g_values()
    phase_values = settings.phase_values(fold_phase)
    if cells is None:
        _, cells = chart_cells(interp, phase_values, g_values, settings, threads)
    values = np.array([[abs(c.mu) for c in row] for row in cells])
    flags = np.array([["lost" if c.lost else "" for c in row] for row in cells], dtype=object)
    grid = ChartGrid(g_values, phase_values, values, flags, "stability")
    grid.extra["contour_phase"] = [None if x is None else float(x) for x in unit_contour(grid)]
    grid.extra["fold_phase"] = float(fold_phase)
    return grid


def unit_contour(grid: ChartGrid):
    """For each gain column, the highest phase where |mu| crosses 1 (``None`` if none)."""
    out = []
    for j in range(grid.values.shape[1]):
        col = grid.values[:, j] - 1.0
        cross = None
        for i in range(len(col) - 1, 0, -1):
            a, b = col[i - 1], col[i]
            if np.isfinite(a) and np.isfinite(b) and (a >= 0) != (b >= 0):
                ph0, ph1 = grid.phase_values[i - 1], grid.phase_values[i]
                cross = ph0 + (ph1 - ph0) * a / (a - b)
                break
        out.append(cross)
    return out


def jacobian_at(gradient, tangent, sigma_p: float, sigma_phi: float) -> np.ndarray:
    """Scaled 2x2 Jacobian: first row the unit tangent, second row the linearised residual."""
    row2 = np.array([gradient[0] * sigma_p / sigma_phi, gradient[1] - 1.0])
    return np.vstack([np.asarray(tangent, dtype=float), row2])


def exact_tangent(row2, reference=(0.0, 1.0)) -> np.ndarray:
    """Unit null vector of ``row2`` oriented along ``reference``."""
    t = np.array([-row2[1], row2[0]], dtype=float)
    nrm = np.linalg.norm(t)
    if nrm == 0 or not np.isfinite(nrm):
        return np.array(reference, dtype=float)
    t /= nrm
    return t if np.dot(t, reference) >= 0 else -t


def condition_chart(interp: BranchInterpolator, fold_phase: float, settings: ChartSettings = ChartSettings(),
                    tangent: str = "exact", threads: int = 1, cells=None) -> ChartGrid:
    """cond_2 of the Newton Jacobian over (gain, average phase).

    ``tangent="exact"`` uses the null vector of the linearised residual row;
    ``"branch"`` uses the oracle branch tangent in scaled variables.
    """
    g_values = settings.g_values()
    phase_values = settings.phase_values(fold_phase)
    orbits = None
    if cells is None:
        orbits, cells = chart_cells(interp, phase_values, g_values, settings, threads)
    values = np.empty((len(phase_values), len(g_values)))
    inv_norm = np.empty_like(values)
    row2_norm = np.empty_like(values)
    flags = np.full(values.shape, "", dtype=object)
    for i, row in enumerate(cells):
        branch_tan = None
        if tangent == "branch":
            branch_tan = _branch_tangent(interp, float(phase_values[i]), settings)
        for j, c in enumerate(row):
            if c.lost or not np.all(np.isfinite(c.gradient)):
                values[i, j] = math.inf
                inv_norm[i, j] = math.inf
                row2_norm[i, j] = math.inf
                flags[i, j] = "lost"
                continue
            r2 = np.array([c.gradient[0] * settings.sigma_p / settings.sigma_phi, c.gradient[1] - 1.0])
            tan = exact_tangent(r2) if branch_tan is None else branch_tan
            J = jacobian_at(c.gradient, tan, settings.sigma_p, settings.sigma_phi)
            sv = np.linalg.svd(J, compute_uv=False)
            values[i, j] = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
            inv_norm[i, j] = 1.0 / sv[-1] if sv[-1] > 0 else math.inf
            row2_norm[i, j] = float(np.linalg.norm(r2))
            if not np.isfinite(values[i, j]):
                flags[i, j] = "lost"
    grid = ChartGrid(g_values, phase_values, values, flags, "condition")
    grid.extra["inv_norm"] = inv_norm
    grid.extra["row2_norm"] = row2_norm
    grid.extra["fold_phase"] = float(fold_phase)
    grid.extra["tangent"] = tangent
    return grid


def _branch_tangent(interp: BranchInterpolator, phase: float, settings: ChartSettings, dphase: float = 1e-4):
    lo = interp.orbit_at(phase - dphase)
    hi = interp.orbit_at(phase + dphase)
    t = np.array([(hi.p - lo.p) / settings.sigma_p, (2 * dphase) / settings.sigma_phi])
    return t / np.linalg.norm(t)
