"""Compiled inner loops for the fixed-step delay integrator.

All buffers are indexed by integrator node.  Times enter only through a
phase index into tables sampled at half steps, so ``sin(omega t)`` and the
reference signal are exactly T-periodic in the discrete scheme.
"""

import numpy as np
from numba import njit

# model constants packed as (m, l, b, g, omega, p)
# control constants packed as (gain, deriv_ratio, relaxation)

OK = 0
BLOWUP = 1


@njit(cache=True, inline="always")
def _accel(phi, dphi, t, sin_wt, torque, model):
    m, l, b, g, w, p = model[0], model[1], model[2], model[3], model[4], model[5]
    ml = m * l
    forcing = g + w * w * p * sin_wt
    return (torque - b * dphi - b * w - ml * forcing * np.sin(phi + w * t)) / (ml * l)


@njit(cache=True)
def plant_advance(phi, dphi, acc, i0, nsteps, n, phase0, model, t_half, sin_half, blowup):
    """Open-loop RK4 from node ``i0`` for ``nsteps`` steps."""
    dt = 2.0 * (t_half[1] - t_half[0])
    h2 = 0.5 * dt
    for i in range(i0, i0 + nsteps):
        q = 2 * ((phase0 + i) % n)
        y0 = phi[i]
        y1 = dphi[i]
        a1 = _accel(y0, y1, t_half[q], sin_half[q], 0.0, model)
        acc[i] = a1
        p2 = y0 + h2 * y1
        v2 = y1 + h2 * a1
        a2 = _accel(p2, v2, t_half[q + 1], sin_half[q + 1], 0.0, model)
        p3 = y0 + h2 * v2
        v3 = y1 + h2 * a2
        a3 = _accel(p3, v3, t_half[q + 1], sin_half[q + 1], 0.0, model)
        q4 = (q + 2) % (2 * n)
        p4 = y0 + dt * v3
        v4 = y1 + dt * a3
        a4 = _accel(p4, v4, t_half[q4], sin_half[q4], 0.0, model)
        phi[i + 1] = y0 + dt / 6.0 * (y1 + 2.0 * v2 + 2.0 * v3 + v4)
        dphi[i + 1] = y1 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not abs(dphi[i + 1]) < blowup:
            return BLOWUP, i + 1
    j = i0 + nsteps
    q = 2 * ((phase0 + j) % n)
    acc[j] = _accel(phi[j], dphi[j], t_half[q], sin_half[q], 0.0, model)
    return OK, j


@njit(cache=True)
def window_terms(phi, F, dF, Gc, j, n, period, order, kern, dkern, wts):
    """Projected feedback ``F``, its lag-derivative part ``Gc`` and ``dF`` at node ``j``."""
    s = 0.0
    for m in range(n + 1):
        s += (wts[m] * kern[m]) * phi[j - m]
    F[j] = s
    gsum = 0.0
    if order > 0:
        for m in range(n + 1):
            gsum += (wts[m] * dkern[m]) * phi[j - m]
    Gc[j] = gsum
    dF[j] = ((2 * order + 1) * (phi[j] - phi[j - n])) / period + gsum


@njit(cache=True, inline="always")
def _herm_mid(y0, y1, d0, d1, dt):
    return 0.5 * (y0 + y1) + 0.125 * dt * (d0 - d1)


@njit(cache=True, inline="always")
def _lag_mid(ym, y0, y1, y2):
    return (-ym + 9.0 * y0 + 9.0 * y1 - y2) / 16.0


@njit(cache=True)
def delayed_reference(phi, dphi, ref, dref, F, Gc, k, half, n, dt, period, order, relax):
    """Feedback reference and its derivative at lag one period.

    ``k`` is the node one period back; ``half`` selects the midpoint
    between ``k`` and ``k + 1``.
    """
    if not half:
        phT = phi[k]
        dphT = dphi[k]
        FT = F[k]
        dFT = ((2 * order + 1) * (phi[k] - phi[k - n])) / period + Gc[k]
        rT = ref[k]
        drT = dref[k]
    else:
        phT = _herm_mid(phi[k], phi[k + 1], dphi[k], dphi[k + 1], dt)
        ph2T = _herm_mid(phi[k - n], phi[k - n + 1], dphi[k - n], dphi[k - n + 1], dt)
        dphT = _lag_mid(dphi[k - 1], dphi[k], dphi[k + 1], dphi[k + 2])
        dF0 = ((2 * order + 1) * (phi[k] - phi[k - n])) / period + Gc[k]
        dF1 = ((2 * order + 1) * (phi[k + 1] - phi[k + 1 - n])) / period + Gc[k + 1]
        FT = _herm_mid(F[k], F[k + 1], dF0, dF1, dt)
        gmid = 0.0
        if order > 0:
            gmid = _lag_mid(Gc[k - 1], Gc[k], Gc[k + 1], Gc[k + 2])
        dFT = ((2 * order + 1) * (phT - ph2T)) / period + gmid
        rT = 0.0
        drT = 0.0
        if relax != 1.0:
            rT = _herm_mid(ref[k], ref[k + 1], dref[k], dref[k + 1], dt)
            drT = _lag_mid(dref[k - 1], dref[k], dref[k + 1], dref[k + 2])
    r = (1.0 - relax) * rT + relax * (phT - FT)
    dr = (1.0 - relax) * drT + relax * (dphT - dFT)
    return r, dr


@njit(cache=True)
def controlled_advance(phi, dphi, acc, ref, dref, F, dF, Gc, u, torque, i0, nsteps, n, phase0,
                       model, ctrl, order, kern, dkern, wts, t_half, sin_half, r_half, dr_half, blowup):
    """Closed-loop RK4 with projected time-delayed feedback from node ``i0``.

    Node ``i0`` must carry ``phi``/``dphi`` plus ``F``/``Gc`` and the
    reference trace for the preceding period; everything derived at ``i0``
    itself is recomputed here with the control switched on.
    """
    dt = 2.0 * (t_half[1] - t_half[0])
    period = n * dt
    h2 = 0.5 * dt
    m, l = model[0], model[1]
    gain, kappa, relax = ctrl[0], ctrl[1], ctrl[2]
    ml = m * l

    # derived quantities at the starting node
    q = 2 * ((phase0 + i0) % n)
    rr, drr = delayed_reference(phi, dphi, ref, dref, F, Gc, i0 - n, False, n, dt, period, order, relax)
    ref[i0] = rr
    dref[i0] = drr
    uu = phi[i0] - rr - r_half[q]
    ud = dphi[i0] - drr - dr_half[q]
    tq = -ml * gain * (uu + kappa * ud)
    u[i0] = uu
    torque[i0] = tq
    acc[i0] = _accel(phi[i0], dphi[i0], t_half[q], sin_half[q], tq, model)

    for i in range(i0, i0 + nsteps):
        q = 2 * ((phase0 + i) % n)
        k = i - n
        y0 = phi[i]
        y1 = dphi[i]
        a1 = acc[i]

        rr, drr = delayed_reference(phi, dphi, ref, dref, F, Gc, k, True, n, dt, period, order, relax)
        p2 = y0 + h2 * y1
        v2 = y1 + h2 * a1
        tq = -ml * gain * ((p2 - rr - r_half[q + 1]) + kappa * (v2 - drr - dr_half[q + 1]))
        a2 = _accel(p2, v2, t_half[q + 1], sin_half[q + 1], tq, model)
        p3 = y0 + h2 * v2
        v3 = y1 + h2 * a2
        tq = -ml * gain * ((p3 - rr - r_half[q + 1]) + kappa * (v3 - drr - dr_half[q + 1]))
        a3 = _accel(p3, v3, t_half[q + 1], sin_half[q + 1], tq, model)

        q4 = (q + 2) % (2 * n)
        rr4, drr4 = delayed_reference(phi, dphi, ref, dref, F, Gc, k + 1, False, n, dt, period, order, relax)
        p4 = y0 + dt * v3
        v4 = y1 + dt * a3
        tq = -ml * gain * ((p4 - rr4 - r_half[q4]) + kappa * (v4 - drr4 - dr_half[q4]))
        a4 = _accel(p4, v4, t_half[q4], sin_half[q4], tq, model)

        j = i + 1
        phi[j] = y0 + dt / 6.0 * (y1 + 2.0 * v2 + 2.0 * v3 + v4)
        dphi[j] = y1 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not abs(dphi[j]) < blowup:
            return BLOWUP, j
        window_terms(phi, F, dF, Gc, j, n, period, order, kern, dkern, wts)
        ref[j] = rr4
        dref[j] = drr4
        uu = phi[j] - rr4 - r_half[q4]
        ud = dphi[j] - drr4 - dr_half[q4]
        tq = -ml * gain * (uu + kappa * ud)
        u[j] = uu
        torque[j] = tq
        acc[j] = _accel(phi[j], dphi[j], t_half[q4], sin_half[q4], tq, model)
    return OK, i0 + nsteps
