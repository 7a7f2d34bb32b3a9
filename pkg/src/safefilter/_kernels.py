"""Hot inner loops: RK4 network integration and the 4-variable QCQP.

Every function here is written in the restricted numpy subset numba accepts,
so the same source runs compiled (default) or interpreted when
``SAFEFILTER_NUMBA=0``.
"""

import math

import numpy as np

from ._accel import njit

# ---------------------------------------------------------------------------
# Network: up to three inductive branches meeting at one node (the PCC).
# Branch k carries current j[k] *into* the node from source v_src[k].
# ---------------------------------------------------------------------------


@njit(cache=True)
def pcc_voltage_kernel(j, v_src, inv_l, r, n_branch):
    num0 = 0.0
    num1 = 0.0
    den = 0.0
    for k in range(n_branch):
        num0 += inv_l[k] * (v_src[k, 0] - r[k] * j[k, 0])
        num1 += inv_l[k] * (v_src[k, 1] - r[k] * j[k, 1])
        den += inv_l[k]
    out = np.empty(2)
    out[0] = num0 / den
    out[1] = num1 / den
    return out


@njit(cache=True)
def _sources(theta_g, vc_dq, vc_angle, vg_mag):
    v = np.zeros((3, 2))
    c = math.cos(vc_angle)
    s = math.sin(vc_angle)
    v[0, 0] = c * vc_dq[0] - s * vc_dq[1]
    v[0, 1] = s * vc_dq[0] + c * vc_dq[1]
    v[1, 0] = vg_mag * math.cos(theta_g)
    v[1, 1] = vg_mag * math.sin(theta_g)
    return v


@njit(cache=True)
def _derivative(j, theta_g, vc_angle, vc_dq, inv_l, r, wn, vg_mag, n_branch):
    v = _sources(theta_g, vc_dq, vc_angle, vg_mag)
    vp = pcc_voltage_kernel(j, v, inv_l, r, n_branch)
    dj = np.zeros((3, 2))
    for k in range(n_branch):
        dj[k, 0] = wn * inv_l[k] * (v[k, 0] - r[k] * j[k, 0] - vp[0])
        dj[k, 1] = wn * inv_l[k] * (v[k, 1] - r[k] * j[k, 1] - vp[1])
    return dj


@njit(cache=True)
def rk4_advance(j0, theta_g0, vc_dq, vc_angle0, vc_rate, inv_l, r, wn, wg, vg_mag, n_branch, h, n_steps, max_abs):
    """Integrate the branch currents over ``n_steps`` RK4 steps of size ``h``.

    The converter voltage is ``R(vc_angle0 + vc_rate*t) @ vc_dq``; the grid
    source angle advances at ``wg`` rad/s.  Returns the final currents, grid
    angle, converter angle, the largest converter-current magnitude and the
    largest KCL residual seen at any step, and a divergence flag.
    """
    j = j0.copy()
    th = theta_g0
    ang = vc_angle0
    max_ic = math.hypot(j[0, 0], j[0, 1])
    max_kcl = 0.0
    diverged = False
    for _ in range(n_steps):
        k1 = _derivative(j, th, ang, vc_dq, inv_l, r, wn, vg_mag, n_branch)
        k2 = _derivative(j + 0.5 * h * k1, th + 0.5 * h * wg, ang + 0.5 * h * vc_rate, vc_dq, inv_l, r, wn, vg_mag, n_branch)
        k3 = _derivative(j + 0.5 * h * k2, th + 0.5 * h * wg, ang + 0.5 * h * vc_rate, vc_dq, inv_l, r, wn, vg_mag, n_branch)
        k4 = _derivative(j + h * k3, th + h * wg, ang + h * vc_rate, vc_dq, inv_l, r, wn, vg_mag, n_branch)
        j = j + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        th = th + h * wg
        ang = ang + h * vc_rate
        m = math.hypot(j[0, 0], j[0, 1])
        if m > max_ic:
            max_ic = m
        s0 = 0.0
        s1 = 0.0
        for k in range(n_branch):
            s0 += j[k, 0]
            s1 += j[k, 1]
        kcl = math.hypot(s0, s1)
        if kcl > max_kcl:
            max_kcl = kcl
        for k in range(n_branch):
            if abs(j[k, 0]) > max_abs or abs(j[k, 1]) > max_abs:
                diverged = True
        if diverged:
            break
    return j, th, ang, max_ic, max_kcl, diverged


# ---------------------------------------------------------------------------
# QCQP:  min ||u - un||^2  s.t.  C u + b <= 0,  u0^2 + u1^2 <= R^2,  u in R^4
# ---------------------------------------------------------------------------

_SV_TOL = 1e-12


@njit(cache=True)
def _sym2_pinv_solve(a00, a01, a11, r0, r1):
    # Minimum-norm least-squares solve of a symmetric PSD 2x2 system.
    tr = a00 + a11
    det = a00 * a11 - a01 * a01
    disc = math.sqrt(max(0.25 * (a00 - a11) ** 2 + a01 * a01, 0.0))
    l1 = 0.5 * tr + disc
    l2 = 0.5 * tr - disc
    scale = max(abs(l1), 1.0)
    if abs(l2) > _SV_TOL * scale and abs(det) > 0.0:
        return (a11 * r0 - a01 * r1) / det, (a00 * r1 - a01 * r0) / det
    if abs(l1) <= _SV_TOL:
        return 0.0, 0.0
    # rank one: eigenvector of l1
    if abs(a01) > 0.0:
        e0 = l1 - a11
        e1 = a01
    elif a00 >= a11:
        e0 = 1.0
        e1 = 0.0
    else:
        e0 = 0.0
        e1 = 1.0
    nrm = math.hypot(e0, e1)
    e0 /= nrm
    e1 /= nrm
    c = (e0 * r0 + e1 * r1) / l1
    return c * e0, c * e1


@njit(cache=True)
def _candidate(un, C, b, a0, a1, mu):
    """KKT point for active rows (a0, a1 flags) and norm multiplier mu (fixed).

    Returns u, lam0, lam1.  Rows that are not active get a zero multiplier.
    """
    d = np.ones(4)
    d[0] = 1.0 / (1.0 + mu)
    d[1] = d[0]
    lam0 = 0.0
    lam1 = 0.0
    if a0 and a1:
        g00 = 0.0
        g01 = 0.0
        g11 = 0.0
        r0 = b[0]
        r1 = b[1]
        for k in range(4):
            g00 += C[0, k] * d[k] * C[0, k]
            g01 += C[0, k] * d[k] * C[1, k]
            g11 += C[1, k] * d[k] * C[1, k]
            r0 += C[0, k] * d[k] * un[k]
            r1 += C[1, k] * d[k] * un[k]
        lam0, lam1 = _sym2_pinv_solve(g00, g01, g11, r0, r1)
    elif a0 or a1:
        row = 0 if a0 else 1
        g = 0.0
        rr = b[row]
        for k in range(4):
            g += C[row, k] * d[k] * C[row, k]
            rr += C[row, k] * d[k] * un[k]
        lam = rr / g if g > _SV_TOL else 0.0
        if a0:
            lam0 = lam
        else:
            lam1 = lam
    u = np.empty(4)
    for k in range(4):
        u[k] = d[k] * (un[k] - C[0, k] * lam0 - C[1, k] * lam1)
    return u, lam0, lam1


@njit(cache=True)
def _disc_norm(u):
    return math.hypot(u[0], u[1])


@njit(cache=True)
def _solve_mu(un, C, b, a0, a1, R):
    """Find mu >= 0 with ||u01(mu)|| = R; returns -1 when unreachable."""
    u, l0, l1 = _candidate(un, C, b, a0, a1, 0.0)
    if _disc_norm(u) <= R:
        return 0.0
    lo = 0.0
    hi = 1.0
    for _ in range(200):
        u, l0, l1 = _candidate(un, C, b, a0, a1, hi)
        if _disc_norm(u) <= R:
            break
        lo = hi
        hi *= 4.0
    else:
        return -1.0
    if _disc_norm(u) > R:
        return -1.0
    # The norm is non-increasing in mu; bracketed bisection with secant refinement.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        u, l0, l1 = _candidate(un, C, b, a0, a1, mid)
        if _disc_norm(u) > R:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return hi


@njit(cache=True)
def kkt_residual(u, un, C, b, R, lam0, lam1, mu):
    res = 0.0
    lam = (lam0, lam1)
    for k in range(4):
        g = u[k] - un[k] + C[0, k] * lam0 + C[1, k] * lam1
        if k < 2:
            g += mu * u[k]
        res = max(res, abs(g))
    for i in range(2):
        ci = b[i]
        for k in range(4):
            ci += C[i, k] * u[k]
        res = max(res, ci)
        res = max(res, -lam[i])
        res = max(res, abs(lam[i] * ci))
    cn = (u[0] * u[0] + u[1] * u[1] - R * R)
    res = max(res, cn / max(R, 1.0))
    res = max(res, -mu)
    res = max(res, abs(mu * cn))
    return res


@njit(cache=True)
def qcqp_solve(un, C, b, R, tol):
    """Enumerate the 8 active sets of {CBF, CLF, MOD}.

    Returns (u, lam0, lam1, mu, active_mask, kkt, feasible).  ``active_mask``
    bit 0 = CBF, bit 1 = CLF, bit 2 = MOD.  When no candidate satisfies the
    primal constraints ``feasible`` is False and the other outputs describe
    the least-bad candidate.
    """
    best_u = un.copy()
    best_obj = np.inf
    best_l0 = 0.0
    best_l1 = 0.0
    best_mu = 0.0
    best_mask = -1
    ptol = tol
    # masks ordered by active-set size so ties go to the smaller set
    order = (0, 1, 2, 4, 3, 5, 6, 7)
    for mask in order:
        a0 = (mask & 1) != 0
        a1 = (mask & 2) != 0
        am = (mask & 4) != 0
        if am:
            mu = _solve_mu(un, C, b, a0, a1, R)
            if mu < 0.0:
                continue
            if mu == 0.0:
                # norm constraint not binding: the mask without MOD covers it
                continue
        else:
            mu = 0.0
        u, l0, l1 = _candidate(un, C, b, a0, a1, mu)
        # multiplier signs
        lam_scale = 1.0 + abs(l0) + abs(l1)
        if a0 and l0 < -ptol * lam_scale:
            continue
        if a1 and l1 < -ptol * lam_scale:
            continue
        # primal feasibility
        ok = True
        for i in range(2):
            ci = b[i]
            sc = abs(b[i])
            for k in range(4):
                ci += C[i, k] * u[k]
                sc += abs(C[i, k] * u[k])
            if ci > ptol * max(1.0, sc):
                ok = False
        if _disc_norm(u) > R * (1.0 + 1e-12) + ptol:
            ok = False
        if not ok:
            continue
        obj = 0.0
        for k in range(4):
            obj += (u[k] - un[k]) ** 2
        if obj < best_obj * (1.0 - 1e-12) - 1e-300:
            best_obj = obj
            best_u = u
            best_l0 = l0
            best_l1 = l1
            best_mu = mu
            best_mask = mask
        if mask == 0:
            # unconstrained point feasible: it is the global minimiser
            break
    if best_mask < 0:
        return un.copy(), 0.0, 0.0, 0.0, 0, np.inf, False
    # clip radial round-off so the hard input bound holds exactly
    nrm = _disc_norm(best_u)
    if nrm > R:
        best_u[0] *= R / nrm
        best_u[1] *= R / nrm
    kkt = kkt_residual(best_u, un, C, b, R, best_l0, best_l1, best_mu)
    return best_u, best_l0, best_l1, best_mu, best_mask, kkt, True
