"""Closed-loop simulation of the BESS load-step scenario.

The electrical network (converter, grid line and switchable load, all
inductive branches meeting at the PCC) is integrated in the stationary
alpha-beta frame with fixed-step RK4.  The controllers (PLL, EDPC, and either
the safety filter or the vector-current-control baseline) run at the control
period in the PLL's dq frame with a zero-order hold in between.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import fsolve

from . import _kernels
from .synthesis import ModelParams, OMEGA_N

# columns of the trace CSV, in order
TRACE_COLUMNS = (
    ["t", "i_d", "i_q", "i_norm", "vpcc_d", "vpcc_q", "vpccf_d", "vpccf_q", "ir_d", "ir_q"]
    + [f"un_{k}" for k in range(4)]
    + [f"us_{k}" for k in range(4)]
    + [f"du_{k}" for k in range(4)]
    + ["B", "V", "active_set", "vcc_active"]
)

DIVERGENCE_LIMIT = 100.0


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantParams:
    l_c: float = 0.16
    r_c: float = 0.01
    l_g: float = 0.016
    r_g: float = 0.001
    l_l: float = 0.016
    r_l: float = 0.001
    f_g: float = 1.02
    v_g_mag: float = 1.0
    load_close_time: float = 0.6
    t_end: float = 1.2
    plant_step: float = 20e-6
    control_period: float = 200e-6
    omega_n: float = OMEGA_N

    def __post_init__(self):
        for name in ("l_c", "l_g", "l_l"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.plant_step <= 0 or self.control_period <= 0:
            raise ValueError("time steps must be positive")
        if self.substeps * self.plant_step != self.control_period and not math.isclose(
            self.substeps * self.plant_step, self.control_period, rel_tol=1e-12
        ):
            raise ValueError("plant_step must divide control_period exactly")

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.control_period / self.plant_step)))

    def branch_arrays(self):
        inv_l = np.array([1.0 / self.l_c, 1.0 / self.l_g, 1.0 / self.l_l])
        r = np.array([self.r_c, self.r_g, self.r_l])
        return inv_l, r


@dataclass
class PlantState:
    """Network state; currents in the alpha-beta frame.

    ``i_c`` flows from the converter into the PCC, ``i_g`` and ``i_l`` flow
    from the PCC into the grid and the load.
    """

    theta_g: float
    i_c: np.ndarray
    i_g: np.ndarray
    i_l: np.ndarray = field(default_factory=lambda: np.zeros(2))
    breaker_closed: bool = False

    def injections(self) -> np.ndarray:
        return np.array([self.i_c, -self.i_g, -self.i_l], dtype=float)

    @classmethod
    def from_injections(cls, j, theta_g, breaker_closed):
        return cls(theta_g, j[0].copy(), -j[1], -j[2], breaker_closed)


def grid_voltage(theta_g: float, params: PlantParams) -> np.ndarray:
    return params.v_g_mag * np.array([math.cos(theta_g), math.sin(theta_g)])


def pcc_voltage(s: PlantState, v_c_ab, v_g_ab, params: PlantParams) -> np.ndarray:
    """PCC voltage from the branch currents (index-1 reduction of the node)."""
    inv_l, r = params.branch_arrays()
    v = np.zeros((3, 2))
    v[0] = v_c_ab
    v[1] = v_g_ab
    n = 3 if s.breaker_closed else 2
    return _kernels.pcc_voltage_kernel(s.injections(), v, inv_l, r, n)


def plant_step_rk4(s: PlantState, v_c_ab, params: PlantParams, h: float | None = None, n_steps: int = 1,
                   vc_rate: float = 0.0) -> PlantState:
    """Advance the network by ``n_steps`` RK4 steps with the converter voltage held.

    With ``vc_rate == 0`` the converter voltage is constant in alpha-beta;
    otherwise ``v_c_ab`` is rotated at ``vc_rate`` rad/s from its initial value.
    """
    h = params.plant_step if h is None else h
    inv_l, r = params.branch_arrays()
    n = 3 if s.breaker_closed else 2
    j, th, _, _, _, div = _kernels.rk4_advance(
        s.injections(), s.theta_g, np.asarray(v_c_ab, dtype=float), 0.0, vc_rate, inv_l, r,
        params.omega_n, params.omega_n * params.f_g, params.v_g_mag, n, h, n_steps, DIVERGENCE_LIMIT)
    if div:
        raise DivergenceError(f"branch current exceeded {DIVERGENCE_LIMIT} p.u.")
    return PlantState.from_injections(j, th, s.breaker_closed)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerParams:
    d_f: float = -0.02
    d_v: float = 0.05
    k_p: float = 0.45
    t_i: float = 40e-3
    tau: float = 0.1
    t_lpf: float = 20e-3
    pll_kp: float = 0.14
    pll_ki: float = 8.0
    vcc_kp: float = 0.3
    vcc_ti: float = 5e-3
    vcc_hysteresis: float = 0.03
    i_r_lim: float = 1.18
    i_lim: float = 1.24
    m_c_max: float = 1.2
    v_dc: float = 1.0
    l_c: float = 0.16
    alpha_printed: bool = False

    @classmethod
    def from_model(cls, m: ModelParams, **kw):
        return cls(i_r_lim=m.i_r_lim, i_lim=m.i_lim, m_c_max=m.m_c_max, v_dc=m.v_dc, l_c=m.l_c, tau=m.tau,
                   alpha_printed=m.alpha_printed, **kw)


@dataclass
class ControllerState:
    theta_pll: float = 0.0
    omega_pll: float = 1.0
    pll_integrator: float = 0.0
    p_lp: float = 0.0
    q_lp: float = 0.0
    v_lp: float = 1.0
    pi_p_int: float = 0.0
    pi_q_int: float = 0.0
    v_pccf: np.ndarray = field(default_factory=lambda: np.zeros(2))
    vcc_active: bool = False
    vcc_int_d: float = 0.0
    vcc_int_q: float = 0.0


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


J = np.array([[0.0, -1.0], [1.0, 0.0]])

OMEGA_MIN, OMEGA_MAX = 0.5, 1.5


def pll_step(c: ControllerState, v_pcc_ab, ts: float, cp: ControllerParams, omega_n: float = OMEGA_N) -> ControllerState:
    """Synchronous-reference-frame PLL; advances ``theta_pll`` by one period."""
    v_dq = rot(-c.theta_pll) @ np.asarray(v_pcc_ab, dtype=float)
    err = v_dq[1]
    integ = c.pll_integrator + cp.pll_ki * ts * err
    omega = 1.0 + cp.pll_kp * err + integ
    if not OMEGA_MIN <= omega <= OMEGA_MAX:
        omega = min(max(omega, OMEGA_MIN), OMEGA_MAX)
        integ = c.pll_integrator
    theta = c.theta_pll + omega_n * omega * ts
    theta = math.atan2(math.sin(theta), math.cos(theta))
    return replace(c, theta_pll=theta, omega_pll=omega, pll_integrator=integ)


def _lpf(prev: float, new: float, ts: float, t_c: float) -> float:
    a = ts / (t_c + ts)
    return prev + a * (new - prev)


def nominal_alpha(v_pcc, v_pccf, cp: ControllerParams) -> np.ndarray:
    if cp.alpha_printed:
        return cp.tau * (np.asarray(v_pcc) - v_pccf)
    return (np.asarray(v_pcc) - v_pccf) / cp.tau


def edpc_step(c: ControllerState, i_dq, v_dq, ts: float, cp: ControllerParams):
    """One EDPC update.  Returns (new state, i_r, u_n).

    ``c.omega_pll`` must already hold this period's PLL frequency.
    """
    i_dq = np.asarray(i_dq, dtype=float)
    v_dq = np.asarray(v_dq, dtype=float)
    p = v_dq[0] * i_dq[0] + v_dq[1] * i_dq[1]
    q = v_dq[1] * i_dq[0] - v_dq[0] * i_dq[1]
    p_lp = _lpf(c.p_lp, p, ts, cp.t_lpf)
    q_lp = _lpf(c.q_lp, q, ts, cp.t_lpf)
    v_lp = _lpf(c.v_lp, float(np.hypot(*v_dq)), ts, cp.t_lpf)
    p_r = cp.d_f * (c.omega_pll - 1.0)
    q_r = cp.d_v * (v_lp - 1.0)
    e_p = p_r - p_lp
    # q = v_q i_d - v_d i_q falls with i_q, hence the sign flip
    e_q = -(q_r - q_lp)
    int_p = c.pi_p_int + ts / cp.t_i * e_p
    int_q = c.pi_q_int + ts / cp.t_i * e_q
    i_r = cp.k_p * np.array([e_p + int_p, e_q + int_q])
    nrm = float(np.hypot(*i_r))
    if nrm > cp.i_r_lim:
        i_r = i_r * (cp.i_r_lim / nrm)
        # conditional integration: hold the integrators while saturated
        int_p, int_q = c.pi_p_int, c.pi_q_int
    z_c = cp.l_c * J
    v_cn = z_c @ i_r + c.v_pccf
    alpha_n = nominal_alpha(v_dq, c.v_pccf, cp)
    u_n = np.concatenate([v_cn, alpha_n])
    c_new = replace(c, p_lp=p_lp, q_lp=q_lp, v_lp=v_lp, pi_p_int=int_p, pi_q_int=int_q)
    return c_new, i_r, u_n


def vcc_step(c: ControllerState, i_dq, i_r, v_dq, ts: float, cp: ControllerParams, v_cn=None):
    """Hysteresis-switched vector current control.  Returns (new state, v_c)."""
    i_dq = np.asarray(i_dq, dtype=float)
    i_norm = float(np.hypot(*i_dq))
    active = c.vcc_active
    int_d, int_q = c.vcc_int_d, c.vcc_int_q
    if not active and i_norm >= cp.i_lim:
        active = True
        int_d = int_q = 0.0
    elif active and i_norm <= cp.i_lim - cp.vcc_hysteresis:
        active = False
    if not active:
        v_c = np.zeros(2) if v_cn is None else np.asarray(v_cn, dtype=float)
        return replace(c, vcc_active=False, vcc_int_d=int_d, vcc_int_q=int_q), v_c
    i_ref = np.asarray(i_r, dtype=float)
    nrm = float(np.hypot(*i_ref))
    if nrm > cp.i_r_lim:
        i_ref = i_ref * (cp.i_r_lim / nrm)
    e = i_ref - i_dq
    new_int_d = int_d + ts / cp.vcc_ti * e[0]
    new_int_q = int_q + ts / cp.vcc_ti * e[1]
    ff = np.asarray(v_dq, dtype=float) + cp.l_c * (J @ i_dq)
    v_c = ff + cp.vcc_kp * (e + np.array([new_int_d, new_int_q]))
    bound = cp.m_c_max * cp.v_dc
    vn = float(np.hypot(*v_c))
    if vn > bound:
        v_c = v_c * (bound / vn)
        new_int_d, new_int_q = int_d, int_q
    return replace(c, vcc_active=True, vcc_int_d=new_int_d, vcc_int_q=new_int_q), v_c


# ---------------------------------------------------------------------------
# Initial operating point
# ---------------------------------------------------------------------------


def pre_step_equilibrium(pp: PlantParams, cp: ControllerParams):
    """Steady state with the breaker open, expressed in the PLL frame.

    Returns (plant state at t = 0, controller state at t = 0).
    """
    f = pp.f_g
    z_c = complex(pp.r_c, f * pp.l_c)
    z_g = complex(pp.r_g, f * pp.l_g)
    p_r = cp.d_f * (f - 1.0)

    def residual(z):
        i_d, i_q, vmag, phi = z
        i = complex(i_d, i_q)
        v = complex(vmag, 0.0)
        vg = pp.v_g_mag * complex(math.cos(phi), math.sin(phi))
        kvl = v - (vg + z_g * i)
        s = v * i.conjugate()
        q_r = cp.d_v * (vmag - 1.0)
        return [kvl.real, kvl.imag, s.real - p_r, s.imag - q_r]

    sol, info, ier, msg = fsolve(residual, [0.0, 0.0, pp.v_g_mag, 0.0], full_output=True, xtol=1e-14)
    if ier != 1:
        raise RuntimeError(f"pre-step equilibrium not found: {msg}")
    i_d, i_q, vmag, phi = sol
    i = complex(i_d, i_q)
    v = complex(vmag, 0.0)
    # controller reference that reproduces i through the real impedance
    i_r_c = z_c * i / complex(0.0, cp.l_c)
    i_r = np.array([i_r_c.real, i_r_c.imag])
    s = v * i.conjugate()
    theta_g0 = 0.0
    theta_pll0 = theta_g0 - phi
    c = ControllerState(
        theta_pll=theta_pll0,
        omega_pll=f,
        pll_integrator=f - 1.0,
        p_lp=s.real,
        q_lp=s.imag,
        v_lp=vmag,
        pi_p_int=i_r[0] / cp.k_p,
        pi_q_int=i_r[1] / cp.k_p,
        v_pccf=np.array([vmag, 0.0]),
    )
    i_ab = rot(theta_pll0) @ np.array([i_d, i_q])
    st = PlantState(theta_g=theta_g0, i_c=i_ab, i_g=i_ab.copy(), i_l=np.zeros(2), breaker_closed=False)
    return st, c


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass
class SimTrace:
    rows: np.ndarray  # numeric columns, active_set and vcc_active as integers
    max_i_norm: float
    max_i_norm_sampled: float
    toggle_count: int
    max_delta_u: float
    last_nonzero_du_time: float
    convergence_time: float
    max_kcl_residual: float
    max_frame_error: float
    infeasible_steps: int
    max_kkt: float
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, TRACE_COLUMNS.index(name)]

    def summary(self) -> dict:
        return {
            "max_i_norm": self.max_i_norm,
            "max_i_norm_sampled": self.max_i_norm_sampled,
            "toggle_count": self.toggle_count,
            "max_delta_u": self.max_delta_u,
            "last_nonzero_du_time": self.last_nonzero_du_time,
            "convergence_time": self.convergence_time,
            "infeasible_steps": self.infeasible_steps,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        n_num = len(TRACE_COLUMNS) - 2
        for row in self.rows:
            w.writerow([format(v, ".12g") for v in row[:n_num]] + [_active_label(int(row[-2])), int(row[-1])])
        return buf.getvalue()


_ACTIVE_NAMES = ("CBF", "CLF", "MOD")


def _active_label(mask: int) -> str:
    names = [n for k, n in enumerate(_ACTIVE_NAMES) if mask & (1 << k)]
    return "+".join(names) if names else "none"


DU_ZERO = 1e-6


def run_scenario(pp: PlantParams, cp: ControllerParams, certificate=None, model=None, baseline: bool = False,
                 filter_tol: float = 1e-10) -> SimTrace:
    """Run the load-step scenario.

    With ``baseline`` the vector current control is the inner loop; otherwise
    the safety filter built from ``certificate`` (and its ``model``) is used.
    A certificate passed together with ``baseline`` is only used to log B and V.
    """
    if not baseline and certificate is None:
        raise ValueError("safety-filter run needs a certificate")
    flt = None
    if certificate is not None:
        from .safety_filter import CertificateFilter

        flt = CertificateFilter(certificate, model)
    ts = pp.control_period
    n_sub = pp.substeps
    h = pp.plant_step
    n_periods = int(round(pp.t_end / ts))
    k_close = int(round(pp.load_close_time / ts))
    inv_l, r = pp.branch_arrays()
    wg = pp.omega_n * pp.f_g

    plant, ctrl = pre_step_equilibrium(pp, cp)
    j = plant.injections()
    theta_g = plant.theta_g
    closed = False

    rows = np.zeros((n_periods, len(TRACE_COLUMNS)))
    max_i = 0.0
    max_kcl = 0.0
    max_frame = 0.0
    toggles = 0
    infeasible = 0
    max_kkt = 0.0
    prev_active = ctrl.vcc_active
    hold_vc = cp.l_c * (J @ _equilibrium_ir(ctrl, cp)) + ctrl.v_pccf
    hold_angle = ctrl.theta_pll
    for k in range(n_periods):
        t = k * ts
        if k == k_close:
            closed = True
        n_branch = 3 if closed else 2
        # measurements at the sampling instant (v_c enters the PCC voltage)
        i_ab = j[0].copy()
        vsrc = np.zeros((3, 2))
        vsrc[0] = rot(hold_angle) @ hold_vc
        vsrc[1] = pp.v_g_mag * np.array([math.cos(theta_g), math.sin(theta_g)])
        v_ab = _kernels.pcc_voltage_kernel(j, vsrc, inv_l, r, n_branch)

        theta_k = ctrl.theta_pll
        rmat = rot(-theta_k)
        i_dq = rmat @ i_ab
        v_dq = rmat @ v_ab
        max_frame = max(max_frame, abs(math.hypot(*i_ab) - math.hypot(*i_dq)))
        ctrl = pll_step(ctrl, v_ab, ts, cp, pp.omega_n)
        ctrl, i_r, u_n = edpc_step(ctrl, i_dq, v_dq, ts, cp)
        x = np.concatenate([i_dq, ctrl.v_pccf, i_r, v_dq])
        active_mask = 0
        if baseline:
            ctrl, v_c = vcc_step(ctrl, i_dq, i_r, v_dq, ts, cp, v_cn=u_n[:2])
            u_s = np.concatenate([v_c, u_n[2:]])
            if ctrl.vcc_active != prev_active and k >= k_close:
                toggles += 1
            prev_active = ctrl.vcc_active
        else:
            out = flt.step(x, u_n, tol=filter_tol)
            u_s = out.u_s
            active_mask = out.active_mask
            if not out.feasible:
                infeasible += 1
            else:
                max_kkt = max(max_kkt, out.kkt_residual)
        du = u_s - u_n
        b_val = v_val = math.nan
        if flt is not None:
            b_val, v_val = flt.barrier_values(x)
        rows[k, 0] = t
        rows[k, 1:3] = i_dq
        rows[k, 3] = math.hypot(*i_dq)
        rows[k, 4:6] = v_dq
        rows[k, 6:8] = ctrl.v_pccf
        rows[k, 8:10] = i_r
        rows[k, 10:14] = u_n
        rows[k, 14:18] = u_s
        rows[k, 18:22] = du
        rows[k, 22] = b_val
        rows[k, 23] = v_val
        rows[k, 24] = active_mask
        rows[k, 25] = 1 if ctrl.vcc_active else 0

        # filtered PCC voltage integrates the applied rate
        ctrl = replace(ctrl, v_pccf=ctrl.v_pccf + ts * u_s[2:])
        hold_vc = u_s[:2].copy()
        rate = pp.omega_n * ctrl.omega_pll
        j, theta_g, hold_angle, mi, kcl, div = _kernels.rk4_advance(
            j, theta_g, hold_vc, theta_k, rate, inv_l, r, pp.omega_n, wg,
            pp.v_g_mag, n_branch, h, n_sub, DIVERGENCE_LIMIT)
        max_i = max(max_i, mi)
        max_kcl = max(max_kcl, kcl)
        if div:
            raise DivergenceError(f"branch current exceeded {DIVERGENCE_LIMIT} p.u. at t={t:.6f}")

    du_norm = np.linalg.norm(rows[:, 18:22], axis=1)
    nz = np.nonzero(du_norm > DU_ZERO)[0]
    last_nz = float(rows[nz[-1], 0]) if nz.size else -math.inf
    conv = _convergence_time(rows[:, 0], rows[:, 23], du_norm)
    return SimTrace(
        rows=rows,
        max_i_norm=max_i,
        max_i_norm_sampled=float(rows[:, 3].max()),
        toggle_count=toggles,
        max_delta_u=float(du_norm.max()),
        last_nonzero_du_time=last_nz,
        convergence_time=conv,
        max_kcl_residual=max_kcl,
        max_frame_error=max_frame,
        infeasible_steps=infeasible,
        max_kkt=max_kkt,
    )


def _equilibrium_ir(c: ControllerState, cp: ControllerParams) -> np.ndarray:
    return cp.k_p * np.array([c.pi_p_int, c.pi_q_int])


def _convergence_time(t, v, du_norm) -> float:
    """Earliest sample after which V <= 0 and ||du|| <= DU_ZERO hold to the end."""
    ok = (du_norm <= DU_ZERO) & ~(v > 0.0)
    if not ok[-1]:
        return math.inf
    bad = np.nonzero(~ok)[0]
    idx = 0 if bad.size == 0 else bad[-1] + 1
    return float(t[idx])
