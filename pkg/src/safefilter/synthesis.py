"""Certificate synthesis: barrier B, Lyapunov-like V and a polynomial controller.

The control model is the reduced converter model on the 8-dimensional state
``x = (i, v_f, i_r, v_pcc)`` where ``i_r`` and ``v_pcc`` are held constant:

    di/dt   = (w_n/l_c) (v_c - Z_c i - v_pcc)
    dv_f/dt = alpha

with input ``u = (v_c, alpha)``.  Synthesis alternates two convex SOS rounds:
one fixes (B, V) and searches the controller and multipliers, the other fixes
the controller and the bilinearly coupled multipliers and searches (B, V).
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .poly import N_VARS, GramForm, Polynomial, mono_basis, quadratic_coefficients
from .sdp import SdpStatus, solve_sdp
from .sos import LinPoly, SosProgram, compile_program

logger = logging.getLogger(__name__)

OMEGA_N = 2.0 * math.pi * 50.0

I_D, I_Q, VF_D, VF_Q, IR_D, IR_Q, V_D, V_Q = range(8)


class ConfigurationError(ValueError):
    pass


class CertificateFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ModelParams:
    l_c: float = 0.16
    omega_n: float = OMEGA_N
    i_r_lim: float = 1.18
    i_lim: float = 1.24
    i_max: float = 1.30
    m_c_max: float = 1.2
    v_dc: float = 1.0
    tau: float = 0.1
    alpha_printed: bool = False
    # operating region for the PCC voltage: disc of this radius around the centre
    v_pcc_center_d: float = 0.0
    v_pcc_center_q: float = 0.0
    v_pcc_radius: float = 0.1
    # compactness radius of the safe set in the filtered PCC voltage
    v_f_box: float = 20.0
    dissipation: float = 5.0
    aggressive_gain: float = 0.2
    aggressive_alpha: float = 10.0

    def __post_init__(self):
        if not (self.i_r_lim < self.i_lim <= self.i_max):
            raise ConfigurationError(
                f"current limits must satisfy i_r_lim < i_lim <= i_max, got "
                f"{self.i_r_lim}, {self.i_lim}, {self.i_max}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.v_pcc_radius <= 0 or self.v_f_box <= 0:
            raise ConfigurationError("region radii must be positive")

    @property
    def v_c_bound(self) -> float:
        return self.m_c_max * self.v_dc

    @property
    def safety_margin(self) -> float:
        return self.i_max - self.i_lim

    @property
    def alpha_gain(self) -> float:
        """Rate gain of the nominal filtered-voltage dynamics."""
        return self.tau if self.alpha_printed else 1.0 / self.tau


def model_hash(p: ModelParams) -> str:
    canon = ";".join(f"{f.name}={getattr(p, f.name)!r}" for f in fields(p))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _x(i: int) -> Polynomial:
    return Polynomial.var(i, N_VARS)


def _c(v: float) -> Polynomial:
    return Polynomial.constant(v, N_VARS)


@dataclass(frozen=True)
class SystemModel:
    params: ModelParams
    f: tuple  # 8 Polynomials
    G: np.ndarray  # constant 8x4
    u_n: tuple  # 4 Polynomials
    u_n_aggressive: tuple

    @property
    def gain(self) -> float:
        return self.params.omega_n / self.params.l_c

    def f_numeric(self):
        """(A, f0) with f(x) = A x + f0."""
        A = np.zeros((8, 8))
        f0 = np.zeros(8)
        for r, p in enumerate(self.f):
            Q, lin, const = quadratic_coefficients(p)
            A[r] = lin
            f0[r] = const
        return A, f0

    def G_poly(self) -> list:
        return [[_c(self.G[r, k]) for k in range(4)] for r in range(8)]


def build_model(p: ModelParams) -> SystemModel:
    if not p.l_c > 0:
        raise ConfigurationError("l_c must be positive")
    k = p.omega_n / p.l_c
    zc = p.l_c  # Z_c = J * omega * l_c at omega = 1
    i_d, i_q = _x(I_D), _x(I_Q)
    # Z_c i = zc * (-i_q, i_d)
    f = [
        (-k) * (zc * (-1.0) * i_q + _x(V_D)),
        (-k) * (zc * i_d + _x(V_Q)),
    ] + [Polynomial.zero(N_VARS)] * 6
    G = np.zeros((8, 4))
    G[0, 0] = G[1, 1] = k
    G[2, 2] = G[3, 3] = 1.0
    zc_ir = (-zc * _x(IR_Q), zc * _x(IR_D))
    a = p.alpha_gain
    u_n = (
        zc_ir[0] + _x(VF_D),
        zc_ir[1] + _x(VF_Q),
        a * (_x(V_D) - _x(VF_D)),
        a * (_x(V_Q) - _x(VF_Q)),
    )
    g = p.aggressive_gain
    u_agg = (
        g * (_x(IR_D) - i_d) + zc_ir[0] + _x(VF_D),
        g * (_x(IR_Q) - i_q) + zc_ir[1] + _x(VF_Q),
        p.aggressive_alpha * a * (_x(V_D) - _x(VF_D)),
        p.aggressive_alpha * a * (_x(V_Q) - _x(VF_Q)),
    )
    return SystemModel(p, tuple(f), G, u_n, u_agg)


def lie_derivative(m: SystemModel, h, u) -> object:
    """grad(h)^T (f + G u) for a fixed or decision-valued h and u."""
    out = 0.0
    for r in range(4):
        dh = h.differentiate(r)
        drift = m.f[r]
        term = dh * drift if not drift.is_zero() else None
        act = None
        for k in range(4):
            if m.G[r, k] != 0.0:
                piece = u[k] * float(m.G[r, k])
                act = piece if act is None else act + piece
        if act is not None:
            term = dh * act if term is None else term + dh * act
        if term is not None:
            out = term + out
    return out


def operating_region(p: ModelParams) -> list:
    """Polynomials that are non-negative on the operating region."""
    r = p.i_r_lim
    g_ir = _c(1.0) - (_x(IR_D) * _x(IR_D) + _x(IR_Q) * _x(IR_Q)) * (1.0 / r**2)
    dv = _x(V_D) - p.v_pcc_center_d
    dq = _x(V_Q) - p.v_pcc_center_q
    g_v = _c(1.0) - (dv * dv + dq * dq) * (1.0 / p.v_pcc_radius**2)
    return [g_ir, g_v]


def tracking_errors() -> list:
    """(i - i_r, v_f - v_pcc) as four affine polynomials."""
    return [_x(I_D) - _x(IR_D), _x(I_Q) - _x(IR_Q), _x(VF_D) - _x(V_D), _x(VF_Q) - _x(V_Q)]


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------

MULTIPLIER_NAMES = ("gamma_B", "gamma_V", "gamma_r", "gamma_n", "gamma_1", "gamma_2", "gamma_3")


@dataclass
class Certificate:
    B: Polynomial
    V: Polynomial
    d: Polynomial
    u_sos: tuple
    multipliers: dict
    model_hash: str = ""
    meta: dict = field(default_factory=dict)
    grams: dict = field(default_factory=dict)  # name -> GramForm
    hash_mismatch: bool = False

    @property
    def verified(self) -> bool:
        return self.meta.get("status") == "Verified"

    def multiplier(self, name: str) -> Polynomial:
        return self.multipliers.get(name, Polynomial.zero(N_VARS))


@dataclass(frozen=True)
class SynthesisOptions:
    max_rounds: int = 20
    margin_tol: float = 1e-4
    gamma_degree: int = 0
    region_degree: int = 0
    polygon_sides: int = 16
    containment_margin: float = 0.02
    sdp_tol: float = 1e-8
    sdp_accept_feas: float = 1e-7
    sdp_accept_gap: float = 1e-3
    vc_gain_bound: float = 10.0
    alpha_gain_bound: float = 1e3
    gamma_v_max: float = 10.0
    sdp_max_iters: int = 100
    verify_samples: int = 20000
    seed: int = 0


def _lyapunov_seed(p: ModelParams):
    k = p.omega_n / p.l_c
    zc = p.l_c * np.array([[0.0, -1.0], [1.0, 0.0]])
    a = p.aggressive_alpha * p.alpha_gain
    A = np.zeros((4, 4))
    A[:2, :2] = -k * (zc + p.aggressive_gain * np.eye(2))
    A[:2, 2:] = k * np.eye(2)
    A[2:, 2:] = -a * np.eye(2)
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise ConfigurationError("aggressive nominal closed loop is not Hurwitz")
    P = solve_continuous_lyapunov(A.T, -np.eye(4))
    P = 0.5 * (P + P.T)
    return A, P


def initial_certificate(m: SystemModel) -> Certificate:
    """Seed candidate: a ball-shaped safe set and a tracking-error ellipsoid."""
    p = m.params
    B0 = (_x(I_D) ** 2 + _x(I_Q) ** 2) * (1.0 / p.i_lim**2) \
        + (_x(VF_D) ** 2 + _x(VF_Q) ** 2) * (1.0 / p.v_f_box**2) - 1.0
    _, P = _lyapunov_seed(p)
    Pinv = np.linalg.inv(P)
    e_gain = math.sqrt(np.linalg.eigvalsh(Pinv[:2, :2]).max())
    v_gain = math.sqrt(np.linalg.eigvalsh(Pinv[2:, 2:]).max())
    v_reach = math.hypot(p.v_pcc_center_d, p.v_pcc_center_q) + p.v_pcc_radius
    room = p.i_lim - p.i_r_lim

    def inside(c):
        s = math.sqrt(c)
        return (p.i_r_lim + s * e_gain) ** 2 / p.i_lim**2 + (v_reach + s * v_gain) ** 2 / p.v_f_box**2 < 1.0

    # largest c that keeps the ellipsoid inside, then halve the error radius
    c = (room / e_gain) ** 2
    while not inside(c):
        c *= 0.5
    c *= 0.25
    xi = tracking_errors()
    quad = Polynomial.zero(N_VARS)
    for a in range(4):
        for b in range(4):
            if P[a, b] != 0.0:
                quad = quad + xi[a] * xi[b] * float(P[a, b])
    # scale so the nominal decrease on the boundary is twice the dissipation rate
    s = 2.0 * p.dissipation * np.linalg.eigvalsh(P).max() / c
    V0 = (quad - c) * s
    return Certificate(
        B=B0,
        V=V0,
        d=_c(p.dissipation),
        u_sos=tuple(m.u_n_aggressive),
        multipliers={n: Polynomial.zero(N_VARS) for n in MULTIPLIER_NAMES},
        model_hash=model_hash(p),
        meta={"status": "Unverified", "rounds": "0"},
    )


def balanced_coordinates(p: ModelParams, V: Polynomial):
    """Affine map ``x = T y + shift`` that makes the round programs well scaled.

    ``y`` holds the tracking errors whitened by the quadratic part of ``V``
    (unit sphere on ``V = 0``), then ``i_r`` and ``v_PCC`` normalised to the
    operating region.  Returns None when ``V`` has no usable quadratic part.
    """
    Q, _, const = quadratic_coefficients(V)
    Qxi = Q[:4, :4]
    try:
        L = np.linalg.cholesky(0.5 * (Qxi + Qxi.T))
    except np.linalg.LinAlgError:
        return None
    if not const < 0:
        return None
    W = math.sqrt(-const) * np.linalg.inv(L.T)
    T = np.zeros((N_VARS, N_VARS))
    shift = np.zeros(N_VARS)
    center = np.array([p.v_pcc_center_d, p.v_pcc_center_q])
    T[0:4, 0:4] = W
    T[0:2, 4:6] = p.i_r_lim * np.eye(2)
    T[4:6, 4:6] = p.i_r_lim * np.eye(2)
    T[2:4, 6:8] = p.v_pcc_radius * np.eye(2)
    T[6:8, 6:8] = p.v_pcc_radius * np.eye(2)
    shift[2:4] = center
    shift[6:8] = center
    return T, shift


# ---------------------------------------------------------------------------
# SOS rounds
# ---------------------------------------------------------------------------

STAGE_CONTROLLER = "FixCertSolveController"
STAGE_CERTIFICATE = "FixControllerSolveCert"


def _half_basis(deg: int) -> list:
    return mono_basis(N_VARS, deg // 2)


def _b_basis() -> list:
    return [mm for mm in mono_basis(N_VARS, 2) if not any(mm[6:])]


def _v_template(prog: SosProgram):
    """Quadratic form in the tracking errors plus a constant."""
    xi = tracking_errors()
    V = prog.free_scalar("V_const")
    for a in range(4):
        for b in range(a, 4):
            w = prog.free_scalar(f"V_{a}{b}")
            V = V + w * (xi[a] * xi[b])
    return V


def _v_trace(prog: SosProgram):
    tr = 0.0
    for a in range(4):
        tr = prog.decisions[f"V_{a}{a}"].expr(N_VARS) + tr
    return tr


@dataclass
class RoundProgram:
    stage: str
    program: SosProgram
    exprs: dict  # name -> LinPoly to recover after solving
    coords: tuple | None = None  # Gram coordinates, see balanced_coordinates


def pose_round(m: SystemModel, cert: Certificate, stage: str, opts: SynthesisOptions = SynthesisOptions(),
               margin: float | None = None) -> RoundProgram:
    p = m.params
    prog = SosProgram(N_VARS)
    regions = operating_region(p)
    exprs: dict = {}
    d = cert.d
    n_sides = opts.polygon_sides
    radius = p.v_c_bound * math.cos(math.pi / n_sides)
    normals = [(math.cos(2 * math.pi * j / n_sides), math.sin(2 * math.pi * j / n_sides)) for j in range(n_sides)]

    def region_terms(tag: str, deg: int):
        total = 0.0
        for r, g in enumerate(regions):
            s = prog.sos_poly(f"{tag}_{r}", _half_basis(deg))
            exprs[f"{tag}_{r}"] = s
            total = s * g + total
        return total

    if stage == STAGE_CONTROLLER:
        B, V = cert.B, cert.V
        u = []
        for kk in range(4):
            u.append(prog.free_poly(f"u_{kk}", mono_basis(N_VARS, 1)))
            exprs[f"u_{kk}"] = u[-1]
            # a box on the gains keeps the controller (and the next stage) well scaled
            bound = opts.vc_gain_bound if kk < 2 else opts.alpha_gain_bound
            for mono, row in u[-1].terms.items():
                w = LinPoly({(0,) * N_VARS: row}, N_VARS)
                prog.add_sos(f"gain_{kk}_{sum(mono)}_{mono.index(1) if sum(mono) else 0}_hi", bound - w)
                prog.add_sos(f"gain_{kk}_{sum(mono)}_{mono.index(1) if sum(mono) else 0}_lo", bound + w)
        gdeg = opts.gamma_degree
        gB = prog.free_poly("gamma_B", mono_basis(N_VARS, gdeg))
        gn = prog.free_poly("gamma_n", mono_basis(N_VARS, gdeg))
        gV = prog.sos_poly("gamma_V", _half_basis(gdeg))
        gr = prog.sos_poly("gamma_r", _half_basis(gdeg))
        exprs.update(gamma_B=gB, gamma_n=gn, gamma_V=gV, gamma_r=gr)
        # gamma_V also sets the runtime convergence demand -gamma_V V; left
        # free it grows large and the filter intervenes hard after disturbances
        prog.add_sos("gamma_V_cap", opts.gamma_v_max - gV)
        lam = prog.sos_poly("lambda_c", _half_basis(0))
        exprs["lambda_c"] = lam
        sig_B = [prog.sos_poly(f"sigma_B_{j}", _half_basis(0)) for j in range(n_sides)]
        for j, s in enumerate(sig_B):
            exprs[f"sigma_B_{j}"] = s
        t = prog.free_scalar("margin")
        exprs["margin"] = t
        prog.maximize(t)
    elif stage == STAGE_CERTIFICATE:
        if margin is None:
            margin = float(cert.meta.get("margin", 0.0))
        prog_B = prog.free_poly("B", _b_basis())
        B = prog_B
        V = _v_template(prog)
        exprs.update(B=B, V=V)
        u = list(cert.u_sos)
        gB = cert.multiplier("gamma_B")
        gn = cert.multiplier("gamma_n")
        gV = cert.multiplier("gamma_V")
        gr = cert.multiplier("gamma_r")
        lam = cert.multiplier("lambda_c")
        sig_B = [cert.multiplier(f"sigma_B_{j}") for j in range(n_sides)]
        t = margin
        zero = (0,) * N_VARS
        prog.add_equality(LinPoly({zero: B.terms.get(zero, {})}, N_VARS), -1.0)
        # normalised by the current trace so the objective is O(1)
        Qv, _, _ = quadratic_coefficients(cert.V)
        prog.minimize(_v_trace(prog) * (1.0 / max(float(np.trace(Qv[:4, :4])), 1e-12)))
        # the safe set stays inside the compactness box at every PCC voltage
        i2 = (_x(I_D) ** 2 + _x(I_Q) ** 2) * (1.0 / p.i_lim**2) - 1.0
        vf2 = (_x(VF_D) ** 2 + _x(VF_Q) ** 2) * (1.0 / p.v_f_box**2) - 1.0
        # both differences vanish at the origin, so their Gram matrices live on
        # the linear monomials of the variables B depends on
        lin = [mm for mm in mono_basis(N_VARS, 1) if sum(mm) == 1 and not any(mm[6:])]
        prog.add_sos("contain_i", B - i2, basis=lin, use_coords=False)
        prog.add_sos("contain_vf", B - vf2, basis=lin, use_coords=False)
    else:
        raise ValueError(f"unknown stage {stage}")

    # barrier decrease
    e_a = lie_derivative(m, B, u) + gB * B + region_terms("gamma_1", opts.region_degree) + t
    prog.add_sos("cbf", e_a, "SOS_negated")
    # dissipation on the annulus between the nominal region and the safe-set boundary
    e_b = lie_derivative(m, V, u) + d + gV * V - gr * B + region_terms("gamma_2", opts.region_degree) + t
    prog.add_sos("clf", e_b, "SOS_negated")
    # nominal controller keeps the nominal region invariant
    e_c = lie_derivative(m, V, m.u_n_aggressive) + d + gn * V + region_terms("gamma_3", opts.region_degree) + t
    prog.add_sos("clf_nominal", e_c, "SOS_negated")
    # nominal region inside the safe set on the operating region
    e_n = B - lam * V + region_terms("sigma_n", 0) + opts.containment_margin
    prog.add_sos("contain_n", e_n, "SOS_negated")
    # inscribed polygon of the modulation disc on the safe set
    for j, (c0, c1) in enumerate(normals):
        lin = (u[0] * c0 + u[1] * c1)
        e_u = radius - lin + sig_B[j] * B - region_terms(f"sigma_u{j}", 0)
        prog.add_sos(f"input_{j}", e_u, "SOS")
    return RoundProgram(stage, prog, exprs, balanced_coordinates(p, cert.V))


@dataclass
class RoundResult:
    status: SdpStatus
    values: dict  # name -> Polynomial
    grams: dict  # name -> GramForm
    iterations: int
    residual: float = float("nan")
    accepted: bool = False


def solve_round(rp: RoundProgram, opts: SynthesisOptions) -> RoundResult:
    sdp, hmap = compile_program(rp.program, coords=rp.coords)
    sol = solve_sdp(sdp, tol=opts.sdp_tol, max_iters=opts.sdp_max_iters, verbose=logger.isEnabledFor(logging.DEBUG))
    logger.info("%s: %s after %d iterations (%d rows, blocks %s)", rp.stage, sol.status.name,
                sol.iterations, sdp.m, sorted(set(sdp.blocks)))
    values = {name: hmap.evaluate(sol, e) for name, e in rp.exprs.items()}
    grams = {}
    for spec, blk, *_ in hmap.constraints:
        if blk is not None:
            grams[spec.name] = hmap.gram(sol, spec.name)
    for name, d in hmap.decisions.items():
        if d.kind == "sos":
            grams[name] = hmap.gram(sol, name)
    residual = max(sol.primal_infeasibility, sol.dual_infeasibility, sol.duality_gap)
    # Decisions are the dual variables of the compiled SDP, so a stalled solve
    # whose dual side is feasible still yields valid Gram matrices; only its
    # objective is less accurate.  Sampling verification stays the final check.
    accepted = sol.status is SdpStatus.OPTIMAL or (
        sol.status in (SdpStatus.MAX_ITERATIONS, SdpStatus.NUMERICAL_FAILURE)
        and sol.dual_infeasibility <= opts.sdp_accept_feas and sol.duality_gap <= opts.sdp_accept_gap)
    return RoundResult(sol.status, values, grams, sol.iterations, residual, accepted)


def _polish_gamma(values: dict, names) -> dict:
    return {n: values[n] for n in names if n in values}


def synthesize(p: ModelParams, opts: SynthesisOptions = SynthesisOptions()) -> Certificate:
    """Alternate the two SOS rounds and return the best verified certificate.

    When no round verifies, the last candidate is returned with
    ``meta["status"]`` set to ``"Infeasible"`` or ``"Unverified"``.
    """
    m = build_model(p)
    cert = initial_certificate(m)
    if opts.max_rounds <= 0:
        cert.meta.update(status="Unverified", rounds="0")
        return cert
    margins: list = []
    best: Certificate | None = None
    last: Certificate = cert
    iters: list = []
    for rnd in range(opts.max_rounds):
        r1 = solve_round(pose_round(m, last, STAGE_CONTROLLER, opts), opts)
        iters.append(r1.iterations)
        if not r1.accepted:
            logger.info("round %d: controller stage %s", rnd, r1.status.name)
            break
        t = r1.values["margin"].coeff((0,) * N_VARS)
        if margins and t < margins[-1] - 1e-9:
            logger.info("round %d: margin %.6g below previous %.6g, stopping", rnd, t, margins[-1])
            break
        margins.append(t)
        fixed = Certificate(
            B=last.B, V=last.V, d=last.d,
            u_sos=tuple(r1.values[f"u_{k}"] for k in range(4)),
            multipliers={n: v for n, v in r1.values.items() if n not in ("margin",) and not n.startswith("u_")},
            model_hash=model_hash(p),
            meta={"margin": repr(t)},
        )
        for n in MULTIPLIER_NAMES:
            fixed.multipliers.setdefault(n, Polynomial.zero(N_VARS))
        fixed.grams = r1.grams
        logger.info("round %d: margin %.6g", rnd, t)
        if t >= 0:
            cand = _finish(m, fixed, opts, margins, iters, rnd)
            if cand.verified:
                best = cand
        r2 = solve_round(pose_round(m, fixed, STAGE_CERTIFICATE, opts, margin=t), opts)
        iters.append(r2.iterations)
        if not r2.accepted:
            logger.info("round %d: certificate stage %s", rnd, r2.status.name)
            last = fixed
            break
        mult = dict(fixed.multipliers)
        for n, v in r2.values.items():
            if n not in ("B", "V") and not n.startswith("V_"):
                mult[n] = v
        grams = dict(fixed.grams)
        grams.update(r2.grams)
        nxt = Certificate(B=r2.values["B"], V=r2.values["V"], d=fixed.d, u_sos=fixed.u_sos,
                          multipliers=mult, model_hash=model_hash(p), meta={"margin": repr(t)}, grams=grams)
        if t >= 0:
            cand = _finish(m, nxt, opts, margins, iters, rnd)
            if cand.verified:
                best = cand
        last = nxt
        if len(margins) >= 2 and margins[-1] - margins[-2] < opts.margin_tol:
            break
    if best is not None:
        return best
    last.meta.update(status="Infeasible" if not margins or max(margins) < 0 else "Unverified",
                     margins=",".join(repr(x) for x in margins))
    return last


def _finish(m, cert, opts, margins, iters, rnd) -> Certificate:
    cert.meta.update(
        rounds=str(rnd + 1),
        margin=repr(margins[-1]),
        margins=",".join(repr(x) for x in margins),
        sdp_iterations=",".join(str(i) for i in iters),
        sdp_tol=repr(opts.sdp_tol),
        safety_margin=repr(m.params.safety_margin),
    )
    rep = verify_certificate(m, cert, opts.verify_samples, opts.seed)
    cert.meta["status"] = "Verified" if rep.status == "Verified" else "Unverified"
    cert.meta["verify_samples"] = str(opts.verify_samples)
    return cert


# ---------------------------------------------------------------------------
# Sampling verification
# ---------------------------------------------------------------------------

CHECKS = ("cbf", "clf", "nominal", "input")


@dataclass
class VerificationReport:
    status: str  # "Verified", "Violations" or "Unverified"
    n_samples: int
    checked: dict
    violations: dict
    worst: dict

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


def _disc(rng, n, radius, center=(0.0, 0.0)):
    r = radius * np.sqrt(rng.random(n))
    a = 2 * np.pi * rng.random(n)
    return np.column_stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)])


def sample_operating_region(p: ModelParams, rng, n: int, i_radius: float | None = None,
                            vf_radius: float | None = None) -> np.ndarray:
    x = np.empty((n, 8))
    x[:, 0:2] = _disc(rng, n, p.i_lim if i_radius is None else i_radius)
    x[:, 2:4] = _disc(rng, n, p.v_f_box if vf_radius is None else vf_radius)
    x[:, 4:6] = _disc(rng, n, p.i_r_lim)
    x[:, 6:8] = _disc(rng, n, p.v_pcc_radius, (p.v_pcc_center_d, p.v_pcc_center_q))
    return x


class CertificateEvaluator:
    """Vectorised evaluation of the certificate conditions."""

    def __init__(self, m: SystemModel, cert: Certificate):
        self.m = m
        self.cert = cert
        self.A, self.f0 = m.f_numeric()
        self.gradB = [cert.B.differentiate(v) for v in range(8)]
        self.gradV = [cert.V.differentiate(v) for v in range(8)]

    def _u(self, polys, x):
        return np.column_stack([q.eval_many(x) for q in polys])

    def _lie(self, grads, x, u):
        xdot = x @ self.A.T + self.f0 + u @ self.m.G.T
        return sum(g.eval_many(x) * xdot[:, v] for v, g in enumerate(grads) if not g.is_zero())

    def B(self, x):
        return self.cert.B.eval_many(x)

    def V(self, x):
        return self.cert.V.eval_many(x)

    def cbf(self, x):
        u = self._u(self.cert.u_sos, x)
        return self._lie(self.gradB, x, u) + self.cert.multiplier("gamma_B").eval_many(x) * self.B(x)

    def clf(self, x):
        u = self._u(self.cert.u_sos, x)
        return self._lie(self.gradV, x, u) + self.cert.d.eval_many(x)

    def nominal(self, x):
        u = self._u(self.m.u_n_aggressive, x)
        return (self._lie(self.gradV, x, u) + self.cert.d.eval_many(x)
                + self.cert.multiplier("gamma_n").eval_many(x) * self.V(x))

    def input_norm(self, x):
        u = self._u(self.cert.u_sos[:2], x)
        return np.hypot(u[:, 0], u[:, 1])


def _boundary_points(fun_quadratic, x0, dirs):
    """Points x0 + s*dir with s > 0 the first root of a quadratic along the ray."""
    f0 = fun_quadratic(x0)
    f1 = fun_quadratic(x0 + dirs)
    fm = fun_quadratic(x0 - dirs)
    a = 0.5 * (f1 + fm) - f0
    b = 0.5 * (f1 - fm)
    c = f0
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0)
    s = np.where(ok, (-b + np.sqrt(np.maximum(disc, 0))) / np.where(a > 0, 2 * a, 1.0), np.nan)
    ok &= s > 0
    return x0[ok] + s[ok, None] * dirs[ok]


def _sample_safe(p: ModelParams, ev, rng, n: int, max_draws: int = 10**8) -> np.ndarray:
    """Uniform samples of the operating region restricted to B <= 0."""
    pts = []
    need, drawn, kept = n, 0, 0
    while need > 0 and drawn < max_draws:
        rate = max(kept / drawn, 1e-3) if drawn else 0.05
        batch = min(max(int(1.2 * need / rate), 1000), 2_000_000)
        x = sample_operating_region(p, rng, batch)
        x = x[ev.B(x) <= 0]
        drawn += batch
        kept += len(x)
        pts.append(x)
        need -= len(x)
    return np.concatenate(pts)[:n]


def verify_certificate(m: SystemModel, cert: Certificate, n_samples: int, seed: int = 0,
                       tol: float = 1e-6, band: float = 1e-2) -> VerificationReport:
    """Sampled check of the certificate conditions on the operating region.

    Uniform samples of the operating region restricted to ``B <= 0`` test the
    dissipation and input conditions; rays from those samples to the level
    sets ``B = 0`` and ``V = 0`` provide samples for the two boundary
    conditions, in addition to any uniform sample already inside the band.
    """
    if n_samples <= 0:
        return VerificationReport("Unverified", 0, {c: 0 for c in CHECKS}, {c: 0 for c in CHECKS},
                                  {c: float("nan") for c in CHECKS})
    p = m.params
    ev = CertificateEvaluator(m, cert)
    rng = np.random.default_rng(seed)
    x = _sample_safe(p, ev, rng, n_samples)
    Bx, Vx = ev.B(x), ev.V(x)
    checked, viol, worst = {}, {}, {}

    def record(name, vals):
        checked[name] = int(vals.size)
        viol[name] = int(np.count_nonzero(vals > tol))
        worst[name] = float(vals.max()) if vals.size else float("nan")

    # CBF condition on the boundary band and on ray-projected boundary points
    dirs = np.zeros_like(x)
    dirs[:, 0:4] = rng.standard_normal((len(x), 4))
    xb = np.concatenate([x[np.abs(Bx) <= band], _boundary_points(ev.B, x, dirs)])
    record("cbf", ev.cbf(xb))
    ann = (Vx >= 0) & (Bx <= 0)
    record("clf", ev.clf(x[ann]))
    # nominal condition near V = 0: rays from points on the zero-error manifold
    x0 = x.copy()
    x0[:, 0:2] = x0[:, 4:6]
    x0[:, 2:4] = x0[:, 6:8]
    inner = ev.V(x0) < 0
    xv = np.concatenate([x[np.abs(Vx) <= band], _boundary_points(ev.V, x0[inner], dirs[inner])])
    record("nominal", ev.nominal(xv))
    record("input", ev.input_norm(x) - p.v_c_bound)
    status = "Verified" if sum(viol.values()) == 0 else "Violations"
    return VerificationReport(status, len(x), checked, viol, worst)


@dataclass
class ContainmentReport:
    n_samples: int
    nominal_outside_safe: int
    safe_outside_box: int
    nominal_points: int
    safe_points: int
    box_exceeds_allowable: bool
    safe_not_nominal: int = 0

    @property
    def ok(self) -> bool:
        return (self.nominal_outside_safe == 0 and self.safe_outside_box == 0 and self.nominal_points > 0
                and self.safe_not_nominal > 0 and not self.box_exceeds_allowable)


def containment_check(m: SystemModel, cert: Certificate, n_samples: int, seed: int = 0) -> ContainmentReport:
    """Sampled X_n inside X_s inside the current box inside the allowable set.

    X_n samples are drawn from an ellipsoid slightly larger than the sublevel
    set of V in the (i, v_f) coordinates; X_s samples by rejection from a box
    half again larger than the compactness box.
    """
    p = m.params
    ev = CertificateEvaluator(m, cert)
    rng = np.random.default_rng(seed)
    x = sample_operating_region(p, rng, n_samples)
    # quadratic part of V in (i, v_f) given (i_r, v_pcc)
    Q, lin, const = quadratic_coefficients(cert.V)
    H = Q[:4, :4]
    w, U = np.linalg.eigh(H)
    if w.min() <= 0:
        n_out = n_samples  # unbounded nominal region cannot be inside X_s
        n_in = 0
    else:
        rest = x[:, 4:8]
        g = lin[:4][None, :] + 2 * rest @ Q[4:, :4]
        center = -0.5 * np.linalg.solve(H, g.T).T
        c_rest = np.einsum("ni,ij,nj->n", rest, Q[4:, 4:], rest) + rest @ lin[4:] + const
        vmin = c_rest - 0.25 * np.einsum("ni,ij,nj->n", g, np.linalg.inv(H), g)
        level = np.maximum(-vmin, 0.0)
        z = rng.standard_normal((n_samples, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= rng.random((n_samples, 1)) ** 0.25 * 1.05
        y = (z / np.sqrt(w)) @ U.T * np.sqrt(level)[:, None]
        x[:, :4] = center + y
        inV = ev.V(x) <= 0
        n_in = int(np.count_nonzero(inV))
        n_out = int(np.count_nonzero(inV & (ev.B(x) > 0)))
    xs = sample_operating_region(p, rng, n_samples, i_radius=1.5 * p.i_lim, vf_radius=1.5 * p.v_f_box)
    # half the draws put the current near its reference, where safe sets of
    # tracking-type barriers concentrate
    half = n_samples // 2
    xs[:half, 0:2] = xs[:half, 4:6] + _disc(rng, half, 0.5 * p.i_lim)
    inB = ev.B(xs) <= 0
    i_norm = np.hypot(xs[:, 0], xs[:, 1])
    vf_norm = np.hypot(xs[:, 2], xs[:, 3])
    bad = inB & ((i_norm > p.i_lim) | (vf_norm > p.v_f_box))
    strict = int(np.count_nonzero(inB & (ev.V(xs) > 0)))
    return ContainmentReport(n_samples, n_out, int(np.count_nonzero(bad)), n_in, int(np.count_nonzero(inB)),
                             p.i_lim > p.i_max, strict)


# ---------------------------------------------------------------------------
# Certificate files
# ---------------------------------------------------------------------------

SECTIONS = ("MODEL-HASH", "B", "V", "D", "USOS", "MULTIPLIERS", "GRAMS", "META")


def _write_poly(lines: list, p: Polynomial):
    lines.append(str(len(p)))
    for mm, c in p.items():
        lines.append(" ".join(str(e) for e in mm) + f" {c:.17e}")


def format_certificate(cert: Certificate) -> str:
    lines = ["# safefilter certificate", "MODEL-HASH", cert.model_hash]
    for name, poly in (("B", cert.B), ("V", cert.V), ("D", cert.d)):
        lines.append(name)
        _write_poly(lines, poly)
    lines.append("USOS")
    for p in cert.u_sos:
        _write_poly(lines, p)
    lines.append("MULTIPLIERS")
    lines.append(str(len(cert.multipliers)))
    for name in sorted(cert.multipliers):
        lines.append(name)
        _write_poly(lines, cert.multipliers[name])
    lines.append("GRAMS")
    lines.append(str(len(cert.grams)))
    for name in sorted(cert.grams):
        g = cert.grams[name]
        lines.append(f"{name} {len(g.basis)}")
        for mm in g.basis:
            lines.append(" ".join(str(e) for e in mm))
        for row in g.gram:
            lines.append(" ".join(f"{v:.17e}" for v in row))
    lines.append("META")
    for k in sorted(cert.meta):
        lines.append(f"{k} = {cert.meta[k]}")
    lines.append("END")
    return "\n".join(lines) + "\n"


def certificate_digest(cert: Certificate) -> str:
    """SHA-256 of the serialised certificate without its own digest entry."""
    meta = {k: v for k, v in cert.meta.items() if k != "content_sha256"}
    return hashlib.sha256(format_certificate(replace(cert, meta=meta)).encode()).hexdigest()


def save_certificate(cert: Certificate, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(format_certificate(cert))
    tmp.replace(path)


class _Reader:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what: str) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line and not line.startswith("#"):
                return line
        raise CertificateFormatError(f"unexpected end of file, expected {what}", self.pos + 1)

    def expect(self, token: str):
        got = self.next(token)
        if got != token:
            raise CertificateFormatError(f"expected section {token}, found {got!r}", self.pos)

    def integer(self, what: str) -> int:
        s = self.next(what)
        try:
            v = int(s)
        except ValueError:
            raise CertificateFormatError(f"expected {what}, found {s!r}", self.pos) from None
        if v < 0:
            raise CertificateFormatError(f"negative {what}", self.pos)
        return v

    def poly(self) -> Polynomial:
        n = self.integer("term count")
        terms = {}
        for _ in range(n):
            s = self.next("polynomial term").split()
            if len(s) != N_VARS + 1:
                raise CertificateFormatError(f"term needs {N_VARS} exponents and a coefficient", self.pos)
            try:
                terms[tuple(int(e) for e in s[:-1])] = float(s[-1])
            except ValueError:
                raise CertificateFormatError("malformed polynomial term", self.pos) from None
        return Polynomial(terms, N_VARS)


def load_certificate(path, params: ModelParams | None = None) -> Certificate:
    """Read a certificate file.

    When ``params`` is given and its hash differs from the stored one, the
    certificate still loads; ``hash_mismatch`` is set and a warning issued.
    """
    r = _Reader(Path(path).read_text())
    r.expect("MODEL-HASH")
    h = r.next("model hash")
    polys = {}
    for name in ("B", "V", "D"):
        r.expect(name)
        polys[name] = r.poly()
    r.expect("USOS")
    u = tuple(r.poly() for _ in range(4))
    r.expect("MULTIPLIERS")
    mult = {}
    for _ in range(r.integer("multiplier count")):
        name = r.next("multiplier name")
        mult[name] = r.poly()
    r.expect("GRAMS")
    grams = {}
    for _ in range(r.integer("gram count")):
        head = r.next("gram header").split()
        if len(head) != 2:
            raise CertificateFormatError("gram header needs a name and a size", r.pos)
        try:
            size = int(head[1])
            basis = [tuple(int(e) for e in r.next("gram basis").split()) for _ in range(size)]
            rows = [[float(v) for v in r.next("gram row").split()] for _ in range(size)]
            grams[head[0]] = GramForm(tuple(basis), np.array(rows).reshape(size, size))
        except ValueError as exc:
            raise CertificateFormatError(f"malformed gram block: {exc}", r.pos) from None
    r.expect("META")
    meta = {}
    while True:
        line = r.next("META entry or END")
        if line == "END":
            break
        if "=" not in line:
            raise CertificateFormatError("META entries are 'key = value'", r.pos)
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    cert = Certificate(polys["B"], polys["V"], polys["D"], u, mult, h, meta, grams)
    if params is not None and model_hash(params) != h:
        cert.hash_mismatch = True
        warnings.warn(f"certificate model hash {h} differs from {model_hash(params)}", stacklevel=2)
    return cert


def default_certificate_path() -> Path:
    return Path(__file__).with_name("data") / "default.cert"
