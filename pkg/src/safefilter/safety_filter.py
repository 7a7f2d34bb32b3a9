"""Runtime safety filter: a 4-variable QCQP solved once per control period.

    min ||u - u_n||^2  s.t.  C(x) u + b(x) <= 0,  ||(u_0, u_1)|| <= v_c_bound

Row 0 of C, b is the barrier condition and row 1 the Lyapunov-like
condition; the state-dependent slacks are r_0 = -gamma_B B and r_1 = -gamma_V V.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .synthesis import Certificate, SystemModel, build_model

ACTIVE_NAMES = ("CBF", "CLF", "MOD")


class InfeasibleFilterError(RuntimeError):
    pass


@dataclass
class QcqpInstance:
    u_n: np.ndarray
    C: np.ndarray
    b: np.ndarray
    v_c_bound: float


@dataclass
class FilterOutput:
    u_s: np.ndarray
    delta_u: np.ndarray
    active_set: frozenset
    kkt_residual: float
    feasible: bool = True
    multipliers: tuple = (0.0, 0.0, 0.0)

    @property
    def active_mask(self) -> int:
        return sum(1 << k for k, n in enumerate(ACTIVE_NAMES) if n in self.active_set)


def _mask_names(mask: int) -> frozenset:
    return frozenset(n for k, n in enumerate(ACTIVE_NAMES) if mask & (1 << k))


class CertificateFilter:
    """Pre-compiled evaluation of C(x) and b(x) for one certificate."""

    def __init__(self, cert: Certificate, model: SystemModel | None = None):
        self.cert = cert
        self.model = model if model is not None else build_model_for(cert)
        self.A, self.f0 = self.model.f_numeric()
        self.G = np.ascontiguousarray(self.model.G)
        self.R = self.model.params.v_c_bound
        self._B = cert.B.arrays()
        self._V = cert.V.arrays()
        self._gradB = [cert.B.differentiate(v).arrays() for v in range(8)]
        self._gradV = [cert.V.differentiate(v).arrays() for v in range(8)]
        self._gamma_B = cert.multiplier("gamma_B").arrays()
        self._gamma_V = cert.multiplier("gamma_V").arrays()
        self._d = cert.d.arrays()
        self._u_n = [p.arrays() for p in self.model.u_n]

    @staticmethod
    def _ev(arr, x) -> float:
        exps, coefs = arr
        if coefs.size == 0:
            return 0.0
        return float(np.dot(coefs, np.prod(x[None, :] ** exps, axis=1)))

    def barrier_values(self, x) -> tuple:
        x = np.asarray(x, dtype=float)
        return self._ev(self._B, x), self._ev(self._V, x)

    def nominal_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.array([self._ev(a, x) for a in self._u_n])

    def instance(self, x, u_n=None) -> QcqpInstance:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("state must be finite")
        if u_n is None:
            u_n = self.nominal_input(x)
        gB = np.array([self._ev(a, x) for a in self._gradB])
        gV = np.array([self._ev(a, x) for a in self._gradV])
        fx = self.A @ x + self.f0
        Bx, Vx = self.barrier_values(x)
        C = np.vstack([gB @ self.G, gV @ self.G])
        b = np.array([
            gB @ fx + self._ev(self._gamma_B, x) * Bx,
            gV @ fx + self._ev(self._d, x) + self._ev(self._gamma_V, x) * Vx,
        ])
        return QcqpInstance(np.asarray(u_n, dtype=float).copy(), C, b, self.R)

    def step(self, x, u_n=None, tol: float = 1e-10) -> FilterOutput:
        return solve_filter(self.instance(x, u_n), tol)


def build_model_for(cert: Certificate) -> SystemModel:
    from .synthesis import ModelParams

    return build_model(ModelParams())


def build_constraints(x, cert: Certificate, m: SystemModel) -> QcqpInstance:
    return CertificateFilter(cert, m).instance(x)


def least_violation(q: QcqpInstance) -> float:
    """Smallest uniform shift t with {C u + b <= t, ||u_01|| <= R} nonempty."""
    C, b, R = q.C, q.b, q.v_c_bound

    def disc(z):
        return R * R - z[0] ** 2 - z[1] ** 2

    cons = [{"type": "ineq", "fun": lambda z, i=i: z[4] - C[i] @ z[:4] - b[i]} for i in range(2)]
    cons.append({"type": "ineq", "fun": disc})
    u0 = q.u_n.copy()
    nrm = np.hypot(u0[0], u0[1])
    if nrm > R:
        u0[:2] *= R / nrm
    z0 = np.concatenate([u0, [max(0.0, float(np.max(C @ u0 + b)))]])
    res = minimize(lambda z: z[4], z0, constraints=cons, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 500})
    return float(res.x[4])


def solve_filter(q: QcqpInstance, tol: float = 1e-10, fallback: bool = True) -> FilterOutput:
    """Global minimiser by active-set enumeration.

    An empty feasible set raises ``InfeasibleFilterError`` unless ``fallback``
    is set, in which case the least-violation input is returned with
    ``feasible = False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    un = np.ascontiguousarray(q.u_n, dtype=float)
    C = np.ascontiguousarray(q.C, dtype=float)
    b = np.ascontiguousarray(q.b, dtype=float)
    u, l0, l1, mu, mask, kkt, ok = _kernels.qcqp_solve(un, C, b, float(q.v_c_bound), tol)
    if ok:
        return FilterOutput(u, u - un, _mask_names(mask), float(kkt), True, (l0, l1, mu))
    if not fallback:
        raise InfeasibleFilterError("filter constraints have an empty intersection")
    t = least_violation(q)
    shift = t + 1e-9 * (1.0 + abs(t))
    u, l0, l1, mu, mask, kkt, ok = _kernels.qcqp_solve(un, C, b - shift, float(q.v_c_bound), tol)
    if not ok:
        u = un.copy()
        nrm = np.hypot(u[0], u[1])
        if nrm > q.v_c_bound:
            u[:2] *= q.v_c_bound / nrm
        mask, kkt = 0, np.inf
    return FilterOutput(u, u - un, _mask_names(mask), float(kkt), False, (l0, l1, mu))


def filter_step(x, cert: Certificate, m: SystemModel, tol: float = 1e-10) -> FilterOutput:
    return solve_filter(build_constraints(x, cert, m), tol)
