"""Dense primal-dual interior-point solver for small semidefinite programs.

Standard form (minimisation)::

    min   sum_j <C_j, X_j> + c_free . w
    s.t.  sum_j <A_ij, X_j> + F_i . w = b_i      i = 1..m
          X_j PSD,  w free

Dual::

    max   b . y
    s.t.  C_j - sum_i y_i A_ij = S_j PSD,   F^T y = c_free

The iteration is the infeasible-start path-following method with the
Nesterov-Todd scaling direction and a Mehrotra predictor-corrector.  Free
variables are eliminated up front: the rows their columns span determine
them from X, so the iteration itself only sees PSD blocks.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 100
SCHUR_REG = 1e-10
FREE_RANK_TOL = 1e-13


class SdpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"


class SdpFormatError(ValueError):
    pass


@dataclass
class SdpProblem:
    """Block SDP with optional free variables.

    ``entries`` holds constraint coefficients as tuples
    ``(row, block, p, q, value)`` with ``p <= q`` meaning ``value * X_block[p, q]``
    (upper triangle; the matrix is symmetric).  ``objective`` uses the same
    convention without the row index: ``(block, p, q, value)``.
    """

    blocks: list
    b: np.ndarray
    entries: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    n_free: int = 0
    free_entries: list = field(default_factory=list)  # (row, free_index, value)
    c_free: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.c_free is None:
            self.c_free = np.zeros(self.n_free)
        self.c_free = np.asarray(self.c_free, dtype=float)
        self._validate()

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def _validate(self):
        m = self.m
        for e in self.entries:
            row, blk, p, q, _ = e
            if not 0 <= row < m:
                raise SdpFormatError(f"constraint row {row} out of range")
            if not 0 <= blk < len(self.blocks):
                raise SdpFormatError(f"block {blk} out of range")
            if not 0 <= p <= q < self.blocks[blk]:
                raise SdpFormatError(f"entry ({p},{q}) invalid for block {blk} of size {self.blocks[blk]}")
        for blk, p, q, _ in self.objective:
            if not 0 <= p <= q < self.blocks[blk]:
                raise SdpFormatError(f"objective entry ({p},{q}) invalid")
        for row, k, _ in self.free_entries:
            if not (0 <= row < m and 0 <= k < self.n_free):
                raise SdpFormatError("free-variable entry out of range")
        if self.c_free.shape != (self.n_free,):
            raise SdpFormatError("c_free has wrong length")

    # -- dense/sparse operators --------------------------------------------
    def operators(self):
        """Per-block sparse constraint matrices over vec(X) and dense C."""
        m = self.m
        rows = [[] for _ in self.blocks]
        cols = [[] for _ in self.blocks]
        vals = [[] for _ in self.blocks]
        for row, blk, p, q, v in self.entries:
            n = self.blocks[blk]
            if p == q:
                rows[blk].append(row)
                cols[blk].append(p * n + q)
                vals[blk].append(v)
            else:
                rows[blk] += [row, row]
                cols[blk] += [p * n + q, q * n + p]
                vals[blk] += [0.5 * v, 0.5 * v]
        A = [
            sp.csr_matrix((vals[j], (rows[j], cols[j])), shape=(m, n * n)) for j, n in enumerate(self.blocks)
        ]
        C = [np.zeros((n, n)) for n in self.blocks]
        for blk, p, q, v in self.objective:
            if p == q:
                C[blk][p, p] += v
            else:
                C[blk][p, q] += 0.5 * v
                C[blk][q, p] += 0.5 * v
        F = np.zeros((m, self.n_free))
        for row, k, v in self.free_entries:
            F[row, k] += v
        return A, C, F

    # -- text dump ----------------------------------------------------------
    def dumps(self) -> str:
        """Plain-text sparse format.

        Lines: ``blocks n1 n2 ...``, ``free k``, ``rows m``, then ``b i value``,
        ``c blk p q value``, ``cf k value``, ``a row blk p q value``,
        ``f row k value``.  Block and row indices are zero-based.
        """
        out = ["blocks " + " ".join(str(n) for n in self.blocks), f"free {self.n_free}", f"rows {self.m}"]
        out += [f"b {i} {float(v)!r}" for i, v in enumerate(self.b) if v != 0.0]
        out += [f"c {blk} {p} {q} {float(v)!r}" for blk, p, q, v in self.objective]
        out += [f"cf {k} {float(v)!r}" for k, v in enumerate(self.c_free) if v != 0.0]
        out += [f"a {r} {blk} {p} {q} {float(v)!r}" for r, blk, p, q, v in self.entries]
        out += [f"f {r} {k} {float(v)!r}" for r, k, v in self.free_entries]
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SdpProblem":
        blocks = None
        n_free = 0
        m = None
        b_items, obj, cf_items, ent, fent = [], [], [], [], []
        for ln, line in enumerate(text.splitlines(), 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                kind = tok[0]
                if kind == "blocks":
                    blocks = [int(t) for t in tok[1:]]
                elif kind == "free":
                    n_free = int(tok[1])
                elif kind == "rows":
                    m = int(tok[1])
                elif kind == "b":
                    b_items.append((int(tok[1]), float(tok[2])))
                elif kind == "c":
                    obj.append((int(tok[1]), int(tok[2]), int(tok[3]), float(tok[4])))
                elif kind == "cf":
                    cf_items.append((int(tok[1]), float(tok[2])))
                elif kind == "a":
                    ent.append((int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4]), float(tok[5])))
                elif kind == "f":
                    fent.append((int(tok[1]), int(tok[2]), float(tok[3])))
                else:
                    raise SdpFormatError(f"line {ln}: unknown record '{kind}'")
            except (IndexError, ValueError) as exc:
                raise SdpFormatError(f"line {ln}: {exc}") from exc
        if blocks is None or m is None:
            raise SdpFormatError("missing 'blocks' or 'rows' header")
        b = np.zeros(m)
        for i, v in b_items:
            b[i] = v
        cfree = np.zeros(n_free)
        for k, v in cf_items:
            cfree[k] = v
        return cls(blocks=blocks, b=b, entries=ent, objective=obj, n_free=n_free, free_entries=fent, c_free=cfree)


@dataclass
class SdpSolution:
    status: SdpStatus
    X: list
    S: list
    y: np.ndarray
    w: np.ndarray
    primal_objective: float
    dual_objective: float
    primal_infeasibility: float
    dual_infeasibility: float
    duality_gap: float
    iterations: int
    infeasible_side: str | None = None
    history: list = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status is SdpStatus.OPTIMAL

    @property
    def objective(self) -> float:
        return self.primal_objective


# ---------------------------------------------------------------------------


def _vec(X):
    return X.reshape(-1)


def _mat(v, n):
    return v.reshape(n, n)


def _sym(X):
    return 0.5 * (X + X.T)


def _max_step(X_chol, dX) -> float:
    """Largest a with X + a dX PSD (inf if dX PSD)."""
    Linv_dX = sla.solve_triangular(X_chol, dX, lower=True)
    T = sla.solve_triangular(X_chol, Linv_dX.T, lower=True)
    lam = np.linalg.eigvalsh(_sym(T)).min()
    if lam >= 0:
        return np.inf
    return -1.0 / lam


class _Ops:
    """Constraint map restricted to the rows orthogonal to the free columns.

    With ``P`` (orthonormal columns) the reduced map is ``P^T A(X)``; without
    free variables ``P`` is None and the map is ``A(X)`` itself.
    """

    def __init__(self, A, blocks, P):
        self.A = A
        self.blocks = blocks
        self.P = P
        self.m_full = A[0].shape[0] if A else 0

    @property
    def m(self) -> int:
        return self.m_full if self.P is None else self.P.shape[1]

    def apply_full(self, X):
        out = np.zeros(self.m_full)
        for Aj, Xj in zip(self.A, X):
            out += Aj @ _vec(Xj)
        return out

    def apply(self, X):
        out = self.apply_full(X)
        return out if self.P is None else self.P.T @ out

    def adjoint_full(self, y):
        return [_sym(_mat(Aj.T @ y, n)) for Aj, n in zip(self.A, self.blocks)]

    def adjoint(self, y):
        return self.adjoint_full(y if self.P is None else self.P @ y)

    def schur_factor(self, G):
        """Rows ``vec(G^T A_i G)`` so that the Schur complement is ``K K^T``."""
        parts = []
        for Aj, Gj in zip(self.A, G):
            parts.append(np.asarray((Aj @ sp.csr_matrix(np.kron(Gj, Gj))).todense()))
        K = np.hstack(parts) if parts else np.zeros((self.m_full, 0))
        if self.P is not None:
            K = self.P.T @ K
        return K


@dataclass
class _FreeElimination:
    """Split the rows into the range of F (which fixes w) and its complement."""

    P: np.ndarray | None
    U1: np.ndarray
    s: np.ndarray
    V1: np.ndarray
    z: np.ndarray
    unbounded: bool

    @classmethod
    def build(cls, F, cf):
        m, nf = F.shape
        if nf == 0:
            return cls(None, np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0)), np.zeros(m), False)
        U, s, Vt = np.linalg.svd(F, full_matrices=True)
        r = int(np.count_nonzero(s > FREE_RANK_TOL * max(s.max(initial=0.0), 1e-300) * max(m, nf)))
        U1, V1, s = U[:, :r], Vt[:r].T, s[:r]
        # cost along free directions the constraints never see makes the problem unbounded
        resid = cf - V1 @ (V1.T @ cf)
        unbounded = np.linalg.norm(resid) > 1e-9 * (1.0 + np.linalg.norm(cf))
        z = U1 @ ((V1.T @ cf) / s)
        return cls(U[:, r:], U1, s, V1, z, unbounded)

    def free_values(self, b, AX):
        if self.V1.size == 0:
            return np.zeros(self.V1.shape[0])
        return self.V1 @ ((self.U1.T @ (b - AX)) / self.s)


def solve_sdp(p: SdpProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
              verbose: bool = False) -> SdpSolution:
    """Solve ``p`` to relative KKT tolerance ``tol``.

    Free variables are eliminated before the interior-point loop: the rows
    spanned by their columns determine ``w`` from ``X``, the remaining rows
    constrain ``X`` alone, and the free cost is folded into ``C``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    A, C, F = p.operators()
    blocks = list(p.blocks)
    m = p.m
    nf = p.n_free
    b = p.b.copy()
    cf = p.c_free.copy()

    zero_rows = _zero_rows(A, F, m)
    if np.any(np.abs(b[zero_rows]) > 0):
        return _trivially_infeasible(p, blocks, m, nf)
    # Ruiz-style equilibration of rows, Gram indices and free columns
    A, F, R, D, E = _equilibrate(A, F, blocks)
    b = b * R
    C = [Dj[:, None] * Cj * Dj[None, :] for Cj, Dj in zip(C, D)]
    cf = cf * E

    elim = _FreeElimination.build(F, cf)
    ops = _Ops(A, blocks, elim.P)
    zA = ops.adjoint_full(elim.z)
    Cr = [Cj - Zj for Cj, Zj in zip(C, zA)]
    br = b if elim.P is None else elim.P.T @ b
    c_shift = float(elim.z @ b)
    mr = ops.m

    n_tot = sum(blocks)
    norm_b = np.linalg.norm(br)
    norm_c = np.sqrt(sum(np.sum(Cj * Cj) for Cj in Cr))

    # identity-scaled start
    scale_p = max(10.0, np.sqrt(max(blocks, default=1)), norm_b)
    scale_d = max(10.0, np.sqrt(max(blocks, default=1)), norm_c)
    X = [scale_p * np.eye(n) for n in blocks]
    S = [scale_d * np.eye(n) for n in blocks]
    y = np.zeros(mr)

    history = []
    status = SdpStatus.MAX_ITERATIONS
    infeasible_side = None
    best_res = np.inf
    best = None
    stall = 0
    it = 0
    if elim.unbounded:
        status, infeasible_side = SdpStatus.INFEASIBLE, "dual"
        max_iters = -1
    for it in range(max_iters + 1):
        rp = br - ops.apply(X)
        ATy = ops.adjoint(y)
        rd = [Cj - Sj - Aty for Cj, Sj, Aty in zip(Cr, S, ATy)]
        pobj = sum(np.sum(Cj * Xj) for Cj, Xj in zip(Cr, X)) + c_shift
        dobj = br @ y + c_shift
        xs = sum(np.sum(Xj * Sj) for Xj, Sj in zip(X, S))
        mu = xs / max(n_tot, 1)
        pinf = np.linalg.norm(rp) / (1.0 + norm_b)
        dinf = np.sqrt(sum(np.sum(r * r) for r in rd)) / (1.0 + norm_c)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        history.append(dict(iter=it, pobj=pobj, dobj=dobj, pinf=pinf, dinf=dinf, gap=gap, xs=xs))
        if verbose:
            logger.info("it %3d pobj %+.8e dobj %+.8e pinf %.1e dinf %.1e gap %.1e", it, pobj, dobj, pinf, dinf, gap)
        if pinf <= tol and dinf <= tol and gap <= tol and xs / (1.0 + abs(pobj) + abs(dobj)) <= 10 * tol:
            status = SdpStatus.OPTIMAL
            break
        # infeasibility certificates (normalised rays)
        by = br @ y
        if by > 0:
            ray_res = np.sqrt(sum(np.sum((Cj - r) ** 2) for Cj, r in zip(Cr, rd))) / by
            if ray_res <= tol and by > 1.0 / tol ** 0.5:
                status, infeasible_side = SdpStatus.INFEASIBLE, "primal"
                break
        cx = pobj - c_shift
        if cx < 0:
            ray_res = np.linalg.norm(br - rp) / (-cx)
            if ray_res <= tol and -cx > 1.0 / tol ** 0.5:
                status, infeasible_side = SdpStatus.INFEASIBLE, "dual"
                break
        res = max(pinf, dinf, gap)
        if best is None or res < best[0]:
            best = (res, it, [Xj.copy() for Xj in X], y.copy(), [Sj.copy() for Sj in S])
        if res < 0.9 * best_res:
            best_res = res
            stall = 0
        else:
            stall += 1
            if stall >= 15:
                status = SdpStatus.MAX_ITERATIONS
                break
        if it == max_iters:
            break

        try:
            Lx = [np.linalg.cholesky(Xj) for Xj in X]
            Ls = [np.linalg.cholesky(Sj) for Sj in S]
        except np.linalg.LinAlgError:
            status = SdpStatus.NUMERICAL_FAILURE
            break
        G, lam, W = [], [], []
        for lx, ls in zip(Lx, Ls):
            U, d, Vt = np.linalg.svd(ls.T @ lx)
            g = lx @ Vt.T / np.sqrt(d)
            G.append(g)
            lam.append(d)
            W.append(g @ g.T)

        try:
            solver = _SchurSolver(ops.schur_factor(G))
        except np.linalg.LinAlgError:
            status = SdpStatus.NUMERICAL_FAILURE
            break

        def direction(Rc):
            WrdW = [Wj @ rdj @ Wj for Wj, rdj in zip(W, rd)]
            h = rp - ops.apply([R - Q for R, Q in zip(Rc, WrdW)])
            dy = solver.solve(h)
            ATdy = ops.adjoint(dy)
            dS = [rdj - a for rdj, a in zip(rd, ATdy)]
            dX = [_sym(R - Wj @ dSj @ Wj) for R, Wj, dSj in zip(Rc, W, dS)]
            if verbose:
                logger.info("   dir res %.2e schur res %.2e cond %.1e", np.linalg.norm(ops.apply(dX) - rp) / (1e-300 + np.linalg.norm(rp)),
                            np.linalg.norm(solver.apply(dy) - h) / np.linalg.norm(h), 0.0)
            return dX, dy, dS

        # predictor
        dXa, dya, dSa = direction([-Xj for Xj in X])
        ap = min(1.0, min(_max_step(l, d) for l, d in zip(Lx, dXa)))
        ad = min(1.0, min(_max_step(l, d) for l, d in zip(Ls, dSa)))
        xs_aff = sum(np.sum((Xj + ap * dx) * (Sj + ad * ds)) for Xj, dx, Sj, ds in zip(X, dXa, S, dSa))
        sigma = min(1.0, max(0.0, (xs_aff / max(xs, 1e-300)) ** 3))

        # corrector
        Rc = []
        for g, l, dx, ds in zip(G, lam, dXa, dSa):
            gi = np.linalg.inv(g)
            dxt = gi @ dx @ gi.T
            dst = g.T @ ds @ g
            H = sigma * mu * np.eye(len(l)) - np.diag(l * l) - _sym(dxt @ dst)
            T = 2.0 * H / (l[:, None] + l[None, :])
            Rc.append(_sym(g @ T @ g.T))
        dX, dy, dS = direction(Rc)
        ap = min(_max_step(l, d) for l, d in zip(Lx, dX))
        ad = min(_max_step(l, d) for l, d in zip(Ls, dS))
        step = 0.98 if it > 3 else 0.9
        ap = min(1.0, step * ap)
        ad = min(1.0, step * ad)
        if verbose:
            logger.info("   sigma %.2e ap %.3f ad %.3f mu %.2e", sigma, ap, ad, mu)
        X = [_sym(Xj + ap * d) for Xj, d in zip(X, dX)]
        y = y + ad * dy
        S = [_sym(Sj + ad * d) for Sj, d in zip(S, dS)]

    if status in (SdpStatus.MAX_ITERATIONS, SdpStatus.NUMERICAL_FAILURE) and best is not None:
        # report the iterate with the smallest residuals, not the last one
        _, it_used, X, y, S = best
    else:
        it_used = len(history) - 1
    AX = ops.apply_full(X)
    w = elim.free_values(b, AX) * E
    y_out = (elim.z + (y if elim.P is None else elim.P @ y)) * R
    X = [Dj[:, None] * Xj * Dj[None, :] for Xj, Dj in zip(X, D)]
    S = [Sj / Dj[:, None] / Dj[None, :] for Sj, Dj in zip(S, D)]
    C0 = p.operators()[1]
    pobj = sum(np.sum(Cj * Xj) for Cj, Xj in zip(C0, X)) + p.c_free @ w
    dobj = p.b @ y_out
    rp = p.b - _unscaled_apply(p, X, w)
    return SdpSolution(
        status=status,
        X=X,
        S=S,
        y=y_out,
        w=w,
        primal_objective=float(pobj),
        dual_objective=float(dobj),
        primal_infeasibility=float(np.linalg.norm(rp) / (1.0 + np.linalg.norm(p.b))),
        dual_infeasibility=float(history[it_used]["dinf"]) if history else float("nan"),
        duality_gap=float(abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))),
        iterations=it,
        infeasible_side=infeasible_side,
        history=history,
    )


def _zero_rows(A, F, m):
    nnz = np.zeros(m)
    for Aj in A:
        nnz += np.asarray(abs(Aj).sum(axis=1)).ravel()
    nnz += np.abs(F).sum(axis=1)
    return np.nonzero(nnz == 0)[0]


def _equilibrate(A, F, blocks, passes: int = 12):
    """Scale rows by R, block indices by D_j and free columns by E.

    The scaled problem has ``A'_j[i, (p, q)] = R_i A_j[i, (p, q)] D_p D_q`` and
    ``F'[i, k] = R_i F[i, k] E_k``; each pass divides by the square root of the
    current largest magnitude so every row and column tends to unit max-norm.
    """
    m = F.shape[0]
    R = np.ones(m)
    D = [np.ones(n) for n in blocks]
    E = np.ones(F.shape[1])
    A = [sp.csr_matrix(Aj) for Aj in A]
    F = F.copy()
    for _ in range(passes):
        rmax = np.zeros(m)
        for Aj in A:
            if Aj.nnz:
                rmax = np.maximum(rmax, abs(Aj).max(axis=1).toarray().ravel())
        if F.size:
            rmax = np.maximum(rmax, np.abs(F).max(axis=1))
        r = np.where(rmax > 0, 1.0 / np.sqrt(np.where(rmax > 0, rmax, 1.0)), 1.0)
        R *= r
        F = r[:, None] * F
        newA = []
        for j, (Aj, n) in enumerate(zip(A, blocks)):
            Aj = sp.csr_matrix(sp.diags(r) @ Aj)
            cmax = abs(Aj).max(axis=0).toarray().ravel().reshape(n, n) if Aj.nnz else np.zeros((n, n))
            cmax = np.maximum(cmax, cmax.T).max(axis=1)
            d = np.where(cmax > 0, 1.0 / np.sqrt(np.sqrt(np.where(cmax > 0, cmax, 1.0))), 1.0)
            D[j] *= d
            newA.append(sp.csr_matrix(Aj @ sp.diags(np.kron(d, d))))
        A = newA
        if F.size:
            fmax = np.abs(F).max(axis=0)
            e = np.where(fmax > 0, 1.0 / np.sqrt(np.where(fmax > 0, fmax, 1.0)), 1.0)
            E *= e
            F = F * e[None, :]
    return A, F, R, D, E


def _unscaled_apply(p: SdpProblem, X, w):
    out = np.zeros(p.m)
    for row, blk, i, j, v in p.entries:
        out[row] += v * X[blk][i, j]
    for row, k, v in p.free_entries:
        out[row] += v * w[k]
    return out


def _trivially_infeasible(p, blocks, m, nf):
    return SdpSolution(
        status=SdpStatus.INFEASIBLE,
        X=[np.zeros((n, n)) for n in blocks],
        S=[np.zeros((n, n)) for n in blocks],
        y=np.zeros(m),
        w=np.zeros(nf),
        primal_objective=np.nan,
        dual_objective=np.nan,
        primal_infeasibility=np.inf,
        dual_infeasibility=np.nan,
        duality_gap=np.nan,
        iterations=0,
        infeasible_side="primal",
    )


class _SchurSolver:
    """Solve ``K K^T dy = h`` without forming the Schur complement.

    The triangular factor comes from a QR factorisation of the Jacobi-scaled
    ``K^T`` stacked on a small multiple of the identity (the static
    regularisation); iterative refinement then runs against the exact
    ``K K^T`` until the residual stops shrinking.
    """

    def __init__(self, K, refine: int = 30):
        self.K = K
        self.refine = refine
        m = K.shape[0]
        self.empty = m == 0
        if not self.empty:
            rn = np.linalg.norm(K, axis=1)
            self.d = np.where(rn > 0, 1.0 / np.where(rn > 0, rn, 1.0), 1.0)
            stacked = np.vstack([(self.d[:, None] * K).T, np.sqrt(SCHUR_REG) * np.eye(m)])
            self.R = np.linalg.qr(stacked, mode="r")
            if not np.all(np.isfinite(self.R)):
                raise np.linalg.LinAlgError("non-finite Schur factor")

    def apply(self, v):
        return self.K @ (self.K.T @ v)

    def solve(self, h):
        if self.empty:
            return np.zeros(0)
        dy = self._inv(h)
        r = h - self.apply(dy)
        rn = np.linalg.norm(r)
        hn = np.linalg.norm(h)
        for _ in range(self.refine):
            if rn <= 1e-15 * hn:
                break
            cand = dy + self._inv(r)
            rc = h - self.apply(cand)
            rcn = np.linalg.norm(rc)
            if rcn >= 0.9 * rn:
                if rcn < rn:
                    dy = cand
                break
            dy, r, rn = cand, rc, rcn
        return dy

    def _inv(self, h):
        z = sla.solve_triangular(self.R, self.d * h, trans="T", check_finite=False)
        return self.d * sla.solve_triangular(self.R, z, check_finite=False)
