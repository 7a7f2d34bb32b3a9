"""Compile sum-of-squares constraints into block SDPs.

Expressions are polynomials whose coefficients are affine in the decision
variables.  A decision variable is either a free scalar or an entry of a
Gram matrix owned by an SOS-typed decision polynomial.  Each membership
constraint ``expr in Sigma`` (or ``-expr in Sigma``) gets its own Gram block
and one coefficient-matching equality per monomial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .poly import AffineSubstitution, GramForm, Polynomial, mono_basis, mono_key, mono_mul
from .sdp import SdpProblem, SdpSolution

CONST = ("c",)


class SosCompileError(ValueError):
    pass


class BilinearError(SosCompileError):
    """Raised when two decision-dependent expressions are multiplied."""


def _free(k: int):
    return ("w", k)


def _gram(blk: int, p: int, q: int):
    return ("X", blk, min(p, q), max(p, q))


class LinPoly:
    """Polynomial with coefficients affine in decision variables.

    ``terms`` maps monomial -> {key: coeff}, where key is ``CONST``,
    ``("w", k)`` (free scalar k) or ``("X", blk, p, q)`` (Gram entry, p <= q,
    standing for ``X[p, q] + X[q, p]`` when p != q and ``X[p, p]`` otherwise).
    """

    __slots__ = ("n_vars", "terms")

    def __init__(self, terms=None, n_vars: int = 8):
        self.n_vars = n_vars
        self.terms = {}
        for m, row in (terms or {}).items():
            clean = {k: v for k, v in row.items() if v != 0.0}
            if clean:
                self.terms[tuple(m)] = clean

    @classmethod
    def from_poly(cls, p: Polynomial) -> "LinPoly":
        return cls({m: {CONST: c} for m, c in p.items()}, p.n_vars)

    def is_constant(self) -> bool:
        return all(set(row) <= {CONST} for row in self.terms.values())

    def support(self) -> list:
        return sorted(self.terms, key=mono_key)

    def degree(self) -> int:
        return max((sum(m) for m in self.terms), default=0)

    def keys(self) -> set:
        out = set()
        for row in self.terms.values():
            out |= set(row)
        out.discard(CONST)
        return out

    def __add__(self, other):
        other = _as_lin(other, self.n_vars)
        t = {m: dict(r) for m, r in self.terms.items()}
        for m, row in other.terms.items():
            dst = t.setdefault(m, {})
            for k, v in row.items():
                dst[k] = dst.get(k, 0.0) + v
        return LinPoly(t, self.n_vars)

    __radd__ = __add__

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-_as_lin(other, self.n_vars))

    def __rsub__(self, other):
        return _as_lin(other, self.n_vars) - self

    def scale(self, c: float) -> "LinPoly":
        return LinPoly({m: {k: c * v for k, v in r.items()} for m, r in self.terms.items()}, self.n_vars)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return self.scale(float(other))
        if isinstance(other, LinPoly):
            if other.is_constant():
                other = other.to_poly({})
            elif self.is_constant():
                return other * self.to_poly({})
            else:
                raise BilinearError("product of two decision-dependent expressions")
        if not isinstance(other, Polynomial):
            return NotImplemented
        t: dict = {}
        for m1, row in self.terms.items():
            for m2, c in other.items():
                m = mono_mul(m1, m2)
                dst = t.setdefault(m, {})
                for k, v in row.items():
                    dst[k] = dst.get(k, 0.0) + v * c
        return LinPoly(t, self.n_vars)

    __rmul__ = __mul__

    def differentiate(self, v: int) -> "LinPoly":
        t: dict = {}
        for m, row in self.terms.items():
            e = m[v]
            if e:
                nm = list(m)
                nm[v] -= 1
                nm = tuple(nm)
                dst = t.setdefault(nm, {})
                for k, c in row.items():
                    dst[k] = dst.get(k, 0.0) + c * e
        return LinPoly(t, self.n_vars)

    def to_poly(self, values) -> Polynomial:
        """Instantiate with decision values (callable or mapping key -> value)."""
        get = values if callable(values) else (lambda k: values[k])
        out = {}
        for m, row in self.terms.items():
            s = 0.0
            for k, v in row.items():
                s += v if k == CONST else v * get(k)
            out[m] = s
        return Polynomial(out, self.n_vars)

    def max_abs_coeff(self) -> float:
        return max((abs(v) for row in self.terms.values() for v in row.values()), default=0.0)

    def substitute_affine(self, sub: AffineSubstitution) -> "LinPoly":
        t: dict = {}
        for m, row in self.terms.items():
            for m2, c2 in sub.image(m).items():
                dst = t.setdefault(m2, {})
                for k, v in row.items():
                    dst[k] = dst.get(k, 0.0) + v * c2
        return LinPoly(t, sub.n_out)


def _as_lin(x, n_vars):
    if isinstance(x, LinPoly):
        return x
    if isinstance(x, Polynomial):
        return LinPoly.from_poly(x)
    if isinstance(x, (int, float, np.floating)):
        return LinPoly.from_poly(Polynomial.constant(float(x), n_vars))
    raise TypeError(f"cannot treat {type(x).__name__} as a polynomial expression")


@dataclass
class DecisionPoly:
    """Polynomial template whose coefficients are decisions or fixed values."""

    name: str
    basis: tuple
    keys: tuple  # per basis monomial: decision key or None when fixed
    fixed: dict = field(default_factory=dict)  # monomial -> value for fixed coefficients
    kind: str = "free"  # "free" or "sos"
    gram_block: int | None = None
    gram_basis: tuple | None = None

    def expr(self, n_vars: int = 8) -> LinPoly:
        if self.kind == "sos":
            return _gram_lin(self.gram_block, self.gram_basis, n_vars)
        t: dict = {}
        for m, k in zip(self.basis, self.keys):
            if k is None:
                t.setdefault(m, {})[CONST] = self.fixed.get(m, 0.0)
            else:
                t.setdefault(m, {})[k] = 1.0
        return LinPoly(t, n_vars)


def _gram_lin(blk: int, basis: Sequence, n_vars: int) -> LinPoly:
    t: dict = {}
    for p, mp in enumerate(basis):
        for q in range(p, len(basis)):
            m = mono_mul(mp, basis[q])
            t.setdefault(m, {})[_gram(blk, p, q)] = 1.0
    return LinPoly(t, n_vars)


@dataclass
class SosConstraintSpec:
    name: str
    expression: LinPoly
    kind: str = "SOS"  # or "SOS_negated"
    basis: tuple | None = None
    margin_key: tuple | None = None
    use_coords: bool = True  # False keeps this constraint in the original variables

    def __post_init__(self):
        if self.kind not in ("SOS", "SOS_negated"):
            raise ValueError(f"unknown constraint kind {self.kind}")


def newton_half_basis(support: Iterable, n_vars: int) -> list:
    """Monomials m with 2m in the convex hull of ``support``."""
    pts = np.array(sorted(set(map(tuple, support)), key=mono_key), dtype=float)
    if pts.size == 0:
        return []
    degs = pts.sum(axis=1)
    lo = int(np.ceil(degs.min() / 2))
    hi = int(np.floor(degs.max() / 2))
    maxe = pts.max(axis=0)
    mine = pts.min(axis=0)
    cands = [m for m in mono_basis(n_vars, hi) if sum(m) >= lo]
    out = []
    for m in cands:
        two = 2 * np.array(m, dtype=float)
        if np.any(two > maxe) or np.any(two < mine):
            continue
        if any(np.array_equal(two, p) for p in pts):
            out.append(m)
            continue
        # convex combination feasibility LP
        n = len(pts)
        A_eq = np.vstack([pts.T, np.ones((1, n))])
        b_eq = np.concatenate([two, [1.0]])
        res = linprog(np.zeros(n), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if res.status == 0:
            out.append(m)
    return sorted(out, key=mono_key)


@dataclass
class HandleMap:
    n_vars: int
    decisions: dict  # name -> DecisionPoly
    constraints: list  # (spec, block index, basis, scale, back-map or None)
    n_blocks: int
    image: "_ImageData | None" = None

    def value(self, sol: SdpSolution, key) -> float:
        if key == CONST:
            return 1.0
        if self.image is not None:
            return self.image.value(sol, key)
        if key[0] == "w":
            return float(sol.w[key[1]])
        _, blk, p, q = key
        return float(sol.X[blk][p, q]) * (2.0 if p != q else 1.0)

    def evaluate(self, sol: SdpSolution, expr) -> Polynomial:
        """Substitute the solved decision values into any expression."""
        return _as_lin(expr, self.n_vars).to_poly(lambda k: self.value(sol, k))

    def poly(self, sol: SdpSolution, name: str) -> Polynomial:
        d = self.decisions[name]
        return d.expr(self.n_vars).to_poly(lambda k: self.value(sol, k))

    def gram(self, sol: SdpSolution, name: str) -> GramForm:
        """Gram form of an SOS decision polynomial or of a constraint."""
        if name in self.decisions:
            d = self.decisions[name]
            if d.kind != "sos":
                raise KeyError(f"{name} is not SOS-typed")
            if self.image is not None:
                return GramForm(d.gram_basis, self.image.decision_gram(sol, d.gram_block))
            return GramForm(d.gram_basis, sol.X[d.gram_block])
        for idx, (spec, blk, basis, scale, back) in enumerate(self.constraints):
            if spec.name == name:
                if blk is None:
                    Q = np.zeros((0, 0))
                elif self.image is not None:
                    Q = scale * self.image.constraint_gram(sol, idx)
                else:
                    Q = scale * sol.X[blk]
                if back is None:
                    return GramForm(basis, Q)
                x_basis, M = back
                return GramForm(x_basis, M.T @ Q @ M)
        raise KeyError(name)

    def instantiated(self, sol: SdpSolution, name: str) -> Polynomial:
        """The constraint expression with decisions substituted, signed so it should be SOS."""
        for spec, blk, basis, scale, _ in self.constraints:
            if spec.name == name:
                p = spec.expression.to_poly(lambda k: self.value(sol, k))
                return -p if spec.kind == "SOS_negated" else p
        raise KeyError(name)


class _AffineMatrix:
    """Symmetric ``Q0 + sum_k z_k Q_k`` with sparse upper-triangle coefficients."""

    def __init__(self, n: int):
        self.n = n
        self.const = np.zeros((n, n))
        self.coef: dict = {}  # k -> {(p, q): a} with p <= q

    def add(self, p: int, q: int, k, a: float):
        p, q = min(p, q), max(p, q)
        if k is None:
            self.const[p, q] += a
            if p != q:
                self.const[q, p] += a
            return
        row = self.coef.setdefault(k, {})
        row[(p, q)] = row.get((p, q), 0.0) + a

    def at(self, z: np.ndarray) -> np.ndarray:
        Q = self.const.copy()
        for k, row in self.coef.items():
            for (p, q), a in row.items():
                Q[p, q] += a * z[k]
                if p != q:
                    Q[q, p] += a * z[k]
        return Q


@dataclass
class _ImageData:
    index: dict  # decision key -> position in z
    z0: np.ndarray
    N: np.ndarray  # z = z0 + N y
    constraint_mats: dict  # constraint position -> _AffineMatrix
    decision_mats: dict  # SOS decision block -> _AffineMatrix

    def z(self, sol: SdpSolution) -> np.ndarray:
        return self.z0 + self.N @ sol.y

    def value(self, sol: SdpSolution, key) -> float:
        k = self.index[key]
        v = float(self.z(sol)[k])
        if key[0] == "X" and key[2] != key[3]:
            return 2.0 * v
        return v

    def constraint_gram(self, sol, idx):
        return self.constraint_mats[idx].at(self.z(sol))

    def decision_gram(self, sol, blk):
        return self.decision_mats[blk].at(self.z(sol))


class SosProgram:
    """Builder for an SOS feasibility/optimisation problem."""

    def __init__(self, n_vars: int = 8):
        self.n_vars = n_vars
        self.decisions: dict = {}
        self.constraints: list = []
        self.equalities: list = []  # (LinPoly constant-only expression, rhs)
        self.objective = LinPoly({}, n_vars)  # constant polynomial; minimised
        self._n_free = 0
        self._sos_blocks: list = []  # gram basis per decision SOS block

    # decisions --------------------------------------------------------------
    def _new_free(self) -> tuple:
        k = self._n_free
        self._n_free += 1
        return _free(k)

    def free_scalar(self, name: str) -> LinPoly:
        d = self.free_poly(name, [(0,) * self.n_vars])
        return d

    def free_poly(self, name: str, basis: Sequence, fixed: dict | None = None) -> LinPoly:
        if name in self.decisions:
            raise ValueError(f"duplicate decision {name}")
        fixed = dict(fixed or {})
        basis = tuple(tuple(m) for m in basis)
        keys = tuple(None if m in fixed else self._new_free() for m in basis)
        d = DecisionPoly(name, basis, keys, fixed)
        self.decisions[name] = d
        return d.expr(self.n_vars)

    def sos_poly(self, name: str, half_basis: Sequence) -> LinPoly:
        if name in self.decisions:
            raise ValueError(f"duplicate decision {name}")
        hb = tuple(tuple(m) for m in half_basis)
        if not hb:
            raise SosCompileError(f"empty Gram basis for {name}")
        blk = len(self._sos_blocks)
        self._sos_blocks.append(hb)
        d = DecisionPoly(name, (), (), kind="sos", gram_block=blk, gram_basis=hb)
        self.decisions[name] = d
        return d.expr(self.n_vars)

    # constraints ------------------------------------------------------------
    def add_sos(self, name: str, expr, kind: str = "SOS", basis: Sequence | None = None,
                use_coords: bool = True) -> SosConstraintSpec:
        spec = SosConstraintSpec(name, _as_lin(expr, self.n_vars), kind, None if basis is None else tuple(basis),
                                 use_coords=use_coords)
        self.constraints.append(spec)
        return spec

    def add_equality(self, expr: LinPoly, rhs: float = 0.0):
        """Linear equality on decisions: the constant coefficient of ``expr`` equals ``rhs``."""
        expr = _as_lin(expr, self.n_vars)
        if any(sum(m) for m in expr.terms):
            raise SosCompileError("equality expression must be a constant polynomial")
        self.equalities.append((expr, float(rhs)))

    def minimize(self, expr):
        self.objective = _as_lin(expr, self.n_vars)

    def maximize(self, expr):
        self.objective = -_as_lin(expr, self.n_vars)


def compile_program(prog: SosProgram, normalize: bool = True, coords=None, form: str = "image"):
    """Return (SdpProblem, HandleMap).

    ``form="image"`` writes every Gram matrix as an affine function of the
    decisions and hands the SDP solver the resulting linear matrix
    inequalities (decisions are the dual variables ``y``).  ``form="kernel"``
    gives each Gram matrix its own primal block tied to the decisions by one
    equality per monomial.  Both describe the same feasible set; the image
    form has far fewer equality rows for the quadratic certificates used here.

    ``coords = (T, shift)`` poses the constraint Gram matrices in the
    variables ``y`` of ``x = T y + shift`` (T invertible), which can balance
    badly scaled problems; reported constraint Grams are mapped back to ``x``.
    """
    if form == "image":
        return _compile_image(prog, normalize, coords)
    if form != "kernel":
        raise ValueError(f"unknown form {form}")
    return _compile_kernel(prog, normalize, coords)


def _substitutions(coords, n_vars):
    if coords is None:
        return None, None
    T, shift = coords
    T = np.asarray(T, dtype=float)
    shift = np.zeros(n_vars) if shift is None else np.asarray(shift, dtype=float)
    Tinv = np.linalg.inv(T)
    return AffineSubstitution(T, shift), AffineSubstitution(Tinv, -Tinv @ shift)


def _constraint_scale(expr: LinPoly, normalize: bool) -> float:
    if not normalize:
        return 1.0
    const_part = max((abs(r.get(CONST, 0.0)) for r in expr.terms.values()), default=0.0)
    return const_part if const_part > 0 else max(expr.max_abs_coeff(), 1.0)


def _compile_kernel(prog: SosProgram, normalize: bool, coords):
    n_vars = prog.n_vars
    sub, back_sub = _substitutions(coords, n_vars)
    blocks = [len(hb) for hb in prog._sos_blocks]
    entries: list = []
    free_entries: list = []
    b: list = []
    cons_meta = []
    row = 0

    def emit(coeffs: dict, rhs: float):
        nonlocal row
        for k, v in coeffs.items():
            if v == 0.0:
                continue
            if k[0] == "w":
                free_entries.append((row, k[1], v))
            else:
                _, blk, p, q = k
                entries.append((row, blk, p, q, v))
        b.append(rhs)
        row += 1

    for spec in prog.constraints:
        local = sub is not None and spec.use_coords
        expr = spec.expression.substitute_affine(sub) if local else spec.expression
        if expr.degree() % 2 == 1 and _top_has_decisions(expr):
            raise SosCompileError(f"constraint {spec.name}: odd-degree expression")
        basis = spec.basis if spec.basis is not None else tuple(newton_half_basis(expr.support(), n_vars))
        blk = len(blocks)
        scale = _constraint_scale(expr, normalize)
        sign = -1.0 if spec.kind == "SOS_negated" else 1.0
        if basis:
            blocks.append(len(basis))
            gl = _gram_lin(blk, basis, n_vars)
        else:
            gl = LinPoly({}, n_vars)
            blk = None
        back = _back_map(basis, back_sub, n_vars) if local else None
        cons_meta.append((spec, blk, tuple(basis), scale, back))
        # sign*expr/scale - gram = 0, per monomial
        monos = set(expr.terms) | set(gl.terms)
        for m in sorted(monos, key=mono_key):
            coeffs: dict = {}
            rhs = 0.0
            for k, v in expr.terms.get(m, {}).items():
                if k == CONST:
                    rhs -= sign * v / scale
                else:
                    coeffs[k] = coeffs.get(k, 0.0) + sign * v / scale
            for k, v in gl.terms.get(m, {}).items():
                coeffs[k] = coeffs.get(k, 0.0) - v
            emit(coeffs, rhs)
    for expr, rhs in prog.equalities:
        coeffs = {}
        c0 = 0.0
        for k, v in expr.terms.get((0,) * n_vars, {}).items():
            if k == CONST:
                c0 += v
            else:
                coeffs[k] = v
        emit(coeffs, rhs - c0)

    objective = []
    c_free = np.zeros(prog._n_free)
    for k, v in prog.objective.terms.get((0,) * n_vars, {}).items():
        if k == CONST:
            continue
        if k[0] == "w":
            c_free[k[1]] += v
        else:
            _, blk, p, q = k
            objective.append((blk, p, q, v))
    # Gram keys for off-diagonal entries stand for X[p,q] + X[q,p]; the SDP
    # convention "value * X[p,q]" (p<q) already counts one copy, so double it.
    entries = [(r, blk, p, q, v * (2.0 if p != q else 1.0)) for r, blk, p, q, v in entries]
    objective = [(blk, p, q, v * (2.0 if p != q else 1.0)) for blk, p, q, v in objective]
    sdp = SdpProblem(blocks=blocks, b=np.array(b), entries=_merge(entries), objective=objective,
                     n_free=prog._n_free, free_entries=free_entries, c_free=c_free)
    hmap = HandleMap(n_vars, dict(prog.decisions), cons_meta, len(blocks))
    return sdp, hmap


def _compile_image(prog: SosProgram, normalize: bool, coords):
    n_vars = prog.n_vars
    sub, back_sub = _substitutions(coords, n_vars)
    index: dict = {}

    def var(key) -> int:
        k = index.get(key)
        if k is None:
            k = index[key] = len(index)
        return k

    for j in range(prog._n_free):
        var(_free(j))
    decision_mats = {}
    for blk, hb in enumerate(prog._sos_blocks):
        A = _AffineMatrix(len(hb))
        for p in range(len(hb)):
            for q in range(p, len(hb)):
                A.add(p, q, var(_gram(blk, p, q)), 1.0)
        decision_mats[blk] = A

    def weight(key) -> float:
        # off-diagonal Gram keys stand for X[p, q] + X[q, p]
        return 2.0 if key[0] == "X" and key[2] != key[3] else 1.0

    eq_rows: list = []  # ({k: a}, rhs)
    constraint_mats = {}
    cons_meta = []
    lmi_blocks = []  # (_AffineMatrix)
    for ci, spec in enumerate(prog.constraints):
        local = sub is not None and spec.use_coords
        expr = spec.expression.substitute_affine(sub) if local else spec.expression
        if expr.degree() % 2 == 1 and _top_has_decisions(expr):
            raise SosCompileError(f"constraint {spec.name}: odd-degree expression")
        basis = spec.basis if spec.basis is not None else tuple(newton_half_basis(expr.support(), n_vars))
        scale = _constraint_scale(expr, normalize)
        sign = -1.0 if spec.kind == "SOS_negated" else 1.0
        pairs: dict = {}
        for p, mp in enumerate(basis):
            for q in range(p, len(basis)):
                pairs.setdefault(mono_mul(mp, basis[q]), []).append((p, q))
        A = _AffineMatrix(len(basis)) if basis else None
        for m in sorted(set(pairs) | set(expr.terms), key=mono_key):
            target = {}
            for k, v in expr.terms.get(m, {}).items():
                target[None if k == CONST else var(k)] = sign * v * (1.0 if k == CONST else weight(k)) / scale
            plist = pairs.get(m)
            if not plist:
                if any(v != 0.0 for v in target.values()):
                    eq_rows.append(({k: v for k, v in target.items() if k is not None}, -target.get(None, 0.0)))
                continue
            plist = sorted(plist, key=lambda pq: pq[0] != pq[1])
            (pc, qc), others = plist[0], plist[1:]
            wc = 1.0 if pc == qc else 2.0
            for j, (po, qo) in enumerate(others):
                lam = var(("N", ci, m, j))
                A.add(po, qo, lam, 1.0)
                A.add(pc, qc, lam, -(1.0 if po == qo else 2.0) / wc)
            for k, v in target.items():
                A.add(pc, qc, k, v / wc)
        blk = None
        if A is not None:
            blk = len(lmi_blocks)
            lmi_blocks.append(A)
            constraint_mats[ci] = A
        back = _back_map(basis, back_sub, n_vars) if local else None
        cons_meta.append((spec, blk, tuple(basis), scale, back))
    for expr, rhs in prog.equalities:
        row = {}
        c0 = 0.0
        for k, v in expr.terms.get((0,) * n_vars, {}).items():
            if k == CONST:
                c0 += v
            else:
                row[var(k)] = row.get(var(k), 0.0) + v * weight(k)
        eq_rows.append((row, rhs - c0))

    nz = len(index)
    cost = np.zeros(nz)
    for k, v in prog.objective.terms.get((0,) * n_vars, {}).items():
        if k != CONST:
            cost[var(k)] += v * weight(k)
    z0, N, consistent = _eliminate(eq_rows, nz)

    n_decision_blocks = len(prog._sos_blocks)
    all_mats = [decision_mats[b] for b in range(n_decision_blocks)] + lmi_blocks
    # remap constraint block numbers after the decision blocks
    cons_meta = [(spec, None if blk is None else blk + n_decision_blocks, basis, scale, back)
                 for spec, blk, basis, scale, back in cons_meta]
    entries = []
    objective = []
    for j, A in enumerate(all_mats):
        C = A.at(z0)
        for p in range(A.n):
            for q in range(p, A.n):
                if C[p, q] != 0.0:
                    objective.append((j, p, q, C[p, q] * (2.0 if p != q else 1.0)))
        for k, row in A.coef.items():
            nk = N[k]
            nzi = np.nonzero(nk)[0]
            for (p, q), a in row.items():
                f = -a * (2.0 if p != q else 1.0)
                for i in nzi:
                    entries.append((int(i), j, p, q, f * nk[i]))
    b = -(N.T @ cost)
    if not consistent:
        # no decision satisfies the linear equalities: an LMI that cannot hold
        all_mats = [None]
        entries, objective, b = [], [(0, 0, 0, -1.0)], np.zeros(0)
    sdp = SdpProblem(blocks=[1] if not consistent else [A.n for A in all_mats], b=b,
                     entries=_merge(entries), objective=objective)
    image = _ImageData(index, z0, N, constraint_mats, decision_mats)
    hmap = HandleMap(n_vars, dict(prog.decisions), cons_meta, len(sdp.blocks), image)
    return sdp, hmap


def _eliminate(rows, nz, tol: float = 1e-10):
    """Affine parametrisation ``z = z0 + N y`` of ``{z : E z = e}``.

    Column-pivoted QR picks basic variables; the remaining (nonbasic)
    decisions become ``y`` unchanged, which keeps ``N`` sparse.
    """
    if not rows:
        return np.zeros(nz), np.eye(nz), True
    E = np.zeros((len(rows), nz))
    e = np.zeros(len(rows))
    for r, (row, rhs) in enumerate(rows):
        for k, v in row.items():
            E[r, k] += v
        e[r] = rhs
    Q, R, piv = sla.qr(E, pivoting=True, mode="economic")
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > tol * max(diag.max(initial=0.0), 1.0)))
    qe = Q.T @ e
    basic, free = piv[:rank], piv[rank:]
    R11 = R[:rank, :rank]
    R12 = R[:rank, rank:]
    z0 = np.zeros(nz)
    N = np.zeros((nz, len(free)))
    if rank:
        z0[basic] = sla.solve_triangular(R11, qe[:rank])
        N[basic] = -sla.solve_triangular(R11, R12)
    N[free, np.arange(len(free))] = 1.0
    N[np.abs(N) < 1e-15] = 0.0
    consistent = bool(np.all(np.abs(E @ z0 - e) <= 1e-9 * (1.0 + np.abs(e).max(initial=0.0))))
    return z0, N, consistent


def _back_map(basis, back_sub: AffineSubstitution, n_vars: int):
    """Matrix M with z_y(y(x)) = M z_x(x) for the full x basis of equal degree."""
    deg = max((sum(m) for m in basis), default=0)
    x_basis = tuple(mono_basis(n_vars, deg))
    index = {m: k for k, m in enumerate(x_basis)}
    M = np.zeros((len(basis), len(x_basis)))
    for r, m in enumerate(basis):
        for mx, c in back_sub.image(m).items():
            M[r, index[mx]] += c
    return x_basis, M


def _merge(entries):
    acc: dict = {}
    for r, blk, p, q, v in entries:
        key = (r, blk, p, q)
        acc[key] = acc.get(key, 0.0) + v
    return [(r, blk, p, q, v) for (r, blk, p, q), v in acc.items() if v != 0.0]


def _top_has_decisions(expr: LinPoly) -> bool:
    d = expr.degree()
    return any(sum(m) == d and set(row) - {CONST} for m, row in expr.terms.items())


def putinar_encode(name: str, base, regions: Sequence, multipliers: Sequence) -> list:
    """Certificate that ``base <= 0`` wherever every region polynomial is >= 0.

    ``regions[i]`` is a polynomial ``g_i`` describing ``{g_i >= 0}`` (an
    equality-type region may also be passed with a free multiplier).
    ``multipliers[i]`` is ``(expr, is_sos)`` where ``expr`` is the multiplier
    as a LinPoly (already created on the program, SOS-typed ones through
    ``SosProgram.sos_poly``).  Returns the specs to add: the single
    ``base + sum_i m_i g_i in -Sigma`` constraint.  Membership of the
    SOS-typed multipliers holds by construction of their Gram blocks.
    """
    if len(regions) != len(multipliers):
        raise SosCompileError("multiplier/region arity mismatch")
    expr = _as_lin(base, _nvars_of(base))
    for g, (mult, _is_sos) in zip(regions, multipliers):
        if isinstance(g, LinPoly):
            if not _as_lin(mult, expr.n_vars).is_constant():
                raise BilinearError("decision multiplier times decision region polynomial")
            expr = expr + g * _as_lin(mult, expr.n_vars).to_poly({})
        elif isinstance(mult, LinPoly):
            expr = expr + mult * g
        else:
            expr = expr + LinPoly.from_poly(mult * g)
    return [SosConstraintSpec(name, expr, "SOS_negated")]


def _nvars_of(x) -> int:
    return getattr(x, "n_vars", 8)
