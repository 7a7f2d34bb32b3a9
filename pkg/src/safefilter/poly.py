"""Sparse multivariate polynomials over the 8-variable BESS state.

Variable order: 0..1 = i_d, i_q; 2..3 = v_PCCf_d, v_PCCf_q; 4..5 = i_r_d, i_r_q;
6..7 = v_PCC_d, v_PCC_q.  Monomials are exponent tuples; the canonical order is
graded lexicographic (total degree first, then x0 before x1 before ...).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb
from typing import Iterable, Mapping

import numpy as np

from ._accel import USE_NUMBA, njit

N_VARS = 8
STATE_NAMES = ("i_d", "i_q", "vf_d", "vf_q", "ir_d", "ir_q", "v_d", "v_q")

Monomial = tuple


def mono_key(m: Monomial):
    return (sum(m), tuple(-e for e in m))


def mono_degree(m: Monomial) -> int:
    return sum(m)


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


def unit(n_vars: int, i: int, power: int = 1) -> Monomial:
    e = [0] * n_vars
    e[i] = power
    return tuple(e)


def mono_basis(n_vars: int, max_degree: int) -> list:
    """All monomials of total degree <= max_degree, graded-lex ordered."""
    if max_degree < 0:
        return []
    out = []
    for deg in range(max_degree + 1):
        block = []
        for combo in combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for v in combo:
                e[v] += 1
            block.append(tuple(e))
        block.sort(key=mono_key)
        out.extend(block)
    assert len(out) == comb(n_vars + max_degree, max_degree)
    return out


class Polynomial:
    """Immutable sparse polynomial; ``terms`` maps exponent tuples to floats."""

    __slots__ = ("n_vars", "_terms", "_hash")

    def __init__(self, terms: Mapping[Monomial, float] | None = None, n_vars: int = N_VARS):
        self.n_vars = n_vars
        clean = {}
        for m, c in (terms or {}).items():
            m = tuple(int(e) for e in m)
            if len(m) != n_vars:
                raise ValueError(f"monomial {m} has wrong arity (expected {n_vars})")
            c = float(c)
            if c != 0.0:
                clean[m] = clean.get(m, 0.0) + c
                if clean[m] == 0.0:
                    del clean[m]
        self._terms = dict(sorted(clean.items(), key=lambda kv: mono_key(kv[0])))
        self._hash = None

    # -- construction -------------------------------------------------------
    @classmethod
    def constant(cls, c: float, n_vars: int = N_VARS) -> "Polynomial":
        return cls({(0,) * n_vars: c}, n_vars)

    @classmethod
    def var(cls, i: int, n_vars: int = N_VARS) -> "Polynomial":
        return cls({unit(n_vars, i): 1.0}, n_vars)

    @classmethod
    def zero(cls, n_vars: int = N_VARS) -> "Polynomial":
        return cls({}, n_vars)

    @classmethod
    def from_pairs(cls, pairs: Iterable, n_vars: int = N_VARS) -> "Polynomial":
        return cls({tuple(m): c for m, c in pairs}, n_vars)

    @classmethod
    def quadratic_form(cls, Q: np.ndarray, lin: np.ndarray | None = None, const: float = 0.0) -> "Polynomial":
        """x^T Q x + lin^T x + const."""
        n = Q.shape[0]
        terms: dict = {}
        for a in range(n):
            for b in range(n):
                if Q[a, b] != 0.0:
                    m = mono_mul(unit(n, a), unit(n, b))
                    terms[m] = terms.get(m, 0.0) + Q[a, b]
        if lin is not None:
            for a in range(n):
                if lin[a] != 0.0:
                    terms[unit(n, a)] = terms.get(unit(n, a), 0.0) + lin[a]
        if const:
            terms[(0,) * n] = terms.get((0,) * n, 0.0) + const
        return cls(terms, n)

    # -- access -------------------------------------------------------------
    @property
    def terms(self) -> dict:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def coeff(self, m: Monomial) -> float:
        return self._terms.get(tuple(m), 0.0)

    def degree(self) -> int:
        return max((sum(m) for m in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def __len__(self):
        return len(self._terms)

    def to_pairs(self) -> list:
        return [(m, c) for m, c in self._terms.items()]

    def arrays(self):
        """(exponents T x n int array, coefficients T float array)."""
        if not self._terms:
            return np.zeros((0, self.n_vars), dtype=np.int64), np.zeros(0)
        exps = np.array(list(self._terms.keys()), dtype=np.int64)
        coefs = np.array(list(self._terms.values()), dtype=float)
        return exps, coefs

    # -- arithmetic ---------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if other.n_vars != self.n_vars:
            raise ValueError("polynomials over different variable counts")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(float(other), self.n_vars)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        t = dict(self._terms)
        for m, c in other._terms.items():
            t[m] = t.get(m, 0.0) + c
        return Polynomial(t, self.n_vars)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial({m: -c for m, c in self._terms.items()}, self.n_vars)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        t: dict = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = mono_mul(m1, m2)
                t[m] = t.get(m, 0.0) + c1 * c2
        return Polynomial(t, self.n_vars)

    __rmul__ = __mul__

    def scale(self, c: float) -> "Polynomial":
        return Polynomial({m: c * v for m, v in self._terms.items()}, self.n_vars)

    def __pow__(self, k: int):
        out = Polynomial.constant(1.0, self.n_vars)
        for _ in range(k):
            out = out * self
        return out

    def differentiate(self, v: int) -> "Polynomial":
        t: dict = {}
        for m, c in self._terms.items():
            e = m[v]
            if e:
                nm = list(m)
                nm[v] = e - 1
                nm = tuple(nm)
                t[nm] = t.get(nm, 0.0) + c * e
        return Polynomial(t, self.n_vars)

    def gradient(self) -> list:
        return [self.differentiate(v) for v in range(self.n_vars)]

    def substitute_affine(self, T, shift=None) -> "Polynomial":
        """``p(T y + shift)`` as a polynomial in ``y``."""
        sub = AffineSubstitution(T, shift)
        t: dict = {}
        for m, c in self._terms.items():
            for m2, c2 in sub.image(m).items():
                t[m2] = t.get(m2, 0.0) + c * c2
        return Polynomial(t, sub.n_out)

    # -- evaluation ---------------------------------------------------------
    def eval(self, point) -> float:
        point = np.asarray(point, dtype=float)
        total = 0.0
        for m, c in self._terms.items():
            term = c
            for x, e in zip(point, m):
                if e:
                    term *= x**e
            total += term
        return float(total)

    __call__ = eval

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        exps, coefs = self.arrays()
        return eval_terms(exps, coefs, points)

    # -- comparison ---------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.n_vars == other.n_vars and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.n_vars, tuple(self._terms.items())))
        return self._hash

    def max_abs_diff(self, other: "Polynomial") -> float:
        keys = set(self._terms) | set(other._terms)
        return max((abs(self.coeff(k) - other.coeff(k)) for k in keys), default=0.0)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def __repr__(self):
        if not self._terms:
            return "Polynomial(0)"
        parts = []
        for m, c in self._terms.items():
            mon = "*".join(
                (f"x{i}" if e == 1 else f"x{i}^{e}") for i, e in enumerate(m) if e
            )
            parts.append(f"{c:+.6g}" + (f"*{mon}" if mon else ""))
        return "Polynomial(" + " ".join(parts) + ")"


@njit(cache=True)
def _eval_terms_kernel(exps, coefs, points):
    n_pts = points.shape[0]
    n_terms = exps.shape[0]
    n_vars = exps.shape[1]
    out = np.zeros(n_pts)
    for p in range(n_pts):
        acc = 0.0
        for t in range(n_terms):
            term = coefs[t]
            for v in range(n_vars):
                e = exps[t, v]
                if e == 1:
                    term *= points[p, v]
                elif e > 1:
                    term *= points[p, v] ** e
            acc += term
        out[p] = acc
    return out


def _eval_terms_numpy(exps, coefs, points, chunk=4096):
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        block = points[s:s + chunk, None, :] ** exps[None, :, :]
        out[s:s + chunk] = np.prod(block, axis=2) @ coefs
    return out


def eval_terms(exps: np.ndarray, coefs: np.ndarray, points: np.ndarray) -> np.ndarray:
    if exps.shape[0] == 0:
        return np.zeros(points.shape[0])
    if not USE_NUMBA:
        return _eval_terms_numpy(exps.astype(np.float64), coefs, points)
    return _eval_terms_kernel(np.ascontiguousarray(exps), np.ascontiguousarray(coefs), np.ascontiguousarray(points))


@dataclass(frozen=True)
class GramForm:
    """z(x)^T Q z(x) for a monomial vector z."""

    basis: tuple
    gram: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        if g.shape != (len(self.basis), len(self.basis)):
            raise ValueError(f"gram shape {g.shape} does not match basis length {len(self.basis)}")
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "basis", tuple(tuple(m) for m in self.basis))

    def expand(self) -> Polynomial:
        return gram_expand(self)

    def min_eig(self) -> float:
        if len(self.basis) == 0:
            return 0.0
        return float(np.linalg.eigvalsh(0.5 * (self.gram + self.gram.T)).min())


def gram_expand(g: GramForm) -> Polynomial:
    n_vars = len(g.basis[0]) if g.basis else N_VARS
    t: dict = {}
    for a, ma in enumerate(g.basis):
        for b, mb in enumerate(g.basis):
            q = g.gram[a, b]
            if q != 0.0:
                m = mono_mul(ma, mb)
                t[m] = t.get(m, 0.0) + q
    return Polynomial(t, n_vars)


class AffineSubstitution:
    """Cached monomial images under ``x = T y + shift``."""

    def __init__(self, T, shift=None):
        T = np.asarray(T, dtype=float)
        self.n_in, self.n_out = T.shape
        shift = np.zeros(self.n_in) if shift is None else np.asarray(shift, dtype=float)
        self.vars = [linear_poly(T[i], shift[i], self.n_out) for i in range(self.n_in)]
        self._cache: dict = {}

    def image(self, m: Monomial) -> Polynomial:
        m = tuple(m)
        hit = self._cache.get(m)
        if hit is None:
            hit = Polynomial.constant(1.0, self.n_out)
            for i, e in enumerate(m):
                for _ in range(e):
                    hit = hit * self.vars[i]
            self._cache[m] = hit
        return hit


def linear_poly(coeffs, const: float = 0.0, n_vars: int = N_VARS) -> Polynomial:
    t = {unit(n_vars, i): c for i, c in enumerate(coeffs)}
    t[(0,) * n_vars] = const
    return Polynomial(t, n_vars)


def quadratic_coefficients(p: Polynomial):
    """Split a degree <= 2 polynomial into (Q symmetric, lin, const)."""
    if p.degree() > 2:
        raise ValueError("polynomial degree exceeds 2")
    n = p.n_vars
    Q = np.zeros((n, n))
    lin = np.zeros(n)
    const = 0.0
    for m, c in p.items():
        d = sum(m)
        if d == 0:
            const = c
        elif d == 1:
            lin[m.index(1)] = c
        else:
            idx = [i for i, e in enumerate(m) for _ in range(e)]
            a, b = idx
            if a == b:
                Q[a, a] += c
            else:
                Q[a, b] += c / 2
                Q[b, a] += c / 2
    return Q, lin, const
