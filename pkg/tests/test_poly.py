from math import comb

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from safefilter.poly import GramForm, Polynomial, gram_expand, mono_basis, quadratic_coefficients

N = 8


def x(i, n=N):
    return Polynomial.var(i, n)


def test_mono_basis_small():
    assert mono_basis(2, 1) == [(0, 0), (1, 0), (0, 1)]
    assert len(mono_basis(8, 1)) == 9
    assert len(mono_basis(8, 2)) == 45


@pytest.mark.parametrize("n", range(1, 9))
@pytest.mark.parametrize("d", range(0, 5))
def test_mono_basis_count(n, d):
    basis = mono_basis(n, d)
    assert len(basis) == comb(n + d, d)
    assert len(set(basis)) == len(basis)
    assert [sum(m) for m in basis] == sorted(sum(m) for m in basis)


def test_arithmetic_examples():
    p = (x(0) + 1) * (x(0) - 1)
    assert p == x(0) ** 2 - 1
    assert p + Polynomial.zero() == p
    assert (x(0) ** 2).scale(0.0).terms == {}


def test_differentiate_examples():
    p = x(0) ** 2 + 2 * x(1)
    assert p.differentiate(0) == 2 * x(0)
    assert (x(0) ** 2).differentiate(1).is_zero()
    g = (x(0) ** 2 + x(1) ** 2 - 1).gradient()
    assert g[0] == 2 * x(0) and g[1] == 2 * x(1)


def test_eval_examples():
    pt = np.zeros(N)
    pt[:2] = 1.0
    assert (x(0) ** 2 + 2 * x(1)).eval(pt) == 3.0
    assert Polynomial.zero().eval(np.random.default_rng(0).random(N)) == 0.0


def test_gram_expand_examples():
    e = [(0,), (1,)]
    assert gram_expand(GramForm(((1,),), np.array([[2.0]]))).terms == {(2,): 2.0}
    assert gram_expand(GramForm(tuple(e), np.eye(2))).terms == {(0,): 1.0, (2,): 1.0}
    got = gram_expand(GramForm(tuple(e), np.array([[2.0, -1.0], [-1.0, 1.0]])))
    # independent symbolic expansion
    s = sympy.Symbol("s")
    z = sympy.Matrix([1, s])
    ref = sympy.Poly(sympy.expand((z.T * sympy.Matrix([[2, -1], [-1, 1]]) * z)[0]), s)
    want = {(k[0],): float(v) for k, v in zip(ref.monoms(), ref.coeffs())}
    assert got.terms == want


def test_gram_dimension_mismatch():
    with pytest.raises(ValueError):
        GramForm(((0,), (1,)), np.eye(3))


def test_quadratic_coefficients_roundtrip():
    rng = np.random.default_rng(3)
    Q = rng.standard_normal((N, N))
    Q = Q + Q.T
    lin = rng.standard_normal(N)
    p = Polynomial.quadratic_form(Q, lin, 0.7)
    Q2, lin2, c2 = quadratic_coefficients(p)
    assert np.allclose(Q2, Q) and np.allclose(lin2, lin) and c2 == pytest.approx(0.7)


# -- properties ---------------------------------------------------------------

monos = st.tuples(*[st.integers(0, 2)] * 4).filter(lambda m: sum(m) <= 4)
coefs = st.floats(-3, 3, allow_nan=False).filter(lambda c: abs(c) > 1e-3)
polys = st.dictionaries(monos, coefs, max_size=8).map(lambda t: Polynomial(t, 4))


@settings(max_examples=60, deadline=None)
@given(polys, polys, st.integers(0, 2**31 - 1))
def test_product_evaluates_as_product(p, q, seed):
    pts = np.random.default_rng(seed).uniform(-1.5, 1.5, (100, 4))
    lhs = (p * q).eval_many(pts)
    rhs = p.eval_many(pts) * q.eval_many(pts)
    scale = np.maximum(1.0, np.abs(p.eval_many(pts)) * np.abs(q.eval_many(pts)))
    # cancellation in the summed product is bounded by the absolute magnitudes
    absp = Polynomial({m: abs(c) for m, c in p.items()}, 4).eval_many(np.abs(pts))
    absq = Polynomial({m: abs(c) for m, c in q.items()}, 4).eval_many(np.abs(pts))
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * np.maximum(scale, absp * absq))


@settings(max_examples=60, deadline=None)
@given(polys, polys, st.integers(0, 3))
def test_leibniz_rule(p, q, v):
    lhs = (p * q).differentiate(v)
    rhs = p.differentiate(v) * q + p * q.differentiate(v)
    assert lhs.max_abs_diff(rhs) <= 1e-12 * max(1.0, lhs.max_abs_coeff())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_psd_gram_is_nonnegative(k, seed):
    rng = np.random.default_rng(seed)
    basis = tuple(mono_basis(4, 2)[:k + 2])
    L = rng.standard_normal((len(basis), k))
    p = gram_expand(GramForm(basis, L @ L.T))
    vals = p.eval_many(rng.uniform(-2, 2, (1000, 4)))
    assert vals.min() >= -1e-10 * max(1.0, np.abs(vals).max())
