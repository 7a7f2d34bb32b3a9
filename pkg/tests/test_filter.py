import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from safefilter.poly import Polynomial
from safefilter.safety_filter import (
    CertificateFilter,
    InfeasibleFilterError,
    QcqpInstance,
    build_constraints,
    filter_step,
    solve_filter,
)
from safefilter.synthesis import (
    CertificateEvaluator,
    ModelParams,
    _sample_safe,
    build_model,
    default_certificate_path,
    load_certificate,
)

ORACLE = Path(__file__).parent / "data" / "qcqp_oracle.json"
R = 1.2


@pytest.fixture(scope="module")
def model():
    return build_model(ModelParams())


@pytest.fixture(scope="module")
def cert():
    return load_certificate(default_certificate_path())


@pytest.fixture(scope="module")
def flt(cert, model):
    return CertificateFilter(cert, model)


def steady_state(i, v_pcc=(0.05, -0.02)):
    """Operating point with i = i_r and v_f = v_pcc."""
    x = np.zeros(8)
    x[0:2] = i
    x[4:6] = i
    x[2:4] = v_pcc
    x[6:8] = v_pcc
    return x


def on_barrier(flt, x, direction):
    """Point x + s*direction with B = 0 (B is quadratic along the ray)."""
    f = lambda s: flt.barrier_values(x + s * direction)[0]
    f0, f1, fm = f(0.0), f(1.0), f(-1.0)
    a, b = 0.5 * (f1 + fm) - f0, 0.5 * (f1 - fm)
    s = (-b + np.sqrt(b * b - 4 * a * f0)) / (2 * a)
    return x + s * direction


# -- solve_filter ---------------------------------------------------------------


def test_feasible_nominal_is_returned_unchanged():
    q = QcqpInstance(np.array([0.3, -0.2, 5.0, 1.0]), np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]),
                     np.array([-1.0, -1.0]), R)
    out = solve_filter(q)
    assert np.array_equal(out.u_s, q.u_n)
    assert not out.delta_u.any()
    assert out.active_set == frozenset()


def test_radial_projection_onto_disc():
    q = QcqpInstance(np.array([2.0, 0.0, 0.0, 0.0]), np.zeros((2, 4)), np.zeros(2), R)
    out = solve_filter(q)
    assert np.allclose(out.u_s, [1.2, 0.0, 0.0, 0.0], atol=1e-12)
    assert out.active_set == frozenset({"MOD"})


def test_delta_is_exact_difference():
    rng = np.random.default_rng(4)
    q = QcqpInstance(rng.standard_normal(4) * 2, rng.standard_normal((2, 4)), rng.standard_normal(2), R)
    out = solve_filter(q)
    assert np.array_equal(out.delta_u, out.u_s - q.u_n)


def test_parallel_rows():
    c = np.array([1.0, 2.0, 0.0, -1.0])
    q = QcqpInstance(np.array([1.0, 1.0, 1.0, 1.0]), np.vstack([c, 2 * c]), np.array([-0.5, -0.4]), R)
    out = solve_filter(q)
    assert np.all(q.C @ out.u_s + q.b <= 1e-9)
    assert out.kkt_residual <= 1e-9
    # projection onto the tighter half-space c.u <= 0.2
    want = q.u_n - (c @ q.u_n - 0.2) / (c @ c) * c
    assert np.allclose(out.u_s, want, atol=1e-10)


def test_infeasible_instance_falls_back():
    C = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
    q = QcqpInstance(np.zeros(4), C, np.array([1.0, 1.0]), R)
    with pytest.raises(InfeasibleFilterError):
        solve_filter(q, fallback=False)
    out = solve_filter(q)
    assert not out.feasible
    assert np.all(np.isfinite(out.u_s))
    # least violation: both rows violated by exactly 1 at u_0 = 0
    assert np.max(C @ out.u_s + q.b) == pytest.approx(1.0, abs=1e-6)


def test_tol_must_be_positive():
    q = QcqpInstance(np.zeros(4), np.zeros((2, 4)), -np.ones(2), R)
    with pytest.raises(ValueError):
        solve_filter(q, tol=0.0)


def load_oracle():
    data = json.loads(ORACLE.read_text())
    return [(QcqpInstance(np.array(i["u_n"]), np.array(i["C"]), np.array(i["b"]), i["R"]), i["objective"])
            for i in data["instances"]]


def test_matches_grid_oracle():
    cases = load_oracle()
    assert len(cases) == 1000
    gaps, kkts = [], []
    for q, ref in cases:
        out = solve_filter(q)
        assert out.feasible
        gaps.append(abs(float(out.delta_u @ out.delta_u) - ref))
        kkts.append(out.kkt_residual)
    assert max(gaps) <= 1e-6
    assert max(kkts) <= 1e-9


def test_median_solve_time():
    cases = load_oracle()
    for q, _ in cases[:10]:
        solve_filter(q)
    times = []
    for q, _ in cases:
        t0 = time.perf_counter()
        solve_filter(q)
        times.append(time.perf_counter() - t0)
    assert np.median(times) <= 50e-6


# -- properties -------------------------------------------------------------------

vec4 = st.lists(st.floats(-3, 3), min_size=4, max_size=4).map(np.array)


@settings(max_examples=300, deadline=None)
@given(vec4, vec4, vec4, st.floats(-2, 2), st.floats(-2, 2))
def test_kkt_and_norm_bound(u_n, c0, c1, b0, b1):
    q = QcqpInstance(u_n, np.vstack([c0, c1]), np.array([b0, b1]), R)
    out = solve_filter(q)
    assert np.hypot(out.u_s[0], out.u_s[1]) <= R + 1e-9
    if out.feasible:
        assert out.kkt_residual <= 1e-9
        lam0, lam1, mu = out.multipliers
        slack = q.C @ out.u_s + q.b
        assert np.all(slack <= 1e-9 * (1 + np.abs(q.b)))
        assert min(lam0, lam1, mu) >= 0.0
        assert abs(lam0 * slack[0]) <= 1e-8 and abs(lam1 * slack[1]) <= 1e-8


@settings(max_examples=200, deadline=None)
@given(vec4, vec4, vec4, st.floats(0.01, 2), st.floats(0.01, 2))
def test_idempotent_on_feasible_nominal(u_n, c0, c1, m0, m1):
    assume(np.hypot(u_n[0], u_n[1]) < R)
    C = np.vstack([c0, c1])
    b = -(C @ u_n) - np.array([m0, m1])
    out = solve_filter(QcqpInstance(u_n, C, b, R))
    assert np.array_equal(out.u_s, u_n)
    assert out.active_set == frozenset()


# -- build_constraints / filter_step --------------------------------------------------


def test_constraints_inactive_deep_inside(flt, cert, model):
    x = steady_state(np.array([0.3, -0.1]))
    B, V = flt.barrier_values(x)
    assert B < -0.5 and V < 0
    q = build_constraints(x, cert, model)
    assert np.all(q.C @ q.u_n + q.b < 0)


def test_slack_vanishes_on_barrier(flt):
    x = on_barrier(flt, steady_state(np.array([0.2, 0.1])), np.array([1.0, 0.5, 0, 0, 0, 0, 0, 0]))
    assert flt.barrier_values(x)[0] == pytest.approx(0.0, abs=1e-9)
    q = flt.instance(x)
    grad = np.array([flt._ev(a, x) for a in flt._gradB])
    assert q.b[0] == pytest.approx(grad @ (flt.A @ x + flt.f0), rel=1e-9, abs=1e-9)


def test_barrier_row_voltage_columns(model, cert):
    x = steady_state(np.array([0.4, 0.2]))
    q = build_constraints(x, cert, model)
    grad = [cert.B.differentiate(v).eval(x) for v in (2, 3)]
    assert np.allclose(q.C[0, 2:], grad)
    # a barrier without v_f terms gives zero columns
    terms = {m: c for m, c in cert.B.items() if not (m[2] or m[3])}
    q2 = CertificateFilter(replace(cert, B=Polynomial(terms, 8)), model).instance(x)
    assert not q2.C[0, 2:].any()


def test_steady_state_needs_no_intervention(model, cert):
    i = 0.5 * 1.24 * np.array([np.cos(0.7), np.sin(0.7)])
    out = filter_step(steady_state(i), cert, model)
    assert out.feasible
    assert not out.delta_u.any()
    assert out.active_set == frozenset()


def test_barrier_condition_on_boundary(flt, model):
    rng = np.random.default_rng(2)
    for _ in range(50):
        base = steady_state(rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.05, 0.05, 2))
        d = np.zeros(8)
        d[:4] = rng.standard_normal(4)
        x = on_barrier(flt, base, d)
        out = flt.step(x)
        grad = np.array([flt._ev(a, x) for a in flt._gradB])
        lie = grad @ (flt.A @ x + flt.f0 + model.G @ out.u_s)
        assert out.feasible
        assert lie <= 1e-8 * max(1.0, np.abs(grad @ model.G).sum())


def test_outside_safe_set_still_returns_input(flt):
    x = steady_state(np.array([0.0, 0.0]))
    x[0] = 1.5
    assert flt.barrier_values(x)[0] > 0
    out = flt.step(x)
    assert np.all(np.isfinite(out.u_s))
    assert np.hypot(out.u_s[0], out.u_s[1]) <= R + 1e-9


def test_nonfinite_state_rejected(flt):
    x = np.zeros(8)
    x[3] = np.nan
    with pytest.raises(ValueError):
        flt.instance(x)


def test_continuity_probe(flt):
    p = ModelParams()
    rng = np.random.default_rng(9)
    x = _sample_safe(p, CertificateEvaluator(flt.model, flt.cert), rng, 10_000)
    assert len(x) == 10_000
    ratios = []
    for xi in x:
        d = rng.standard_normal(8)
        d *= 1e-6 * rng.random() / np.linalg.norm(d)
        a = flt.step(xi).u_s
        b = flt.step(xi + d).u_s
        ratios.append(np.linalg.norm(a - b) / np.linalg.norm(d))
    L = max(ratios)
    assert np.isfinite(L)
    print(f"empirical Lipschitz bound {L:.4g}")
