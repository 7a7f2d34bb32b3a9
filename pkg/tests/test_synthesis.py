import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from safefilter.poly import Polynomial, unit
from safefilter.sos import compile_program
from safefilter.synthesis import (
    STAGE_CONTROLLER,
    CertificateFormatError,
    ConfigurationError,
    ModelParams,
    SynthesisOptions,
    build_model,
    containment_check,
    default_certificate_path,
    initial_certificate,
    lie_derivative,
    load_certificate,
    model_hash,
    operating_region,
    pose_round,
    sample_operating_region,
    save_certificate,
    solve_round,
    synthesize,
    verify_certificate,
)

P = ModelParams()
ORIGIN = np.zeros(8)


@pytest.fixture(scope="module")
def model():
    return build_model(P)


@pytest.fixture(scope="module")
def shipped():
    return load_certificate(default_certificate_path())


def test_current_gain(model):
    assert model.G[0, 0] == pytest.approx(2 * math.pi * 50 / 0.16)
    assert model.G[0, 0] == pytest.approx(1963.50, abs=5e-3)
    assert model.G[1, 1] == model.G[0, 0]
    assert model.G[2, 2] == model.G[3, 3] == 1.0
    assert not model.G[4:].any()
    assert all(model.f[r].is_zero() for r in range(4, 8))


def test_drift_cross_coupling(model):
    # -(w_n/l_c) Z_c i with Z_c = J l_c gives +w_n i_q in the i_d row
    assert model.f[0].coeff(unit(8, 1)) == pytest.approx(P.omega_n)
    assert model.f[1].coeff(unit(8, 0)) == pytest.approx(-P.omega_n)
    assert model.f[0].coeff(unit(8, 6)) == pytest.approx(-model.gain)


def test_alpha_convention():
    x = np.zeros(8)
    x[6], x[2] = 1.0, 0.9
    printed = build_model(replace(P, tau=1e-3, alpha_printed=True))
    rate = build_model(replace(P, tau=1e-3))
    assert printed.u_n[2].eval(x) == pytest.approx(1e-3 * 0.1)
    assert rate.u_n[2].eval(x) == pytest.approx(0.1 / 1e-3)


def test_parameter_guards():
    with pytest.raises(ConfigurationError):
        build_model(replace(P, l_c=0.0))
    with pytest.raises(ConfigurationError):
        ModelParams(i_lim=1.35)
    with pytest.raises(ConfigurationError):
        ModelParams(i_r_lim=1.25)


def test_initial_certificate(model):
    c0 = initial_certificate(model)
    assert c0.B.eval(ORIGIN) == pytest.approx(-1.0)
    edge = np.zeros(8)
    edge[0] = P.i_lim
    assert c0.B.eval(edge) == pytest.approx(0.0, abs=1e-12)
    rep = containment_check(model, c0, 10_000, seed=5)
    assert rep.nominal_points > 1000
    assert rep.nominal_outside_safe == 0


def test_operating_region_polynomials():
    g_ir, g_v = operating_region(P)
    x = np.zeros(8)
    x[4] = 1.18
    assert g_ir.eval(x) == pytest.approx(0.0, abs=1e-12)
    x = np.zeros(8)
    x[7] = 0.1
    assert g_v.eval(x) == pytest.approx(0.0, abs=1e-12)


def test_controller_stage_compiles(model):
    rp = pose_round(model, initial_certificate(model), STAGE_CONTROLLER)
    sdp, _ = compile_program(rp.program, coords=rp.coords)
    assert sdp.m > 0


def test_nominal_condition_uses_aggressive_controller(model):
    c0 = initial_certificate(model)
    rp = pose_round(model, c0, STAGE_CONTROLLER)
    spec = next(s for s in rp.program.constraints if s.name == "clf_nominal")
    vals = {k: 0.0 for k in spec.expression.keys()}
    got = spec.expression.to_poly(vals)
    want = lie_derivative(model, c0.V, model.u_n_aggressive) + c0.d
    assert got.max_abs_diff(want) <= 1e-9 * want.max_abs_coeff()
    assert lie_derivative(model, c0.V, model.u_n).max_abs_diff(want - c0.d) > 1.0


@pytest.mark.slow
def test_alternation_rounds(model):
    opts = SynthesisOptions()
    c0 = initial_certificate(model)
    r1 = solve_round(pose_round(model, c0, STAGE_CONTROLLER, opts), opts)
    assert r1.accepted
    t = r1.values["margin"].coeff((0,) * 8)
    assert t > 0
    for name, g in r1.grams.items():
        assert g.min_eig() >= -1e-7 * max(1.0, np.abs(g.gram).max()), name


def test_shipped_certificate_basics(shipped):
    assert shipped.verified
    assert shipped.B.eval(ORIGIN) == pytest.approx(-1.0, abs=1e-6)
    assert shipped.B.degree() == 2 and shipped.V.degree() == 2
    assert all(u.degree() <= 1 for u in shipped.u_sos)
    assert shipped.model_hash == model_hash(P)
    margins = [float(v) for v in shipped.meta["margins"].split(",")]
    assert all(b >= a - 1e-9 for a, b in zip(margins, margins[1:]))


def test_barrier_expression_nonpositive(model, shipped):
    regs = operating_region(P)
    e = lie_derivative(model, shipped.B, shipped.u_sos) + shipped.multiplier("gamma_B") * shipped.B
    for r, g in enumerate(regs):
        e = e + shipped.multiplier(f"gamma_1_{r}") * g
    e = e + float(shipped.meta["margin"])
    x = sample_operating_region(P, np.random.default_rng(11), 100_000)
    assert e.eval_many(x).max() <= 1e-6


def test_gram_matrices_psd(shipped):
    assert shipped.grams
    for name, g in shipped.grams.items():
        assert g.min_eig() >= -1e-7, name


def test_verify_zero_samples(model, shipped):
    rep = verify_certificate(model, shipped, 0)
    assert rep.status == "Unverified" and rep.n_samples == 0 and rep.total_violations == 0


def test_verify_shipped_small(model, shipped):
    rep = verify_certificate(model, shipped, 20_000, seed=3)
    assert rep.n_samples == 20_000
    assert rep.status == "Verified", rep.violations
    assert all(rep.checked[c] > 0 for c in rep.checked)


def test_mutated_barrier_has_violations(model, shipped):
    # flipping the sign of the i_d^2 coefficient makes the safe set unbounded
    m = dict(shipped.B.terms)
    key = unit(8, 0, 2)
    m[key] = -m[key]
    bad = replace(shipped, B=Polynomial(m, 8))
    rep = verify_certificate(model, bad, 20_000, seed=1)
    assert rep.total_violations > 0


def test_certificate_roundtrip(tmp_path, shipped):
    path = tmp_path / "c.cert"
    save_certificate(shipped, path)
    back = load_certificate(path)
    assert back.B.terms == shipped.B.terms and back.V.terms == shipped.V.terms
    assert all(a.terms == b.terms for a, b in zip(back.u_sos, shipped.u_sos))
    assert {k: v.terms for k, v in back.multipliers.items()} == {k: v.terms for k, v in shipped.multipliers.items()}
    assert back.meta == shipped.meta
    for k, g in shipped.grams.items():
        assert np.array_equal(back.grams[k].gram, g.gram)


def test_truncated_certificate_reports_line(tmp_path):
    text = default_certificate_path().read_text().splitlines()
    path = tmp_path / "t.cert"
    path.write_text("\n".join(text[:20]) + "\n")
    with pytest.raises(CertificateFormatError) as err:
        load_certificate(path)
    assert err.value.line >= 20
    assert "line" in str(err.value)


def test_garbled_term_reports_line(tmp_path):
    lines = default_certificate_path().read_text().splitlines()
    idx = lines.index("B") + 2
    lines[idx] = "0 0 x 0 0 0 0 0 1.0"
    path = tmp_path / "g.cert"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CertificateFormatError) as err:
        load_certificate(path)
    assert err.value.line == idx + 1


def test_hash_mismatch_flag(tmp_path):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        c = load_certificate(default_certificate_path(), replace(P, v_pcc_radius=0.2))
    assert c.hash_mismatch
    assert any("hash" in str(x.message) for x in w)
    assert not load_certificate(default_certificate_path(), P).hash_mismatch


def test_zero_rounds_is_unverified():
    c = synthesize(P, SynthesisOptions(max_rounds=0))
    assert c.meta["status"] == "Unverified"
    assert c.B.eval(ORIGIN) == pytest.approx(-1.0)


@pytest.mark.slow
def test_zero_safety_margin_still_synthesizes():
    c = synthesize(replace(P, i_lim=P.i_max))
    assert c.meta["status"] == "Verified"
    assert float(c.meta["safety_margin"]) == 0.0
