"""Exact-arithmetic tests for the polynomial core.

Expected values fall into three groups: direct term bookkeeping (parser,
derivatives), weight systems with their derived quantities, and Jacobi-ring
data where the Milnor number has an independent oracle via the product
formula mu = prod(1/q_i - 1).
"""

import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singtorsion.polycore import (
    JacobiRing,
    PolyError,
    PolyRing,
    Polynomial,
    QQi,
    check_nondegenerate,
    classify_deformation,
    differentiate,
    format_poly,
    parse_poly,
    weights_of,
)


# ---------------------------------------------------------------------------
# parser and printer
# ---------------------------------------------------------------------------

def test_parse_basic_terms():
    p = parse_poly("z1^3/3 + u1*z1")
    ring = p.ring
    assert ring.names == ("u1", "z1")
    iu, iz = ring.index("u1"), ring.index("z1")
    exp_cubic = tuple(3 if i == iz else 0 for i in range(2))
    exp_mixed = tuple(1 for _ in range(2))
    assert p.coefficient(exp_cubic) == QQi.of(Fraction(1, 3))
    assert p.coefficient(exp_mixed) == QQi.of(1)
    assert len(p.terms) == 2


def test_parse_zero():
    assert parse_poly("0").is_zero()
    assert parse_poly("z1 - z1").is_zero()


def test_parse_two_fifth_powers():
    p = parse_poly("z1^5 + z2^5")
    assert len(p.terms) == 2
    assert all(c == QQi.of(1) for c in p.terms.values())


def test_parse_rejects_bad_input():
    with pytest.raises(PolyError):
        parse_poly("z1^")
    with pytest.raises(PolyError):
        parse_poly("z1 +* z2")
    with pytest.raises(PolyError):
        parse_poly("z1/z2")  # division only by rational constants
    ring = PolyRing.holomorphic(["z1"])
    with pytest.raises(PolyError):
        parse_poly("z1 + w", ring)  # undeclared symbol


def test_printer_round_trip():
    ring = PolyRing.holomorphic(["z1", "z2"])
    p = parse_poly("z1^3/3 - 2*z1*z2 + 7 - z2^2/5", ring)
    q = parse_poly(format_poly(p), ring)
    assert p == q


@st.composite
def small_polys(draw, ring):
    nterms = draw(st.integers(0, 5))
    terms = {}
    for _ in range(nterms):
        exp = tuple(draw(st.integers(0, 4)) for _ in ring.names)
        num = draw(st.integers(-9, 9))
        den = draw(st.integers(1, 5))
        terms[exp] = terms.get(exp, QQi()) + QQi.of(Fraction(num, den))
    return Polynomial.make(ring, terms)


RING2 = PolyRing.holomorphic(["z1", "z2"])


@given(small_polys(RING2))
@settings(max_examples=60, deadline=None)
def test_printer_round_trip_random(p):
    assert parse_poly(format_poly(p), RING2) == p


# ---------------------------------------------------------------------------
# ring axioms (exact)
# ---------------------------------------------------------------------------

@given(small_polys(RING2), small_polys(RING2), small_polys(RING2))
@settings(max_examples=40, deadline=None)
def test_ring_axioms(p, q, r):
    assert (p * q) * r == p * (q * r)
    assert p * (q + r) == p * q + p * r
    assert p + q == q + p
    assert p * q == q * p


@given(small_polys(RING2))
@settings(max_examples=40, deadline=None)
def test_mixed_partials_commute(p):
    assert p.diff("z1").diff("z2") == p.diff("z2").diff("z1")


def test_differentiate_basics():
    p = parse_poly("z1^3/3")
    assert differentiate(p, "z1") == parse_poly("z1^2", p.ring)
    assert differentiate(Polynomial.const(p.ring, 5), "z1").is_zero()
    q = parse_poly("z1^3 + z2^3")
    assert differentiate(q, "z1") == parse_poly("3*z1^2", q.ring)


def test_conjugation_swaps_paired_variables():
    ring = PolyRing.paired(["z1"])
    p = parse_poly("z1^2 + 3*zb1", ring)
    pc = p.conjugate()
    assert pc == parse_poly("zb1^2 + 3*z1", ring)
    assert pc.conjugate() == p


def test_conjugation_conjugates_coefficients():
    ring = PolyRing.paired(["z1"])
    i = QQi(Fraction(0), Fraction(1))
    p = Polynomial.var(ring, "z1").scale(i)
    pc = p.conjugate()
    assert pc == Polynomial.var(ring, "zb1").scale(-i)


# ---------------------------------------------------------------------------
# weight systems
# ---------------------------------------------------------------------------

def test_weights_cubic():
    ws = weights_of(parse_poly("z1^3/3"))
    assert ws.q == (Fraction(1, 3),)
    assert ws.delta == Fraction(3, 2)
    assert ws.central_charge == Fraction(1, 3)


def test_weights_mixed_gap_boundary():
    # x^2 + x*y^3: weights (1/2, 1/6), the gap hits 1/3 and delta drops to 0.
    ws = weights_of(parse_poly("x^2 + x*y^3"))
    assert ws.q == (Fraction(1, 2), Fraction(1, 6))
    assert ws.gap == Fraction(1, 3)
    assert ws.delta == Fraction(0)


def test_weights_two_quintics():
    ws = weights_of(parse_poly("z1^5 + z2^5"))
    assert ws.q == (Fraction(1, 5), Fraction(1, 5))


def test_weights_errors():
    with pytest.raises(PolyError):
        weights_of(parse_poly("z1^2 + z1^3"))  # inconsistent
    ring = PolyRing.holomorphic(["z1", "z2"])
    with pytest.raises(PolyError):
        weights_of(parse_poly("z1^3", ring))  # z2 absent: underdetermined


@given(st.integers(2, 5), st.integers(2, 5))
@settings(max_examples=20, deadline=None)
def test_weights_recover_generating_exponents(a, b):
    ring = PolyRing.holomorphic(["z1", "z2"])
    f = parse_poly(f"z1^{a} + z2^{b}", ring)
    ws = weights_of(f)
    assert ws.q == (Fraction(1, a), Fraction(1, b))


# ---------------------------------------------------------------------------
# Jacobi rings and Milnor numbers
# ---------------------------------------------------------------------------

def _mu(text: str) -> int:
    return JacobiRing(parse_poly(text)).mu


def test_milnor_a_series():
    # mu(A_k) = k for f = z^{k+1}/(k+1)
    assert _mu("z1^2/2") == 1
    assert _mu("z1^3/3") == 2
    assert _mu("z1^4/4") == 3
    assert _mu("z1^5/5") == 4


def test_milnor_fermat_product():
    assert _mu("z1^3 + z2^3") == 4
    # product rule across disjoint variables
    assert _mu("z1^3/3 + z2^4/4") == 6
    assert _mu("z1^2 + z2^5") == 4


def test_milnor_weight_formula_oracle():
    # independent dual route: mu = prod(1/q_i - 1)
    for text in ["z1^3/3", "z1^4/4", "z1^3 + z2^3", "z1^3/3 + z2^4/4",
                 "z1^5 + z2^5"]:
        f = parse_poly(text)
        ws = weights_of(f)
        assert JacobiRing(f).mu == ws.milnor_number


def test_jacobi_basis_a2():
    ring = JacobiRing(parse_poly("z1^3/3"))
    assert ring.basis == ((0,), (1,))


def test_jacobi_basis_z5():
    ring = JacobiRing(parse_poly("z1^5/5"))
    assert ring.basis == ((0,), (1,), (2,), (3,))


def test_jacobi_basis_fermat():
    ring = JacobiRing(parse_poly("z1^3 + z2^3"))
    assert set(ring.basis) == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_jacobi_not_zero_dimensional():
    with pytest.raises(PolyError):
        JacobiRing(parse_poly("z1^2*z2"))


def test_normal_form_deformed_a2():
    # f = z^3/3 + u z: f' = z^2 + u, so z^2 reduces to -u.
    ring_zu = PolyRing.holomorphic(["u", "z1"])
    f = parse_poly("z1^3/3 + u*z1", ring_zu)
    jring = JacobiRing(f, holomorphic=("z1",))
    nf = jring.normal_form(parse_poly("z1^2", ring_zu))
    assert nf == parse_poly("-u", ring_zu)


def test_normal_form_idempotent_on_basis():
    jring = JacobiRing(parse_poly("z1^3 + z2^3"))
    for b in jring.basis_polys():
        assert jring.normal_form(b) == b


def test_normal_form_multiplicative():
    jring = JacobiRing(parse_poly("z1^3 + z2^3"))
    ring = jring.f.ring
    p = parse_poly("z1^2 + z2", ring)
    q = parse_poly("z1*z2 - 1", ring)
    lhs = jring.normal_form(p * q)
    rhs = jring.normal_form(jring.normal_form(p) * q)
    assert lhs == rhs


def test_normal_form_cubic_power_vanishes():
    jring = JacobiRing(parse_poly("z1^3/3"))
    assert jring.normal_form(parse_poly("z1^3", jring.f.ring)).is_zero()


def test_multiplication_matrix_eigenvalues():
    # multiplication by z on C[z]/(z^2 + u) at u = 3/10 has eigenvalues
    # +-sqrt(-3/10); the matrix itself is exact, checked via trace and det.
    ring_zu = PolyRing.holomorphic(["u", "z1"])
    f = parse_poly("z1^3/3 + u*z1", ring_zu)
    jring = JacobiRing(f, holomorphic=("z1",))
    m = jring.multiplication_matrix(parse_poly("z1", ring_zu))
    # basis {1, z}: z*1 = z, z*z = -u -> companion matrix [[0, -u], [1, 0]]
    import numpy as np

    assert m[0][1] == parse_poly("-u", ring_zu)
    assert m[1][0] == parse_poly("1", ring_zu)
    mnum = np.array([[c.eval_numeric({"u": 0.3}) for c in row] for row in m])
    eig = sorted(np.linalg.eigvals(mnum), key=lambda w: w.imag)
    root = math.sqrt(0.3)
    assert abs(eig[0] - (-1j * root)) < 1e-12
    assert abs(eig[1] - (1j * root)) < 1e-12


# ---------------------------------------------------------------------------
# non-degeneracy diagnostics
# ---------------------------------------------------------------------------

def test_nondegenerate_cubic():
    diag = check_nondegenerate(parse_poly("z1^3/3"))
    assert diag["ok"] and diag["mu"] == 2


def test_degenerate_cross_term():
    diag = check_nondegenerate(parse_poly("z1*z2"))
    assert not diag["ok"]
    assert not diag["no_cross_terms"]
    assert ("z1", "z2") in diag["cross_terms"]


def test_degenerate_nonisolated():
    # z1^2 z2 has gradient (2 z1 z2, z1^2), vanishing on the z1 = 0 line.
    diag = check_nondegenerate(parse_poly("z1^2*z2"))
    assert not diag["ok"]
    assert diag["no_cross_terms"]
    assert not diag["zero_dimensional"]


# ---------------------------------------------------------------------------
# deformation classification
# ---------------------------------------------------------------------------

def test_classify_a2_relevant():
    f0 = parse_poly("z1^3/3")
    spec = classify_deformation(f0, [("u", parse_poly("z1", f0.ring))])
    assert spec.kinds == ("relevant",)
    assert spec.u_weights == (Fraction(2, 3),)
    assert spec.star_ok
    assert spec.mu == 2


def test_classify_constant_shift():
    f0 = parse_poly("z1^3/3")
    spec = classify_deformation(f0, [("u", Polynomial.const(f0.ring, 1))])
    assert spec.kinds == ("relevant",)
    assert spec.u_weights == (Fraction(1),)


def test_classify_marginal_fermat3():
    f0 = parse_poly("z1^3 + z2^3 + z3^3")
    phi = parse_poly("z1*z2*z3", f0.ring)
    spec = classify_deformation(f0, [("u", phi)])
    assert spec.kinds == ("marginal",)
    assert spec.u_weights == (Fraction(0),)
    assert spec.star_ok
    assert spec.mu == 8


def test_classify_fermat2_relevant():
    f0 = parse_poly("z1^3 + z2^3")
    phi = parse_poly("z1*z2", f0.ring)
    spec = classify_deformation(f0, [("u", phi)])
    assert spec.kinds == ("relevant",)
    assert spec.u_weights == (Fraction(1, 3),)
    assert spec.star_ok
    assert spec.mu == 4


def test_classify_two_parameter_a3():
    f0 = parse_poly("z1^4/4")
    spec = classify_deformation(
        f0,
        [("u1", parse_poly("z1^2", f0.ring)), ("u2", parse_poly("z1", f0.ring))],
    )
    assert spec.kinds == ("relevant", "relevant")
    assert spec.u_weights == (Fraction(1, 2), Fraction(3, 4))
    assert spec.star_ok


def test_classify_rejects_non_basis_direction():
    f0 = parse_poly("z1^3/3")
    with pytest.raises(PolyError):
        classify_deformation(f0, [("u", parse_poly("z1^2", f0.ring))])


def test_classify_rejects_degenerate_f0():
    f0 = parse_poly("z1^2*z2")
    with pytest.raises(PolyError):
        classify_deformation(f0, [])


def test_deformed_polynomial_assembly():
    f0 = parse_poly("z1^3/3")
    spec = classify_deformation(f0, [("u", parse_poly("z1", f0.ring))])
    f = spec.f_at([Fraction(3, 10)])
    expected = parse_poly("z1^3/3 + 3/10*z1", f0.ring)
    assert f == expected
    terms = spec.f_terms_numeric([0.3])
    iz = f0.ring.index("z1")
    lin = tuple(1 if i == iz else 0 for i in range(f0.ring.nvars))
    assert abs(terms[lin] - 0.3) < 1e-15
