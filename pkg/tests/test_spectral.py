"""Oscillator discretization: ladder algebra, assembly routes, spectra."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singtorsion.polycore import PolyError, classify_deformation, parse_poly
from singtorsion.spectral import (
    SplitSystem,
    Truncation,
    assemble_operators,
    eigendecompose,
    harmonic_projector,
    ladder_ops,
    multiplication_operator,
    omega_sweep,
    susy_identity_report,
)

A2 = {(3,): 1 / 3}
A2_DEF = {(3,): 1 / 3, (1,): 0.3}
A3 = {(4,): 0.25}


def spectrum_of(terms, levels, n=1, **kw):
    ops = assemble_operators(terms, None, Truncation(n, levels),
                            both_routes=False)
    return eigendecompose(ops, **kw)


class TestLadder:
    def test_number_operator_diagonal(self):
        a, ad = ladder_ops(Truncation(1, 9))
        assert np.allclose(np.diag(ad @ a), np.arange(9))
        assert np.count_nonzero(ad @ a - np.diag(np.diag(ad @ a))) == 0

    def test_commutator_identity_below_top_level(self):
        a, ad = ladder_ops(Truncation(1, 12))
        comm = a @ ad - ad @ a
        assert np.allclose(np.diag(comm)[:-1], 1.0)
        # the top diagonal entry absorbs the truncation
        assert comm[11, 11] == -11

    def test_position_matrix_tridiagonal(self):
        tr = Truncation(1, 6, omega=2.0)
        a, ad = ladder_ops(tr)
        x = (a + ad) / math.sqrt(2 * tr.omega)
        assert np.allclose(x, x.T)
        for m in range(5):
            assert x[m, m + 1] == pytest.approx(math.sqrt((m + 1) / 4.0))
        assert np.count_nonzero(np.triu(x, 2)) == 0


class TestMultiplicationOperator:
    def test_constant_is_identity(self):
        op = multiplication_operator({(0, 0): 1.0}, Truncation(1, 5))
        assert np.allclose(np.asarray(op), np.eye(25))

    def test_ground_state_gaussian_moment(self):
        # <0| |z|^2 |0> = 1/omega for the Gaussian of width omega
        tr = Truncation(1, 6, omega=2.0)
        op = np.asarray(multiplication_operator({(1, 1): 1.0}, tr))
        assert op[0, 0].real == pytest.approx(1 / tr.omega, abs=1e-14)
        # diagonal of |z|^2 at level (mx, my) is (mx + my + 1)/omega
        idx = 2 * 6 + 3  # (mx, my) = (2, 3)
        assert op[idx, idx].real == pytest.approx(6 / 2.0, abs=1e-13)

    def test_single_quantum_matrix_element(self):
        tr = Truncation(1, 6, omega=2.0)
        op = np.asarray(multiplication_operator({(1, 0): 1.0}, tr))
        one_x = 1 * 6 + 0
        assert op[0, one_x] == pytest.approx(1 / math.sqrt(2 * tr.omega))

    def test_hermitian_flag_for_real_polynomials(self):
        tr = Truncation(1, 4)
        assert multiplication_operator({(1, 1): 1.0}, tr).hermitian
        assert not multiplication_operator({(1, 0): 1.0}, tr).hermitian

    def test_degree_beyond_padding_warns(self):
        tr = Truncation(1, 6, p_buf=2)
        with pytest.warns(UserWarning, match="padding"):
            multiplication_operator({(4, 0): 1.0}, tr)


class TestQuadraticExample:
    """f = z^2/2 is exactly diagonal at omega = 2."""

    def test_degree0_spectrum_closed_form(self):
        sr = spectrum_of({(2,): 0.5}, 8)
        # 2-d oscillator: eigenvalues 2(m + k + 1)
        want = sorted(2 * (m + k + 1) for m in range(8) for k in range(8))
        assert np.allclose(sr.eigenvalues(0), want, atol=1e-9)

    def test_degree1_spectrum_and_kernel(self):
        sr = spectrum_of({(2,): 0.5}, 8)
        assert np.allclose(sr.eigenvalues(1)[:7], [0, 2, 2, 4, 4, 4, 4],
                           atol=1e-9)
        assert sr.harmonic_counts == {0: 0, 1: 1, 2: 0}
        assert sr.gap_ratio > 1e6

    def test_routes_coincide(self):
        ops = assemble_operators({(2,): 0.5}, None, Truncation(1, 10))
        for k in range(3):
            diff = np.max(np.abs(ops.delta_blocks[k]
                                 - ops.delta_direct_blocks[k]))
            assert diff < 1e-12


class TestCubicExample:
    @pytest.mark.parametrize("u", [0.0, 0.3])
    def test_kernel_dimension_two(self, u):
        terms = dict(A2) if u == 0 else {**A2, (1,): u}
        sr = spectrum_of(terms, 24)
        assert sr.harmonic_counts == {0: 0, 1: 2, 2: 0}
        assert sr.gap_ratio > 1e3

    def test_routes_coincide_inside_window(self):
        # every operator chain fits inside the padding, so the two
        # assembly routes agree to rounding, not merely asymptotically
        ops = assemble_operators(A2_DEF, None, Truncation(1, 24))
        for k in range(3):
            diff = np.max(np.abs(ops.delta_blocks[k]
                                 - ops.delta_direct_blocks[k]))
            assert diff < 1e-10

    def test_middle_degree_reuses_scalar_block(self):
        sr = spectrum_of(A2_DEF, 16)
        assert sr.blocks[2].source_degree == 0
        assert np.array_equal(sr.eigenvalues(0), sr.eigenvalues(2))

    def test_sign_flip_is_exact_blockwise(self):
        # multiplying f by -1 is conjugation by the fermion-parity unitary
        # on the fiber, which the truncation preserves exactly
        neg = {e: -c for e, c in A2_DEF.items()}
        sa, sb = spectrum_of(A2_DEF, 14), spectrum_of(neg, 14)
        for k in range(3):
            assert np.max(np.abs(sa.eigenvalues(k) - sb.eigenvalues(k))) < 1e-10

    def test_supersymmetric_pairing_of_low_modes(self):
        sr = spectrum_of(A2_DEF, 30)
        even = np.sort(np.concatenate([sr.nonzero_eigenvalues(0),
                                       sr.nonzero_eigenvalues(2)]))
        odd = np.sort(sr.nonzero_eigenvalues(1))
        assert np.max(np.abs(even[:10] - odd[:10])) < 1e-5

    def test_eigenvalues_decrease_with_basis_size(self):
        lows = []
        for levels in (12, 16, 20):
            sr = spectrum_of(A2_DEF, levels)
            lows.append(np.sort(np.concatenate(
                [sr.eigenvalues(k) for k in (0, 1)]))[:10])
        assert np.all(lows[1] <= lows[0] + 1e-12)
        assert np.all(lows[2] <= lows[1] + 1e-12)
        # Cauchy-type: successive refinements shrink
        assert np.max(np.abs(lows[2] - lows[1])) < np.max(np.abs(lows[1] - lows[0]))


class TestQuarticExample:
    def test_route_discrepancy_confined_to_edge(self):
        # chains exceed the padding here, so the routes differ, but only
        # on the top of the spectrum; the interior two thirds agree
        ops = assemble_operators(A3, None, Truncation(1, 30))
        sa = eigendecompose(ops)
        sd = eigendecompose(ops, route="direct")
        for k in (0, 1):
            la, ld = sa.eigenvalues(k), sd.eigenvalues(k)
            m = (2 * len(la)) // 3
            assert np.max(np.abs(la[:m] - ld[:m])) < 1e-8

    def test_kernel_dimension_three_with_explicit_tolerance(self):
        # at this basis size the kernel approximants sit near 1e-4, far
        # below the O(1) continuum but above the default threshold
        sr = spectrum_of(A3, 30, eps_h=1e-2)
        assert sr.harmonic_counts == {0: 0, 1: 3, 2: 0}

    def test_default_threshold_reports_ambiguity_elsewhere(self):
        sr = spectrum_of(A3, 10)
        assert sr.gap_ratio < 1e4  # kernel unresolved this small


class TestSusyIdentities:
    def test_residuals_small_on_interior_window(self):
        ops = assemble_operators(A2_DEF, None, Truncation(1, 32),
                                 both_routes=False)
        sr = eigendecompose(ops, vectors=40)
        rep = susy_identity_report(ops, sr)
        assert rep["dbar_squared"] < 1e-6
        assert rep["dbar_d_anticommutator"] < 1e-6
        assert rep["dbar_ddag_anticommutator"] < 1e-6
        assert rep["number_grading"] == 0.0

    def test_residuals_at_reference_resolution(self):
        ops = assemble_operators(A2_DEF, None, Truncation(1, 40),
                                 both_routes=False)
        sr = eigendecompose(ops, vectors=40)
        rep = susy_identity_report(ops, sr)
        assert rep["dbar_squared"] < 1e-8
        assert rep["dbar_d_anticommutator"] < 1e-8

    def test_degree_shift_shapes(self):
        ops = assemble_operators(A2_DEF, None, Truncation(1, 6),
                                 both_routes=False)
        sdim = 36
        assert ops.dbar_blocks[0].shape == (2 * sdim, sdim)
        assert ops.dbar_blocks[1].shape == (sdim, 2 * sdim)
        assert ops.dbar(0).target_degree == 1
        assert ops.dbar_dagger(1).target_degree == 0


class TestProjector:
    def test_split_of_identity(self):
        ops = assemble_operators(A2_DEF, None, Truncation(1, 12),
                                 both_routes=False)
        sr = eigendecompose(ops, eps_h=1e-2, vectors=True)
        hp = harmonic_projector(sr)
        assert sr.harmonic_counts[1] == 2
        for k in range(3):
            pi, g = hp.projector(k), hp.green(k)
            d = ops.delta_blocks[k]
            assert np.max(np.abs(pi @ pi - pi)) < 1e-10
            assert np.max(np.abs(pi - pi.conj().T)) < 1e-10
            assert np.max(np.abs(pi + g @ d - np.eye(d.shape[0]))) < 1e-8
        assert np.trace(hp.projector(1)).real == pytest.approx(2, abs=1e-8)

    def test_partial_vectors_cannot_build_green_operator(self):
        ops = assemble_operators(A2_DEF, None, Truncation(1, 10),
                                 both_routes=False)
        sr = eigendecompose(ops, vectors=5)
        assert sr.blocks[0].vectors.shape[1] == 5
        with pytest.raises(PolyError, match="Green"):
            harmonic_projector(sr)


class TestTensorProduct:
    def test_separated_cubic_pair_kernel_counts(self):
        # f = (z1^3/3 + u z1) + z2^3/3 keeps variables separated, so the
        # truncated problem factorizes exactly
        u_points = [0.2, 0.15 + 0.1j]
        for u in u_points:
            left = spectrum_of({(3,): 1 / 3, (1,): u}, 14, eps_h=1e-2)
            right = spectrum_of(A2, 14, eps_h=1e-2)
            split = SplitSystem([left, right])
            assert split.kernel_counts() == {0: 0, 1: 0, 2: 4, 3: 0, 4: 0}
            assert split.total_harmonics == 4
            assert split.n == 2

    def test_genuine_two_variable_assembly(self):
        terms = {(3, 0): 1.0, (0, 3): 1.0, (1, 1): 0.1}
        ops = assemble_operators(terms, None, Truncation(2, 4))
        sr = eigendecompose(ops)
        srd = eigendecompose(ops, route="direct")
        # all chains fit in the padding: routes coincide
        for k in range(5):
            assert np.max(np.abs(ops.delta_blocks[k]
                                 - ops.delta_direct_blocks[k])) < 1e-10
        # mirror degrees carry the same spectrum
        for k in (0, 1):
            assert np.max(np.abs(sr.eigenvalues(k)
                                 - sr.eigenvalues(4 - k))) < 1e-10
        assert min(np.min(sr.eigenvalues(k)) for k in range(5)) > -1e-8
        assert np.max(np.abs(sr.eigenvalues(2) - srd.eigenvalues(2))) < 1e-9


class TestInterface:
    def test_dense_cap_refuses_oversized_blocks(self):
        ops = assemble_operators(A2, None, Truncation(1, 12),
                                 both_routes=False)
        with pytest.raises(PolyError, match="cap"):
            eigendecompose(ops, max_dense=100)

    def test_truncation_validation(self):
        with pytest.raises(PolyError):
            Truncation(0, 10)
        with pytest.raises(PolyError):
            Truncation(1, 1)
        with pytest.raises(PolyError):
            Truncation(1, 10, omega=0.0)
        with pytest.raises(PolyError):
            Truncation(1, 10, p_buf=-1)

    def test_deformation_spec_entry_point(self):
        f0 = parse_poly("z1^3/3")
        spec = classify_deformation(f0, [("u", "z1")])
        tr = Truncation(1, 10)
        via_spec = assemble_operators(spec, [0.3], tr, both_routes=False)
        via_terms = assemble_operators(A2_DEF, None, tr, both_routes=False)
        assert np.max(np.abs(via_spec.delta_blocks[1]
                             - via_terms.delta_blocks[1])) < 1e-12
        assert via_spec.star_warning is None

    def test_weight_gap_warning_is_attached(self):
        f0 = parse_poly("z1^2 + z1*z2^3")
        spec = classify_deformation(f0, [("u", "z2")])
        assert not spec.star_ok
        ops = assemble_operators(spec, [0.05], Truncation(2, 3),
                                 both_routes=False)
        assert ops.star_warning is not None

    def test_holomorphy_enforced(self):
        with pytest.raises(PolyError, match="holomorphic"):
            assemble_operators({(1, 1): 1.0}, None, Truncation(1, 6),
                               both_routes=False)

    def test_omega_sweep_prefers_exact_frequency(self):
        # the quadratic is diagonal at omega = 2, so refinement drift
        # vanishes there and nowhere else
        drifts = omega_sweep({(2,): 0.5}, None, n=1, levels=10,
                             omegas=(1.0, 2.0, 3.0))
        assert min(drifts, key=drifts.get) == 2.0
        assert drifts[2.0] < 1e-10


@settings(max_examples=8, deadline=None)
@given(c3=st.complex_numbers(min_magnitude=0.2, max_magnitude=1.0),
       c1=st.complex_numbers(max_magnitude=0.5))
def test_random_cubic_structure(c3, c1):
    terms = {(3,): c3, (1,): c1}
    ops = assemble_operators(terms, None, Truncation(1, 8))
    sr = eigendecompose(ops)
    neg = {e: -c for e, c in terms.items()}
    sn = eigendecompose(assemble_operators(neg, None, Truncation(1, 8),
                                           both_routes=False))
    for k in range(3):
        lam = sr.eigenvalues(k)
        assert np.min(lam) > -1e-8 * max(1.0, np.max(lam))
        assert np.max(np.abs(lam - sn.eigenvalues(k))) < 1e-9
    assert np.array_equal(sr.eigenvalues(0), sr.eigenvalues(2))
