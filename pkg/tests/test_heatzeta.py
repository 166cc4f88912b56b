"""Heat traces, ladder fits, zeta torsion: exact oracles on small systems."""

import math
from fractions import Fraction
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singtorsion.heatzeta import (
    AsymptoticFit,
    HeatTraceSeries,
    choose_fit_window,
    deformation_fit,
    fit_small_t,
    heat_traces,
    double_trace,
    ladder_exponents,
    log_t_grid,
    split_fit,
    symmetry_checks,
    to_eigenbasis,
    torsion,
    trace_derivative_check,
    weighted_supertrace,
)
from singtorsion.polycore import PolyError
from singtorsion.spectral import (
    EigenBlock,
    SplitSystem,
    SpectrumResult,
    Truncation,
    assemble_operators,
    eigendecompose,
)

# leading ladder weight of the cubic germ, sqrt(2 pi) / 4
D_LEAD = math.sqrt(2 * math.pi) / 4

GRID = log_t_grid(0.05, 2.0, 96)


@lru_cache(maxsize=None)
def a2(levels, u=0.3, vectors=False):
    """Cubic germ spectrum; eps_h override per the low-truncation note."""
    terms = {(3,): Fraction(1, 3)}
    if u:
        terms[(1,)] = u
    ops = assemble_operators(terms, None, Truncation(1, levels),
                            both_routes=False)
    return eigendecompose(ops, eps_h=1e-2, vectors=vectors)


@lru_cache(maxsize=None)
def a2_series(levels, u=0.3):
    return heat_traces(a2(levels, u), GRID)


def synthetic_series(y, n=1):
    """Series whose i = 2 weighted supertrace equals y on GRID.

    A single degree-2 trace with weight (+1) * 2^2 realizes any target.
    """
    return HeatTraceSeries(t_grid=GRID, traces={2: np.asarray(y) / 4.0},
                           harmonic_counts={2: 0}, n=n, meta={}, source=None)


def fabricated_spectrum(levels):
    """SpectrumResult with hand-picked eigenvalues per degree."""
    blocks, hcounts = {}, {}
    for k, lam in levels.items():
        arr = np.array(sorted(lam), dtype=float)
        blocks[k] = EigenBlock(arr, None, k)
        hcounts[k] = int(np.sum(arr <= 1e-12))
    return SpectrumResult(Truncation(1, 4), blocks, 1e-6, hcounts, 1e9,
                          None, {(3,): Fraction(1, 3)}, None)


def constant_only_fit(value, t_lo=1e-6):
    """Exact one-slot ladder for a finite spectrum (constant term only)."""
    return AsymptoticFit(exponents=[Fraction(0)],
                         coefficients=np.array([float(value)]),
                         sigmas=np.zeros(1), zero_flags=np.zeros(1, bool),
                         p=2, i0=0, window=(t_lo, 1.0),
                         residual_rms=0.0, condition=1.0)


def finite_spectrum_torsion(levels):
    """Closed form: (1/2) sum_k (-1)^k k^2 sum_j log lambda_kj, kernels
    dropped.  Follows from differentiating the spectral zeta sum at 0."""
    return 0.5 * sum((-1) ** k * k ** 2 * sum(math.log(x) for x in lam
                                              if x > 1e-12)
                     for k, lam in levels.items())


class TestHeatTraceSeries:
    def test_grid_validation(self):
        with pytest.raises(PolyError, match="lo < hi"):
            log_t_grid(0.0, 1.0)
        with pytest.raises(PolyError, match="lo < hi"):
            log_t_grid(1.0, 0.5)
        with pytest.raises(PolyError, match="t > 0"):
            heat_traces(a2(8), np.array([0.5, -1.0]))
        with pytest.raises(PolyError, match="non-empty"):
            heat_traces(a2(8), np.array([]))

    def test_traces_positive_and_decreasing(self):
        ser = a2_series(16)
        for k in ser.degrees:
            tr = ser.trace(k)
            assert np.all(tr > 0)
            assert np.all(np.diff(tr) < 0)

    def test_mirror_degree_traces_coincide(self):
        ser = a2_series(16)
        assert np.max(np.abs(ser.trace(0) - ser.trace(2))) < 1e-12

    def test_witten_index_plateau(self):
        ser = a2_series(28)
        m = GRID >= 0.2
        assert np.max(np.abs(ser.witten_index()[m] + 2)) < 4e-4

    def test_low_weight_supertraces_vanish(self):
        # the unweighted and first-weighted supertraces of e^{-t Delta} - Pi
        # vanish identically; truncation leaves a small-t remnant only
        ser = a2_series(28)
        m = GRID >= 0.2
        for i in (0, 1):
            assert np.max(np.abs(ser.supertrace(i)[m])) < 4e-4

    def test_subtracted_supertrace_decays(self):
        late = heat_traces(a2(16), np.array([20.0, 30.0]))
        assert abs(late.supertrace(2)[1]) < 1e-12

    def test_trace_derivative_consistency(self):
        assert trace_derivative_check(a2(20), [0.3, 0.7, 1.5]) < 1e-6


class TestWindowAndFits:
    def test_refinement_window_tightens_with_tolerance(self):
        lo_loose, hi = choose_fit_window(a2_series(20), a2_series(28),
                                         i=2, rel_tol=5e-4)
        lo_strict, _ = choose_fit_window(a2_series(20), a2_series(28),
                                         i=2, rel_tol=2e-4)
        assert hi == pytest.approx(2.0)
        assert lo_strict >= lo_loose
        assert lo_strict < 0.25

    def test_window_needs_shared_grid(self):
        other = heat_traces(a2(16), log_t_grid(0.05, 2.0, 40))
        with pytest.raises(PolyError, match="shared t-grid"):
            choose_fit_window(other, a2_series(20))

    def test_ladder_exponent_spacing(self):
        alphas = ladder_exponents(2, 1, guard_terms=4)
        assert alphas[0] == Fraction(-3, 2)
        assert all(b - a == Fraction(1, 4)
                   for a, b in zip(alphas, alphas[1:]))
        assert Fraction(0) in alphas
        assert alphas[-1] == Fraction(1)
        assert ladder_exponents(3, 2, 2)[0] == Fraction(-8, 3)

    def test_deformation_fit_recovers_exact_ladder(self):
        yu = (D_LEAD * GRID ** -1.5 - 0.09 * D_LEAD * GRID ** -0.5
              - 1 / 3 + 0.044 * GRID + 0.089 * GRID ** 1.5)
        y0 = D_LEAD * GRID ** -1.5 - 1 / 3 + 0.102 * GRID ** 1.5
        fit = deformation_fit(synthetic_series(yu), synthetic_series(y0),
                              p=2, i=2, window=(0.15, 1.0),
                              noise_floor=1e-8)
        expected = {Fraction(-3, 2): D_LEAD,
                    Fraction(-1, 2): -0.09 * D_LEAD,
                    Fraction(0): -1 / 3,
                    Fraction(1): 0.044,
                    Fraction(3, 2): 0.089}
        for alpha, target in expected.items():
            assert fit.coefficient(alpha) == pytest.approx(target, abs=1e-10)
        populated = {a for a, z in zip(fit.exponents, fit.zero_flags)
                     if not z}
        assert populated == set(expected)
        assert fit.diagnostic.startswith("constant term")

    def test_deformation_fit_flags_null_series(self):
        rng = np.random.default_rng(7)
        fit = deformation_fit(
            synthetic_series(rng.normal(0, 1e-9, len(GRID))),
            synthetic_series(rng.normal(0, 1e-9, len(GRID))),
            p=2, i=2, window=(0.15, 1.0), noise_floor=1e-5)
        assert bool(np.all(fit.zero_flags))
        assert fit.constant_term == 0.0

    def test_deformation_fit_input_validation(self):
        y = D_LEAD * GRID ** -1.5
        with pytest.raises(PolyError, match="same"):
            deformation_fit(synthetic_series(y), synthetic_series(y, n=2),
                            p=2)
        other = HeatTraceSeries(t_grid=log_t_grid(0.05, 2.0, 40),
                                traces={2: np.zeros(40)},
                                harmonic_counts={2: 0}, n=1, meta={},
                                source=None)
        with pytest.raises(PolyError, match="shared t-grid"):
            deformation_fit(synthetic_series(y), other, p=2)
        with pytest.raises(PolyError, match="positive"):
            deformation_fit(synthetic_series(y), synthetic_series(y), p=2,
                            tail_exponents=(-1, 1))

    def test_deformation_fit_on_refined_pair(self):
        # truncation 28 against its origin companion; tolerances track the
        # measured truncation bias at this size, not the production run
        lo, _ = choose_fit_window(a2_series(20), a2_series(28), i=2,
                                  rel_tol=2e-4)
        fit = deformation_fit(a2_series(28), a2_series(28, 0.0), p=2, i=2,
                              window=(lo, 1.0), noise_floor=1e-4)
        assert fit.coefficient(Fraction(-3, 2)) == pytest.approx(
            D_LEAD, rel=5e-3)
        assert fit.coefficient(Fraction(-1, 2)) == pytest.approx(
            -0.09 * D_LEAD, rel=8e-2)
        assert fit.constant_term == pytest.approx(-1 / 3, rel=5e-2)
        assert "rel diff" in fit.diagnostic

    def test_fit_small_t_pins_leading_slot_only(self):
        # collinear quarter-spaced powers: the single-series fit is trusted
        # for its leading slot and the on-window residual, nothing else
        y = D_LEAD * GRID ** -1.5 - 1 / 3 + 0.05 * GRID
        fit = fit_small_t(synthetic_series(y), p=2, i=2,
                          window=(0.15, 1.0), noise_floor=1e-8)
        assert fit.coefficient(Fraction(-3, 2)) == pytest.approx(
            D_LEAD, rel=1e-3)
        assert fit.residual_rms < 1e-6

    def test_fit_window_must_hold_samples(self):
        y = D_LEAD * GRID ** -1.5
        with pytest.raises(PolyError, match="fit window holds"):
            fit_small_t(synthetic_series(y), p=2, window=(0.97, 1.0))

    def test_split_fit_composes_with_index_weights(self):
        def factor_fit(coefs):
            alphas = ladder_exponents(2, 1, 4)
            arr = np.zeros(len(alphas))
            flags = np.ones(len(alphas), dtype=bool)
            for a, c in coefs.items():
                arr[alphas.index(a)] = c
                flags[alphas.index(a)] = False
            return AsymptoticFit(exponents=alphas, coefficients=arr,
                                 sigmas=np.zeros(len(alphas)),
                                 zero_flags=flags, p=2,
                                 i0=alphas.index(Fraction(0)),
                                 window=(0.2, 1.0), residual_rms=1e-9,
                                 condition=10.0)

        fa = factor_fit({Fraction(-3, 2): 0.5, Fraction(0): -0.25})
        fb = factor_fit({Fraction(-3, 2): 0.7, Fraction(1): 0.1})
        combined = split_fit([fa, fb], [-2, -3])
        assert combined.exponents[0] == Fraction(-3)
        # each factor is weighted by the product of the other indices
        assert combined.coefficient(Fraction(-3, 2)) == pytest.approx(
            -3 * 0.5 + -2 * 0.7)
        assert combined.coefficient(Fraction(0)) == pytest.approx(-3 * -0.25)
        assert combined.coefficient(Fraction(1)) == pytest.approx(-2 * 0.1)
        assert combined.i0 == combined.exponents.index(Fraction(0))

        with pytest.raises(PolyError, match="one Witten index"):
            split_fit([fa, fb], [-2])
        bad = AsymptoticFit(exponents=ladder_exponents(3, 1, 2),
                            coefficients=np.zeros(9), sigmas=np.zeros(9),
                            zero_flags=np.ones(9, bool), p=3, i0=8,
                            window=(0.2, 1.0), residual_rms=0.0,
                            condition=1.0)
        with pytest.raises(PolyError, match="disagree"):
            split_fit([fa, bad], [-2, -2])


class TestTorsion:
    def test_finite_spectrum_closed_form(self):
        for levels in ({0: (0.9,), 1: (0.0, 0.7), 2: (1.3,)},
                       {0: (0.5, 2.0), 1: (0.8, 1.1), 2: (1.7,)}):
            src = fabricated_spectrum(levels)
            ser = heat_traces(src, GRID)
            const = sum((-1) ** k * k ** 2
                        * sum(1 for x in lam if x > 1e-12)
                        for k, lam in levels.items())
            oracle = finite_spectrum_torsion(levels)
            got_q = torsion(ser, constant_only_fit(const), i=2)
            got_e = torsion(ser, constant_only_fit(const), i=2,
                            method="exact")
            # the 1e-6 lower cutoff leaves an O(t_lo) remainder
            assert got_q.value == pytest.approx(oracle, abs=1e-5)
            assert got_e.value == pytest.approx(oracle, abs=1e-5)
            assert abs(got_q.value - got_e.value) < 1e-9

    @settings(max_examples=10, deadline=None)
    @given(lam1=st.lists(st.floats(0.3, 5.0), min_size=1, max_size=3),
           lam2=st.lists(st.floats(0.3, 5.0), min_size=1, max_size=3))
    def test_finite_spectrum_closed_form_random(self, lam1, lam2):
        levels = {1: tuple(lam1), 2: tuple(lam2)}
        ser = heat_traces(fabricated_spectrum(levels), GRID)
        const = -len(lam1) + 4 * len(lam2)
        got = torsion(ser, constant_only_fit(const), i=2, method="exact")
        assert got.value == pytest.approx(finite_spectrum_torsion(levels),
                                          abs=2e-5)

    def test_residual_gate_rejects_bad_fit(self):
        ser = a2_series(16)
        bad = AsymptoticFit(exponents=[Fraction(0)],
                            coefficients=np.array([0.0]),
                            sigmas=np.zeros(1), zero_flags=np.zeros(1, bool),
                            p=2, i0=0, window=(0.2, 1.0),
                            residual_rms=1e3, condition=1.0)
        with pytest.raises(PolyError, match="residual"):
            torsion(ser, bad, i=2)

    def test_series_must_carry_its_spectrum(self):
        y = D_LEAD * GRID ** -1.5
        with pytest.raises(PolyError, match="rebuild"):
            torsion(synthetic_series(y), constant_only_fit(0.0), i=2)

    def test_quadrature_and_exact_routes_agree(self):
        lo, _ = choose_fit_window(a2_series(20), a2_series(28), i=2,
                                  rel_tol=2e-4)
        fit = deformation_fit(a2_series(28), a2_series(28, 0.0), p=2, i=2,
                              window=(lo, 1.0), noise_floor=1e-4)
        tq = torsion(a2_series(28), fit, i=2)
        te = torsion(a2_series(28), fit, i=2, method="exact")
        assert abs(tq.value - te.value) < 1e-9
        assert tq.value == pytest.approx(sum(tq.parts))

    def test_torsion_stable_under_truncation(self):
        # pinned against the production-truncation value of the same
        # pipeline; guards against silent drift of any assembly stage
        lo, _ = choose_fit_window(a2_series(20), a2_series(28), i=2,
                                  rel_tol=2e-4)
        fit = deformation_fit(a2_series(28), a2_series(28, 0.0), p=2, i=2,
                              window=(lo, 1.0), noise_floor=1e-4)
        tor = torsion(a2_series(28), fit, i=2)
        assert tor.value == pytest.approx(0.1616, abs=5e-3)

    def test_split_torsion_additivity(self):
        # variable-separated double cubic against its factors; ladder
        # composed through split_fit, integrals from the combined spectrum
        lo, _ = choose_fit_window(a2_series(14), a2_series(20), i=2,
                                  rel_tol=5e-4)
        fit_f = deformation_fit(a2_series(14), a2_series(14, 0.0), p=2,
                                i=2, window=(lo, 1.0), noise_floor=3e-4)
        tor_f = torsion(a2_series(14), fit_f, i=2)
        split = SplitSystem([a2(14), a2(14)])
        combined = split_fit([fit_f, fit_f], [-2, -2])
        tor_s = torsion(heat_traces(split, GRID), combined, i=2)
        rhs = -4.0 * tor_f.value
        assert tor_s.value == pytest.approx(rhs, rel=5e-2)


class TestKernelBilinears:
    def test_identity_insertion_matches_spectral_sum(self):
        sv = a2(12, vectors=True)
        blocks = to_eigenbasis(sv, np.eye(144))
        for t in (0.4, 1.0):
            got = double_trace(sv, blocks, blocks, t)
            expect = t * sum((-1) ** k * np.sum(np.exp(-t * sv.eigenvalues(k)))
                             for k in sv.degrees)
            assert abs(got - expect) < 1e-12
            # the spectral sum itself sits on the index plateau
            assert abs(got - (-2.0 * t)) < 5e-3

    def test_derivative_kernel_matches_finite_difference(self):
        sv = a2(12, vectors=True)
        blocks = to_eigenbasis(sv, np.eye(144))
        t, h = 0.7, 7e-6
        fd = (double_trace(sv, blocks, blocks, t + h)
              - double_trace(sv, blocks, blocks, t - h)) / (2 * h)
        assert abs(double_trace(sv, blocks, blocks, t, derivative=True)
                   - fd) < 1e-8

    def test_near_degenerate_pair_uses_continuous_branch(self):
        src = fabricated_spectrum({1: (1.0, 1.0 + 1e-12)})
        ones = {1: np.ones((2, 2))}
        t = 0.8
        got = double_trace(src, ones, ones, t)
        assert got == pytest.approx(-4.0 * t * math.exp(-t), rel=1e-9)

    def test_weighted_supertrace_identity_blocks(self):
        sv = a2(12, vectors=True)
        blocks = to_eigenbasis(sv, np.eye(144))
        t = 0.7
        got = weighted_supertrace(sv, blocks, t, number_power=2)
        expect = sum((-1) ** k * k ** 2
                     * np.sum(np.exp(-t * sv.eigenvalues(k)))
                     for k in sv.degrees)
        assert abs(got - expect) < 1e-12

    def test_eigenbasis_needs_full_vectors(self):
        with pytest.raises(PolyError, match="eigenvectors were not"):
            to_eigenbasis(a2(12), np.eye(144))

    def test_eigenbasis_preserves_hermiticity(self):
        sv = a2(12, vectors=True)
        rng = np.random.default_rng(3)
        h = rng.normal(size=(144, 144)) + 1j * rng.normal(size=(144, 144))
        h = h + h.conj().T
        blocks = to_eigenbasis(sv, h)
        for mat in blocks.values():
            assert np.max(np.abs(mat - mat.conj().T)) < 1e-10


class TestSymmetryAndSplit:
    def test_sign_flip_report(self):
        trust = log_t_grid(0.25, 2.0, 48)
        plus = a2(16)
        minus = eigendecompose(
            assemble_operators({(3,): Fraction(-1, 3), (1,): -0.3}, None,
                               Truncation(1, 16), both_routes=False),
            eps_h=1e-2)
        rep = symmetry_checks(plus, minus, trust)
        assert max(rep["same_degree_distance"].values()) < 1e-10
        assert max(rep["mirror_degree_distance"].values()) < 1e-10
        assert rep["q_max"] < 1.5e-2
        assert rep["q_antisymmetry"] < 3e-2

    def test_split_traces_equal_direct_assembly(self):
        # two-variable double cubic assembled whole, against the tensor
        # composition of its single-variable factors
        direct = eigendecompose(
            assemble_operators({(3, 0): Fraction(1, 3),
                                (0, 3): Fraction(1, 3)}, None,
                               Truncation(2, 4), both_routes=False),
            eps_h=1e-2)
        factor = a2(4, 0.0)
        tg = log_t_grid(0.1, 2.0, 24)
        dser = heat_traces(direct, tg)
        cser = heat_traces(SplitSystem([factor, factor]), tg)
        assert dser.degrees == cser.degrees == [0, 1, 2, 3, 4]
        for k in dser.degrees:
            assert np.max(np.abs(dser.trace(k) - cser.trace(k))) < 1e-10

    def test_split_witten_index_is_index_product(self):
        split = SplitSystem([a2(14), a2(14)])
        ser = heat_traces(split, log_t_grid(0.5, 2.0, 24))
        assert np.max(np.abs(ser.witten_index() - 4.0)) < 2e-2
        assert ser.harmonic_counts == {0: 0, 1: 0, 2: 4, 3: 0, 4: 0}
        assert ser.n == 2
