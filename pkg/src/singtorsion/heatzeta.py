"""Heat traces, small-t asymptotics, zeta-regularized torsion, double traces.

Everything here is a function of eigendata only.  Heat traces are spectral
sums; the two torsion integrals are evaluated twice, by composite Gauss
quadrature on a logarithmic axis (primary) and in closed form through the
exponential integral (cross-check); the small-t regularization subtracts a
fitted power ladder whose exponents step by 1/(2p).

Modes detected as harmonic are treated as exact zeros: a truncated kernel
approximant at 1e-10 would otherwise leak a spurious logarithm into the
large-t integral.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import exp1

from .polycore import PolyError
from .spectral import FormOperatorMatrix, SplitSystem, SpectrumResult

__all__ = [
    "HeatTraceSeries",
    "AsymptoticFit",
    "TorsionResult",
    "log_t_grid",
    "heat_traces",
    "fit_small_t",
    "deformation_fit",
    "choose_fit_window",
    "torsion",
    "to_eigenbasis",
    "double_trace",
    "weighted_supertrace",
    "symmetry_checks",
    "EULER_GAMMA",
]

EULER_GAMMA = float(np.euler_gamma)


def log_t_grid(lo: float = 0.05, hi: float = 2.0, num: int = 40) -> np.ndarray:
    if lo <= 0 or hi <= lo:
        raise PolyError("need 0 < lo < hi")
    return np.geomspace(lo, hi, num)


def _factor_traces(source, t_grid):
    """Per-degree Tr e^{-t Delta^k} (harmonic modes counted as e^0 = 1)."""
    if isinstance(source, SpectrumResult):
        out = {}
        for k in source.degrees:
            lam = source.nonzero_eigenvalues(k)
            h = source.harmonic_counts[k]
            out[k] = np.exp(-np.outer(t_grid, lam)).sum(axis=1) + h
        return out
    if isinstance(source, SplitSystem):
        conv: dict[int, np.ndarray] = {0: np.ones_like(t_grid)}
        for fac in source.factors:
            part = _factor_traces(fac, t_grid)
            nxt: dict[int, np.ndarray] = {}
            for k0, tr0 in conv.items():
                for k1, tr1 in part.items():
                    key = k0 + k1
                    add = tr0 * tr1
                    nxt[key] = nxt.get(key, 0) + add
            conv = nxt
        return conv
    raise PolyError(f"unsupported spectral source {type(source).__name__}")


def _harmonic_counts(source) -> dict[int, int]:
    if isinstance(source, SpectrumResult):
        return dict(source.harmonic_counts)
    return source.kernel_counts()


def _half_dimension(source) -> int:
    if isinstance(source, SpectrumResult):
        return source.trunc.n
    return source.n


@dataclass
class HeatTraceSeries:
    """Per-degree heat traces on a t-grid, plus weighted supertraces."""

    t_grid: np.ndarray
    traces: dict[int, np.ndarray]
    harmonic_counts: dict[int, int]
    n: int
    meta: dict = field(default_factory=dict)
    source: object = None

    @property
    def degrees(self) -> list[int]:
        return sorted(self.traces)

    def trace(self, k: int) -> np.ndarray:
        return self.traces[k]

    def supertrace(self, i: int = 0, subtracted: bool = True) -> np.ndarray:
        """Sum_k (-1)^k k^i (Tr e^{-t Delta^k} - h_k), or without the -h_k."""
        acc = np.zeros_like(self.t_grid)
        for k, tr in self.traces.items():
            w = (-1) ** k * k ** i if i else (-1) ** k
            sub = self.harmonic_counts.get(k, 0) if subtracted else 0
            acc = acc + w * (tr - sub)
        return acc

    def witten_index(self) -> np.ndarray:
        return self.supertrace(0, subtracted=False)

    def to_rows(self):
        """CSV-ready rows: t, per-degree traces, supertraces, Witten column."""
        cols = (["t"] + [f"trace_deg{k}" for k in self.degrees]
                + ["str_n0", "str_n1", "str_n2", "witten"])
        strs = [self.supertrace(i) for i in (0, 1, 2)]
        wit = self.witten_index()
        rows = [cols]
        for a, t in enumerate(self.t_grid):
            row = [f"{t:.12g}"]
            row += [f"{self.traces[k][a]:.12g}" for k in self.degrees]
            row += [f"{strs[0][a]: .6e}", f"{strs[1][a]: .6e}",
                    f"{strs[2][a]: .6e}", f"{wit[a]:.12g}"]
            rows.append(row)
        return rows


def heat_traces(source, t_grid, meta: dict | None = None) -> HeatTraceSeries:
    """Spectral heat traces of a SpectrumResult or a SplitSystem."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) == 0:
        raise PolyError("t_grid must be a non-empty 1-d array")
    if np.any(t_grid <= 0):
        raise PolyError("heat traces need t > 0")
    traces = _factor_traces(source, t_grid)
    return HeatTraceSeries(
        t_grid=t_grid,
        traces=traces,
        harmonic_counts=_harmonic_counts(source),
        n=_half_dimension(source),
        meta=dict(meta or {}),
        source=source)


def trace_derivative_check(source, t_points, rel_step: float = 2e-4) -> float:
    """Worst relative mismatch between -Tr Delta e^{-t Delta} and a central
    difference of Tr e^{-t Delta} over the given t points."""
    worst = 0.0
    traces = lambda ts: _factor_traces(source, np.asarray(ts))
    for t in t_points:
        h = rel_step * t
        tr = traces([t - h, t + h])
        if isinstance(source, SpectrumResult):
            degs = source.degrees
            exact = {k: -(source.nonzero_eigenvalues(k)
                          * np.exp(-t * source.nonzero_eigenvalues(k))).sum()
                     for k in degs}
        else:
            raise PolyError("derivative check runs on a single spectrum")
        for k in degs:
            fd = (tr[k][1] - tr[k][0]) / (2 * h)
            scale = max(abs(exact[k]), 1e-30)
            worst = max(worst, abs(fd - exact[k]) / scale)
    return worst


# ---------------------------------------------------------------------------
# small-t ladder fit
# ---------------------------------------------------------------------------

@dataclass
class AsymptoticFit:
    """Weighted power-ladder fit of a weighted supertrace near t = 0."""

    exponents: list[Fraction]
    coefficients: np.ndarray
    sigmas: np.ndarray
    zero_flags: np.ndarray
    p: int
    i0: int                      # index of the constant term in `exponents`
    window: tuple[float, float]
    residual_rms: float
    condition: float
    diagnostic: str | None = None

    def coefficient(self, alpha) -> float:
        a = Fraction(alpha) if not isinstance(alpha, Fraction) else alpha
        return float(self.coefficients[self.exponents.index(a)])

    @property
    def constant_term(self) -> float:
        return float(self.coefficients[self.i0])

    def ladder_sum(self, t: np.ndarray, upto: int | None = None) -> np.ndarray:
        upto = self.i0 if upto is None else upto
        t = np.asarray(t, dtype=float)
        acc = np.zeros_like(t)
        for a in range(upto + 1):
            acc = acc + self.coefficients[a] * t ** float(self.exponents[a])
        return acc

    def to_dict(self) -> dict:
        return {
            "exponents": [str(a) for a in self.exponents],
            "coefficients": [float(c) for c in self.coefficients],
            "sigmas": [float(s) for s in self.sigmas],
            "zero_flags": [bool(z) for z in self.zero_flags],
            "p": self.p,
            "i0": self.i0,
            "window": list(self.window),
            "residual_rms": self.residual_rms,
            "condition": self.condition,
            "diagnostic": self.diagnostic,
        }


def ladder_exponents(p: int, n: int, guard_terms: int = 2) -> list[Fraction]:
    """-(p+1)n/p, stepping by 1/(2p), through 0 plus guard terms."""
    start = Fraction(-(p + 1) * n, p)
    step = Fraction(1, 2 * p)
    count = int((0 - start) / step) + 1 + guard_terms
    return [start + a * step for a in range(count)]


def _ladder_design(ts, y, alphas, scale):
    X = np.stack([ts ** float(a) for a in alphas], axis=1)
    w = 1.0 / (np.abs(y) + 1e-2 * (1.0 + scale))
    return X, X * w[:, None], y * w


def _select_ladder(ts, y, alphas, noise_floor=0.0, max_slots=6,
                   rss_factor=3.0):
    """Subset-searched weighted fit of y(t) against t^alpha columns.

    Every subset of at most ``max_slots`` columns is fit by relatively
    weighted least squares; subsets whose weighted residual is within
    ``rss_factor`` of the best qualify.  Each qualifying subset is refit
    on the geometric half of the window, and the subset whose nonpositive
    exponents drift least wins (ties broken toward fewer slots): spurious
    subsets reproduce the data only by cancellation, which the shrunken
    window breaks.  Selected coefficients below max(noise_floor, 3 sigma)
    are pruned afterwards, highest sigma first.

    Returns (coefficients, sigmas, zero_flags, residual_rms, condition,
    drift_score) over the full column set.
    """
    m = len(alphas)
    npts = len(ts)
    scale = float(np.max(np.abs(y)))
    X, Xw, yw = _ladder_design(ts, y, alphas, scale)
    cond_full = float(np.linalg.cond(Xw / np.linalg.norm(Xw, axis=0)))

    half = math.sqrt(ts[0] * ts[-1])
    hmask = ts <= half * (1 + 1e-12)
    _, Xwh, ywh = _ladder_design(ts[hmask], y[hmask], alphas, scale)

    subs = []
    rmss = []
    for r in range(1, min(max_slots, m) + 1):
        for sub in itertools.combinations(range(m), r):
            cols = list(sub)
            c, _, _, _ = np.linalg.lstsq(Xw[:, cols], yw, rcond=None)
            rss = float(np.sum((yw - Xw[:, cols] @ c) ** 2))
            subs.append(cols)
            rmss.append(math.sqrt(rss / npts))
    best_rms = min(rmss)

    best = (np.inf, m + 1, [], np.zeros(0))
    for cols, rms_w in zip(subs, rmss):
        if rms_w > rss_factor * best_rms:
            continue
        if len(ts[hmask]) < len(cols) + 2:
            continue
        cf, _, _, _ = np.linalg.lstsq(Xw[:, cols], yw, rcond=None)
        ch, _, _, _ = np.linalg.lstsq(Xwh[:, cols], ywh, rcond=None)
        cscale = float(np.max(np.abs(cf)))
        lad = [j for j, c in enumerate(cols) if float(alphas[c]) <= 0.0]
        lad = lad or list(range(len(cols)))
        drift = max(abs(cf[j] - ch[j]) / (abs(cf[j]) + 1e-3 * cscale)
                    for j in lad)
        key = (drift, len(cols))
        if key < best[:2]:
            best = (drift, len(cols), cols, cf)
    drift_score, _, sel, _ = best

    coefs = np.zeros(m)
    sigs = np.zeros(m)
    while sel:
        A = Xw[:, sel]
        c, _, _, _ = np.linalg.lstsq(A, yw, rcond=None)
        resid_w = yw - A @ c
        dof = max(1, npts - len(sel))
        var = float(resid_w @ resid_w) / dof
        cov = np.linalg.pinv(A.T @ A) * var
        sg = np.sqrt(np.maximum(np.diag(cov), 0))
        weak = [j for j, (cc, ss) in enumerate(zip(c, sg))
                if abs(cc) < max(noise_floor, 3 * ss)]
        if not weak:
            coefs[sel] = c
            sigs[sel] = sg
            break
        worst = weak[int(np.argmax([sg[j] for j in weak]))]
        del sel[worst]
    zero = np.ones(m, dtype=bool)
    zero[sel] = False

    resid = y - X @ coefs
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return coefs, sigs, zero, rms, cond_full, drift_score


def _fit_window_mask(t, window, n_alphas):
    mask = (t >= window[0] - 1e-15) & (t <= window[1] + 1e-15)
    ts = t[mask]
    if len(ts) < n_alphas + 2:
        raise PolyError(
            f"fit window holds {len(ts)} samples for {n_alphas} ladder "
            "slots; widen the window or the grid")
    return mask, ts


def fit_small_t(series: HeatTraceSeries, p: int, i: int = 2,
                window: tuple[float, float] | None = None,
                guard_terms: int = 3,
                noise_floor: float | None = None,
                max_slots: int = 6,
                rss_factor: float = 3.0) -> AsymptoticFit:
    """Fit Str(-1)^N N^i (e^{-t Delta} - Pi) to its small-t power ladder.

    The exponent ladder steps by 1/(2p), which makes neighboring powers
    nearly collinear on a one-decade window: an unconstrained fit of every
    slot scatters a clean three-term expansion across the whole ladder with
    a tiny residual.  Slot selection therefore runs through _select_ladder
    (subset search, then a window-halving stability race).  Unselected
    slots stay in the result with coefficient zero and their flag set.

    A single series only pins down its leading slot this way; sub-leading
    slots can be traded against smooth positive powers at matching residual
    and matching stability, so their fitted values are not trustworthy.
    Use deformation_fit with a second series at the family origin when
    those coefficients matter.

    The caller is responsible for a window where the truncated trace still
    represents the operator (see choose_fit_window); ``noise_floor``
    should be set near the truncation disagreement so that a series which
    is pure truncation artifact (the i = 0, 1 supertraces) selects nothing.
    """
    alphas = ladder_exponents(p, series.n, guard_terms)
    i0 = alphas.index(Fraction(0))
    t = series.t_grid
    if window is None:
        window = (float(t[0]), float(t[-1]))
    mask, ts = _fit_window_mask(t, window, len(alphas))
    y = series.supertrace(i)[mask]

    floor = noise_floor if noise_floor is not None else 0.0
    coefs, sigs, zero, rms, cond_full, drift_score = _select_ladder(
        ts, y, alphas, floor, max_slots, rss_factor)
    diag = None
    if not np.all(zero) and drift_score > 0.5:
        diag = (f"ladder coefficients drift {drift_score:.2f} under window "
                "halving; the window is too narrow or too noisy to "
                "separate the slots")
    return AsymptoticFit(
        exponents=alphas, coefficients=coefs, sigmas=sigs, zero_flags=zero,
        p=p, i0=i0, window=(float(ts[0]), float(ts[-1])),
        residual_rms=rms, condition=cond_full, diagnostic=diag)


def _detect_leading(ts, y, candidates, noise_floor):
    """Leading exponent of y among the candidates, from single-slot fits on
    the left geometric third of the window; None when y sits at the floor."""
    cut = ts[0] * (ts[-1] / ts[0]) ** (1.0 / 3.0)
    msk = ts <= cut * (1 + 1e-12)
    tl, yl = ts[msk], y[msk]
    if float(np.max(np.abs(yl))) <= 10.0 * noise_floor:
        return None
    best, best_r = None, np.inf
    for a in candidates:
        col = tl ** float(a)
        c = float(np.dot(col, yl) / np.dot(col, col))
        r = float(np.sqrt(np.mean((yl - c * col) ** 2)))
        if r < best_r:
            best, best_r = a, r
    return best


def _stage_ls(ts, y, slots, noise_floor):
    """Relatively weighted least squares on an explicit slot basis.

    Slots whose coefficient lands under max(noise_floor, 3 sigma) are
    pruned, highest sigma first, and the fit repeats.  Returns the kept
    slots with coefficients, sigmas and the design condition number.
    """
    slots = list(slots)
    scale = float(np.max(np.abs(y)))
    while slots:
        X = np.stack([ts ** float(a) for a in slots], axis=1)
        w = 1.0 / (np.abs(y) + 1e-2 * (1.0 + scale))
        Xw, yw = X * w[:, None], y * w
        c, _, _, _ = np.linalg.lstsq(Xw, yw, rcond=None)
        resid_w = yw - Xw @ c
        dof = max(1, len(ts) - len(slots))
        var = float(resid_w @ resid_w) / dof
        cov = np.linalg.pinv(Xw.T @ Xw) * var
        sg = np.sqrt(np.maximum(np.diag(cov), 0))
        weak = [j for j in range(len(slots))
                if abs(c[j]) < max(noise_floor, 3 * sg[j])]
        if not weak:
            cond = float(np.linalg.cond(Xw / np.linalg.norm(Xw, axis=0)))
            return slots, c, sg, cond
        del slots[weak[int(np.argmax([sg[j] for j in weak]))]]
    return [], np.zeros(0), np.zeros(0), 1.0


DEFAULT_TAIL = (Fraction(1), Fraction(3, 2), Fraction(2))


def deformation_fit(series: HeatTraceSeries, reference: HeatTraceSeries,
                    p: int, i: int = 2,
                    window: tuple[float, float] | None = None,
                    tail_exponents: tuple = DEFAULT_TAIL,
                    reference_slots: list | None = None,
                    difference_slots: list | None = None,
                    noise_floor: float | None = None) -> AsymptoticFit:
    """Ladder fit resolved through a companion series at the family origin.

    Quarter-spaced powers are nearly collinear on a usable window, so a
    single-series fit only pins down its leading slot; sub-leading slots
    trade against smooth tail terms at matching residual (fit_small_t
    documents this).  The deformed and undeformed series share every
    deformation-independent coefficient, so those slots cancel exactly in
    their difference, and the fit splits into two pieces that are each
    well conditioned on a restricted basis:

      1. the reference series carries the deformation-independent slots:
         its leading exponent (detected from the data) plus the constant,
      2. the difference of the two series carries the deformation-dependent
         slots: again its own leading exponent plus the constant.

    Each stage adds the ``tail_exponents`` as guard slots for the smooth
    remainder and solves an ordinary weighted least squares; with the
    basis restricted this way the design is far from collinear and no
    subset search is needed.  Stage coefficients compose additively into
    one fit for the deformed series.

    The reference must sit at the origin of the deformation family, where
    the deformation-dependent coefficients vanish.  A series populated at
    more slots than leading-plus-constant needs them passed explicitly
    through ``reference_slots`` / ``difference_slots`` (ladder exponents
    as Fractions); the detected default covers the deformed cubic family
    and sums of such factors.  The constant term is refit from the peeled
    deformed series as a cross-check and both routes are reported in the
    diagnostic.
    """
    if series.n != reference.n:
        raise PolyError("deformation fit needs two series of the same "
                        "dimension")
    t = series.t_grid
    if (len(reference.t_grid) != len(t)
            or np.max(np.abs(reference.t_grid - t)) > 1e-12):
        raise PolyError("deformation fit needs a shared t-grid")
    tails = sorted(Fraction(a) for a in tail_exponents)
    if tails and tails[0] <= 0:
        raise PolyError("tail exponents must be positive")
    guard_terms = int(math.ceil(2 * p * float(tails[-1]))) if tails else 2
    alphas = ladder_exponents(p, series.n, guard_terms)
    for a in tails:
        if a not in alphas:
            raise PolyError(f"tail exponent {a} is off the 1/(2p) ladder")
    i0 = alphas.index(Fraction(0))
    m = len(alphas)
    if window is None:
        window = (float(t[0]), float(t[-1]))
    mask, ts = _fit_window_mask(t, window, len(tails) + 2)
    y_u = series.supertrace(i)[mask]
    y_0 = reference.supertrace(i)[mask]
    floor = noise_floor if noise_floor is not None else 0.0
    ladder = [a for a in alphas if a <= 0]

    coefs = np.zeros(m)
    var = np.zeros(m)
    chosen = np.zeros(m, dtype=bool)
    conds = [1.0]

    def run_stage(y, explicit):
        if explicit is not None:
            basis = sorted(set(Fraction(a) for a in explicit) | set(tails))
        else:
            lead = _detect_leading(ts, y, ladder, floor)
            if lead is None:
                return {}
            basis = sorted({lead, Fraction(0)} | set(tails))
        kept, c, sg, cond = _stage_ls(ts, y, basis, floor)
        conds.append(cond)
        return {a: (c[j], sg[j]) for j, a in enumerate(kept)}

    # stage 1: deformation-independent slots from the reference
    st1 = run_stage(y_0, reference_slots)
    # stage 2: deformation-dependent slots from the difference
    st2 = run_stage(y_u - y_0, difference_slots)
    for st in (st1, st2):
        for a, (c, s) in st.items():
            j = alphas.index(a)
            coefs[j] += c
            var[j] += s ** 2
            chosen[j] = True

    # cross-check: constant term from the peeled deformed series
    peel = np.zeros_like(ts)
    for j in range(i0):
        peel = peel + coefs[j] * ts ** float(alphas[j])
    stx = run_stage(y_u - peel, [Fraction(0)])
    conds.pop()
    const_alt = float(stx.get(Fraction(0), (0.0, 0.0))[0])
    const_main = float(coefs[i0])
    cross = abs(const_alt - const_main) / max(abs(const_main), floor, 1e-30)

    X = np.stack([ts ** float(a) for a in alphas], axis=1)
    resid = y_u - X @ coefs
    rms = float(np.sqrt(np.mean(resid ** 2)))
    diag = (f"constant term {const_main:.6g} (origin route) vs "
            f"{const_alt:.6g} (deformed route), rel diff {cross:.1e}")
    return AsymptoticFit(
        exponents=alphas, coefficients=coefs,
        sigmas=np.sqrt(var), zero_flags=~chosen,
        p=p, i0=i0, window=(float(ts[0]), float(ts[-1])),
        residual_rms=rms, condition=float(max(conds)),
        diagnostic=diag)


def split_fit(fits: list[AsymptoticFit], indices: list[int]) -> AsymptoticFit:
    """Ladder fit of a variable-separated background from its factor fits.

    For a sum of polynomials in disjoint variables the heat operator is a
    tensor product, and two facts collapse the cross terms of the weighted
    supertrace: the factor supertrace without weights is the Witten index
    (t-independent), and the first weighted supertrace vanishes
    identically for every background in scope.  What remains is

        Str N^2 (e^{-t Delta} - Pi) = sum_j ind_{/j} Str N^2_j (...),

    with ind_{/j} the product of the other factors' Witten indices, so the
    ladder coefficients compose linearly with index weights; nothing about
    the combined series is refit.  ``indices`` are the factor Witten
    indices (-1)^{n_j} mu_j, in factor order.  Sub-leading slots of a
    combined series cannot be estimated from its own samples at workable
    truncations, which is why this composition exists; the combined
    torsion integrals still come from the combined spectrum, so torsion
    additivity checked through this fit is not circular.
    """
    if len(fits) != len(indices) or not fits:
        raise PolyError("split_fit needs one Witten index per factor fit")
    p = fits[0].p
    if any(f.p != p for f in fits):
        raise PolyError("factor fits disagree on the ladder parameter p")
    start = sum(f.exponents[0] for f in fits)
    top = max(f.exponents[-1] for f in fits)
    step = Fraction(1, 2 * p)
    alphas = [start + a * step for a in range(int((top - start) / step) + 1)]
    i0 = alphas.index(Fraction(0))
    m = len(alphas)
    coefs = np.zeros(m)
    var = np.zeros(m)
    chosen = np.zeros(m, dtype=bool)
    for j, f in enumerate(fits):
        w = 1.0
        for k, ind in enumerate(indices):
            if k != j:
                w *= ind
        for a, c, s, z in zip(f.exponents, f.coefficients, f.sigmas,
                              f.zero_flags):
            if z:
                continue
            jj = alphas.index(a)
            coefs[jj] += w * c
            var[jj] += (w * s) ** 2
            chosen[jj] = True
    lo = max(f.window[0] for f in fits)
    hi = min(f.window[1] for f in fits)
    return AsymptoticFit(
        exponents=alphas, coefficients=coefs, sigmas=np.sqrt(var),
        zero_flags=~chosen, p=p, i0=i0, window=(lo, hi),
        residual_rms=float(sum(abs(w) for w in indices)
                           * max(f.residual_rms for f in fits)),
        condition=float(max(f.condition for f in fits)),
        diagnostic=f"composed from {len(fits)} factor fits with index "
                   f"weights; factor windows intersected to [{lo:.4g}, "
                   f"{hi:.4g}]")


def choose_fit_window(series_coarse: HeatTraceSeries,
                      series_fine: HeatTraceSeries,
                      i: int = 2, rel_tol: float = 1e-4
                      ) -> tuple[float, float]:
    """Smallest t where two truncations agree on the weighted supertrace.

    Truncation starves the trace at small t (missing high modes), so the
    usable window is bounded below by refinement agreement.
    """
    t = series_fine.t_grid
    if len(series_coarse.t_grid) != len(t) or np.max(
            np.abs(series_coarse.t_grid - t)) > 1e-12:
        raise PolyError("refinement comparison needs a shared t-grid")
    a = series_coarse.supertrace(i)
    b = series_fine.supertrace(i)
    rel = np.abs(a - b) / (np.abs(b) + 1.0)
    ok = rel < rel_tol
    idx = len(t) - 1
    while idx >= 0 and ok[idx]:
        idx -= 1
    lo = t[idx + 1] if idx + 1 < len(t) else t[-1]
    return float(lo), float(t[-1])


# ---------------------------------------------------------------------------
# torsion
# ---------------------------------------------------------------------------

@dataclass
class TorsionResult:
    value: float
    small_t_integral: float
    large_t_integral: float
    coefficient_terms: float
    upoint: tuple | None
    meta: dict = field(default_factory=dict)

    @property
    def parts(self) -> tuple[float, float, float]:
        return (self.small_t_integral, self.large_t_integral,
                self.coefficient_terms)

    def to_dict(self) -> dict:
        return {
            "log_T2": self.value,
            "parts": {
                "small_t_integral": self.small_t_integral,
                "large_t_integral": self.large_t_integral,
                "coefficient_terms": self.coefficient_terms,
            },
            "u": (None if self.upoint is None
                  else [[z.real, z.imag] for z in self.upoint]),
            "meta": self.meta,
        }


def _weighted_modes(source, i: int):
    """(weight, eigenvalue-array) pairs over degrees, harmonic modes dropped."""
    if isinstance(source, SpectrumResult):
        for k in source.degrees:
            w = float((-1) ** k * k ** i) if i else float((-1) ** k)
            lam = source.nonzero_eigenvalues(k)
            if w != 0 and len(lam):
                yield w, lam
        return
    # tensor background: eigenvalues add, degrees add, kernels multiply
    factors = source.factors
    def rec(idx, k_acc, lam_acc):
        if idx == len(factors):
            w = float((-1) ** k_acc * k_acc ** i) if i else float((-1) ** k_acc)
            if w != 0:
                yield w, lam_acc
            return
        fac = factors[idx]
        for k in fac.degrees:
            h = fac.harmonic_counts[k]
            lam = fac.eigenvalues(k)
            nz = lam[h:]
            if len(nz):
                add = (lam_acc[:, None] + nz[None, :]).ravel()
                yield from rec(idx + 1, k_acc + k, add)
            if h:
                yield from rec(idx + 1, k_acc + k,
                               np.repeat(lam_acc, h))
    yield from rec(0, 0, np.zeros(1))


def _str_exact(source, i: int, t: np.ndarray) -> np.ndarray:
    """Str(-1)^N N^i (e^{-t Delta} - Pi) with harmonic modes as exact zeros."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    acc = np.zeros_like(t)
    for w, lam in _weighted_modes(source, i):
        pos = lam[lam > 1e-14]
        acc = acc + w * np.exp(-np.outer(t, pos)).sum(axis=1)
        # harmonic eigenvalues inside a weighted block cancel against Pi
    return acc


def _gauss_log_panels(f, a: float, b: float, panels: int = 24,
                      order: int = 12) -> float:
    """Composite Gauss-Legendre for integral of f(t) dt/t on [a, b],
    in x = log t."""
    xs, ws = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(math.log(a), math.log(b), panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        tpts = np.exp(mid + half * xs)
        total += half * float(np.dot(ws, f(tpts)))
    return total


def torsion(series: HeatTraceSeries, fit: AsymptoticFit, i: int = 2,
            t_lo: float | None = None,
            fit_residual_max: float = 1e-2,
            method: str = "quadrature") -> TorsionResult:
    """Zeta-regularized torsion from the weighted supertrace.

    Three parts, returned separately and summed:
      * -(1/2) integral over (0, 1] of (Str - ladder) dt/t, where the
        ladder runs through the constant term; below ``t_lo`` the
        integrand is replaced by the fitted guard tail,
      * -(1/2) integral over [1, inf) of Str dt/t,
      * -(1/2) sum_{a<i0} d_a/alpha_a + (1/2) Gamma'(1) d_{i0}.

    ``method`` selects the quadrature evaluation (composite Gauss on a log
    axis, exponential-integral tail bound recorded) or the closed form in
    terms of exp1; the two agree to quadrature accuracy and both are kept
    deliberately.
    """
    source = series.source
    if source is None:
        raise PolyError("series lost its spectral source; rebuild it with "
                        "heat_traces")
    scale = float(np.max(np.abs(series.supertrace(i))))
    if fit.residual_rms > fit_residual_max * max(scale, 1e-30):
        raise PolyError(
            f"ladder fit residual {fit.residual_rms:.2e} is too large to "
            "trust the small-t subtraction (limit "
            f"{fit_residual_max:.0e} relative)")
    if t_lo is None:
        t_lo = fit.window[0]

    alphas = [float(a) for a in fit.exponents]
    coefs = fit.coefficients
    i0 = fit.i0

    # fitted guard tail handles (0, t_lo]: integral of sum_{b>i0} d_b t^{b-1}
    tail_small = float(sum(coefs[b] * t_lo ** alphas[b] / alphas[b]
                           for b in range(i0 + 1, len(alphas))))

    # ladder part of the subtraction on [t_lo, 1], analytically
    ladder_int = 0.0
    for a in range(i0 + 1):
        if coefs[a] == 0.0:
            continue
        al = alphas[a]
        if al == 0.0:
            ladder_int += coefs[a] * math.log(1.0 / t_lo)
        else:
            ladder_int += coefs[a] * (1.0 - t_lo ** al) / al

    lam_min = min(float(lam.min()) for w, lam in _weighted_modes(source, 0)
                  if len(lam) and lam.min() > 1e-14)
    t_max = max(2.0, 40.0 / lam_min)

    if method == "quadrature":
        f = lambda ts: _str_exact(source, i, ts)
        mid = _gauss_log_panels(f, t_lo, 1.0)
        large = _gauss_log_panels(f, 1.0, t_max)
        tail_bound = 0.0
        for w, lam in _weighted_modes(source, i):
            x = t_max * lam[lam > 1e-14]
            tail_bound += abs(w) * float(np.sum(np.exp(-x) / x))
    elif method == "exact":
        mid = 0.0
        large = 0.0
        for w, lam in _weighted_modes(source, i):
            pos = lam[lam > 1e-14]
            mid += w * float(np.sum(exp1(t_lo * pos) - exp1(pos)))
            large += w * float(np.sum(exp1(pos)))
        tail_bound = 0.0
    else:
        raise PolyError(f"unknown torsion method {method!r}")

    small = -0.5 * (tail_small + mid - ladder_int)
    big = -0.5 * large
    coeff_terms = -0.5 * float(
        sum(coefs[a] / alphas[a] for a in range(i0) if coefs[a] != 0.0))
    coeff_terms += 0.5 * (-EULER_GAMMA) * float(coefs[i0])

    meta = {
        "gamma_prime_1": -EULER_GAMMA,
        "i": i,
        "t_lo": t_lo,
        "t_max": t_max,
        "method": method,
        "large_t_tail_bound": tail_bound,
        "fit_window": list(fit.window),
    }
    upoint = series.meta.get("u")
    return TorsionResult(
        value=small + big + coeff_terms,
        small_t_integral=small,
        large_t_integral=big,
        coefficient_terms=coeff_terms,
        upoint=upoint,
        meta=meta)


# ---------------------------------------------------------------------------
# double trace
# ---------------------------------------------------------------------------

def to_eigenbasis(spec_result: SpectrumResult,
                  op: FormOperatorMatrix | np.ndarray) -> dict[int, np.ndarray]:
    """Per-degree eigenbasis matrix of a scalar multiplication operator.

    The scalar matrix acts identically on each fiber component of a degree
    block; full eigenvectors are required.
    """
    mat = np.asarray(op)
    out = {}
    for k in spec_result.degrees:
        vec = spec_result.vectors(k)
        if vec.shape[1] != vec.shape[0]:
            raise PolyError("eigenbasis transform needs the full vector set")
        reps = vec.shape[0] // mat.shape[0]
        big = np.kron(np.eye(reps), mat)
        out[k] = vec.conj().T @ big @ vec
    return out


def _kernel_matrix(lam_r, lam_c, t: float, derivative: bool) -> np.ndarray:
    """K(lam_m, lam_n, t) = (e^{-t lam_n} - e^{-t lam_m})/(lam_m - lam_n),
    with the continuous branch t e^{-t lam} on the near-diagonal."""
    dl = lam_r[:, None] - lam_c[None, :]
    er = np.exp(-t * lam_r)[:, None]
    ec = np.exp(-t * lam_c)[None, :]
    close = np.abs(dl) < 1e-9
    safe = np.where(close, 1.0, dl)
    if derivative:
        out = (lam_r[:, None] * er - lam_c[None, :] * ec) / safe
        mean = 0.5 * (lam_r[:, None] + lam_c[None, :])
        lim = (1.0 - t * mean) * np.exp(-t * mean)
    else:
        out = (ec - er) / safe
        lim = t * np.exp(-t * 0.5 * (lam_r[:, None] + lam_c[None, :]))
    return np.where(close, lim, out)


def double_trace(spec_result: SpectrumResult,
                 a_blocks: dict[int, np.ndarray],
                 b_blocks: dict[int, np.ndarray],
                 t: float,
                 derivative: bool = False) -> complex:
    """Tr (-1)^N of the Duhamel product integral of A and B at time t.

    Evaluates Sum_k (-1)^k Sum_{m,n} A_{mn} B_{nm} K(lam_m, lam_n, t) in
    the eigenbasis, closed form per eigenpair; ``derivative`` returns the
    t-derivative using the differentiated kernel.
    """
    total = 0j
    for k in spec_result.degrees:
        if k not in a_blocks or k not in b_blocks:
            continue
        lam = spec_result.eigenvalues(k)
        kern = _kernel_matrix(lam, lam, t, derivative)
        total += (-1) ** k * np.sum(a_blocks[k] * b_blocks[k].T * kern)
    return complex(total)


def weighted_supertrace(spec_result: SpectrumResult,
                        blocks: dict[int, np.ndarray], t: float,
                        number_power: int = 0) -> complex:
    """Str (-1)^N N^i A e^{-t Delta} from eigenbasis blocks of A."""
    total = 0j
    for k in spec_result.degrees:
        if k not in blocks:
            continue
        w = (-1) ** k * k ** number_power if number_power else (-1) ** k
        lam = spec_result.eigenvalues(k)
        total += w * np.sum(np.diag(blocks[k]) * np.exp(-t * lam))
    return complex(total)


# ---------------------------------------------------------------------------
# scaling/star symmetry report
# ---------------------------------------------------------------------------

def symmetry_checks(sr_plus: SpectrumResult, sr_minus: SpectrumResult,
                    t_grid=None) -> dict:
    """Spectral comparisons between the backgrounds f0 and -f0.

    Flipping the sign of f0 is an exact symmetry degree by degree, and the
    star pairing matches degree k of one background with degree 2n-k of the
    other; both distances are reported, together with the first weighted
    supertrace, which their combination forces to vanish.
    """
    if sr_plus.trunc != sr_minus.trunc:
        raise PolyError("symmetry check needs a shared truncation")
    n = sr_plus.trunc.n
    same = {}
    mirror = {}
    for k in sr_plus.degrees:
        a = sr_plus.eigenvalues(k)
        same[k] = float(np.max(np.abs(a - sr_minus.eigenvalues(k))))
        mirror[k] = float(np.max(np.abs(a - sr_minus.eigenvalues(2 * n - k))))
    if t_grid is None:
        t_grid = log_t_grid()
    q_plus = heat_traces(sr_plus, t_grid).supertrace(1)
    q_minus = heat_traces(sr_minus, t_grid).supertrace(1)
    return {
        "same_degree_distance": same,
        "mirror_degree_distance": mirror,
        "q_max": float(np.max(np.abs(q_plus))),
        "q_antisymmetry": float(np.max(np.abs(q_plus + q_minus))),
    }
