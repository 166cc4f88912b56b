"""tt* geometry on the harmonic bundle of a deformation family.

The kernel of the deformed form Laplacian is a mu-dimensional vector
bundle over the deformation parameters u.  This module computes its
tt* data in a computable smooth frame: the metric g, the chiral
multiplication matrices C_i and their conjugates, a finite-difference
connection D_i, the residuals of the tt* equations, and end-to-end
checks of the heat-trace transgression identity and of the torsion
anomaly identity.

Eigensolver output cannot serve as a frame because each solve returns
arbitrary phases, so frames are built by projection instead:
s_a(u) = Pi(u) r_a with fixed u-independent reference forms
r_a = phi_a * chi * dz1^...^dzn, where phi_a runs over the Jacobi basis
monomials of f0 and chi is the oscillator ground Gaussian.  The frame
inherits the smoothness of the spectral projector, which is guaranteed
by the gap above the kernel.  All parameter derivatives are central
finite differences (default step 1e-2); curvature comes from nested
first differences, so every residual carries an O(h^2) discretization
error on top of the truncation floor.

Conventions: the metric is antilinear in its second slot,
g[a, b] = g(s_a, s_b); component matrices follow (C_i)_{ab} =
g(phi_i s_a, s_b) and (D_i)_{ab} = g(d_i s_a, s_b); operators act on
frame coefficients through the inverse Gram matrix.  The coupling
constant beta is fixed to 1 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

from .polycore import (DeformationSpec, JacobiRing, PolyError, format_poly)
from .fiber import build_fiber
from .spectral import (SpectrumResult, Truncation, assemble_operators,
                       eigendecompose, multiplication_operator)
from .heatzeta import (choose_fit_window, deformation_fit, double_trace,
                       heat_traces, ladder_exponents, log_t_grid,
                       to_eigenbasis, torsion, weighted_supertrace)

__all__ = [
    "HarmonicFrame",
    "TTStarData",
    "TransgressionReport",
    "AnomalyReport",
    "gaussian_cutoff_coefficients",
    "reference_forms",
    "harmonic_frame",
    "c_matrices",
    "connection_fd",
    "transgression_check",
    "coefficient_of_t",
    "anomaly_check",
    "kahler_check",
    "ttstar_report",
]

DEFAULT_FD_STEP = 1e-2
DEFAULT_WIDTH_RETRIES = (1.0, 0.5, 0.25)


# ---------------------------------------------------------------------------
# reference forms
# ---------------------------------------------------------------------------

def gaussian_cutoff_coefficients(levels: int, width_factor: float) -> np.ndarray:
    """Oscillator-basis coefficients of a centered Gaussian cutoff.

    Expands exp(-width_factor * omega * x^2 / 2) in the eigenbasis of the
    frequency-omega oscillator used by the truncation.  Odd coefficients
    vanish; the even ones obey the two-step recursion

        c_{k+2} = c_k * rho * sqrt((k+1)/(k+2)),
        rho = (1 - width_factor) / (1 + width_factor),

    so width_factor = 1 returns the basis vacuum exactly.  The result is
    normalized to unit norm within the truncation.
    """
    if width_factor <= 0:
        raise PolyError("the Gaussian cutoff needs a positive width factor")
    rho = (1.0 - width_factor) / (1.0 + width_factor)
    c = np.zeros(levels)
    c[0] = 1.0
    for k in range(0, levels - 2, 2):
        c[k + 2] = c[k] * rho * math.sqrt((k + 1) / (k + 2))
    return c / np.linalg.norm(c)


def reference_forms(spec: DeformationSpec, trunc: Truncation,
                    width_factor: float = 1.0
                    ) -> tuple[np.ndarray, list[str]]:
    """Fixed reference forms r_a = phi_a * chi * dz1^...^dzn as columns.

    phi_a runs over the Jacobi basis monomials of the undeformed f0 (so
    the r_a do not depend on u), chi is the Gaussian cutoff, and the
    form sits in the all-holomorphic top component of the degree-n
    block.  Returns the (block_dim, mu) column matrix together with the
    monomial labels.
    """
    n = trunc.n
    jac = JacobiRing(spec.f0)
    monos = jac.basis_polys()
    c1d = gaussian_cutoff_coefficients(trunc.levels, width_factor)
    pair = np.kron(c1d, c1d)
    chi = pair
    for _ in range(n - 1):
        chi = np.kron(chi, pair)

    basis = build_fiber(n)
    top_mask = (1 << n) - 1
    slot = basis.degree_indices(n).index(basis.position[top_mask])
    sdim = trunc.scalar_dim

    cols = np.zeros((trunc.block_dim(n), len(monos)), dtype=complex)
    for a, mono in enumerate(monos):
        mat = np.asarray(multiplication_operator(mono, trunc))
        cols[slot * sdim:(slot + 1) * sdim, a] = mat @ chi
    return cols, [format_poly(m) for m in monos]


# ---------------------------------------------------------------------------
# harmonic frame
# ---------------------------------------------------------------------------

@dataclass
class HarmonicFrame:
    """Projected frame of the harmonic space at one parameter point."""

    upoint: tuple[complex, ...]
    vectors: np.ndarray          # (block_dim(n), mu), columns s_a = Pi(u) r_a
    gram: np.ndarray             # gram[a, b] = g(s_a, s_b)
    condition: float
    trunc: Truncation
    spec_result: SpectrumResult
    width_factor: float
    mu: int
    reference_labels: list[str] = field(default_factory=list)

    @property
    def degree(self) -> int:
        return self.trunc.n

    def gram_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.gram)


def _normalize_upoint(spec: DeformationSpec, u) -> tuple[complex, ...]:
    if u is None:
        u = ()
    if np.isscalar(u):
        u = (u,)
    u = tuple(complex(v) for v in u)
    if len(u) != spec.nparams:
        raise PolyError(f"expected {spec.nparams} parameter values, "
                        f"got {len(u)}")
    return u


def harmonic_frame(spec: DeformationSpec, u, trunc: Truncation,
                   eps_h: float | None = None,
                   width_factor: float = 1.0,
                   vector_buffer: int = 2,
                   cond_max: float = 1e8,
                   spec_result: SpectrumResult | None = None
                   ) -> HarmonicFrame:
    """Frame of the harmonic space by projecting fixed reference forms.

    The eigenproblem at u supplies the kernel columns; the frame is the
    projection of the reference forms onto them, so repeated calls at
    nearby u differ by O(|du|) with no phase ambiguity.  If the Gram
    matrix of the projected frame is rank-deficient (condition number
    above ``cond_max``), the cutoff is broadened and the projection is
    retried before giving up.
    """
    u = _normalize_upoint(spec, u)
    n = trunc.n
    if spec_result is None:
        ops = assemble_operators(spec, u, trunc, both_routes=False)
        spec_result = eigendecompose(ops, eps_h=eps_h,
                                     vectors=spec.mu + vector_buffer)
    counts = spec_result.harmonic_counts
    stray = {k: c for k, c in counts.items() if k != n and c}
    if counts.get(n, 0) != spec.mu or stray:
        raise PolyError(
            f"harmonic counts {counts} at u={u} do not match the expected "
            f"mu={spec.mu} concentrated in degree {n}; the tt* frame needs "
            f"the full kernel (gap diagnostic: {spec_result.gap_diagnostic})")
    kernel = spec_result.vectors(n)[:, :spec.mu]

    last_cond = None
    for factor in (width_factor,) + tuple(
            w * width_factor for w in DEFAULT_WIDTH_RETRIES[1:]):
        refs, labels = reference_forms(spec, trunc, factor)
        svecs = kernel @ (kernel.conj().T @ refs)
        gram = (svecs.conj().T @ svecs).T
        lam = np.linalg.eigvalsh(gram)
        if lam[0] > 0 and lam[-1] / lam[0] <= cond_max:
            return HarmonicFrame(
                upoint=u, vectors=svecs, gram=gram,
                condition=float(lam[-1] / lam[0]), trunc=trunc,
                spec_result=spec_result, width_factor=factor, mu=spec.mu,
                reference_labels=labels)
        last_cond = float(lam[-1] / max(lam[0], 1e-300))
    raise PolyError(
        f"projected reference forms are rank-deficient at u={u} "
        f"(condition {last_cond:.2e} after cutoff broadening); "
        "the cutoff misses part of the harmonic space")


# ---------------------------------------------------------------------------
# tt* data
# ---------------------------------------------------------------------------

@dataclass
class TTStarData:
    """Frame components of the tt* structure at one parameter point.

    All matrices are components in the (non-orthonormal) projected
    frame, e.g. c[name][a, b] = g(phi_name s_a, s_b).  Operator action
    on frame coefficients is recovered through the inverse Gram matrix;
    the ``*_action`` methods return those matrices, whose traces and
    spectra are frame-independent.
    """

    frame: HarmonicFrame
    names: tuple[str, ...]
    g: np.ndarray
    c: dict[str, np.ndarray]
    cbar: dict[str, np.ndarray]
    d: dict[str, np.ndarray] = field(default_factory=dict)
    dbar: dict[str, np.ndarray] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)
    fd_step: float | None = None
    beta: float = 1.0

    def _key(self, i) -> str:
        return self.names[i] if isinstance(i, int) else i

    def _action(self, comp: np.ndarray) -> np.ndarray:
        return (comp @ self.frame.gram_inverse()).T

    def c_action(self, i=0) -> np.ndarray:
        return self._action(self.c[self._key(i)])

    def cbar_action(self, j=0) -> np.ndarray:
        return self._action(self.cbar[self._key(j)])

    def d_action(self, i=0) -> np.ndarray:
        return self._action(self.d[self._key(i)])

    def dbar_action(self, j=0) -> np.ndarray:
        return self._action(self.dbar[self._key(j)])

    def tr_c_cbar(self, i=0, j=0) -> complex:
        return complex(np.trace(self.c_action(i) @ self.cbar_action(j)))

    def tr_c_cbar_matrix(self) -> np.ndarray:
        p = len(self.names)
        out = np.zeros((p, p), dtype=complex)
        for a in range(p):
            for b in range(p):
                out[a, b] = self.tr_c_cbar(a, b)
        return out

    @property
    def min_g_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.g)[0])


def _phi_terms(mono, n: int) -> dict[tuple[int, ...], complex]:
    out: dict[tuple[int, ...], complex] = {}
    for e, c in mono.terms.items():
        e = tuple(e)
        if len(e) == n:
            e = e + (0,) * n
        elif len(e) != 2 * n:
            raise PolyError(f"deformation monomial exponent {e} does not "
                            f"match {n} holomorphic coordinates")
        out[e] = out.get(e, 0j) + c.to_complex()
    return {e: c for e, c in out.items() if c != 0}


def _conj_terms(terms: dict[tuple[int, ...], complex], n: int
                ) -> dict[tuple[int, ...], complex]:
    return {e[n:] + e[:n]: np.conj(c) for e, c in terms.items()}


def _product_terms(a: dict, b: dict) -> dict:
    out: dict[tuple[int, ...], complex] = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0j) + ca * cb
    return {e: c for e, c in out.items() if c != 0}


def _apply_scalar(mat: np.ndarray, vecs: np.ndarray, sdim: int) -> np.ndarray:
    """Apply a scalar multiplication matrix to degree-block columns."""
    reps = vecs.shape[0] // sdim
    v3 = vecs.reshape(reps, sdim, vecs.shape[1])
    out = np.einsum("xy,ryc->rxc", mat, v3, optimize=True)
    return out.reshape(vecs.shape)


def c_matrices(frame: HarmonicFrame, spec: DeformationSpec) -> TTStarData:
    """Chiral multiplication matrices C_i and their conjugates.

    (C_i)_{ab} = g(phi_i s_a, s_b) with phi_i = df/du_i; the projector
    in C_i = Pi o phi_i is free because the second slot is harmonic.
    The Gram matrix must be positive definite, which is re-checked here.
    """
    trunc = frame.trunc
    n = trunc.n
    svecs = frame.vectors
    sdim = trunc.scalar_dim
    lam = np.linalg.eigvalsh(frame.gram)
    if lam[0] <= 0:
        raise PolyError(f"tt* metric lost positivity (min eigenvalue "
                        f"{lam[0]:.3e})")
    c: dict[str, np.ndarray] = {}
    cbar: dict[str, np.ndarray] = {}
    for name, mono in zip(spec.names, spec.monomials):
        terms = _phi_terms(mono, n)
        mat = np.asarray(multiplication_operator(terms, trunc))
        w = _apply_scalar(mat, svecs, sdim)
        c[name] = (svecs.conj().T @ w).T
        matb = np.asarray(multiplication_operator(_conj_terms(terms, n),
                                                  trunc))
        wb = _apply_scalar(matb, svecs, sdim)
        cbar[name] = (svecs.conj().T @ wb).T
    return TTStarData(frame=frame, names=spec.names, g=frame.gram,
                      c=c, cbar=cbar)


# ---------------------------------------------------------------------------
# finite-difference connection and curvature
# ---------------------------------------------------------------------------

class _FrameCache:
    """Frames and C data on a finite-difference stencil around u0."""

    def __init__(self, spec: DeformationSpec, u0, trunc: Truncation,
                 eps_h: float | None = None, width_factor: float = 1.0):
        self.spec = spec
        self.trunc = trunc
        self.eps_h = eps_h
        self.width_factor = width_factor
        self.u0 = np.asarray(_normalize_upoint(spec, u0), dtype=complex)
        self._frames: dict[tuple[complex, ...], HarmonicFrame] = {}
        self._cdata: dict[tuple[complex, ...], TTStarData] = {}

    def frame(self, offset) -> HarmonicFrame:
        key = tuple(complex(v) for v in offset)
        got = self._frames.get(key)
        if got is None:
            got = harmonic_frame(self.spec, self.u0 + np.asarray(key),
                                 self.trunc, eps_h=self.eps_h,
                                 width_factor=self.width_factor)
            self._frames[key] = got
        return got

    def cdata(self, offset) -> TTStarData:
        key = tuple(complex(v) for v in offset)
        got = self._cdata.get(key)
        if got is None:
            got = c_matrices(self.frame(key), self.spec)
            self._cdata[key] = got
        return got

    def solves(self) -> int:
        return len(self._frames)


def _offset(p: int, i: int, value: complex) -> tuple[complex, ...]:
    out = [0j] * p
    out[i] = value
    return tuple(out)


def _shift(base, extra) -> tuple[complex, ...]:
    return tuple(b + e for b, e in zip(base, extra))


def _du_pair(fxp, fxm, fyp, fym, h: float):
    """(d/du, d/dubar) from the four axis values of one complex parameter."""
    du = ((fxp - fxm) - 1j * (fyp - fym)) / (4.0 * h)
    dub = ((fxp - fxm) + 1j * (fyp - fym)) / (4.0 * h)
    return du, dub


def _connection_at(cache: _FrameCache, base, h: float, params
                   ) -> dict[str, dict[int, np.ndarray]]:
    """Connection action matrices A_i, Abar_i at one stencil point.

    A_i is the matrix of D_i = Pi o d/du_i on frame coefficients,
    obtained from central differences of the frame columns; likewise
    Abar_i for the antiholomorphic direction.
    """
    fr = cache.frame(base)
    ginv = fr.gram_inverse()
    p = cache.spec.nparams
    a_mats: dict[int, np.ndarray] = {}
    abar_mats: dict[int, np.ndarray] = {}
    for i in params:
        sxp = cache.frame(_shift(base, _offset(p, i, h))).vectors
        sxm = cache.frame(_shift(base, _offset(p, i, -h))).vectors
        syp = cache.frame(_shift(base, _offset(p, i, 1j * h))).vectors
        sym = cache.frame(_shift(base, _offset(p, i, -1j * h))).vectors
        ds_u, ds_ub = _du_pair(sxp, sxm, syp, sym, h)
        comp_d = (fr.vectors.conj().T @ ds_u).T
        comp_db = (fr.vectors.conj().T @ ds_ub).T
        a_mats[i] = (comp_d @ ginv).T
        abar_mats[i] = (comp_db @ ginv).T
    return {"a": a_mats, "abar": abar_mats}


def _fro(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat))


def connection_fd(spec: DeformationSpec, u, trunc: Truncation,
                  h: float = DEFAULT_FD_STEP,
                  eps_h: float | None = None,
                  width_factor: float = 1.0,
                  cache: _FrameCache | None = None) -> TTStarData:
    """Finite-difference connection with the tt*-equation residuals.

    Components (D_i)_{ab} = g(d_i s_a, s_b) come from central
    differences of the projected frame; the curvature is assembled from
    nested first differences of the connection matrices (an O(h^2)
    scheme on top of the truncation floor).  The residual table holds
    the Frobenius norms of

      * [D_i, Dbar_j] + [C_i, Cbar_j]   (beta = 1),
      * [D_i, C_j] - [D_j, C_i],
      * [Dbar_i, C_j],
      * [D_i, D_j],
      * [C_i, C_j],

    one row per parameter pair; for a single parameter the purely
    holomorphic rows vanish identically and are recorded as exact
    zeros.  All frames on the stencil are built from the same reference
    forms, so no gauge alignment is needed; a rank change anywhere on
    the stencil raises the frame's rank diagnostic.
    """
    if cache is None:
        cache = _FrameCache(spec, u, trunc, eps_h=eps_h,
                            width_factor=width_factor)
    p = spec.nparams
    names = spec.names
    center: tuple[complex, ...] = tuple([0j] * p)
    conn = _connection_at(cache, center, h, range(p))
    data = cache.cdata(center)
    c_act = {i: data.c_action(i) for i in range(p)}
    cbar_act = {i: data.cbar_action(i) for i in range(p)}

    # connection matrices and C actions at the axis points of every
    # parameter, for the outer derivative of each first-order object
    axis: dict[tuple[int, int], dict] = {}
    axis_c: dict[tuple[int, int], dict[int, np.ndarray]] = {}
    for i in range(p):
        for s, step in ((0, h), (1, -h), (2, 1j * h), (3, -1j * h)):
            base = _offset(p, i, step)
            axis[(i, s)] = _connection_at(cache, base, h, range(p))
            pdata = cache.cdata(base)
            axis_c[(i, s)] = {j: pdata.c_action(j) for j in range(p)}

    def d_of(i: int, getter) -> tuple[np.ndarray, np.ndarray]:
        vals = [getter(axis[(i, s)]) for s in range(4)]
        return _du_pair(vals[0], vals[1], vals[2], vals[3], h)

    residuals: dict[str, float] = {}
    dcomp: dict[str, np.ndarray] = {}
    dbarcomp: dict[str, np.ndarray] = {}
    for i in range(p):
        dcomp[names[i]] = conn["a"][i].T @ data.g
        dbarcomp[names[i]] = conn["abar"][i].T @ data.g

    for i in range(p):
        for j in range(p):
            # d/du_i of Abar_j and d/dubar_j of A_i
            d_abar_j, _ = d_of(i, lambda c, j=j: c["abar"][j])
            _, db_a_i = d_of(j, lambda c, i=i: c["a"][i])
            curv = (d_abar_j - db_a_i
                    + conn["a"][i] @ conn["abar"][j]
                    - conn["abar"][j] @ conn["a"][i])
            cc = c_act[i] @ cbar_act[j] - cbar_act[j] @ c_act[i]
            residuals[f"[D_{names[i]}, Dbar_{names[j]}] "
                      f"+ [C_{names[i]}, Cbar_{names[j]}]"] = _fro(curv + cc)

            # holomorphicity of C: [Dbar_i, C_j]
            cvals = [axis_c[(i, s)][j] for s in range(4)]
            _, db_c = _du_pair(cvals[0], cvals[1], cvals[2], cvals[3], h)
            holo = (db_c + conn["abar"][i] @ c_act[j]
                    - c_act[j] @ conn["abar"][i])
            residuals[f"[Dbar_{names[i]}, C_{names[j]}]"] = _fro(holo)

    for i, j in combinations(range(p), 2) if p > 1 else [(0, 0)]:
        if i == j:
            residuals[f"[D_{names[i]}, C_{names[j]}] "
                      f"- [D_{names[j]}, C_{names[i]}]"] = 0.0
            residuals[f"[D_{names[i]}, D_{names[j]}]"] = 0.0
            residuals[f"[C_{names[i]}, C_{names[j]}]"] = 0.0
            continue
        cvals_j = [axis_c[(i, s)][j] for s in range(4)]
        d_c_j, _ = _du_pair(cvals_j[0], cvals_j[1], cvals_j[2], cvals_j[3], h)
        cvals_i = [axis_c[(j, s)][i] for s in range(4)]
        d_c_i, _ = _du_pair(cvals_i[0], cvals_i[1], cvals_i[2], cvals_i[3], h)
        t_ij = d_c_j + conn["a"][i] @ c_act[j] - c_act[j] @ conn["a"][i]
        t_ji = d_c_i + conn["a"][j] @ c_act[i] - c_act[i] @ conn["a"][j]
        residuals[f"[D_{names[i]}, C_{names[j]}] "
                  f"- [D_{names[j]}, C_{names[i]}]"] = _fro(t_ij - t_ji)
        d_a_j, _ = d_of(i, lambda c, j=j: c["a"][j])
        d_a_i, _ = d_of(j, lambda c, i=i: c["a"][i])
        dd = (d_a_j - d_a_i + conn["a"][i] @ conn["a"][j]
              - conn["a"][j] @ conn["a"][i])
        residuals[f"[D_{names[i]}, D_{names[j]}]"] = _fro(dd)
        residuals[f"[C_{names[i]}, C_{names[j]}]"] = _fro(
            c_act[i] @ c_act[j] - c_act[j] @ c_act[i])

    return TTStarData(frame=data.frame, names=names, g=data.g,
                      c=data.c, cbar=data.cbar,
                      d=dcomp, dbar=dbarcomp,
                      residuals=residuals, fd_step=h)


# ---------------------------------------------------------------------------
# transgression identity
# ---------------------------------------------------------------------------

def _str_from_eigs(eigs: dict[int, np.ndarray], counts: dict[int, int],
                   t: float, power: int) -> float:
    """Str (-1)^N N^power (e^{-t Delta} - Pi) from per-degree spectra."""
    total = 0.0
    for k, lam in eigs.items():
        w = (-1) ** k * (k ** power if power else 1)
        total += w * (float(np.sum(np.exp(-t * lam))) - counts.get(k, 0))
    return total


def _eig_data(spec: DeformationSpec, u, trunc: Truncation,
              eps_h: float | None) -> tuple[dict, dict]:
    ops = assemble_operators(spec, u, trunc, both_routes=False)
    sr = eigendecompose(ops, eps_h=eps_h)
    return ({k: sr.eigenvalues(k) for k in sr.degrees},
            dict(sr.harmonic_counts))


def _supertrace_time_derivative(sr: SpectrumResult,
                                blocks: dict[int, np.ndarray],
                                t: float) -> complex:
    """d/dt of Str (-1)^N A e^{-t Delta}, spectrally exact."""
    total = 0j
    for k in sr.degrees:
        lam = sr.eigenvalues(k)
        total += (-1) ** k * np.sum(np.diag(blocks[k]) * (-lam)
                                    * np.exp(-t * lam))
    return complex(total)


@dataclass
class TransgressionReport:
    """Both sides of the heat-trace transgression identity at (u, t)."""

    upoint: tuple[complex, ...]
    names: tuple[str, ...]
    i: int
    j: int
    t: float
    h: float
    lhs: complex
    rhs: complex
    insertion_term: complex
    convolution_term: complex
    rel_residual: float
    n1_mixed: float
    t_large: float
    lhs_large: complex
    rhs_large: complex

    def to_dict(self) -> dict:
        return {
            "u": [[v.real, v.imag] for v in self.upoint],
            "directions": [self.names[self.i], self.names[self.j]],
            "t": self.t,
            "fd_step": self.h,
            "lhs": [self.lhs.real, self.lhs.imag],
            "rhs": [self.rhs.real, self.rhs.imag],
            "insertion_term": [self.insertion_term.real,
                               self.insertion_term.imag],
            "convolution_term": [self.convolution_term.real,
                                 self.convolution_term.imag],
            "rel_residual": self.rel_residual,
            "n1_mixed": self.n1_mixed,
            "t_large": self.t_large,
            "lhs_large": [self.lhs_large.real, self.lhs_large.imag],
            "rhs_large": [self.rhs_large.real, self.rhs_large.imag],
        }


def transgression_check(spec: DeformationSpec, u, t: float,
                        trunc: Truncation,
                        h: float = DEFAULT_FD_STEP,
                        i: int = 0, j: int = 0,
                        eps_h: float | None = None,
                        t_large: float = 20.0) -> TransgressionReport:
    """Mixed-u derivative of the N^2 supertrace against its t-transgression.

    The left side differentiates F(u) = Str (-1)^N N^2 (e^{-t Delta} - Pi)
    by second-order finite differences on a 3x3 grid in the complex
    u_i-plane (for i = j the corner points of the grid carry zero weight
    in the d/du d/dubar combination, so only the five cross points are
    solved; distinct parameters engage the full product stencil).  The
    right side is evaluated at the center from one full eigenbasis:

        -2t d/dt Str (-1)^N phi_i phibar_j e^{-t Delta}
        +2t d/dt Tr (-1)^N int_0^t e^{-s Delta} phibar_j
                              e^{-(t-s) Delta} (Delta phi_i) ds,

    with both time derivatives spectrally exact.  The first-power
    analog of the left side must vanish (the N^1 supertrace is
    u-independent); its value is reported as ``n1_mixed``.  Both sides
    are also evaluated at ``t_large``, where each must decay to zero.
    """
    u = _normalize_upoint(spec, u)
    p = spec.nparams
    if not (0 <= i < p and 0 <= j < p):
        raise PolyError("direction indices outside the parameter list")

    u0 = np.asarray(u, dtype=complex)
    point_data: dict[tuple[complex, ...], tuple[dict, dict]] = {}

    def fvals(offset) -> tuple[dict, dict]:
        key = tuple(complex(v) for v in offset)
        got = point_data.get(key)
        if got is None:
            got = _eig_data(spec, u0 + np.asarray(key), trunc, eps_h)
            point_data[key] = got
        return got

    # center gets the full solve (vectors needed for the right side)
    ops_c = assemble_operators(spec, u, trunc, both_routes=False)
    sr = eigendecompose(ops_c, eps_h=eps_h, vectors=True)
    point_data[tuple([0j] * p)] = ({k: sr.eigenvalues(k)
                                    for k in sr.degrees},
                                   dict(sr.harmonic_counts))

    def mixed(tval: float, power: int) -> complex:
        def F(offset) -> float:
            eigs, counts = fvals(offset)
            return _str_from_eigs(eigs, counts, tval, power)
        if i == j:
            c0 = F(tuple([0j] * p))
            fx = F(_offset(p, i, h)) + F(_offset(p, i, -h))
            fy = F(_offset(p, i, 1j * h)) + F(_offset(p, i, -1j * h))
            return complex((fx + fy - 4.0 * c0) / (4.0 * h * h))
        # distinct parameters: quarter-sum of the four product stencils
        val = 0j
        for si, wi in ((1.0, 1.0), (1j, -1j)):       # d/du_i = (dx - i dy)/2
            for sj, wj in ((1.0, 1.0), (1j, 1j)):    # d/dubar_j = (dx + i dy)/2
                quad = (F(_shift(_offset(p, i, si * h), _offset(p, j, sj * h)))
                        - F(_shift(_offset(p, i, si * h),
                                   _offset(p, j, -sj * h)))
                        - F(_shift(_offset(p, i, -si * h),
                                   _offset(p, j, sj * h)))
                        + F(_shift(_offset(p, i, -si * h),
                                   _offset(p, j, -sj * h))))
                val += wi * wj * quad / (4.0 * h * h)
        return val / 4.0

    lhs = mixed(t, 2)
    n1 = abs(mixed(t, 1))

    terms_i = _phi_terms(spec.monomials[i], trunc.n)
    terms_jb = _conj_terms(_phi_terms(spec.monomials[j], trunc.n), trunc.n)
    phi_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(terms_i, trunc)))
    phibar_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(terms_jb, trunc)))
    prod_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(_product_terms(terms_i, terms_jb), trunc)))
    delta_phi = {k: sr.eigenvalues(k)[:, None] * phi_blocks[k]
                 for k in sr.degrees}

    def rhs_at(tval: float) -> tuple[complex, complex, complex]:
        ins = -2.0 * tval * _supertrace_time_derivative(sr, prod_blocks, tval)
        conv = 2.0 * tval * double_trace(sr, phibar_blocks, delta_phi, tval,
                                         derivative=True)
        return ins + conv, ins, conv

    rhs, ins, conv = rhs_at(t)
    rhs_large = rhs_at(t_large)[0]
    lhs_large = mixed(t_large, 2)
    rel = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    return TransgressionReport(
        upoint=u, names=spec.names, i=i, j=j, t=t, h=h,
        lhs=lhs, rhs=rhs, insertion_term=ins, convolution_term=conv,
        rel_residual=rel, n1_mixed=n1,
        t_large=t_large, lhs_large=lhs_large, rhs_large=rhs_large)


# ---------------------------------------------------------------------------
# anomaly identity
# ---------------------------------------------------------------------------

def coefficient_of_t(ts: np.ndarray, values: np.ndarray, p: int, n: int,
                     noise_floor: float = 0.0,
                     max_slots: int = 5,
                     rss_factor: float = 3.0
                     ) -> tuple[float, dict]:
    """Coefficient of t^1 in a Duhamel double trace near t = 0.

    The convolution of two multiplication insertions expands on the
    heat-trace power ladder shifted up by one, t^(1 + alpha) with alpha
    from ``ladder_exponents(p, n)``.  Quarter-spaced powers are nearly
    collinear on a usable window, so an unconstrained fit of the whole
    ladder scatters the expansion; instead every slot subset up to
    ``max_slots`` containing the t^1 slot competes by weighted residual,
    the sparsest subset within ``rss_factor`` of the best wins, and the
    winner must keep its t^1 coefficient stable when the window is
    halved.  Returns the coefficient and a diagnostic dict (selected
    exponents, residual, the half-window shift, and the stability sigma
    used as the fitted coefficient's uncertainty).
    """
    ts = np.asarray(ts, dtype=float)
    y = np.asarray(values, dtype=float)
    if ts.ndim != 1 or ts.shape != y.shape or len(ts) < 8:
        raise PolyError("coefficient extraction needs matching 1-d arrays "
                        "with at least 8 samples")
    alphas = [Fraction(1) + a for a in ladder_exponents(p, n)]
    target = alphas.index(Fraction(1))
    scale = float(np.max(np.abs(y)))
    w = 1.0 / (np.abs(y) + 1e-2 * (1.0 + scale))

    def solve(slots: tuple[int, ...], mask) -> tuple[np.ndarray, float]:
        X = np.stack([ts[mask] ** float(alphas[s]) for s in slots], axis=1)
        wm = w[mask]
        coef, *_ = np.linalg.lstsq(X * wm[:, None], y[mask] * wm,
                                   rcond=None)
        res = float(np.sqrt(np.mean((X @ coef - y[mask]) ** 2)))
        return coef, res

    full = np.ones(len(ts), dtype=bool)
    others = [s for s in range(len(alphas)) if s != target]
    candidates: list[tuple[int, float, tuple[int, ...], np.ndarray]] = []
    for size in range(0, min(max_slots, len(others)) + 1):
        for combo in combinations(others, size):
            slots = tuple(sorted(combo + (target,)))
            coef, res = solve(slots, full)
            candidates.append((len(slots), res, slots, coef))
    best_res = min(rec[1] for rec in candidates)
    bar = max(noise_floor, best_res * rss_factor)
    viable = [rec for rec in candidates if rec[1] <= bar]
    viable.sort(key=lambda rec: (rec[0], rec[1]))
    nslots, res, slots, coef = viable[0]
    value = float(coef[slots.index(target)])

    half = ts >= math.sqrt(ts[0] * ts[-1])
    if np.sum(half) >= len(slots) + 2:
        coef_h, _ = solve(slots, half)
        shift = float(coef_h[slots.index(target)]) - value
    else:
        shift = float("nan")
    sigma = max(abs(shift), noise_floor)
    info = {
        "exponents": [str(alphas[s]) for s in slots],
        "residual_rms": res,
        "window": (float(ts[0]), float(ts[-1])),
        "half_window_shift": shift,
        "sigma": sigma,
        "noise_floor": noise_floor,
        "subsets_tried": len(candidates),
    }
    return value, info


@dataclass
class AnomalyReport:
    """Both sides of the torsion anomaly identity on a parameter stencil."""

    upoint: tuple[complex, ...]
    names: tuple[str, ...]
    i: int
    j: int
    h: float
    lhs: float | None
    lhs_order2: float | None
    rhs: float
    tr_c_cbar: complex
    coeff_t: float
    coeff_info: dict
    anchor_value: complex
    anchor_error: float
    rel_residual: float | None
    marginal: bool
    torsion_values: dict | None
    fd_order: int
    t_anchor: float

    def to_dict(self) -> dict:
        return {
            "u": [[v.real, v.imag] for v in self.upoint],
            "directions": [self.names[self.i], self.names[self.j]],
            "fd_step": self.h,
            "fd_order": self.fd_order,
            "lhs": self.lhs,
            "lhs_order2": self.lhs_order2,
            "rhs": self.rhs,
            "tr_c_cbar": [self.tr_c_cbar.real, self.tr_c_cbar.imag],
            "coefficient_of_t": self.coeff_t,
            "coefficient_fit": self.coeff_info,
            "anchor_value": [self.anchor_value.real, self.anchor_value.imag],
            "anchor_error": self.anchor_error,
            "rel_residual": self.rel_residual,
            "marginal": self.marginal,
            "t_anchor": self.t_anchor,
            "torsion_values": self.torsion_values,
        }


def anomaly_check(spec: DeformationSpec, u, trunc: Truncation,
                  h: float = 0.05,
                  i: int = 0, j: int = 0,
                  p: int | None = None,
                  fd_order: int = 4,
                  sides: str = "both",
                  eps_h: float | None = None,
                  t_grid: np.ndarray | None = None,
                  torsion_window: tuple[float, float] | None = None,
                  coarse_levels: int | None = None,
                  noise_floor: float = 1e-5,
                  coeff_grid: np.ndarray | None = None,
                  coeff_floor: float | None = None,
                  t_anchor: float = 20.0) -> AnomalyReport:
    """Mixed-u derivative of log T^2 against the chiral-ring curvature.

    The right side is (-1)^n tr C_i Cbar_j minus the coefficient of t^1
    in the double trace of the phi_i and phibar_j insertions, the
    coefficient extracted by small-t ladder fitting; as an anchor, the
    large-t limit of the insertion supertrace minus the Delta-weighted
    convolution must reproduce (-1)^n tr C_i Cbar_j (evaluated at
    ``t_anchor``, reported as ``anchor_error``).  For a marginal
    direction the theorem forces the t^1 coefficient to vanish, so the
    report flags ``marginal`` and the coefficient competes against the
    fit noise floor.

    With ``sides="both"`` the left side evaluates torsion on the axis
    cross of the (2*fd_order//2+1)-squared u-stencil and combines the
    per-axis second derivatives into d/du d/dubar; the off-axis points
    of that stencil carry zero weight in this combination and are not
    solved.  Every stencil point runs the identical fixed pipeline
    (shared t-grid, shared fit window, shared reference series at the
    family origin) so that the smooth part of the truncation bias
    cancels in the differences.  ``sides="rhs"`` skips the torsion
    stencil, which is the expensive half.
    """
    u = _normalize_upoint(spec, u)
    if sides not in ("both", "rhs"):
        raise PolyError("sides must be 'both' or 'rhs'")
    if fd_order not in (2, 4):
        raise PolyError("fd_order must be 2 or 4")
    if p is None:
        deg = max(sum(e) for e in spec.f0.terms)
        p = deg - 1
    n = trunc.n
    marginal = (spec.kinds[i] == "marginal" or spec.kinds[j] == "marginal")

    # right side: frame, C matrices, full eigenbasis at the center
    ops_c = assemble_operators(spec, u, trunc, both_routes=False)
    sr = eigendecompose(ops_c, eps_h=eps_h, vectors=True)
    frame = harmonic_frame(spec, u, trunc, spec_result=sr)
    data = c_matrices(frame, spec)
    trcc = data.tr_c_cbar(i, j)

    terms_i = _phi_terms(spec.monomials[i], n)
    terms_jb = _conj_terms(_phi_terms(spec.monomials[j], n), n)
    phi_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(terms_i, trunc)))
    phibar_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(terms_jb, trunc)))
    prod_blocks = to_eigenbasis(sr, np.asarray(
        multiplication_operator(_product_terms(terms_i, terms_jb), trunc)))
    delta_phi = {k: sr.eigenvalues(k)[:, None] * phi_blocks[k]
                 for k in sr.degrees}

    anchor = (weighted_supertrace(sr, prod_blocks, t_anchor)
              - double_trace(sr, phibar_blocks, delta_phi, t_anchor))
    sign = (-1) ** n
    anchor_error = abs(anchor - sign * trcc)

    if coeff_grid is None:
        coeff_grid = np.geomspace(0.2, 1.0, 25)
    gvals = np.array([double_trace(sr, phi_blocks, phibar_blocks, tt).real
                      for tt in coeff_grid])
    floor = coeff_floor if coeff_floor is not None else noise_floor
    coeff1, info = coefficient_of_t(coeff_grid, gvals, p, n,
                                    noise_floor=floor)
    rhs = float(sign * trcc.real - coeff1)

    lhs = lhs2 = rel = None
    tvals = None
    if sides == "both":
        if i != j:
            raise PolyError("the torsion stencil is implemented for a "
                            "single complex direction (i == j)")
        if t_grid is None:
            t_grid = log_t_grid()
        series_center = heat_traces(sr, t_grid)
        if torsion_window is None:
            levels_c = coarse_levels or max(8, trunc.levels - 8)
            coarse = Truncation(trunc.n, levels_c, trunc.omega, trunc.p_buf)
            sc = eigendecompose(assemble_operators(
                spec, u, coarse, both_routes=False), eps_h=eps_h)
            lo, _ = choose_fit_window(heat_traces(sc, t_grid),
                                      series_center, rel_tol=5e-4)
            torsion_window = (lo, 0.85)
        series_ref = heat_traces(
            eigendecompose(assemble_operators(
                spec, tuple(0j for _ in u), trunc, both_routes=False),
                eps_h=eps_h), t_grid)

        def torsion_from(series) -> float:
            fit = deformation_fit(series, series_ref, p=p,
                                  window=torsion_window,
                                  noise_floor=noise_floor)
            return float(torsion(series, fit).value)

        def torsion_at(offset) -> float:
            if not any(offset):
                return torsion_from(series_center)
            upt = tuple(np.asarray(u) + np.asarray(offset))
            srp = eigendecompose(assemble_operators(
                spec, upt, trunc, both_routes=False), eps_h=eps_h)
            return torsion_from(heat_traces(srp, t_grid))

        pts: dict[tuple[complex, ...], float] = {}
        radius = fd_order // 2
        pcount = spec.nparams
        for axis_dir in (1.0, 1j):
            for m in range(-radius, radius + 1):
                off = _offset(pcount, i, axis_dir * m * h)
                if off not in pts:
                    pts[off] = torsion_at(off)
        center = pts[_offset(pcount, i, 0.0)]

        def second(axis_dir) -> tuple[float, float]:
            f1p = pts[_offset(pcount, i, axis_dir * h)]
            f1m = pts[_offset(pcount, i, -axis_dir * h)]
            o2 = (f1p - 2.0 * center + f1m) / (h * h)
            if fd_order == 2:
                return o2, o2
            f2p = pts[_offset(pcount, i, axis_dir * 2 * h)]
            f2m = pts[_offset(pcount, i, -axis_dir * 2 * h)]
            o4 = (-f2p + 16.0 * f1p - 30.0 * center + 16.0 * f1m - f2m) \
                / (12.0 * h * h)
            return o4, o2
        sxx, sxx2 = second(1.0)
        syy, syy2 = second(1j)
        lhs = 0.25 * (sxx + syy)
        lhs2 = 0.25 * (sxx2 + syy2)
        rel = abs(lhs - rhs) / max(abs(rhs), 1e-300)
        tvals = {repr(k): v for k, v in pts.items()}

    return AnomalyReport(
        upoint=u, names=spec.names, i=i, j=j, h=h,
        lhs=lhs, lhs_order2=lhs2, rhs=rhs,
        tr_c_cbar=trcc, coeff_t=coeff1, coeff_info=info,
        anchor_value=anchor, anchor_error=float(anchor_error),
        rel_residual=rel, marginal=marginal,
        torsion_values=tvals, fd_order=fd_order, t_anchor=t_anchor)


# ---------------------------------------------------------------------------
# Kaehler symmetry of the chiral-ring traces
# ---------------------------------------------------------------------------

def kahler_check(spec: DeformationSpec, u, trunc: Truncation,
                 h: float = DEFAULT_FD_STEP,
                 i: int = 0, k: int = 1, j: int = 0,
                 eps_h: float | None = None) -> dict:
    """Symmetry d/du_k tr C_i Cbar_j = d/du_i tr C_k Cbar_j by differences.

    Needs at least two parameters.  Returns both derivatives and their
    absolute and relative mismatch.
    """
    p = spec.nparams
    if p < 2 or i == k:
        raise PolyError("the symmetry check needs two distinct holomorphic "
                        "directions")
    cache = _FrameCache(spec, u, trunc, eps_h=eps_h)

    def tr_at(offset) -> complex:
        return cache.cdata(offset).tr_c_cbar(i, j)

    def tr_at_swapped(offset) -> complex:
        return cache.cdata(offset).tr_c_cbar(k, j)

    def du_of(fun, direction: int) -> complex:
        vals = [fun(_offset(p, direction, s))
                for s in (h, -h, 1j * h, -1j * h)]
        du, _ = _du_pair(vals[0], vals[1], vals[2], vals[3], h)
        return du

    lhs = du_of(tr_at, k)
    rhs = du_of(tr_at_swapped, i)
    err = abs(lhs - rhs)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return {"d_k_tr_ij": lhs, "d_i_tr_kj": rhs,
            "abs_error": float(err), "rel_error": float(err / scale),
            "fd_step": h, "solves": cache.solves()}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _matrix_json(mat: np.ndarray) -> dict:
    arr = np.asarray(mat)
    return {"re": arr.real.tolist(), "im": arr.imag.tolist()}


def ttstar_report(spec: DeformationSpec, u, trunc: Truncation,
                  h: float = DEFAULT_FD_STEP,
                  t: float = 0.5,
                  eps_h: float | None = None,
                  include_transgression: bool = True,
                  include_anomaly: bool = False,
                  anomaly_kwargs: dict | None = None) -> dict:
    """JSON-ready tt* summary at one parameter point.

    Contains the parameter point, the metric, the C matrices, and a
    residual table with one row per tt* equation and per theorem check,
    plus the finite-difference metadata.  The anomaly row is optional
    because its torsion stencil dominates the cost.
    """
    data = connection_fd(spec, u, trunc, h=h, eps_h=eps_h)
    rows = [{"check": key, "value": float(val), "fd_step": h}
            for key, val in sorted(data.residuals.items())]
    report = {
        "u": [[complex(v).real, complex(v).imag]
              for v in _normalize_upoint(spec, u)],
        "parameters": list(spec.names),
        "mu": spec.mu,
        "beta": data.beta,
        "frame": {
            "condition": data.frame.condition,
            "width_factor": data.frame.width_factor,
            "reference_labels": data.frame.reference_labels,
            "min_g_eigenvalue": data.min_g_eigenvalue,
        },
        "g": _matrix_json(data.g),
        "c_matrices": {nm: _matrix_json(data.c[nm]) for nm in data.names},
        "cbar_matrices": {nm: _matrix_json(data.cbar[nm])
                          for nm in data.names},
        "tr_c_cbar": _matrix_json(data.tr_c_cbar_matrix()),
        "fd": {"step": h, "scheme": "central differences, O(h^2)",
               "curvature": "nested first differences of the connection"},
        "truncation": {"n": trunc.n, "levels": trunc.levels,
                       "omega": trunc.omega, "p_buf": trunc.p_buf},
    }
    if include_transgression:
        tr = transgression_check(spec, u, t, trunc, h=h, eps_h=eps_h)
        rows.append({"check": "transgression relative residual",
                     "value": tr.rel_residual, "fd_step": h, "t": t})
        rows.append({"check": "mixed derivative of the N^1 supertrace",
                     "value": abs(tr.n1_mixed), "fd_step": h, "t": t})
        report["transgression"] = tr.to_dict()
    if include_anomaly:
        an = anomaly_check(spec, u, trunc, **(anomaly_kwargs or {}))
        if an.rel_residual is not None:
            rows.append({"check": "anomaly relative residual",
                         "value": an.rel_residual, "fd_step": an.h})
        rows.append({"check": "anomaly large-t anchor",
                     "value": an.anchor_error, "t": an.t_anchor})
        report["anomaly"] = an.to_dict()
    report["residual_table"] = rows
    return report
