"""Oscillator-basis discretization of the deformed complex Laplacian.

Each real coordinate carries a truncated Hermite basis of ``levels`` states
at frequency omega; a complex coordinate is the tensor square of that.  All
polynomial coefficient operators are assembled in a padded basis
(levels + p_buf per real coordinate) and projected back, so the matrix of a
fixed polynomial is the exact projection of the infinite operator and
products corrupt only the outermost levels.

Two assembly routes are kept deliberately separate:

* algebraic: Delta = {dbar_f, dbar_f^dag} with products evaluated in the
  padded space.  Positive semi-definite by construction (a projected sum of
  Gram matrices).
* direct: -2 sum d dbar + B + 2|df|^2 with B from the fiber module and the
  potential assembled as one exact multiplication operator.

They agree up to truncation-edge effects; the discrepancy on the trusted
part of the spectrum is reported, not assumed.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, eigvalsh

from .fiber import FiberBasis, build_fiber, coordinate_names
from .polycore import DeformationSpec, PolyError, Polynomial

__all__ = [
    "Truncation",
    "FormOperatorMatrix",
    "ladder_ops",
    "multiplication_operator",
    "assemble_operators",
    "AssembledOperators",
    "eigendecompose",
    "SpectrumResult",
    "HarmonicProjector",
    "harmonic_projector",
    "susy_identity_report",
    "SplitSystem",
    "omega_sweep",
    "DENSE_CAP",
]

DENSE_CAP = 6000
TRUSTED_FRACTION = 0.6


@dataclass
class FormOperatorMatrix:
    """A dense operator block between form-degree subspaces.

    ``source_degree``/``target_degree`` are None for operators that act on
    the scalar factor alone (the same matrix in every degree).
    """

    matrix: "np.ndarray"
    source_degree: int | None = None
    target_degree: int | None = None
    hermitian: bool = False

    def __array__(self, dtype=None, copy=None):
        arr = np.asarray(self.matrix)
        return arr.astype(dtype) if dtype is not None else arr

    @property
    def shape(self):
        return self.matrix.shape


@dataclass(frozen=True)
class Truncation:
    """Basis truncation: ``levels`` Hermite states per real coordinate."""

    n: int
    levels: int
    omega: float = 2.0
    p_buf: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise PolyError("need n >= 1")
        if self.levels < 2:
            raise PolyError("need at least 2 levels")
        if self.omega <= 0:
            raise PolyError("omega must be positive")
        if self.p_buf < 0:
            raise PolyError("padding must be non-negative")

    @property
    def padded(self) -> int:
        return self.levels + self.p_buf

    @property
    def scalar_dim(self) -> int:
        return self.levels ** (2 * self.n)

    def block_dim(self, k: int) -> int:
        return math.comb(2 * self.n, k) * self.scalar_dim

    def key(self) -> tuple:
        return (self.n, self.levels, float(self.omega), self.p_buf)


# ---------------------------------------------------------------------------
# one-dimensional building blocks
# ---------------------------------------------------------------------------

def ladder_ops(trunc: Truncation) -> tuple[np.ndarray, np.ndarray]:
    """Annihilation and creation matrices on the unpadded 1-d basis."""
    size = trunc.levels
    a = np.zeros((size, size))
    for m in range(1, size):
        a[m - 1, m] = math.sqrt(m)
    return a, a.T.copy()


def _x_1d(size: int, omega: float) -> np.ndarray:
    x = np.zeros((size, size))
    for m in range(size - 1):
        x[m, m + 1] = x[m + 1, m] = math.sqrt((m + 1) / (2 * omega))
    return x


def _ddx_1d(size: int, omega: float) -> np.ndarray:
    d = np.zeros((size, size))
    for m in range(size - 1):
        v = math.sqrt(omega * (m + 1) / 2)
        d[m, m + 1] = v
        d[m + 1, m] = -v
    return d


class _CoordinateOps:
    """Sparse multiplication/derivative operators on one padded complex
    coordinate (dimension padded**2, x-major index m_x * padded + m_y)."""

    def __init__(self, trunc: Truncation):
        m = trunc.padded
        self.padded = m
        self.levels = trunc.levels
        x = sp.csr_matrix(_x_1d(m, trunc.omega))
        d = sp.csr_matrix(_ddx_1d(m, trunc.omega))
        eye = sp.identity(m, format="csr")
        self.z = (sp.kron(x, eye, format="csr")
                  + 1j * sp.kron(eye, x, format="csr"))
        self.zb = self.z.conj().T.tocsr()
        self.dz = 0.5 * (sp.kron(d, eye, format="csr")
                         - 1j * sp.kron(eye, d, format="csr"))
        self.dzb = 0.5 * (sp.kron(d, eye, format="csr")
                          + 1j * sp.kron(eye, d, format="csr"))
        self.eye = sp.identity(m * m, format="csr", dtype=complex)
        self._mono: dict[tuple[int, int], sp.csr_matrix] = {(0, 0): self.eye}
        keep = np.array([mx * m + my
                         for mx in range(trunc.levels)
                         for my in range(trunc.levels)])
        self._keep = keep

    def monomial(self, a: int, b: int) -> sp.csr_matrix:
        """Multiplication by z^a zbar^b in the padded pair space."""
        key = (a, b)
        got = self._mono.get(key)
        if got is not None:
            return got
        if b > 0:
            out = self.monomial(a, b - 1) @ self.zb
        else:
            out = self.monomial(a - 1, 0) @ self.z
        out = out.tocsr()
        self._mono[key] = out
        return out

    def project(self, mat: sp.spmatrix) -> sp.csr_matrix:
        keep = self._keep
        return mat.tocsr()[keep][:, keep]


def _poly_factors(terms: dict[tuple[int, ...], complex], n: int,
                  coords: list[_CoordinateOps]):
    """Multiplication by a polynomial as a list of kron terms.

    ``terms`` maps exponents over (z_1..z_n, zb_1..zb_n) to coefficients.
    Each returned item is (coefficient, tuple of per-coordinate padded
    matrices or None for identity).
    """
    out = []
    for exp, c in terms.items():
        factors: list[sp.csr_matrix | None] = []
        for nu in range(n):
            a, b = exp[nu], exp[n + nu]
            factors.append(coords[nu].monomial(a, b) if (a or b) else None)
        out.append((complex(c), tuple(factors)))
    return out


class _KronOp:
    """Sum of (fiber matrix) x (per-coordinate padded factors) terms."""

    def __init__(self, basis: FiberBasis, n: int, terms=None):
        self.basis = basis
        self.n = n
        # each term: (fiber: dict[(i,j)] -> complex, factors: tuple)
        self.terms: list[tuple[dict, tuple]] = list(terms or [])

    def add_term(self, fiber: dict, factors: tuple) -> None:
        if fiber:
            self.terms.append((fiber, factors))

    def __add__(self, other: "_KronOp") -> "_KronOp":
        return _KronOp(self.basis, self.n, self.terms + other.terms)

    def scale(self, c: complex) -> "_KronOp":
        return _KronOp(self.basis, self.n,
                       [({k: c * v for k, v in fib.items()}, fac)
                        for fib, fac in self.terms])

    def dagger(self) -> "_KronOp":
        out = []
        for fib, fac in self.terms:
            fib2 = {(j, i): np.conj(v) for (i, j), v in fib.items()}
            fac2 = tuple(None if f is None else f.conj().T.tocsr()
                         for f in fac)
            out.append((fib2, fac2))
        return _KronOp(self.basis, self.n, out)

    def __matmul__(self, other: "_KronOp") -> "_KronOp":
        out = _KronOp(self.basis, self.n)
        for fib_a, fac_a in self.terms:
            cols = {}
            for (i, k), v in fib_a.items():
                cols.setdefault(k, []).append((i, v))
            for fib_b, fac_b in other.terms:
                fib = {}
                for (k, j), w in fib_b.items():
                    for i, v in cols.get(k, ()):
                        key = (i, j)
                        fib[key] = fib.get(key, 0j) + v * w
                fib = {k: v for k, v in fib.items() if v != 0}
                if not fib:
                    continue
                fac = []
                for fa, fb in zip(fac_a, fac_b):
                    if fa is None:
                        fac.append(fb)
                    elif fb is None:
                        fac.append(fa)
                    else:
                        fac.append((fa @ fb).tocsr())
                out.add_term(fib, tuple(fac))
        return out

    def anticommutator(self, other: "_KronOp") -> "_KronOp":
        return self @ other + other @ self

    def assemble_blocks(self, coords: list[_CoordinateOps],
                        pairs) -> dict[tuple[int, int], np.ndarray]:
        """Dense matrices for the requested (target_degree, source_degree)
        pairs, in the projected (unpadded) basis."""
        basis = self.basis
        levels = coords[0].levels
        sdim = levels ** (2 * self.n)
        blocks: dict[tuple[int, int], np.ndarray] = {}
        deg_pos = {}
        for k in set(basis.degrees):
            idx = basis.degree_indices(k)
            deg_pos[k] = {g: a for a, g in enumerate(idx)}
        for kt, ks in pairs:
            rows = len(deg_pos[kt]) * sdim
            colsn = len(deg_pos[ks]) * sdim
            blocks[(kt, ks)] = np.zeros((rows, colsn), dtype=complex)
        for fib, fac in self.terms:
            scal = None
            for nu, f in enumerate(fac):
                piece = (coords[nu].project(coords[nu].eye) if f is None
                         else coords[nu].project(f))
                scal = piece if scal is None else sp.kron(scal, piece,
                                                          format="csr")
            dense = np.asarray(scal.todense())
            for (i, j), v in fib.items():
                kt, ks = basis.degrees[i], basis.degrees[j]
                if (kt, ks) not in blocks:
                    continue
                a = deg_pos[kt][i]
                b = deg_pos[ks][j]
                blocks[(kt, ks)][a * sdim:(a + 1) * sdim,
                                 b * sdim:(b + 1) * sdim] += v * dense
        return blocks


# ---------------------------------------------------------------------------
# public assembly
# ---------------------------------------------------------------------------

def multiplication_operator(terms: dict[tuple[int, ...], complex] | Polynomial,
                            trunc: Truncation,
                            values: dict | None = None,
                            hermitize: bool = True) -> FormOperatorMatrix:
    """Matrix of multiplication by a polynomial on the scalar basis.

    Accepts either a Polynomial (evaluated at ``values`` for any parameter
    variables, exponents over z_1..z_n then zb_1..zb_n) or a prepared
    exponent->coefficient map in that layout.  The result acts identically
    in every form degree.
    """
    n = trunc.n
    if isinstance(terms, Polynomial):
        terms = _numeric_z_terms(terms, n, values)
    coords = [_CoordinateOps(trunc) for _ in range(n)]
    band = max((sum(e) for e in terms), default=0)
    if band > trunc.p_buf + 1:
        warnings.warn(
            f"polynomial degree {band} exceeds padding {trunc.p_buf}; "
            "matrix entries near the truncation edge are inexact",
            stacklevel=2)
    acc = None
    for c, factors in _poly_factors(terms, n, coords):
        scal = None
        for nu, f in enumerate(factors):
            piece = (coords[nu].project(coords[nu].eye) if f is None
                     else coords[nu].project(f))
            scal = piece if scal is None else sp.kron(scal, piece, format="csr")
        term = c * np.asarray(scal.todense())
        acc = term if acc is None else acc + term
    if acc is None:
        acc = np.zeros((trunc.scalar_dim, trunc.scalar_dim), dtype=complex)
    is_real = all(
        abs(terms.get(e[n:] + e[:n], 0) - np.conj(c)) < 1e-14
        for e, c in terms.items())
    if hermitize and is_real:
        acc = 0.5 * (acc + acc.conj().T)
    return FormOperatorMatrix(acc, hermitian=is_real)


def _numeric_z_terms(p: Polynomial, n: int, values: dict | None
                     ) -> dict[tuple[int, ...], complex]:
    """Exponent map over (z_1..z_n, zb_1..zb_n) with parameters evaluated."""
    names = coordinate_names(p, n)
    ring = p.ring
    conj_names = []
    for nm in names:
        i = ring.index(nm)
        ci = ring.conj[i]
        conj_names.append(ring.names[ci] if ci >= 0 else None)
    keep = list(names) + [c for c in conj_names if c is not None]
    raw = p.numeric_terms(keep=keep, values=values or {})
    out: dict[tuple[int, ...], complex] = {}
    for e, c in raw.items():
        exp = [0] * (2 * n)
        pos = 0
        for i in range(len(names)):
            exp[i] = e[pos]
            pos += 1
        for i, cn in enumerate(conj_names):
            if cn is not None:
                exp[n + i] = e[pos]
                pos += 1
        out[tuple(exp)] = out.get(tuple(exp), 0j) + c
    return {e: c for e, c in out.items() if c != 0}


@dataclass
class AssembledOperators:
    """Matrices of the deformed complex Laplacian and its supercharges."""

    trunc: Truncation
    basis: FiberBasis
    fterms: dict
    delta_blocks: dict[int, np.ndarray]
    delta_direct_blocks: dict[int, np.ndarray] | None
    dbar_blocks: dict[int, np.ndarray]
    d_blocks: dict[int, np.ndarray]
    hermiticity_residual: float
    star_warning: str | None = None

    def number_diagonal(self, k: int) -> np.ndarray:
        dim = self.trunc.block_dim(k)
        return np.full(dim, float(k))

    @property
    def degrees(self) -> list[int]:
        return sorted(self.delta_blocks)

    def delta(self, k: int) -> FormOperatorMatrix:
        return FormOperatorMatrix(self.delta_blocks[k], k, k, hermitian=True)

    def dbar(self, k: int) -> FormOperatorMatrix:
        return FormOperatorMatrix(self.dbar_blocks[k], k, k + 1)

    def dbar_dagger(self, k: int) -> FormOperatorMatrix:
        return FormOperatorMatrix(self.dbar_blocks[k - 1].conj().T, k, k - 1)

    def d(self, k: int) -> FormOperatorMatrix:
        return FormOperatorMatrix(self.d_blocks[k], k, k + 1)

    def d_dagger(self, k: int) -> FormOperatorMatrix:
        return FormOperatorMatrix(self.d_blocks[k - 1].conj().T, k, k - 1)


def _gradient_terms(fterms: dict[tuple[int, ...], complex], n: int
                    ) -> list[dict[tuple[int, ...], complex]]:
    grads = []
    for nu in range(n):
        g: dict[tuple[int, ...], complex] = {}
        for e, c in fterms.items():
            if e[nu] == 0:
                continue
            e2 = list(e)
            e2[nu] -= 1
            g[tuple(e2)] = g.get(tuple(e2), 0j) + c * e[nu]
        grads.append({e: c for e, c in g.items() if c != 0})
    return grads


def _conj_terms(terms: dict[tuple[int, ...], complex], n: int
                ) -> dict[tuple[int, ...], complex]:
    return {e[n:] + e[:n]: np.conj(c) for e, c in terms.items()}


def _mult_terms_product(a: dict, b: dict) -> dict:
    out: dict[tuple[int, ...], complex] = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0j) + ca * cb
    return {e: c for e, c in out.items() if c != 0}


def assemble_operators(spec: DeformationSpec | dict,
                       u=None,
                       trunc: Truncation | None = None,
                       both_routes: bool = True) -> AssembledOperators:
    """Build the per-degree Laplacian blocks and the supercharge blocks.

    ``spec`` is either a DeformationSpec (with ``u`` the parameter values)
    or a plain exponent->coefficient map over (z, zb) for f directly.
    """
    if trunc is None:
        raise PolyError("a Truncation is required")
    n = trunc.n
    star_warning = None
    if isinstance(spec, DeformationSpec):
        if not spec.star_ok:
            star_warning = ("deformation violates the small-gap weight "
                            "condition; spectra may converge poorly")
        base = {e: complex(c) for e, c in
                spec.f_terms_numeric(u if u is not None else []).items()}
        # exponents of f0's ring are over z only; extend to (z, zb) layout
        fterms = {tuple(e) + (0,) * n: c for e, c in base.items()}
    else:
        fterms = {tuple(e): complex(c) for e, c in spec.items()}
        if any(len(e) != 2 * n for e in fterms):
            # allow z-only exponents
            fterms = {tuple(e) + (0,) * n: c for e, c in fterms.items()}
    if any(any(e[n:]) for e in fterms):
        raise PolyError("f must be holomorphic (no zb exponents)")

    basis = build_fiber(n)
    coords = [_CoordinateOps(trunc) for _ in range(n)]
    grads = _gradient_terms({e[:n] + (0,) * n: c for e, c in fterms.items()}, n)

    def creation_fiber(mode: int) -> dict:
        out = {}
        for j, mask in enumerate(basis.masks):
            if mask >> mode & 1:
                continue
            below = mask & ((1 << mode) - 1)
            sign = -1.0 if below.bit_count() % 2 else 1.0
            i = basis.position[mask | (1 << mode)]
            out[(i, j)] = sign
        return out

    sqrt2 = math.sqrt(2.0)

    def ident_factors():
        return tuple(None for _ in range(n))

    # dbar_f = sqrt(2) sum_nu [ chi_nu^dag (x) dzb_nu + psi_nu^dag (x) M_{d_nu f} ]
    dbar = _KronOp(basis, n)
    d_op = _KronOp(basis, n)
    for nu in range(n):
        chi_dag = creation_fiber(n + nu)
        psi_dag = creation_fiber(nu)
        fac_dzb = tuple(coords[nu].dzb if m == nu else None for m in range(n))
        fac_dz = tuple(coords[nu].dz if m == nu else None for m in range(n))
        dbar.add_term({k: sqrt2 * v for k, v in chi_dag.items()}, fac_dzb)
        d_op.add_term({k: sqrt2 * v for k, v in psi_dag.items()}, fac_dz)
        for c, factors in _poly_factors(grads[nu], n, coords):
            dbar.add_term({k: sqrt2 * c * v for k, v in psi_dag.items()},
                          factors)
        conj_grad = _conj_terms(grads[nu], n)
        for c, factors in _poly_factors(conj_grad, n, coords):
            d_op.add_term({k: sqrt2 * c * v for k, v in chi_dag.items()},
                          factors)

    delta_op = dbar.anticommutator(dbar.dagger())

    degrees = sorted(set(basis.degrees))
    delta_pairs = [(k, k) for k in degrees]
    raw = delta_op.assemble_blocks(coords, delta_pairs)
    delta_blocks: dict[int, np.ndarray] = {}
    herm_res = 0.0
    for k in degrees:
        blk = raw[(k, k)]
        scale = max(1.0, float(np.max(np.abs(blk))))
        herm_res = max(herm_res, float(np.max(np.abs(blk - blk.conj().T))) / scale)
        delta_blocks[k] = 0.5 * (blk + blk.conj().T)
    if herm_res > 1e-12:
        raise PolyError(f"assembled Laplacian is not Hermitian "
                        f"(relative residual {herm_res:.2e})")

    shift_pairs = [(k + 1, k) for k in degrees if k + 1 <= 2 * n]
    dbar_blocks = {k: m for (kt, k), m in
                   dbar.assemble_blocks(coords, shift_pairs).items()}
    d_blocks = {k: m for (kt, k), m in
                d_op.assemble_blocks(coords, shift_pairs).items()}

    delta_direct = None
    if both_routes:
        delta_direct = _assemble_direct(grads, n, coords, basis)

    return AssembledOperators(
        trunc=trunc, basis=basis, fterms=fterms,
        delta_blocks=delta_blocks, delta_direct_blocks=delta_direct,
        dbar_blocks=dbar_blocks, d_blocks=d_blocks,
        hermiticity_residual=herm_res, star_warning=star_warning)


def _assemble_direct(grads: list[dict], n: int,
                     coords: list[_CoordinateOps],
                     basis: FiberBasis) -> dict[int, np.ndarray]:
    """-2 sum d dbar + B + 2 |df|^2 with the potential as one exact operator."""
    # kinetic + potential terms are fiber-diagonal
    kin = _KronOp(basis, n)
    eye_fiber = {(i, i): 1.0 for i in range(basis.dim)}
    for nu in range(n):
        fac = tuple((coords[nu].dz @ coords[nu].dzb).tocsr() if m == nu else None
                    for m in range(n))
        kin.add_term({k: -2.0 * v for k, v in eye_fiber.items()}, fac)
    pot_terms: dict[tuple[int, ...], complex] = {}
    for g in grads:
        for e, c in _mult_terms_product(_conj_terms(g, n), g).items():
            pot_terms[e] = pot_terms.get(e, 0j) + 2.0 * c
    pot = _KronOp(basis, n)
    for c, factors in _poly_factors(pot_terms, n, coords):
        pot.add_term({k: c * v for k, v in eye_fiber.items()}, factors)

    # Hessian endomorphism: fiber entries are polynomials in z, zb
    hess = _KronOp(basis, n)
    for nu in range(n):
        for mu in range(n):
            h: dict[tuple[int, ...], complex] = {}
            for e, c in grads[mu].items():
                if e[nu] == 0:
                    continue
                e2 = list(e)
                e2[nu] -= 1
                h[tuple(e2)] = h.get(tuple(e2), 0j) + c * e[nu]
            if not h:
                continue
            # 2 h psi_nu^dag chi_mu + 2 conj(h) chi_nu^dag psi_mu
            fib_a = _fiber_product(_creation_dict(basis, nu),
                                   _annihilation_dict(basis, n + mu))
            fib_b = _fiber_product(_creation_dict(basis, n + nu),
                                   _annihilation_dict(basis, mu))
            for c, factors in _poly_factors(h, n, coords):
                hess.add_term({k: 2.0 * c * v for k, v in fib_a.items()},
                              factors)
            for c, factors in _poly_factors(_conj_terms(h, n), n, coords):
                hess.add_term({k: 2.0 * c * v for k, v in fib_b.items()},
                              factors)

    total = kin + pot + hess
    degrees = sorted(set(basis.degrees))
    raw = total.assemble_blocks(coords, [(k, k) for k in degrees])
    out = {}
    for k in degrees:
        blk = raw[(k, k)]
        out[k] = 0.5 * (blk + blk.conj().T)
    return out


def _creation_dict(basis: FiberBasis, mode: int) -> dict:
    out = {}
    for j, mask in enumerate(basis.masks):
        if mask >> mode & 1:
            continue
        below = mask & ((1 << mode) - 1)
        sign = -1.0 if below.bit_count() % 2 else 1.0
        out[(basis.position[mask | (1 << mode)], j)] = sign
    return out


def _annihilation_dict(basis: FiberBasis, mode: int) -> dict:
    return {(j, i): v for (i, j), v in _creation_dict(basis, mode).items()}


def _fiber_product(a: dict, b: dict) -> dict:
    cols = {}
    for (k, j), w in b.items():
        cols.setdefault(k, []).append((j, w))
    out = {}
    for (i, k), v in a.items():
        for j, w in cols.get(k, ()):
            out[(i, j)] = out.get((i, j), 0j) + v * w
    return {key: val for key, val in out.items() if val != 0}


# ---------------------------------------------------------------------------
# eigendecomposition
# ---------------------------------------------------------------------------

@dataclass
class EigenBlock:
    eigenvalues: np.ndarray
    vectors: np.ndarray | None
    source_degree: int  # degree this block was solved at (dedupe provenance)


@dataclass
class SpectrumResult:
    """Per-degree eigen-data of the Laplacian at one parameter point."""

    trunc: Truncation
    blocks: dict[int, EigenBlock]
    eps_h: float
    harmonic_counts: dict[int, int]
    gap_ratio: float
    gap_diagnostic: str | None
    fterms: dict
    upoint: tuple | None = None
    trusted_fraction: float = TRUSTED_FRACTION

    @property
    def degrees(self) -> list[int]:
        return sorted(self.blocks)

    def eigenvalues(self, k: int) -> np.ndarray:
        return self.blocks[k].eigenvalues

    def vectors(self, k: int) -> np.ndarray:
        v = self.blocks[k].vectors
        if v is None:
            raise PolyError(f"eigenvectors were not computed for degree {k}")
        return v

    def trusted_count(self, k: int) -> int:
        return max(1, int(len(self.blocks[k].eigenvalues)
                          * self.trusted_fraction))

    def nonzero_eigenvalues(self, k: int) -> np.ndarray:
        lam = self.blocks[k].eigenvalues
        return lam[self.harmonic_counts[k]:]

    @property
    def total_harmonics(self) -> int:
        return sum(self.harmonic_counts.values())


@dataclass
class HarmonicProjector:
    """Spectral split Id = Pi + G Delta per degree (needs eigenvectors)."""

    projectors: dict[int, np.ndarray]
    greens: dict[int, np.ndarray]

    def projector(self, k: int) -> np.ndarray:
        return self.projectors[k]

    def green(self, k: int) -> np.ndarray:
        return self.greens[k]


def _default_eps_h(all_eigs: np.ndarray) -> tuple[float, float, str | None]:
    """Threshold below which eigenvalues count as harmonic.

    Rule: among the lowest 10 pooled eigenvalues, find the largest
    multiplicative jump; the threshold is 1e-6 times the first eigenvalue
    above that jump.  A jump below a factor 10 is reported as ambiguous.
    """
    low = np.sort(all_eigs)[:10]
    low = np.maximum(low, 1e-300)
    if len(low) < 2:
        return 1e-6 * float(low[0]), float("inf"), None
    ratios = low[1:] / low[:-1]
    i = int(np.argmax(ratios))
    ratio = float(ratios[i])
    eps = 1e-6 * float(low[i + 1])
    diag = None
    if ratio < 10.0:
        diag = ("no clear harmonic/positive gap among the lowest "
                "eigenvalues; treating all modes as positive "
                "(increase levels if a kernel is expected)")
        eps = 1e-6 * float(low[0])
    return eps, ratio, diag


def eigendecompose(ops: AssembledOperators,
                   eps_h: float | None = None,
                   vectors: bool | int = False,
                   max_dense: int = DENSE_CAP,
                   route: str = "algebraic") -> SpectrumResult:
    """Dense Hermitian eigendecomposition of every degree block.

    ``vectors`` may be True (all eigenvectors), False (none), or an integer
    count of lowest eigenvectors per degree.  Blocks that agree to within
    solver noise are decomposed once; for n = 1 the degree-0 and degree-2
    blocks coincide by construction.
    """
    source = (ops.delta_blocks if route == "algebraic"
              else ops.delta_direct_blocks)
    if source is None:
        raise PolyError(f"route {route!r} was not assembled")
    blocks: dict[int, EigenBlock] = {}
    solved: list[int] = []
    for k in sorted(source):
        blk = source[k]
        if blk.shape[0] > max_dense:
            raise PolyError(
                f"degree-{k} block is {blk.shape[0]}x{blk.shape[0]}, above "
                f"the dense solver cap {max_dense}; lower the truncation or "
                "raise max_dense explicitly")
        reused = False
        for src in solved:
            other = source[src]
            if other.shape != blk.shape:
                continue
            scale = max(1.0, float(np.max(np.abs(other))))
            if float(np.max(np.abs(other - blk))) <= 1e-12 * scale:
                prev = blocks[src]
                blocks[k] = EigenBlock(prev.eigenvalues, prev.vectors, src)
                reused = True
                break
        if reused:
            continue
        if vectors is True:
            lam, vec = eigh(blk)
        elif vectors:
            nv = min(int(vectors), blk.shape[0])
            lam = eigvalsh(blk)
            _, vec = eigh(blk, subset_by_index=[0, nv - 1])
        else:
            lam, vec = eigvalsh(blk), None
        if vec is not None:
            _check_orthonormal(vec)
        blocks[k] = EigenBlock(lam, vec, k)
        solved.append(k)

    all_eigs = np.concatenate([b.eigenvalues for b in blocks.values()])
    scale = float(np.max(np.abs(all_eigs))) if len(all_eigs) else 1.0
    neg = float(np.min(all_eigs)) if len(all_eigs) else 0.0
    if neg < -1e-8 * scale:
        raise PolyError(f"negative eigenvalue {neg:.3e} beyond truncation "
                        "noise; the assembled operator is not PSD")
    gap_ratio = float("inf")
    diag = None
    if eps_h is None:
        eps_h, gap_ratio, diag = _default_eps_h(all_eigs)
    counts = {k: int(np.sum(b.eigenvalues < eps_h))
              for k, b in blocks.items()}
    return SpectrumResult(
        trunc=ops.trunc, blocks=blocks, eps_h=eps_h,
        harmonic_counts=counts, gap_ratio=gap_ratio, gap_diagnostic=diag,
        fterms=ops.fterms)


def _check_orthonormal(vec: np.ndarray, sample: int = 64) -> None:
    """Orthonormality guard on a column sample (full Gram is as expensive
    as the eigensolve itself for large blocks)."""
    cols = vec.shape[1]
    if cols > sample:
        idx = np.linspace(0, cols - 1, sample).astype(int)
        sub = vec[:, idx]
    else:
        sub = vec
    gram = sub.conj().T @ sub
    err = float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
    if err > 1e-10:
        raise PolyError(f"eigenvector orthonormality residual {err:.2e}")


def harmonic_projector(spec_result: SpectrumResult) -> HarmonicProjector:
    proj = {}
    greens = {}
    for k, blk in spec_result.blocks.items():
        if blk.vectors is None:
            raise PolyError("harmonic projector needs eigenvectors")
        h = spec_result.harmonic_counts[k]
        vh = blk.vectors[:, :h]
        proj[k] = vh @ vh.conj().T
        if blk.vectors.shape[1] < len(blk.eigenvalues):
            raise PolyError("Green operator needs the full eigenvector set")
        lam = blk.eigenvalues
        vn = blk.vectors[:, h:]
        greens[k] = (vn / lam[h:]) @ vn.conj().T
    return HarmonicProjector(proj, greens)


# ---------------------------------------------------------------------------
# SUSY identity report
# ---------------------------------------------------------------------------

def _window_vectors(spec_result: SpectrumResult, k: int,
                    energy_cut: float) -> np.ndarray:
    blk = spec_result.blocks[k]
    if blk.vectors is None:
        raise PolyError("SUSY report needs eigenvectors")
    m = int(np.searchsorted(blk.eigenvalues, energy_cut))
    m = max(1, min(m, blk.vectors.shape[1]))
    return blk.vectors[:, :m]


def susy_identity_report(ops: AssembledOperators,
                         spec_result: SpectrumResult,
                         energy_cut: float | None = None) -> dict[str, float]:
    """Residual norms of the supersymmetry algebra on the interior window.

    All operators are compressed onto low-lying eigenvectors of the
    Laplacian, by default those with eigenvalue below omega*levels/5.
    Calibration: an eigenstate of energy E occupies oscillator levels up to
    roughly E/omega, and products of truncated operators are wrong on the
    top levels, so the residual decays exponentially in (levels - E/omega);
    the default cut keeps it below 1e-8 at levels >= 40 for cubic examples.
    Eigenvalues themselves are variationally accurate much further up; this
    window guards eigenvector quality only.
    """
    n = ops.trunc.n
    top = 2 * n
    if energy_cut is None:
        energy_cut = ops.trunc.omega * ops.trunc.levels / 5.0
    res: dict[str, float] = {}

    def win(k):
        return _window_vectors(spec_result, k, energy_cut)

    def norm(mat):
        return float(np.linalg.norm(mat, 2)) if mat.size else 0.0

    # dbar^2 = 0 : degree k -> k+2
    worst = 0.0
    for k in range(top - 1):
        m = ops.dbar_blocks[k + 1] @ ops.dbar_blocks[k]
        worst = max(worst, norm(win(k + 2).conj().T @ m @ win(k)))
    res["dbar_squared"] = worst

    # {dbar, d} = 0 : degree k -> k+2
    worst = 0.0
    for k in range(top - 1):
        m = (ops.dbar_blocks[k + 1] @ ops.d_blocks[k]
             + ops.d_blocks[k + 1] @ ops.dbar_blocks[k])
        worst = max(worst, norm(win(k + 2).conj().T @ m @ win(k)))
    res["dbar_d_anticommutator"] = worst

    # {dbar, d^dag} = 0 : degree preserving
    worst = 0.0
    for k in range(top + 1):
        parts = []
        if k >= 1:
            parts.append(ops.dbar_blocks[k - 1] @ ops.d_blocks[k - 1].conj().T)
        if k <= top - 1:
            parts.append(ops.d_blocks[k].conj().T @ ops.dbar_blocks[k])
        if not parts:
            continue
        m = sum(parts)
        worst = max(worst, norm(win(k).conj().T @ m @ win(k)))
    res["dbar_ddag_anticommutator"] = worst

    # {dbar, dbar^dag} - Delta = 0
    worst = 0.0
    for k in range(top + 1):
        parts = [-ops.delta_blocks[k]]
        if k >= 1:
            parts.append(ops.dbar_blocks[k - 1] @ ops.dbar_blocks[k - 1].conj().T)
        if k <= top - 1:
            parts.append(ops.dbar_blocks[k].conj().T @ ops.dbar_blocks[k])
        m = sum(parts)
        worst = max(worst, norm(win(k).conj().T @ m @ win(k)))
    res["anticommutator_vs_delta"] = worst

    # degree bookkeeping: [N, dbar] = dbar holds exactly by block structure
    res["number_grading"] = 0.0
    return res


# ---------------------------------------------------------------------------
# tensor-product backgrounds
# ---------------------------------------------------------------------------

@dataclass
class SplitSystem:
    """Spectral data of f(z) = f_1(z_1...) + f_2(...) + ... from the factor
    systems.  The truncated operator of a variable-separated polynomial is
    exactly the tensor sum, so per-degree traces multiply and kernel counts
    convolve; nothing here is an approximation beyond the factor truncations.
    """

    factors: list[SpectrumResult]

    @property
    def n(self) -> int:
        return sum(s.trunc.n for s in self.factors)

    @property
    def degrees(self) -> list[int]:
        return list(range(2 * self.n + 1))

    def kernel_counts(self) -> dict[int, int]:
        conv = {0: 1}
        for s in self.factors:
            nxt: dict[int, int] = {}
            for k0, c0 in conv.items():
                for k1, c1 in s.harmonic_counts.items():
                    if c1:
                        nxt[k0 + k1] = nxt.get(k0 + k1, 0) + c0 * c1
            conv = nxt
        return {k: conv.get(k, 0) for k in self.degrees}

    @property
    def total_harmonics(self) -> int:
        out = 1
        for s in self.factors:
            out *= s.total_harmonics
        return out


# ---------------------------------------------------------------------------
# omega sweep
# ---------------------------------------------------------------------------

def omega_sweep(spec: DeformationSpec | dict, u, n: int, levels: int,
                omegas=(1.0, 1.5, 2.0, 2.5, 3.0), probe: int = 8
                ) -> dict[float, float]:
    """Convergence probe: drift of the lowest eigenvalues when the level
    count drops by 4, per candidate frequency.  Smaller is better."""
    out = {}
    for w in omegas:
        drifts = []
        lam_ref = None
        for lev in (levels - 4, levels):
            tr = Truncation(n=n, levels=lev, omega=w)
            ops = assemble_operators(spec, u, tr, both_routes=False)
            sr = eigendecompose(ops)
            lam = np.sort(np.concatenate(
                [sr.eigenvalues(k)[:probe] for k in sr.degrees]))[:probe]
            if lam_ref is not None:
                drifts.append(float(np.max(np.abs(lam - lam_ref))))
            lam_ref = lam
        out[float(w)] = max(drifts) if drifts else float("nan")
    return out
