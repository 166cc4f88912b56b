"""Exterior-algebra fiber over C^n and its operators.

The fiber of the form bundle at a point is Lambda*(C^n) with the 2n
one-dimensional generators dz^1..dz^n, dzb^1..dzb^n.  States are subsets of
generators, encoded as bitmasks (bit nu = dz^{nu+1} present, bit n+nu =
dzb^{nu+1} present) and sorted by form degree so degree blocks are
contiguous.  Operators are sparse matrices with exact Polynomial entries.

Normalization: the metric h = (1/2) sum dz (x) dzb makes |dz| = sqrt(2), so
the orthonormal fiber basis vectors carry one factor 1/sqrt(2) per wedge
factor.  Creation/annihilation operators below act on the orthonormal basis
and satisfy {a_m, a_l^dag} = delta_{ml} exactly; every sqrt(2) from the
geometric wedge operators enters squared (a factor 2) in the Hessian
endomorphism and in the Laplacian, so all matrix entries stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .polycore import (
    PolyError,
    PolyRing,
    Polynomial,
    QQi,
    QQI_ONE,
    QQI_ZERO,
)

__all__ = [
    "FiberBasis",
    "FiberOperator",
    "build_fiber",
    "creation",
    "annihilation",
    "number_operator",
    "parity_operator",
    "l_f_matrix",
    "supertrace_power",
    "hodge_star",
    "paired_ring_of",
    "coordinate_names",
]


@dataclass(frozen=True)
class FiberBasis:
    """Canonically ordered basis of Lambda*(C^n)."""

    n: int
    masks: tuple[int, ...]
    degrees: tuple[int, ...]
    position: dict

    @property
    def dim(self) -> int:
        return len(self.masks)

    @property
    def nmodes(self) -> int:
        return 2 * self.n

    def degree_indices(self, k: int) -> tuple[int, ...]:
        return tuple(i for i, d in enumerate(self.degrees) if d == k)

    def label(self, i: int) -> str:
        mask = self.masks[i]
        parts = []
        for nu in range(self.n):
            if mask >> nu & 1:
                parts.append(f"dz{nu + 1}")
        for nu in range(self.n):
            if mask >> (self.n + nu) & 1:
                parts.append(f"dzb{nu + 1}")
        return "^".join(parts) if parts else "1"


def build_fiber(n: int) -> FiberBasis:
    if n < 1:
        raise PolyError("fiber needs n >= 1")
    if n > 6:
        raise PolyError(f"fiber dimension 4^{n} exceeds the desk-scale bound")
    masks = sorted(range(1 << (2 * n)), key=lambda m: (m.bit_count(), m))
    degrees = tuple(m.bit_count() for m in masks)
    position = {m: i for i, m in enumerate(masks)}
    return FiberBasis(n, tuple(masks), degrees, position)


class FiberOperator:
    """Sparse fiber matrix with exact Polynomial entries.

    ``entries`` maps (row, col) index pairs into Polynomial; zero entries are
    never stored.  All arithmetic is exact.
    """

    def __init__(self, basis: FiberBasis, ring: PolyRing, entries=None):
        self.basis = basis
        self.ring = ring
        self.entries: dict[tuple[int, int], Polynomial] = {}
        if entries:
            for key, p in entries.items():
                if not p.is_zero():
                    self.entries[key] = p

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def identity(basis: FiberBasis, ring: PolyRing) -> "FiberOperator":
        one = Polynomial.const(ring, 1)
        return FiberOperator(basis, ring,
                             {(i, i): one for i in range(basis.dim)})

    @staticmethod
    def diagonal(basis: FiberBasis, ring: PolyRing, values) -> "FiberOperator":
        ent = {}
        for i, v in enumerate(values):
            p = v if isinstance(v, Polynomial) else Polynomial.const(ring, v)
            if not p.is_zero():
                ent[(i, i)] = p
        return FiberOperator(basis, ring, ent)

    def _check(self, other: "FiberOperator") -> None:
        if self.basis is not other.basis and self.basis.n != other.basis.n:
            raise PolyError("fiber mismatch")
        if self.ring != other.ring:
            raise PolyError("coefficient ring mismatch")

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other: "FiberOperator") -> "FiberOperator":
        self._check(other)
        out = dict(self.entries)
        for key, p in other.entries.items():
            q = out.get(key)
            s = p if q is None else q + p
            if s.is_zero():
                out.pop(key, None)
            else:
                out[key] = s
        return FiberOperator(self.basis, self.ring, out)

    def __sub__(self, other: "FiberOperator") -> "FiberOperator":
        return self + other.scale(QQi.of(-1))

    def __neg__(self) -> "FiberOperator":
        return self.scale(QQi.of(-1))

    def scale(self, c) -> "FiberOperator":
        c = QQi.of(c) if not isinstance(c, QQi) else c
        return FiberOperator(self.basis, self.ring,
                             {k: p.scale(c) for k, p in self.entries.items()})

    def scale_poly(self, q: Polynomial) -> "FiberOperator":
        return FiberOperator(self.basis, self.ring,
                             {k: p * q for k, p in self.entries.items()})

    def __matmul__(self, other: "FiberOperator") -> "FiberOperator":
        self._check(other)
        by_row: dict[int, list[tuple[int, Polynomial]]] = {}
        for (k, j), p in other.entries.items():
            by_row.setdefault(k, []).append((j, p))
        out: dict[tuple[int, int], Polynomial] = {}
        for (i, k), p in self.entries.items():
            for j, q in by_row.get(k, ()):
                key = (i, j)
                prod = p * q
                prev = out.get(key)
                s = prod if prev is None else prev + prod
                if s.is_zero():
                    out.pop(key, None)
                else:
                    out[key] = s
        return FiberOperator(self.basis, self.ring, out)

    def dagger(self) -> "FiberOperator":
        return FiberOperator(self.basis, self.ring,
                             {(j, i): p.conjugate()
                              for (i, j), p in self.entries.items()})

    def anticommutator(self, other: "FiberOperator") -> "FiberOperator":
        return self @ other + other @ self

    def commutator(self, other: "FiberOperator") -> "FiberOperator":
        return self @ other - other @ self

    # -- queries ----------------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.entries

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiberOperator):
            return NotImplemented
        return self.ring == other.ring and self.entries == other.entries

    def __hash__(self):
        raise TypeError("FiberOperator is mutable-ish; not hashable")

    def entry(self, i: int, j: int) -> Polynomial:
        return self.entries.get((i, j), Polynomial.zero(self.ring))

    def power(self, m: int) -> "FiberOperator":
        if m < 0:
            raise PolyError("negative operator power")
        acc = FiberOperator.identity(self.basis, self.ring)
        for _ in range(m):
            acc = acc @ self
        return acc

    def trace(self) -> Polynomial:
        acc = Polynomial.zero(self.ring)
        for (i, j), p in self.entries.items():
            if i == j:
                acc = acc + p
        return acc

    def supertrace(self) -> Polynomial:
        acc = Polynomial.zero(self.ring)
        deg = self.basis.degrees
        for (i, j), p in self.entries.items():
            if i == j:
                acc = acc + (p if deg[i] % 2 == 0 else -p)
        return acc

    def degree_block(self, k: int):
        """Entries restricted to the degree-k square block, with its index list."""
        idx = self.basis.degree_indices(k)
        pos = {g: a for a, g in enumerate(idx)}
        block = {}
        for (i, j), p in self.entries.items():
            if i in pos and j in pos:
                block[(pos[i], pos[j])] = p
        return block, idx

    def is_degree_preserving(self) -> bool:
        deg = self.basis.degrees
        return all(deg[i] == deg[j] for i, j in self.entries)

    def numeric(self, values=None):
        """Dense complex matrix with all variables evaluated at ``values``."""
        import numpy as np

        values = values or {}
        out = np.zeros((self.basis.dim, self.basis.dim), dtype=complex)
        for (i, j), p in self.entries.items():
            out[i, j] = p.eval_numeric(values)
        return out


# ---------------------------------------------------------------------------
# fermionic ladder operators (Jordan-Wigner signs)
# ---------------------------------------------------------------------------

def creation(basis: FiberBasis, ring: PolyRing, mode: int) -> FiberOperator:
    """a_mode^dag in the orthonormal basis; modes 0..n-1 are the dz factors,
    modes n..2n-1 the dzb factors."""
    if not 0 <= mode < basis.nmodes:
        raise PolyError(f"mode {mode} out of range")
    one = QQI_ONE
    ent = {}
    for j, mask in enumerate(basis.masks):
        if mask >> mode & 1:
            continue
        below = mask & ((1 << mode) - 1)
        sign = -1 if below.bit_count() % 2 else 1
        i = basis.position[mask | (1 << mode)]
        ent[(i, j)] = Polynomial.const(ring, QQi.of(sign) * one)
    return FiberOperator(basis, ring, ent)


def annihilation(basis: FiberBasis, ring: PolyRing, mode: int) -> FiberOperator:
    return creation(basis, ring, mode).dagger()


def number_operator(basis: FiberBasis, ring: PolyRing) -> FiberOperator:
    return FiberOperator.diagonal(basis, ring, basis.degrees)


def parity_operator(basis: FiberBasis, ring: PolyRing) -> FiberOperator:
    return FiberOperator.diagonal(
        basis, ring, [(-1) ** k for k in basis.degrees])


# ---------------------------------------------------------------------------
# the Hessian endomorphism B
# ---------------------------------------------------------------------------

def paired_ring_of(f: Polynomial) -> PolyRing:
    """The paired (holomorphic + conjugate) ring carrying B-matrix entries."""
    if any(c >= 0 for c in f.ring.conj):
        return f.ring
    return PolyRing.paired(f.ring.names)


def coordinate_names(f: Polynomial, n: int) -> list[str]:
    """The n coordinate variables of f, in ring order.

    Names starting with 'z' are coordinates; anything else is a deformation
    parameter.  When no name starts with 'z' every (holomorphic) variable is
    taken as a coordinate.
    """
    if any(c >= 0 for c in f.ring.conj):
        cand = [nm for i, nm in enumerate(f.ring.names) if f.ring.conj[i] > i]
    else:
        cand = list(f.ring.names)
    zlike = [nm for nm in cand if nm.startswith("z")]
    names = zlike or cand
    if len(names) != n:
        raise PolyError(f"found coordinates {names} in ring {f.ring.names}, "
                        f"but the fiber has n={n} modes")
    return names


def l_f_matrix(f: Polynomial, basis: FiberBasis, coefficient=2,
               variables=None) -> FiberOperator:
    """Degree-preserving endomorphism built from the holomorphic Hessian.

    B = c * sum_{nu,mu} [ (d_mu d_nu f) a_nu^dag b_mu + conj " b_nu^dag a_mu ]
    with a = dz-modes, b = dzb-modes and c = 2 for the metric
    h = (1/2) sum dz (x) dzb.  The degree-0 and degree-2n blocks vanish.
    """
    ring = paired_ring_of(f)
    n = basis.n
    mode_names = list(variables) if variables is not None else coordinate_names(f, n)
    if len(mode_names) != n:
        raise PolyError(f"need n={n} coordinate variables, got {mode_names}")
    fp = f if f.ring == ring else f.map_ring(ring)
    acc = FiberOperator(basis, ring)
    c = QQi.of(coefficient)
    for nu, znu in enumerate(mode_names):
        for mu, zmu in enumerate(mode_names):
            h = fp.diff(zmu).diff(znu)
            if h.is_zero():
                continue
            term = (creation(basis, ring, nu)
                    @ annihilation(basis, ring, n + mu)).scale_poly(h.scale(c))
            acc = acc + term + term.dagger()
    return acc


def supertrace_power(b: FiberOperator, m: int) -> Polynomial:
    """str(B^m) = sum_k (-1)^k tr(B_k^m) as an exact Polynomial."""
    return b.power(m).supertrace()


# ---------------------------------------------------------------------------
# Hodge star
# ---------------------------------------------------------------------------

def _wedge_sign(mask_a: int, mask_b: int) -> int:
    """Sign of concatenating two ordered generator sets (0 if they collide)."""
    if mask_a & mask_b:
        return 0
    inversions = 0
    b = mask_b
    while b:
        low = b & -b
        bit = low.bit_length() - 1
        inversions += (mask_a >> (bit + 1)).bit_count()
        b ^= low
    return -1 if inversions % 2 else 1


def _expand_modes(vectors) -> dict[int, QQi]:
    """Wedge an ordered list of one-mode vectors, each a {bit: coeff} map."""
    acc: dict[int, QQi] = {0: QQI_ONE}
    for vec in vectors:
        nxt: dict[int, QQi] = {}
        for mask, c in acc.items():
            for bit, w in vec.items():
                s = _wedge_sign(mask, 1 << bit)
                if s == 0:
                    continue
                coeff = c * w * QQi.of(s)
                key = mask | (1 << bit)
                prev = nxt.get(key, QQI_ZERO) + coeff
                if prev.is_zero():
                    nxt.pop(key, None)
                else:
                    nxt[key] = prev
        acc = nxt
    return acc


def _ordered_modes(mask: int, n: int) -> list[int]:
    return [nu for nu in range(2 * n) if mask >> nu & 1]


def hodge_star(basis: FiberBasis, ring: PolyRing | None = None) -> FiberOperator:
    """The Hodge star on the orthonormal fiber basis, C-linear, standard
    orientation dx^1^dy^1^..; maps degree k to 2n-k with ** = (-1)^k.

    Entries are computed exactly by passing through the real generator basis
    dx,dy per mode; the sqrt(2) normalizations cancel into integer powers
    of 2.
    """
    n = basis.n
    if ring is None:
        ring = PolyRing.holomorphic(["c"])  # constants only
    i_unit = QQi(Fraction(0), Fraction(1))
    half = QQi.of(Fraction(1, 2))
    # dz^nu = dx + i dy over real bits (2nu, 2nu+1); dzb^nu = dx - i dy
    def complex_mode_vec(mode: int) -> dict[int, QQi]:
        nu = mode if mode < n else mode - n
        sign = i_unit if mode < n else -i_unit
        return {2 * nu: QQI_ONE, 2 * nu + 1: sign}

    # dx^nu = (dz + dzb)/2; dy^nu = -i(dz - dzb)/2 over complex bits (nu, n+nu)
    def real_bit_vec(bit: int) -> dict[int, QQi]:
        nu, is_y = divmod(bit, 2)
        if not is_y:
            return {nu: half, n + nu: half}
        return {nu: -i_unit * half, n + nu: i_unit * half}

    full = (1 << (2 * n)) - 1
    ent: dict[tuple[int, int], Polynomial] = {}
    for j, mask in enumerate(basis.masks):
        k = basis.degrees[j]
        # complex monomial -> real-basis vector
        real_vec = _expand_modes(complex_mode_vec(m) for m in _ordered_modes(mask, n))
        # apply the real Hodge star: mask -> sign * complement
        starred: dict[int, QQi] = {}
        for rmask, c in real_vec.items():
            comp = full ^ rmask
            s = _wedge_sign(rmask, comp)
            starred[comp] = starred.get(comp, QQI_ZERO) + c * QQi.of(s)
        # real monomials back to complex monomials
        out: dict[int, QQi] = {}
        for rmask, c in starred.items():
            if c.is_zero():
                continue
            expansion = _expand_modes(real_bit_vec(b)
                                      for b in _ordered_modes(rmask, n))
            for cmask, w in expansion.items():
                prev = out.get(cmask, QQI_ZERO) + c * w
                if prev.is_zero():
                    out.pop(cmask, None)
                else:
                    out[cmask] = prev
        # normalization: unnormalized monomials differ from the orthonormal
        # basis by 2^{-deg/2}; the net factor for degree k -> 2n-k is 2^{n-k}
        norm = QQi.of(Fraction(2, 1) ** (n - k) if n >= k
                      else Fraction(1, 2 ** (k - n)))
        for cmask, w in out.items():
            i = basis.position[cmask]
            ent[(i, j)] = Polynomial.const(ring, w * norm)
    return FiberOperator(basis, ring, ent)
