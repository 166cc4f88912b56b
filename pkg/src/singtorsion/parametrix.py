"""Exact short-time expansion of the heat kernel for deformed singularities.

The approximate kernel at order ``K`` is

    p_K(z, w, t) = (2 pi t)^{-n} exp(-|z - w|^2 / 2t) exp(-t g(z, w))
                   * sum_{a=0..K} U_a(z, w) t^a

where ``g`` is the straight-line average of the potential ``2|df|^2`` from
``w`` to ``z`` and every ``U_a`` is an exact matrix polynomial in the
displacement ``z - w``, the base point ``w``, and the deformation
parameters.  Requiring that ``(d_t + Delta) p_K`` cancel order by order in
``t`` forces one transport equation per level; its unique polynomial
solution is a scaled line integral of lower levels, which is what
:func:`build_parametrix` iterates.

Everything here is exact: coefficients are Gaussian rationals, transport
equations are verified monomial by monomial, and the diagonal supertraces
come out as canonical polynomials.  Two bookkeeping variables (tally
variables ``cg`` and ``cd``) ride along with every potential factor and
every derivative so that the order-counting argument behind the remainder
estimates can be checked mechanically on the computed coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import factorial
from typing import Callable, Iterable, Mapping, Sequence

from .fiber import (
    FiberBasis,
    FiberOperator,
    build_fiber,
    l_f_matrix,
)
from .polycore import (
    DeformationSpec,
    Polynomial,
    PolyError,
    PolyRing,
    QQi,
    WeightSystem,
    weights_of,
)

__all__ = [
    "CoordinateFrame",
    "ShiftedPolynomial",
    "ParametrixSequence",
    "WeightReport",
    "TraceCoefficients",
    "ConsttermSums",
    "build_parametrix",
    "v_coefficients",
    "v_word_check",
    "constterm_sums",
    "second_moment_sum",
    "hessian_cyclic_identity",
    "hessian_determinant_squared",
    "weight_report",
    "predicted_weight",
    "remainder_exponent",
    "minimal_order",
    "parametrix_report",
    "TALLY_POTENTIAL",
    "TALLY_DERIVATIVE",
    "DEFAULT_TERM_CAP",
]

#: Tally variable counting potential-gradient factors in a monomial.
TALLY_POTENTIAL = "cg"
#: Tally variable counting derivative factors in a monomial.
TALLY_DERIVATIVE = "cd"
#: Hard ceiling on the total number of stored monomials per level.
DEFAULT_TERM_CAP = 10**6


# ---------------------------------------------------------------------------
# coordinate frame: displacement + base point + parameters + tallies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoordinateFrame:
    """Paired polynomial ring split into displacement, base point,
    deformation parameter, and tally variables.

    The displacement variables reuse the coordinate names ``z1..zn`` (with
    conjugates); the base point is ``w1..wn``.  A polynomial in this frame
    represents a function of ``(z - w, w)`` jointly with the deformation
    parameters, so evaluating the displacement at zero restricts to the
    diagonal.
    """

    ring: PolyRing
    n: int
    zs: tuple[str, ...]
    zbs: tuple[str, ...]
    ws: tuple[str, ...]
    wbs: tuple[str, ...]
    params: tuple[str, ...]

    @staticmethod
    def build(n: int, params: Sequence[str] = ()) -> "CoordinateFrame":
        zs = tuple(f"z{i + 1}" for i in range(n))
        ws = tuple(f"w{i + 1}" for i in range(n))
        names = list(zs) + list(ws) + list(params)
        names += [TALLY_POTENTIAL, TALLY_DERIVATIVE]
        ring = PolyRing.paired(tuple(names))
        conj = {nm: ring.names[ring.conj[ring.index(nm)]] for nm in names}
        return CoordinateFrame(
            ring=ring,
            n=n,
            zs=zs,
            zbs=tuple(conj[nm] for nm in zs),
            ws=ws,
            wbs=tuple(conj[nm] for nm in ws),
            params=tuple(params),
        )

    # -- variable helpers ---------------------------------------------------

    def var(self, name: str) -> Polynomial:
        return Polynomial.var(self.ring, name)

    @property
    def displacement_names(self) -> tuple[str, ...]:
        return self.zs + self.zbs

    def _displacement_indices(self) -> tuple[int, ...]:
        return tuple(self.ring.index(nm) for nm in self.displacement_names)

    # -- core operations ----------------------------------------------------

    def shift(self, p: Polynomial) -> Polynomial:
        """Reexpress a polynomial in ``z`` as a polynomial in ``(z - w) + w``.

        The input may live in any subring whose variables appear here; the
        result treats the original coordinates as displacement variables.
        """
        q = p if p.ring == self.ring else p.map_ring(self.ring)
        table: dict[str, Polynomial] = {}
        for z, w in zip(self.zs, self.ws):
            table[z] = self.var(z) + self.var(w)
        for zb, wb in zip(self.zbs, self.wbs):
            table[zb] = self.var(zb) + self.var(wb)
        return q.substitute(table)

    def average(self, p: Polynomial, a: int) -> Polynomial:
        """Scaled line integral ``int_0^1 p(tau * disp, base) tau^{a-1} dtau``.

        A monomial of displacement degree ``m`` picks up the factor
        ``1 / (m + a)``.  This is the unique polynomial solution of the
        level-``a`` transport equation with right-hand side ``p``.
        """
        if a < 1:
            raise PolyError(f"line average needs a >= 1, got {a}")
        idx = self._displacement_indices()
        out: dict[tuple[int, ...], QQi] = {}
        for e, c in p.terms.items():
            m = sum(e[i] for i in idx)
            out[e] = c * QQi.of(Fraction(1, m + a))
        return Polynomial(self.ring, out)

    def radial(self, p: Polynomial) -> Polynomial:
        """Radial derivative in the displacement: ``sum_nu (z d_z + zb d_zb)``."""
        acc = Polynomial.zero(self.ring)
        for nm in self.displacement_names:
            acc = acc + p.diff(nm) * self.var(nm)
        return acc

    def at_diagonal(self, p: Polynomial) -> Polynomial:
        """Evaluate the displacement at zero."""
        return p.substitute({nm: 0 for nm in self.displacement_names})

    def strip_tallies(self, p: Polynomial) -> Polynomial:
        """Set both tally variables to one."""
        return p.substitute({TALLY_POTENTIAL: 1, TALLY_DERIVATIVE: 1})

    def tally_exponents(self, p: Polynomial) -> set[tuple[int, int]]:
        """The set of (potential, derivative) tally exponents in ``p``."""
        ig = self.ring.index(TALLY_POTENTIAL)
        idx = self.ring.index(TALLY_DERIVATIVE)
        return {(e[ig], e[idx]) for e in p.terms}

    def weighted_degree_max(self, p: Polynomial,
                            table: Mapping[str, Fraction]) -> Fraction | None:
        """Largest weighted degree over the monomials of ``p``; None if zero."""
        best: Fraction | None = None
        for e in p.terms:
            acc = Fraction(0)
            for nm, k in zip(self.ring.names, e):
                if k:
                    acc += k * table.get(nm, Fraction(0))
            if best is None or acc > best:
                best = acc
        return best

    # -- operator versions ---------------------------------------------------

    def op_map(self, op: FiberOperator,
               fn: Callable[[Polynomial], Polynomial]) -> FiberOperator:
        return FiberOperator(op.basis, self.ring,
                             {k: fn(p) for k, p in op.entries.items()})

    def op_shift(self, op: FiberOperator) -> FiberOperator:
        return self.op_map(op, self.shift)

    def op_average(self, op: FiberOperator, a: int) -> FiberOperator:
        return self.op_map(op, lambda p: self.average(p, a))

    def op_diff(self, op: FiberOperator, name: str) -> FiberOperator:
        return self.op_map(op, lambda p: p.diff(name))


@dataclass(frozen=True)
class ShiftedPolynomial:
    """A scalar function of (displacement, base point) held exactly."""

    frame: CoordinateFrame
    poly: Polynomial

    def at_diagonal(self) -> Polynomial:
        return self.frame.at_diagonal(self.poly)

    def diff(self, name: str) -> "ShiftedPolynomial":
        return ShiftedPolynomial(self.frame, self.poly.diff(name))

    def radial_defect(self, target: Polynomial) -> Polynomial:
        """``(radial + 1) self - target``; zero iff self is the line average
        of a function whose shifted form is ``target``."""
        return self.frame.radial(self.poly) + self.poly - target

    def __str__(self) -> str:
        return str(self.poly)


# ---------------------------------------------------------------------------
# the coefficient sequence
# ---------------------------------------------------------------------------

class ParametrixSequence:
    """Exact heat-coefficient matrices ``U_0 .. U_K`` for one background.

    Build with :func:`build_parametrix`.  The tally-tagged matrices are in
    ``tagged``; ``coefficient(a)`` returns the clean level-``a`` matrix.
    """

    def __init__(self, *, frame: CoordinateFrame, basis: FiberBasis,
                 mode: str, convention: str, K: int,
                 f: Polynomial, f0: Polynomial,
                 potential: Polynomial, potential_shift: ShiftedPolynomial,
                 g: ShiftedPolynomial, tagged: list[FiberOperator],
                 rhs_builder: Callable[[int], FiberOperator],
                 weights: WeightSystem | None,
                 spec: DeformationSpec | None) -> None:
        self.frame = frame
        self.basis = basis
        self.mode = mode
        self.convention = convention
        self.K = K
        self.f = f
        self.f0 = f0
        self.potential = potential
        self.potential_shift = potential_shift
        self.g = g
        self.tagged = tagged
        self._rhs = rhs_builder
        self.weights = weights
        self.spec = spec

    @property
    def n(self) -> int:
        return self.frame.n

    def coefficient(self, a: int) -> FiberOperator:
        """Level-``a`` matrix with the tally variables stripped."""
        return self.frame.op_map(self.tagged[a], self.frame.strip_tallies)

    @property
    def term_counts(self) -> tuple[int, ...]:
        return tuple(sum(len(p.terms) for p in u.entries.values())
                     for u in self.tagged)

    # -- self-checks ----------------------------------------------------------

    def transport_residual(self, a: int) -> FiberOperator:
        """Transport equation defect at level ``a``: identically zero when the
        line average solved the level correctly."""
        if not 1 <= a <= self.K:
            raise PolyError(f"level {a} outside 1..{self.K}")
        ua = self.tagged[a]
        lhs = self.frame.op_map(ua, self.frame.radial) + ua.scale(a)
        return lhs - self._rhs(a)

    def tally_check(self, a: int) -> tuple[bool, int]:
        """Verify ``2 e(cg) + e(cd) = 2a`` on every monomial of ``U_a`` and
        return (ok, max cg exponent)."""
        seen: set[tuple[int, int]] = set()
        for p in self.tagged[a].entries.values():
            seen |= self.frame.tally_exponents(p)
        ok = all(2 * eg + ed == 2 * a for eg, ed in seen)
        ok = ok and all(eg <= (2 * a) // 3 for eg, _ in seen)
        return ok, max((eg for eg, _ in seen), default=0)

    def remainder(self) -> dict[int, FiberOperator]:
        """Coefficients of ``t^K, t^{K+1}, t^{K+2}`` in ``(d_t + Delta) p_K``
        after factoring out the Gaussian and the ``exp(-t g)`` weight.

        These are the only orders that fail to cancel; each is the negated
        pointwise right-hand side of the next transport level with the
        missing ``U_{a > K}`` dropped.
        """
        return {self.K + j: -self._rhs(self.K + 1 + j) for j in range(3)}

    # -- diagonal data ---------------------------------------------------------

    def diagonal_supertrace(self, a: int, degree: int | None = None) -> Polynomial:
        """Supertrace of ``U_a`` on the diagonal, optionally restricted to the
        total-degree-``degree`` part in the base-point variables."""
        diag = self.frame.op_map(self.tagged[a],
                                 lambda p: self.frame.strip_tallies(
                                     self.frame.at_diagonal(p)))
        s = diag.supertrace()
        if degree is None:
            return s
        keep_idx = [self.frame.ring.index(nm)
                    for nm in self.frame.ws + self.frame.wbs]
        out = {e: c for e, c in s.terms.items()
               if sum(e[i] for i in keep_idx) == degree}
        return Polynomial(self.frame.ring, out)

    def expected_top_supertrace(self) -> Polynomial:
        """``(-1)^n 4^n |det Hess f|^2`` at the base point: the value the
        level-``2n`` diagonal supertrace must reproduce exactly."""
        det = hessian_determinant_squared(self.f, self.frame)
        return det.scale(QQi.of(Fraction((-4) ** self.n)))


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

def _swap_convention_sign(basis: FiberBasis) -> list[int]:
    """Diagonal signs relating the two wedge-ordering conventions.

    Listing antiholomorphic generators before holomorphic ones multiplies
    the basis form with ``i`` holomorphic and ``j`` antiholomorphic factors
    by ``(-1)^{ij}``.
    """
    n = basis.n
    signs = []
    for mask in basis.masks:
        hol = (mask & ((1 << n) - 1)).bit_count()
        anti = (mask >> n).bit_count()
        signs.append(-1 if (hol * anti) % 2 else 1)
    return signs


def _gradient_potential(f: Polynomial, frame: CoordinateFrame,
                        names: Sequence[str]) -> Polynomial:
    """``2 sum_nu |d_nu f|^2`` in the frame ring."""
    fq = f if f.ring == frame.ring else f.map_ring(frame.ring)
    acc = Polynomial.zero(frame.ring)
    for nm in names:
        d = fq.diff(nm)
        acc = acc + d * d.conjugate()
    return acc.scale(2)


def build_parametrix(source: DeformationSpec | Polynomial, *,
                     K: int | None = None, mode: str | None = None,
                     convention: str = "standard",
                     term_cap: int = DEFAULT_TERM_CAP) -> ParametrixSequence:
    """Compute the exact heat coefficients ``U_0 .. U_K``.

    ``source`` is either a bare polynomial (treated as an undeformed
    background) or a deformation family; in the latter case the parameters
    stay symbolic.  ``mode`` selects where the deformation enters:
    ``"marginal"`` keeps the full gradient potential in the Gaussian weight,
    ``"relevant"`` builds the weight from the undeformed potential and routes
    the difference into the endomorphism term.  The default follows the
    classification of the deformation directions.

    ``convention`` may be ``"swapped"`` to rerun the whole recursion with the
    opposite wedge-ordering convention; diagonal supertraces must not depend
    on it.  Full symbolic runs are limited to one or two variables.
    """
    if isinstance(source, DeformationSpec):
        spec: DeformationSpec | None = source
        f0 = source.f0
        param_names = source.names
        kinds = source.kinds
    else:
        spec = None
        f0 = source
        param_names = ()
        kinds = ()
    n = f0.ring.nvars if all(c < 0 for c in f0.ring.conj) else f0.ring.nvars // 2
    if n > 2:
        raise PolyError("full symbolic coefficients are limited to n <= 2; "
                        "the rational summaries accept larger n")
    if mode is None:
        mode = "relevant" if any(k == "relevant" for k in kinds) else "marginal"
    if mode not in ("marginal", "relevant"):
        raise PolyError(f"unknown mode {mode!r}")
    if convention not in ("standard", "swapped"):
        raise PolyError(f"unknown convention {convention!r}")
    if K is None:
        K = 2 * n + 3

    frame = CoordinateFrame.build(n, param_names)
    basis = build_fiber(n)
    ring = frame.ring

    f = f0.map_ring(ring)
    if spec is not None:
        for nm, phi in zip(spec.names, spec.monomials):
            f = f + phi.map_ring(ring) * frame.var(nm)

    body = f if mode == "marginal" else f0.map_ring(ring)
    potential = _gradient_potential(body, frame, frame.zs)
    potential_shift = ShiftedPolynomial(frame, frame.shift(potential))
    g = ShiftedPolynomial(frame, frame.average(potential_shift.poly, 1))

    b_op = l_f_matrix(f, basis, variables=frame.zs)
    b_shift = frame.op_shift(b_op)
    if mode == "relevant":
        diff = _gradient_potential(f, frame, frame.zs) - potential
        if not diff.is_zero():
            extra = FiberOperator.diagonal(basis, ring,
                                           [frame.shift(diff)] * basis.dim)
            b_shift = b_shift + extra
    if convention == "swapped":
        signs = _swap_convention_sign(basis)
        s_op = FiberOperator.diagonal(basis, ring, signs)
        b_shift = s_op @ b_shift @ s_op

    tally_g = frame.var(TALLY_POTENTIAL)
    tally_d = frame.var(TALLY_DERIVATIVE)
    dd = tally_d * tally_d
    b_tagged = frame.op_map(b_shift, lambda p: p * dd)
    g_mixed = [ShiftedPolynomial(frame, g.poly.diff(z).diff(zb) * tally_g * dd)
               for z, zb in zip(frame.zs, frame.zbs)]
    g_hol = [ShiftedPolynomial(frame, g.poly.diff(z) * tally_g * tally_d)
             for z in frame.zs]
    g_anti = [ShiftedPolynomial(frame, g.poly.diff(zb) * tally_g * tally_d)
              for zb in frame.zbs]

    tagged: list[FiberOperator] = [FiberOperator.identity(basis, ring)]

    def rhs(a: int) -> FiberOperator:
        """Pointwise right-hand side of the level-``a`` transport equation.

        Levels that do not exist (negative, or above the computed top when
        assembling the remainder) contribute nothing.
        """
        def level(j: int) -> FiberOperator | None:
            if j < 0 or j >= len(tagged):
                return None
            return tagged[j]

        acc = FiberOperator(basis, ring)
        u1 = level(a - 1)
        if u1 is not None:
            lap = FiberOperator(basis, ring)
            for z, zb in zip(frame.zs, frame.zbs):
                lap = lap + frame.op_diff(frame.op_diff(u1, z), zb)
            acc = acc + frame.op_map(lap, lambda p: p * dd).scale(2)
            acc = acc - b_tagged @ u1
        u2 = level(a - 2)
        if u2 is not None:
            mixed = FiberOperator(basis, ring)
            for nu in range(frame.n):
                mixed = mixed + u2.scale_poly(g_mixed[nu].poly)
                mixed = mixed + frame.op_map(
                    frame.op_diff(u2, frame.zbs[nu]),
                    lambda p: p * g_hol[nu].poly * tally_d)
                mixed = mixed + frame.op_map(
                    frame.op_diff(u2, frame.zs[nu]),
                    lambda p: p * g_anti[nu].poly * tally_d)
            acc = acc - mixed.scale(2)
        u3 = level(a - 3)
        if u3 is not None:
            gg = Polynomial.zero(ring)
            for nu in range(frame.n):
                gg = gg + g_hol[nu].poly * g_anti[nu].poly
            acc = acc + u3.scale_poly(gg).scale(2)
        return acc

    for a in range(1, K + 1):
        ua = frame.op_average(rhs(a), a)
        count = sum(len(p.terms) for p in ua.entries.values())
        if count > term_cap:
            raise PolyError(
                f"level {a} holds {count} monomials, over the cap {term_cap}; "
                f"lower K or raise term_cap")
        tagged.append(ua)

    weights: WeightSystem | None
    try:
        weights = weights_of(f0)
    except PolyError:
        weights = None

    return ParametrixSequence(
        frame=frame, basis=basis, mode=mode, convention=convention, K=K,
        f=f, f0=f0.map_ring(ring), potential=potential,
        potential_shift=potential_shift, g=g, tagged=tagged,
        rhs_builder=rhs, weights=weights, spec=spec)


def hessian_determinant_squared(f: Polynomial,
                                frame: CoordinateFrame) -> Polynomial:
    """``|det Hess f|^2`` evaluated at the base point, in the frame ring."""
    fq = f if f.ring == frame.ring else f.map_ring(frame.ring)
    n = frame.n
    rows = [[fq.diff(frame.zs[i]).diff(frame.zs[j]) for j in range(n)]
            for i in range(n)]
    det = _determinant(rows, frame.ring)
    table: dict[str, Polynomial | int] = {}
    for z, w in zip(frame.zs, frame.ws):
        table[z] = frame.var(w)
    for zb, wb in zip(frame.zbs, frame.wbs):
        table[zb] = frame.var(wb)
    det_at_w = det.substitute(table)
    return det_at_w * det_at_w.conjugate()


def _determinant(rows: list[list[Polynomial]], ring: PolyRing) -> Polynomial:
    n = len(rows)
    if n == 1:
        return rows[0][0]
    acc = Polynomial.zero(ring)
    for j in range(n):
        minor = [[rows[i][k] for k in range(n) if k != j] for i in range(1, n)]
        term = rows[0][j] * _determinant(minor, ring)
        acc = acc + (term if j % 2 == 0 else -term)
    return acc


# ---------------------------------------------------------------------------
# weight bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightReport:
    """Quasi-homogeneous bookkeeping for one coefficient sequence.

    ``delta`` is the decay-rate exponent of the subtracted kernel;
    ``applicable`` records the small-gap condition ``q_max - q_min < 1/3``
    without which the expansion carries no decay at all.  ``levels`` holds
    ``(a, computed max weight, predicted max weight)`` rows; the computed
    value never exceeds the prediction, and ``remainder_exponent`` /
    ``minimal_K`` quantify how many levels are needed before the remainder
    is integrable against ``l0`` extra derivatives.
    """

    weights: WeightSystem
    applicable: bool
    delta: Fraction
    levels: tuple[tuple[int, Fraction, Fraction], ...]
    remainder_exponent: Fraction
    minimal_K: int | None
    l0: int

    @property
    def bounds_hold(self) -> bool:
        return all(c <= p for _, c, p in self.levels)


def predicted_weight(a: int, q_min: Fraction) -> Fraction:
    """Largest weighted degree a level-``a`` monomial can carry.

    Derived from the tally invariant ``2 p_g + 2 p_B + p_d = 2a`` with at
    least one derivative per potential factor: the maximum of
    ``2 p_g + p_B - 2 a q`` over the feasible region lands on the lattice
    point with ``p_g = floor(2a/3)``.
    """
    if a < 0:
        raise PolyError("level must be nonnegative")
    if a == 0:
        return Fraction(0)
    j, r = divmod(a, 3)
    base = (4 - 6 * q_min) * j
    if r == 0:
        return base
    if r == 1:
        return base + 1 - 2 * q_min
    return base + 2 - 4 * q_min


def remainder_exponent(weights: WeightSystem, K: int) -> Fraction:
    """Decay rate of the order-``K`` remainder against the Gaussian weight."""
    qm, qM = weights.q_min, weights.q_max
    return Fraction(K, 3) * weights.delta - Fraction(5 - 9 * qm, 3) / (1 - qM)


def minimal_order(weights: WeightSystem, n: int, l0: int = 0) -> int | None:
    """Smallest ``K`` whose remainder beats ``n + l0`` powers of ``t``;
    None when the weight gap is too large for any order to converge."""
    if weights.gap >= Fraction(1, 3):
        return None
    qm, qM = weights.q_min, weights.q_max
    need = (Fraction(5 - 9 * qm, 3) / (1 - qM) + n + l0
            + Fraction(l0) * qM / (2 - 2 * qM))
    bound = 3 * need / weights.delta
    k = int(bound) + 1
    while Fraction(k, 3) * weights.delta <= need:
        k += 1
    return k


def weight_report(seq: ParametrixSequence, l0: int = 0) -> WeightReport:
    """Check the computed levels against the weight predictions."""
    if seq.weights is None:
        raise PolyError("the undeformed polynomial is not quasi-homogeneous")
    ws = seq.weights
    applicable = ws.gap < Fraction(1, 3)
    table: dict[str, Fraction] = {}
    for zi, q in zip(range(seq.n), ws.weights):
        for nm in (seq.frame.zs[zi], seq.frame.zbs[zi],
                   seq.frame.ws[zi], seq.frame.wbs[zi]):
            table[nm] = q
    if seq.spec is not None:
        for nm, uw in zip(seq.spec.names, seq.spec.u_weights):
            conj = seq.frame.ring.names[
                seq.frame.ring.conj[seq.frame.ring.index(nm)]]
            table[nm] = uw
            table[conj] = uw
    levels: list[tuple[int, Fraction, Fraction]] = []
    track = seq.mode == "marginal" or seq.spec is None
    if track:
        for a in range(seq.K + 1):
            best: Fraction | None = None
            for p in seq.tagged[a].entries.values():
                got = seq.frame.weighted_degree_max(
                    seq.frame.strip_tallies(p), table)
                if got is not None and (best is None or got > best):
                    best = got
            if best is not None:
                levels.append((a, best, predicted_weight(a, ws.q_min)))
    return WeightReport(
        weights=ws,
        applicable=applicable,
        delta=ws.delta,
        levels=tuple(levels),
        remainder_exponent=remainder_exponent(ws, seq.K),
        minimal_K=minimal_order(ws, seq.n, l0),
        l0=l0,
    )


# ---------------------------------------------------------------------------
# rational coefficient lemmas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceCoefficients:
    """Coefficients of the gradient and mixed-derivative slots in the trace
    of the iterated endomorphism chain, indexed from 1.

    ``a[n]`` multiplies ``tr(B^{n-1} (dB . disp + dbB . conj disp))`` and
    ``b[n]`` the formal mixed-derivative slot.  Both are produced twice:
    by the two-term recursion the chain integral satisfies, and by the
    closed forms; ``matches`` confirms they agree level by level.
    """

    a_recursive: tuple[Fraction, ...]
    b_recursive: tuple[Fraction, ...]
    a_closed: tuple[Fraction, ...]
    b_closed: tuple[Fraction, ...]

    def a(self, n: int) -> Fraction:
        return self.a_recursive[n - 1]

    def b(self, n: int) -> Fraction:
        return self.b_recursive[n - 1]

    @property
    def matches(self) -> bool:
        return (self.a_recursive == self.a_closed
                and self.b_recursive == self.b_closed)


def v_coefficients(max_n: int) -> TraceCoefficients:
    """Exact slot coefficients up to ``max_n`` by recursion and closed form.

    The recursion integrates one more chain factor:
    ``a_{n+1} = -((-1)^n / n! + a_n) / (n + 2)`` and
    ``b_{n+1} = -(2 a_n + b_n) / (n + 3)``, seeded by ``a_1 = -1/2``,
    ``b_1 = 0``.
    """
    if max_n < 1:
        raise PolyError("need max_n >= 1")
    a_rec = [Fraction(-1, 2)]
    b_rec = [Fraction(0)]
    for n in range(1, max_n):
        sign = Fraction((-1) ** n)
        a_rec.append(-(sign / factorial(n) + a_rec[-1]) / (n + 2))
        b_rec.append(-(2 * a_rec[-2] + b_rec[-1]) / (n + 3))
    a_cl = [Fraction((-1) ** n, 2) / factorial(n - 1)
            for n in range(1, max_n + 1)]
    b_cl = [Fraction(0)] + [Fraction((-1) ** n, 4) / factorial(n - 2)
                            for n in range(2, max_n + 1)]
    return TraceCoefficients(tuple(a_rec), tuple(b_rec),
                             tuple(a_cl), tuple(b_cl))


def v_word_check(f0: Polynomial, max_n: int = 4) -> bool:
    """Ground the slot coefficients in the symbolic chain itself.

    Builds the pure chain ``V_n`` (no potential, no Laplacian term) for a
    concrete background, then checks exactly that the displacement-free part
    of ``tr V_n`` is ``(-1)^n tr B^n / n!`` and the displacement-linear part
    is the ``a_n`` slot.  The mixed slot cannot be isolated this way because
    the mixed second derivative of a holomorphic-plus-antiholomorphic matrix
    vanishes identically; its recursion is exercised rationally instead.
    """
    n = f0.ring.nvars if all(c < 0 for c in f0.ring.conj) else f0.ring.nvars // 2
    frame = CoordinateFrame.build(n)
    basis = build_fiber(n)
    coeffs = v_coefficients(max_n)

    b_op = l_f_matrix(f0.map_ring(frame.ring), basis, variables=frame.zs)
    b_shift = frame.op_shift(b_op)
    b_at_w = frame.op_map(b_shift, frame.at_diagonal)

    def to_base(op: FiberOperator) -> FiberOperator:
        return frame.op_map(op, frame.at_diagonal)

    chain = FiberOperator.identity(basis, frame.ring)
    for m in range(1, max_n + 1):
        chain = frame.op_average(-(b_shift @ chain), m)
        tr = chain.trace()
        pure = frame.at_diagonal(tr)
        want_pure = b_at_w.power(m).trace().scale(
            QQi.of(Fraction((-1) ** m, factorial(m))))
        if not (pure - want_pure).is_zero():
            return False
        linear = _displacement_linear_part(frame, tr)
        want_linear = Polynomial.zero(frame.ring)
        for nu in range(n):
            for nm in (frame.zs[nu], frame.zbs[nu]):
                slope = to_base(frame.op_diff(b_shift, nm))
                word = (b_at_w.power(m - 1) @ slope).trace()
                want_linear = want_linear + word * frame.var(nm)
        want_linear = want_linear.scale(QQi.of(coeffs.a(m)))
        if not (linear - want_linear).is_zero():
            return False
    return True


def _displacement_linear_part(frame: CoordinateFrame,
                              p: Polynomial) -> Polynomial:
    idx = [frame.ring.index(nm) for nm in frame.displacement_names]
    out = {e: c for e, c in p.terms.items() if sum(e[i] for i in idx) == 1}
    return Polynomial(frame.ring, out)


def hessian_cyclic_identity(f0: Polynomial) -> bool:
    """Exact cyclic-trace fact used by the constant-term bookkeeping:
    ``2n tr(B^{2n-1} d_nu B) = d_nu tr(B^{2n})`` for every coordinate."""
    paired = any(c >= 0 for c in f0.ring.conj)
    n = f0.ring.nvars // 2 if paired else f0.ring.nvars
    basis = build_fiber(n)
    b_op = l_f_matrix(f0, basis)
    names: Iterable[str] = b_op.ring.names
    power = b_op.power(2 * n - 1)
    full = (power @ b_op).trace()
    for nm in names:
        lhs = (power @ FiberOperator(
            basis, b_op.ring,
            {k: p.diff(nm) for k, p in b_op.entries.items()})).trace()
        if not (lhs.scale(2 * n) - full.diff(nm)).is_zero():
            return False
    return True


# ---------------------------------------------------------------------------
# constant-term bookkeeping
# ---------------------------------------------------------------------------

def second_moment_sum(n: int) -> int:
    """``sum_{i=2}^{2n} i (i - 1)`` summed term by term."""
    if n < 1:
        raise PolyError("need n >= 1")
    return sum(i * (i - 1) for i in range(2, 2 * n + 1))


@dataclass(frozen=True)
class ConsttermSums:
    """The three rational contributions to the constant heat-trace term of a
    marginal two-point insertion, kept as exact fractions.

    ``from_moment_sum`` collects the tower of mixed-derivative chain slots
    (one per chain position), ``from_exponential_derivative`` the single
    total-derivative term produced when the gradient of the Gaussian weight
    recombines with the top chain slot, ``from_gradient_insertion`` the
    third-order insertion that survives after its two determinant-derivative
    pieces cancel.  Their sum vanishing is what makes the constant term a
    pure index quantity.
    """

    n: int
    moment_sum: int
    moment_closed: Fraction
    from_moment_sum: Fraction
    from_exponential_derivative: Fraction
    from_gradient_insertion: Fraction

    @property
    def telescoped(self) -> bool:
        return Fraction(self.moment_sum) == self.moment_closed

    @property
    def total(self) -> Fraction:
        return (self.from_moment_sum + self.from_exponential_derivative
                + self.from_gradient_insertion)


def constterm_sums(n: int) -> ConsttermSums:
    """Assemble the three contributions for ``n`` variables.

    Each piece is computed from its combinatorial origin rather than pinned:
    the first from the second-moment sum over chain positions divided by the
    derivative-distribution count ``(2n-1) 2n`` and the chain length
    ``2n+1``; the second from the top slot coefficient ``a_{2n}``, which
    supplies exactly half of a total derivative (insertion weight 2, second
    order in the expansion of the squared evolution, scaling weight
    ``2^{1-m}`` at order ``m = 2``, and one sign from moving the derivative
    off the weight); the third from the gradient insertion (weight 4, order
    ``m = 3``) whose determinant-derivative pieces cancel against the
    Hessian-chain insertion by the cyclic trace identity.
    """
    if n < 1:
        raise PolyError("need n >= 1")
    s = second_moment_sum(n)
    closed = Fraction((2 * n - 1) * (2 * n) * (2 * n + 1), 3)
    count = (2 * n - 1) * (2 * n) * (2 * n + 1)
    from_moments = Fraction(s, 4) / count

    coeffs = v_coefficients(2 * n)
    a_top = coeffs.a(2 * n)
    half = a_top * factorial(2 * n - 1)
    from_derivative = (-Fraction(1, factorial(2)) * 2 * half
                       * Fraction(1, 2))

    from_gradient = Fraction(1, factorial(3)) * 4 * Fraction(1, 4)

    return ConsttermSums(
        n=n,
        moment_sum=s,
        moment_closed=closed,
        from_moment_sum=from_moments,
        from_exponential_derivative=from_derivative,
        from_gradient_insertion=from_gradient,
    )


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def parametrix_report(seq: ParametrixSequence, l0: int = 0) -> dict:
    """JSON-ready summary: term counts, tally invariant, transport defects,
    weight data, and the diagonal supertraces as canonical strings."""
    tally_ok = all(seq.tally_check(a)[0] for a in range(1, seq.K + 1))
    transport_ok = all(seq.transport_residual(a).is_zero()
                       for a in range(1, seq.K + 1))
    supertraces = {str(a): str(seq.diagonal_supertrace(a))
                   for a in range(seq.K + 1)}
    data: dict = {
        "n": seq.n,
        "mode": seq.mode,
        "convention": seq.convention,
        "K": seq.K,
        "term_counts": list(seq.term_counts),
        "tally_invariant": tally_ok,
        "transport_exact": transport_ok,
        "diagonal_supertraces": supertraces,
    }
    if seq.weights is not None:
        rep = weight_report(seq, l0)
        data["weights"] = {
            "q": [str(q) for q in rep.weights.weights],
            "delta": str(rep.delta),
            "applicable": rep.applicable,
            "remainder_exponent": str(rep.remainder_exponent),
            "minimal_K": rep.minimal_K,
            "levels": [[a, str(c), str(p)] for a, c, p in rep.levels],
            "bounds_hold": rep.bounds_hold,
        }
    return data
