"""Exact polynomial layer.

Complex-rational multivariate polynomials, quasi-homogeneous weight systems,
Jacobi rings with a graded-lex Groebner completion, and deformation
classification (relevant / marginal / irrelevant with the weight-gap
condition).  Everything here is exact: coefficients are pairs of Fractions,
no floats enter until a caller asks for a numeric evaluation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence


class PolyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coefficients

@dataclass(frozen=True)
class QQi:
    """Gaussian rational a + b*i with exact Fraction parts."""

    re: Fraction = Fraction(0)
    im: Fraction = Fraction(0)

    @staticmethod
    def of(value) -> "QQi":
        if isinstance(value, QQi):
            return value
        if isinstance(value, complex):
            return QQi(Fraction(value.real).limit_denominator(10**12),
                       Fraction(value.imag).limit_denominator(10**12))
        return QQi(Fraction(value))

    def __add__(self, other: "QQi") -> "QQi":
        return QQi(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "QQi") -> "QQi":
        return QQi(self.re - other.re, self.im - other.im)

    def __neg__(self) -> "QQi":
        return QQi(-self.re, -self.im)

    def __mul__(self, other: "QQi") -> "QQi":
        return QQi(self.re * other.re - self.im * other.im,
                   self.re * other.im + self.im * other.re)

    def __truediv__(self, other: "QQi") -> "QQi":
        d = other.re * other.re + other.im * other.im
        if d == 0:
            raise ZeroDivisionError("division by zero QQi")
        return QQi((self.re * other.re + self.im * other.im) / d,
                   (self.im * other.re - self.re * other.im) / d)

    def conj(self) -> "QQi":
        return QQi(self.re, -self.im)

    def is_zero(self) -> bool:
        return self.re == 0 and self.im == 0

    def to_complex(self) -> complex:
        return complex(self.re) + 1j * complex(self.im)

    def __str__(self) -> str:
        if self.im == 0:
            return str(self.re)
        if self.re == 0:
            return f"{self.im}*i"
        sign = "+" if self.im > 0 else "-"
        return f"({self.re}{sign}{abs(self.im)}*i)"


QQI_ZERO = QQi()
QQI_ONE = QQi(Fraction(1))


# ---------------------------------------------------------------------------
# rings and polynomials

@dataclass(frozen=True)
class PolyRing:
    """Fixed tuple of variable names with an optional conjugation pairing.

    ``conj`` maps a variable index to the index of its complex conjugate,
    or to -1 when the conjugate is not part of the ring (conjugation of a
    polynomial that touches such a variable is an error).
    """

    names: tuple[str, ...]
    conj: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise PolyError(f"duplicate variable names: {self.names}")
        if len(self.conj) != len(self.names):
            raise PolyError("conj table length mismatch")

    @staticmethod
    def holomorphic(names: Sequence[str]) -> "PolyRing":
        return PolyRing(tuple(names), tuple(-1 for _ in names))

    @staticmethod
    def paired(names: Sequence[str], bar_prefix: str = "zb") -> "PolyRing":
        """Ring with each variable followed by its conjugate partner block.

        Conjugate names: z1 -> zb1 (prefix replacement), anything else gets a
        'b' suffix (u -> ub).
        """
        names = tuple(names)
        bars = tuple(re.sub(r"^z", bar_prefix, nm) if nm.startswith("z")
                     else nm + "b" for nm in names)
        n = len(names)
        conj = tuple(range(n, 2 * n)) + tuple(range(0, n))
        return PolyRing(names + bars, conj)

    @property
    def nvars(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise PolyError(f"unknown variable {name!r} in ring {self.names}")

    def zero_exp(self) -> tuple[int, ...]:
        return (0,) * self.nvars


def _grlex_key(exp: tuple[int, ...]) -> tuple:
    return (sum(exp), exp)


@dataclass(frozen=True)
class Polynomial:
    """Immutable multivariate polynomial with QQi coefficients.

    Terms map exponent tuples to nonzero coefficients.  The graded-lex
    order (total degree first, then lexicographic with the first ring
    variable largest) is the canonical term order everywhere: printing,
    leading terms, Groebner reduction.
    """

    ring: PolyRing
    terms: Mapping[tuple[int, ...], QQi]

    @staticmethod
    def make(ring: PolyRing, items: Mapping[tuple[int, ...], QQi]) -> "Polynomial":
        clean = {e: c for e, c in items.items() if not c.is_zero()}
        return Polynomial(ring, clean)

    @staticmethod
    def zero(ring: PolyRing) -> "Polynomial":
        return Polynomial(ring, {})

    @staticmethod
    def const(ring: PolyRing, value) -> "Polynomial":
        c = QQi.of(value)
        if c.is_zero():
            return Polynomial(ring, {})
        return Polynomial(ring, {ring.zero_exp(): c})

    @staticmethod
    def var(ring: PolyRing, name: str, power: int = 1) -> "Polynomial":
        e = [0] * ring.nvars
        e[ring.index(name)] = power
        return Polynomial(ring, {tuple(e): QQI_ONE})

    # -- basic ring operations ------------------------------------------------

    def _check(self, other: "Polynomial") -> None:
        if self.ring != other.ring:
            raise PolyError("polynomial ring mismatch")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            s = out.get(e, QQI_ZERO) + c
            if s.is_zero():
                out.pop(e, None)
            else:
                out[e] = s
        return Polynomial(self.ring, out)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.ring, {e: -c for e, c in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        out: dict[tuple[int, ...], QQi] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                s = out.get(e, QQI_ZERO) + c1 * c2
                if s.is_zero():
                    out.pop(e, None)
                else:
                    out[e] = s
        return Polynomial(self.ring, out)

    def scale(self, value) -> "Polynomial":
        c = QQi.of(value)
        if c.is_zero():
            return Polynomial.zero(self.ring)
        return Polynomial(self.ring, {e: k * c for e, k in self.terms.items()})

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise PolyError("negative power")
        out = Polynomial.const(self.ring, 1)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def is_zero(self) -> bool:
        return not self.terms

    def __eq__(self, other) -> bool:
        return (isinstance(other, Polynomial) and self.ring == other.ring
                and dict(self.terms) == dict(other.terms))

    def __hash__(self):
        return hash((self.ring, tuple(sorted(self.terms.items(),
                                             key=lambda kv: kv[0]))))

    # -- calculus and structure -----------------------------------------------

    def diff(self, name: str) -> "Polynomial":
        i = self.ring.index(name)
        out: dict[tuple[int, ...], QQi] = {}
        for e, c in self.terms.items():
            if e[i] == 0:
                continue
            e2 = list(e)
            e2[i] -= 1
            out[tuple(e2)] = c * QQi(Fraction(e[i]))
        return Polynomial(self.ring, out)

    def conjugate(self) -> "Polynomial":
        out: dict[tuple[int, ...], QQi] = {}
        for e, c in self.terms.items():
            e2 = [0] * self.ring.nvars
            for i, k in enumerate(e):
                if k == 0:
                    continue
                j = self.ring.conj[i]
                if j < 0:
                    raise PolyError(
                        f"variable {self.ring.names[i]!r} has no conjugate in ring")
                e2[j] += k
            out[tuple(e2)] = c.conj()
        return Polynomial(self.ring, out)

    def total_degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def degree_in(self, name: str) -> int:
        i = self.ring.index(name)
        return max((e[i] for e in self.terms), default=0)

    def leading(self, key=_grlex_key) -> tuple[tuple[int, ...], QQi]:
        if not self.terms:
            raise PolyError("leading term of zero polynomial")
        e = max(self.terms, key=key)
        return e, self.terms[e]

    def monomials(self) -> Iterator[tuple[tuple[int, ...], QQi]]:
        for e in sorted(self.terms, key=_grlex_key, reverse=True):
            yield e, self.terms[e]

    def coefficient(self, exp: tuple[int, ...]) -> QQi:
        return self.terms.get(exp, QQI_ZERO)

    def map_ring(self, ring: PolyRing) -> "Polynomial":
        """Reinterpret in a larger ring matching variables by name."""
        idx = [ring.index(nm) for nm in self.ring.names]
        out: dict[tuple[int, ...], QQi] = {}
        for e, c in self.terms.items():
            e2 = [0] * ring.nvars
            for i, k in enumerate(e):
                e2[idx[i]] = k
            out[tuple(e2)] = c
        return Polynomial(ring, out)

    def substitute(self, values: Mapping[str, "Polynomial | QQi | int | Fraction"]) -> "Polynomial":
        """Substitute polynomials (or constants) for a subset of variables."""
        subs: dict[int, Polynomial] = {}
        for nm, v in values.items():
            if not isinstance(v, Polynomial):
                v = Polynomial.const(self.ring, QQi.of(v))
            subs[self.ring.index(nm)] = v
        out = Polynomial.zero(self.ring)
        for e, c in self.terms.items():
            term = Polynomial.const(self.ring, c)
            for i, k in enumerate(e):
                if k == 0:
                    continue
                if i in subs:
                    term = term * (subs[i] ** k)
                else:
                    term = term * Polynomial.var(self.ring, self.ring.names[i], k)
            out = out + term
        return out

    def eval_numeric(self, values: Mapping[str, complex]) -> complex:
        acc = 0j
        for e, c in self.terms.items():
            v = c.to_complex()
            for i, k in enumerate(e):
                if k:
                    nm = self.ring.names[i]
                    if nm not in values:
                        raise PolyError(f"no value supplied for variable {nm!r}")
                    v *= complex(values[nm]) ** k
            acc += v
        return acc

    def numeric_terms(self, keep: Sequence[str] | None = None,
                      values: Mapping[str, complex] | None = None
                      ) -> dict[tuple[int, ...], complex]:
        """Exponents over ``keep`` with complex coefficients, other variables
        evaluated at ``values``."""
        keep = tuple(keep) if keep is not None else self.ring.names
        kidx = [self.ring.index(nm) for nm in keep]
        values = values or {}
        out: dict[tuple[int, ...], complex] = {}
        for e, c in self.terms.items():
            v = c.to_complex()
            for i, k in enumerate(e):
                if k == 0 or i in kidx:
                    continue
                nm = self.ring.names[i]
                if nm not in values:
                    raise PolyError(f"no value supplied for variable {nm!r}")
                v *= complex(values[nm]) ** k
            key = tuple(e[i] for i in kidx)
            out[key] = out.get(key, 0j) + v
        return {k: v for k, v in out.items() if v != 0}

    # -- printing -------------------------------------------------------------

    def __str__(self) -> str:
        return format_poly(self)

    def __repr__(self) -> str:
        return f"Polynomial({format_poly(self)!r})"


def format_poly(p: Polynomial) -> str:
    """Canonical printer: graded-lex descending, explicit '*' and '^'."""
    if p.is_zero():
        return "0"
    chunks: list[str] = []
    for e, c in p.monomials():
        factors = [f"{nm}^{k}" if k > 1 else nm
                   for nm, k in zip(p.ring.names, e) if k > 0]
        if c.im == 0 and not factors:
            body = str(c.re)
            neg = c.re < 0
            if neg:
                body = str(-c.re)
        elif c.im == 0:
            neg = c.re < 0
            mag = abs(c.re)
            body = "*".join(([str(mag)] if mag != 1 else []) + factors)
        else:
            neg = False
            body = "*".join([str(c)] + factors)
        if not chunks:
            chunks.append(("-" if neg else "") + body)
        else:
            chunks.append(("- " if neg else "+ ") + body)
    return " ".join(chunks)


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z_0-9]*)|(\^)|(\*)|(/)|(\+)|(-)|(\()|(\)))")


class _Parser:
    """Recursive-descent parser for the polynomial input grammar:

        expr   := ['-'] term (('+' | '-') term)*
        term   := factor (('*' | '/') factor)*
        factor := rational | symbol ('^' uint)? | '(' expr ')'
        rational := uint ('/' uint)?

    Division is only by nonzero rational subexpressions.
    """

    def __init__(self, text: str, ring: PolyRing):
        self.text = text
        self.ring = ring
        self.pos = 0
        self.tok: str | None = None
        self.val: str = ""
        self._advance()

    def _advance(self) -> None:
        if self.pos >= len(self.text.rstrip()):
            self.tok = None
            return
        m = _TOKEN.match(self.text, self.pos)
        if not m:
            raise PolyError(f"bad character at {self.text[self.pos:]!r}")
        self.pos = m.end()
        groups = m.groups()
        kinds = ["int", "sym", "^", "*", "/", "+", "-", "(", ")"]
        for kind, g in zip(kinds, groups):
            if g is not None:
                self.tok, self.val = kind, g
                return

    def parse(self) -> Polynomial:
        p = self._expr()
        if self.tok is not None:
            raise PolyError(f"trailing input near {self.val!r}")
        return p

    def _expr(self) -> Polynomial:
        negate = False
        if self.tok == "-":
            negate = True
            self._advance()
        p = self._term()
        if negate:
            p = -p
        while self.tok in ("+", "-"):
            op = self.tok
            self._advance()
            q = self._term()
            p = p + q if op == "+" else p - q
        return p

    def _term(self) -> Polynomial:
        p = self._factor()
        while self.tok in ("*", "/"):
            op = self.tok
            self._advance()
            q = self._factor()
            if op == "*":
                p = p * q
            else:
                if len(q.terms) != 1 or sum(next(iter(q.terms))) != 0:
                    raise PolyError("division only by rational constants")
                c = next(iter(q.terms.values()))
                p = Polynomial(p.ring, {e: k / c for e, k in p.terms.items()})
        return p

    def _factor(self) -> Polynomial:
        if self.tok == "int":
            num = int(self.val)
            self._advance()
            return Polynomial.const(self.ring, Fraction(num))
        if self.tok == "sym":
            name = self.val
            self._advance()
            power = 1
            if self.tok == "^":
                self._advance()
                if self.tok != "int":
                    raise PolyError("exponent must be a nonnegative integer")
                power = int(self.val)
                self._advance()
            return Polynomial.var(self.ring, name, power)
        if self.tok == "(":
            self._advance()
            p = self._expr()
            if self.tok != ")":
                raise PolyError("unbalanced parenthesis")
            self._advance()
            return p
        raise PolyError(f"unexpected token {self.val!r}")


def parse_poly(text: str, ring: PolyRing | None = None) -> Polynomial:
    """Parse ``text``; if ``ring`` is None infer z-variables from the input.

    Inferred rings sort variables by name with natural numeric suffix order
    (z1, z2, ..., z10) so that parse/print round-trips are stable.
    """
    if ring is None:
        names = sorted(set(re.findall(r"[A-Za-z_][A-Za-z_0-9]*", text)),
                       key=_natural_key)
        if not names:
            names = ["z1"]
        ring = PolyRing.holomorphic(names)
    return _Parser(text, ring).parse()


def _natural_key(name: str) -> tuple:
    m = re.match(r"^([A-Za-z_]+)(\d*)$", name)
    if not m:
        return (name, 0)
    return (m.group(1), int(m.group(2) or 0))


def differentiate(p: Polynomial, name: str) -> Polynomial:
    return p.diff(name)


# ---------------------------------------------------------------------------
# weight systems

@dataclass(frozen=True)
class WeightSystem:
    """Quasi-homogeneity data: weights q_i with f0(lambda^{q_i} z_i) = lambda f0."""

    names: tuple[str, ...]
    weights: tuple[Fraction, ...]

    @property
    def q(self) -> tuple[Fraction, ...]:
        return self.weights

    @property
    def q_max(self) -> Fraction:
        return max(self.weights)

    @property
    def q_min(self) -> Fraction:
        return min(self.weights)

    @property
    def gap(self) -> Fraction:
        return self.q_max - self.q_min

    @property
    def delta(self) -> Fraction:
        """Decay-rate exponent (1 - 3(q_max - q_min)) / (1 - q_max)."""
        return (1 - 3 * self.gap) / (1 - self.q_max)

    @property
    def central_charge(self) -> Fraction:
        return sum((1 - 2 * q for q in self.weights), Fraction(0))

    def weight_of(self, p: Polynomial) -> Fraction:
        """Weighted degree of a quasi-homogeneous polynomial; error if mixed."""
        wts = {self._weighted_degree(e, p.ring) for e in p.terms}
        if len(wts) > 1:
            raise PolyError(f"polynomial is not weight-homogeneous: degrees {sorted(wts)}")
        if not wts:
            return Fraction(0)
        return wts.pop()

    def _weighted_degree(self, exp: tuple[int, ...], ring: PolyRing) -> Fraction:
        table = dict(zip(self.names, self.weights))
        acc = Fraction(0)
        for nm, k in zip(ring.names, exp):
            if k == 0:
                continue
            if nm not in table:
                raise PolyError(f"no weight assigned to variable {nm!r}")
            acc += k * table[nm]
        return acc

    @property
    def milnor_number(self) -> int:
        """mu = prod(1/q_i - 1) for a non-degenerate quasi-homogeneous germ."""
        mu = Fraction(1)
        for q in self.weights:
            mu *= (1 / q - 1)
        if mu.denominator != 1:
            raise PolyError(f"non-integer Milnor product {mu}")
        return int(mu)


def weights_of(f0: Polynomial) -> WeightSystem:
    """Solve sum_i q_i e_i = 1 over the monomials of f0, exactly.

    Raises if the system is inconsistent (not quasi-homogeneous) or leaves
    some weight undetermined (a variable f0 does not constrain).
    """
    n = f0.ring.nvars
    rows: list[list[Fraction]] = []
    for e in f0.terms:
        rows.append([Fraction(k) for k in e] + [Fraction(1)])
    # Gaussian elimination with exact pivots.
    pivots: list[int] = []
    r = 0
    for c in range(n):
        pivot = next((i for i in range(r, len(rows)) if rows[i][c] != 0), None)
        if pivot is None:
            continue
        rows[r], rows[pivot] = rows[pivot], rows[r]
        pr = rows[r]
        pr[:] = [v / pr[c] for v in pr]
        for i, row in enumerate(rows):
            if i != r and row[c] != 0:
                factor = row[c]
                row[:] = [v - factor * w for v, w in zip(row, pr)]
        pivots.append(c)
        r += 1
        if r == len(rows):
            break
    for row in rows[r:]:
        if any(v != 0 for v in row[:n]) or row[n] != 0:
            if all(v == 0 for v in row[:n]) and row[n] != 0:
                raise PolyError("f0 is not quasi-homogeneous: inconsistent weight system")
    if len(pivots) < n:
        missing = [f0.ring.names[c] for c in range(n) if c not in pivots]
        raise PolyError(f"weights undetermined for variables {missing}")
    sol = [Fraction(0)] * n
    for i, c in enumerate(pivots):
        sol[c] = rows[i][n]
    for q in sol:
        if q <= 0 or q >= 1:
            raise PolyError(f"weight {q} outside (0,1); not an isolated singularity setup")
    return WeightSystem(f0.ring.names, tuple(sol))


# ---------------------------------------------------------------------------
# Jacobi rings

def _divides(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return all(x <= y for x, y in zip(a, b))


def _exp_sub(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(x - y for x, y in zip(a, b))


def _exp_lcm(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(max(x, y) for x, y in zip(a, b))


def _reduce_full(p: Polynomial, basis: Sequence[Polynomial],
                 key=_grlex_key) -> Polynomial:
    """Full normal form: reduce every reducible term, not just the leading one."""
    ring = p.ring
    out: dict[tuple[int, ...], QQi] = {}
    work = dict(p.terms)
    lead = [g.leading(key) for g in basis]
    while work:
        e = max(work, key=key)
        c = work.pop(e)
        hit = next(((le, lc, g) for (le, lc), g in zip(lead, basis)
                    if _divides(le, e)), None)
        if hit is None:
            prev = out.get(e, QQI_ZERO) + c
            if prev.is_zero():
                out.pop(e, None)
            else:
                out[e] = prev
            continue
        le, lc, g = hit
        shift = _exp_sub(e, le)
        factor = c / lc
        for ge, gc in g.terms.items():
            e2 = tuple(a + b for a, b in zip(ge, shift))
            if e2 == e:
                continue
            prev = work.get(e2, QQI_ZERO) - factor * gc
            if prev.is_zero():
                work.pop(e2, None)
            else:
                work[e2] = prev
    return Polynomial(ring, out)


class JacobiRing:
    """C[z]/(df) presented by a graded-lex Groebner basis of the gradient ideal.

    Only the zero-dimensional case (isolated singularity) yields a finite
    monomial basis; ``basis`` is the staircase below the leading-term ideal,
    sorted graded-lex ascending.

    ``holomorphic`` restricts the gradient to a subset of the ring variables;
    the others act as exact coefficient parameters (deformation parameters u).
    The term order is then a block order, parameters last, so normal forms are
    linear over the parameter ring.
    """

    def __init__(self, f: Polynomial, degree_bound: int | None = None,
                 holomorphic: Sequence[str] | None = None):
        self.f = f
        self.ring = f.ring
        self.hol = tuple(holomorphic) if holomorphic is not None else f.ring.names
        self.hol_idx = tuple(f.ring.index(nm) for nm in self.hol)
        par_idx = tuple(i for i in range(f.ring.nvars) if i not in self.hol_idx)
        hol_idx = self.hol_idx

        def key(exp: tuple[int, ...]) -> tuple:
            return (_grlex_key(tuple(exp[i] for i in hol_idx)),
                    _grlex_key(tuple(exp[i] for i in par_idx)))

        self._key = key
        self.gradient = tuple(f.diff(nm) for nm in self.hol)
        if any(g.is_zero() for g in self.gradient):
            dead = [nm for nm, g in zip(self.hol, self.gradient) if g.is_zero()]
            raise PolyError(f"gradient vanishes identically in {dead}; "
                            "singularity is not isolated")
        if degree_bound is None:
            zdeg = max((sum(e[i] for i in hol_idx) for e in f.terms), default=0)
            degree_bound = max(2, len(self.hol) * zdeg)
        self.degree_bound = degree_bound
        self.groebner = self._buchberger([g for g in self.gradient])
        if par_idx:
            for g in self.groebner:
                le, _ = g.leading(self._key)
                if any(le[i] for i in par_idx):
                    raise PolyError(
                        "gradient ideal has a leading term involving the "
                        "deformation parameters; the parametric normal form "
                        "is not defined for this input")
        self.basis = self._staircase()
        self.mu = len(self.basis)

    def _buchberger(self, gens: list[Polynomial]) -> list[Polynomial]:
        key = self._key
        basis = [g for g in gens if not g.is_zero()]
        pairs = [(i, j) for i in range(len(basis)) for j in range(i)]
        guard = 0
        while pairs:
            guard += 1
            if guard > 4000:
                raise PolyError("Groebner completion did not stabilize "
                                f"(degree bound {self.degree_bound})")
            i, j = pairs.pop()
            gi, gj = basis[i], basis[j]
            (ei, ci), (ej, cj) = gi.leading(key), gj.leading(key)
            lcm = _exp_lcm(ei, ej)
            if lcm == tuple(a + b for a, b in zip(ei, ej)):
                continue  # coprime leading terms: S-poly reduces to zero
            if sum(lcm[i] for i in self.hol_idx) > 3 * self.degree_bound:
                raise PolyError("S-polynomial degree exceeded bound; "
                                "ideal may not be zero-dimensional")
            si = _shift_scale(gi, _exp_sub(lcm, ei), QQI_ONE / ci)
            sj = _shift_scale(gj, _exp_sub(lcm, ej), QQI_ONE / cj)
            s = _reduce_full(si - sj, basis, key)
            if not s.is_zero():
                le, lc = s.leading(key)
                s = Polynomial(s.ring, {e: c / lc for e, c in s.terms.items()})
                basis.append(s)
                pairs.extend((len(basis) - 1, k) for k in range(len(basis) - 1))
        # interreduce for a canonical reduced basis
        reduced: list[Polynomial] = []
        for k, g in enumerate(basis):
            others = basis[:k] + basis[k + 1:]
            le, _ = g.leading(key)
            if any(_divides(o.leading(key)[0], le) for o in others if not o.is_zero()):
                continue
            r = _reduce_full(g, [o for o in others if not o.is_zero()], key)
            if not r.is_zero():
                le2, lc2 = r.leading(key)
                reduced.append(Polynomial(r.ring, {e: c / lc2 for e, c in r.terms.items()}))
        return sorted(reduced, key=lambda g: key(g.leading(key)[0]))

    def _staircase(self) -> tuple[tuple[int, ...], ...]:
        n = self.ring.nvars
        lead = [g.leading(self._key)[0] for g in self.groebner]
        caps = {}
        for i in self.hol_idx:
            pure = [e[i] for e in lead if all(e[j] == 0 for j in range(n) if j != i)]
            if not pure:
                raise PolyError(
                    f"ideal not zero-dimensional: no pure power of "
                    f"{self.ring.names[i]!r} in the leading-term ideal")
            caps[i] = min(pure)
        out: list[tuple[int, ...]] = []
        # enumerate the box under the pure-power caps, keep unreachable monomials
        def rec(pos: int, partial: dict):
            if pos == len(self.hol_idx):
                exp = tuple(partial.get(i, 0) for i in range(n))
                if not any(_divides(le, exp) for le in lead):
                    out.append(exp)
                return
            i = self.hol_idx[pos]
            for k in range(caps[i]):
                partial[i] = k
                rec(pos + 1, partial)
            partial.pop(i, None)
        rec(0, {})
        return tuple(sorted(out, key=_grlex_key))

    def normal_form(self, p: Polynomial) -> Polynomial:
        if p.ring != self.ring:
            p = p.map_ring(self.ring)
        return _reduce_full(p, self.groebner, self._key)

    def basis_polys(self) -> list[Polynomial]:
        return [Polynomial(self.ring, {e: QQI_ONE}) for e in self.basis]

    def coordinates(self, p: Polynomial) -> list[Polynomial]:
        """Coordinates of p mod the gradient ideal in the monomial basis.

        Each coordinate is a polynomial in the parameter variables alone
        (a constant when the ring has no parameters).
        """
        nf = self.normal_form(p)
        hol_set = set(self.hol_idx)
        coords = [dict() for _ in self.basis]
        pos = {tuple(e[i] for i in self.hol_idx): a
               for a, e in enumerate(self.basis)}
        for e, c in nf.terms.items():
            zpart = tuple(e[i] for i in self.hol_idx)
            a = pos.get(zpart)
            if a is None:
                raise PolyError(f"normal form has monomial {e} outside the "
                                "staircase basis")
            par = tuple(0 if i in hol_set else e[i] for i in range(len(e)))
            coords[a][par] = coords[a].get(par, QQI_ZERO) + c
        return [Polynomial(self.ring, t) for t in coords]

    def multiplication_matrix(self, p: Polynomial) -> list[list[Polynomial]]:
        """Matrix of multiplication by p on the monomial basis (columns act on
        basis elements; entry [i][j] is the coordinate of basis[i] in
        p*basis[j], a polynomial in the parameter variables)."""
        if p.ring != self.ring:
            p = p.map_ring(self.ring)
        cols = [self.coordinates(p * Polynomial(self.ring, {e: QQI_ONE}))
                for e in self.basis]
        return [[cols[j][i] for j in range(self.mu)] for i in range(self.mu)]


def _shift_scale(p: Polynomial, shift: tuple[int, ...], c: QQi) -> Polynomial:
    return Polynomial(p.ring, {tuple(a + b for a, b in zip(e, shift)): k * c
                               for e, k in p.terms.items()})


def jacobi_basis(f: Polynomial, degree_bound: int | None = None,
                 holomorphic: Sequence[str] | None = None) -> JacobiRing:
    return JacobiRing(f, degree_bound, holomorphic)


# ---------------------------------------------------------------------------
# non-degeneracy and deformation classification

def check_nondegenerate(f0: Polynomial) -> dict:
    """Rule (a): no quadratic cross monomial z_i z_j, i != j.
    Rule (b): the gradient ideal is zero-dimensional.

    Returns a diagnostic dict; ``ok`` is the conjunction.
    """
    n = f0.ring.nvars
    cross = []
    for e in f0.terms:
        nz = [i for i, k in enumerate(e) if k > 0]
        if sum(e) == 2 and len(nz) == 2:
            cross.append(tuple(f0.ring.names[i] for i in nz))
    rule_a = not cross
    rule_b = True
    detail = ""
    mu = None
    try:
        ring = JacobiRing(f0)
        mu = ring.mu
    except PolyError as err:
        rule_b = False
        detail = str(err)
    return {
        "ok": rule_a and rule_b,
        "no_cross_terms": rule_a,
        "cross_terms": cross,
        "zero_dimensional": rule_b,
        "detail": detail,
        "mu": mu,
    }


@dataclass(frozen=True)
class DeformationSpec:
    """f = f0 + sum_i u_i phi_i with weight bookkeeping.

    ``u_weights[i] = 1 - wt(phi_i)``; positive is relevant, zero marginal.
    ``star_ok`` records the small-gap condition: q_max - q_min < 1/3 and
    either every direction is marginal or every direction is relevant with
    wt(phi_i) < 1 - 2(q_max - q_min).
    """

    f0: Polynomial
    weights: WeightSystem
    names: tuple[str, ...]
    monomials: tuple[Polynomial, ...]
    u_weights: tuple[Fraction, ...]
    kinds: tuple[str, ...]
    star_ok: bool
    mu: int

    @property
    def nparams(self) -> int:
        return len(self.names)

    def f_at(self, u: Sequence) -> Polynomial:
        """Exact deformed polynomial; u entries must be Fraction-convertible
        (use complex with rational parts for exact work, floats are snapped)."""
        f = self.f0
        for val, phi in zip(u, self.monomials):
            f = f + phi.scale(QQi.of(val))
        return f

    def f_terms_numeric(self, u: Sequence[complex]) -> dict[tuple[int, ...], complex]:
        out = {e: c.to_complex() for e, c in self.f0.terms.items()}
        for val, phi in zip(u, self.monomials):
            for e, c in phi.terms.items():
                out[e] = out.get(e, 0j) + complex(val) * c.to_complex()
        return {e: v for e, v in out.items() if v != 0}


def classify_deformation(f0: Polynomial,
                         deformations: Mapping[str, Polynomial] | Sequence[tuple[str, Polynomial]],
                         require_basis: bool = True) -> DeformationSpec:
    """Classify deformation directions of a non-degenerate quasi-homogeneous f0."""
    diag = check_nondegenerate(f0)
    if not diag["ok"]:
        raise PolyError(f"f0 is degenerate: {diag}")
    ws = weights_of(f0)
    ring = JacobiRing(f0)
    items = list(deformations.items()) if isinstance(deformations, Mapping) else list(deformations)
    names_, monos, u_wts, kinds = [], [], [], []
    for nm, phi in items:
        if isinstance(phi, str):
            phi = parse_poly(phi, ring=f0.ring)
        if phi.ring != f0.ring:
            phi = phi.map_ring(f0.ring)
        if require_basis:
            exps = list(phi.terms)
            if len(exps) != 1 or exps[0] not in ring.basis:
                raise PolyError(
                    f"deformation {nm!r} = {phi} is not a Jacobi-basis monomial of f0")
        w = ws.weight_of(phi)
        uw = 1 - w
        kind = "relevant" if uw > 0 else ("marginal" if uw == 0 else "irrelevant")
        names_.append(nm)
        monos.append(phi)
        u_wts.append(uw)
        kinds.append(kind)
    gap_ok = ws.gap < Fraction(1, 3)
    all_marginal = all(k == "marginal" for k in kinds)
    all_relevant_ok = all(k == "relevant" for k in kinds) and all(
        (1 - uw) < 1 - 2 * ws.gap for uw in u_wts)
    star = bool(gap_ok and kinds and (all_marginal or all_relevant_ok))
    return DeformationSpec(
        f0=f0, weights=ws, names=tuple(names_), monomials=tuple(monos),
        u_weights=tuple(u_wts), kinds=tuple(kinds), star_ok=star, mu=ring.mu)
