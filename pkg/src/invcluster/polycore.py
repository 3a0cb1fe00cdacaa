"""Exact multivariate polynomial arithmetic over a parametric coefficient field.

Polynomials live in Q(params)[vars]: coefficients are exact rationals when no
model parameters are declared, and reduced ratios of integer-coefficient
polynomials in the parameters otherwise.  Template polynomials additionally
carry coefficients that are polynomials in the template unknowns u1..uK.

Monomials are exponent tuples indexed by the ambient variable list.  All
values are immutable by convention: every operation returns a fresh object.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import combinations_with_replacement

__all__ = [
    "Rational",
    "CoeffField",
    "coeff_field",
    "MonomialOrder",
    "GREVLEX",
    "GRLEX",
    "LEX",
    "Polynomial",
    "TemplatePolynomial",
    "UPoly",
    "PolyError",
    "PolyParseError",
    "parse_polynomial",
    "monomials_upto",
    "reduce_template",
    "lie_derivative",
]

# Exact rational scalar; stdlib Fraction already keeps gcd-reduced form with
# positive denominator.
Rational = Fraction


class PolyError(ValueError):
    """Raised on contract violations in polynomial operations."""


class PolyParseError(PolyError):
    """Syntax or symbol error while parsing polynomial text.

    Carries the byte offset of the offending token in ``offset``.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# Coefficient field
# ---------------------------------------------------------------------------


class CoeffField:
    """Field of coefficients for a fixed tuple of parameter names.

    With no parameters this is plain Q (elements are ``Fraction``); otherwise
    it is the fraction field of Z[params], backed by sympy's sparse polynomial
    fields (elements are ``FracElement`` and stay gcd-reduced).
    """

    def __init__(self, params: tuple[str, ...]):
        self.params = params
        if params:
            from sympy import QQ
            from sympy.polys.fields import field

            self._field, *gens = field(list(params), QQ)
            self._gens = {name: g for name, g in zip(params, gens)}
            self.zero = self._field.zero
            self.one = self._field.one
        else:
            self._field = None
            self._gens = {}
            self.zero = Fraction(0)
            self.one = Fraction(1)

    def from_fraction(self, q: Fraction):
        if self._field is None:
            return Fraction(q)
        from sympy import QQ

        return self._field.ground_new(QQ(q.numerator, q.denominator))

    def from_int(self, n: int):
        return self.from_fraction(Fraction(n))

    def atom(self, name: str):
        """The parameter `name` as a field element."""
        return self._gens[name]

    @staticmethod
    def is_zero(c) -> bool:
        return not c

    def to_fraction(self, c) -> Fraction:
        """Exact rational value of a parameter-free element."""
        if self._field is None:
            return c
        return self.eval(c, {})

    def eval(self, c, bindings: dict):
        """Evaluate an element at parameter values (Fraction or float)."""
        if self._field is None:
            return c

        def eval_poly(p):
            total = None
            for exps, coef in p.terms():
                val = Fraction(coef.numerator, coef.denominator)
                for name, e in zip(self.params, exps):
                    if e:
                        if name not in bindings:
                            raise PolyError(f"unbound parameter {name!r}")
                        val = val * bindings[name] ** e
                total = val if total is None else total + val
            return total if total is not None else Fraction(0)

        num = eval_poly(c.numer)
        den = eval_poly(c.denom)
        if den == 0:
            raise PolyError("parameter denominator vanishes at given values")
        return num / den

    def text(self, c) -> str:
        """Canonical text in the polynomial grammar."""
        if self._field is None:
            return _fraction_text(c)
        num = _param_poly_text(c.numer, self.params)
        if c.denom == 1:
            return num
        den = _param_poly_text(c.denom, self.params)
        if _needs_parens(num, as_denominator=False):
            num = f"({num})"
        if _needs_parens(den, as_denominator=True):
            den = f"({den})"
        return f"{num}/{den}"

    def to_sympy(self, c):
        if self._field is None:
            import sympy

            return sympy.Rational(c.numerator, c.denominator)
        return c.as_expr()


def _fraction_text(q: Fraction) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


def _param_poly_text(p, params: tuple[str, ...]) -> str:
    """Render a sympy PolyElement in Z[params] in the polynomial grammar."""
    terms = sorted(p.terms(), key=lambda t: t[0], reverse=True)
    parts = []
    for exps, coef in terms:
        q = Fraction(coef.numerator, coef.denominator)
        syms = [
            name if e == 1 else f"{name}^{e}"
            for name, e in zip(params, exps)
            if e
        ]
        if not syms:
            body = _fraction_text(abs(q))
        elif abs(q) == 1:
            body = "*".join(syms)
        else:
            body = "*".join([_fraction_text(abs(q))] + syms)
        sign = "-" if q < 0 else "+"
        parts.append((sign, body))
    if not parts:
        return "0"
    first_sign, first_body = parts[0]
    out = ("-" if first_sign == "-" else "") + first_body
    for sign, body in parts[1:]:
        out += f"{sign}{body}"
    return out


def _needs_parens(text: str, as_denominator: bool) -> bool:
    # Multi-term, leading minus, or (in a denominator) any product needs
    # parentheses to survive a round trip through the grammar.
    if any(c in text[1:] for c in "+-"):
        return True
    if text.startswith("-"):
        return True
    if as_denominator and "*" in text:
        return True
    return False


@lru_cache(maxsize=None)
def coeff_field(params: tuple[str, ...]) -> CoeffField:
    return CoeffField(params)


# ---------------------------------------------------------------------------
# Monomials and orders
# ---------------------------------------------------------------------------

Monomial = tuple  # exponent tuple, len == ambient variable count


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


def mono_divides(a: Monomial, b: Monomial) -> bool:
    return all(x <= y for x, y in zip(a, b))


def mono_div(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x - y for x, y in zip(a, b))


def mono_degree(a: Monomial) -> int:
    return sum(a)


def monomials_upto(nvars: int, degree: int) -> list[Monomial]:
    """All monomials of total degree <= degree, in ascending lex order.

    This is the enumeration that fixes template unknown numbering: u_i is
    attached to the i-th monomial of this list (1-based).
    """
    monos = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(nvars), d):
            exps = [0] * nvars
            for i in combo:
                exps[i] += 1
            monos.append(tuple(exps))
    monos.sort()
    return monos


@dataclass(frozen=True)
class MonomialOrder:
    """A monomial order: lex, grlex or grevlex with a variable priority.

    ``priority`` lists variable indices from highest to lowest priority;
    ``None`` means the natural order 0..n-1.
    """

    kind: str = "grevlex"
    priority: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("lex", "grlex", "grevlex"):
            raise PolyError(f"unknown monomial order kind {self.kind!r}")

    def key(self, mono: Monomial):
        """Sort key: larger key = larger monomial."""
        e = (
            mono
            if self.priority is None
            else tuple(mono[i] for i in self.priority)
        )
        if self.kind == "lex":
            return e
        deg = sum(e)
        if self.kind == "grlex":
            return (deg, e)
        return (deg, tuple(-x for x in reversed(e)))

    def leading(self, monos) -> Monomial:
        return max(monos, key=self.key)

    def sorted_desc(self, monos) -> list:
        return sorted(monos, key=self.key, reverse=True)


GREVLEX = MonomialOrder("grevlex")
GRLEX = MonomialOrder("grlex")
LEX = MonomialOrder("lex")


# ---------------------------------------------------------------------------
# Polynomials over Q(params)
# ---------------------------------------------------------------------------


class Polynomial:
    """Sparse exact polynomial in ``vars`` over Q(params).

    ``terms`` maps exponent tuples to nonzero field elements.  Instances are
    immutable by convention; operations never mutate their arguments.
    """

    __slots__ = ("vars", "params", "terms", "_field")

    def __init__(self, vars: tuple[str, ...], params: tuple[str, ...], terms: dict):
        self.vars = tuple(vars)
        self.params = tuple(params)
        self._field = coeff_field(self.params)
        self.terms = {m: c for m, c in terms.items() if c}

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, vars, params=()) -> "Polynomial":
        return cls(vars, params, {})

    @classmethod
    def constant(cls, vars, params, value) -> "Polynomial":
        field = coeff_field(tuple(params))
        if isinstance(value, (int, Fraction)):
            value = field.from_fraction(Fraction(value))
        return cls(vars, params, {(0,) * len(vars): value})

    @classmethod
    def variable(cls, name: str, vars, params=()) -> "Polynomial":
        vars = tuple(vars)
        field = coeff_field(tuple(params))
        exps = [0] * len(vars)
        exps[vars.index(name)] = 1
        return cls(vars, params, {tuple(exps): field.one})

    @property
    def field(self) -> CoeffField:
        return self._field

    def is_zero(self) -> bool:
        return not self.terms

    def is_constant(self) -> bool:
        return all(mono_degree(m) == 0 for m in self.terms)

    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        if not self.terms:
            return -1
        return max(mono_degree(m) for m in self.terms)

    # -- arithmetic ----------------------------------------------------------

    def _check(self, other: "Polynomial"):
        if self.vars != other.vars or self.params != other.params:
            raise PolyError("polynomials over different ambient contexts")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms.get(m, self._field.zero) + c
        return Polynomial(self.vars, self.params, terms)

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.vars, self.params, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            terms: dict = {}
            for m1, c1 in self.terms.items():
                for m2, c2 in other.terms.items():
                    m = mono_mul(m1, m2)
                    prod = c1 * c2
                    if m in terms:
                        terms[m] = terms[m] + prod
                    else:
                        terms[m] = prod
            return Polynomial(self.vars, self.params, terms)
        return self.scale(other)

    def scale(self, c) -> "Polynomial":
        if isinstance(c, (int, Fraction)):
            c = self._field.from_fraction(Fraction(c))
        return Polynomial(self.vars, self.params, {m: v * c for m, v in self.terms.items()})

    def __pow__(self, n: int) -> "Polynomial":
        if n < 0:
            raise PolyError("negative exponent")
        result = Polynomial.constant(self.vars, self.params, 1)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base if n > 1 else base
            n >>= 1
        return result

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.vars == other.vars
            and self.params == other.params
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.vars, self.params, frozenset(self.terms.items())))

    # -- calculus and evaluation ----------------------------------------------

    def diff(self, var: str) -> "Polynomial":
        i = self.vars.index(var)
        terms = {}
        for m, c in self.terms.items():
            if m[i]:
                dm = list(m)
                dm[i] -= 1
                key = tuple(dm)
                val = c * self._field.from_int(m[i])
                terms[key] = terms.get(key, self._field.zero) + val
        return Polynomial(self.vars, self.params, terms)

    def evaluate(self, point, param_values: dict | None = None):
        """Value at a point; exact Fraction in, exact Fraction out.

        Any float among the inputs switches the computation to IEEE doubles.
        """
        if len(point) != len(self.vars):
            raise PolyError("point dimension mismatch")
        param_values = param_values or {}
        for p in self.params:
            if p not in param_values:
                raise PolyError(f"unbound parameter {p!r}")
        floaty = any(isinstance(v, float) for v in point) or any(
            isinstance(v, float) for v in param_values.values()
        )
        if floaty:
            pt = [float(v) for v in point]
            pv = {k: float(v) for k, v in param_values.items()}
            total = 0.0
        else:
            pt = [Fraction(v) for v in point]
            pv = {k: Fraction(v) for k, v in param_values.items()}
            total = Fraction(0)
        for m, c in self.terms.items():
            val = self._field.eval(c, pv)
            if floaty:
                val = float(val)
            for x, e in zip(pt, m):
                if e:
                    val = val * x**e
            total = total + val
        return total

    def bind_params(self, bindings: dict) -> "Polynomial":
        """Substitute exact rational values for all parameters."""
        if not self.params:
            return self
        field = coeff_field(())
        terms = {}
        for m, c in self.terms.items():
            v = self._field.eval(c, {k: Fraction(v) for k, v in bindings.items()})
            terms[m] = terms.get(m, Fraction(0)) + v
        return Polynomial(self.vars, (), terms)

    def rename_vars(self, mapping: dict, new_vars: tuple[str, ...]) -> "Polynomial":
        """Move the polynomial to a new variable list via a name mapping."""
        new_vars = tuple(new_vars)
        idx = [new_vars.index(mapping.get(v, v)) for v in self.vars]
        terms = {}
        for m, c in self.terms.items():
            exps = [0] * len(new_vars)
            for src, e in enumerate(m):
                exps[idx[src]] += e
            terms[tuple(exps)] = terms.get(tuple(exps), self._field.zero) + c
        return Polynomial(new_vars, self.params, terms)

    def substitute(self, mapping: dict) -> "Polynomial":
        """Substitute polynomials for variables; mapping must cover all vars."""
        missing = [v for v in self.vars if v not in mapping]
        if missing:
            raise PolyError(f"no substitution for variable {missing[0]!r}")
        target = mapping[self.vars[0]]
        result = Polynomial.zero(target.vars, self.params)
        for m, c in self.terms.items():
            term = Polynomial.constant(target.vars, self.params, 1).scale(c)
            for name, e in zip(self.vars, m):
                if e:
                    term = term * mapping[name] ** e
            result = result + term
        return result

    # -- structure -----------------------------------------------------------

    def leading_term(self, order: MonomialOrder = GREVLEX):
        """Order-maximal monomial and its coefficient."""
        if not self.terms:
            raise PolyError("leading term of zero polynomial")
        m = order.leading(self.terms)
        return m, self.terms[m]

    def mono_text(self, m: Monomial) -> str:
        if mono_degree(m) == 0:
            return "1"
        return "*".join(
            name if e == 1 else f"{name}^{e}"
            for name, e in zip(self.vars, m)
            if e
        )

    def text(self, order: MonomialOrder = GREVLEX) -> str:
        """Canonical text: terms descending in ``order``."""
        if not self.terms:
            return "0"
        parts = []
        for m in order.sorted_desc(self.terms):
            c = self.terms[m]
            mono = self.mono_text(m)
            if self.params:
                cs = self._field.text(c)
                body = cs if mono == "1" else f"({cs})*{mono}"
                parts.append(("+", body))
            else:
                sign = "-" if c < 0 else "+"
                ac = abs(c)
                if mono == "1":
                    body = _fraction_text(ac)
                elif ac == 1:
                    body = mono
                else:
                    body = f"{_fraction_text(ac)}*{mono}"
                parts.append((sign, body))
        sign0, body0 = parts[0]
        out = ("-" if sign0 == "-" else "") + body0
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def __repr__(self):
        return f"Polynomial({self.text()!r})"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    """Recursive-descent parser for the polynomial grammar.

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | base ('^' INT)?
    base   := INT | IDENT | '(' expr ')'

    Implicit multiplication is rejected; '/' requires a variable-free divisor.
    """

    def __init__(self, text: str, vars: tuple[str, ...], params: tuple[str, ...]):
        self.text = text
        self.pos = 0
        self.vars = vars
        self.params = params

    def error(self, msg: str):
        raise PolyParseError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Polynomial:
        p = self.expr()
        self.skip_ws()
        if self.pos != len(self.text):
            self.error(f"unexpected character {self.text[self.pos]!r}")
        return p

    def expr(self) -> Polynomial:
        p = self.term()
        while True:
            ch = self.peek()
            if ch == "+":
                self.pos += 1
                p = p + self.term()
            elif ch == "-":
                self.pos += 1
                p = p - self.term()
            else:
                return p

    def term(self) -> Polynomial:
        p = self.factor()
        while True:
            ch = self.peek()
            if ch == "*":
                self.pos += 1
                p = p * self.factor()
            elif ch == "/":
                self.pos += 1
                at = self.pos
                q = self.factor()
                if not q.is_constant():
                    self.pos = at
                    self.error("division by a polynomial in the variables")
                if q.is_zero():
                    self.pos = at
                    self.error("division by zero")
                const = q.terms[(0,) * len(self.vars)]
                p = p.scale(self._field_inverse(const))
            else:
                return p

    def _field_inverse(self, c):
        field = coeff_field(self.params)
        return field.one / c

    def factor(self) -> Polynomial:
        ch = self.peek()
        if ch == "-":
            self.pos += 1
            return -self.factor()
        p = self.base()
        self.skip_ws()
        if self.peek() == "^":
            self.pos += 1
            self.skip_ws()
            if self.peek() == "-":
                self.error("negative exponent")
            n = self.integer()
            return p**n
        return p

    def base(self) -> Polynomial:
        ch = self.peek()
        if ch == "(":
            self.pos += 1
            p = self.expr()
            if self.peek() != ")":
                self.error("expected ')'")
            self.pos += 1
            return p
        if ch.isdigit():
            n = self.integer()
            return Polynomial.constant(self.vars, self.params, n)
        if ch.isalpha() or ch == "_":
            name = self.ident()
            if name in self.vars:
                return Polynomial.variable(name, self.vars, self.params)
            if name in self.params:
                field = coeff_field(self.params)
                return Polynomial(
                    self.vars,
                    self.params,
                    {(0,) * len(self.vars): field.atom(name)},
                )
            self.pos -= len(name)
            self.error(f"unknown identifier {name!r}")
        if ch == "":
            self.error("unexpected end of input")
        self.error(f"unexpected character {ch!r}")

    def integer(self) -> int:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if start == self.pos:
            self.error("expected integer")
        return int(self.text[start : self.pos])

    def ident(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (
            self.text[self.pos].isalnum() or self.text[self.pos] == "_"
        ):
            self.pos += 1
        return self.text[start : self.pos]


def parse_polynomial(text: str, vars, params=()) -> Polynomial:
    """Parse ``text`` into an exact polynomial over (vars, params)."""
    return _Parser(text, tuple(vars), tuple(params)).parse()


# ---------------------------------------------------------------------------
# Polynomials in the template unknowns (coefficient ring of templates)
# ---------------------------------------------------------------------------

# UMono: sorted tuple of (unknown index, exponent); () is the unit monomial.
UMono = tuple


def _one_like(c):
    """Multiplicative unit of the same kind as coefficient c.

    Coefficients may be Fraction, sympy ring PolyElement (denominator-free
    fast path) or sympy FracElement.
    """
    ring = getattr(c, "ring", None)
    if ring is not None:
        return ring.one
    fld = getattr(c, "field", None)
    if fld is not None:
        return fld.one
    return Fraction(1)


def umono_mul(a: UMono, b: UMono) -> UMono:
    d = dict(a)
    for i, e in b:
        d[i] = d.get(i, 0) + e
    return tuple(sorted(d.items()))


def umono_degree(a: UMono) -> int:
    return sum(e for _, e in a)


def umono_text(a: UMono) -> str:
    if not a:
        return "1"
    return "*".join(f"u{i}" if e == 1 else f"u{i}^{e}" for i, e in a)


class UPoly:
    """Sparse polynomial in the template unknowns over Q(params)."""

    __slots__ = ("params", "terms", "_field")

    def __init__(self, params: tuple[str, ...], terms: dict):
        self.params = params
        self._field = coeff_field(params)
        self.terms = {m: c for m, c in terms.items() if c}

    @classmethod
    def zero(cls, params=()) -> "UPoly":
        return cls(tuple(params), {})

    @classmethod
    def unknown(cls, i: int, params=()) -> "UPoly":
        field = coeff_field(tuple(params))
        return cls(tuple(params), {((i, 1),): field.one})

    @classmethod
    def const(cls, value, params=()) -> "UPoly":
        field = coeff_field(tuple(params))
        if isinstance(value, (int, Fraction)):
            value = field.from_fraction(Fraction(value))
        return cls(tuple(params), {(): value})

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        if not self.terms:
            return -1
        return max(umono_degree(m) for m in self.terms)

    def unknowns(self) -> set[int]:
        return {i for m in self.terms for i, _ in m}

    def __add__(self, other: "UPoly") -> "UPoly":
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms.get(m, self._field.zero) + c
        return UPoly(self.params, terms)

    def __neg__(self) -> "UPoly":
        return UPoly(self.params, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other: "UPoly") -> "UPoly":
        return self + (-other)

    def __mul__(self, other: "UPoly") -> "UPoly":
        terms: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = umono_mul(m1, m2)
                prod = c1 * c2
                if m in terms:
                    terms[m] = terms[m] + prod
                else:
                    terms[m] = prod
        return UPoly(self.params, terms)

    def scale(self, c) -> "UPoly":
        if isinstance(c, (int, Fraction)):
            c = self._field.from_fraction(Fraction(c))
        return UPoly(self.params, {m: v * c for m, v in self.terms.items()})

    def mul_unknown(self, i: int) -> "UPoly":
        return UPoly(
            self.params,
            {umono_mul(m, ((i, 1),)): c for m, c in self.terms.items()},
        )

    def divisible_by_unknown(self, i: int) -> bool:
        return all(any(j == i and e >= 1 for j, e in m) for m in self.terms)

    def div_unknown(self, i: int) -> "UPoly":
        terms = {}
        for m, c in self.terms.items():
            d = dict(m)
            if d.get(i, 0) < 1:
                raise PolyError("not divisible by unknown")
            d[i] -= 1
            if d[i] == 0:
                del d[i]
            terms[tuple(sorted(d.items()))] = c
        return UPoly(self.params, terms)

    def substitute_linear(self, subst: dict) -> "UPoly":
        """Substitute linear forms (as UPoly) for unknowns in ``subst``."""
        result = UPoly.zero(self.params)
        for m, c in self.terms.items():
            untouched = tuple((i, e) for i, e in m if i not in subst)
            term = UPoly(self.params, {untouched: c})
            for i, e in m:
                if i in subst:
                    rep = subst[i]
                    for _ in range(e):
                        term = term * rep
            result = result + term
        return result

    def __pow__(self, n: int) -> "UPoly":
        one = self._field.one
        if self.terms:
            one = _one_like(next(iter(self.terms.values())))
        result = UPoly(self.params, {(): one})
        for _ in range(n):
            result = result * self
        return result

    def coeff_of_linear(self) -> dict:
        """For a degree <= 1 polynomial, the map unknown -> coefficient.

        The constant part, if any, is returned under key ``None``.
        """
        out = {}
        for m, c in self.terms.items():
            if umono_degree(m) == 0:
                out[None] = c
            elif umono_degree(m) == 1:
                out[m[0][0]] = c
            else:
                raise PolyError("not linear in the unknowns")
        return out

    def instantiate(self, values: dict):
        """Field value of the polynomial at unknown -> Fraction values."""
        total = self._field.zero
        for m, c in self.terms.items():
            v = c
            for i, e in m:
                if i not in values:
                    raise PolyError(f"unbound unknown u{i}")
                w = values[i]
                if isinstance(w, (int, Fraction)):
                    w = self._field.from_fraction(Fraction(w))
                v = v * w**e
            total = total + v
        return total

    def __eq__(self, other) -> bool:
        return isinstance(other, UPoly) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def text(self) -> str:
        if not self.terms:
            return "0"
        keys = sorted(self.terms, key=lambda m: (umono_degree(m), m))
        parts = []
        for m in keys:
            c = self.terms[m]
            mono = umono_text(m)
            if self.params:
                cs = self._field.text(c)
                if mono == "1":
                    body = cs
                elif cs == "1":
                    body = mono
                elif cs == "-1":
                    body = f"-{mono}"
                elif _is_simple_term(cs):
                    body = f"{cs}*{mono}"
                else:
                    body = f"({cs})*{mono}"
                parts.append(("+", body))
            else:
                sign = "-" if c < 0 else "+"
                ac = abs(c)
                if mono == "1":
                    body = _fraction_text(ac)
                elif ac == 1:
                    body = mono
                else:
                    body = f"{_fraction_text(ac)}*{mono}"
                parts.append((sign, body))
        sign0, body0 = parts[0]
        out = ("-" if sign0 == "-" else "") + body0
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def __repr__(self):
        return f"UPoly({self.text()!r})"


# ---------------------------------------------------------------------------
# Template polynomials g(u, x)
# ---------------------------------------------------------------------------


class TemplatePolynomial:
    """Polynomial in ``vars`` whose coefficients are UPoly in u1..u_nu.

    Fresh templates have linear homogeneous coefficients; division results
    carry higher-degree coefficients.
    """

    __slots__ = ("vars", "params", "nu", "terms")

    def __init__(self, vars, params, nu: int, terms: dict):
        self.vars = tuple(vars)
        self.params = tuple(params)
        self.nu = nu
        self.terms = {m: c for m, c in terms.items() if not c.is_zero()}

    @classmethod
    def zero(cls, vars, params, nu) -> "TemplatePolynomial":
        return cls(vars, params, nu, {})

    @classmethod
    def from_polynomial(cls, p: Polynomial, unknown: int, nu: int) -> "TemplatePolynomial":
        """Embed a concrete polynomial as unknown * p."""
        terms = {
            m: UPoly(p.params, {((unknown, 1),): c}) for m, c in p.terms.items()
        }
        return cls(p.vars, p.params, nu, terms)

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        if not self.terms:
            return -1
        return max(mono_degree(m) for m in self.terms)

    def unknowns(self) -> set[int]:
        out = set()
        for c in self.terms.values():
            out |= c.unknowns()
        return out

    def __add__(self, other: "TemplatePolynomial") -> "TemplatePolynomial":
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms[m] + c if m in terms else c
        return TemplatePolynomial(self.vars, self.params, max(self.nu, other.nu), terms)

    def __neg__(self) -> "TemplatePolynomial":
        return TemplatePolynomial(
            self.vars, self.params, self.nu, {m: -c for m, c in self.terms.items()}
        )

    def __sub__(self, other: "TemplatePolynomial") -> "TemplatePolynomial":
        return self + (-other)

    def mul_poly(self, p: Polynomial) -> "TemplatePolynomial":
        terms: dict = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in p.terms.items():
                m = mono_mul(m1, m2)
                part = c1.scale(c2)
                terms[m] = terms[m] + part if m in terms else part
        return TemplatePolynomial(self.vars, self.params, self.nu, terms)

    def mul_upoly(self, c: UPoly) -> "TemplatePolynomial":
        return TemplatePolynomial(
            self.vars, self.params, self.nu, {m: v * c for m, v in self.terms.items()}
        )

    def mul_mono(self, mono: Monomial) -> "TemplatePolynomial":
        return TemplatePolynomial(
            self.vars,
            self.params,
            self.nu,
            {mono_mul(m, mono): c for m, c in self.terms.items()},
        )

    def mul_unknown(self, i: int) -> "TemplatePolynomial":
        return TemplatePolynomial(
            self.vars,
            self.params,
            self.nu,
            {m: c.mul_unknown(i) for m, c in self.terms.items()},
        )

    def diff(self, var: str) -> "TemplatePolynomial":
        i = self.vars.index(var)
        field = coeff_field(self.params)
        terms = {}
        for m, c in self.terms.items():
            if m[i]:
                dm = list(m)
                dm[i] -= 1
                key = tuple(dm)
                part = c.scale(field.from_int(m[i]))
                terms[key] = terms[key] + part if key in terms else part
        return TemplatePolynomial(self.vars, self.params, self.nu, terms)

    def leading_term(self, order: MonomialOrder = GREVLEX):
        if not self.terms:
            raise PolyError("leading term of zero polynomial")
        m = order.leading(self.terms)
        return m, self.terms[m]

    def substitute_u(self, subst: dict) -> "TemplatePolynomial":
        """Apply a linear substitution on the unknowns."""
        return TemplatePolynomial(
            self.vars,
            self.params,
            self.nu,
            {m: c.substitute_linear(subst) for m, c in self.terms.items()},
        )

    def instantiate(self, values: dict) -> Polynomial:
        """Concrete polynomial at unknown -> rational values."""
        terms = {}
        for m, c in self.terms.items():
            terms[m] = c.instantiate(values)
        return Polynomial(self.vars, self.params, terms)

    def coefficient_vector(self, unknown: int) -> Polynomial:
        """psi_i: the polynomial multiplying a given unknown (linear case)."""
        terms = {}
        for m, c in self.terms.items():
            lin = c.coeff_of_linear()
            if unknown in lin:
                terms[m] = lin[unknown]
        return Polynomial(self.vars, self.params, terms)

    def is_linear_in_u(self) -> bool:
        return all(c.degree() <= 1 for c in self.terms.values()) and all(
            all(umono_degree(m) >= 1 for m in c.terms) for c in self.terms.values()
        )

    def text(self, order: MonomialOrder = GREVLEX) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m in order.sorted_desc(self.terms):
            c = self.terms[m]
            mono = (
                "1"
                if mono_degree(m) == 0
                else "*".join(
                    name if e == 1 else f"{name}^{e}"
                    for name, e in zip(self.vars, m)
                    if e
                )
            )
            cs = c.text()
            if mono == "1":
                parts.append(cs if _is_simple_term(cs) else f"({cs})")
            elif cs == "u" or _is_simple_term(cs):
                parts.append(f"{cs}*{mono}")
            else:
                parts.append(f"({cs})*{mono}")
        return " + ".join(parts)

    def __repr__(self):
        return f"TemplatePolynomial({self.text()!r})"

    def __eq__(self, other):
        return (
            isinstance(other, TemplatePolynomial)
            and self.vars == other.vars
            and self.terms == other.terms
        )


def _is_simple_term(s: str) -> bool:
    return not any(ch in s for ch in "+- ") or (
        s.startswith("-") and not any(ch in s[1:] for ch in "+- ")
    )


# ---------------------------------------------------------------------------
# Lie derivative and single-divisor reduction
# ---------------------------------------------------------------------------


def lie_derivative(p, f: list, k: int = 1):
    """k-th Lie derivative of p along the vector field f (one poly per var).

    Works for both Polynomial and TemplatePolynomial arguments.
    """
    vars = p.vars
    if len(f) != len(vars):
        raise PolyError("vector field dimension mismatch")
    if k < 0:
        raise PolyError("negative Lie order")
    result = p
    for _ in range(k):
        if isinstance(result, TemplatePolynomial):
            acc = TemplatePolynomial.zero(result.vars, result.params, result.nu)
            for name, fi in zip(vars, f):
                acc = acc + result.diff(name).mul_poly(fi)
        else:
            acc = Polynomial.zero(result.vars, result.params)
            for name, fi in zip(vars, f):
                acc = acc + result.diff(name) * fi
        result = acc
    return result


def _single_unknown_coeff(c: UPoly):
    """If c == scalar * u_j, return (j, scalar); else None."""
    if len(c.terms) != 1:
        return None
    (m, coef), = c.terms.items()
    if len(m) == 1 and m[0][1] == 1:
        return m[0][0], coef
    return None


def reduce_template(
    dividend: TemplatePolynomial,
    divisor: TemplatePolynomial,
    order: MonomialOrder = GREVLEX,
):
    """Single-divisor reduction with cleared denominators.

    Returns (q, r, d, j) with  u_j^d * dividend == q * divisor + r  exactly,
    where u_j is the divisor's leading unknown and no monomial of r is
    divisible by the divisor's leading monomial.  u_j is only multiplied in
    when a leading coefficient is not already divisible by it, which keeps d
    minimal.
    """
    if divisor.is_zero():
        raise PolyError("division by zero template")
    lm_g, lc_g = divisor.leading_term(order)
    single = _single_unknown_coeff(lc_g)
    if single is None:
        raise PolyError(
            "divisor leading coefficient is not a single template unknown"
        )
    j, c_g = single
    field = coeff_field(dividend.params)
    inv_cg = field.one / c_g

    p = dividend
    q = TemplatePolynomial.zero(dividend.vars, dividend.params, dividend.nu)
    r = TemplatePolynomial.zero(dividend.vars, dividend.params, dividend.nu)
    d = 0
    while not p.is_zero():
        t_mono, t_coeff = p.leading_term(order)
        if mono_divides(lm_g, t_mono):
            mu = mono_div(t_mono, lm_g)
            if t_coeff.divisible_by_unknown(j):
                factor = t_coeff.div_unknown(j).scale(inv_cg)
                p = p - divisor.mul_upoly(factor).mul_mono(mu)
                q = q + TemplatePolynomial(
                    q.vars, q.params, q.nu, {mu: factor}
                )
            else:
                factor = t_coeff.scale(inv_cg)
                p = p.mul_unknown(j) - divisor.mul_upoly(factor).mul_mono(mu)
                q = q.mul_unknown(j) + TemplatePolynomial(
                    q.vars, q.params, q.nu, {mu: factor}
                )
                r = r.mul_unknown(j)
                d += 1
        else:
            r = r + TemplatePolynomial(
                r.vars, r.params, r.nu, {t_mono: t_coeff}
            )
            p = TemplatePolynomial(
                p.vars,
                p.params,
                p.nu,
                {m: c for m, c in p.terms.items() if m != t_mono},
            )
    return q, r, d, j
