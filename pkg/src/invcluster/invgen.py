"""Invariant cluster generation for semialgebraic systems.

Pipeline per degree and monomial order: build a fully parameterized template,
take its Lie derivative along the vector field, reduce by the template itself
(single-divisor, denominators cleared), collect the remainder's coefficients
into a homogeneous system on the template unknowns, and solve that system by
a backtracking case-split.  Linear solution branches become invariant
clusters; candidates that are products of lower-degree invariants are
filtered out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from enum import Enum
from fractions import Fraction
from math import comb
from random import Random

from .polycore import (
    GREVLEX,
    LEX,
    MonomialOrder,
    PolyError,
    Polynomial,
    TemplatePolynomial,
    UPoly,
    coeff_field,
    lie_derivative,
    mono_degree,
    monomials_upto,
    reduce_template,
)
from .polycore import _single_unknown_coeff, umono_degree

__all__ = [
    "Rel",
    "Constraint",
    "SemialgebraicSystem",
    "CoefficientSystem",
    "SolutionBranch",
    "InvariantCluster",
    "gen_template",
    "template_unknown_count",
    "build_coefficient_system",
    "solve_u_system",
    "filter_products",
    "generate_clusters",
    "GenerationResult",
    "check_invariant",
    "cluster_generators",
    "clusters_equivalent",
    "in_span",
]


class Rel(Enum):
    EQ = "="
    GE = ">="
    GT = ">"


@dataclass(frozen=True)
class Constraint:
    poly: Polynomial
    rel: Rel


@dataclass(frozen=True)
class SemialgebraicSystem:
    """Polynomial ODE with semialgebraic initial (and optional unsafe) set."""

    name: str
    vars: tuple[str, ...]
    params: tuple[str, ...]
    f: tuple[Polynomial, ...]
    init: tuple[Constraint, ...] = ()
    unsafe: tuple[Constraint, ...] = ()
    param_values: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if len(self.f) != len(self.vars):
            raise PolyError("vector field dimension does not match variables")

    def with_params_as_vars(self) -> "SemialgebraicSystem":
        """Move declared parameters into the state as constants (derivative 0)."""
        new_vars = self.vars + self.params
        zero = Polynomial.zero(new_vars, ())
        f = tuple(_lift_poly(p, new_vars) for p in self.f) + tuple(
            [zero] * len(self.params)
        )
        init = tuple(
            Constraint(_lift_poly(c.poly, new_vars), c.rel) for c in self.init
        )
        unsafe = tuple(
            Constraint(_lift_poly(c.poly, new_vars), c.rel) for c in self.unsafe
        )
        return SemialgebraicSystem(
            self.name + "+params", new_vars, (), f, init, unsafe, dict(self.param_values)
        )


def _lift_poly(p: Polynomial, new_vars: tuple[str, ...]) -> Polynomial:
    """Reinterpret parameters as variables of a wider ambient ring."""
    out = Polynomial.zero(new_vars, ())
    fld = coeff_field(p.params)
    one = Polynomial.constant(new_vars, (), 1)
    for m, c in p.terms.items():
        term = one
        for name, e in zip(p.vars, m):
            if e:
                term = term * Polynomial.variable(name, new_vars) ** e
        if p.params:
            num, den = c.numer, c.denom
            coefpoly = _param_poly_to_poly(num, p.params, new_vars)
            if den != 1:
                raise PolyError(
                    "cannot lift parameter denominators into template variables"
                )
            term = term * coefpoly
        else:
            term = term.scale(c)
        out = out + term
    return out


def _param_poly_to_poly(pe, params, new_vars) -> Polynomial:
    out = Polynomial.zero(new_vars, ())
    for exps, coef in pe.terms():
        term = Polynomial.constant(new_vars, (), Fraction(coef.numerator, coef.denominator))
        for name, e in zip(params, exps):
            if e:
                term = term * Polynomial.variable(name, new_vars) ** e
        out = out + term
    return out


# ---------------------------------------------------------------------------
# Template generation
# ---------------------------------------------------------------------------


def template_unknown_count(nvars: int, degree: int) -> int:
    return comb(nvars + degree, degree)


def gen_template(vars, params, degree: int) -> TemplatePolynomial:
    """Fully parameterized polynomial of total degree <= degree.

    Unknown u_i multiplies the i-th monomial in ascending lex order (constant
    first), so the unknown count is C(n+degree, degree).
    """
    if degree < 1:
        raise PolyError("template degree must be >= 1")
    vars = tuple(vars)
    monos = monomials_upto(len(vars), degree)
    terms = {
        m: UPoly.unknown(i + 1, tuple(params)) for i, m in enumerate(monos)
    }
    return TemplatePolynomial(vars, tuple(params), len(monos), terms)


# ---------------------------------------------------------------------------
# Coefficient system
# ---------------------------------------------------------------------------


@dataclass
class CoefficientSystem:
    """Homogeneous equations on u from the remainder, denominators cleared."""

    equations: tuple[UPoly, ...]
    side_nonzero: tuple[int, ...]
    clearing_power: int
    params: tuple[str, ...]


def _clear_param_denominators(eq: UPoly) -> UPoly:
    """Multiply by the lcm of coefficient denominators (parameters generic)."""
    if not eq.params or eq.is_zero():
        return eq
    fld = coeff_field(eq.params)
    denoms = []
    for c in eq.terms.values():
        if c.denom != 1:
            denoms.append(c.denom)
    if not denoms:
        return eq
    lcm = denoms[0]
    for d in denoms[1:]:
        lcm = lcm.lcm(d)
    return eq.scale(fld._field(lcm))


def build_coefficient_system(
    g: TemplatePolynomial, f, order: MonomialOrder = GREVLEX
) -> CoefficientSystem:
    """Equations b_i(u) = 0 from the remainder of L_f g modulo g."""
    L = lie_derivative(g, list(f))
    if L.is_zero():
        lm, lc = g.leading_term(order)
        single = _single_unknown_coeff(lc)
        j = single[0] if single else None
        return CoefficientSystem((), (j,) if j else (), 0, g.params)
    q, r, d, j = reduce_template(L, g, order)
    eqs = tuple(_clear_param_denominators(c) for c in r.terms.values())
    return CoefficientSystem(eqs, (j,), d, g.params)


# ---------------------------------------------------------------------------
# Solving the u-system: backtracking case-split
# ---------------------------------------------------------------------------


@dataclass
class SolutionBranch:
    """One solved branch: a linear homogeneous substitution on u.

    ``substitution`` maps every determined unknown to a linear UPoly over the
    free unknowns; ``frees`` lists the free unknowns (original indices).  A
    nonempty ``residual`` marks an UNSOLVED branch whose remaining equations
    the case-split could not close.
    """

    substitution: dict
    frees: tuple[int, ...]
    assumptions: tuple[str, ...]
    residual: tuple[UPoly, ...] = ()

    @property
    def solved(self) -> bool:
        return not self.residual


@dataclass
class _State:
    eqs: tuple
    nonzero: frozenset
    zeros: frozenset
    elims: tuple  # chronological (unknown, linear UPoly over then-active unknowns)
    decisions: tuple  # human-readable assumption strings
    depth: int
    lemmas: frozenset = frozenset()  # determinant lemmas already added


_factor_cache: dict = {}


def _monomial_content(eq: UPoly):
    """(content exponents {unknown: e}, primitive part)."""
    content: dict | None = None
    for m in eq.terms:
        md = dict(m)
        if content is None:
            content = md
        else:
            content = {
                i: min(e, md.get(i, 0)) for i, e in content.items() if md.get(i, 0)
            }
        if not content:
            return {}, eq
    terms = {}
    for m, c in eq.terms.items():
        md = dict(m)
        for i, e in content.items():
            md[i] -= e
            if md[i] == 0:
                del md[i]
        terms[tuple(sorted(md.items()))] = c
    return content, UPoly(eq.params, terms)


def _congruence(eq: UPoly):
    """Diagonalize a homogeneous quadratic form: eq = sum d_i * L_i(u)^2.

    Returns a list of (pivot d_i, linear form L_i with unit pivot coefficient)
    over the coefficient field, or None if eq is not such a form.
    """
    if any(umono_degree(m) != 2 for m in eq.terms):
        return None
    fld = coeff_field(eq.params)
    two = fld.from_int(2)
    Q = eq
    post = []  # inverse substitutions to apply to the output forms
    out = []
    while not Q.is_zero():
        diag = None
        for m, c in Q.terms.items():
            if len(m) == 1 and m[0][1] == 2:
                diag = (m[0][0], c)
                break
        if diag is None:
            # hyperbolic: no squares, pick a cross term u_i*u_j and shear
            m0 = next(iter(Q.terms))
            i, j = m0[0][0], m0[1][0]
            shear = {i: UPoly(eq.params, {((i, 1),): fld.one, ((j, 1),): fld.one})}
            Q = Q.substitute_linear(shear)
            post.append((i, j))
            continue
        k, d = diag
        # L = (1/2d) * dQ/du_k
        grad_terms = {}
        for m, c in Q.terms.items():
            md = dict(m)
            if k in md:
                e = md[k]
                md[k] -= 1
                if md[k] == 0:
                    del md[k]
                grad_terms[tuple(sorted(md.items()))] = c * fld.from_int(e)
        L = UPoly(eq.params, grad_terms).scale(fld.one / (two * d))
        out.append((d, L))
        L2 = L * L
        Q = Q - L2.scale(d)
    # undo the shears u_i -> u_i + u_j on the collected forms
    for i, j in reversed(post):
        unshear = {i: UPoly(eq.params, {((i, 1),): fld.one, ((j, 1),): -fld.one})}
        out = [(d, L.substitute_linear(unshear)) for d, L in out]
    return out


def _field_sqrt(c, params):
    """Exact square root of a field element, or None.

    c = n/d is a square iff n*d is a square in Z[params]; the root is then
    sqrt(n*d)/d.
    """
    fld = coeff_field(params)
    if not params:
        if c < 0:
            return None
        rn, rd = _isqrt_exact(c.numerator), _isqrt_exact(c.denominator)
        if rn is None or rd is None:
            return None
        return Fraction(rn, rd)
    if not c:
        return fld.zero
    import sympy

    nd = c.numer * c.denom
    psyms = [sympy.Symbol(p) for p in params]
    pdict = {
        tuple(int(e) for e in exps): sympy.Rational(q.numerator, q.denominator)
        for exps, q in nd.terms()
    }
    poly = sympy.Poly.from_dict(pdict, *psyms, domain=sympy.QQ)
    content, factors = poly.factor_list()
    root_c = _isqrt_exact(Fraction(content.p, content.q))
    if root_c is None or any(m % 2 for _, m in factors):
        return None
    root = fld.from_fraction(root_c)
    for fac, m in factors:
        felem = fld.zero
        for exps, q in fac.as_dict().items():
            term = fld.from_fraction(Fraction(q.p, q.q))
            for pname, e in zip(params, exps):
                if e:
                    term = term * fld.atom(pname) ** int(e)
            felem = felem + term
        root = root * felem ** (m // 2)
    return root / fld._field(c.denom)


def _isqrt_exact(q):
    from math import isqrt

    q = Fraction(q)
    if q < 0:
        return None
    rn, rd = isqrt(q.numerator), isqrt(q.denominator)
    if rn * rn != q.numerator or rd * rd != q.denominator:
        return None
    return Fraction(rn, rd)


def _factor_upoly(eq: UPoly) -> list[tuple[UPoly, int]]:
    """Factor eq over the coefficient field into (factor, multiplicity).

    Monomial content is split off directly; homogeneous quadratics are
    handled by exact congruence diagonalization (a quadratic form splits
    into linear factors iff its rank is at most 2 with a square pivot
    ratio); anything else falls back to sympy's multivariate factorization
    with a size cap.
    """
    key = (eq.params, frozenset(eq.terms.items()))
    hit = _factor_cache.get(key)
    if hit is not None:
        return hit
    fld = coeff_field(eq.params)
    out: list[tuple[UPoly, int]] = []
    content, prim = _monomial_content(eq)
    for i, e in sorted(content.items()):
        out.append((UPoly.unknown(i, eq.params), e))
    if prim.degree() <= 0:
        if not out:
            out.append((prim, 1))
    elif prim.degree() == 1:
        out.append((prim, 1))
    else:
        cong = _congruence(prim)
        if cong is not None:
            if len(cong) == 1:
                d, L = cong[0]
                out.append((L, 2))
            elif len(cong) == 2:
                (d1, L1), (d2, L2) = cong
                s = _field_sqrt(-d2 / d1, eq.params)
                if s is None:
                    out.append((prim, 1))
                else:
                    out.append((L1 - L2.scale(s), 1))
                    out.append((L1 + L2.scale(s), 1))
            else:
                out.append((prim, 1))  # rank >= 3: irreducible quadratic form
        else:
            out.extend(_factor_upoly_sympy(prim))
    _factor_cache[key] = out
    return out


def _factor_upoly_sympy(eq: UPoly) -> list[tuple[UPoly, int]]:
    import sympy

    uidx = sorted(eq.unknowns())
    if len(uidx) + len(eq.params) > 14 or len(eq.terms) > 60:
        return [(eq, 1)]  # too large to factor profitably
    usyms = [sympy.Symbol(f"u{i}") for i in uidx]
    psyms = [sympy.Symbol(p) for p in eq.params]
    fld = coeff_field(eq.params)
    eq2 = _clear_param_denominators(eq)
    pdict: dict = {}
    for m, c in eq2.terms.items():
        uexp = {i: e for i, e in m}
        base = tuple(uexp.get(i, 0) for i in uidx)
        if eq2.params:
            for pexps, pc in c.numer.terms():
                exps = base + tuple(int(x) for x in pexps)
                q = Fraction(pc.numerator, pc.denominator)
                pdict[exps] = pdict.get(exps, Fraction(0)) + q
        else:
            pdict[base] = pdict.get(base, Fraction(0)) + c
    gens = usyms + psyms
    poly = sympy.Poly.from_dict(
        {k: sympy.Rational(v.numerator, v.denominator) for k, v in pdict.items() if v},
        *gens,
        domain=sympy.QQ,
    )
    _, factors = poly.factor_list()
    out = []
    for fac, mult in factors:
        terms = {}
        for exps, coef in fac.as_dict().items():
            um = tuple(
                (uidx[i], int(e)) for i, e in enumerate(exps[: len(uidx)]) if e
            )
            q = Fraction(coef.p, coef.q)
            cval = fld.from_fraction(q)
            for pname, e in zip(eq.params, exps[len(uidx):]):
                if e:
                    cval = cval * fld.atom(pname) ** int(e)
            terms[um] = terms.get(um, fld.zero) + cval
        out.append((UPoly(eq.params, terms), mult))
    return out


def _apply_zero(eq: UPoly, zeros: frozenset) -> UPoly:
    return UPoly(
        eq.params,
        {m: c for m, c in eq.terms.items() if not any(i in zeros for i, _ in m)},
    )


def _deg_in(eq: UPoly, k: int) -> int:
    d = 0
    for m, _ in eq.terms.items():
        for i, e in m:
            if i == k:
                d = max(d, e)
    return d


def _linear_coeff_and_rest(eq: UPoly, k: int):
    """Split eq = coeff * u_k + rest for an unknown of degree exactly 1."""
    coeff_terms = {}
    rest_terms = {}
    for m, c in eq.terms.items():
        md = dict(m)
        if k in md:
            md2 = dict(md)
            del md2[k]
            coeff_terms[tuple(sorted(md2.items()))] = c
        else:
            rest_terms[m] = c
    return UPoly(eq.params, coeff_terms), UPoly(eq.params, rest_terms)


def _linear_homogeneous_in(eq: UPoly, T: tuple) -> bool:
    """Every monomial has joint degree exactly 1 in the unknowns T."""
    tset = set(T)
    for m in eq.terms:
        if sum(e for i, e in m if i in tset) != 1:
            return False
    return True


def _block_coeff(eq: UPoly, k: int) -> UPoly:
    coeff, _ = _linear_coeff_and_rest(eq, k)
    return coeff


def _find_linear_block(eqs: tuple, lemmas: frozenset):
    """A subset T of unknowns (|T| in {2, 3}) in which >= |T| equations are
    jointly linear homogeneous.  Returns (T, block equations) or None.

    For a homogeneous system, such a block either has a singular coefficient
    matrix (its maximal minors vanish) or forces the T-unknowns to zero.
    """
    from itertools import combinations

    all_unknowns = sorted({i for e in eqs for i in e.unknowns()})
    for size in (2, 3):
        for T in combinations(all_unknowns, size):
            block = [e for e in eqs if set(e.unknowns()) & set(T) and _linear_homogeneous_in(e, T)]
            if len(block) < size:
                continue
            minors = _block_minors(block, T)
            new = [m for m in minors if not m.is_zero() and _eq_key(m) not in lemmas]
            if new:
                return T, block, new
    return None


def _eq_key(e: UPoly):
    return frozenset(e.terms.items())


def _block_minors(block: list, T: tuple) -> list:
    from itertools import combinations

    rows = [[_block_coeff(e, k) for k in T] for e in block]
    minors = []
    for idx in combinations(range(len(rows)), len(T)):
        sub = [rows[i] for i in idx]
        minors.append(_det(sub))
    return minors


def _det(m: list) -> UPoly:
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total = None
    for j in range(n):
        minor = [[m[i][k] for k in range(n) if k != j] for i in range(1, n)]
        term = m[0][j] * _det(minor)
        if j % 2:
            term = -term
        total = term if total is None else total + term
    return total


def _definite_split(eq: UPoly):
    """Real zero set of a definite quadratic form, as linear equations.

    When all congruence pivots of a parameter-free homogeneous quadratic
    share one sign, the real solutions are exactly the common zeros of the
    pivot forms; returns that list, or None when inapplicable.
    """
    if eq.params:
        return None
    cong = _congruence(eq)
    if cong is None or not cong:
        return None
    signs = {1 if d > 0 else -1 for d, _ in cong}
    if len(signs) != 1:
        return None
    return [L for _, L in cong]


def _try_eliminate(eq: UPoly, nonzero: frozenset):
    """Find (k, linear substitution for u_k) from a single equation.

    Returns (k, upoly) or None.  Only eliminations whose result is linear and
    exact are taken; coefficients must be invertible under the current
    nonzero assumptions.
    """
    fld = coeff_field(eq.params)
    if eq.degree() == 1:
        lin = eq.coeff_of_linear()
        const = lin.pop(None, None)
        if not lin:
            return None
        k = max(lin)
        ck = lin[k]
        rest_terms = {((i, 1),): c for i, c in lin.items() if i != k}
        if const is not None:
            rest_terms[()] = const
        rest = UPoly(eq.params, rest_terms)
        return k, rest.scale(-(fld.one / ck))
    # degree >= 2: u_k linear with a known-nonzero monomial coefficient
    cands = sorted(eq.unknowns(), reverse=True)
    for k in cands:
        if _deg_in(eq, k) != 1:
            continue
        coeff, rest = _linear_coeff_and_rest(eq, k)
        if len(coeff.terms) != 1:
            continue
        (cm, cc), = coeff.terms.items()
        if not all(i in nonzero for i, _ in cm):
            continue
        # exact division of rest by the coefficient monomial
        quot = {}
        ok = True
        for m, c in rest.terms.items():
            md = dict(m)
            for i, e in cm:
                if md.get(i, 0) < e:
                    ok = False
                    break
                md[i] -= e
                if md[i] == 0:
                    del md[i]
            if not ok:
                break
            quot[tuple(sorted(md.items()))] = c
        if not ok:
            continue
        sub = UPoly(eq.params, quot).scale(-(fld.one / cc))
        if sub.degree() > 1:
            continue
        return k, sub
    return None


def solve_u_system(
    cs: CoefficientSystem,
    max_branches: int = 4096,
    max_depth: int = 24,
) -> list[SolutionBranch]:
    """All solution branches of the coefficient system.

    Repeatedly substitutes decided zeros, eliminates unknowns that appear
    linearly with invertible coefficients, and splits on the factors of
    reducible equations or on zero/nonzero of a single unknown.  Branches the
    procedure cannot close are returned as UNSOLVED residuals.
    """
    params = cs.params
    init = _State(
        eqs=tuple(e for e in cs.equations if not e.is_zero()),
        nonzero=frozenset(cs.side_nonzero),
        zeros=frozenset(),
        elims=(),
        decisions=tuple(f"u{j} != 0" for j in cs.side_nonzero),
        depth=0,
    )
    stack = [init]
    solved: list[SolutionBranch] = []
    visited = 0
    branches = 1
    while stack:
        st = stack.pop()
        visited += 1
        if branches > max_branches or st.depth > max_depth or visited > 50 * max_branches:
            solved.append(_emit(st, cs, residual=st.eqs))
            continue
        if st.zeros & st.nonzero:
            continue
        # normalize: drop zeros, catch contradictions
        eqs = []
        dead = False
        for e in st.eqs:
            e = _apply_zero(e, st.zeros)
            if e.is_zero():
                continue
            if e.degree() == 0:
                dead = True  # nonzero constant (parameters are generic)
                break
            eqs.append(e)
        if dead:
            continue
        if not eqs:
            solved.append(_emit(st, cs))
            continue
        eqs.sort(key=lambda e: (e.degree(), len(e.terms), sorted(e.terms)))

        # scan for an equation that admits local progress
        action = None
        for pos, eq in enumerate(eqs):
            factors = [
                (f, m)
                for f, m in _factor_upoly(eq)
                if not _factor_known_nonzero(f, st.nonzero)
            ]
            if not factors:
                action = ("dead",)
                break
            if len(factors) > 1:
                action = ("split_factors", pos, [f for f, _ in factors])
                break
            f0 = factors[0][0]
            single = _single_unknown_factor(f0)
            if single is not None:
                action = ("zero", pos, single)
                break
            if set(f0.terms) != set(eq.terms):
                # strict simplification (content or multiplicity dropped)
                action = ("replace", pos, f0)
                break
            elim = _try_eliminate(f0, st.nonzero)
            if elim is not None:
                action = ("eliminate", pos, elim)
                break
            definite = _definite_split(f0)
            if definite is not None:
                action = ("definite", pos, definite)
                break
        if action is None:
            all_eqs = tuple(eqs)
            # linear homogeneous block: singular matrix or block unknowns zero
            block = _find_linear_block(all_eqs, st.lemmas)
            if block is not None:
                branches += 2
                T, _, minors = block
                lemmas = st.lemmas | {_eq_key(m) for m in minors}
                stack.append(
                    _State(
                        eqs=all_eqs + tuple(minors),
                        nonzero=st.nonzero,
                        zeros=st.zeros,
                        elims=st.elims,
                        decisions=st.decisions,
                        depth=st.depth + 1,
                        lemmas=lemmas,
                    )
                )
                if not set(T) & st.nonzero:
                    stack.append(
                        _State(
                            eqs=all_eqs,
                            nonzero=st.nonzero,
                            zeros=st.zeros | set(T),
                            elims=st.elims,
                            decisions=st.decisions
                            + tuple(f"u{k} = 0" for k in T),
                            depth=st.depth + 1,
                            lemmas=lemmas,
                        )
                    )
                continue
            # split zero / nonzero on the most-connected undecided unknown;
            # its nonzero branch tends to unlock cascaded eliminations
            counts: dict = {}
            for e in all_eqs:
                for k in e.unknowns():
                    if k not in st.nonzero and k not in st.zeros:
                        counts[k] = counts.get(k, 0) + 1
            if not counts:
                solved.append(_emit(st, cs, residual=all_eqs))
                continue
            k = max(counts, key=lambda i: (counts[i], i))
            branches += 2
            for extra_zero, extra_nonzero, note in (
                ({k}, set(), f"u{k} = 0"),
                (set(), {k}, f"u{k} != 0"),
            ):
                stack.append(
                    _State(
                        eqs=all_eqs,
                        nonzero=st.nonzero | extra_nonzero,
                        zeros=st.zeros | extra_zero,
                        elims=st.elims,
                        decisions=st.decisions + (note,),
                        depth=st.depth + 1,
                        lemmas=st.lemmas,
                    )
                )
            continue

        kind = action[0]
        if kind == "dead":
            continue
        pos = action[1]
        rest_eqs = tuple(eqs[:pos] + eqs[pos + 1 :])
        if kind == "split_factors":
            branches += len(action[2])
            for f in action[2]:
                stack.append(
                    _State(
                        eqs=(f,) + rest_eqs,
                        nonzero=st.nonzero,
                        zeros=st.zeros,
                        elims=st.elims,
                        decisions=st.decisions,
                        depth=st.depth,
                        lemmas=st.lemmas,
                    )
                )
        elif kind == "zero":
            stack.append(
                _State(
                    eqs=rest_eqs,
                    nonzero=st.nonzero,
                    zeros=st.zeros | {action[2]},
                    elims=st.elims,
                    decisions=st.decisions + (f"u{action[2]} = 0",),
                    depth=st.depth,
                    lemmas=st.lemmas,
                )
            )
        elif kind == "replace":
            stack.append(
                _State(
                    eqs=(action[2],) + rest_eqs,
                    nonzero=st.nonzero,
                    zeros=st.zeros,
                    elims=st.elims,
                    decisions=st.decisions,
                    depth=st.depth,
                    lemmas=st.lemmas,
                )
            )
        elif kind == "definite":
            stack.append(
                _State(
                    eqs=tuple(action[2]) + rest_eqs,
                    nonzero=st.nonzero,
                    zeros=st.zeros,
                    elims=st.elims,
                    decisions=st.decisions,
                    depth=st.depth,
                    lemmas=st.lemmas,
                )
            )
        elif kind == "eliminate":
            k, sub = action[2]
            subst = {k: sub}
            new_eqs = tuple(
                e2
                for e2 in (e.substitute_linear(subst) for e in rest_eqs)
                if not e2.is_zero()
            )
            stack.append(
                _State(
                    eqs=new_eqs,
                    nonzero=st.nonzero - {k},
                    zeros=st.zeros,
                    elims=st.elims + ((k, sub),),
                    decisions=st.decisions,
                    depth=st.depth,
                    lemmas=st.lemmas,
                )
            )

    return _dedupe_branches(solved, cs)


def _factor_known_nonzero(f: UPoly, nonzero: frozenset) -> bool:
    if f.degree() == 0:
        return True  # constant or pure-parameter factor, generically nonzero
    k = _single_unknown_factor(f)
    return k is not None and k in nonzero


def _single_unknown_factor(f: UPoly):
    if len(f.terms) != 1:
        return None
    (m, _), = f.terms.items()
    if len(m) == 1 and m[0][1] == 1:
        return m[0][0]
    return None


def _emit(st: _State, cs: CoefficientSystem, residual=()) -> SolutionBranch:
    params = cs.params
    final: dict = {i: UPoly.zero(params) for i in st.zeros}
    for i, sub in reversed(st.elims):
        final[i] = sub.substitute_linear(final)
    mentioned = set(cs.side_nonzero)
    for e in cs.equations:
        mentioned |= e.unknowns()
    frees = tuple(sorted(mentioned - set(final)))
    return SolutionBranch(
        substitution=final,
        frees=frees,
        assumptions=st.decisions,
        residual=tuple(residual),
    )


def _dedupe_branches(branches: list[SolutionBranch], cs: CoefficientSystem):
    # verify each solved branch annihilates every original equation
    out = []
    seen = set()
    for b in branches:
        if b.solved:
            ok = all(
                eq.substitute_linear(b.substitution).is_zero()
                for eq in cs.equations
            )
            if not ok:
                raise PolyError("solver produced a non-annihilating branch")
            # a side-condition unknown forced identically to zero contradicts
            # the division premise; that case is covered by re-deriving the
            # system with the restricted template
            if any(
                j in b.substitution and b.substitution[j].is_zero()
                for j in cs.side_nonzero
                if j is not None
            ):
                continue
        key = (
            frozenset(
                (i, frozenset(s.terms.items())) for i, s in b.substitution.items()
            ),
            frozenset(frozenset(r.terms.items()) for r in b.residual),
        )
        if key in seen:
            continue
        seen.add(key)
        out.append(b)
    return out


# ---------------------------------------------------------------------------
# Clusters
# ---------------------------------------------------------------------------


@dataclass
class InvariantCluster:
    """A solved parametric invariant g(u, x) with free parameters u1..uK."""

    polynomial: TemplatePolynomial
    K: int
    degree: int
    order_kind: str
    assumptions: tuple[str, ...] = ()
    system_name: str = ""

    def generators(self) -> list[Polynomial]:
        return cluster_generators(self)

    def text(self) -> str:
        return self.polynomial.text()


def cluster_generators(cluster: InvariantCluster) -> list[Polynomial]:
    """Concrete generator polynomials: unit vectors substituted for u."""
    gens = []
    for k in range(1, cluster.K + 1):
        values = {i: Fraction(1 if i == k else 0) for i in range(1, cluster.K + 1)}
        gens.append(cluster.polynomial.instantiate(values))
    return gens


def _canonicalize(
    template: TemplatePolynomial, branch: SolutionBranch
) -> TemplatePolynomial | None:
    """Apply a solved branch and rename free unknowns to u1..uK."""
    sub = dict(branch.substitution)
    g = template.substitute_u(sub)
    frees = sorted(g.unknowns())
    if not frees:
        return None
    rename = {old: UPoly.unknown(new + 1, template.params) for new, old in enumerate(frees)}
    g = g.substitute_u(rename)
    return TemplatePolynomial(g.vars, g.params, len(frees), g.terms)


def in_span(p: Polynomial, gens: list[Polynomial]):
    """Exact coordinates of p in span(gens), or None."""
    if not gens:
        return None
    fld = p.field
    monos = sorted(set().union(*(set(g.terms) for g in gens)) | set(p.terms))
    rows = [[g.terms.get(m, fld.zero) for g in gens] + [p.terms.get(m, fld.zero)] for m in monos]
    ncols = len(gens)
    # Gaussian elimination over the coefficient field
    pivot_rows = []
    used = set()
    for col in range(ncols):
        pr = None
        for ri, row in enumerate(rows):
            if ri in used:
                continue
            if not fld.is_zero(row[col]):
                pr = ri
                break
        if pr is None:
            continue
        used.add(pr)
        pivot_rows.append((col, pr))
        inv = fld.one / rows[pr][col]
        rows[pr] = [v * inv for v in rows[pr]]
        for ri, row in enumerate(rows):
            if ri != pr and not fld.is_zero(row[col]):
                fac = row[col]
                rows[ri] = [a - fac * b for a, b in zip(row, rows[pr])]
    coords = [fld.zero] * ncols
    for col, pr in pivot_rows:
        coords[col] = rows[pr][ncols]
    for ri, row in enumerate(rows):
        if ri not in used and not fld.is_zero(row[ncols]):
            return None
    return coords


def clusters_equivalent(a: InvariantCluster, b: InvariantCluster) -> bool:
    """Equality up to a change of basis on the free parameters."""
    if a.K != b.K:
        return False
    ga, gb = cluster_generators(a), cluster_generators(b)
    return all(in_span(g, gb) is not None for g in ga) and all(
        in_span(g, ga) is not None for g in gb
    )


def cluster_subsumes(a: InvariantCluster, b: InvariantCluster) -> bool:
    """True when every member of b is already a member of a."""
    ga = cluster_generators(a)
    return all(in_span(g, ga) is not None for g in cluster_generators(b))


def _drop_subsumed(clusters: list[InvariantCluster]) -> list[InvariantCluster]:
    ordered = sorted(clusters, key=lambda c: -c.K)
    kept: list[InvariantCluster] = []
    for c in ordered:
        if not any(cluster_subsumes(k, c) for k in kept):
            kept.append(c)
    return kept


def _random_fraction(rng: Random, bits: int = 63) -> Fraction:
    num = rng.getrandbits(bits) + 1
    den = rng.getrandbits(bits) + 1
    sign = -1 if rng.getrandbits(1) else 1
    return Fraction(sign * num, den)


def filter_products(
    candidates: list[InvariantCluster],
    lower: list[InvariantCluster],
    seed: int = 0,
    trials: int = 5,
) -> list[InvariantCluster]:
    """Drop candidates that are products of lower-degree invariants.

    Probabilistic: a candidate is dropped when, at ``trials`` independent
    random rational instantiations of its free parameters (and of the model
    parameters), the instance is exactly divisible by a member of some lower
    cluster instantiated at matching parameter values.
    """
    if not lower:
        return list(candidates)
    rng = Random(seed)
    kept = []
    for cand in candidates:
        drops = 0
        for _ in range(trials):
            pvals = {p: _random_fraction(rng, 20) for p in cand.polynomial.params}
            uvals = {i: _random_fraction(rng, 20) for i in range(1, cand.K + 1)}
            inst = cand.polynomial.instantiate(uvals)
            if inst.params:
                inst = inst.bind_params(pvals)
            if inst.is_zero():
                drops += 1
                continue
            if _divisible_by_lower(inst, lower, pvals):
                drops += 1
            else:
                break
        if drops == trials:
            continue
        kept.append(cand)
    return kept


def _divisible_by_lower(p: Polynomial, lower: list[InvariantCluster], pvals) -> bool:
    import sympy

    syms = [sympy.Symbol(v) for v in p.vars]
    expr_dict = {m: sympy.Rational(c.numerator, c.denominator) for m, c in p.terms.items()}
    poly = sympy.Poly.from_dict(expr_dict, *syms, domain=sympy.QQ)
    _, factors = poly.factor_list()
    factors = [(f, m) for f, m in factors if f.total_degree() >= 1]
    if not factors:
        return False
    for cl in lower:
        gens = []
        for g in cluster_generators(cl):
            gq = g.bind_params(pvals) if g.params else g
            if not gq.is_zero() and gq.degree() >= 1:
                gens.append(gq)
        if not gens:
            continue
        maxdeg = max(g.degree() for g in gens)
        if _some_divisor_in_span(factors, gens, maxdeg, p.vars):
            return True
    return False


def _some_divisor_in_span(factors, gens, maxdeg, vars) -> bool:
    # enumerate divisors assembled from the irreducible factors
    from itertools import product as iproduct

    choices = [range(m + 1) for _, m in factors]
    total = 1
    for c in choices:
        total *= len(c)
        if total > 256:
            break
    count = 0
    for combo in iproduct(*choices):
        count += 1
        if count > 256:
            return False
        if not any(combo):
            continue
        deg = sum(f.total_degree() * e for (f, _), e in zip(factors, combo))
        if deg < 1 or deg > maxdeg:
            continue
        div = None
        for (f, _), e in zip(factors, combo):
            for _ in range(e):
                div = f if div is None else div * f
        dpoly = _sympy_to_polynomial(div, vars)
        if in_span(dpoly, gens) is not None:
            return True
    return False


def _sympy_to_polynomial(poly, vars) -> Polynomial:
    terms = {}
    for exps, coef in poly.as_dict().items():
        terms[tuple(int(e) for e in exps)] = Fraction(coef.p, coef.q)
    return Polynomial(tuple(vars), (), terms)


# ---------------------------------------------------------------------------
# check_invariant
# ---------------------------------------------------------------------------


def _as_template(g) -> TemplatePolynomial:
    if isinstance(g, TemplatePolynomial):
        return g
    return TemplatePolynomial.from_polynomial(g, 1, 1)


def _normalize_leading(g: TemplatePolynomial, order: MonomialOrder):
    """Change u-basis so the leading coefficient is a single unknown."""
    lm, lc = g.leading_term(order)
    if _single_unknown_coeff(lc) is not None:
        return g, None
    lin = lc.coeff_of_linear()
    if None in lin:
        raise PolyError("leading coefficient has a constant part")
    fld = coeff_field(g.params)
    k = max(lin)
    ak = lin[k]
    # u_k = (w_k - sum_{i != k} a_i w_i) / a_k, with w names reusing indices
    terms = {((k, 1),): fld.one / ak}
    for i, ai in lin.items():
        if i != k:
            terms[((i, 1),)] = -ai / ak
    sub = {k: UPoly(g.params, terms)}
    return g.substitute_u(sub), sub


def check_invariant(g, f, order: MonomialOrder = GREVLEX):
    """Does L_f g reduce to remainder 0 modulo g?

    Returns (ok, cofactor, clearing_power): when ok, u_j^d * L_f g equals
    cofactor * g exactly.  Accepts concrete polynomials and templates; for a
    template whose leading coefficient is a linear form, an invertible change
    of u-basis is applied first.
    """
    gt = _as_template(g)
    if gt.is_zero():
        raise PolyError("zero polynomial is not an invariant candidate")
    gt, _ = _normalize_leading(gt, order)
    L = lie_derivative(gt, list(f))
    if L.is_zero():
        return True, TemplatePolynomial.zero(gt.vars, gt.params, gt.nu), 0
    q, r, d, j = reduce_template(L, gt, order)
    return r.is_zero(), q, d


# ---------------------------------------------------------------------------
# generate_clusters
# ---------------------------------------------------------------------------


@dataclass
class GenerationResult:
    clusters: list[InvariantCluster]
    unsolved: list[dict]
    table: list[dict]  # one row per (degree, order): unknowns, time, counts


DEFAULT_ORDERS = (GREVLEX, LEX)


def generate_clusters(
    system: SemialgebraicSystem,
    max_degree: int,
    orders=DEFAULT_ORDERS,
    *,
    params_as_vars: bool = False,
    seed: int = 0,
    max_branches: int = 4096,
    max_depth: int = 24,
) -> GenerationResult:
    """Algorithm: for each degree and order, template -> Lie -> remainder ->
    solve; filter products of lower-degree invariants; deduplicate across
    orders by change-of-basis equivalence.

    The leading unknown of each division carries a nonzero side condition;
    the complementary case is covered by recursing on the template with that
    unknown forced to zero, so a single order already spans all branches.
    """
    if max_degree < 1:
        raise PolyError("max_degree must be >= 1")
    sys_ = system.with_params_as_vars() if params_as_vars else system
    clusters: list[InvariantCluster] = []
    unsolved: list[dict] = []
    table = []
    lower: list[InvariantCluster] = []
    for degree in range(1, max_degree + 1):
        degree_clusters: list[InvariantCluster] = []
        for order in orders:
            t0 = time.perf_counter()
            found = _clusters_one_cell(
                sys_, degree, order, unsolved, max_branches, max_depth
            )
            for cl in found:
                if not any(clusters_equivalent(cl, old) for old in degree_clusters):
                    degree_clusters.append(cl)
            table.append(
                {
                    "degree": degree,
                    "order": order.kind,
                    "unknowns": template_unknown_count(len(sys_.vars), degree),
                    "seconds": time.perf_counter() - t0,
                    "clusters": len(found),
                }
            )
        degree_clusters = _drop_subsumed(degree_clusters)
        kept = filter_products(degree_clusters, lower, seed=seed)
        clusters.extend(kept)
        lower = lower + kept
    return GenerationResult(clusters, unsolved, table)


def _clusters_one_cell(
    system: SemialgebraicSystem,
    degree: int,
    order: MonomialOrder,
    unsolved_out: list,
    max_branches: int,
    max_depth: int,
) -> list[InvariantCluster]:
    template_full = gen_template(system.vars, system.params, degree)
    found: list[InvariantCluster] = []
    zero_set: frozenset = frozenset()
    while True:
        terms = {
            m: c
            for m, c in template_full.terms.items()
            if next(iter(c.terms))[0][0] not in zero_set
        }
        if not terms:
            break
        template = TemplatePolynomial(
            template_full.vars, template_full.params, template_full.nu, terms
        )
        if template.degree() == 0:
            break  # constant-only template defines no locus
        cs = build_coefficient_system(template, system.f, order)
        branches = solve_u_system(cs, max_branches=max_branches, max_depth=max_depth)
        for b in branches:
            if not b.solved:
                unsolved_out.append(
                    {
                        "degree": degree,
                        "order": order.kind,
                        "assumptions": list(b.assumptions),
                        "residual": [r.text() for r in b.residual],
                    }
                )
                continue
            g = _canonicalize(template, b)
            if g is None or g.is_zero() or g.degree() == 0:
                continue
            cl = InvariantCluster(
                polynomial=g,
                K=len(g.unknowns()),
                degree=degree,
                order_kind=order.kind,
                assumptions=b.assumptions,
                system_name=system.name,
            )
            if not any(clusters_equivalent(cl, old) for old in found):
                found.append(cl)
        if not cs.side_nonzero or cs.side_nonzero[0] is None:
            break
        zero_set = zero_set | {cs.side_nonzero[0]}
    return found
