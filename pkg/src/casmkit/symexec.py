"""Symbolic execution of one machine step.

Runs a program on a state whose locations hold symbols instead of values,
enumerating every guard-branch combination across the parallel top-level
rules.  Each feasible combination yields a path condition and a symbolic
successor map; infeasible combinations are pruned by brute-force
satisfiability over the finite sorts.  The same enumeration doubles as a
complete equivalence oracle, which every simplification is checked
against when ``ORACLE_CHECK`` is on (the test suite turns it on).

Reads through a location whose argument is itself symbolic are grounded
by expansion: ``f(x)`` with symbolic ``x`` becomes a conditional cascade
over all values of the argument sort, one ground location per value.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .ast import (
    And, App, Call, CasmError, Choose, ChooseCtl, Cond, Const, Eq, FALSE, Ite,
    Let, Location, Member, Not, Or, Par, Program, Rule, Sort, TRUE, Term,
    Update, Value, Var, and_all, canonical_values, children, location_term,
    locations_of_interest, or_all, term_size,
)

DOMAIN_CAP = 1 << 24

# When on, every simplification result is re-verified against the
# enumeration oracle (skipped above _ORACLE_SKIP combined domain size).
ORACLE_CHECK = False
_ORACLE_SKIP = 1 << 16


class DomainTooLarge(CasmError):
    pass


class SymbolicInconsistency(CasmError):
    def __init__(self, loc: Location):
        from .ast import format_location
        super().__init__(f"conflicting parallel writes to {format_location(loc)}")
        self.location = loc


class UnsupportedConstruct(CasmError):
    pass


class UnhousedSymbol(CasmError):
    def __init__(self, symbol: "Symbol"):
        super().__init__(f"symbol {symbol.name} has no initial-state location")
        self.symbol = symbol


# ---------------------------------------------------------------------------
# Symbols
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Symbol:
    name: str
    sort: Sort


@dataclass(frozen=True)
class SymRef(Term):
    symbol: Symbol


_GREEK = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta",
          "theta", "iota", "kappa", "lambda", "mu", "nu", "xi", "omicron",
          "pi", "rho", "sigma", "tau", "upsilon", "phi", "chi", "psi",
          "omega")


class SymbolNamer:
    """Hands out fresh symbol names, unique within one analysis."""

    def __init__(self):
        self.count = 0
        self.used: set[str] = set()

    def fresh(self, sort: Sort) -> Symbol:
        while True:
            base = _GREEK[self.count % len(_GREEK)]
            round_ = self.count // len(_GREEK)
            name = base if round_ == 0 else f"{base}{round_ + 1}"
            self.count += 1
            if name not in self.used:
                self.used.add(name)
                return Symbol(name, sort)

    def named(self, name: str, sort: Sort) -> Symbol:
        if name in self.used:
            raise CasmError(f"symbol name {name} already in use")
        self.used.add(name)
        return Symbol(name, sort)


# ---------------------------------------------------------------------------
# Symbolic initial state
# ---------------------------------------------------------------------------

@dataclass
class SymInit:
    """Symbolic seed state: one entry per location of interest.

    By default every location gets its own fresh symbol.  Declared
    initial constraints of the shape ``loc = expr-over-locations``
    correlate entries instead (the constrained location maps to the
    translated expression rather than a fresh symbol).
    """

    sym_val: dict[Location, Term]
    base_symbols: dict[Location, Symbol]
    constraints: tuple[Term, ...]
    namer: SymbolNamer = field(default_factory=SymbolNamer)

    @classmethod
    def for_program(cls, program: Program,
                    constraints: Optional[Iterable[Term]] = None) -> "SymInit":
        if constraints is None:
            constraints = program.init_constraints
        constraints = tuple(constraints)
        interest = locations_of_interest(program)
        constrained: dict[Location, Term] = {}
        order: list[Location] = []
        for c in constraints:
            if not (isinstance(c, Eq) and isinstance(c.left, App)
                    and all(isinstance(a, Const) for a in c.left.args)):
                raise CasmError(
                    "initial constraint must equate a ground location with a term")
            loc = (c.left.fn, tuple(a.value for a in c.left.args))
            if loc == program.ctl_loc:
                raise CasmError(
                    "the control-state location must keep a fresh symbol")
            if loc in constrained:
                raise CasmError(
                    f"location {loc[0]} constrained twice")
            constrained[loc] = c.right
            order.append(loc)

        namer = SymbolNamer()
        sym_val: dict[Location, Term] = {}
        base: dict[Location, Symbol] = {}

        def fresh_for(loc: Location) -> None:
            sort = program.function(loc[0]).result
            sym = namer.fresh(sort)
            sym_val[loc] = SymRef(sym)
            base[loc] = sym

        for loc in interest:
            if loc not in constrained:
                fresh_for(loc)

        def translate(term: Term) -> Term:
            if isinstance(term, App):
                loc = (term.fn, tuple(a.value for a in term.args))
                if loc not in sym_val:
                    fresh_for(loc)
                return sym_val[loc]
            if isinstance(term, Const):
                return term
            if isinstance(term, Not):
                return Not(translate(term.operand))
            if isinstance(term, And):
                return And(translate(term.left), translate(term.right))
            if isinstance(term, Or):
                return Or(translate(term.left), translate(term.right))
            if isinstance(term, Eq):
                return Eq(translate(term.left), translate(term.right))
            if isinstance(term, Member):
                return Member(translate(term.item), term.values)
            if isinstance(term, Ite):
                return Ite(translate(term.cond), translate(term.then),
                           translate(term.other))
            raise CasmError("unsupported construct in initial constraint")

        for loc in order:
            sym_val[loc] = translate(constrained[loc])

        return cls(sym_val=sym_val, base_symbols=base,
                   constraints=constraints, namer=namer)

    def symbol_of(self, loc: Location) -> Symbol:
        return self.base_symbols[loc]


# ---------------------------------------------------------------------------
# Enumeration oracle
# ---------------------------------------------------------------------------

def _leaf_sort(leaf: Term, program: Optional[Program]) -> Sort:
    if isinstance(leaf, SymRef):
        return leaf.symbol.sort
    if isinstance(leaf, App):
        if program is None:
            raise CasmError(
                f"need the program signature to type location {leaf.fn}")
        return program.function(leaf.fn).result
    raise CasmError(f"not a leaf: {type(leaf).__name__}")


def free_leaves(*terms: Term) -> list[Term]:
    """Symbols and ground locations, in first-occurrence order."""
    seen: dict[Term, None] = {}

    def walk(t: Term) -> None:
        if isinstance(t, SymRef):
            seen.setdefault(t)
            return
        if isinstance(t, App):
            if not all(isinstance(a, Const) for a in t.args):
                raise CasmError("formula reads a non-ground location")
            seen.setdefault(t)
            return
        if isinstance(t, Var):
            raise CasmError(f"free variable {t.name}; substitute it first")
        for c in children(t):
            walk(c)

    for t in terms:
        walk(t)
    return list(seen)


def free_symbols(term: Term) -> list[Symbol]:
    return [l.symbol for l in free_leaves(term) if isinstance(l, SymRef)]


def eval_fd(term: Term, valuation: dict[Term, Value]) -> Value:
    if isinstance(term, Const):
        return term.value
    if isinstance(term, (SymRef, App)):
        return valuation[term]
    if isinstance(term, Not):
        return not eval_fd(term.operand, valuation)
    if isinstance(term, And):
        return bool(eval_fd(term.left, valuation)
                    and eval_fd(term.right, valuation))
    if isinstance(term, Or):
        return bool(eval_fd(term.left, valuation)
                    or eval_fd(term.right, valuation))
    if isinstance(term, Eq):
        return eval_fd(term.left, valuation) == eval_fd(term.right, valuation)
    if isinstance(term, Member):
        return eval_fd(term.item, valuation) in term.values
    if isinstance(term, Ite):
        if eval_fd(term.cond, valuation):
            return eval_fd(term.then, valuation)
        return eval_fd(term.other, valuation)
    raise CasmError(f"cannot evaluate {type(term).__name__}")


def _valuations(leaves: list[Term], program: Optional[Program],
                cap: int = DOMAIN_CAP):
    domains = []
    total = 1
    for leaf in leaves:
        values = _leaf_sort(leaf, program).values()
        domains.append(values)
        total *= len(values)
        if total > cap:
            raise DomainTooLarge(
                f"combined valuation space exceeds {cap}")
    for combo in itertools.product(*domains):
        yield dict(zip(leaves, combo))


def equivalent_on_finite_domains(
        f: Term, g: Term, program: Optional[Program] = None,
        assume: Optional[Term] = None,
        cap: int = DOMAIN_CAP) -> tuple[bool, Optional[dict[Term, Value]]]:
    """Complete equivalence check by exhaustive valuation; on failure the
    witness valuation is returned."""
    extra = (assume,) if assume is not None else ()
    leaves = free_leaves(f, g, *extra)
    for valuation in _valuations(leaves, program, cap):
        if assume is not None and not eval_fd(assume, valuation):
            continue
        if eval_fd(f, valuation) != eval_fd(g, valuation):
            return False, valuation
    return True, None


def satisfiable(f: Term, program: Optional[Program] = None,
                cap: int = DOMAIN_CAP) -> bool:
    leaves = free_leaves(f)
    for valuation in _valuations(leaves, program, cap):
        if eval_fd(f, valuation):
            return True
    return False


# ---------------------------------------------------------------------------
# Smart constructors (local constant folding)
# ---------------------------------------------------------------------------

def s_not(t: Term) -> Term:
    if isinstance(t, Const):
        return Const(not t.value)
    if isinstance(t, Not):
        return t.operand
    return Not(t)


def s_and(a: Term, b: Term) -> Term:
    if a == TRUE:
        return b
    if b == TRUE:
        return a
    if a == FALSE or b == FALSE:
        return FALSE
    return And(a, b)


def s_or(a: Term, b: Term) -> Term:
    if a == FALSE:
        return b
    if b == FALSE:
        return a
    if a == TRUE or b == TRUE:
        return TRUE
    return Or(a, b)


def s_eq(a: Term, b: Term) -> Term:
    if a == b:
        return TRUE
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value == b.value)
    return Eq(a, b)


def s_member(item: Term, values: Iterable[Value]) -> Term:
    values = canonical_values(values)
    if isinstance(item, Const):
        return Const(item.value in values)
    if not values:
        return FALSE
    if len(values) == 1:
        return Eq(item, Const(values[0]))
    return Member(item, values)


def s_ite(c: Term, t: Term, o: Term) -> Term:
    if isinstance(c, Const):
        return t if c.value else o
    if t == o:
        return t
    return Ite(c, t, o)


# ---------------------------------------------------------------------------
# Substitution
# ---------------------------------------------------------------------------

def subst_term(term: Term, mapping: dict[Term, Term]) -> Term:
    """Replace whole subterms (top-down, outermost match wins)."""
    hit = mapping.get(term)
    if hit is not None:
        return hit
    if isinstance(term, Not):
        return s_not(subst_term(term.operand, mapping))
    if isinstance(term, And):
        return s_and(subst_term(term.left, mapping),
                     subst_term(term.right, mapping))
    if isinstance(term, Or):
        return s_or(subst_term(term.left, mapping),
                    subst_term(term.right, mapping))
    if isinstance(term, Eq):
        return s_eq(subst_term(term.left, mapping),
                    subst_term(term.right, mapping))
    if isinstance(term, Member):
        return s_member(subst_term(term.item, mapping), term.values)
    if isinstance(term, Ite):
        return s_ite(subst_term(term.cond, mapping),
                     subst_term(term.then, mapping),
                     subst_term(term.other, mapping))
    if isinstance(term, App):
        return App(term.fn, tuple(subst_term(a, mapping) for a in term.args))
    return term


def subst_symbol(term: Term, symbol: Symbol, replacement: Term) -> Term:
    return subst_term(term, {SymRef(symbol): replacement})


# ---------------------------------------------------------------------------
# Simplifier
# ---------------------------------------------------------------------------

def simplify_formula(f: Term, program: Optional[Program] = None) -> Term:
    """Equivalent formula that is no larger (node count).

    Applies constant folding, idempotence, absorption, complement laws,
    fusion of equality literals into membership sets, pruning of
    sort-exhaustive memberships, and propagation of equalities decided by
    a conjunction into its other conjuncts.
    """
    out = f
    for _ in range(8):
        nxt = _simp(out, program)
        if nxt == out:
            break
        out = nxt
    if term_size(out) > term_size(f):
        out = f
    if ORACLE_CHECK:
        _oracle_check(f, out, program)
    return out


def _oracle_check(f: Term, g: Term, program: Optional[Program]) -> None:
    try:
        ok, witness = equivalent_on_finite_domains(f, g, program,
                                                   cap=_ORACLE_SKIP)
    except CasmError:
        return  # placeholder variables or untypable leaves: not checkable
    if not ok:
        raise CasmError(
            f"simplification changed meaning under {witness!r}")


def _flatten(term: Term, cls) -> list[Term]:
    if isinstance(term, cls):
        return _flatten(term.left, cls) + _flatten(term.right, cls)
    return [term]


def _sort_of(leaf: Term, program: Optional[Program]) -> Optional[Sort]:
    try:
        return _leaf_sort(leaf, program)
    except CasmError:
        return None


def _is_leaf(t: Term) -> bool:
    return isinstance(t, SymRef) or (
        isinstance(t, App) and all(isinstance(a, Const) for a in t.args))


def _simp(term: Term, program: Optional[Program]) -> Term:
    if isinstance(term, (Const, Var, SymRef)):
        return term
    if isinstance(term, App):
        return App(term.fn, tuple(_simp(a, program) for a in term.args))
    if isinstance(term, Not):
        inner = _simp(term.operand, program)
        if isinstance(inner, Const):
            return Const(not inner.value)
        if isinstance(inner, Not):
            return inner.operand
        if isinstance(inner, Member) and _is_leaf(inner.item):
            sort = _sort_of(inner.item, program)
            if sort is not None:
                rest = [v for v in sort.values() if v not in inner.values]
                return s_member(inner.item, rest)
        if isinstance(inner, Eq) and _is_leaf(inner.left) \
                and isinstance(inner.right, Const):
            sort = _sort_of(inner.left, program)
            if sort is not None and sort.kind != "bool":
                rest = [v for v in sort.values() if v != inner.right.value]
                return s_member(inner.left, rest)
        return Not(inner)
    if isinstance(term, And):
        return _simp_and([_simp(t, program) for t in _flatten(term, And)],
                         program)
    if isinstance(term, Or):
        return _simp_or([_simp(t, program) for t in _flatten(term, Or)],
                        program)
    if isinstance(term, Eq):
        left = _simp(term.left, program)
        right = _simp(term.right, program)
        if isinstance(left, Const) and not isinstance(right, Const):
            left, right = right, left
        if isinstance(right, Const) and isinstance(right.value, bool) \
                and not isinstance(left, Const):
            return left if right.value else _simp(Not(left), program)
        if isinstance(left, Ite) and isinstance(right, Const):
            return _simp(Ite(left.cond, Eq(left.then, right),
                             Eq(left.other, right)), program)
        if isinstance(right, Ite) and isinstance(left, Const):
            return _simp(Ite(right.cond, Eq(right.then, left),
                             Eq(right.other, left)), program)
        return s_eq(left, right)
    if isinstance(term, Member):
        item = _simp(term.item, program)
        if isinstance(item, Ite):
            return _simp(Ite(item.cond, Member(item.then, term.values),
                             Member(item.other, term.values)), program)
        if _is_leaf(item):
            sort = _sort_of(item, program)
            if sort is not None:
                values = [v for v in term.values if sort.contains(v)]
                if len(values) == sort.size:
                    return TRUE
                return s_member(item, values)
        return s_member(item, term.values)
    if isinstance(term, Ite):
        cond = _simp(term.cond, program)
        then = _simp(term.then, program)
        other = _simp(term.other, program)
        if isinstance(cond, Const):
            return then if cond.value else other
        if then == other:
            return then
        if then == TRUE:
            return _simp_or([cond, other], program)
        if other == FALSE:
            return _simp_and([cond, then], program)
        if then == FALSE:
            return _simp_and([_simp(Not(cond), program), other], program)
        if other == TRUE:
            return _simp_or([_simp(Not(cond), program), then], program)
        return Ite(cond, then, other)
    raise CasmError(f"cannot simplify {type(term).__name__}")


def _literal_domain(t: Term, program) -> Optional[tuple[Term, frozenset]]:
    """Leaf and allowed-value set asserted by a positive literal."""
    if isinstance(t, Eq) and _is_leaf(t.left) and isinstance(t.right, Const):
        return t.left, frozenset([t.right.value])
    if isinstance(t, Eq) and _is_leaf(t.right) and isinstance(t.left, Const):
        return t.right, frozenset([t.left.value])
    if isinstance(t, Member) and _is_leaf(t.item):
        return t.item, frozenset(t.values)
    if _is_leaf(t):
        sort = _sort_of(t, program)
        if sort is not None and sort.kind == "bool":
            return t, frozenset([True])
    if isinstance(t, Not) and _is_leaf(t.operand):
        sort = _sort_of(t.operand, program)
        if sort is not None and sort.kind == "bool":
            return t.operand, frozenset([False])
    return None


def _domain_literal(leaf: Term, allowed: frozenset, program) -> Term:
    sort = _sort_of(leaf, program)
    if sort is not None and sort.kind == "bool":
        if allowed == frozenset([True]):
            return leaf
        if allowed == frozenset([False]):
            return Not(leaf)
        return TRUE
    if sort is not None and len(allowed) == sort.size:
        return TRUE
    if len(allowed) == 1:
        return Eq(leaf, Const(next(iter(allowed))))
    return Member(leaf, tuple(allowed))


def _simp_and(parts: list[Term], program) -> Term:
    items: list[Term] = []
    for p in parts:
        if p == TRUE:
            continue
        if p == FALSE:
            return FALSE
        items.extend(_flatten(p, And))
    # idempotence and complements
    uniq: list[Term] = []
    seen: set = set()
    for p in items:
        if p in seen:
            continue
        seen.add(p)
        uniq.append(p)
    for p in uniq:
        if s_not(p) in seen or (isinstance(p, Not) and p.operand in seen):
            return FALSE
    # intersect per-leaf domains
    domains: dict[Term, frozenset] = {}
    rest: list[Term] = []
    for p in uniq:
        lit = _literal_domain(p, program)
        if lit is not None:
            leaf, allowed = lit
            domains[leaf] = domains.get(leaf, allowed) & allowed
        else:
            rest.append(p)
    decided: dict[Term, Term] = {}
    for leaf, allowed in domains.items():
        if not allowed:
            return FALSE
        if len(allowed) == 1:
            decided[leaf] = Const(next(iter(allowed)))
    if decided:
        new_rest = []
        for p in rest:
            q = subst_term(p, decided)
            if q != p:
                q = _simp(q, program)
            if q == FALSE:
                return FALSE
            if q != TRUE:
                new_rest.append(q)
        rest = new_rest
    out: list[Term] = []
    for leaf, allowed in domains.items():
        lit = _domain_literal(leaf, allowed, program)
        if lit == FALSE:
            return FALSE
        if lit != TRUE:
            out.append(lit)
    out.extend(rest)
    # absorption: drop a disjunction that contains another conjunct
    out_set = set(out)
    kept = []
    for p in out:
        if isinstance(p, Or):
            disjuncts = _flatten(p, Or)
            if any(d in out_set for d in disjuncts):
                continue
        kept.append(p)
    return and_all(kept)


def _simp_or(parts: list[Term], program) -> Term:
    items: list[Term] = []
    for p in parts:
        if p == FALSE:
            continue
        if p == TRUE:
            return TRUE
        items.extend(_flatten(p, Or))
    uniq: list[Term] = []
    seen: set = set()
    for p in items:
        if p in seen:
            continue
        seen.add(p)
        uniq.append(p)
    for p in uniq:
        if s_not(p) in seen or (isinstance(p, Not) and p.operand in seen):
            return TRUE
    # fuse equality/membership literals over one leaf
    domains: dict[Term, frozenset] = {}
    order: list[Term] = []
    rest: list[Term] = []
    for p in uniq:
        lit = _literal_domain(p, program)
        if lit is not None:
            leaf, allowed = lit
            if leaf not in domains:
                order.append(leaf)
                domains[leaf] = allowed
            else:
                domains[leaf] = domains[leaf] | allowed
        else:
            rest.append(p)
    out: list[Term] = []
    for leaf in order:
        sort = _sort_of(leaf, program)
        allowed = domains[leaf]
        if sort is not None and len(allowed) == sort.size:
            return TRUE
        lit = _domain_literal(leaf, allowed, program)
        if lit == TRUE:
            return TRUE
        out.append(lit)
    out.extend(rest)
    # absorption: drop a conjunction that contains another disjunct
    out_set = set(out)
    kept = []
    for p in out:
        if isinstance(p, And):
            conjuncts = _flatten(p, And)
            if any(c in out_set for c in conjuncts):
                continue
        kept.append(p)
    # factor out conjuncts common to every disjunct
    if len(kept) > 1 and all(isinstance(p, And) or True for p in kept):
        lists = [_flatten(p, And) for p in kept]
        common = [c for c in lists[0]
                  if all(c in other for other in lists[1:])]
        if common and any(len(l) > 1 for l in lists):
            remainders = [and_all([c for c in l if c not in common])
                          for l in lists]
            inner = _simp_or(remainders, program)
            return _simp_and(common + [inner], program)
    return or_all(kept)


# ---------------------------------------------------------------------------
# Symbolic evaluation and stepping
# ---------------------------------------------------------------------------

def sym_eval(term: Term, program: Program, locmap: dict[Location, Term],
             env: dict[str, Term]) -> Term:
    if isinstance(term, Const):
        return term
    if isinstance(term, Var):
        if term.name not in env:
            raise CasmError(f"unbound variable {term.name}")
        return env[term.name]
    if isinstance(term, App):
        decl = program.function(term.fn)
        argexprs = [sym_eval(a, program, locmap, env) for a in term.args]

        def read(args: tuple[Value, ...]) -> Term:
            if decl.mode == "static":
                return Const(decl.init_map()[args])
            loc = (term.fn, args)
            if loc not in locmap:
                raise CasmError(
                    f"read of untracked location {term.fn}{args!r}")
            return locmap[loc]

        if all(isinstance(e, Const) for e in argexprs):
            return read(tuple(e.value for e in argexprs))
        # ground expansion over the symbolic argument positions
        dims: list[tuple[int, tuple[Value, ...]]] = []
        fixed: dict[int, Value] = {}
        for i, e in enumerate(argexprs):
            if isinstance(e, Const):
                fixed[i] = e.value
            else:
                dims.append((i, decl.arg_sorts[i].values()))
        combos = list(itertools.product(*(vals for _, vals in dims)))

        def args_for(combo) -> tuple[Value, ...]:
            chosen = dict(fixed)
            for (i, _), v in zip(dims, combo):
                chosen[i] = v
            return tuple(chosen[i] for i in range(len(argexprs)))

        expr = read(args_for(combos[-1]))
        for combo in reversed(combos[:-1]):
            cond = and_all([
                s_eq(argexprs[i], Const(v))
                for (i, _), v in zip(dims, combo)])
            expr = s_ite(cond, read(args_for(combo)), expr)
        return expr
    if isinstance(term, Not):
        return s_not(sym_eval(term.operand, program, locmap, env))
    if isinstance(term, And):
        return s_and(sym_eval(term.left, program, locmap, env),
                     sym_eval(term.right, program, locmap, env))
    if isinstance(term, Or):
        return s_or(sym_eval(term.left, program, locmap, env),
                    sym_eval(term.right, program, locmap, env))
    if isinstance(term, Eq):
        return s_eq(sym_eval(term.left, program, locmap, env),
                    sym_eval(term.right, program, locmap, env))
    if isinstance(term, Member):
        return s_member(sym_eval(term.item, program, locmap, env), term.values)
    if isinstance(term, Ite):
        return s_ite(sym_eval(term.cond, program, locmap, env),
                     sym_eval(term.then, program, locmap, env),
                     sym_eval(term.other, program, locmap, env))
    raise CasmError(f"cannot evaluate {type(term).__name__} symbolically")


@dataclass
class PathedSymState:
    """One symbolic execution path: its condition and successor map."""

    path_cond: Term
    loc_map: dict[Location, Term]
    updated: frozenset[Location]
    merged_from: tuple[int, ...] = ()

    @property
    def stutter(self) -> bool:
        return not self.updated


def symbolic_step(program: Program, init: Optional[SymInit] = None,
                  ctl_abstraction: bool = True) -> list[PathedSymState]:
    """All feasible one-step paths from the symbolic initial state.

    With ``ctl_abstraction`` on, every write to the control-state
    function stores one shared fresh symbol instead of its right-hand
    side, so the analysis is independent of how the next control state
    is actually produced.  Combinations where no rule fires appear as
    stutter paths whose successor map is the initial one.
    """
    if init is None:
        init = SymInit.for_program(program)
    locmap0 = dict(init.sym_val)
    for loc in locations_of_interest(program):
        if loc not in locmap0:
            raise CasmError(f"symbolic seed misses location {loc[0]}{loc[1]!r}")

    ctl_loc = program.ctl_loc
    next_sym_holder: list[Optional[Symbol]] = [None]

    def next_ctl_symbol() -> Term:
        if next_sym_holder[0] is None:
            base = init.base_symbols.get(ctl_loc)
            name = f"{base.name}_next" if base is not None else "ctl_next"
            next_sym_holder[0] = init.namer.named(name, program.ctl.result)
        return SymRef(next_sym_holder[0])

    paths: list[PathedSymState] = []

    def feasible(conds: list[Term]) -> bool:
        f = and_all(conds)
        return satisfiable(f, program)

    def finalize(conds: list[Term],
                 updates: list[tuple[Location, Term]]) -> None:
        cond = simplify_formula(and_all(conds), program)
        merged: dict[Location, Term] = {}
        for loc, expr in updates:
            if loc in merged and merged[loc] != expr:
                disagree = s_and(and_all(conds),
                                 s_not(s_eq(merged[loc], expr)))
                if satisfiable(disagree, program):
                    raise SymbolicInconsistency(loc)
            else:
                merged[loc] = expr
        locmap = dict(locmap0)
        locmap.update(merged)
        paths.append(PathedSymState(cond, locmap, frozenset(merged)))

    def walk(items: list, conds: list[Term],
             updates: list[tuple[Location, Term]]) -> None:
        if not items:
            finalize(conds, updates)
            return
        (node, env), rest = items[0], items[1:]
        if isinstance(node, Update):
            argexprs = [sym_eval(a, program, locmap0, env) for a in node.args]
            if not all(isinstance(e, Const) for e in argexprs):
                raise UnsupportedConstruct(
                    f"update to {node.fn} with a symbolic argument")
            loc = (node.fn, tuple(e.value for e in argexprs))
            if loc == ctl_loc and ctl_abstraction:
                rhs = next_ctl_symbol()
            else:
                rhs = simplify_formula(
                    sym_eval(node.rhs, program, locmap0, env), program)
            walk(rest, conds, updates + [(loc, rhs)])
        elif isinstance(node, Cond):
            guard = simplify_formula(
                sym_eval(node.guard, program, locmap0, env), program)
            if guard == TRUE:
                walk([(r, env) for r in node.then_rules] + rest, conds, updates)
                return
            if guard == FALSE:
                walk([(r, env) for r in node.else_rules] + rest, conds, updates)
                return
            pos = conds + [guard]
            if feasible(pos):
                walk([(r, env) for r in node.then_rules] + rest, pos, updates)
            neg = conds + [s_not(guard)]
            if feasible(neg):
                walk([(r, env) for r in node.else_rules] + rest, neg, updates)
        elif isinstance(node, Par):
            walk([(r, env) for r in node.rules] + rest, conds, updates)
        elif isinstance(node, Choose):
            if node.candidates.sort_name is None and not node.candidates.values:
                raise UnsupportedConstruct("empty candidate set in choose")
            values = node.candidates.resolve(program)
            sorts = {program.value_sort(v) for v in values}
            sorts.discard(None)
            sort = sorts.pop() if len(sorts) == 1 else program.ctl.result
            sym = init.namer.fresh(sort)
            inner = dict(env)
            inner[node.var] = SymRef(sym)
            constraint = s_member(SymRef(sym), values)
            new_conds = conds if constraint == TRUE else conds + [constraint]
            walk([(r, inner) for r in node.body] + rest, new_conds, updates)
        elif isinstance(node, Let):
            inner = dict(env)
            inner[node.var] = sym_eval(node.binding, program, locmap0, env)
            walk([(r, inner) for r in node.body] + rest, conds, updates)
        elif isinstance(node, Call):
            target = program.named_rule(node.name)
            inner = {p: sym_eval(a, program, locmap0, env)
                     for (p, _), a in zip(target.params, node.args)}
            walk([(r, inner) for r in target.body] + rest, conds, updates)
        elif isinstance(node, ChooseCtl):
            walk(rest, conds, updates + [(ctl_loc, next_ctl_symbol())])
        else:
            raise CasmError(f"cannot execute {type(node).__name__}")

    items = [(r, {}) for nr in program.main_rules for r in nr.body]
    walk(items, [], [])
    return paths


def merge_successors(paths: list[PathedSymState]) -> list[PathedSymState]:
    """Merge paths with structurally equal successor maps; the merged
    condition is the simplified disjunction of the group's conditions."""
    groups: dict[frozenset, list[int]] = {}
    order: list[frozenset] = []
    for i, p in enumerate(paths):
        key = frozenset(p.loc_map.items())
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    out: list[PathedSymState] = []
    for key in order:
        idxs = groups[key]
        members = [paths[i] for i in idxs]
        cond = simplify_formula(or_all([m.path_cond for m in members]))
        updated = frozenset().union(*(m.updated for m in members))
        out.append(PathedSymState(cond, dict(members[0].loc_map), updated,
                                  tuple(idxs)))
    return out


# ---------------------------------------------------------------------------
# Symbol elimination and back-substitution
# ---------------------------------------------------------------------------

def elim_bool_symbol(f: Term, symbol: Symbol,
                     program: Optional[Program] = None) -> Term:
    """Existential elimination of a boolean symbol:
    simplify(f[s:=true] or f[s:=false])."""
    if symbol.sort.kind != "bool":
        raise CasmError(f"{symbol.name} is not boolean")
    return elim_symbol(f, symbol, program)


def elim_symbol(f: Term, symbol: Symbol,
                program: Optional[Program] = None) -> Term:
    out = simplify_formula(_elim(f, symbol), program)
    if ORACLE_CHECK:
        witnessed = or_all([subst_symbol(f, symbol, Const(v))
                            for v in symbol.sort.values()])
        _oracle_check(witnessed, out, program)
    return out


def _elim(f: Term, symbol: Symbol) -> Term:
    """Existential elimination, distributed over the formula structure:
    disjuncts are eliminated independently and conjuncts not mentioning
    the symbol are kept outside the expansion."""
    if symbol not in free_symbols_in(f):
        return f
    if isinstance(f, Or):
        return or_all([_elim(d, symbol) for d in _flatten(f, Or)])
    if isinstance(f, And):
        parts = _flatten(f, And)
        inside = [p for p in parts if symbol in free_symbols_in(p)]
        outside = [p for p in parts if symbol not in free_symbols_in(p)]
        if outside:
            return and_all(outside + [_elim(and_all(inside), symbol)])
    return or_all([subst_symbol(f, symbol, Const(v))
                   for v in symbol.sort.values()])


def substitute_initial_terms(f: Term, init: SymInit,
                             include: Optional[set[Location]] = None) -> Term:
    """Replace symbolic values by the location terms that held them
    initially.  Whole correlated images (for example a negated symbol)
    are matched before bare symbols, so a location that was seeded with
    ``not s`` wins over negating the location that was seeded with ``s``.
    """
    images: dict[Term, Term] = {}
    direct: dict[Symbol, Location] = {}
    negated: dict[Symbol, Location] = {}
    for loc, expr in init.sym_val.items():
        if include is not None and loc not in include:
            continue
        if not free_symbols_in(expr):
            continue
        images.setdefault(expr, location_term(loc))
        if isinstance(expr, SymRef):
            direct.setdefault(expr.symbol, loc)
        elif isinstance(expr, Not) and isinstance(expr.operand, SymRef):
            negated.setdefault(expr.operand.symbol, loc)

    def walk(t: Term) -> Term:
        hit = images.get(t)
        if hit is not None:
            return hit
        if isinstance(t, SymRef):
            if t.symbol in direct:
                return location_term(direct[t.symbol])
            if t.symbol in negated:
                return Not(location_term(negated[t.symbol]))
            raise UnhousedSymbol(t.symbol)
        if isinstance(t, Not):
            return s_not(walk(t.operand))
        if isinstance(t, And):
            return s_and(walk(t.left), walk(t.right))
        if isinstance(t, Or):
            return s_or(walk(t.left), walk(t.right))
        if isinstance(t, Eq):
            return s_eq(walk(t.left), walk(t.right))
        if isinstance(t, Member):
            return s_member(walk(t.item), t.values)
        if isinstance(t, Ite):
            return s_ite(walk(t.cond), walk(t.then), walk(t.other))
        return t

    return walk(f)


def free_symbols_in(term: Term) -> set[Symbol]:
    if isinstance(term, SymRef):
        return {term.symbol}
    out: set[Symbol] = set()
    for c in children(term):
        out |= free_symbols_in(c)
    return out


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def format_symexpr(term: Term) -> str:
    from .parser import format_term

    def devar(t: Term) -> Term:
        if isinstance(t, SymRef):
            return Var(t.symbol.name)
        if isinstance(t, App):
            return App(t.fn, tuple(devar(a) for a in t.args))
        if isinstance(t, Not):
            return Not(devar(t.operand))
        if isinstance(t, And):
            return And(devar(t.left), devar(t.right))
        if isinstance(t, Or):
            return Or(devar(t.left), devar(t.right))
        if isinstance(t, Eq):
            return Eq(devar(t.left), devar(t.right))
        if isinstance(t, Member):
            return Member(devar(t.item), t.values)
        if isinstance(t, Ite):
            return Ite(devar(t.cond), devar(t.then), devar(t.other))
        return t

    return format_term(devar(term))
