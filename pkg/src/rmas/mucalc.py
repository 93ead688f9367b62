"""First-order mu-calculus with location atoms over a finite transition system.

Properties query named agents' databases (`R@a(x, y)`), quantify over objects
live in the current state, and wrap modal steps in liveness guards so that
quantified data survives exactly as long as it persists in some database.
Fixpoints are computed by Kleene iteration over sets of (state, assignment)
pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .data import AGENT_TYPE, INST_NAME, Database, DataObject, carrier_less, carrier_succ, mk_symbol
from . import model as M
from .builder import TransitionSystem
from .dsl import KEYWORDS, ParseError, Token, TokenStream, tokenize, _raw_const, _resolve_literal
from .model import RmasSpec, initial_data_domain
from .queries import Const, Term, Var, lessthan_rel
from .shallow import is_accessory


class PropError(Exception):
    pass


class NonMonotoneFixpoint(PropError):
    pass


class UnguardedModalVariables(PropError):
    pass


class SuccNotFlattenable(PropError):
    pass


# ---------------------------------------------------------------------------
# AST


class Prop:
    pass


@dataclass(frozen=True)
class LocAtom(Prop):
    """R(terms)@loc: the relation holds in the database of the located agent."""

    name: str
    terms: tuple[Term, ...]
    loc: Term


@dataclass(frozen=True)
class CmpAtom(Prop):
    """Equality or order comparison between two terms."""

    op: str  # "eq" | "less" | "lessfact" | "succ"
    type_name: Optional[str]
    left: Term
    right: Term


@dataclass(frozen=True)
class LiveAtom(Prop):
    type_name: str
    var: str


@dataclass(frozen=True)
class PTrue(Prop):
    pass


@dataclass(frozen=True)
class PNot(Prop):
    body: Prop


@dataclass(frozen=True)
class PAnd(Prop):
    parts: tuple[Prop, ...]


@dataclass(frozen=True)
class POr(Prop):
    parts: tuple[Prop, ...]


@dataclass(frozen=True)
class PExists(Prop):
    var: str
    type_name: str
    body: Prop


@dataclass(frozen=True)
class PForall(Prop):
    var: str
    type_name: str
    body: Prop


@dataclass(frozen=True)
class PVar(Prop):
    name: str


@dataclass(frozen=True)
class PMu(Prop):
    var: str
    body: Prop


@dataclass(frozen=True)
class PNu(Prop):
    var: str
    body: Prop


@dataclass(frozen=True)
class PDiamond(Prop):
    guards: tuple[tuple[str, str], ...]  # (var, type): live guards on the step
    body: Prop


@dataclass(frozen=True)
class PBox(Prop):
    guards: tuple[tuple[str, str], ...]
    body: Prop


def p_and(*parts: Prop) -> Prop:
    flat = [p for p in parts if not isinstance(p, PTrue)]
    if not flat:
        return PTrue()
    if len(flat) == 1:
        return flat[0]
    return PAnd(tuple(flat))


def p_or(*parts: Prop) -> Prop:
    if len(parts) == 1:
        return parts[0]
    return POr(tuple(parts))


def children(p: Prop) -> tuple[Prop, ...]:
    if isinstance(p, (PAnd, POr)):
        return p.parts
    if isinstance(p, PNot):
        return (p.body,)
    if isinstance(p, (PExists, PForall, PMu, PNu, PDiamond, PBox)):
        return (p.body,)
    return ()


def free_vars_plus(p: Prop, binder_fv: dict[str, frozenset[str]]) -> frozenset[str]:
    """Free first-order variables, substituting bounding formulas for
    fixpoint variables (binder_fv maps Z to the fv of its binder body)."""
    if isinstance(p, LocAtom):
        out = {t.name for t in p.terms if isinstance(t, Var)}
        if isinstance(p.loc, Var):
            out.add(p.loc.name)
        return frozenset(out)
    if isinstance(p, CmpAtom):
        return frozenset(t.name for t in (p.left, p.right) if isinstance(t, Var))
    if isinstance(p, LiveAtom):
        return frozenset({p.var})
    if isinstance(p, PVar):
        return binder_fv.get(p.name, frozenset())
    if isinstance(p, (PExists, PForall)):
        return free_vars_plus(p.body, binder_fv) - {p.var}
    out: frozenset[str] = frozenset()
    for c in children(p):
        out |= free_vars_plus(c, binder_fv)
    return out


def compute_binder_fv(p: Prop) -> dict[str, frozenset[str]]:
    binder_fv: dict[str, frozenset[str]] = {}

    def binders(p: Prop) -> Iterator[tuple[str, Prop]]:
        if isinstance(p, (PMu, PNu)):
            yield (p.var, p.body)
        for c in children(p):
            yield from binders(c)

    pairs = list(binders(p))
    for v, _ in pairs:
        binder_fv[v] = frozenset()
    for _ in range(len(pairs) + 1):
        changed = False
        for v, body in pairs:
            fv = free_vars_plus(body, binder_fv)
            if fv != binder_fv[v]:
                binder_fv[v] = fv
                changed = True
        if not changed:
            break
    return binder_fv


# ---------------------------------------------------------------------------
# Parsing


class PropParser:
    def __init__(self, text: str, spec: RmasSpec) -> None:
        self.spec = spec
        self.union_schema = spec.union_schema()
        tokens = [t for t in _merge_modal_tokens(tokenize(text)) if t.kind != "newline"]
        self.ts = TokenStream(tokens)
        self.consts: dict[str, DataObject] = {INST_NAME: mk_symbol(AGENT_TYPE, INST_NAME)}
        for name, _ in spec.initial_agents:
            self.consts[name] = mk_symbol(AGENT_TYPE, name)
        for sname in spec.agent_specs:
            self.consts[sname] = mk_symbol("spec", sname)
        self.fix_bound: list[str] = []
        self._anon = 0

    def parse(self) -> Prop:
        p = self.parse_prop()
        t = self.ts.peek()
        if t.kind != "eof":
            raise ParseError(f"unexpected {t.value!r} after formula", t.line, t.col)
        return p

    def parse_prop(self) -> Prop:
        ts = self.ts
        if ts.at("mu") or ts.at("nu"):
            kw = ts.next().value
            var = ts.expect_ident().value
            ts.expect(".")
            self.fix_bound.append(var)
            body = self.parse_prop()
            self.fix_bound.pop()
            return PMu(var, body) if kw == "mu" else PNu(var, body)
        if ts.at("exists") or ts.at("forall"):
            kw = ts.next().value
            names: list[tuple[str, Optional[str]]] = []
            while True:
                v = ts.expect_ident().value
                t = None
                if ts.accept(":"):
                    t = ts.expect_ident().value
                    if t not in self.spec.types:
                        raise ParseError(f"unknown type {t!r}")
                names.append((v, t))
                if not ts.accept(","):
                    break
            ts.expect(".")
            body = self.parse_prop()
            for v, t in reversed(names):
                node = PExists(v, t or "?", body) if kw == "exists" else PForall(v, t or "?", body)
                body = node
            return body
        return self.parse_implies()

    def parse_implies(self) -> Prop:
        lhs = self.parse_or()
        if self.ts.accept("->"):
            rhs = self.parse_prop()
            return p_or(PNot(lhs), rhs)
        return lhs

    def parse_or(self) -> Prop:
        parts = [self.parse_and()]
        while self.ts.accept("|"):
            parts.append(self.parse_and())
        return p_or(*parts)

    def parse_and(self) -> Prop:
        parts = [self.parse_unary()]
        while self.ts.accept("&"):
            parts.append(self.parse_unary())
        return p_and(*parts)

    def parse_unary(self) -> Prop:
        ts = self.ts
        if ts.accept("!") or ts.accept("not"):
            return PNot(self.parse_unary())
        if ts.accept("<>"):
            return PDiamond((), self.parse_unary())
        if ts.accept("[]"):
            return PBox((), self.parse_unary())
        if ts.accept("("):
            p = self.parse_prop()
            ts.expect(")")
            return p
        return self.parse_atom()

    def parse_atom(self) -> Prop:
        ts = self.ts
        t = ts.peek()
        if ts.accept("true"):
            return PTrue()
        if ts.accept("false"):
            return PNot(PTrue())
        if ts.accept("live"):
            ts.expect("[")
            ty = ts.expect_ident().value
            if ty not in self.spec.types:
                raise ParseError(f"unknown type {ty!r}")
            ts.expect("]")
            ts.expect("(")
            v = ts.expect_ident().value
            ts.expect(")")
            return LiveAtom(ty, v)
        if t.kind == "ident" and t.value not in KEYWORDS:
            nxt = ts.peek(1).value
            if nxt == "@":
                return self.parse_located()
            if t.value in self.fix_bound and nxt not in ("(", "@", "=", "!=", "<", ">"):
                ts.next()
                return PVar(t.value)
        left = self.parse_term()
        for op in ("=", "!=", "<", ">"):
            if ts.accept(op):
                right = self.parse_term()
                if op == "=":
                    return CmpAtom("eq", None, left, right)
                if op == "!=":
                    return PNot(CmpAtom("eq", None, left, right))
                if op == "<":
                    return CmpAtom("less", None, left, right)
                return CmpAtom("less", None, right, left)
        tok = ts.peek()
        raise ParseError(f"expected an atom, found {tok.value!r}", tok.line, tok.col)

    def parse_located(self) -> Prop:
        ts = self.ts
        name = ts.expect_ident().value
        if is_accessory(name):
            raise ParseError(f"accessory relation {name!r} cannot appear in properties")
        ts.expect("@")
        loc_tok = ts.expect_ident()
        loc: Term = Var(loc_tok.value)
        terms: list[Term] = []
        if ts.accept("("):
            while not ts.at(")"):
                terms.append(self.parse_term())
                if not ts.accept(","):
                    break
            ts.expect(")")
        return LocAtom(name, tuple(terms), loc)

    def parse_term(self) -> Term:
        ts = self.ts
        t = ts.peek()
        if t.kind in ("number", "string"):
            ts.next()
            return _raw_const(t)
        if t.kind == "ident" and t.value not in KEYWORDS:
            ts.next()
            return Var(t.value)
        raise ParseError(f"expected a term, found {t.value!r}", t.line, t.col)


def _merge_modal_tokens(tokens: list[Token]) -> list[Token]:
    out: list[Token] = []
    i = 0
    while i < len(tokens):
        a = tokens[i]
        b = tokens[i + 1] if i + 1 < len(tokens) else None
        if b is not None and b.line == a.line and b.col == a.col + 1:
            if a.value == "<" and b.value == ">":
                out.append(Token("op", "<>", a.line, a.col))
                i += 2
                continue
            if a.value == "[" and b.value == "]":
                out.append(Token("op", "[]", a.line, a.col))
                i += 2
                continue
        out.append(a)
        i += 1
    return out


# ---------------------------------------------------------------------------
# Resolution: constants, types, guards, monotonicity


class _PropResolver:
    def __init__(self, parser: PropParser) -> None:
        self.p = parser
        self.spec = parser.spec
        self.var_types: dict[str, str] = {}

    def resolve(self, prop: Prop) -> Prop:
        prop = self._convert_names(prop, frozenset())
        self._check_monotone(prop)
        for _ in range(4):
            before = dict(self.var_types)
            self._infer(prop, {})
            if self.var_types == before:
                break
        prop = self._finish(prop)
        binder_fv = compute_binder_fv(prop)
        prop = self._guard_modalities(prop, binder_fv, guards=frozenset())
        return prop

    # name -> constant conversion, respecting quantifier scope
    def _convert_names(self, p: Prop, bound: frozenset[str]) -> Prop:
        def conv(t: Term) -> Term:
            if isinstance(t, Var) and t.name not in bound and t.name in self.p.consts:
                return Const(self.p.consts[t.name])
            return t

        if isinstance(p, LocAtom):
            return LocAtom(p.name, tuple(conv(t) for t in p.terms), conv(p.loc))
        if isinstance(p, CmpAtom):
            return CmpAtom(p.op, p.type_name, conv(p.left), conv(p.right))
        if isinstance(p, (PExists, PForall)):
            return type(p)(p.var, p.type_name, self._convert_names(p.body, bound | {p.var}))
        if isinstance(p, PNot):
            return PNot(self._convert_names(p.body, bound))
        if isinstance(p, PAnd):
            return PAnd(tuple(self._convert_names(c, bound) for c in p.parts))
        if isinstance(p, POr):
            return POr(tuple(self._convert_names(c, bound) for c in p.parts))
        if isinstance(p, (PMu, PNu)):
            return type(p)(p.var, self._convert_names(p.body, bound))
        if isinstance(p, (PDiamond, PBox)):
            return type(p)(p.guards, self._convert_names(p.body, bound))
        return p

    def _check_monotone(self, p: Prop, positive: bool = True) -> None:
        if isinstance(p, PVar):
            if not positive:
                raise NonMonotoneFixpoint(
                    f"fixpoint variable {p.name!r} under an odd number of negations")
            return
        if isinstance(p, PNot):
            self._check_monotone(p.body, not positive)
            return
        for c in children(p):
            self._check_monotone(c, positive)

    def _note(self, v: str, t: str) -> None:
        old = self.var_types.get(v)
        if old is not None and old != t:
            raise PropError(f"variable {v!r} used at types {old} and {t}")
        self.var_types[v] = t

    def _infer(self, p: Prop, bound: dict[str, str]) -> None:
        if isinstance(p, LocAtom):
            rs = self.p.union_schema.get(p.name)
            if rs is None:
                raise PropError(f"unknown relation {p.name!r}")
            if len(p.terms) != rs.arity:
                raise PropError(f"relation {p.name!r} used with wrong arity")
            if isinstance(p.loc, Var):
                self._note(p.loc.name, AGENT_TYPE)
            for t, fname in zip(p.terms, rs.facets):
                if isinstance(t, Var):
                    self._note(t.name, self.spec.facets[fname].base_type)
            return
        if isinstance(p, CmpAtom):
            tt = p.type_name
            for side in (p.left, p.right):
                if isinstance(side, Var) and side.name in self.var_types:
                    tt = tt or self.var_types[side.name]
                if isinstance(side, Const) and not side.obj.type_name.startswith("?"):
                    tt = tt or side.obj.type_name
            if tt:
                for side in (p.left, p.right):
                    if isinstance(side, Var):
                        self._note(side.name, tt)
            return
        if isinstance(p, LiveAtom):
            self._note(p.var, p.type_name)
            return
        if isinstance(p, (PExists, PForall)):
            if p.type_name != "?":
                self._note(p.var, p.type_name)
            self._infer(p.body, bound)
            return
        for c in children(p):
            self._infer(c, bound)

    def _finish(self, p: Prop) -> Prop:
        if isinstance(p, LocAtom):
            rs = self.p.union_schema[p.name]
            terms = []
            for t, fname in zip(p.terms, rs.facets):
                terms.append(self._finish_term(t, self.spec.facets[fname].base_type))
            loc = self._finish_term(p.loc, AGENT_TYPE)
            return LocAtom(p.name, tuple(terms), loc)
        if isinstance(p, CmpAtom):
            tt = p.type_name
            for side in (p.left, p.right):
                if isinstance(side, Var):
                    tt = tt or self.var_types.get(side.name)
                elif not side.obj.type_name.startswith("?"):
                    tt = tt or side.obj.type_name
            if tt is None:
                raise PropError(f"cannot infer the type of a comparison")
            if p.op in ("less", "lessfact") and not self.spec.types[tt].has_less:
                raise PropError(f"type {tt!r} has no dense order")
            return CmpAtom(p.op, tt, self._finish_term(p.left, tt),
                           self._finish_term(p.right, tt))
        if isinstance(p, (PExists, PForall)):
            t = p.type_name if p.type_name != "?" else self.var_types.get(p.var)
            if t is None:
                raise PropError(f"cannot infer the type of quantified variable {p.var!r}")
            return type(p)(p.var, t, self._finish(p.body))
        if isinstance(p, PNot):
            return PNot(self._finish(p.body))
        if isinstance(p, PAnd):
            return PAnd(tuple(self._finish(c) for c in p.parts))
        if isinstance(p, POr):
            return POr(tuple(self._finish(c) for c in p.parts))
        if isinstance(p, (PMu, PNu)):
            return type(p)(p.var, self._finish(p.body))
        if isinstance(p, (PDiamond, PBox)):
            return type(p)(p.guards, self._finish(p.body))
        return p

    def _finish_term(self, t: Term, type_name: str) -> Term:
        if isinstance(t, Const) and t.obj.type_name.startswith("?"):
            return Const(_resolve_literal(t.obj, type_name, self.spec.types))
        if isinstance(t, Var) and t.name not in self.var_types:
            self.var_types[t.name] = type_name
        return t

    # attach live guards to modalities; reject unguarded free variables
    def _guard_modalities(self, p: Prop, binder_fv, guards: frozenset[str]) -> Prop:
        if isinstance(p, PAnd):
            local = guards | self._guarded_by(p.parts)
            return PAnd(tuple(self._guard_modalities(c, binder_fv, local) for c in p.parts))
        if isinstance(p, (PDiamond, PBox)):
            need = sorted(free_vars_plus(p.body, binder_fv))
            missing = [v for v in need if v not in guards]
            if missing:
                raise UnguardedModalVariables(
                    f"variables {missing} are free under a modality but not "
                    f"guarded by a conjoined live or positive atom")
            gs = tuple((v, self.var_types[v]) for v in need)
            return type(p)(gs, self._guard_modalities(p.body, binder_fv, frozenset()))
        if isinstance(p, PNot):
            return PNot(self._guard_modalities(p.body, binder_fv, frozenset()))
        if isinstance(p, POr):
            return POr(tuple(self._guard_modalities(c, binder_fv, frozenset()) for c in p.parts))
        if isinstance(p, (PExists, PForall)):
            return type(p)(p.var, p.type_name,
                           self._guard_modalities(p.body, binder_fv, guards))
        if isinstance(p, (PMu, PNu)):
            return type(p)(p.var, self._guard_modalities(p.body, binder_fv, guards))
        return p

    def _guarded_by(self, parts: Iterable[Prop]) -> frozenset[str]:
        out: set[str] = set()
        for part in parts:
            if isinstance(part, LocAtom):
                out |= {t.name for t in part.terms if isinstance(t, Var)}
                if isinstance(part.loc, Var):
                    out.add(part.loc.name)
            elif isinstance(part, LiveAtom):
                out.add(part.var)
            elif isinstance(part, PAnd):
                out |= self._guarded_by(part.parts)
        return frozenset(out)


def parse_property(text: str, spec: RmasSpec) -> Prop:
    """Parse and normalize a property; raises on syntax errors, non-monotone
    fixpoints, and unguarded modal variables."""
    parser = PropParser(text, spec)
    raw = parser.parse()
    return _PropResolver(parser).resolve(raw)


def flatten_property(p: Prop) -> Prop:
    """Rewrite rigid dense comparisons to lessThan fact atoms."""
    if isinstance(p, CmpAtom):
        if p.op == "less":
            return CmpAtom("lessfact", p.type_name, p.left, p.right)
        if p.op == "succ":
            raise SuccNotFlattenable("succ atoms cannot be flattened")
        return p
    if isinstance(p, PNot):
        return PNot(flatten_property(p.body))
    if isinstance(p, PAnd):
        return PAnd(tuple(flatten_property(c) for c in p.parts))
    if isinstance(p, POr):
        return POr(tuple(flatten_property(c) for c in p.parts))
    if isinstance(p, (PExists, PForall)):
        return type(p)(p.var, p.type_name, flatten_property(p.body))
    if isinstance(p, (PMu, PNu)):
        return type(p)(p.var, flatten_property(p.body))
    if isinstance(p, (PDiamond, PBox)):
        return type(p)(p.guards, flatten_property(p.body))
    return p


# ---------------------------------------------------------------------------
# Model checking


@dataclass
class Verdict:
    truth: bool
    extension: frozenset = frozenset()
    iterations: int = 0


class ModelChecker:
    def __init__(self, ts: TransitionSystem, spec: RmasSpec) -> None:
        self.ts = ts
        self.spec = spec
        self.const_domain = initial_data_domain(spec)
        self.inst = mk_symbol(AGENT_TYPE, INST_NAME)
        self.n = len(ts.states)
        self.succ: dict[int, list[int]] = {i: [] for i in range(self.n)}
        for a, b in ts.edges:
            self.succ[a].append(b)
        # global object universe per type: everything stored anywhere plus
        # the initial constants
        self.universe: dict[str, list[DataObject]] = {}
        objs: dict[str, set[DataObject]] = {}
        for t, cs in self.const_domain.items():
            objs.setdefault(t, set()).update(cs)
        for s in ts.states:
            for o in s.adom():
                objs.setdefault(o.type_name, set()).add(o)
        for t, os in objs.items():
            self.universe[t] = sorted(os, key=DataObject.sort_key)
        # live objects per (state, type): the current active domain
        self.live: list[dict[str, set[DataObject]]] = []
        for s in ts.states:
            per: dict[str, set[DataObject]] = {}
            for o in s.adom():
                per.setdefault(o.type_name, set()).add(o)
            self.live.append(per)
        self.active: list[set[DataObject]] = []
        for s in ts.states:
            inst_db = s.db(self.inst)
            agents = {args[0] for args in inst_db.facts_for(M.AGENT_REL)} if inst_db else set()
            self.active.append(agents)
        self._atom_cache: dict = {}
        self.iterations = 0

    # -- spaces ----------------------------------------------------------------

    def _space(self, dom: tuple[str, ...], var_types: dict[str, str]) -> set:
        pools = [self.universe.get(var_types[v], []) for v in dom]
        out = set()
        for sid in range(self.n):
            for combo in itertools.product(*pools):
                out.add((sid, combo))
        return out

    # -- atoms -------------------------------------------------------------------

    def _atom_rows(self, atom: Prop) -> dict[int, list[dict[str, DataObject]]]:
        key = id(atom)
        rows = self._atom_cache.get(key)
        if rows is not None:
            return rows
        rows = {sid: self._atom_rows_at(atom, sid) for sid in range(self.n)}
        self._atom_cache[key] = rows
        return rows

    def _atom_rows_at(self, atom: Prop, sid: int) -> list[dict[str, DataObject]]:
        s = self.ts.states[sid]
        out: list[dict[str, DataObject]] = []
        if isinstance(atom, LocAtom):
            if isinstance(atom.loc, Const):
                candidates = [atom.loc.obj]
            else:
                candidates = sorted(self.active[sid], key=DataObject.sort_key)
            for agent in candidates:
                if agent not in self.active[sid]:
                    continue
                db = s.db(agent)
                if db is None:
                    continue
                for args in db.facts_for(atom.name):
                    theta: dict[str, DataObject] = {}
                    if isinstance(atom.loc, Var):
                        theta[atom.loc.name] = agent
                    ok = True
                    for t, obj in zip(atom.terms, args):
                        if isinstance(t, Const):
                            if t.obj != obj:
                                ok = False
                                break
                        else:
                            prev = theta.get(t.name)
                            if prev is None:
                                theta[t.name] = obj
                            elif prev != obj:
                                ok = False
                                break
                    if ok:
                        out.append(theta)
            return _dedup(out)
        if isinstance(atom, LiveAtom):
            return [{atom.var: o} for o in sorted(self.live[sid].get(atom.type_name, ()),
                                                  key=DataObject.sort_key)]
        if isinstance(atom, CmpAtom):
            pools: list[list[DataObject]] = []
            vars_: list[str] = []
            for side in (atom.left, atom.right):
                if isinstance(side, Var) and side.name not in vars_:
                    vars_.append(side.name)
                    pools.append(self.universe.get(atom.type_name, []))
            for combo in itertools.product(*pools):
                theta = dict(zip(vars_, combo))
                a = theta[atom.left.name] if isinstance(atom.left, Var) else atom.left.obj
                b = theta[atom.right.name] if isinstance(atom.right, Var) else atom.right.obj
                if self._cmp(atom, a, b, sid):
                    out.append(theta)
            return out
        raise PropError(f"not an atom: {atom!r}")

    def _cmp(self, atom: CmpAtom, a: DataObject, b: DataObject, sid: int) -> bool:
        if atom.op == "eq":
            return a == b
        if atom.op == "less":
            return carrier_less(a, b)
        if atom.op == "succ":
            return carrier_succ(a, b)
        # lessfact: consult the state's order database
        order_db = self.ts.states[sid].order_db or Database()
        if a == b:
            return False
        return order_db.has(lessthan_rel(atom.type_name), (a, b))

    # -- evaluation -----------------------------------------------------------------

    def eval(self, p: Prop, dom: tuple[str, ...], var_types: dict[str, str],
             env: dict[str, tuple[tuple[str, ...], set]]) -> set:
        if isinstance(p, PTrue):
            return self._space(dom, var_types)
        if isinstance(p, (LocAtom, CmpAtom, LiveAtom)):
            rows = self._atom_rows(p)
            out = set()
            missing_pools = {
                v: self.universe.get(var_types[v], []) for v in dom
            }
            for sid, thetas in rows.items():
                for theta in thetas:
                    pools = [
                        [theta[v]] if v in theta else missing_pools[v] for v in dom
                    ]
                    for combo in itertools.product(*pools):
                        out.add((sid, combo))
            return out
        if isinstance(p, PNot):
            return self._space(dom, var_types) - self.eval(p.body, dom, var_types, env)
        if isinstance(p, PAnd):
            out = None
            for c in p.parts:
                e = self.eval(c, dom, var_types, env)
                out = e if out is None else out & e
            return out if out is not None else self._space(dom, var_types)
        if isinstance(p, POr):
            out: set = set()
            for c in p.parts:
                out |= self.eval(c, dom, var_types, env)
            return out
        if isinstance(p, (PExists, PForall)):
            inner_dom = dom + (p.var,)
            vt = dict(var_types)
            vt[p.var] = p.type_name
            body = self.eval(p.body, inner_dom, vt, env)
            out = set()
            if isinstance(p, PExists):
                for (sid, combo) in body:
                    if combo[-1] in self.live[sid].get(p.type_name, ()):
                        out.add((sid, combo[:-1]))
                return out
            # forall: live-relativized universal quantification
            for sid in range(self.n):
                live = sorted(self.live[sid].get(p.type_name, ()), key=DataObject.sort_key)
                pools = [self.universe.get(var_types[v], []) for v in dom]
                for combo in itertools.product(*pools):
                    if all((sid, combo + (o,)) in body for o in live):
                        out.add((sid, combo))
            return out
        if isinstance(p, (PDiamond, PBox)):
            body = self.eval(p.body, dom, var_types, env)
            out = set()
            pos = {v: i for i, v in enumerate(dom)}
            for sid in range(self.n):
                nxt = self.succ.get(sid, [])
                pools = [self.universe.get(var_types[v], []) for v in dom]
                for combo in itertools.product(*pools):
                    ok = True
                    for v, t in p.guards:
                        if combo[pos[v]] not in self.live[sid].get(t, ()):
                            ok = False
                            break
                    if not ok:
                        continue
                    if isinstance(p, PDiamond):
                        if any((n2, combo) in body for n2 in nxt):
                            out.add((sid, combo))
                    else:
                        if all((n2, combo) in body for n2 in nxt):
                            out.add((sid, combo))
            return out
        if isinstance(p, PVar):
            bdom, ext = env[p.name]
            k = len(bdom)
            assert dom[:k] == bdom
            if len(dom) == k:
                return set(ext)
            pools = [self.universe.get(var_types[v], []) for v in dom[k:]]
            out = set()
            for (sid, combo) in ext:
                for extra in itertools.product(*pools):
                    out.add((sid, combo + extra))
            return out
        if isinstance(p, (PMu, PNu)):
            if isinstance(p, PMu):
                cur: set = set()
            else:
                cur = self._space(dom, var_types)
            while True:
                self.iterations += 1
                env2 = dict(env)
                env2[p.var] = (dom, cur)
                nxt = self.eval(p.body, dom, var_types, env2)
                if nxt == cur:
                    return cur
                cur = nxt
        raise PropError(f"unknown property node {p!r}")


def model_check(ts: TransitionSystem, spec: RmasSpec, prop: Prop) -> Verdict:
    """Evaluate a closed property at the initial state."""
    checker = ModelChecker(ts, spec)
    binder_fv = compute_binder_fv(prop)
    if free_vars_plus(prop, binder_fv):
        raise PropError("property must be closed")
    ext = checker.eval(prop, (), {}, {})
    return Verdict(
        truth=(ts.initial, ()) in ext,
        extension=frozenset(ext),
        iterations=checker.iterations,
    )


def _dedup(rows: list[dict[str, DataObject]]) -> list[dict[str, DataObject]]:
    seen = set()
    out = []
    for r in rows:
        key = tuple(sorted((k, v.sort_key()) for k, v in r.items()))
        if key not in seen:
            seen.add(key)
            out.append(r)
    return out
