"""Parser and serializer for the `.rmas` specification language.

The surface syntax is line-oriented and mirrors the rule notation used in the
literature on data-aware agents: `Q enables M(x) to t` for proactive rules,
`on M(x) from s if Q then act(args)` for reactive ones, and
`Q ~> add { ... } del { ... }` for action effects.  Newlines terminate
statements except inside parentheses; braces group spec bodies, action bodies
and fact sets.

Literals are resolved to typed data objects in a second pass driven by the
declared schemas, so `3` can denote a ticket in one component and a price in
another.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from .data import (
    AGENT_TYPE,
    INST_NAME,
    INTEGER,
    RATIONAL,
    SPEC_TYPE,
    STRING,
    SYMBOLIC,
    Database,
    DataObject,
    DataTypeDef,
    Facet,
    FacetFormula,
    FAnd,
    FAtom,
    FFalse,
    FNot,
    FOr,
    FTrue,
    TypedRelationSchema,
    UNDEF,
    X,
    builtin_types,
    literal_matches_carrier,
    mk_symbol,
    mk_undef,
)
from . import model as M
from . import queries as Q
from .model import (
    AgentSpec,
    CallTerm,
    CommRule,
    FactTemplate,
    MessageDef,
    RmasSpec,
    ServiceDef,
    UpdateAction,
    UpdateEffect,
    UpdateRule,
)
from .queries import Const, Param, Query, Term, Var


class ParseError(Exception):
    def __init__(self, msg: str, line: int = 0, col: int = 0) -> None:
        super().__init__(f"{line}:{col}: {msg}" if line else msg)
        self.line = line
        self.col = col
        self.msg = msg


class ResolutionError(ParseError):
    pass


# ---------------------------------------------------------------------------
# Tokenizer

TOKEN_RE = re.compile(
    r"""
    (?P<ws>[^\S\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>-?\d+(?:\.\d+)?(?:/\d+)?)
  | (?P<string>"[^"\n]*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>~>|->|!=|<=|>=|[(){}\[\],.:=<>!&|@_])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # ident, number, string, op, newline, eof
    value: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    pos = 0
    depth = 0
    while pos < len(text):
        m = TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        value = m.group()
        if kind == "newline":
            if depth == 0:
                tokens.append(Token("newline", value, line, col))
            line += 1
            col = 1
        else:
            if kind not in ("ws", "comment"):
                if value == "(":
                    depth += 1
                elif value == ")":
                    depth = max(0, depth - 1)
                k = "op" if kind == "op" else kind
                tokens.append(Token(k, value, line, col))
            col += len(value)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


class TokenStream:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.i = 0

    def peek(self, ahead: int = 0) -> Token:
        j = min(self.i + ahead, len(self.tokens) - 1)
        return self.tokens[j]

    def next(self) -> Token:
        t = self.peek()
        if t.kind != "eof":
            self.i += 1
        return t

    def skip_newlines(self) -> None:
        while self.peek().kind == "newline":
            self.next()

    def at(self, value: str) -> bool:
        t = self.peek()
        return t.value == value and t.kind in ("op", "ident")

    def accept(self, value: str) -> bool:
        if self.at(value):
            self.next()
            return True
        return False

    def expect(self, value: str) -> Token:
        t = self.peek()
        if not self.at(value):
            raise ParseError(f"expected {value!r}, found {t.value!r}", t.line, t.col)
        return self.next()

    def expect_ident(self) -> Token:
        t = self.peek()
        if t.kind != "ident":
            raise ParseError(f"expected identifier, found {t.value!r}", t.line, t.col)
        return self.next()

    def end_statement(self) -> None:
        t = self.peek()
        if t.kind in ("newline", "eof"):
            self.skip_newlines()
            return
        if t.value == "}":
            return
        raise ParseError(f"unexpected {t.value!r} at end of statement", t.line, t.col)


# ---------------------------------------------------------------------------
# Raw literals: typed during resolution

RAW_NUM = "?num"
RAW_STR = "?str"
RAW_UNDEF = "?undef"

KEYWORDS = {
    "type", "facet", "service", "message", "agent", "spec", "mode",
    "relation", "constraint", "init", "action", "institutional",
    "on", "from", "to", "if", "then", "enables", "add", "del",
    "exists", "forall", "true", "false", "succ", "undef", "of", "with",
    "not",
}


def _raw_const(tok: Token) -> Const:
    if tok.kind == "number":
        return Const(DataObject(RAW_NUM, Fraction(tok.value)))
    if tok.kind == "string":
        return Const(DataObject(RAW_STR, tok.value[1:-1]))
    raise ParseError(f"not a literal: {tok.value!r}", tok.line, tok.col)


def is_raw(obj: DataObject) -> bool:
    return obj.type_name.startswith("?")


# ---------------------------------------------------------------------------
# Query parsing (terms stay raw; variables may later become params/constants)


class QueryParser:
    def __init__(self, ts: TokenStream) -> None:
        self.ts = ts
        self._anon = 0
        self._minted: set[str] = set()

    def fresh_anon(self) -> str:
        self._anon += 1
        name = f"_{self._anon}"
        self._minted.add(name)
        return name

    def parse_query(self) -> Query:
        ts = self.ts
        if ts.at("exists") or ts.at("forall"):
            kw = ts.next().value
            names = [ts.expect_ident().value]
            while ts.accept(","):
                names.append(ts.expect_ident().value)
            ts.expect(".")
            body = self.parse_query()
            for name in reversed(names):
                body = Q.Exists(name, body) if kw == "exists" else Q.Forall(name, body)
            return body
        return self.parse_implies()

    def parse_implies(self) -> Query:
        lhs = self.parse_or()
        if self.ts.accept("->"):
            rhs = self.parse_query()
            return Q.q_implies(lhs, rhs)
        return lhs

    def parse_or(self) -> Query:
        parts = [self.parse_and()]
        while self.ts.accept("|"):
            parts.append(self.parse_and())
        return Q.q_or(*parts)

    def parse_and(self) -> Query:
        parts = [self.parse_unary()]
        while self.ts.accept("&"):
            parts.append(self.parse_unary())
        return Q.q_and(*parts)

    def parse_unary(self) -> Query:
        ts = self.ts
        if ts.accept("!") or ts.accept("not"):
            return Q.Not(self.parse_unary())
        if ts.accept("("):
            inner = self.parse_query()
            ts.expect(")")
            return inner
        return self.parse_atom()

    def parse_atom(self) -> Query:
        ts = self.ts
        t = ts.peek()
        if ts.accept("true"):
            return Q.TrueQ()
        if ts.accept("false"):
            return Q.q_false()
        if ts.accept("succ"):
            ts.expect("(")
            a = self.parse_term()
            ts.expect(",")
            b = self.parse_term()
            ts.expect(")")
            return self._close_anon(Q.SuccAtom(a, b), (a, b))
        if t.kind == "ident" and ts.peek(1).value == "(" and t.value not in KEYWORDS:
            name = ts.next().value
            ts.expect("(")
            terms: list[Term] = []
            if not ts.at(")"):
                terms.append(self.parse_term())
                while ts.accept(","):
                    terms.append(self.parse_term())
            ts.expect(")")
            return self._close_anon(Q.RelAtom(name, tuple(terms)), terms)
        left = self.parse_term()
        op_tok = ts.peek()
        for op in ("=", "!=", "<", ">"):
            if ts.accept(op):
                right = self.parse_term()
                pair = (left, right)
                if op == "=":
                    return self._close_anon(Q.EqAtom(left, right), pair)
                if op == "!=":
                    return self._close_anon(Q.Not(Q.EqAtom(left, right)), pair)
                if op == "<":
                    return self._close_anon(Q.LessAtom("?", left, right), pair)
                return self._close_anon(Q.LessAtom("?", right, left), pair)
        raise ParseError(f"expected comparison operator, found {op_tok.value!r}", op_tok.line, op_tok.col)

    def _close_anon(self, atom: Query, terms) -> Query:
        # "_" desugars to a fresh existential scoped to its own atom.
        for t in reversed(list(terms)):
            if isinstance(t, Var) and t.name in self._minted:
                atom = Q.Exists(t.name, atom)
                self._minted.discard(t.name)
        return atom

    def parse_term(self) -> Term:
        ts = self.ts
        t = ts.peek()
        if t.kind in ("number", "string"):
            ts.next()
            return _raw_const(t)
        if ts.accept("undef"):
            return Const(DataObject(RAW_UNDEF, UNDEF))
        if ts.accept("_"):
            return Var(self.fresh_anon())
        if t.kind == "ident" and t.value not in KEYWORDS:
            ts.next()
            return Var(t.value)
        raise ParseError(f"expected a term, found {t.value!r}", t.line, t.col)


# ---------------------------------------------------------------------------
# Facet formula parsing (restricted query over the single variable x)


def facet_formula_from_query(q: Query, base_type: str, types: dict[str, DataTypeDef]) -> FacetFormula:
    tdef = types[base_type]

    def conv_term(t: Term):
        if isinstance(t, Var):
            if t.name != "x":
                raise ResolutionError(f"facet formulas may only use the variable x, found {t.name!r}")
            return X
        if isinstance(t, Const):
            obj = _resolve_literal(t.obj, base_type, types)
            return obj
        raise ResolutionError("facet formulas may not use parameters")

    def conv(q: Query) -> FacetFormula:
        if isinstance(q, Q.TrueQ):
            return FTrue()
        if isinstance(q, Q.EqAtom):
            return FAtom("eq", conv_term(q.left), conv_term(q.right))
        if isinstance(q, Q.LessAtom):
            if not tdef.has_less:
                raise ResolutionError(f"type {base_type!r} has no dense order")
            return FAtom("less", conv_term(q.left), conv_term(q.right))
        if isinstance(q, Q.SuccAtom):
            if not tdef.has_succ:
                raise ResolutionError(f"type {base_type!r} has no successor relation")
            return FAtom("succ", conv_term(q.left), conv_term(q.right))
        if isinstance(q, Q.Not):
            if isinstance(q.body, Q.TrueQ):
                return FFalse()
            return FNot(conv(q.body))
        if isinstance(q, Q.Or):
            out = conv(q.parts[0])
            for p in q.parts[1:]:
                out = FOr(out, conv(p))
            return out
        if isinstance(q, Q.And):
            out = conv(q.parts[0])
            for p in q.parts[1:]:
                out = FAnd(out, conv(p))
            return out
        raise ResolutionError("facet formulas allow only true, atoms, !, &, |")

    return conv(q)


def _resolve_literal(obj: DataObject, type_name: str, types: dict[str, DataTypeDef]) -> DataObject:
    tdef = types.get(type_name)
    if tdef is None:
        raise ResolutionError(f"unknown type {type_name!r}")
    if obj.type_name == RAW_UNDEF:
        return mk_undef(type_name)
    if obj.type_name == RAW_NUM:
        frac = obj.value
        if tdef.carrier == INTEGER:
            if frac.denominator != 1:
                raise ResolutionError(f"literal {frac} is not an integer")
            return DataObject(type_name, int(frac))
        if tdef.carrier == RATIONAL:
            return DataObject(type_name, frac)
        raise ResolutionError(f"numeric literal {frac} in a {tdef.carrier} component")
    if obj.type_name == RAW_STR:
        if tdef.carrier != STRING:
            raise ResolutionError(f"string literal {obj.value!r} in a {tdef.carrier} component")
        return DataObject(type_name, obj.value)
    if obj.type_name != type_name:
        raise ResolutionError(f"constant {obj!r} used at type {type_name!r}")
    return obj


# ---------------------------------------------------------------------------
# Statement-level parser


@dataclass
class _SpecShell:
    name: str
    institutional: bool = False
    schema: dict[str, TypedRelationSchema] = field(default_factory=dict)
    constraints: list[Query] = field(default_factory=list)
    init_facts: list[tuple[str, tuple[Term, ...]]] = field(default_factory=list)
    comm_rules: list[CommRule] = field(default_factory=list)
    actions: dict[str, UpdateAction] = field(default_factory=dict)
    update_rules: list[UpdateRule] = field(default_factory=list)
    preseeded: set[str] = field(default_factory=set)


class SpecParser:
    def __init__(self, text: str) -> None:
        self.ts = TokenStream(tokenize(text))
        self.types: dict[str, DataTypeDef] = dict(builtin_types())
        self.facets: dict[str, Facet] = {
            M.AGENT_FACET: Facet(M.AGENT_FACET, AGENT_TYPE),
            M.SPEC_FACET: Facet(M.SPEC_FACET, SPEC_TYPE),
        }
        self.services: dict[str, ServiceDef] = {
            M.GETN_SERVICE: ServiceDef(M.GETN_SERVICE, (), M.AGENT_FACET)
        }
        self.messages: dict[str, MessageDef] = {}
        self.shells: list[_SpecShell] = []
        self.initial_agents: list[tuple[str, str]] = []
        self.mode_flags: set[str] = set()
        self.preseeded = {M.AGENT_FACET, M.SPEC_FACET, M.GETN_SERVICE, AGENT_TYPE, SPEC_TYPE}
        # names usable as constants in queries: inst + declared agents + spec names
        self.const_names: dict[str, DataObject] = {INST_NAME: mk_symbol(AGENT_TYPE, INST_NAME)}

    # -- declarations -------------------------------------------------------

    def parse(self) -> RmasSpec:
        ts = self.ts
        ts.skip_newlines()
        while ts.peek().kind != "eof":
            t = ts.peek()
            if ts.accept("type"):
                self._parse_type()
            elif ts.accept("facet"):
                self._parse_facet()
            elif ts.accept("service"):
                self._parse_service()
            elif ts.accept("message"):
                self._parse_message()
            elif ts.accept("agent"):
                self._parse_agent_decl()
            elif ts.accept("mode"):
                tok = ts.peek()
                if tok.kind == "string":
                    ts.next()
                    self.mode_flags.add(tok.value[1:-1])
                else:
                    self.mode_flags.add(ts.expect_ident().value)
                ts.end_statement()
            elif ts.accept("spec"):
                self._parse_spec_block()
            else:
                raise ParseError(f"unexpected {t.value!r} at top level", t.line, t.col)
            ts.skip_newlines()
        return self._assemble()

    def _declare(self, table: dict, name: str, value, what: str, tok: Token) -> None:
        old = table.get(name)
        if old is not None and name not in self.preseeded and old != value:
            raise ParseError(f"{what} {name!r} already declared", tok.line, tok.col)
        table[name] = value
        self.preseeded.discard(name)

    def _parse_type(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        carrier_tok = ts.expect_ident()
        carrier = carrier_tok.value
        if carrier not in (SYMBOLIC, STRING, RATIONAL, INTEGER):
            raise ParseError(f"unknown carrier {carrier!r}", carrier_tok.line, carrier_tok.col)
        has_less = has_succ = False
        if ts.accept("with"):
            while True:
                rel = ts.expect_ident().value
                if rel == "less":
                    has_less = True
                elif rel == "succ":
                    has_succ = True
                else:
                    raise ParseError(f"unknown relation {rel!r}", tok.line, tok.col)
                if not ts.accept(","):
                    break
        self._declare(self.types, tok.value, DataTypeDef(tok.value, carrier, has_less, has_succ),
                      "type", tok)
        ts.end_statement()

    def _parse_facet(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        ts.expect("of")
        base = ts.expect_ident().value
        if base not in self.types:
            raise ResolutionError(f"unknown type {base!r}", tok.line, tok.col)
        formula: FacetFormula = FTrue()
        if ts.accept(":"):
            qp = QueryParser(ts)
            raw = qp.parse_query()
            formula = facet_formula_from_query(raw, base, self.types)
        seeds: set[DataObject] = set()
        if ts.accept("init"):
            ts.expect("{")
            while not ts.accept("}"):
                t = ts.peek()
                if t.kind in ("number", "string"):
                    ts.next()
                    seeds.add(_resolve_literal(_raw_const(t).obj, base, self.types))
                elif ts.accept("undef"):
                    seeds.add(mk_undef(base))
                else:
                    raise ParseError(f"expected literal, found {t.value!r}", t.line, t.col)
                ts.accept(",")
        facet = Facet(tok.value, base, formula, frozenset(seeds) | formula.constants())
        self._declare(self.facets, tok.value, facet, "facet", tok)
        ts.end_statement()

    def _facet_list(self) -> tuple[str, ...]:
        ts = self.ts
        ts.expect("(")
        names: list[str] = []
        if not ts.at(")"):
            while True:
                t = ts.expect_ident()
                if t.value not in self.facets:
                    raise ResolutionError(f"unknown facet {t.value!r}", t.line, t.col)
                names.append(t.value)
                if not ts.accept(","):
                    break
        ts.expect(")")
        return tuple(names)

    def _parse_service(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        inputs = self._facet_list()
        ts.expect("->")
        out_tok = ts.expect_ident()
        if out_tok.value not in self.facets:
            raise ResolutionError(f"unknown facet {out_tok.value!r}", out_tok.line, out_tok.col)
        self._declare(self.services, tok.value, ServiceDef(tok.value, inputs, out_tok.value),
                      "service", tok)
        ts.end_statement()

    def _parse_message(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        payload = self._facet_list()
        self._declare(self.messages, tok.value, MessageDef(tok.value, payload), "message", tok)
        ts.end_statement()

    def _parse_agent_decl(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        ts.expect(":")
        spec_tok = ts.expect_ident()
        self.initial_agents.append((tok.value, spec_tok.value))
        self.const_names[tok.value] = mk_symbol(AGENT_TYPE, tok.value)
        ts.end_statement()

    # -- spec blocks ---------------------------------------------------------

    def _parse_spec_block(self) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        shell = _SpecShell(tok.value)
        if ts.accept("institutional"):
            shell.institutional = True
        self.const_names[tok.value] = mk_symbol(SPEC_TYPE, tok.value)
        myname = TypedRelationSchema(M.MYNAME_REL, (M.AGENT_FACET,))
        shell.schema[M.MYNAME_REL] = myname
        shell.preseeded.add(M.MYNAME_REL)
        if shell.institutional:
            for rel, rs in M.institutional_relations().items():
                shell.schema[rel] = rs
                shell.preseeded.add(rel)
            shell.actions["newAg"] = M._new_ag_action()
            shell.actions["remAg"] = M._rem_ag_action()
            shell.preseeded |= {"newAg", "remAg"}
        ts.expect("{")
        ts.skip_newlines()
        while not ts.accept("}"):
            self._parse_spec_stmt(shell)
            ts.skip_newlines()
        ts.end_statement()
        self.shells.append(shell)

    def _parse_spec_stmt(self, shell: _SpecShell) -> None:
        ts = self.ts
        t = ts.peek()
        if ts.accept("relation"):
            tok = ts.expect_ident()
            facets = self._facet_list()
            rs = TypedRelationSchema(tok.value, facets)
            old = shell.schema.get(tok.value)
            if old is not None and tok.value not in shell.preseeded and old != rs:
                raise ParseError(f"relation {tok.value!r} already declared", tok.line, tok.col)
            shell.schema[tok.value] = rs
            shell.preseeded.discard(tok.value)
            ts.end_statement()
            return
        if ts.accept("constraint"):
            qp = QueryParser(ts)
            q = qp.parse_query()
            shell.constraints.append(q)
            ts.end_statement()
            return
        if ts.accept("init"):
            while True:
                tok = ts.expect_ident()
                ts.expect("(")
                terms: list[Term] = []
                qp = QueryParser(ts)
                if not ts.at(")"):
                    terms.append(qp.parse_term())
                    while ts.accept(","):
                        terms.append(qp.parse_term())
                ts.expect(")")
                shell.init_facts.append((tok.value, tuple(terms)))
                if not ts.accept(","):
                    break
            ts.end_statement()
            return
        if ts.accept("action"):
            self._parse_action(shell)
            return
        if ts.accept("on"):
            self._parse_update_rule(shell)
            return
        # otherwise: communicative rule `Q enables M(x) to t`
        self._parse_comm_rule(shell)

    def _parse_action(self, shell: _SpecShell) -> None:
        ts = self.ts
        tok = ts.expect_ident()
        ts.expect("(")
        params: list[tuple[str, str]] = []
        while not ts.at(")"):
            p = ts.expect_ident()
            ts.expect(":")
            f = ts.expect_ident()
            if f.value not in self.facets:
                raise ResolutionError(f"unknown facet {f.value!r}", f.line, f.col)
            params.append((p.value, f.value))
            if not ts.accept(","):
                break
        ts.expect(")")
        ts.expect("{")
        ts.skip_newlines()
        effects: list[UpdateEffect] = []
        while not ts.accept("}"):
            effects.append(self._parse_effect())
            ts.skip_newlines()
        action = UpdateAction(tok.value, tuple(params), tuple(effects))
        old = shell.actions.get(tok.value)
        if old is not None and tok.value not in shell.preseeded and old != action:
            raise ParseError(f"action {tok.value!r} already declared", tok.line, tok.col)
        shell.actions[tok.value] = action
        shell.preseeded.discard(tok.value)
        ts.end_statement()

    def _parse_effect(self) -> UpdateEffect:
        ts = self.ts
        qp = QueryParser(ts)
        guard = qp.parse_query()
        ts.expect("~>")
        adds: list[FactTemplate] = []
        dels: list[FactTemplate] = []
        saw = False
        while True:
            if ts.accept("add"):
                adds.extend(self._parse_fact_set(qp))
                saw = True
            elif ts.accept("del"):
                dels.extend(self._parse_fact_set(qp))
                saw = True
            else:
                break
        if not saw:
            t = ts.peek()
            raise ParseError("effect needs an add or del set", t.line, t.col)
        ts.end_statement()
        return UpdateEffect(guard, tuple(adds), tuple(dels))

    def _parse_fact_set(self, qp: QueryParser) -> list[FactTemplate]:
        ts = self.ts
        ts.expect("{")
        out: list[FactTemplate] = []
        while not ts.accept("}"):
            tok = ts.expect_ident()
            ts.expect("(")
            terms: list = []
            while not ts.at(")"):
                terms.append(self._parse_template_term(qp))
                if not ts.accept(","):
                    break
            ts.expect(")")
            out.append(FactTemplate(tok.value, tuple(terms)))
            ts.accept(",")
        return out

    def _parse_template_term(self, qp: QueryParser):
        ts = self.ts
        t = ts.peek()
        if t.kind == "ident" and ts.peek(1).value == "(" and t.value not in KEYWORDS:
            # service-call term
            name = ts.next().value
            ts.expect("(")
            args: list[Term] = []
            while not ts.at(")"):
                args.append(qp.parse_term())
                if not ts.accept(","):
                    break
            ts.expect(")")
            return CallTerm(name, tuple(args))
        return qp.parse_term()

    def _parse_comm_rule(self, shell: _SpecShell) -> None:
        ts = self.ts
        qp = QueryParser(ts)
        query = qp.parse_query()
        ts.expect("enables")
        msg_tok = ts.expect_ident()
        ts.expect("(")
        payload: list[str] = []
        extra: list[Query] = []
        idx = 0
        while not ts.at(")"):
            term = qp.parse_term()
            if isinstance(term, Var):
                payload.append(term.name)
            else:
                idx += 1
                fresh = f"_p{idx}"
                payload.append(fresh)
                extra.append(Q.EqAtom(Var(fresh), term))
            if not ts.accept(","):
                break
        ts.expect(")")
        ts.expect("to")
        target = ts.expect_ident().value
        if extra:
            query = Q.q_and(query, *extra)
        shell.comm_rules.append(CommRule(query, msg_tok.value, tuple(payload), target))
        ts.end_statement()

    def _parse_update_rule(self, shell: _SpecShell) -> None:
        ts = self.ts
        msg_tok = ts.expect_ident()
        ts.expect("(")
        qp = QueryParser(ts)
        payload: list[str] = []
        while not ts.at(")"):
            term = qp.parse_term()
            if not isinstance(term, Var):
                raise ParseError("update-rule payload must be variables",
                                 msg_tok.line, msg_tok.col)
            payload.append(term.name)
            if not ts.accept(","):
                break
        ts.expect(")")
        if ts.accept("from"):
            direction = M.ON_RECEIVE
        elif ts.accept("to"):
            direction = M.ON_SEND
        else:
            t = ts.peek()
            raise ParseError("expected 'from' or 'to'", t.line, t.col)
        peer = ts.expect_ident().value
        ts.expect("if")
        cond = qp.parse_query()
        ts.expect("then")
        act_tok = ts.expect_ident()
        ts.expect("(")
        args: list[Term] = []
        while not ts.at(")"):
            args.append(qp.parse_term())
            if not ts.accept(","):
                break
        ts.expect(")")
        shell.update_rules.append(
            UpdateRule(direction, msg_tok.value, tuple(payload), peer, cond,
                       act_tok.value, tuple(args))
        )
        ts.end_statement()

    # -- assembly and resolution --------------------------------------------

    def _assemble(self) -> RmasSpec:
        inst_shells = [s for s in self.shells if s.institutional]
        if len(inst_shells) > 1:
            raise ResolutionError("multiple institutional specs declared")
        if not inst_shells:
            shell = _SpecShell("instSpec", institutional=True)
            shell.schema[M.MYNAME_REL] = TypedRelationSchema(M.MYNAME_REL, (M.AGENT_FACET,))
            for rel, rs in M.institutional_relations().items():
                shell.schema[rel] = rs
            shell.actions["newAg"] = M._new_ag_action()
            shell.actions["remAg"] = M._rem_ag_action()
            self.shells.append(shell)
            inst_shells = [shell]
            self.const_names["instSpec"] = mk_symbol(SPEC_TYPE, "instSpec")

        for name, spec_name in self.initial_agents:
            if spec_name not in {s.name for s in self.shells}:
                raise ResolutionError(f"agent {name!r} uses undeclared spec {spec_name!r}")

        agent_specs: dict[str, AgentSpec] = {}
        for shell in self.shells:
            agent_specs[shell.name] = self._resolve_shell(shell)

        return RmasSpec(
            types=self.types,
            facets=self.facets,
            services=self.services,
            messages=self.messages,
            agent_specs=agent_specs,
            institutional=inst_shells[0].name,
            initial_agents=tuple(self.initial_agents),
            mode_flags=frozenset(self.mode_flags),
        )

    def _resolve_shell(self, shell: _SpecShell) -> AgentSpec:
        resolver = _Resolver(self, shell)
        init_facts = [resolver.resolve_fact(rel, terms) for rel, terms in shell.init_facts]
        constraints = tuple(resolver.resolve_query(c) for c in shell.constraints)
        comm = []
        for r in shell.comm_rules:
            msg = self.messages.get(r.message)
            if msg is None:
                raise ResolutionError(f"unknown message {r.message!r} in spec {shell.name!r}")
            # payload or target positions naming a declared constant desugar
            # to a fresh variable equated with it
            payload: list[str] = []
            extra: list[Query] = []
            for i, v in enumerate(r.payload_vars):
                if v in self.const_names:
                    fresh = f"_pc{i + 1}"
                    payload.append(fresh)
                    extra.append(Q.EqAtom(Var(fresh), Const(self.const_names[v])))
                else:
                    payload.append(v)
            target = r.target_var
            if target in self.const_names:
                fresh = "_pt"
                extra.append(Q.EqAtom(Var(fresh), Const(self.const_names[target])))
                target = fresh
            query = Q.q_and(r.query, *extra)
            seeds = {target: AGENT_TYPE}
            for v, fname in zip(payload, msg.payload_facets):
                seeds[v] = self.facets[fname].base_type
            comm.append(replace(
                r,
                query=resolver.resolve_query(query, seed_types=seeds),
                payload_vars=tuple(payload),
                target_var=target,
            ))
        actions: dict[str, UpdateAction] = {}
        for name, act in shell.actions.items():
            actions[name] = resolver.resolve_action(act)
        rules = []
        for r in shell.update_rules:
            msg = self.messages.get(r.message)
            if msg is None:
                raise ResolutionError(f"unknown message {r.message!r} in spec {shell.name!r}")
            act = actions.get(r.action)
            if act is None:
                raise ResolutionError(f"unknown action {r.action!r} in spec {shell.name!r}")
            if len(r.args) != len(act.params):
                raise ResolutionError(
                    f"action {r.action!r} takes {len(act.params)} arguments, got {len(r.args)}"
                )
            seeds = {r.peer_var: AGENT_TYPE}
            for v, fname in zip(r.payload_vars, msg.payload_facets):
                seeds[v] = self.facets[fname].base_type
            # payload and peer variables are binders: they shadow constants
            binders = frozenset(r.payload_vars) | {r.peer_var}
            args = []
            for i, a in enumerate(r.args):
                if not (isinstance(a, Var) and a.name in binders):
                    a = resolver._name_to_const(a)
                if isinstance(a, Const):
                    a = Const(_resolve_literal(
                        a.obj, resolver.base_type(act.params[i][1]), self.types))
                args.append(a)
            rules.append(replace(
                r,
                condition=resolver.resolve_query(r.condition, seed_types=seeds,
                                                 shadowed=binders),
                args=tuple(args),
            ))
        return AgentSpec(
            name=shell.name,
            schema=dict(shell.schema),
            constraints=constraints,
            initial_db=Database.of(init_facts),
            comm_rules=tuple(comm),
            actions=actions,
            update_rules=tuple(rules),
        )


class _Resolver:
    """Second pass: names to constants/params, raw literals to typed objects."""

    def __init__(self, parser: SpecParser, shell: _SpecShell) -> None:
        self.p = parser
        self.shell = shell

    def base_type(self, facet_name: str) -> str:
        return self.p.facets[facet_name].base_type

    def component_type(self, rel: str, i: int) -> str:
        rs = self.shell.schema.get(rel)
        if rs is None:
            raise ResolutionError(f"unknown relation {rel!r} in spec {self.shell.name!r}")
        if i >= rs.arity:
            raise ResolutionError(f"relation {rel!r} has arity {rs.arity}")
        return self.base_type(rs.facets[i])

    def resolve_fact(self, rel: str, terms: tuple[Term, ...]):
        rs = self.shell.schema.get(rel)
        if rs is None:
            raise ResolutionError(f"unknown relation {rel!r} in spec {self.shell.name!r}")
        if len(terms) != rs.arity:
            raise ResolutionError(f"fact {rel!r} has {len(terms)} terms, arity is {rs.arity}")
        objs: list[DataObject] = []
        for i, t in enumerate(terms):
            t = self._name_to_const(t)
            if not isinstance(t, Const):
                raise ResolutionError(f"initial facts must be ground, found {t!r} in {rel!r}")
            objs.append(_resolve_literal(t.obj, self.component_type(rel, i), self.p.types))
        return (rel, tuple(objs))

    def _name_to_const(self, t: Term, param_names: frozenset[str] = frozenset()) -> Term:
        if isinstance(t, Var):
            if t.name in param_names:
                return Param(t.name)
            obj = self.p.const_names.get(t.name)
            if obj is not None:
                return Const(obj)
        return t

    def _convert_names(self, q: Query, param_names: frozenset[str], bound: frozenset[str]) -> Query:
        # Quantifier-bound variables shadow declared constant names and params.
        def conv(t: Term) -> Term:
            if isinstance(t, Var) and t.name in bound:
                return t
            return self._name_to_const(t, param_names)

        if isinstance(q, (Q.Exists, Q.Forall)):
            body = self._convert_names(q.body, param_names, bound | {q.var})
            return type(q)(q.var, body)
        if isinstance(q, Q.Not):
            return Q.Not(self._convert_names(q.body, param_names, bound))
        if isinstance(q, Q.And):
            return Q.And(tuple(self._convert_names(p, param_names, bound) for p in q.parts))
        if isinstance(q, Q.Or):
            return Q.Or(tuple(self._convert_names(p, param_names, bound) for p in q.parts))
        if isinstance(q, Q.RelAtom):
            return Q.RelAtom(q.name, tuple(conv(t) for t in q.terms))
        if isinstance(q, Q.EqAtom):
            return Q.EqAtom(conv(q.left), conv(q.right))
        if isinstance(q, Q.LessAtom):
            return Q.LessAtom(q.type_name, conv(q.left), conv(q.right))
        if isinstance(q, Q.SuccAtom):
            return Q.SuccAtom(conv(q.left), conv(q.right))
        if isinstance(q, Q.LessFactAtom):
            return Q.LessFactAtom(q.type_name, conv(q.left), conv(q.right))
        return q

    def resolve_query(
        self,
        q: Query,
        param_types: Optional[dict[str, str]] = None,
        seed_types: Optional[dict[str, str]] = None,
        shadowed: frozenset[str] = frozenset(),
    ) -> Query:
        param_names = frozenset(param_types or ())
        q = self._convert_names(q, param_names, shadowed)
        # Infer types to resolve raw literals and fill comparison types.
        var_types: dict[str, str] = dict(seed_types or {})
        pending = True
        for _ in range(4):
            if not pending:
                break
            pending = False
            for atom in Q.atoms(q):
                pending |= self._note_atom_types(atom, var_types, param_types or {})
        q = self._rewrite_atoms(q, var_types, param_types or {})
        return q

    def _term_type(self, t: Term, var_types: dict[str, str], param_types: dict[str, str]) -> Optional[str]:
        if isinstance(t, Var):
            return var_types.get(t.name)
        if isinstance(t, Param):
            f = param_types.get(t.name)
            return self.base_type(f) if f else None
        if is_raw(t.obj):
            return None
        return t.obj.type_name

    def _note_atom_types(self, atom: Query, var_types: dict[str, str], param_types: dict[str, str]) -> bool:
        changed = False
        if isinstance(atom, Q.RelAtom):
            rs = self.shell.schema.get(atom.name)
            if rs is None:
                raise ResolutionError(f"unknown relation {atom.name!r} in spec {self.shell.name!r}")
            for i, t in enumerate(atom.terms):
                ct = self.component_type(atom.name, i)
                if isinstance(t, Var) and var_types.get(t.name) != ct:
                    var_types[t.name] = ct
                    changed = True
        elif isinstance(atom, (Q.EqAtom, Q.LessAtom, Q.SuccAtom, Q.LessFactAtom)):
            ta = self._term_type(atom.left, var_types, param_types)
            tb = self._term_type(atom.right, var_types, param_types)
            t = ta or tb
            if t:
                for side in (atom.left, atom.right):
                    if isinstance(side, Var) and var_types.get(side.name) != t:
                        var_types[side.name] = t
                        changed = True
        return changed

    def _rewrite_atoms(self, q: Query, var_types: dict[str, str], param_types: dict[str, str]) -> Query:
        if isinstance(q, Q.RelAtom):
            rs = self.shell.schema.get(q.name)
            if rs is None:
                raise ResolutionError(f"unknown relation {q.name!r} in spec {self.shell.name!r}")
            if len(q.terms) != rs.arity:
                raise ResolutionError(f"relation {q.name!r} used with wrong arity")
            terms = []
            for i, t in enumerate(q.terms):
                ct = self.component_type(q.name, i)
                terms.append(self._finish_term(t, ct))
            return Q.RelAtom(q.name, tuple(terms))
        if isinstance(q, (Q.EqAtom, Q.LessAtom, Q.SuccAtom, Q.LessFactAtom)):
            t = (self._term_type(q.left, var_types, param_types)
                 or self._term_type(q.right, var_types, param_types))
            if t is None:
                raise ResolutionError(f"cannot infer the type of comparison {q!r}")
            left = self._finish_term(q.left, t)
            right = self._finish_term(q.right, t)
            if isinstance(q, Q.EqAtom):
                return Q.EqAtom(left, right)
            if isinstance(q, Q.SuccAtom):
                return Q.SuccAtom(left, right)
            tdef = self.p.types.get(t)
            if tdef is None or not tdef.has_less:
                raise ResolutionError(f"type {t!r} has no dense order")
            if isinstance(q, Q.LessFactAtom):
                return Q.LessFactAtom(t, left, right)
            return Q.LessAtom(t, left, right)
        if isinstance(q, Q.Not):
            return Q.Not(self._rewrite_atoms(q.body, var_types, param_types))
        if isinstance(q, Q.And):
            return Q.And(tuple(self._rewrite_atoms(p, var_types, param_types) for p in q.parts))
        if isinstance(q, Q.Or):
            return Q.Or(tuple(self._rewrite_atoms(p, var_types, param_types) for p in q.parts))
        if isinstance(q, Q.Exists):
            return Q.Exists(q.var, self._rewrite_atoms(q.body, var_types, param_types))
        if isinstance(q, Q.Forall):
            return Q.Forall(q.var, self._rewrite_atoms(q.body, var_types, param_types))
        return q

    def _finish_term(self, t: Term, type_name: str) -> Term:
        if isinstance(t, Const):
            return Const(_resolve_literal(t.obj, type_name, self.p.types))
        return t

    def resolve_action(self, act: UpdateAction) -> UpdateAction:
        param_types = dict(act.params)
        effects = []
        for eff in act.effects:
            guard = self.resolve_query(eff.guard, param_types)
            guard_types = self._guard_var_types(guard, param_types)
            adds = tuple(self._resolve_template(t, param_types, guard_types) for t in eff.adds)
            dels = tuple(self._resolve_template(t, param_types, guard_types) for t in eff.dels)
            effects.append(UpdateEffect(guard, adds, dels))
        return UpdateAction(act.name, act.params, tuple(effects))

    def _guard_var_types(self, guard: Query, param_types: dict[str, str]) -> dict[str, str]:
        var_types: dict[str, str] = {}
        for _ in range(4):
            changed = False
            for atom in Q.atoms(guard):
                changed |= self._note_atom_types(atom, var_types, param_types)
            if not changed:
                break
        return var_types

    def _resolve_template(self, tpl: FactTemplate, param_types: dict[str, str],
                          guard_types: dict[str, str]) -> FactTemplate:
        rs = self.shell.schema.get(tpl.rel)
        if rs is None:
            raise ResolutionError(f"unknown relation {tpl.rel!r} in spec {self.shell.name!r}")
        if len(tpl.terms) != rs.arity:
            raise ResolutionError(f"fact template {tpl.rel!r} has wrong arity")
        terms = []
        for i, t in enumerate(tpl.terms):
            ct = self.component_type(tpl.rel, i)
            if isinstance(t, CallTerm):
                svc = self.p.services.get(t.service)
                if svc is None:
                    raise ResolutionError(f"unknown service {t.service!r}")
                if len(t.args) != svc.arity:
                    raise ResolutionError(f"service {t.service!r} used with wrong arity")
                args = []
                for j, a in enumerate(t.args):
                    a = self._name_to_const(a, frozenset(param_types))
                    args.append(self._finish_term(a, self.base_type(svc.input_facets[j])))
                terms.append(CallTerm(t.service, tuple(args)))
            else:
                t = self._name_to_const(t, frozenset(param_types))
                terms.append(self._finish_term(t, ct))
        return FactTemplate(tpl.rel, tuple(terms))

def parse_spec(text: str) -> RmasSpec:
    """Parse a `.rmas` specification. Built-in types, facets, the getN
    service, MyName, and the institutional registry relations are
    pre-declared; install_institutional completes the initial data."""
    return SpecParser(text).parse()


# ---------------------------------------------------------------------------
# Serializer


def _lit(obj: DataObject) -> str:
    if obj.is_undef():
        return "undef"
    if isinstance(obj.value, str):
        if obj.type_name in (AGENT_TYPE, SPEC_TYPE):
            return obj.value
        return f'"{obj.value}"'
    return str(obj.value)


def _term_str(t: Term) -> str:
    if isinstance(t, Var):
        return t.name
    if isinstance(t, Param):
        return t.name
    if isinstance(t, Const):
        return _lit(t.obj)
    if isinstance(t, CallTerm):
        return f"{t.service}({', '.join(_term_str(a) for a in t.args)})"
    raise ValueError(f"unknown term {t!r}")


def _query_str(q: Query, prec: int = 0) -> str:
    # precedence levels: 0 = implies, 1 = or, 2 = and, 3 = unary
    if isinstance(q, Q.TrueQ):
        return "true"
    if isinstance(q, Q.Not):
        if isinstance(q.body, Q.TrueQ):
            return "false"
        if isinstance(q.body, Q.EqAtom):
            return f"{_term_str(q.body.left)} != {_term_str(q.body.right)}"
        return "!" + _query_str(q.body, 3)
    if isinstance(q, Q.RelAtom):
        return f"{q.name}({', '.join(_term_str(t) for t in q.terms)})"
    if isinstance(q, Q.EqAtom):
        return f"{_term_str(q.left)} = {_term_str(q.right)}"
    if isinstance(q, Q.LessAtom):
        return f"{_term_str(q.left)} < {_term_str(q.right)}"
    if isinstance(q, Q.LessFactAtom):
        return f"lessThan_{q.type_name}({_term_str(q.left)}, {_term_str(q.right)})"
    if isinstance(q, Q.SuccAtom):
        return f"succ({_term_str(q.left)}, {_term_str(q.right)})"
    if isinstance(q, Q.And):
        s = " & ".join(_query_str(p, 3) for p in q.parts)
        return f"({s})" if prec > 2 else s
    if isinstance(q, Q.Or):
        # print implications back as A -> B when they have the Not/Or shape
        if len(q.parts) == 2 and isinstance(q.parts[0], Q.Not) and not isinstance(
            q.parts[0].body, (Q.TrueQ, Q.EqAtom)
        ):
            lhs = _query_str(q.parts[0].body, 1)
            rhs = _query_str(q.parts[1], 0)
            s = f"{lhs} -> {rhs}"
            return f"({s})" if prec > 0 else s
        s = " | ".join(_query_str(p, 3) for p in q.parts)
        return f"({s})" if prec > 1 else s
    if isinstance(q, (Q.Exists, Q.Forall)):
        kw = "exists" if isinstance(q, Q.Exists) else "forall"
        names = [q.var]
        body = q.body
        while isinstance(body, type(q)):
            names.append(body.var)
            body = body.body
        s = f"{kw} {', '.join(names)}. {_query_str(body, 0)}"
        return f"({s})" if prec > 0 else s
    raise ValueError(f"unknown query node {q!r}")


def _facet_formula_str(f: FacetFormula) -> str:
    if isinstance(f, FTrue):
        return "true"
    if isinstance(f, FFalse):
        return "false"
    if isinstance(f, FAtom):
        def side(t):
            return "x" if t == X else _lit(t)
        if f.rel == "eq":
            return f"{side(f.left)} = {side(f.right)}"
        if f.rel == "less":
            return f"{side(f.left)} < {side(f.right)}"
        return f"succ({side(f.left)}, {side(f.right)})"
    if isinstance(f, FNot):
        return "!(" + _facet_formula_str(f.body) + ")"
    if isinstance(f, FOr):
        return f"({_facet_formula_str(f.left)} | {_facet_formula_str(f.right)})"
    if isinstance(f, FAnd):
        return f"({_facet_formula_str(f.left)} & {_facet_formula_str(f.right)})"
    raise ValueError(f"unknown facet formula {f!r}")


def serialize_spec(spec: RmasSpec) -> str:
    """Render a specification back to `.rmas` text.

    Pre-declared built-ins (types agent/spec, facets AF/BF, getN, MyName, the
    registry relations, untouched newAg/remAg) are omitted; the parser
    re-seeds them.
    """
    out: list[str] = []
    for flag in sorted(spec.mode_flags):
        if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", flag):
            out.append(f"mode {flag}")
        else:
            out.append(f'mode "{flag}"')
    builtin = builtin_types()
    for name in spec.types:
        if name in builtin:
            continue
        t = spec.types[name]
        rels = []
        if t.has_less:
            rels.append("less")
        if t.has_succ:
            rels.append("succ")
        suffix = f" with {', '.join(rels)}" if rels else ""
        out.append(f"type {name} {t.carrier}{suffix}")
    for name, facet in spec.facets.items():
        if name in (M.AGENT_FACET, M.SPEC_FACET):
            continue
        s = f"facet {name} of {facet.base_type}"
        if not facet.is_base():
            s += f": {_facet_formula_str(facet.formula)}"
        seeds = facet.initial_objects - facet.formula.constants()
        if seeds:
            lits = ", ".join(_lit(o) for o in sorted(seeds, key=DataObject.sort_key))
            s += f" init {{ {lits} }}"
        out.append(s)
    for name, svc in spec.services.items():
        if name == M.GETN_SERVICE and svc == ServiceDef(M.GETN_SERVICE, (), M.AGENT_FACET):
            continue
        out.append(f"service {name}({', '.join(svc.input_facets)}) -> {svc.output_facet}")
    for name, msg in spec.messages.items():
        out.append(f"message {name}({', '.join(msg.payload_facets)})")
    for ag, sp in spec.initial_agents:
        out.append(f"agent {ag} : {sp}")

    for name, ag in spec.agent_specs.items():
        header = f"spec {name} institutional" if name == spec.institutional else f"spec {name}"
        out.append("")
        out.append(header + " {")
        skip_rels = {M.MYNAME_REL}
        if name == spec.institutional:
            skip_rels |= set(M.institutional_relations())
        for rel, rs in ag.schema.items():
            if rel in skip_rels:
                continue
            out.append(f"  relation {rel}({', '.join(rs.facets)})")
        for c in ag.constraints:
            out.append(f"  constraint {_query_str(c)}")
        facts = ag.initial_db.canonical()
        if facts:
            rendered = ", ".join(
                f"{rel}({', '.join(_lit(o) for o in args)})" for rel, args in facts
            )
            out.append(f"  init {rendered}")
        for act_name, act in ag.actions.items():
            if name == spec.institutional and act_name in ("newAg", "remAg"):
                if act in (M._new_ag_action(), M._rem_ag_action()):
                    continue
            params = ", ".join(f"{p}: {f}" for p, f in act.params)
            out.append(f"  action {act_name}({params}) {{")
            for eff in act.effects:
                parts = [f"    {_query_str(eff.guard)} ~>"]
                if eff.adds:
                    parts.append("add { " + ", ".join(
                        f"{t.rel}({', '.join(_term_str(x) for x in t.terms)})" for t in eff.adds
                    ) + " }")
                if eff.dels:
                    parts.append("del { " + ", ".join(
                        f"{t.rel}({', '.join(_term_str(x) for x in t.terms)})" for t in eff.dels
                    ) + " }")
                out.append(" ".join(parts))
            out.append("  }")
        for r in ag.comm_rules:
            payload = ", ".join(r.payload_vars)
            out.append(f"  {_query_str(r.query)} enables {r.message}({payload}) to {r.target_var}")
        for r in ag.update_rules:
            kw = "from" if r.direction == M.ON_RECEIVE else "to"
            payload = ", ".join(r.payload_vars)
            args = ", ".join(_term_str(a) for a in r.args)
            out.append(
                f"  on {r.message}({payload}) {kw} {r.peer_var} "
                f"if {_query_str(r.condition)} then {r.action}({args})"
            )
        out.append("}")
    return "\n".join(out) + "\n"
