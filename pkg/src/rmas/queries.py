"""First-order queries over typed databases.

Quantification always ranges over the active domain of the queried database
plus the constants of the initial data domain (the specs we accept are
domain-independent by construction, and relativization enforces it).
Dense comparisons are answered either from the rigid carrier order or from an
explicit lessThan fact database, depending on the order source.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from .data import (
    Database,
    DataObject,
    DataTypeDef,
    TypedRelationSchema,
    Facet,
    carrier_less,
    carrier_succ,
)


class QueryError(Exception):
    pass


class IncompatibleQuery(QueryError):
    pass


class SuccNotFlattenable(QueryError):
    pass


class MissingOrderFacts(QueryError):
    pass


# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Var:
    name: str

    def __repr__(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class Param:
    name: str

    def __repr__(self) -> str:
        return f"${self.name}"


@dataclass(frozen=True)
class Const:
    obj: DataObject

    def __repr__(self) -> str:
        return repr(self.obj)


Term = Union[Var, Param, Const]


# ---------------------------------------------------------------------------
# Query AST


class Query:
    pass


@dataclass(frozen=True)
class TrueQ(Query):
    pass


@dataclass(frozen=True)
class RelAtom(Query):
    name: str
    terms: tuple[Term, ...]


@dataclass(frozen=True)
class EqAtom(Query):
    left: Term
    right: Term


@dataclass(frozen=True)
class LessAtom(Query):
    """Rigid dense-order comparison left < right on a dense type."""

    type_name: str
    left: Term
    right: Term


@dataclass(frozen=True)
class SuccAtom(Query):
    """left is the integer successor of right."""

    left: Term
    right: Term


@dataclass(frozen=True)
class LessFactAtom(Query):
    """Non-rigid comparison answered from the maintained lessThan facts."""

    type_name: str
    left: Term
    right: Term


@dataclass(frozen=True)
class Not(Query):
    body: Query


@dataclass(frozen=True)
class And(Query):
    parts: tuple[Query, ...]


@dataclass(frozen=True)
class Or(Query):
    parts: tuple[Query, ...]


@dataclass(frozen=True)
class Exists(Query):
    var: str
    body: Query


@dataclass(frozen=True)
class Forall(Query):
    var: str
    body: Query


def q_and(*parts: Query) -> Query:
    flat = [p for p in parts if not isinstance(p, TrueQ)]
    if not flat:
        return TrueQ()
    if len(flat) == 1:
        return flat[0]
    return And(tuple(flat))


def q_or(*parts: Query) -> Query:
    if not parts:
        return Not(TrueQ())
    if len(parts) == 1:
        return parts[0]
    return Or(tuple(parts))


def q_implies(lhs: Query, rhs: Query) -> Query:
    return q_or(Not(lhs), rhs)


def q_false() -> Query:
    return Not(TrueQ())


def atoms(q: Query) -> Iterator[Query]:
    if isinstance(q, (RelAtom, EqAtom, LessAtom, SuccAtom, LessFactAtom)):
        yield q
    elif isinstance(q, Not):
        yield from atoms(q.body)
    elif isinstance(q, (And, Or)):
        for p in q.parts:
            yield from atoms(p)
    elif isinstance(q, (Exists, Forall)):
        yield from atoms(q.body)


def _term_vars(t: Term) -> set[str]:
    return {t.name} if isinstance(t, Var) else set()


def free_vars(q: Query) -> set[str]:
    if isinstance(q, TrueQ):
        return set()
    if isinstance(q, RelAtom):
        out: set[str] = set()
        for t in q.terms:
            out |= _term_vars(t)
        return out
    if isinstance(q, (EqAtom, LessAtom, SuccAtom, LessFactAtom)):
        return _term_vars(q.left) | _term_vars(q.right)
    if isinstance(q, Not):
        return free_vars(q.body)
    if isinstance(q, (And, Or)):
        out = set()
        for p in q.parts:
            out |= free_vars(p)
        return out
    if isinstance(q, (Exists, Forall)):
        return free_vars(q.body) - {q.var}
    raise QueryError(f"unknown query node {q!r}")


def constants(q: Query) -> set[DataObject]:
    out: set[DataObject] = set()
    for a in atoms(q):
        terms = a.terms if isinstance(a, RelAtom) else (a.left, a.right)
        for t in terms:
            if isinstance(t, Const):
                out.add(t.obj)
    return out


def params(q: Query) -> set[str]:
    out: set[str] = set()
    for a in atoms(q):
        terms = a.terms if isinstance(a, RelAtom) else (a.left, a.right)
        for t in terms:
            if isinstance(t, Param):
                out.add(t.name)
    return out


def substitute_params(q: Query, values: dict[str, DataObject]) -> Query:
    def sub_term(t: Term) -> Term:
        if isinstance(t, Param) and t.name in values:
            return Const(values[t.name])
        return t

    return map_terms(q, sub_term)


def map_terms(q: Query, f) -> Query:
    if isinstance(q, TrueQ):
        return q
    if isinstance(q, RelAtom):
        return RelAtom(q.name, tuple(f(t) for t in q.terms))
    if isinstance(q, EqAtom):
        return EqAtom(f(q.left), f(q.right))
    if isinstance(q, LessAtom):
        return LessAtom(q.type_name, f(q.left), f(q.right))
    if isinstance(q, SuccAtom):
        return SuccAtom(f(q.left), f(q.right))
    if isinstance(q, LessFactAtom):
        return LessFactAtom(q.type_name, f(q.left), f(q.right))
    if isinstance(q, Not):
        return Not(map_terms(q.body, f))
    if isinstance(q, And):
        return And(tuple(map_terms(p, f) for p in q.parts))
    if isinstance(q, Or):
        return Or(tuple(map_terms(p, f) for p in q.parts))
    if isinstance(q, Exists):
        return Exists(q.var, map_terms(q.body, f))
    if isinstance(q, Forall):
        return Forall(q.var, map_terms(q.body, f))
    raise QueryError(f"unknown query node {q!r}")


# ---------------------------------------------------------------------------
# Type checking


class TypeEnv:
    """Accumulates var/param type evidence and reports clashes."""

    def __init__(self) -> None:
        self.vars: dict[str, str] = {}
        self.pars: dict[str, str] = {}

    def bind_var(self, name: str, type_name: str, where: str) -> None:
        old = self.vars.get(name)
        if old is None:
            self.vars[name] = type_name
        elif old != type_name:
            raise IncompatibleQuery(
                f"variable {name!r} used at type {old} and at type {type_name} ({where})"
            )

    def bind_param(self, name: str, type_name: str, where: str) -> None:
        old = self.pars.get(name)
        if old is None:
            self.pars[name] = type_name
        elif old != type_name:
            raise IncompatibleQuery(
                f"parameter {name!r} used at type {old} and at type {type_name} ({where})"
            )


@dataclass
class SchemaContext:
    """Everything typechecking needs to resolve relation components."""

    schema: dict[str, TypedRelationSchema]
    facets: dict[str, Facet]
    types: dict[str, DataTypeDef]

    def component_type(self, rel: str, i: int) -> str:
        rs = self.schema.get(rel)
        if rs is None:
            raise IncompatibleQuery(f"unknown relation {rel!r}")
        if i >= rs.arity:
            raise IncompatibleQuery(f"relation {rel!r} has arity {rs.arity}")
        return self.facets[rs.facets[i]].base_type


def _check_term(env: TypeEnv, t: Term, type_name: str, where: str) -> None:
    if isinstance(t, Var):
        env.bind_var(t.name, type_name, where)
    elif isinstance(t, Param):
        env.bind_param(t.name, type_name, where)
    else:
        if t.obj.type_name != type_name:
            raise IncompatibleQuery(
                f"constant {t.obj!r} of type {t.obj.type_name} in a {type_name} component ({where})"
            )


def _collect_types(q: Query, ctx: SchemaContext, env: TypeEnv) -> None:
    if isinstance(q, TrueQ):
        return
    if isinstance(q, RelAtom):
        rs = ctx.schema.get(q.name)
        if rs is None:
            raise IncompatibleQuery(f"unknown relation {q.name!r}")
        if len(q.terms) != rs.arity:
            raise IncompatibleQuery(
                f"relation {q.name!r} used with {len(q.terms)} terms, arity is {rs.arity}"
            )
        for i, t in enumerate(q.terms):
            _check_term(env, t, ctx.component_type(q.name, i), f"{q.name}[{i + 1}]")
        return
    if isinstance(q, (LessAtom, LessFactAtom)):
        tdef = ctx.types.get(q.type_name)
        if tdef is None or not tdef.has_less:
            raise IncompatibleQuery(f"type {q.type_name!r} has no dense order")
        _check_term(env, q.left, q.type_name, "<")
        _check_term(env, q.right, q.type_name, "<")
        return
    if isinstance(q, SuccAtom):
        for t in (q.left, q.right):
            if isinstance(t, Const):
                tdef = ctx.types.get(t.obj.type_name)
                if tdef is None or not tdef.has_succ:
                    raise IncompatibleQuery(f"type {t.obj.type_name!r} has no successor relation")
        _unify_pair(env, q.left, q.right, "succ", ctx, require_succ=True)
        return
    if isinstance(q, EqAtom):
        _unify_pair(env, q.left, q.right, "=", ctx)
        return
    if isinstance(q, Not):
        _collect_types(q.body, ctx, env)
        return
    if isinstance(q, (And, Or)):
        for p in q.parts:
            _collect_types(p, ctx, env)
        return
    if isinstance(q, (Exists, Forall)):
        _collect_types(q.body, ctx, env)
        return
    raise QueryError(f"unknown query node {q!r}")


def _term_type(env: TypeEnv, t: Term) -> Optional[str]:
    if isinstance(t, Var):
        return env.vars.get(t.name)
    if isinstance(t, Param):
        return env.pars.get(t.name)
    return t.obj.type_name


def _unify_pair(env: TypeEnv, a: Term, b: Term, where: str, ctx: SchemaContext, require_succ: bool = False) -> None:
    ta, tb = _term_type(env, a), _term_type(env, b)
    t = ta or tb
    if ta is not None and tb is not None and ta != tb:
        raise IncompatibleQuery(f"terms of types {ta} and {tb} compared with {where}")
    if t is not None:
        if require_succ:
            tdef = ctx.types.get(t)
            if tdef is None or not tdef.has_succ:
                raise IncompatibleQuery(f"type {t!r} has no successor relation")
        _check_term(env, a, t, where)
        _check_term(env, b, t, where)


def typecheck_query(
    q: Query,
    ctx: SchemaContext,
    param_types: Optional[dict[str, str]] = None,
    seed_types: Optional[dict[str, str]] = None,
    require_all: bool = True,
) -> dict[str, str]:
    """Return the output type of every variable in q (free and bound).

    `seed_types` injects externally known variable types (message payloads,
    peer variables); a use conflicting with a seed is a type clash.  Fails
    with IncompatibleQuery when a constant sits in a component of a different
    type, a variable occurs at two components of different types, or (with
    require_all) some variable gets no type evidence at all.
    """
    env = TypeEnv()
    if param_types:
        for p, t in param_types.items():
            env.pars[p] = t
    if seed_types:
        for v, t in seed_types.items():
            env.vars[v] = t
    # Equality chains may need more than one pass to propagate types.
    for _ in range(3):
        before = dict(env.vars)
        _collect_types(q, ctx, env)
        if env.vars == before:
            break
    if require_all:
        missing = _all_vars(q) - set(env.vars)
        if missing:
            raise IncompatibleQuery(f"untypeable variables {sorted(missing)}")
    return dict(env.vars)


def _all_vars(q: Query) -> set[str]:
    out: set[str] = set()
    for a in atoms(q):
        terms = a.terms if isinstance(a, RelAtom) else (a.left, a.right)
        for t in terms:
            if isinstance(t, Var):
                out.add(t.name)
    for node in _quantifiers(q):
        out.add(node.var)
    return out


def _quantifiers(q: Query) -> Iterator[Union[Exists, Forall]]:
    if isinstance(q, (Exists, Forall)):
        yield q
        yield from _quantifiers(q.body)
    elif isinstance(q, Not):
        yield from _quantifiers(q.body)
    elif isinstance(q, (And, Or)):
        for p in q.parts:
            yield from _quantifiers(p)


# ---------------------------------------------------------------------------
# Order sources


class CarrierOrder:
    """Dense comparisons answered by the rigid carrier order."""

    def less(self, type_name: str, a: DataObject, b: DataObject) -> bool:
        return carrier_less(a, b)


class FactOrder:
    """Dense comparisons answered from an explicit lessThan fact database."""

    def __init__(self, order_db: Database) -> None:
        self.order_db = order_db
        self._mentioned: dict[str, set[DataObject]] = {}
        for rel, args in order_db:
            t = rel[len(LESSTHAN_PREFIX):]
            self._mentioned.setdefault(t, set()).update(args)

    def less(self, type_name: str, a: DataObject, b: DataObject) -> bool:
        if a == b:
            return False
        rel = lessthan_rel(type_name)
        if self.order_db.has(rel, (a, b)):
            return True
        if self.order_db.has(rel, (b, a)):
            return False
        raise MissingOrderFacts(f"no order fact relating {a!r} and {b!r} in {type_name}")


LESSTHAN_PREFIX = "__lt_"


def lessthan_rel(type_name: str) -> str:
    return LESSTHAN_PREFIX + type_name


OrderSource = Union[CarrierOrder, FactOrder]


# ---------------------------------------------------------------------------
# Evaluation

Binding = dict[str, DataObject]


@dataclass
class EvalContext:
    db: Database
    order: OrderSource
    var_types: dict[str, str]
    # per-type constants of the initial data domain, merged into quantifier
    # ranges alongside the database's active domain
    const_domain: dict[str, frozenset[DataObject]]

    def universe(self, var: str) -> list[DataObject]:
        t = self.var_types.get(var)
        if t is None:
            raise QueryError(f"no type for variable {var!r}")
        objs = self.db.adom(t) | set(self.const_domain.get(t, frozenset()))
        return sorted(objs, key=DataObject.sort_key)


def eval_query(
    q: Query,
    db: Database,
    order: OrderSource,
    var_types: dict[str, str],
    const_domain: dict[str, frozenset[DataObject]],
    binding: Optional[Binding] = None,
) -> list[Binding]:
    """Answers of q over db: one total substitution per free variable.

    A boolean query returns [{}] for true and [] for false.  `binding` may
    pre-bind some free variables.
    """
    ctx = EvalContext(db, order, var_types, const_domain)
    env: Binding = dict(binding or {})
    fv = free_vars(q)
    seen: set[tuple] = set()
    out: list[Binding] = []
    for ans in _answers(q, env, ctx):
        restricted = {v: ans[v] for v in fv}
        rkey = tuple(sorted((v, o.sort_key()) for v, o in restricted.items()))
        if rkey not in seen:
            seen.add(rkey)
            out.append(restricted)
    return out


def holds(
    q: Query,
    db: Database,
    order: OrderSource,
    var_types: dict[str, str],
    const_domain: dict[str, frozenset[DataObject]],
    binding: Optional[Binding] = None,
) -> bool:
    return bool(eval_query(q, db, order, var_types, const_domain, binding))


def _resolve(t: Term, env: Binding) -> Optional[DataObject]:
    if isinstance(t, Const):
        return t.obj
    if isinstance(t, Var):
        return env.get(t.name)
    raise QueryError(f"unsubstituted parameter {t!r} at evaluation time")


def _extend_unbound(q: Query, env: Binding, ctx: EvalContext) -> Iterator[Binding]:
    """Enumerate env extensions covering all free variables of q."""
    missing = sorted(v for v in free_vars(q) if v not in env)
    if not missing:
        yield env
        return
    pools = [ctx.universe(v) for v in missing]
    for combo in itertools.product(*pools):
        e = dict(env)
        e.update(dict(zip(missing, combo)))
        yield e


def _answers(q: Query, env: Binding, ctx: EvalContext) -> Iterator[Binding]:
    """Yield extensions of env that bind all free vars of q and satisfy it."""
    if isinstance(q, TrueQ):
        yield env
        return

    if isinstance(q, RelAtom):
        for args in ctx.db.facts_for(q.name):
            e = dict(env)
            ok = True
            for t, obj in zip(q.terms, args):
                if isinstance(t, Const):
                    if t.obj != obj:
                        ok = False
                        break
                elif isinstance(t, Var):
                    bound = e.get(t.name)
                    if bound is None:
                        e[t.name] = obj
                    elif bound != obj:
                        ok = False
                        break
                else:
                    raise QueryError(f"unsubstituted parameter {t!r}")
            if ok:
                yield e
        return

    if isinstance(q, EqAtom):
        lv, rv = _resolve(q.left, env), _resolve(q.right, env)
        if lv is not None and rv is not None:
            if lv == rv:
                yield env
        elif lv is not None and isinstance(q.right, Var):
            # variables range over the active domain plus initial constants
            if lv in ctx.universe(q.right.name):
                e = dict(env)
                e[q.right.name] = lv
                yield e
        elif rv is not None and isinstance(q.left, Var):
            if rv in ctx.universe(q.left.name):
                e = dict(env)
                e[q.left.name] = rv
                yield e
        else:
            # both sides unbound variables: enumerate one side
            for e in _extend_unbound(q, env, ctx):
                if _resolve(q.left, e) == _resolve(q.right, e):
                    yield e
        return

    if isinstance(q, (LessAtom, LessFactAtom, SuccAtom)):
        for e in _extend_unbound(q, env, ctx):
            a, b = _resolve(q.left, e), _resolve(q.right, e)
            assert a is not None and b is not None
            if isinstance(q, SuccAtom):
                if carrier_succ(a, b):
                    yield e
            elif isinstance(q, LessFactAtom):
                if isinstance(ctx.order, FactOrder):
                    if ctx.order.less(q.type_name, a, b):
                        yield e
                elif carrier_less(a, b):
                    yield e
            else:
                if ctx.order.less(q.type_name, a, b):
                    yield e
        return

    if isinstance(q, And):
        def chain(i: int, e: Binding) -> Iterator[Binding]:
            if i == len(q.parts):
                yield e
                return
            for e2 in _answers(q.parts[i], e, ctx):
                yield from chain(i + 1, e2)

        yield from chain(0, env)
        return

    if isinstance(q, Or):
        seen: set[tuple] = set()
        fv = sorted(free_vars(q))
        for p in q.parts:
            for e in _answers(p, env, ctx):
                for full in _extend_missing(fv, e, ctx):
                    key = tuple(full[v].sort_key() for v in fv)
                    if key not in seen:
                        seen.add(key)
                        yield full
        return

    if isinstance(q, Not):
        for e in _extend_unbound(q, env, ctx):
            if not any(True for _ in _answers(q.body, e, ctx)):
                yield e
        return

    if isinstance(q, Exists):
        outer = env.get(q.var)
        base = {k: v for k, v in env.items() if k != q.var}
        seen = set()
        fv = sorted(free_vars(q))
        for e in _answers(q.body, base, ctx):
            out = {k: v for k, v in e.items() if k != q.var}
            if outer is not None:
                out[q.var] = outer
            for full in _extend_missing(fv, out, ctx):
                key = tuple(full[v].sort_key() for v in fv)
                if key not in seen:
                    seen.add(key)
                    yield full
        return

    if isinstance(q, Forall):
        for e in _extend_unbound(q, env, ctx):
            base = {k: v for k, v in e.items() if k != q.var}
            ok = True
            for obj in ctx.universe(q.var):
                inner = dict(base)
                inner[q.var] = obj
                if not any(True for _ in _answers(q.body, inner, ctx)):
                    ok = False
                    break
            if ok:
                yield e
        return

    raise QueryError(f"unknown query node {q!r}")


def _extend_missing(fv: list[str], env: Binding, ctx: EvalContext) -> Iterator[Binding]:
    missing = [v for v in fv if v not in env]
    if not missing:
        yield env
        return
    pools = [ctx.universe(v) for v in missing]
    for combo in itertools.product(*pools):
        e = dict(env)
        e.update(dict(zip(missing, combo)))
        yield e


# ---------------------------------------------------------------------------
# Flattening and LIVE expansion


def flatten_formula(q: Query) -> Query:
    """Rewrite rigid dense comparisons into lessThan fact atoms."""
    if isinstance(q, SuccAtom):
        raise SuccNotFlattenable("succ atoms cannot be flattened")
    if isinstance(q, LessAtom):
        return LessFactAtom(q.type_name, q.left, q.right)
    if isinstance(q, Not):
        return Not(flatten_formula(q.body))
    if isinstance(q, And):
        return And(tuple(flatten_formula(p) for p in q.parts))
    if isinstance(q, Or):
        return Or(tuple(flatten_formula(p) for p in q.parts))
    if isinstance(q, Exists):
        return Exists(q.var, flatten_formula(q.body))
    if isinstance(q, Forall):
        return Forall(q.var, flatten_formula(q.body))
    return q


def expand_live(
    schema: dict[str, TypedRelationSchema],
    facets: dict[str, Facet],
    t: DataTypeDef,
    var: str = "x",
) -> Query:
    """The membership-in-active-domain query for type t as a union of CQs."""
    disjuncts: list[Query] = []
    for rel in sorted(schema):
        rs = schema[rel]
        for i in range(rs.arity):
            if facets[rs.facets[i]].base_type != t.name:
                continue
            fresh = [f"_lv{j}" for j in range(rs.arity)]
            terms = [Var(var) if j == i else Var(fresh[j]) for j in range(rs.arity)]
            q: Query = RelAtom(rel, tuple(terms))
            for j in range(rs.arity - 1, -1, -1):
                if j != i:
                    q = Exists(fresh[j], q)
            disjuncts.append(q)
    if not disjuncts:
        return q_false()
    return q_or(*disjuncts)
