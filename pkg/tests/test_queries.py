import itertools
import random
from fractions import Fraction

import pytest

from rmas import queries as Q
from rmas.data import (
    Database,
    DataObject,
    DataTypeDef,
    Facet,
    TypedRelationSchema,
    builtin_types,
    mk_rational,
    mk_string,
)
from rmas.queries import (
    CarrierOrder,
    Const,
    FactOrder,
    IncompatibleQuery,
    MissingOrderFacts,
    SuccNotFlattenable,
    Var,
    eval_query,
    expand_live,
    flatten_formula,
    free_vars,
    lessthan_rel,
    typecheck_query,
)

from oracles import naive_eval

STR = DataTypeDef("Str", "string")
RAT = DataTypeDef("Rat", "rational", has_less=True)
TYPES = {"Str": STR, "Rat": RAT, **builtin_types()}
FACETS = {"SF": Facet("SF", "Str"), "PF": Facet("PF", "Rat")}
SCHEMA = {
    "R": TypedRelationSchema("R", ("SF", "PF")),
    "S": TypedRelationSchema("S", ("PF",)),
    "T": TypedRelationSchema("T", ("SF",)),
}
CTX = Q.SchemaContext(schema=SCHEMA, facets=FACETS, types=TYPES)
NO_CONSTS = {"Str": frozenset(), "Rat": frozenset()}


def s(v):
    return mk_string("Str", v)


def r(v):
    return mk_rational("Rat", Fraction(v))


class TestTypecheck:
    def test_atomic_query_typing_matches_schema(self):
        q = Q.RelAtom("R", (Var("x"), Var("y")))
        assert typecheck_query(q, CTX) == {"x": "Str", "y": "Rat"}

    def test_variable_in_two_differently_typed_components_fails(self):
        q = Q.q_and(Q.RelAtom("T", (Var("x"),)), Q.RelAtom("S", (Var("x"),)))
        with pytest.raises(IncompatibleQuery):
            typecheck_query(q, CTX)

    def test_constant_in_wrong_component_fails(self):
        q = Q.RelAtom("S", (Const(s("nope")),))
        with pytest.raises(IncompatibleQuery):
            typecheck_query(q, CTX)

    def test_comparison_propagates_types(self):
        q = Q.q_and(Q.RelAtom("S", (Var("x"),)), Q.LessAtom("Rat", Var("x"), Var("y")))
        assert typecheck_query(q, CTX)["y"] == "Rat"

    def test_untypeable_variable_fails(self):
        q = Q.EqAtom(Var("x"), Var("y"))
        with pytest.raises(IncompatibleQuery):
            typecheck_query(q, CTX)

    def test_seed_types_fill_gaps_and_clash(self):
        q = Q.EqAtom(Var("x"), Var("y"))
        out = typecheck_query(q, CTX, seed_types={"x": "Rat"})
        assert out == {"x": "Rat", "y": "Rat"}
        with pytest.raises(IncompatibleQuery):
            typecheck_query(Q.RelAtom("S", (Var("x"),)), CTX, seed_types={"x": "Str"})


class TestEval:
    def test_single_atom(self):
        db = Database.of([("S", (r(1),))])
        q = Q.RelAtom("S", (Var("x"),))
        out = eval_query(q, db, CarrierOrder(), {"x": "Rat"}, NO_CONSTS)
        assert out == [{"x": r(1)}]

    def test_boolean_query_conventions(self):
        db = Database.of([("S", (r(1),))])
        yes = Q.Exists("x", Q.RelAtom("S", (Var("x"),)))
        no = Q.Exists("x", Q.RelAtom("T", (Var("x"),)))
        assert eval_query(yes, db, CarrierOrder(), {"x": "Rat"}, NO_CONSTS) == [{}]
        assert eval_query(no, db, CarrierOrder(), {"x": "Str"}, NO_CONSTS) == []

    def test_lowest_price_guard(self):
        # exists p2. PropPrice(_, t, p2) & p2 < p  with p bound to 5
        db = Database.of([("R", (s("task"), r(3)))])
        q = Q.Exists("w", Q.Exists("p2", Q.q_and(
            Q.RelAtom("R", (Var("w"), Var("p2"))),
            Q.LessAtom("Rat", Var("p2"), Var("p")),
        )))
        types = {"w": "Str", "p2": "Rat", "p": "Rat"}
        assert eval_query(q, db, CarrierOrder(), types, NO_CONSTS,
                          binding={"p": r(5)}) == [{"p": r(5)}]
        assert eval_query(q, db, CarrierOrder(), types, NO_CONSTS,
                          binding={"p": r(2)}) == []

    def test_exists_over_empty_domain(self):
        q = Q.Exists("x", Q.RelAtom("S", (Var("x"),)))
        assert eval_query(q, Database(), CarrierOrder(), {"x": "Rat"}, NO_CONSTS) == []

    def test_constants_of_initial_domain_enter_quantifier_range(self):
        q = Q.Exists("x", Q.EqAtom(Var("x"), Var("x")))
        consts = {"Rat": frozenset({r(9)}), "Str": frozenset()}
        assert eval_query(q, Database(), CarrierOrder(), {"x": "Rat"}, consts) == [{}]

    def test_fact_order_mode(self):
        order_db = Database.of([(lessthan_rel("Rat"), (r(1), r(2)))])
        q = Q.LessFactAtom("Rat", Const(r(1)), Const(r(2)))
        assert eval_query(q, Database(), FactOrder(order_db), {}, NO_CONSTS) == [{}]
        q2 = Q.LessFactAtom("Rat", Const(r(2)), Const(r(1)))
        assert eval_query(q2, Database(), FactOrder(order_db), {}, NO_CONSTS) == []

    def test_missing_order_facts(self):
        order_db = Database.of([(lessthan_rel("Rat"), (r(1), r(2)))])
        q = Q.LessFactAtom("Rat", Const(r(1)), Const(r(7)))
        with pytest.raises(MissingOrderFacts):
            eval_query(q, Database(), FactOrder(order_db), {}, NO_CONSTS)


class TestFlatten:
    def test_less_atom_rewritten(self):
        q = Q.LessAtom("Rat", Var("x"), Var("y"))
        assert flatten_formula(q) == Q.LessFactAtom("Rat", Var("x"), Var("y"))

    def test_comparison_free_query_unchanged(self):
        q = Q.RelAtom("S", (Var("x"),))
        assert flatten_formula(q) == q

    def test_ticket_guard_shape(self):
        q = Q.Not(Q.Exists("a", Q.Exists("t2", Q.q_and(
            Q.RelAtom("R", (Var("a"), Var("t2"))),
            Q.LessAtom("Rat", Var("t2"), Var("t")),
        ))))
        out = flatten_formula(q)
        assert out == Q.Not(Q.Exists("a", Q.Exists("t2", Q.q_and(
            Q.RelAtom("R", (Var("a"), Var("t2"))),
            Q.LessFactAtom("Rat", Var("t2"), Var("t")),
        ))))

    def test_idempotent_and_preserves_free_vars(self):
        q = Q.Exists("x", Q.q_and(
            Q.RelAtom("S", (Var("x"),)),
            Q.LessAtom("Rat", Var("x"), Var("y")),
        ))
        f = flatten_formula(q)
        assert flatten_formula(f) == f
        assert free_vars(f) == free_vars(q)

    def test_succ_not_flattenable(self):
        with pytest.raises(SuccNotFlattenable):
            flatten_formula(Q.SuccAtom(Var("x"), Var("y")))


class TestExpandLive:
    def test_single_relation(self):
        schema = {"R": TypedRelationSchema("R", ("SF", "PF"))}
        q = expand_live(schema, FACETS, STR, var="x")
        db = Database.of([("R", (s("a"), r(1)))])
        out = eval_query(q, db, CarrierOrder(),
                         {"x": "Str", "_lv1": "Rat"}, NO_CONSTS)
        assert out == [{"x": s("a")}]

    def test_unused_type_yields_false(self):
        schema = {"S": TypedRelationSchema("S", ("PF",))}
        q = expand_live(schema, FACETS, STR)
        assert q == Q.q_false()

    def test_matches_adom(self):
        q = expand_live(SCHEMA, FACETS, RAT, var="x")
        db = Database.of([("R", (s("a"), r(1))), ("S", (r(2),))])
        types = typecheck_query(q, CTX)
        out = eval_query(q, db, CarrierOrder(), types, NO_CONSTS)
        assert {b["x"] for b in out} == db.adom("Rat")

    def test_relativization_never_enlarges_answers(self):
        db = Database.of([("S", (r(1),)), ("R", (s("a"), r(2)))])
        base = Q.EqAtom(Var("x"), Var("x"))
        live = expand_live(SCHEMA, FACETS, RAT, var="x")
        consts = {"Rat": frozenset({r(99)}), "Str": frozenset()}
        types = {"x": "Rat", "_lv0": "Str", "_lv1": "Rat"}
        plain = eval_query(base, db, CarrierOrder(), types, consts)
        relativized = eval_query(Q.q_and(live, base), db, CarrierOrder(), types, consts)
        keys = lambda rows: {r_["x"] for r_ in rows}
        assert keys(relativized) <= keys(plain)


# ---------------------------------------------------------------------------
# Randomized equivalence with the naive evaluator


def random_query(rng, depth, vars_in_scope):
    choices = ["R", "S", "eq", "less"]
    if depth > 0:
        choices += ["not", "and", "or", "exists", "forall"]

    def term(type_name):
        pool = [Var(v) for v, t in vars_in_scope if t == type_name]
        consts = [Const(r(i)) for i in range(3)] if type_name == "Rat" else [Const(s("a"))]
        return rng.choice(pool + consts)

    kind = rng.choice(choices)
    if kind == "R":
        return Q.RelAtom("R", (term("Str"), term("Rat")))
    if kind == "S":
        return Q.RelAtom("S", (term("Rat"),))
    if kind == "eq":
        return Q.EqAtom(term("Rat"), term("Rat"))
    if kind == "less":
        return Q.LessAtom("Rat", term("Rat"), term("Rat"))
    if kind == "not":
        return Q.Not(random_query(rng, depth - 1, vars_in_scope))
    if kind in ("and", "or"):
        a = random_query(rng, depth - 1, vars_in_scope)
        b = random_query(rng, depth - 1, vars_in_scope)
        return Q.And((a, b)) if kind == "and" else Q.Or((a, b))
    v = f"q{len(vars_in_scope)}"
    t = rng.choice(["Rat", "Str"])
    body = random_query(rng, depth - 1, vars_in_scope + [(v, t)])
    return Q.Exists(v, body) if kind == "exists" else Q.Forall(v, body)


def random_db(rng):
    strs = [s(c) for c in "ab"]
    rats = [r(i) for i in range(4)]
    facts = set()
    for _ in range(rng.randint(0, 6)):
        facts.add(("R", (rng.choice(strs), rng.choice(rats))))
    for _ in range(rng.randint(0, 3)):
        facts.add(("S", (rng.choice(rats),)))
    return Database.of(facts)


def test_eval_matches_naive_enumeration():
    rng = random.Random(7)
    # every constant a random query can mention sits in the initial domain,
    # mirroring the well-formedness restriction on specifications
    consts = {"Rat": frozenset({r(0), r(1), r(2)}), "Str": frozenset({s("a")})}
    checked = 0
    for _ in range(300):
        scope = [("x", "Rat")] if rng.random() < 0.5 else []
        q = random_query(rng, 3, list(scope))
        types = dict(scope)
        try:
            types.update(typecheck_query(q, CTX, seed_types=dict(scope)))
        except IncompatibleQuery:
            continue
        db = random_db(rng)
        got = eval_query(q, db, CarrierOrder(), types, consts)
        want = naive_eval(q, db, CarrierOrder(), types, consts)
        canon = lambda rows: sorted(
            tuple(sorted((k, v.sort_key()) for k, v in row.items())) for row in rows
        )
        assert canon(got) == canon(want), f"query {q}"
        for row in got:  # answers are well-typed per the inferred output types
            for v, o in row.items():
                assert o.type_name == types[v]
        checked += 1
    assert checked > 150


def test_carrier_equals_flat_on_full_order_restriction():
    # evaluating the flattened query over explicit order facts agrees with
    # the rigid order whenever the fact table covers the active values
    rng = random.Random(13)
    consts = {"Rat": frozenset({r(0), r(1), r(2)}), "Str": frozenset({s("a")})}
    for _ in range(200):
        q = random_query(rng, 3, [])
        try:
            types = typecheck_query(q, CTX)
        except IncompatibleQuery:
            continue
        db = random_db(rng)
        objs = sorted(db.adom("Rat") | set(consts["Rat"]), key=DataObject.sort_key)
        facts = [
            (lessthan_rel("Rat"), (a, b))
            for a, b in itertools.combinations(objs, 2)
        ]
        flat = flatten_formula(q)
        got = eval_query(flat, db, FactOrder(Database.of(facts)), types, consts)
        want = eval_query(q, db, CarrierOrder(), types, consts)
        canon = lambda rows: sorted(
            tuple(sorted((k, v.sort_key()) for k, v in row.items())) for row in rows
        )
        assert canon(got) == canon(want)
