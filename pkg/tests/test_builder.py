import itertools
from dataclasses import replace
from fractions import Fraction

import pytest

from rmas import queries as Q
from rmas.builder import (
    BuildConfig,
    Builder,
    ConfigError,
    MODE_ABSTRACT,
    MODE_CONCRETE,
    MODE_FB,
    MODE_FB_FLAT,
    MODE_SHALLOW,
    StateBoundExceeded,
    SuccRejected,
    build_transition_system,
    export,
    export_dot,
    export_jsonl,
    import_jsonl,
    make_state,
    state_key,
)
from rmas.commitments import CallToken
from rmas.data import Database, DataObject, mk_rational, mk_symbol
from rmas.dsl import parse_spec
from rmas.generators import counter_machine_to_rmas, parse_counter_program
from rmas.model import ON_RECEIVE, ON_SEND, install_institutional
from rmas.queries import lessthan_rel

from conftest import load_corpus, rational_pool


def rt(v):
    return mk_rational("Real", Fraction(v))


def agent(n):
    return mk_symbol("agent", n)


@pytest.fixture(scope="module")
def ticket_builder(ticket_spec):
    return Builder(ticket_spec, BuildConfig(mode=MODE_ABSTRACT))


@pytest.fixture(scope="module")
def ticket_abstract_ts(ticket_spec):
    return build_transition_system(ticket_spec, BuildConfig(mode=MODE_ABSTRACT))


class TestEnabledMessages:
    def test_assigned_enables_give_ticket(self, ticket_spec, ticket_builder):
        b = ticket_builder
        s0 = b.initial_state()
        inst_db = s0.inst_db().apply(
            adds=[("Assigned", (agent("c1"), rt("7/2")))], dels=[])
        dbs = {a: d for a, d in s0.agent_dbs}
        dbs[agent("inst")] = inst_db
        # order facts must mention the new ticket in flat mode
        order = Database.of([*(s0.order_db or Database()).facts])
        state = make_state(dbs, order)
        active = {a for a, _ in b.current_agents(state)}
        out = b.enabled_messages(state, agent("inst"), "instSpec", active)
        assert ("giveTicket", (rt("7/2"),), agent("c1")) in out

    def test_no_rules_no_messages(self):
        spec = install_institutional(parse_spec(""))
        b = Builder(spec, BuildConfig(mode=MODE_CONCRETE))
        s0 = b.initial_state()
        assert b.enabled_messages(s0, agent("inst"), "instSpec", {agent("inst")}) == []

    def test_inactive_target_excluded(self, ticket_spec):
        b = Builder(ticket_spec, BuildConfig(mode=MODE_ABSTRACT))
        s0 = b.initial_state()
        # drop c2 from the registry: its askTicket rule can no longer fire
        inst_db = Database.of([
            f for f in s0.inst_db().facts
            if not (f[0] in ("Agent", "hasSpec") and f[1][0] == agent("c2"))
        ])
        dbs = {a: d for a, d in s0.agent_dbs if a != agent("c2")}
        dbs[agent("inst")] = inst_db
        state = make_state(dbs, s0.order_db)
        active = {a for a, _ in b.current_agents(state)}
        assert agent("c2") not in active
        # no enabled message may target the deregistered agent
        for sender, sname in b.current_agents(state):
            for (_, _, target) in b.enabled_messages(state, sender, sname, active):
                assert target != agent("c2")


class TestReactionsAndFacts:
    def test_give_ticket_triggers_bind(self, ticket_spec, ticket_builder):
        b = ticket_builder
        s0 = b.initial_state()
        out = b.collect_reactions(
            s0, agent("inst"), "instSpec", ON_SEND, "giveTicket", (rt(1),), agent("c1"))
        assert out == [("bindTicket", (agent("c1"), rt(1)))]

    def test_no_matching_rules(self, ticket_spec, ticket_builder):
        b = ticket_builder
        s0 = b.initial_state()
        out = b.collect_reactions(
            s0, agent("c1"), "client", ON_SEND, "giveTicket", (rt(1),), agent("inst"))
        assert out == []

    def test_gen_ticket_fact_embeds_call(self, ticket_spec, ticket_builder):
        b = ticket_builder
        s0 = b.initial_state()
        to_del, to_add = b.get_facts(
            s0, agent("inst"), "instSpec", [("genTicket", (agent("c1"),))])
        assert to_del == set()
        assert to_add == {("Assigned", (agent("c1"), CallToken("getTicket", ())))}

    def test_unsatisfiable_guard(self, ticket_spec, ticket_builder):
        b = ticket_builder
        s0 = b.initial_state()
        # bindTicket's guards are true but the dels mention the arguments
        to_del, to_add = b.get_facts(
            s0, agent("inst"), "instSpec", [("bindTicket", (agent("c1"), rt(1)))])
        assert to_add == {("hasTicket", (agent("c1"), rt(1)))}
        assert to_del == {("Assigned", (agent("c1"), rt(1)))}

    def test_false_guard_contributes_nothing(self):
        spec = install_institutional(parse_spec("""
spec instSpec institutional {
  relation W(AF)
  action never() {
    false ~> add { W(inst) }
  }
}
"""))
        b = Builder(spec, BuildConfig(mode=MODE_CONCRETE))
        s0 = b.initial_state()
        assert b.get_facts(s0, agent("inst"), "instSpec", [("never", ())]) == (set(), set())

    def test_rem_ag_deletes_registry_rows(self, registry_spec):
        b = Builder(registry_spec, BuildConfig(mode=MODE_ABSTRACT))
        s0 = b.initial_state()
        w = agent("w1")
        inst_db = s0.inst_db().apply(
            adds=[("Agent", (w,)), ("hasSpec", (w, mk_symbol("spec", "worker")))],
            dels=[])
        dbs = {a: d for a, d in s0.agent_dbs}
        dbs[agent("inst")] = inst_db
        state = make_state(dbs, s0.order_db)
        to_del, to_add = b.get_facts(
            state, agent("inst"), "instSpec", [("remAg", (w,))])
        assert ("Agent", (w,)) in to_del
        assert ("hasSpec", (w, mk_symbol("spec", "worker"))) in to_del


class TestStepSuccessors:
    def test_terminal_state_of_halted_machine(self):
        spec = counter_machine_to_rmas(parse_counter_program("halt\n"))
        pool = {"Int": tuple(DataObject("Int", i) for i in range(3))}
        ts = build_transition_system(spec, BuildConfig(mode=MODE_CONCRETE, pools=pool))
        # initial -> halted; halted state has no enabled messages
        assert ts.stats["states"] == 2
        last = ts.states[1]
        b = Builder(spec, BuildConfig(mode=MODE_CONCRETE, pools=pool))
        assert b.step_successors(last) == []

    def test_ask_ticket_dense_branching(self, ticket_spec):
        # one pending getTicket call against 2 live tickets: exactly the
        # dense commitments on 3 elements with 2 pre-ordered objects, i.e.
        # join-first, join-second, below, between, above = 5 branches
        b = Builder(ticket_spec, BuildConfig(mode=MODE_FB_FLAT))
        s0 = b.initial_state()
        inst_db = s0.inst_db().apply(adds=[
            ("hasTicket", (agent("c2"), rt(1))),
            ("hasTicket", (agent("c2"), rt(2))),
        ], dels=[])
        dbs = {a: d for a, d in s0.agent_dbs}
        dbs[agent("inst")] = inst_db
        order = Database.of([(lessthan_rel("Real"), (rt(1), rt(2)))])
        state = make_state(dbs, order)
        succs = b._exchange(
            state, agent("c1"), "client", agent("inst"), "instSpec",
            "askTicket", (), b.current_agents(state), {})
        assert len(succs) == 5
        # the ordering constraint commits only the above-everything branch;
        # the four rejected branches all roll back to the source state
        committed = [s for s in succs if s.db(agent("inst")) != inst_db]
        assert len(committed) == 1
        assert len({state_key(s) for s in succs}) == 2
        (assigned,) = committed[0].db(agent("inst")).facts_for("Assigned")
        new_ticket = assigned[1]
        pairs = {(a, c) for _, (a, c) in committed[0].order_db.facts}
        assert (rt(1), new_ticket) in pairs and (rt(2), new_ticket) in pairs

    def test_constraint_rollback_keeps_old_db(self, ticket_spec):
        b = Builder(ticket_spec, BuildConfig(mode=MODE_CONCRETE,
                                             pools=rational_pool("Real", [1])))
        s0 = b.initial_state()
        inst_db = s0.inst_db().apply(adds=[("hasTicket", (agent("c2"), rt(1)))], dels=[])
        dbs = {a: d for a, d in s0.agent_dbs}
        dbs[agent("inst")] = inst_db
        state = make_state(dbs, None)
        # c1 asks; the only pool ticket (1) ties with c2's and violates the
        # ordering constraint, so inst must roll back
        succs = b._exchange(
            state, agent("c1"), "client", agent("inst"), "instSpec",
            "askTicket", (), b.current_agents(state), {})
        assert len(succs) == 1
        assert succs[0].db(agent("inst")) == inst_db

    def test_rollback_locality(self, ping_shallow):
        # make bob's note action violate a constraint; alice's markSent
        # commit must be unaffected
        spec = ping_shallow
        bob = spec.agent_specs["ponger"]
        never = Q.Forall("g", Q.q_implies(
            Q.RelAtom("Seen", (Q.Var("g"),)), Q.q_false()))
        spec2 = replace(spec, agent_specs={
            **spec.agent_specs,
            "ponger": replace(bob, constraints=bob.constraints + (never,)),
        })
        b = Builder(spec2, BuildConfig(mode=MODE_SHALLOW))
        s0 = b.initial_state()
        succs = b._exchange(
            s0, agent("alice"), "pinger", agent("bob"), "ponger",
            "ping", (DataObject("Str", "hi"),), b.current_agents(s0), {})
        (s1,) = succs
        assert s1.db(agent("bob")) == s0.db(agent("bob"))  # rolled back
        assert ("Waiting", ()) in s1.db(agent("alice")).facts  # committed


class TestBuild:
    def test_no_comm_rules_single_state(self):
        spec = install_institutional(parse_spec(""))
        ts = build_transition_system(spec, BuildConfig(mode=MODE_CONCRETE))
        assert ts.stats == {
            "states": 1, "edges": 0, "max_agent_adom": 2,
            "peak_frontier": 1, "depth": 1,
        } or ts.stats["states"] == 1

    def test_ticket_abstract_closes(self, ticket_abstract_ts):
        assert not ticket_abstract_ts.truncated
        assert ticket_abstract_ts.stats["states"] > 1

    def test_counter_machine_rejected_by_commitment_modes(self):
        spec = counter_machine_to_rmas(parse_counter_program("halt\n"))
        for mode in (MODE_FB, MODE_FB_FLAT, MODE_ABSTRACT):
            with pytest.raises(SuccRejected):
                build_transition_system(spec, BuildConfig(mode=mode))

    def test_state_bound_enforced(self, ticket_spec):
        with pytest.raises(StateBoundExceeded):
            build_transition_system(
                ticket_spec, BuildConfig(mode=MODE_ABSTRACT, state_bound=3))

    def test_max_states_truncates(self, ticket_spec):
        ts = build_transition_system(
            ticket_spec, BuildConfig(mode=MODE_ABSTRACT, max_states=1))
        assert ts.truncated

    def test_missing_pool_is_config_error(self, ticket_spec):
        with pytest.raises(ConfigError):
            build_transition_system(ticket_spec, BuildConfig(mode=MODE_CONCRETE))

    def test_non_shallow_spec_rejected_outside_concrete(self, ping_spec):
        with pytest.raises(ConfigError):
            build_transition_system(ping_spec, BuildConfig(mode=MODE_FB))

    def test_order_db_is_strict_total_order(self, ticket_abstract_ts):
        for s in ticket_abstract_ts.states:
            order = s.order_db or Database()
            by_type: dict[str, set] = {}
            pairs: dict[str, set] = {}
            for rel, (a, c) in order.facts:
                t = rel[len("__lt_"):]
                by_type.setdefault(t, set()).update({a, c})
                pairs.setdefault(t, set()).add((a, c))
            for t, objs in by_type.items():
                ps = pairs[t]
                for a in objs:
                    assert (a, a) not in ps  # irreflexive
                for a, c in itertools.permutations(objs, 2):
                    assert ((a, c) in ps) != ((c, a) in ps)  # total
                for (a, c), (c2, d) in itertools.product(ps, ps):
                    if c == c2:
                        assert (a, d) in ps or a == d  # transitive


TAGGER = """
type Tagv string
facet TF of Tagv
service mkTag() -> TF
message stamp()
message wipe()

spec instSpec institutional {
  relation Tag(TF)
  relation Seen(TF)

  MyName(a) & !Tag(_) enables stamp() to a
  MyName(a) & Tag(_) enables wipe() to a

  action gen() {
    true ~> add { Tag(mkTag()) }
  }
  action clear() {
    Tag(x) ~> del { Tag(x) } add { Seen(x) }
    Seen(y) ~> del { Seen(y) }
  }

  on stamp() from s if true then gen()
  on wipe() from s if true then clear()
}
"""


class TestEqualityCommitmentAbstraction:
    def test_unordered_results_agree_with_exhaustive_pools(self):
        # string-valued service: equality commitments must both equate a
        # fresh result with the passive value and keep it apart
        from rmas.mucalc import flatten_property, model_check, parse_property

        spec = install_institutional(parse_spec(TAGGER))
        pool = {"Tagv": tuple(DataObject("Tagv", c) for c in ("a", "b", "c"))}
        ts_c = build_transition_system(
            spec, BuildConfig(mode=MODE_CONCRETE, pools=pool))
        ts_a = build_transition_system(spec, BuildConfig(mode=MODE_ABSTRACT))
        assert not ts_c.truncated and not ts_a.truncated
        props = [
            "mu Z. (exists x: Tagv. Tag@inst(x) & Seen@inst(x)) | <>Z",
            "mu Z. (exists x: Tagv, y: Tagv. Tag@inst(x) & Seen@inst(y) & x != y) | <>Z",
            "nu Z. (!(exists x: Tagv, y: Tagv. Tag@inst(x) & Tag@inst(y) & x != y)) & []Z",
            "mu Z. (exists x: Tagv. Seen@inst(x)) | <>Z",
        ]
        for text in props:
            v1 = model_check(ts_c, spec, parse_property(text, spec)).truth
            v2 = model_check(ts_a, spec,
                             flatten_property(parse_property(text, spec))).truth
            assert v1 is True and v2 is True


class TestThreeClients:
    def test_bigger_population_still_closes_and_verifies(self):
        from rmas.mucalc import flatten_property, model_check, parse_property
        from conftest import CORPUS

        text = (CORPUS / "ticket_mutex.rmas").read_text().replace(
            "agent c2 : client", "agent c2 : client\nagent c3 : client")
        spec = install_institutional(parse_spec(text))
        ts = build_transition_system(
            spec, BuildConfig(mode=MODE_ABSTRACT, max_states=500000))
        assert not ts.truncated
        for prop in ("safety", "fifo"):
            p = flatten_property(parse_property(
                (CORPUS / "props" / "ticket_mutex" / f"{prop}.mlp").read_text(), spec))
            assert model_check(ts, spec, p).truth


class TestRecycling:
    def test_registry_reuses_retired_agent_names(self, registry_spec):
        # unboundedly many workers over time, one alive at a time: the
        # abstraction must close by recycling the retired name
        ts = build_transition_system(registry_spec, BuildConfig(mode=MODE_ABSTRACT))
        assert not ts.truncated
        workers = set()
        for s in ts.states:
            for (name, _) in s.agent_dbs:
                if name.value != "inst":
                    workers.add(name.value)
        # FreshAg keeps the retired name active for one extra round, so two
        # names alternate; the point is that infinitely many creations reuse
        # a fixed finite set
        assert len(workers) == 2

    def test_passive_objects_feed_fresh_results(self, ticket_spec):
        ts = build_transition_system(ticket_spec, BuildConfig(mode=MODE_ABSTRACT))
        tickets = set()
        for s in ts.states:
            for o in s.adom("Real"):
                tickets.add(o)
        # closure with finitely many representatives despite unbounded draws
        assert not ts.truncated
        assert 0 < len(tickets) <= 8


class TestDeterminism:
    def test_identical_builds(self, ticket_spec):
        cfg = BuildConfig(mode=MODE_ABSTRACT)
        a = build_transition_system(ticket_spec, cfg)
        b = build_transition_system(ticket_spec, cfg)
        assert [state_key(s) for s in a.states] == [state_key(s) for s in b.states]
        assert a.edges == b.edges

    def test_workers_do_not_change_the_result(self, ticket_spec):
        a = build_transition_system(ticket_spec, BuildConfig(mode=MODE_ABSTRACT, workers=1))
        b = build_transition_system(ticket_spec, BuildConfig(mode=MODE_ABSTRACT, workers=4))
        assert export_jsonl(a) == export_jsonl(b)

    def test_fb_successor_count_bounded_by_bell_product(self, ticket_spec):
        from oracles import bell
        import math

        b = Builder(ticket_spec, BuildConfig(mode=MODE_FB))
        s0 = b.initial_state()
        cur = b.current_agents(s0)
        total_msgs = sum(
            len(b.enabled_messages(s0, a, sn, {x for x, _ in cur})) for a, sn in cur
        )
        succs = b.step_successors(s0)
        # |ADom| per type at the first step is at most 4 here
        bound = total_msgs
        for t in b.spec.types:
            n = len(b.const_domain.get(t, ())) + len(s0.adom(t)) + 1
            bound *= bell(n) * math.factorial(n)
        assert len(succs) <= bound


class TestStateKey:
    def test_same_state_same_key(self, ticket_builder):
        s = ticket_builder.initial_state()
        s2 = ticket_builder.initial_state()
        assert state_key(s) == state_key(s2)

    def test_one_fact_difference(self, ticket_builder):
        s = ticket_builder.initial_state()
        dbs = {a: d for a, d in s.agent_dbs}
        dbs[agent("inst")] = dbs[agent("inst")].apply(
            adds=[("inCritical", (agent("c1"),))], dels=[])
        assert state_key(make_state(dbs, s.order_db)) != state_key(s)

    def test_insertion_order_irrelevant(self):
        f1 = ("R", (agent("a"),))
        f2 = ("S", (agent("b"),))
        d1 = Database.of([f1, f2])
        d2 = Database.of([f2, f1])
        s1 = make_state({agent("inst"): d1}, None)
        s2 = make_state({agent("inst"): d2}, None)
        assert state_key(s1) == state_key(s2)


class TestExport:
    def test_single_state_dot(self):
        spec = install_institutional(parse_spec(""))
        ts = build_transition_system(spec, BuildConfig(mode=MODE_CONCRETE))
        dot = export_dot(ts).decode()
        assert dot.count("label=") == 1
        assert "->" not in dot

    def test_chain_jsonl_counts(self):
        spec = counter_machine_to_rmas(parse_counter_program("inc 1 2\nhalt\n"))
        pool = {"Int": tuple(DataObject("Int", i) for i in range(3))}
        ts = build_transition_system(spec, BuildConfig(mode=MODE_CONCRETE, pools=pool))
        lines = export_jsonl(ts).decode().splitlines()
        states = [l for l in lines if '"kind": "state"' in l]
        edges = [l for l in lines if '"kind": "edge"' in l]
        assert len(states) == ts.stats["states"]
        assert len(edges) == ts.stats["edges"]

    def test_roundtrip_under_state_key(self, ticket_abstract_ts):
        data = export_jsonl(ticket_abstract_ts)
        back = import_jsonl(data)
        assert [state_key(s) for s in back.states] == [
            state_key(s) for s in ticket_abstract_ts.states
        ]
        assert back.edges == ticket_abstract_ts.edges
        assert export_jsonl(back) == data

    def test_unknown_format(self, ticket_abstract_ts):
        with pytest.raises(ConfigError):
            export(ticket_abstract_ts, "xml")
