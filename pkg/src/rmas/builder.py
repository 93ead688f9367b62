"""Transition-system construction: one engine, five modes.

The modes differ only in how they validate candidate databases (schema
conformance vs. constraints alone), how service results are chosen (finite
pools vs. commitment tuples), whether dense comparisons run on the carrier or
on maintained lessThan facts, and where fresh values come from (synthesis vs.
recycling of passive objects).  Exploration is a breadth-first closure with
canonical state deduplication; repeated builds are byte-identical, regardless
of the worker count.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Union

from .data import (
    AGENT_TYPE,
    INST_NAME,
    Database,
    DataObject,
    Fact,
    UNDEF,
    carrier_less,
    conforms,
    fact_key,
    mk_symbol,
)
from . import model as M
from . import queries as Q
from .commitments import (
    CallToken,
    CommitmentTuple,
    MIDPOINT,
    OPAQUE,
    PoolReservoir,
    SynthesisReservoir,
    assign_results,
    cell_object,
    enumerate_dense_commitments,
    enumerate_equality_commitments,
)
from .model import CallTerm, RmasSpec, UpdateRule, initial_data_domain
from .queries import CarrierOrder, Const, FactOrder, Param, Var, lessthan_rel
from .shallow import is_accessory, is_shallow


MODE_CONCRETE = "concrete-bounded"
MODE_SHALLOW = "shallow"
MODE_FB = "fb-commitments"
MODE_FB_FLAT = "fb-flat"
MODE_ABSTRACT = "abstract-recycle"

MODES = (MODE_CONCRETE, MODE_SHALLOW, MODE_FB, MODE_FB_FLAT, MODE_ABSTRACT)


class BuildError(Exception):
    pass


class ConfigError(BuildError):
    pass


class SuccRejected(BuildError):
    pass


class StateBoundExceeded(BuildError):
    def __init__(self, agent: str, size: int) -> None:
        super().__init__(f"agent {agent!r} stores {size} objects, over the bound")
        self.agent = agent
        self.size = size


@dataclass(frozen=True)
class BuildConfig:
    mode: str = MODE_CONCRETE
    state_bound: Optional[int] = None
    max_states: Optional[int] = None
    max_depth: Optional[int] = None
    # finite result pools per type name (concrete-bounded / shallow modes)
    pools: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def uses_commitments(self) -> bool:
        return self.mode in (MODE_FB, MODE_FB_FLAT, MODE_ABSTRACT)

    @property
    def flat(self) -> bool:
        return self.mode in (MODE_FB_FLAT, MODE_ABSTRACT)

    @property
    def check_conformance(self) -> bool:
        return self.mode == MODE_CONCRETE


@dataclass(frozen=True)
class SystemState:
    """Databases of the active agents (inst always present) plus, in flat
    modes, the explicit order-fact database."""

    agent_dbs: tuple[tuple[DataObject, Database], ...]  # sorted by agent key
    order_db: Optional[Database] = None

    def db(self, agent: DataObject) -> Optional[Database]:
        for name, d in self.agent_dbs:
            if name == agent:
                return d
        return None

    def agents(self) -> list[DataObject]:
        return [name for name, _ in self.agent_dbs]

    def inst_db(self) -> Database:
        d = self.db(mk_symbol(AGENT_TYPE, INST_NAME))
        if d is None:
            raise BuildError("institutional agent missing from state")
        return d

    def adom(self, type_name: Optional[str] = None) -> set[DataObject]:
        out: set[DataObject] = set()
        for _, d in self.agent_dbs:
            out |= d.adom(type_name)
        return out


def make_state(dbs: dict[DataObject, Database], order_db: Optional[Database]) -> SystemState:
    items = tuple(sorted(dbs.items(), key=lambda kv: kv[0].sort_key()))
    return SystemState(items, order_db)


def _obj_token(o: DataObject) -> str:
    if o.is_undef():
        return f"{o.type_name}#?"
    if isinstance(o.value, str):
        return f"{o.type_name}#s{o.value}"
    return f"{o.type_name}#n{o.value}"


def state_key(state: SystemState) -> bytes:
    """Canonical byte key: equal keys iff equal active-agent databases and
    order facts, under canonical fact ordering."""
    parts: list[str] = []
    for name, db in state.agent_dbs:
        parts.append("@" + _obj_token(name))
        for rel, args in db.canonical():
            parts.append(rel + "(" + ",".join(_obj_token(a) for a in args) + ")")
    if state.order_db is not None:
        parts.append("@<")
        for rel, args in state.order_db.canonical():
            parts.append(rel + "(" + ",".join(_obj_token(a) for a in args) + ")")
    return "\n".join(parts).encode()


@dataclass
class TransitionSystem:
    states: list[SystemState] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    initial: int = 0
    truncated: bool = False
    mode: str = MODE_CONCRETE
    stats: dict = field(default_factory=dict)

    def successors(self, sid: int) -> list[int]:
        return sorted({d for (s, d) in self.edges if s == sid})


# ---------------------------------------------------------------------------
# Pending facts: facts that may still embed service-call tokens

PendingArg = Union[DataObject, CallToken]
PendingFact = tuple[str, tuple[PendingArg, ...]]


def _pending_calls(facts: Iterable[PendingFact]) -> set[CallToken]:
    out: set[CallToken] = set()
    for _, args in facts:
        out |= {a for a in args if isinstance(a, CallToken)}
    return out


def _substitute(facts: Iterable[PendingFact], sigma: dict[CallToken, DataObject]) -> frozenset[Fact]:
    out = set()
    for rel, args in facts:
        out.add((rel, tuple(sigma[a] if isinstance(a, CallToken) else a for a in args)))
    return frozenset(out)


# ---------------------------------------------------------------------------
# The engine


class Builder:
    def __init__(self, spec: RmasSpec, config: BuildConfig) -> None:
        self.spec = spec
        self.config = config
        if config.uses_commitments and spec.uses_succ():
            raise SuccRejected(
                "successor-equipped types admit no finite abstraction; "
                "use concrete-bounded exploration")
        if config.mode != MODE_CONCRETE and not is_shallow(spec):
            raise ConfigError(f"mode {config.mode!r} requires a shallow-typed spec; "
                              "run the facet compiler first")
        self.const_domain = initial_data_domain(spec)
        self.flat = config.flat
        if self.flat:
            self.spec = _flatten_spec(spec)
        self._prepare()

    # -- static preparation ---------------------------------------------------

    def _prepare(self) -> None:
        spec = self.spec
        self.types = spec.types
        self.dense_types = [t.name for t in spec.dense_types()]
        self.unordered_types = [
            t for t in sorted(spec.types) if t not in self.dense_types
        ]
        self.comm_types: dict[tuple[str, int], dict[str, str]] = {}
        self.cond_types: dict[tuple[str, str, int], dict[str, str]] = {}
        self.guard_types: dict[tuple[str, str, int], dict[str, str]] = {}
        self.constraint_types: dict[tuple[str, int], dict[str, str]] = {}
        self.rules_by_msg: dict[tuple[str, str, str], list[tuple[int, UpdateRule]]] = {}
        for sname, ag in spec.agent_specs.items():
            ctx = spec.schema_context(ag)
            for i, rule in enumerate(ag.comm_rules):
                seeds = self._comm_seeds(rule)
                self.comm_types[(sname, i)] = _typed(rule.query, ctx, seeds)
            for i, rule in enumerate(ag.update_rules):
                seeds = self._rule_seeds(rule)
                self.cond_types[(sname, rule.message, i)] = _typed(rule.condition, ctx, seeds)
                self.rules_by_msg.setdefault((sname, rule.direction, rule.message), []).append(
                    (i, rule))
            for aname, act in ag.actions.items():
                ptypes = {p: spec.facets[f].base_type for p, f in act.params}
                for j, eff in enumerate(act.effects):
                    self.guard_types[(sname, aname, j)] = _typed(eff.guard, ctx, {}, ptypes)
            for i, c in enumerate(ag.constraints):
                self.constraint_types[(sname, i)] = _typed(c, ctx, {})

    def _comm_seeds(self, rule) -> dict[str, str]:
        msg = self.spec.messages[rule.message]
        seeds = {rule.target_var: AGENT_TYPE}
        for v, f in zip(rule.payload_vars, msg.payload_facets):
            seeds[v] = self.spec.facets[f].base_type
        return seeds

    def _rule_seeds(self, rule: UpdateRule) -> dict[str, str]:
        msg = self.spec.messages[rule.message]
        seeds = {rule.peer_var: AGENT_TYPE}
        for v, f in zip(rule.payload_vars, msg.payload_facets):
            seeds[v] = self.spec.facets[f].base_type
        return seeds

    # -- initial state ----------------------------------------------------------

    def initial_state(self) -> SystemState:
        spec = self.spec
        inst_obj = mk_symbol(AGENT_TYPE, INST_NAME)
        d0_inst = spec.inst_spec.initial_db
        dbs: dict[DataObject, Database] = {inst_obj: d0_inst}
        for args in d0_inst.facts_for(M.HASSPEC_REL):
            agent, spec_obj = args
            if agent == inst_obj:
                continue
            sname = spec_obj.value
            ag = spec.agent_specs.get(sname)
            if ag is None:
                raise BuildError(f"initial agent {agent!r} has unknown spec {sname!r}")
            dbs[agent] = ag.initial_db.apply(
                adds=[(M.MYNAME_REL, (agent,))], dels=[])
        order_db = self._initial_order_db() if self.flat else None
        return make_state(dbs, order_db)

    def _initial_order_db(self) -> Database:
        facts: set[Fact] = set()
        for t in self.dense_types:
            objs = sorted(self.const_domain.get(t, frozenset()), key=DataObject.sort_key)
            for a, b in itertools.combinations(objs, 2):
                if carrier_less(a, b):
                    facts.add((lessthan_rel(t), (a, b)))
                elif carrier_less(b, a):
                    facts.add((lessthan_rel(t), (b, a)))
        return Database.of(facts)

    # -- query plumbing -----------------------------------------------------------

    def _order(self, state: SystemState):
        if self.flat:
            return FactOrder(state.order_db or Database())
        return CarrierOrder()

    def _answers(self, q, db, order, var_types, binding=None):
        return Q.eval_query(q, db, order, var_types, self.const_domain, binding)

    def _holds(self, q, db, order, var_types, binding=None) -> bool:
        return bool(self._answers(q, db, order, var_types, binding))

    # -- figure building blocks ----------------------------------------------------

    def current_agents(self, state: SystemState) -> list[tuple[DataObject, str]]:
        out = []
        bound: dict[DataObject, str] = {}
        for args in sorted(state.inst_db().facts_for(M.HASSPEC_REL),
                           key=lambda a: tuple(x.sort_key() for x in a)):
            agent, spec_obj = args
            sname = spec_obj.value
            if sname not in self.spec.agent_specs:
                raise BuildError(f"agent {agent!r} has unknown spec {sname!r}")
            if bound.get(agent, sname) != sname:
                raise BuildError(f"agent {agent!r} is registered under two specs")
            if agent not in bound:
                bound[agent] = sname
                out.append((agent, sname))
        return out

    def enabled_messages(
        self, state: SystemState, sender: DataObject, sname: str,
        active: set[DataObject],
    ) -> list[tuple[str, tuple[DataObject, ...], DataObject]]:
        ag = self.spec.agent_specs[sname]
        db = state.db(sender)
        order = self._order(state)
        out: set[tuple[str, tuple[DataObject, ...], DataObject]] = set()
        for i, rule in enumerate(ag.comm_rules):
            var_types = self.comm_types[(sname, i)]
            msg = self.spec.messages[rule.message]
            for theta in self._answers(rule.query, db, order, var_types):
                target = theta.get(rule.target_var)
                if target is None or target not in active:
                    continue
                payload = tuple(theta[v] for v in rule.payload_vars)
                if self.config.check_conformance:
                    if not all(
                        _member(self.spec, f, o)
                        for f, o in zip(msg.payload_facets, payload)
                    ):
                        continue
                out.add((rule.message, payload, target))
        return sorted(out, key=lambda m: (m[0], tuple(o.sort_key() for o in m[1]),
                                          m[2].sort_key()))

    def collect_reactions(
        self, state: SystemState, agent: DataObject, sname: str, direction: str,
        message: str, payload: tuple[DataObject, ...], peer: DataObject,
    ) -> list[tuple[str, tuple[DataObject, ...]]]:
        ag = self.spec.agent_specs[sname]
        db = state.db(agent)
        order = self._order(state)
        out: set[tuple[str, tuple[DataObject, ...]]] = set()
        for i, rule in self.rules_by_msg.get((sname, direction, message), ()):
            binding = {rule.peer_var: peer}
            binding.update(dict(zip(rule.payload_vars, payload)))
            var_types = self.cond_types[(sname, message, i)]
            if not self._holds(rule.condition, db, order, var_types, binding):
                continue
            act = ag.actions[rule.action]
            args = tuple(
                binding[a.name] if isinstance(a, Var) else a.obj for a in rule.args
            )
            if self.config.check_conformance:
                if not all(_member(self.spec, f, o)
                           for (_, f), o in zip(act.params, args)):
                    continue
            out.add((rule.action, args))
        return sorted(out, key=lambda inst: (inst[0], tuple(o.sort_key() for o in inst[1])))

    def get_facts(
        self, state: SystemState, agent: DataObject, sname: str,
        instances: list[tuple[str, tuple[DataObject, ...]]],
    ) -> tuple[set[Fact], set[PendingFact]]:
        ag = self.spec.agent_specs[sname]
        db = state.db(agent)
        order = self._order(state)
        to_del: set[Fact] = set()
        to_add: set[PendingFact] = set()
        for aname, args in instances:
            act = ag.actions[aname]
            values = {p: v for (p, _), v in zip(act.params, args)}
            for j, eff in enumerate(act.effects):
                guard = Q.substitute_params(eff.guard, values)
                var_types = self.guard_types[(sname, aname, j)]
                for theta in self._answers(guard, db, order, var_types):
                    for tpl in eff.adds:
                        to_add.add(_ground_template(tpl, theta, values))
                    for tpl in eff.dels:
                        fact = _ground_template(tpl, theta, values)
                        if any(isinstance(a, CallToken) for a in fact[1]):
                            raise BuildError(f"service call in delete fact {fact[0]!r}")
                        to_del.add(fact)  # type: ignore[arg-type]
        return to_del, to_add

    # -- service results -------------------------------------------------------------

    def _sigma_branches(
        self, state: SystemState, calls: set[CallToken], used_snapshot: dict[str, set[DataObject]],
    ) -> Iterator[tuple[dict[CallToken, DataObject], Optional[Database]]]:
        """All choices of service results, with the rebuilt full order DB in
        flat modes (None otherwise)."""
        if not self.config.uses_commitments:
            yield from self._pool_branches(calls)
            return
        yield from self._commitment_branches(state, calls, used_snapshot)

    def _pool_branches(self, calls):
        tokens = sorted(calls, key=CallToken.sort_key)
        choices: list[list[DataObject]] = []
        for tok in tokens:
            svc = self.spec.services[tok.service]
            out_facet = self.spec.facets[svc.output_facet]
            pool = self.config.pools.get(out_facet.base_type)
            if pool is None:
                raise ConfigError(
                    f"mode {self.config.mode!r} needs a finite pool for type "
                    f"{out_facet.base_type!r} (service {tok.service!r})")
            cands = [o for o in pool]
            if self.config.check_conformance:
                cands = [o for o in cands if _member(self.spec, svc.output_facet, o)]
            choices.append(sorted(cands, key=DataObject.sort_key))
        for combo in itertools.product(*choices):
            yield dict(zip(tokens, combo)), None

    def _commitment_branches(self, state, calls, used_snapshot):
        spec = self.spec
        adom_by_type: dict[str, list] = {}
        for t in sorted(spec.types):
            objs = {o for o in self.const_domain.get(t, frozenset())}
            objs |= state.adom(t)
            toks = {
                tok for tok in calls
                if spec.facets[spec.services[tok.service].output_facet].base_type == t
            }
            adom_by_type[t] = sorted(objs, key=DataObject.sort_key) + sorted(
                toks, key=CallToken.sort_key)

        order = self._order(state)
        per_type: list[tuple[str, bool, list]] = []
        for t in self.unordered_types:
            toks_here = [e for e in adom_by_type[t] if isinstance(e, CallToken)]
            if not toks_here:
                continue
            per_type.append((t, False, list(enumerate_equality_commitments(adom_by_type[t]))))
        for t in self.dense_types:
            if self.flat:
                lt = lambda a, b, _t=t: order.less(_t, a, b)
            else:
                lt = carrier_less
            per_type.append((t, True, list(enumerate_dense_commitments(adom_by_type[t], lt))))

        names = [t for t, _, _ in per_type]
        dense_flags = [d for _, d, _ in per_type]
        pools = [cs for _, _, cs in per_type]
        for combo in itertools.product(*pools):
            h = CommitmentTuple()
            for t, is_dense, c in zip(names, dense_flags, combo):
                if is_dense:
                    h.dense[t] = c
                else:
                    h.equality[t] = c
            reservoirs = {}
            for t in names:
                reservoirs[t] = self._reservoir(t, h, state, used_snapshot)
            policy = MIDPOINT if self.config.mode == MODE_FB else OPAQUE
            sigma = assign_results(h, reservoirs, policy)
            order_full = self._rebuild_order(h, sigma) if self.flat else None
            yield sigma, order_full

    def _reservoir(self, t: str, h: CommitmentTuple, state: SystemState, used_snapshot):
        carrier = self.spec.types[t].carrier
        if self.config.mode != MODE_ABSTRACT:
            return SynthesisReservoir(t, carrier)
        commitment = h.dense.get(t)
        cells = commitment.partition.cells if commitment else h.equality[t].cells
        free = sum(1 for c in cells if cell_object(c) is None)
        active = state.adom(t) | set(self.const_domain.get(t, frozenset()))
        passive = used_snapshot.get(t, set()) - active
        if free <= len(passive) and free > 0:
            return PoolReservoir(passive)
        return SynthesisReservoir(t, carrier)

    def _rebuild_order(self, h: CommitmentTuple, sigma) -> Database:
        facts: set[Fact] = set()
        for t, commitment in h.dense.items():
            rel = lessthan_rel(t)
            seq = []
            for cell in commitment.pos:
                obj = cell_object(cell)
                if obj is None:
                    tok = next(e for e in cell if isinstance(e, CallToken))
                    obj = sigma[tok]
                seq.append(obj)
            for i, a in enumerate(seq):
                for b in seq[i + 1:]:
                    if a != b:
                        facts.add((rel, (a, b)))
        return Database.of(facts)

    # -- one exploration step ------------------------------------------------------------

    def step_successors(
        self, state: SystemState, used_snapshot: Optional[dict[str, set[DataObject]]] = None,
    ) -> list[SystemState]:
        used_snapshot = used_snapshot or {}
        cur_as = self.current_agents(state)
        active = {a for a, _ in cur_as}
        out: list[SystemState] = []
        for sender, s_spec in cur_as:
            for message, payload, target in self.enabled_messages(state, sender, s_spec, active):
                t_spec = dict(cur_as)[target]
                out.extend(self._exchange(
                    state, sender, s_spec, target, t_spec, message, payload,
                    cur_as, used_snapshot))
        return out

    def _exchange(
        self, state, sender, s_spec, target, t_spec, message, payload, cur_as,
        used_snapshot,
    ) -> list[SystemState]:
        inst_obj = mk_symbol(AGENT_TYPE, INST_NAME)
        acts_send = self.collect_reactions(
            state, sender, s_spec, M.ON_SEND, message, payload, target)
        acts_recv = self.collect_reactions(
            state, target, t_spec, M.ON_RECEIVE, message, payload, sender)
        if sender == target:
            participants = [(sender, s_spec, sorted(set(acts_send) | set(acts_recv)))]
        else:
            participants = [(sender, s_spec, acts_send), (target, t_spec, acts_recv)]

        pend: dict[DataObject, set[PendingFact]] = {}
        for agent, sname, acts in participants:
            to_del, to_add = self.get_facts(state, agent, sname, acts)
            base = {(r, a) for (r, a) in state.db(agent).facts if (r, a) not in to_del}
            pend[agent] = base | to_add

        calls = set()
        for facts in pend.values():
            calls |= _pending_calls(facts)

        if self.config.check_conformance:
            for tok in sorted(calls, key=CallToken.sort_key):
                svc = self.spec.services[tok.service]
                if not all(_member(self.spec, f, o)
                           for f, o in zip(svc.input_facets, tok.args)):
                    return []  # inputs break the service typing: no successor here

        out: list[SystemState] = []
        for sigma, order_full in self._sigma_branches(state, calls, used_snapshot):
            new_dbs: dict[DataObject, Database] = {}
            order = FactOrder(order_full) if self.flat else CarrierOrder()
            for agent, sname, _ in participants:
                cand = Database(_substitute(pend[agent], sigma))
                if self._acceptable(sname, cand, order):
                    new_dbs[agent] = cand
                else:
                    new_dbs[agent] = state.db(agent)

            # determine the possibly-changed set of active agents
            if sender == inst_obj or target == inst_obj:
                inst_db = new_dbs.get(inst_obj, state.inst_db())
                new_as = []
                for args in inst_db.facts_for(M.HASSPEC_REL):
                    sname = args[1].value
                    if sname not in self.spec.agent_specs:
                        raise BuildError(f"agent {args[0]!r} bound to unknown spec {sname!r}")
                    new_as.append((args[0], sname))
            else:
                new_as = list(cur_as)
            if inst_obj not in {a for a, _ in new_as}:
                raise BuildError("institutional agent was removed")

            dbs: dict[DataObject, Database] = {}
            cur_names = {a for a, _ in cur_as}
            for agent, sname in new_as:
                if agent in new_dbs:
                    dbs[agent] = new_dbs[agent]
                elif agent not in cur_names:
                    ag = self.spec.agent_specs[sname]
                    dbs[agent] = ag.initial_db.apply(
                        adds=[(M.MYNAME_REL, (agent,))], dels=[])
                else:
                    dbs[agent] = state.db(agent)

            order_db = None
            if self.flat:
                # persisting objects: previous state, next state, constants
                keep = state.adom()
                for d in dbs.values():
                    keep |= d.adom()
                for objs in self.const_domain.values():
                    keep |= set(objs)
                order_db = Database.of(
                    f for f in (order_full or Database()).facts
                    if f[1][0] in keep and f[1][1] in keep
                )
            out.append(make_state(dbs, order_db))
        return out

    def _acceptable(self, sname: str, cand: Database, order) -> bool:
        ag = self.spec.agent_specs[sname]
        if self.config.check_conformance:
            try:
                if conforms(ag.schema, cand, self.spec.facets, self.spec.types):
                    return False
            except Exception:
                return False
        for i, c in enumerate(ag.constraints):
            var_types = self.constraint_types[(sname, i)]
            if not self._holds(c, cand, order, var_types):
                return False
        return True

    def _check_bound(self, state: SystemState) -> None:
        b = self.config.state_bound
        if b is None:
            return
        for name, db in state.agent_dbs:
            objs = {
                o for (rel, args) in db.facts if not is_accessory(rel) for o in args
            }
            if len(objs) > b:
                raise StateBoundExceeded(str(name.value), len(objs))

    # -- closure ---------------------------------------------------------------------------

    def build(self) -> TransitionSystem:
        ts = TransitionSystem(mode=self.config.mode)
        s0 = self.initial_state()
        self._check_bound(s0)
        index: dict[bytes, int] = {state_key(s0): 0}
        ts.states.append(s0)
        edges: set[tuple[int, int]] = set()
        used: dict[str, set[DataObject]] = {
            t: set(objs) for t, objs in self.const_domain.items()
        }
        for t in self.spec.types:
            used.setdefault(t, set())
        for o in s0.adom():
            used[o.type_name].add(o)

        frontier = [0]
        depth = 0
        peak = 1
        truncated = False
        workers = max(1, self.config.workers)
        while frontier:
            if self.config.max_depth is not None and depth >= self.config.max_depth:
                truncated = True
                break
            snapshot = {t: set(s) for t, s in used.items()}

            def expand(sid: int):
                return sid, self.step_successors(ts.states[sid], snapshot)

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(expand, frontier))
            else:
                results = [expand(sid) for sid in frontier]

            next_frontier: list[int] = []
            for sid, succs in results:
                for succ in succs:
                    self._check_bound(succ)
                    key = state_key(succ)
                    tid = index.get(key)
                    if tid is None:
                        if self.config.max_states is not None and \
                                len(ts.states) >= self.config.max_states:
                            truncated = True
                            continue
                        tid = len(ts.states)
                        ts.states.append(succ)
                        index[key] = tid
                        next_frontier.append(tid)
                        for o in succ.adom():
                            used[o.type_name].add(o)
                    edges.add((sid, tid))
            frontier = next_frontier
            peak = max(peak, len(frontier))
            depth += 1

        ts.edges = sorted(edges)
        ts.truncated = truncated
        max_adom = 0
        for s in ts.states:
            for _, db in s.agent_dbs:
                objs = {o for (rel, args) in db.facts if not is_accessory(rel)
                        for o in args}
                max_adom = max(max_adom, len(objs))
        ts.stats = {
            "states": len(ts.states),
            "edges": len(ts.edges),
            "max_agent_adom": max_adom,
            "peak_frontier": peak,
            "depth": depth,
        }
        return ts


def _member(spec: RmasSpec, facet_name: str, obj: DataObject) -> bool:
    from .data import facet_member

    return facet_member(spec.facets[facet_name], obj, spec.types)


def _typed(q, ctx, seeds: dict[str, str], param_types: Optional[dict[str, str]] = None):
    out = Q.typecheck_query(q, ctx, param_types=param_types, seed_types=seeds)
    out.update(seeds)
    return out


def _ground_template(tpl, theta, values) -> PendingFact:
    args: list[PendingArg] = []
    for term in tpl.terms:
        args.append(_ground_term(term, theta, values))
    return (tpl.rel, tuple(args))


def _ground_term(term, theta, values) -> PendingArg:
    if isinstance(term, Var):
        if term.name not in theta:
            raise BuildError(f"unbound template variable {term.name!r}")
        return theta[term.name]
    if isinstance(term, Param):
        return values[term.name]
    if isinstance(term, Const):
        return term.obj
    if isinstance(term, CallTerm):
        args = tuple(
            _ground_term(a, theta, values) for a in term.args
        )
        if any(isinstance(a, CallToken) for a in args):
            raise BuildError("nested service calls are not allowed")
        return CallToken(term.service, args)  # type: ignore[arg-type]
    raise BuildError(f"unknown template term {term!r}")


def _flatten_spec(spec: RmasSpec) -> RmasSpec:
    def fq(q):
        return Q.flatten_formula(q)

    agent_specs = {}
    for name, ag in spec.agent_specs.items():
        agent_specs[name] = replace(
            ag,
            constraints=tuple(fq(c) for c in ag.constraints),
            comm_rules=tuple(replace(r, query=fq(r.query)) for r in ag.comm_rules),
            update_rules=tuple(replace(r, condition=fq(r.condition)) for r in ag.update_rules),
            actions={
                n: replace(a, effects=tuple(
                    replace(e, guard=fq(e.guard)) for e in a.effects
                ))
                for n, a in ag.actions.items()
            },
        )
    return replace(spec, agent_specs=agent_specs)


def build_transition_system(spec: RmasSpec, config: BuildConfig) -> TransitionSystem:
    """Breadth-first closure of the step relation from the initial state."""
    return Builder(spec, config).build()


# ---------------------------------------------------------------------------
# Export / import


def _obj_json(o: DataObject):
    if o.is_undef():
        return {"t": o.type_name, "k": "u"}
    if isinstance(o.value, str):
        return {"t": o.type_name, "k": "s", "v": o.value}
    if isinstance(o.value, int):
        return {"t": o.type_name, "k": "i", "v": str(o.value)}
    return {"t": o.type_name, "k": "q", "v": str(o.value)}


def _obj_from_json(d) -> DataObject:
    if d["k"] == "u":
        return DataObject(d["t"], UNDEF)
    if d["k"] == "s":
        return DataObject(d["t"], d["v"])
    if d["k"] == "i":
        return DataObject(d["t"], int(d["v"]))
    return DataObject(d["t"], Fraction(d["v"]))


def _db_json(db: Database):
    return [[rel, [_obj_json(a) for a in args]] for rel, args in db.canonical()]


def _db_from_json(rows) -> Database:
    return Database.of(
        (rel, tuple(_obj_from_json(a) for a in args)) for rel, args in rows
    )


def export_jsonl(ts: TransitionSystem) -> bytes:
    lines = [json.dumps({
        "kind": "meta", "mode": ts.mode, "initial": ts.initial,
        "truncated": ts.truncated, "stats": ts.stats,
    }, sort_keys=True)]
    for i, s in enumerate(ts.states):
        rec = {
            "kind": "state", "id": i,
            "agents": [
                [_obj_json(name), _db_json(db)] for name, db in s.agent_dbs
            ],
        }
        if s.order_db is not None:
            rec["order"] = _db_json(s.order_db)
        lines.append(json.dumps(rec, sort_keys=True))
    for (a, b) in ts.edges:
        lines.append(json.dumps({"kind": "edge", "src": a, "dst": b}, sort_keys=True))
    return ("\n".join(lines) + "\n").encode()


def import_jsonl(data: bytes) -> TransitionSystem:
    ts = TransitionSystem()
    states: dict[int, SystemState] = {}
    for line in data.decode().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["kind"] == "meta":
            ts.mode = rec["mode"]
            ts.initial = rec["initial"]
            ts.truncated = rec["truncated"]
            ts.stats = rec.get("stats", {})
        elif rec["kind"] == "state":
            dbs = {
                _obj_from_json(name): _db_from_json(rows) for name, rows in rec["agents"]
            }
            order = _db_from_json(rec["order"]) if "order" in rec else None
            states[rec["id"]] = make_state(dbs, order)
        else:
            ts.edges.append((rec["src"], rec["dst"]))
    ts.states = [states[i] for i in sorted(states)]
    ts.edges.sort()
    return ts


def export_dot(ts: TransitionSystem) -> bytes:
    lines = ["digraph ts {"]
    for i, s in enumerate(ts.states):
        label = f"s{i}\\n{len(s.agent_dbs)} agents"
        shape = ' shape=doublecircle' if i == ts.initial else ''
        lines.append(f'  s{i} [label="{label}"{shape}];')
    for (a, b) in ts.edges:
        lines.append(f"  s{a} -> s{b};")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode()


def export(ts: TransitionSystem, fmt: str) -> bytes:
    if fmt == "jsonl":
        return export_jsonl(ts)
    if fmt == "dot":
        return export_dot(ts)
    raise ConfigError(f"unknown export format {fmt!r}")
