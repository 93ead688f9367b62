import pytest

from rmas import queries as Q
from rmas.dsl import ParseError, ResolutionError, parse_spec, serialize_spec
from rmas.model import install_institutional
from rmas.queries import Var
from rmas.shallow import compile_shallow

from conftest import CORPUS, load_corpus

CORPUS_NAMES = ("ticket_mutex", "contract_net", "ping", "registry")


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_parse_serialize_roundtrip_raw(name):
    text = (CORPUS / f"{name}.rmas").read_text()
    spec = parse_spec(text)
    assert parse_spec(serialize_spec(spec)) == spec


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_roundtrip_installed(name):
    spec = load_corpus(name)
    assert install_institutional(parse_spec(serialize_spec(spec))) == spec


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_serialize_is_a_fixpoint(name):
    spec = load_corpus(name)
    text = serialize_spec(spec)
    assert serialize_spec(install_institutional(parse_spec(text))) == text


@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_roundtrip_compiled(name):
    spec = compile_shallow(load_corpus(name))
    assert install_institutional(parse_spec(serialize_spec(spec))) == spec


class TestTicketGolden:
    def test_actions_present(self, ticket_spec):
        inst = ticket_spec.inst_spec
        assert "genTicket" in inst.actions
        assert "bindTicket" in inst.actions

    def test_ticket_constraint_shape(self, ticket_spec):
        # forall tn, t. Assigned(_, tn) & hasTicket(_, t) -> tn > t
        inst = ticket_spec.inst_spec
        found = False
        for c in inst.constraints:
            if isinstance(c, Q.Forall):
                for a in Q.atoms(c):
                    if isinstance(a, Q.LessAtom) and a.type_name == "Real":
                        found = True
        assert found

    def test_gen_ticket_issues_service_call(self, ticket_spec):
        act = ticket_spec.inst_spec.actions["genTicket"]
        adds = [t for eff in act.effects for t in eff.adds]
        assert any(
            any(getattr(term, "service", None) == "getTicket" for term in tpl.terms)
            for tpl in adds
        )


class TestErrors:
    def test_malformed_rule_keyword_location(self):
        text = "spec instSpec institutional {\n  on ping(g) mangled a if true then x(g)\n}\n"
        with pytest.raises(ParseError) as err:
            parse_spec(text)
        assert err.value.line == 2

    def test_unknown_relation(self):
        text = "spec instSpec institutional {\n  init Nope(inst)\n}\n"
        with pytest.raises(ResolutionError):
            parse_spec(text)

    def test_unknown_facet_in_relation(self):
        with pytest.raises(ResolutionError):
            parse_spec("spec s { \n relation R(Mystery)\n }\n")

    def test_duplicate_relation(self):
        text = "spec s {\n relation R(AF)\n relation R(AF, AF)\n}\n"
        with pytest.raises(ParseError):
            parse_spec(text)

    def test_unexpected_character(self):
        with pytest.raises(ParseError):
            parse_spec("type ^ string\n")


class TestDesugaring:
    def test_anonymous_variable_scopes_to_its_atom(self, ticket_spec):
        # on askTicket() from a if !hasTicket(a, _) & !Assigned(_, _) ...
        rule = next(r for r in ticket_spec.inst_spec.update_rules
                    if r.message == "askTicket")
        # both negations must contain the existential inside, not outside
        assert isinstance(rule.condition, Q.And)
        for part in rule.condition.parts:
            assert isinstance(part, Q.Not)
            assert isinstance(part.body, Q.Exists)

    def test_constant_payload_desugars_to_fresh_variable(self):
        text = """
message m(AF)
spec instSpec institutional {
  MyName(a) & t = inst enables m(inst) to t
}
"""
        spec = install_institutional(parse_spec(text))
        rule = spec.inst_spec.comm_rules[0]
        (v,) = rule.payload_vars
        assert v.startswith("_p")
        assert v in Q.free_vars(rule.query)

    def test_empty_spec_defaults(self):
        spec = install_institutional(parse_spec(""))
        assert spec.institutional == "instSpec"
        assert list(spec.agent_specs) == ["instSpec"]

    def test_mode_flag_roundtrip(self):
        spec = parse_spec('mode "unsafe-succ"\n')
        assert "unsafe-succ" in spec.mode_flags
        assert parse_spec(serialize_spec(spec)).mode_flags == spec.mode_flags
