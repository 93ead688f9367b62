"""Typed data objects, facets, relation schemas, and database instances.

Every value in the system is a DataObject tagged with the name of its data
type; domains of distinct types are disjoint by construction.  Rationals are
exact fractions (midpoint arguments for dense orders must never round).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Union


class Undef:
    """Distinguished "undefined" literal; one per data type via tagging."""

    _inst: Optional["Undef"] = None

    def __new__(cls) -> "Undef":
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "undef"


UNDEF = Undef()

Literal = Union[str, int, Fraction, Undef]

SYMBOLIC = "symbolic"
STRING = "string"
RATIONAL = "rational"
INTEGER = "integer"

CARRIERS = (SYMBOLIC, STRING, RATIONAL, INTEGER)

# Built-in type names: agent names and specification names behave as pure
# names and can only be tested for (in)equality.
AGENT_TYPE = "agent"
SPEC_TYPE = "spec"
INST_NAME = "inst"


class DataError(Exception):
    pass


@dataclass(frozen=True)
class DataTypeDef:
    """A data type: an infinite carrier plus its rigid relations.

    Equality is always available.  `less` is a dense total order and is only
    allowed on the rational carrier; `succ` is only allowed on integers and
    makes verification undecidable (the decidable pipelines reject it).
    """

    name: str
    carrier: str
    has_less: bool = False
    has_succ: bool = False
    role: Optional[str] = None  # "agent" / "spec" for the two built-ins

    def __post_init__(self) -> None:
        if self.carrier not in CARRIERS:
            raise DataError(f"unknown carrier {self.carrier!r} for type {self.name}")
        if self.has_less and self.carrier != RATIONAL:
            raise DataError(f"type {self.name}: dense order requires the rational carrier")
        if self.has_succ and self.carrier != INTEGER:
            raise DataError(f"type {self.name}: succ requires the integer carrier")


def builtin_types() -> dict[str, DataTypeDef]:
    return {
        AGENT_TYPE: DataTypeDef(AGENT_TYPE, SYMBOLIC, role="agent"),
        SPEC_TYPE: DataTypeDef(SPEC_TYPE, SYMBOLIC, role="spec"),
    }


@dataclass(frozen=True, order=False)
class DataObject:
    """A typed constant.  Equality is (type, literal) equality."""

    type_name: str
    value: Literal

    def is_undef(self) -> bool:
        return isinstance(self.value, Undef)

    def sort_key(self):
        # Canonical, semantics-free ordering used for deterministic output:
        # undef first, then literals by their natural order within the carrier.
        if isinstance(self.value, Undef):
            return (self.type_name, 0, "")
        if isinstance(self.value, str):
            return (self.type_name, 1, self.value)
        return (self.type_name, 2, Fraction(self.value))

    def __repr__(self) -> str:
        return f"{self.value!r}:{self.type_name}"


def mk_symbol(type_name: str, token: str) -> DataObject:
    return DataObject(type_name, token)


def mk_string(type_name: str, s: str) -> DataObject:
    return DataObject(type_name, s)


def mk_rational(type_name: str, value) -> DataObject:
    return DataObject(type_name, Fraction(value))


def mk_integer(type_name: str, value: int) -> DataObject:
    return DataObject(type_name, int(value))


def mk_undef(type_name: str) -> DataObject:
    return DataObject(type_name, UNDEF)


def literal_matches_carrier(value: Literal, carrier: str) -> bool:
    if isinstance(value, Undef):
        return True
    if carrier in (SYMBOLIC, STRING):
        return isinstance(value, str)
    if carrier == RATIONAL:
        return isinstance(value, Fraction)
    if carrier == INTEGER:
        return isinstance(value, int)
    return False


def carrier_less(a: DataObject, b: DataObject) -> bool:
    """The rigid dense order of a carrier; undef sorts below everything."""
    if a.type_name != b.type_name:
        return False
    if a.is_undef():
        return not b.is_undef()
    if b.is_undef():
        return False
    return a.value < b.value


def carrier_succ(a: DataObject, b: DataObject) -> bool:
    """a is the successor of b (integers only)."""
    if a.type_name != b.type_name or a.is_undef() or b.is_undef():
        return False
    return a.value == b.value + 1


class NameAllocator:
    """Issues fresh symbolic tokens with monotonically increasing ordinals.

    Fresh tokens carry a '~' prefix so they can never collide with declared
    identifiers; one allocator per build keeps repeated runs reproducible.
    """

    def __init__(self) -> None:
        self._counters: dict[str, int] = {}

    def fresh(self, prefix: str) -> str:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return f"~{prefix}{n}"


# ---------------------------------------------------------------------------
# Facets


class FacetFormula:
    """Monadic formula over the single variable x and same-type constants."""

    def constants(self) -> frozenset[DataObject]:
        raise NotImplementedError

    def holds(self, d: DataObject) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class FTrue(FacetFormula):
    def constants(self) -> frozenset[DataObject]:
        return frozenset()

    def holds(self, d: DataObject) -> bool:
        return True


@dataclass(frozen=True)
class FFalse(FacetFormula):
    # Abbreviation for Not(True).
    def constants(self) -> frozenset[DataObject]:
        return frozenset()

    def holds(self, d: DataObject) -> bool:
        return False


# Facet atom terms are either the bound variable x (marker string "x") or a
# DataObject of the facet's base type.
X = "x"
FTerm = Union[str, DataObject]


@dataclass(frozen=True)
class FAtom(FacetFormula):
    rel: str  # "eq" | "less" | "succ"
    left: FTerm
    right: FTerm

    def constants(self) -> frozenset[DataObject]:
        return frozenset(t for t in (self.left, self.right) if isinstance(t, DataObject))

    def holds(self, d: DataObject) -> bool:
        a = d if self.left == X else self.left
        b = d if self.right == X else self.right
        if self.rel == "eq":
            return a == b
        if self.rel == "less":
            return carrier_less(a, b)
        if self.rel == "succ":
            return carrier_succ(a, b)
        raise DataError(f"unknown facet relation {self.rel!r}")


@dataclass(frozen=True)
class FNot(FacetFormula):
    body: FacetFormula

    def constants(self) -> frozenset[DataObject]:
        return self.body.constants()

    def holds(self, d: DataObject) -> bool:
        return not self.body.holds(d)


@dataclass(frozen=True)
class FOr(FacetFormula):
    left: FacetFormula
    right: FacetFormula

    def constants(self) -> frozenset[DataObject]:
        return self.left.constants() | self.right.constants()

    def holds(self, d: DataObject) -> bool:
        return self.left.holds(d) or self.right.holds(d)


@dataclass(frozen=True)
class FAnd(FacetFormula):
    # Abbreviation for Not(Or(Not, Not)).
    left: FacetFormula
    right: FacetFormula

    def constants(self) -> frozenset[DataObject]:
        return self.left.constants() | self.right.constants()

    def holds(self, d: DataObject) -> bool:
        return self.left.holds(d) and self.right.holds(d)


@dataclass(frozen=True)
class Facet:
    """A data type restricted by a monadic formula; base facet = True."""

    name: str
    base_type: str
    formula: FacetFormula = field(default_factory=FTrue)
    initial_objects: frozenset[DataObject] = frozenset()

    def is_base(self) -> bool:
        return isinstance(self.formula, FTrue)

    def all_initial_objects(self) -> frozenset[DataObject]:
        return self.initial_objects | self.formula.constants()


def facet_member(facet: Facet, d: DataObject, types: dict[str, DataTypeDef]) -> bool:
    """Membership of a data object in a facet.

    A type mismatch is a defined False, not an error.  The undef object of a
    type belongs to every facet of that type (buffered payload slots rely on
    this).
    """
    if d.type_name != facet.base_type:
        return False
    t = types.get(facet.base_type)
    if t is None:
        return False
    if not literal_matches_carrier(d.value, t.carrier):
        return False
    if d.is_undef():
        return True
    return facet.formula.holds(d)


# ---------------------------------------------------------------------------
# Relation schemas and database instances


@dataclass(frozen=True)
class TypedRelationSchema:
    name: str
    facets: tuple[str, ...]  # facet names, one per component

    @property
    def arity(self) -> int:
        return len(self.facets)


Fact = tuple[str, tuple[DataObject, ...]]


def fact_key(fact: Fact):
    rel, args = fact
    return (rel, tuple(a.sort_key() for a in args))


class UnknownRelation(DataError):
    pass


@dataclass(frozen=True)
class Violation:
    fact: Fact
    position: int  # 1-based component index
    facet: str


@dataclass(frozen=True)
class Database:
    """A finite set of facts under set semantics; immutable and hashable."""

    facts: frozenset[Fact] = frozenset()

    @staticmethod
    def of(facts: Iterable[Fact]) -> "Database":
        return Database(frozenset(facts))

    def __iter__(self) -> Iterator[Fact]:
        return iter(self.facts)

    def __len__(self) -> int:
        return len(self.facts)

    def facts_for(self, rel: str) -> list[tuple[DataObject, ...]]:
        return [args for (r, args) in self.facts if r == rel]

    def has(self, rel: str, args: tuple[DataObject, ...]) -> bool:
        return (rel, args) in self.facts

    def relations(self) -> set[str]:
        return {r for (r, _) in self.facts}

    def adom(self, type_name: Optional[str] = None) -> set[DataObject]:
        objs = {o for (_, args) in self.facts for o in args}
        if type_name is None:
            return objs
        return {o for o in objs if o.type_name == type_name}

    def apply(self, adds: Iterable[Fact], dels: Iterable[Fact]) -> "Database":
        # Parallel update with priority to additions.
        return Database(frozenset((self.facts - frozenset(dels)) | frozenset(adds)))

    def union(self, other: "Database") -> "Database":
        return Database(self.facts | other.facts)

    def canonical(self) -> list[Fact]:
        return sorted(self.facts, key=fact_key)


def conforms(
    schema: dict[str, TypedRelationSchema],
    db: Database,
    facets: dict[str, Facet],
    types: dict[str, DataTypeDef],
) -> list[Violation]:
    """Check every fact component against its component facet.

    Returns one violation per offending (fact, position); raises
    UnknownRelation if a fact's relation is not in the schema.
    """
    out: list[Violation] = []
    for fact in sorted(db.facts, key=fact_key):
        rel, args = fact
        rs = schema.get(rel)
        if rs is None:
            raise UnknownRelation(f"relation {rel!r} not in schema")
        if len(args) != rs.arity:
            raise UnknownRelation(f"fact {rel!r} has arity {len(args)}, schema says {rs.arity}")
        for i, (obj, fname) in enumerate(zip(args, rs.facets), start=1):
            if not facet_member(facets[fname], obj, types):
                out.append(Violation(fact, i, fname))
    return out


def active_domain(dbs: Iterable[Database], t: DataTypeDef) -> set[DataObject]:
    """All objects of type t appearing in any fact of any of the databases."""
    out: set[DataObject] = set()
    for db in dbs:
        out |= db.adom(t.name)
    return out
