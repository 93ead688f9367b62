import pathlib
from fractions import Fraction

import pytest

from rmas import install_institutional, parse_spec
from rmas.data import DataObject
from rmas.shallow import compile_shallow

CORPUS = pathlib.Path(__file__).resolve().parent.parent / "corpus"


def load_corpus(name: str):
    return install_institutional(parse_spec((CORPUS / f"{name}.rmas").read_text()))


def prop_text(spec_name: str, prop_name: str) -> str:
    return (CORPUS / "props" / spec_name / f"{prop_name}.mlp").read_text()


def prop_paths(spec_name: str):
    return sorted((CORPUS / "props" / spec_name).glob("*.mlp"))


def rational_pool(type_name: str, values):
    return {type_name: tuple(DataObject(type_name, Fraction(v)) for v in values)}


@pytest.fixture(scope="session")
def ticket_spec():
    return load_corpus("ticket_mutex")


@pytest.fixture(scope="session")
def contract_spec():
    return load_corpus("contract_net")


@pytest.fixture(scope="session")
def ping_spec():
    return load_corpus("ping")


@pytest.fixture(scope="session")
def registry_spec():
    return load_corpus("registry")


@pytest.fixture(scope="session")
def ticket_shallow(ticket_spec):
    return compile_shallow(ticket_spec)


@pytest.fixture(scope="session")
def contract_shallow(contract_spec):
    return compile_shallow(contract_spec)


@pytest.fixture(scope="session")
def ping_shallow(ping_spec):
    return compile_shallow(ping_spec)
