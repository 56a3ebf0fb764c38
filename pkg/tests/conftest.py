import numpy as np
import pytest

from softvqa.catalog import FunctionCatalog
from softvqa.memory import MemoryLayout
from softvqa.schema import default_schema


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def catalog(schema):
    return FunctionCatalog.build(schema)


@pytest.fixture(scope="session")
def layout(schema):
    return MemoryLayout(10, schema)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[cid])
