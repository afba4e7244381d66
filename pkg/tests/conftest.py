import os
import shutil
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cacheshield.corpus import DESK_CACHE, EXAMPLE_A, EXAMPLE_B, EXAMPLE_THREE  # noqa: E402
from cacheshield.program import parse_program  # noqa: E402
from cacheshield.solver import Solver  # noqa: E402

HAVE_SOLVER = shutil.which(os.environ.get("CACHESHIELD_SOLVER", "z3")) is not None
needs_solver = pytest.mark.skipif(not HAVE_SOLVER, reason="no SMT solver on PATH")


@pytest.fixture(scope="session")
def solver():
    if not HAVE_SOLVER:
        pytest.skip("no SMT solver on PATH")
    return Solver(timeout=60)


@pytest.fixture(scope="session")
def exA():
    return parse_program(EXAMPLE_A)


@pytest.fixture(scope="session")
def exB():
    return parse_program(EXAMPLE_B)


@pytest.fixture(scope="session")
def three():
    return parse_program(EXAMPLE_THREE)


@pytest.fixture(scope="session")
def desk():
    return DESK_CACHE


def pytest_terminal_summary(terminalreporter):
    from report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
