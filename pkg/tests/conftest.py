import numpy as np
import pytest

from chemoflow.mesh import Mesh, generate_rect_mesh
from chemoflow.scheme import build_spaces

_ACCEPTANCE = []


def single_triangle_mesh(p):
    return Mesh(np.asarray(p, dtype=float), np.array([[0, 1, 2]]))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def spaces8():
    return build_spaces(generate_rect_mesh(8, 8))


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line; printed again in the terminal summary."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
