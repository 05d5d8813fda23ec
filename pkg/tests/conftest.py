import numpy as np
import pytest

from kernelshape.mesh import ShapeSpec, generate_mesh
from kernelshape.optimizer import OptConfig

INITIAL = ShapeSpec.from_tuples([((0.15, 0.15), 0.1)])
TARGET = ShapeSpec.from_tuples([((0.65, 0.35), 0.2), ((0.7, 0.5), 0.1)])


@pytest.fixture(scope="session")
def config():
    return OptConfig()


@pytest.fixture(scope="session")
def problem(config):
    return config.problem()


@pytest.fixture(scope="session")
def initial_mesh():
    return generate_mesh(INITIAL, 100, 21)


@pytest.fixture(scope="session")
def target_mesh():
    return generate_mesh(TARGET, 100, 21)


@pytest.fixture(scope="session")
def initial_solution(problem, initial_mesh):
    return problem.solve(initial_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""
    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line, flush=True)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
