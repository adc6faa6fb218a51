import numpy as np
import pytest

from mlp_pde.problem import make_heat_problem, make_manufactured_gradient_problem


@pytest.fixture
def rng():
    # test-side randomness only; the library never touches numpy's global state
    return np.random.default_rng(20240611)


@pytest.fixture
def manufactured_1d():
    return make_manufactured_gradient_problem(1, 1.0, 0.5)


@pytest.fixture
def cosine_2d():
    return make_heat_problem(2, 1.0, "cosine")


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""
    lines = request.config._acceptance_lines

    def report(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(" ")[0])):
            terminalreporter.write_line(line)
