import numpy as np
import pytest

from qam.nn import seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(1234, "tests")


def fd_check(f, x, grad, eps=1e-4, rel=1e-4, floor=1e-8, idx=None):
    """Compare ``grad`` with central differences of scalar ``f`` at the flat vector ``x``."""
    x = np.array(x, dtype=np.float64)
    idx = range(x.size) if idx is None else idx
    worst = 0.0
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (f(xp) - f(xm)) / (2 * eps)
        err = abs(fd - grad[i])
        tol = rel * max(abs(fd), abs(grad[i])) + floor
        if err > tol:
            return False, i, fd, grad[i]
        worst = max(worst, err)
    return True, None, None, worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
