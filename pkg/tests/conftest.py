import numpy as np
import pytest
from scipy.integrate import solve_ivp

from contactgf.hamlang import compactify, parse

# moderate-amplitude family used by the path-space checks
FAMILY = [
    "0.25*p1^2 + 0.5*cos(q1)",
    "0.5*cos(q1) + 0.3*z",
    "0.25*p1^2 + 0.2*sin(q1 + t) - 0.2*z*p1",
    "0.3*z*cos(q1) + 0.2*p1^2",
]


def family():
    return [parse(s, 1) for s in FAMILY]


def compact(src, dim=1, R0=10.0, w=1.0):
    return compactify(parse(src, dim), R0, w)


def reference_flow(rhs, y0, t0, t1):
    """High-accuracy reference integration with an independently written vector field."""
    sol = solve_ivp(rhs, (t0, t1), np.asarray(y0, dtype=float), method="DOP853",
                    rtol=1e-13, atol=1e-13)
    return sol.y[:, -1]


def pendulum_rhs(a):
    """``H = p^2/2 + a cos(q)`` in one degree of freedom (no z-dependence)."""
    def f(t, y):
        q, p, z = y
        return [p, a * np.sin(q), p * p - (0.5 * p * p + a * np.cos(q))]
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
