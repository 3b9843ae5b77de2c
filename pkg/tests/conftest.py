import math

import numpy as np
import pytest
from hypothesis import strategies as st

from clrpool.cohort import cohort_from_tensor
from clrpool.engine import ConditionalDesign


def naive_loglik(X, offsets, beta):
    """Direct summed-exponential evaluation, one stratum at a time."""
    total = 0.0
    for i in range(len(offsets) - 1):
        rows = X[offsets[i]:offsets[i + 1]]
        eta = [sum(b * x for b, x in zip(beta, r)) for r in rows]
        total += eta[0] - math.log(sum(math.exp(e) for e in eta))
    return total


def random_design(rng, n_strata=None, p=None, max_width=5, scale=1.0, ragged=True):
    n_strata = n_strata or int(rng.integers(1, 8))
    p = p or int(rng.integers(1, 4))
    widths = rng.integers(2, max_width + 1, size=n_strata) if ragged else np.full(n_strata, 3)
    offsets = np.concatenate([[0], np.cumsum(widths)])
    X = rng.normal(scale=scale, size=(offsets[-1], p))
    return ConditionalDesign(X, offsets, [f"x{j}" for j in range(p)])


def random_cohort(rng, n_sets, m=2, q=2, prefix="s", node="node1"):
    values = rng.normal(size=(n_sets, m + 1, q))
    values[:, 0, 0] += 0.7          # some signal so fits converge
    return cohort_from_tensor(values, [f"v{j}" for j in range(q)], node, prefix)


@st.composite
def designs(draw, max_strata=6, max_p=3, max_width=4):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = draw(st.integers(1, max_strata))
    p = draw(st.integers(1, max_p))
    d = random_design(rng, n, p, max_width)
    beta = rng.normal(scale=0.7, size=p)
    return d, beta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_mc():
    """The full default Monte Carlo (500 reps), run once per session."""
    from clrpool.sim import SimParams, run_monte_carlo
    return run_monte_carlo(SimParams())


# --- acceptance summary: one pass/fail line per criterion ---------------------------------

_criteria: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        num, label = name.split("_")[2], " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} ({label}): {_criteria[name]}")
