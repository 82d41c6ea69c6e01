import numpy as np
import pytest

from stabilab.model import CoeffBounds, DelayFunction, LipschitzModel, SddeSystem
from stabilab.presets import example1, example2


@pytest.fixture(scope="session")
def ex1():
    return example1()


@pytest.fixture(scope="session")
def ex2():
    return example2()


def scalar_system(drift, diffusion=None, tau=0.1, lipschitz=None, delay=None):
    """1-d system from scalar formulas ``f(x, y)`` and ``g(x, y)``."""

    def f(x, y):
        return drift(x[..., :1], y[..., :1])

    def g(x, y):
        lead = np.broadcast_shapes(x.shape, y.shape)[:-1]
        if diffusion is None:
            return np.zeros(lead + (1, 1))
        val = np.broadcast_to(diffusion(x[..., 0], y[..., 0]), lead)
        return np.asarray(val, dtype=float)[..., None, None]

    return SddeSystem(1, 1, f, g, delay or DelayFunction.constant(tau), lipschitz_model=lipschitz)


def random_metzler(rng, d, hurwitz=True):
    """Random (A, B) with A Metzler, B >= 0, and A + B Hurwitz when asked."""
    A = rng.uniform(0, 1, (d, d))
    B = rng.uniform(0, 0.5, (d, d))
    if hurwitz:
        np.fill_diagonal(A, 0.0)
        row = (A + B).sum(axis=1)
        np.fill_diagonal(A, -(row + rng.uniform(0.05, 1.0, d)))
    else:
        np.fill_diagonal(A, rng.uniform(-1, 1, d))
    return CoeffBounds(A, B)


@pytest.fixture
def make_scalar():
    return scalar_system


# ---- acceptance reporting ----------------------------------------------------

_CRITERIA = {}



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.when == "call" or rep.failed:
        prev = _CRITERIA.get(n, (title, True))
        _CRITERIA[n] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
