import math

import numpy as np
import pytest

from stabilab.model import DelayFunction, GridSpec, InitialSegment, LipschitzModel
from stabilab.montecarlo import NoiseStream
from stabilab.schemes import (
    ConvergenceError,
    GridRejected,
    PathState,
    SchemeConfig,
    SchemeOverflowError,
    em_step,
    integrate_path,
    iterate_batch,
    lag_index,
    mtem_step,
    solve_implicit,
    theta_step,
)
from stabilab.truncation import TruncationConfig

from conftest import scalar_system


def bisect(fn, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(lo) * fn(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def state_of(values, m_bar=1):
    return PathState(np.array([[v] for v in values], dtype=float).reshape(m_bar + 1, 1), k=0)


# ---- lag index ---------------------------------------------------------------

def test_lag_index_constant_delay():
    d = DelayFunction.constant(0.1)
    assert [lag_index(d, k, 0.01) for k in (0, 1, 57)] == [10, 10, 10]


def test_lag_index_example1_delay():
    from stabilab.presets import example1_delay

    d = example1_delay()
    assert lag_index(d, 0, 0.01) == 10
    assert lag_index(d, 157, 0.01) == 0  # sin(1.57) ~ 1


def test_lag_index_example2_delay_at_zero():
    from stabilab.presets import example2_delay

    assert lag_index(example2_delay(), 0, 0.01) == 0


def test_lag_index_rejects_out_of_range():
    with pytest.raises(ValueError):
        lag_index(DelayFunction(lambda t: 0.2, 0.1), 0, 0.01)
    with pytest.raises(ValueError):
        lag_index(DelayFunction(lambda t: -0.01, 0.1), 0, 0.01)


# ---- single steps ----------------------------------------------------------------

def test_em_step_linear():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    x = em_step(s, state_of([1.0, 1.0]), 0.1, np.zeros(1))
    assert x[0] == pytest.approx(0.9, abs=1e-15)


def test_em_step_with_constant_noise():
    s = scalar_system(lambda x, y: -x, lambda x, y: 0.5 + 0.0 * x, tau=0.1)
    x = em_step(s, state_of([1.0, 2.0]), 0.1, np.array([0.3]))
    assert x[0] == pytest.approx(1.95, abs=1e-15)


def test_mtem_step_truncated_cubic():
    s = scalar_system(lambda x, y: x ** 3, tau=0.01)
    cfg = TruncationConfig(h0=2.0 * 0.01 ** 0.2, gamma=0.2)
    x = mtem_step(s, state_of([0.0, 4.0]), cfg, 0.01, np.zeros(1))
    assert x[0] == pytest.approx(4.16, abs=1e-12)


def test_theta_zero_bitwise_em(ex1):
    rng = np.random.default_rng(5)
    init = rng.normal(size=(11, 2))
    for _ in range(20):
        dW = rng.normal(scale=0.1, size=2)
        a = em_step(ex1.system, PathState(init.copy()), 0.01, dW)
        b = theta_step(ex1.system, PathState(init.copy()), 0.0, 0.01, dW)
        assert a.tobytes() == b.tobytes()


def test_backward_euler_closed_form():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    x = theta_step(s, state_of([1.0, 1.0]), 1.0, 0.1, np.zeros(1))
    assert x[0] == pytest.approx(1 / 1.1, abs=1e-12)


def test_cubic_implicit_step_matches_bisection():
    s = scalar_system(lambda x, y: -x ** 3, tau=0.1)
    x = theta_step(s, state_of([1.0, 1.0]), 1.0, 0.1, np.zeros(1))
    oracle = bisect(lambda z: z + 0.1 * z ** 3 - 1.0, 0.0, 1.0)
    assert oracle == pytest.approx(0.9216989942, abs=1e-9)
    assert x[0] == pytest.approx(oracle, abs=1e-10)


def test_half_theta_trapezoid():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    x = theta_step(s, state_of([1.0, 1.0]), 0.5, 0.1, np.zeros(1))
    assert x[0] == pytest.approx(0.95 / 1.05, abs=1e-12)


def test_lag_zero_uses_unknown_state():
    # f(x, y) = -y with y = x(t) when the delay vanishes at t_{k+1}
    s = scalar_system(lambda x, y: -y, delay=DelayFunction(lambda t: 0.0 if t > 0 else 0.1, 0.1))
    st = PathState(np.array([[5.0], [1.0]]))
    x = theta_step(s, st, 1.0, 0.1, np.zeros(1))
    assert x[0] == pytest.approx(1 / 1.1, abs=1e-12)


def test_theta_rejects_ill_posed_grid():
    s = scalar_system(lambda x, y: x, lipschitz=LipschitzModel.global_(20.0, one_sided_L=20.0))
    with pytest.raises(GridRejected):
        theta_step(s, state_of([1.0, 1.0]), 1.0, 0.1, np.zeros(1))


def test_theta_range():
    s = scalar_system(lambda x, y: -x)
    with pytest.raises(ValueError):
        theta_step(s, state_of([1.0, 1.0]), 1.5, 0.1, np.zeros(1))


def test_convergence_failure_reports_residual():
    s = scalar_system(lambda x, y: np.where(x > 0, -1.0, 1.0) * np.ones_like(x) * 10)
    with pytest.raises(ConvergenceError) as ei:
        theta_step(s, state_of([0.0, 0.0]), 1.0, 0.1, np.zeros(1), max_iter=20)
    assert ei.value.step == 0 and ei.value.residual > 0


def test_overflow_raises():
    s = scalar_system(lambda x, y: x ** 3)
    with pytest.raises(SchemeOverflowError) as ei:
        em_step(s, state_of([1e200, 1e200]), 1.0, np.zeros(1))
    assert ei.value.step == 0


def test_solve_implicit_batch():
    c = np.array([[1.0], [2.0], [np.nan]])
    z, res, conv = solve_implicit(lambda z, rows: -0.1 * z ** 3, c, 1e-13, 100)
    assert conv.all() and np.isnan(z[2, 0])
    for i in range(2):
        oracle = bisect(lambda v: v + 0.1 * v ** 3 - c[i, 0], 0.0, c[i, 0])
        assert z[i, 0] == pytest.approx(oracle, abs=1e-11)


# ---- MTEM ---------------------------------------------------------------------

def test_mtem_identity_on_small_states():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    cfg = TruncationConfig(h0=10.0, gamma=0.2)
    st = state_of([1.0, 1.0])
    assert mtem_step(s, st, cfg, 0.1, np.zeros(1)).tobytes() == em_step(s, st, 0.1, np.zeros(1)).tobytes()


def test_mtem_evaluates_inside_ball():
    seen = []

    def drift(x, y):
        seen.append(max(np.abs(x).max(), np.abs(y).max()))
        return -x ** 3

    s = scalar_system(drift, tau=0.01)
    cfg = TruncationConfig(h0=1.0, gamma=0.2)
    h = cfg.h0 * 0.01 ** -0.2
    st = state_of([50.0, 40.0])
    x = mtem_step(s, st, cfg, 0.01, np.zeros(1))
    assert max(seen) <= h * (1 + 1e-12)
    # r = |x| v |y| = 50 with y the lagged state
    assert x[0] == pytest.approx(40.0 - 0.01 * (50.0 / h) * (40.0 * h / 50.0) ** 3, rel=1e-14)


def test_mtem_stays_bounded_where_em_blows_up(ex1):
    grid = GridSpec(0.1, 10, 400)
    xi = InitialSegment.constant([40.0, 40.0])
    noise = np.zeros((400, 2))
    cfg = SchemeConfig.mtem(TruncationConfig(1.0, 0.2))
    traj = integrate_path(ex1.system, cfg, grid, xi, noise)
    assert np.all(np.isfinite(traj.states))
    with pytest.raises(SchemeOverflowError):
        integrate_path(ex1.system, SchemeConfig.em(), grid, xi, noise)


# ---- whole paths ---------------------------------------------------------------

def test_integrate_path_em_example():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    traj = integrate_path(s, SchemeConfig.em(), GridSpec(0.1, 1, 2), InitialSegment.constant([1.0]),
                          np.zeros((2, 1)))
    np.testing.assert_allclose(traj.states[:, 0], [1, 1, 0.9, 0.81], atol=1e-15)
    assert traj[-1][0] == 1 and traj[2][0] == pytest.approx(0.81)
    np.testing.assert_allclose(traj.times, [-0.1, 0, 0.1, 0.2])


def test_integrate_path_backward_euler_example():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    traj = integrate_path(s, SchemeConfig.theta_em(1.0), GridSpec(0.1, 1, 2),
                          InitialSegment.constant([1.0]), np.zeros((2, 1)))
    np.testing.assert_allclose(traj.states[:, 0], [1, 1, 1 / 1.1, 1 / 1.21], atol=1e-12)


def test_integrate_path_zero_steps():
    s = scalar_system(lambda x, y: -x, tau=0.1)
    traj = integrate_path(s, SchemeConfig.em(), GridSpec(0.1, 4, 0), InitialSegment.constant([2.0]),
                          np.zeros((0, 1)))
    assert traj.states.shape == (5, 1) and traj.n_steps == 0


def test_trivial_solution_stays_zero(ex1):
    grid = GridSpec(0.1, 10, 100)
    noise = NoiseStream(3, 0, 2, grid.delta)
    for cfg in (SchemeConfig.em(), SchemeConfig.theta_em(0.7), SchemeConfig.mtem(TruncationConfig())):
        traj = integrate_path(ex1.system, cfg, grid, InitialSegment.constant([0.0, 0.0]), noise)
        assert np.all(traj.states == 0)


def test_noise_shape_checked(ex1):
    with pytest.raises(Exception):
        integrate_path(ex1.system, SchemeConfig.em(), GridSpec(0.1, 10, 3),
                       InitialSegment.constant([1.0, 1.0]), np.zeros((3, 3)))


class SpyState(PathState):
    reads = []

    def get(self, j):
        SpyState.reads.append((self.k, j))
        return super().get(j)


@pytest.mark.parametrize("cfg", [SchemeConfig.em(), SchemeConfig.theta_em(1.0),
                                 SchemeConfig.mtem(TruncationConfig())])
def test_causality(ex2, cfg):
    SpyState.reads = []
    grid = GridSpec(0.1, 10, 300)
    integrate_path(ex2.system, cfg, grid, InitialSegment.constant([1.0, 1.0]),
                   NoiseStream(1, 0, 2, grid.delta), state_factory=SpyState)
    assert SpyState.reads
    assert all(k - 10 <= j <= k for k, j in SpyState.reads)


def test_history_order():
    st = PathState(np.arange(4.0).reshape(4, 1), k=7)
    assert [st.get(j)[0] for j in range(4, 8)] == [0, 1, 2, 3]
    np.testing.assert_array_equal(st.history()[:, 0], [0, 1, 2, 3])
    st.push(np.array([9.0]))
    np.testing.assert_array_equal(st.copy().history()[:, 0], [1, 2, 3, 9])


def test_future_read_is_impossible():
    st = state_of([1.0, 2.0])
    with pytest.raises(IndexError):
        st.get(1)
    with pytest.raises(IndexError):
        st.get(-2)


def test_batch_matches_single_paths(ex1):
    grid = GridSpec(0.1, 10, 200)
    rng = np.random.default_rng(0)
    dW = rng.normal(scale=0.1, size=(200, 4, 2))
    init = np.ones((11, 4, 2))
    for cfg in (SchemeConfig.em(), SchemeConfig.theta_em(0.5), SchemeConfig.mtem(TruncationConfig())):
        final = None
        for k, x, alive in iterate_batch(ex1.system, cfg, grid, init.copy(), lambda k: dW[k]):
            final = x
        for p in range(4):
            traj = integrate_path(ex1.system, cfg, grid, InitialSegment.constant([1.0, 1.0]), dW[:, p])
            np.testing.assert_allclose(final[p], traj[200], rtol=1e-9, atol=1e-14)


def test_batch_marks_divergent_paths():
    s = scalar_system(lambda x, y: x ** 3)
    grid = GridSpec(0.1, 1, 10)
    init = np.array([[[0.1], [30.0]], [[0.1], [30.0]]])
    last = None
    for k, x, alive in iterate_batch(s, SchemeConfig.em(), grid, init, lambda k: np.zeros((2, 1))):
        last = (x, alive)
    assert last[1].tolist() == [True, False]
    assert np.isnan(last[0][1, 0])
