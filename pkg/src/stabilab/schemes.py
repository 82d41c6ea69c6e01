"""One-step maps for EM, theta-EM and MTEM, and the delay-aware integrator.

All step functions accept a single path (state arrays of shape ``(d,)``) or a
batch (shape ``(n, d)``); rows never interact, so a batch is just many paths
advanced in lock-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Tuple, Union

import numpy as np

from .model import DelayFunction, GridSpec, InitialSegment, ModelError, SddeSystem
from .truncation import TruncationConfig, h_of_delta, truncated_coefficients

SCHEME_KINDS = ("em", "theta", "mtem")
# batch paths beyond this norm count as diverged; below it |x|^4 stays finite,
# so second-moment variances cannot overflow
DIVERGENCE_BOUND = 1e75


class SchemeError(RuntimeError):
    """Base class for failures while stepping."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SchemeOverflowError(SchemeError):
    pass


class ConvergenceError(SchemeError):
    def __init__(self, message: str, step: Optional[int] = None, residual: float = math.nan):
        super().__init__(f"{message} (residual {residual:.3e})", step)
        self.residual = residual


class GridRejected(ValueError):
    pass


@dataclass(frozen=True)
class SchemeConfig:
    kind: str = "em"
    theta: float = 0.0
    truncation: Optional[TruncationConfig] = None
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"scheme kind must be one of {SCHEME_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.kind == "mtem" and self.truncation is None:
            raise ValueError("MTEM needs a TruncationConfig")

    @classmethod
    def em(cls) -> "SchemeConfig":
        return cls("em")

    @classmethod
    def theta_em(cls, theta: float, **kw) -> "SchemeConfig":
        return cls("theta", theta=theta, **kw)

    @classmethod
    def mtem(cls, truncation: TruncationConfig) -> "SchemeConfig":
        return cls("mtem", truncation=truncation)

    def label(self) -> str:
        if self.kind == "theta":
            return f"theta-EM(theta={self.theta:g})"
        return self.kind.upper()


class PathState:
    """Ring buffer holding ``X_{k-m_bar} .. X_k``.

    ``get(j)`` addresses states by their grid index ``j``; anything outside
    the window raises, so no step can read ahead of ``k``.
    """

    def __init__(self, initial: np.ndarray, k: int = 0):
        initial = np.array(initial, dtype=float)
        if initial.ndim < 2:
            raise ModelError("initial history needs shape (m_bar + 1, ..., d)")
        self.size = initial.shape[0]
        self.k = k
        # slot of grid index j is j % size; row i of ``initial`` is index k - m_bar + i
        self._buf = np.roll(initial, (k - self.m_bar) % self.size, axis=0)

    @property
    def m_bar(self) -> int:
        return self.size - 1

    @property
    def step_index(self) -> int:
        return self.k

    def _slot(self, j: int) -> int:
        return j % self.size

    def get(self, j: int) -> np.ndarray:
        if not self.k - self.m_bar <= j <= self.k:
            raise IndexError(f"history index {j} outside window [{self.k - self.m_bar}, {self.k}]")
        return self._buf[self._slot(j)]

    def current(self) -> np.ndarray:
        return self.get(self.k)

    def push(self, x: np.ndarray) -> None:
        self.k += 1
        self._buf[self._slot(self.k)] = x

    def history(self) -> np.ndarray:
        """States in index order, oldest first."""
        return np.stack([self._buf[self._slot(j)] for j in range(self.k - self.m_bar, self.k + 1)])

    def copy(self) -> "PathState":
        return type(self)(self.history(), self.k)


def lag_index(delay: DelayFunction, k: int, delta: float) -> int:
    """``floor(tau(k delta) / delta)``, clipped into ``[0, m_bar]``.

    Quotients within 1e-9 of an integer snap to it, so a constant delay
    ``tau = m_bar * delta`` gives exactly ``m_bar``.
    """
    if k < 0 or not delta > 0:
        raise ValueError(f"need k >= 0 and delta > 0, got k={k}, delta={delta}")
    tau = delay(k * delta)
    tmax = delay.tau_max
    if not (math.isfinite(tau) and 0.0 <= tau <= tmax * (1 + 1e-12)):
        raise ModelError(f"delay tau({k * delta}) = {tau} outside [0, {tmax}]")
    m_bar = int(round(tmax / delta))
    q = tau / delta
    r = round(q)
    lag = int(r) if abs(q - r) <= 1e-9 * max(1.0, r) else int(math.floor(q))
    return min(max(lag, 0), m_bar)


def _noise_term(g: np.ndarray, dW: np.ndarray) -> np.ndarray:
    return np.sum(g * dW[..., None, :], axis=-1)


def _check_finite(x: np.ndarray, step: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise SchemeOverflowError("non-finite state", step)
    return x


def _explicit(drift, diffusion, state: PathState, delay, delta, dW):
    k = state.k
    xk = state.current()
    yk = state.get(k - lag_index(delay, k, delta))
    return xk + delta * drift(xk, yk) + _noise_term(diffusion(xk, yk), np.asarray(dW, float))


def em_step(system: SddeSystem, state: PathState, delta: float, dW, check: bool = True):
    with np.errstate(all="ignore"):
        out = _explicit(system.drift, system.diffusion, state, system.delay, delta, dW)
    return _check_finite(out, state.k) if check else out


def mtem_step(
    system: SddeSystem,
    state: PathState,
    config: TruncationConfig,
    delta: float,
    dW,
    check: bool = True,
):
    h = h_of_delta(config, delta)
    f_delta, g_delta = truncated_coefficients(system, h)
    with np.errstate(all="ignore"):
        out = _explicit(f_delta, g_delta, state, system.delay, delta, dW)
    return _check_finite(out, state.k) if check else out


def _scaled_residual(r: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return np.linalg.norm(r, axis=-1) / scale


def solve_implicit(phi: Callable, c: np.ndarray, tol: float, max_iter: int):
    """Solve ``z = c + phi(z, rows)`` row-wise for ``c`` of shape ``(n, d)``.

    ``phi(z, rows)`` evaluates the implicit term for the subset ``rows``.
    Damped Newton with a forward-difference Jacobian; rows whose Newton step
    fails to reduce the residual (or whose Jacobian is singular) take a
    fixed-point step instead. Convergence: ``|residual| <= tol * max(1, |c|)``.

    Returns ``(z, residual, converged)``; rows of ``c`` that are not finite
    are left as NaN and flagged converged.
    """
    n, d = c.shape
    z = c.copy()
    scale = np.maximum(1.0, np.linalg.norm(c, axis=1))
    res = np.zeros(n)
    converged = ~np.all(np.isfinite(c), axis=1)
    z[converged] = np.nan
    rows = np.nonzero(~converged)[0]
    if rows.size == 0:
        return z, res, converged
    eye = np.eye(d)
    for _ in range(max_iter + 1):
        zr = z[rows]
        ph = phi(zr, rows)
        F = zr - c[rows] - ph
        rn = _scaled_residual(F, scale[rows])
        res[rows] = rn
        done = rn <= tol
        converged[rows[done]] = True
        bad = ~np.isfinite(rn)
        if np.any(bad):
            res[rows[bad]] = np.inf
        keep = ~done & ~bad
        rows, zr, ph, F, rn = rows[keep], zr[keep], ph[keep], F[keep], rn[keep]
        if rows.size == 0:
            break
        J = np.broadcast_to(eye, (rows.size, d, d)).copy()
        for j in range(d):
            hj = 1e-7 * (1.0 + np.abs(zr[:, j]))
            zp = zr.copy()
            zp[:, j] += hj
            J[:, :, j] -= (phi(zp, rows) - ph) / hj[:, None]
        try:
            step = np.linalg.solve(J, -F[..., None])[..., 0]
            newton_ok = np.all(np.isfinite(step), axis=1)
        except np.linalg.LinAlgError:
            step = np.zeros_like(F)
            newton_ok = np.zeros(rows.size, dtype=bool)
        cand = zr.copy()
        accepted = np.zeros(rows.size, dtype=bool)
        lam = 1.0
        for _ in range(8):
            trial = ~accepted & newton_ok
            if not np.any(trial):
                break
            zt = zr[trial] + lam * step[trial]
            idx = rows[trial]
            Ft = zt - c[idx] - phi(zt, idx)
            better = _scaled_residual(Ft, scale[idx]) < rn[trial]
            pos = np.nonzero(trial)[0][better]
            cand[pos] = zt[better]
            accepted[pos] = True
            lam *= 0.5
        fallback = ~accepted
        if np.any(fallback):
            cand[fallback] = c[rows[fallback]] + ph[fallback]
        z[rows] = cand
    return z, res, converged


def theta_step(
    system: SddeSystem,
    state: PathState,
    theta: float,
    delta: float,
    dW,
    tol: float = 1e-12,
    max_iter: int = 100,
    check: bool = True,
):
    """One theta-EM step.

    Solves ``z = c + theta * delta * f(z, y(z))`` where ``c`` is the explicit
    part. ``y(z)`` is the already-known lagged state
    ``X_{k+1-lag(k+1)}`` unless that lag is zero, in which case ``y(z) = z``.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    lip = system.lipschitz_model
    if theta > 0 and lip is not None and lip.one_sided_L is not None:
        if lip.one_sided_L * theta * delta >= 1.0:
            raise GridRejected(
                f"L*theta*delta = {lip.one_sided_L * theta * delta:g} >= 1; implicit step ill-posed"
            )
    k = state.k
    xk = state.current()
    yk = state.get(k - lag_index(system.delay, k, delta))
    dW = np.asarray(dW, dtype=float)
    with np.errstate(all="ignore"):
        c = xk + ((1.0 - theta) * delta) * system.drift(xk, yk) + _noise_term(
            system.diffusion(xk, yk), dW
        )
    if theta == 0.0:
        return _check_finite(c, k) if check else c

    lag_next = lag_index(system.delay, k + 1, delta)
    single = c.ndim == 1
    c2 = np.atleast_2d(c)
    w = theta * delta
    if lag_next == 0:
        def phi(z, rows):
            return w * system.drift(z, z)
    else:
        # index k + 1 - lag_next <= k, already in the buffer
        y_next = np.atleast_2d(state.get(k + 1 - lag_next))

        def phi(z, rows):
            return w * system.drift(z, y_next[rows])

    with np.errstate(all="ignore"):
        z, res, conv = solve_implicit(phi, c2, tol, max_iter)
    if check:
        if not np.all(np.isfinite(c2)) or not np.all(np.isfinite(z)):
            raise SchemeOverflowError("non-finite state", k)
        if not np.all(conv):
            raise ConvergenceError("implicit solve did not converge", k, float(np.max(res)))
    else:
        z[~conv] = np.nan
    return z[0] if single else z


def step(system: SddeSystem, scheme: SchemeConfig, state: PathState, delta: float, dW,
         check: bool = True):
    if scheme.kind == "em":
        return em_step(system, state, delta, dW, check)
    if scheme.kind == "mtem":
        return mtem_step(system, state, scheme.truncation, delta, dW, check)
    return theta_step(system, state, scheme.theta, delta, dW,
                      scheme.implicit_tol, scheme.implicit_max_iter, check)


def check_scheme_grid(system: SddeSystem, scheme: SchemeConfig, grid: GridSpec) -> None:
    if not math.isclose(grid.tau_max, system.tau_max, rel_tol=1e-14):
        raise ModelError(f"grid tau_max {grid.tau_max} != system tau_max {system.tau_max}")
    if scheme.kind == "mtem":
        h_of_delta(scheme.truncation, grid.delta)
    lip = system.lipschitz_model
    if scheme.kind == "theta" and scheme.theta > 0 and lip is not None and lip.one_sided_L is not None:
        if lip.one_sided_L * scheme.theta * grid.delta >= 1.0:
            raise GridRejected("L*theta*delta >= 1; implicit step ill-posed")


class Trajectory:
    """States ``X_k`` for ``k = -m_bar .. N``, indexed by grid index ``k``."""

    def __init__(self, states: np.ndarray, m_bar: int, delta: float):
        self.states = states
        self.m_bar = m_bar
        self.delta = delta

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - self.m_bar - 1

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, k: int) -> np.ndarray:
        if not -self.m_bar <= k <= self.n_steps:
            raise IndexError(k)
        return self.states[k + self.m_bar]

    @property
    def times(self) -> np.ndarray:
        return np.arange(-self.m_bar, self.n_steps + 1) * self.delta


NoiseSource = Union[np.ndarray, Callable[[int], np.ndarray]]


def _noise_at(noise: NoiseSource, k: int) -> np.ndarray:
    if callable(noise):
        return np.asarray(noise(k), dtype=float)
    if hasattr(noise, "increment"):
        return noise.increment(k)
    return np.asarray(noise[k], dtype=float)


def integrate_path(
    system: SddeSystem,
    scheme: SchemeConfig,
    grid: GridSpec,
    xi: InitialSegment,
    noise: NoiseSource,
    state_factory=PathState,
) -> Trajectory:
    """Integrate one path over ``grid``; ``noise`` yields the increment for
    step ``k`` (array indexed by ``k``, callable, or an object with
    ``increment(k)``)."""
    check_scheme_grid(system, scheme, grid)
    init = xi.discretize(grid, system.d)
    out = np.empty((grid.n_steps + grid.m_bar + 1, system.d))
    out[: grid.m_bar + 1] = init
    state = state_factory(init)
    for k in range(grid.n_steps):
        dW = _noise_at(noise, k)
        if dW.shape != (system.m,):
            raise ModelError(f"noise increment at step {k} has shape {dW.shape}, expected ({system.m},)")
        x = step(system, scheme, state, grid.delta, dW)
        state.push(x)
        out[grid.m_bar + k + 1] = x
    return Trajectory(out, grid.m_bar, grid.delta)


def iterate_batch(
    system: SddeSystem,
    scheme: SchemeConfig,
    grid: GridSpec,
    init: np.ndarray,
    increments: Callable[[int], np.ndarray],
) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
    """Advance a batch of paths in lock-step.

    ``init`` has shape ``(m_bar + 1, n, d)``; ``increments(k)`` returns the
    ``(n, m)`` increments of step ``k``. Yields ``(k, X_k, alive)`` for
    ``k = 0..N``. A path whose state becomes non-finite or exceeds
    ``DIVERGENCE_BOUND`` (or whose implicit solve fails) is marked dead and
    held at NaN from then on.
    """
    check_scheme_grid(system, scheme, grid)
    state = PathState(init)
    alive = np.all(np.isfinite(state.current()), axis=-1)
    yield 0, state.current(), alive.copy()
    for k in range(grid.n_steps):
        x = step(system, scheme, state, grid.delta, increments(k), check=False)
        x = np.array(x, dtype=float)
        with np.errstate(invalid="ignore"):
            alive &= np.all(np.abs(x) <= DIVERGENCE_BOUND, axis=-1)
        x[~alive] = np.nan
        state.push(x)
        yield k + 1, x, alive.copy()
