"""Seeded Brownian increments, ensemble second moments and decay fits.

Increments come from a counter-based generator (Philox4x32-10) keyed by the
seed, with the counter built from ``(step, path, block)``. Any increment can
therefore be regenerated on its own, in any order, on any thread.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import special, stats

from .model import GridSpec, InitialSegment, ModelError, SddeSystem
from .schemes import SchemeConfig, Trajectory, check_scheme_grid, iterate_batch

MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85

BLOCK_PATHS = 256
STEP_CHUNK = 256
V_FLOOR = 1e-300


class EstimationError(RuntimeError):
    pass


class FitError(ValueError):
    pass


def philox4x32(c0, c1, c2, c3, key0: int, key1: int, rounds: int = 10):
    """Vectorised Philox4x32 bijection. Counter words are uint64 arrays
    holding 32-bit values; returns four such arrays."""
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & MASK32 for c in (c0, c1, c2, c3))
    k0, k1 = key0 & 0xFFFFFFFF, key1 & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = c0 * _M0
        p1 = c2 * _M1
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ np.uint64(k0),
            p1 & MASK32,
            (p0 >> np.uint64(32)) ^ c3 ^ np.uint64(k1),
            p0 & MASK32,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _open_uniform(hi, lo) -> np.ndarray:
    """53-bit uniform strictly inside (0, 1) from two 32-bit words."""
    bits = (hi >> np.uint64(5)) * np.float64(67108864.0) + (lo >> np.uint64(6))
    return (bits.astype(np.float64) + 0.5) / 9007199254740992.0


def standard_normals(seed: int, steps, paths, m: int) -> np.ndarray:
    """Standard normals of shape ``(len(steps), len(paths), m)``.

    Entry ``[s, p, l]`` depends only on ``(seed, steps[s], paths[p], l)``.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 bits, got {seed}")
    steps = np.asarray(steps, dtype=np.uint64)
    paths = np.asarray(paths, dtype=np.int64)
    if paths.size and (paths.min() < 0 or paths.max() >= 2**32):
        raise ValueError("path ids must lie in [0, 2**32)")
    n_blocks = (m + 1) // 2
    shape = (steps.size, paths.size, n_blocks)
    st = np.broadcast_to(steps[:, None, None], shape)
    pa = np.broadcast_to(paths.astype(np.uint64)[None, :, None], shape)
    bl = np.broadcast_to(np.arange(n_blocks, dtype=np.uint64)[None, None, :], shape)
    w0, w1, w2, w3 = philox4x32(st & MASK32, st >> np.uint64(32), pa, bl, seed, seed >> 32)
    u = np.stack([_open_uniform(w0, w1), _open_uniform(w2, w3)], axis=-1)
    z = special.ndtri(u).reshape(steps.size, paths.size, 2 * n_blocks)
    return z[..., :m]


@dataclass(frozen=True)
class NoiseStream:
    """Brownian increments of one path: ``N(0, delta)`` per component."""

    seed: int
    path_id: int
    m: int
    delta: float

    def increment(self, step: int) -> np.ndarray:
        return brownian_increments(self, step)

    def __call__(self, step: int) -> np.ndarray:
        return self.increment(step)


def brownian_increments(stream: NoiseStream, step: int) -> np.ndarray:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    z = standard_normals(stream.seed, [step], [stream.path_id], stream.m)[0, 0]
    return math.sqrt(stream.delta) * z


def increments_block(seed: int, steps, paths, m: int, delta: float) -> np.ndarray:
    """Increments for many steps and paths at once, ``(steps, paths, m)``."""
    return math.sqrt(delta) * standard_normals(seed, steps, paths, m)


@dataclass
class MomentSeries:
    """Ensemble second moments on ``t_k = k delta``, ``k = -m_bar .. N``.

    ``component_moments[i, k]`` estimates ``E|X_k^i|^2``; ``weighted[k]`` is
    ``sum_i component_moments[i, k] / p_i``.
    """

    times: np.ndarray
    component_moments: np.ndarray
    component_se: np.ndarray
    weighted: Optional[np.ndarray]
    weighted_se: Optional[np.ndarray]
    n_alive: np.ndarray
    n_paths: int
    n_diverged: int
    p: Optional[np.ndarray] = None
    m_bar: int = 0
    terminal: Optional[np.ndarray] = None
    diverged_at: Optional[np.ndarray] = None


def worker_count(default: Optional[int] = None) -> int:
    env = os.environ.get("STABILAB_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"STABILAB_THREADS must be >= 1, got {env}")
        return n
    return default or os.cpu_count() or 1


def _run_block(system, scheme, grid, init, paths, seed, p_inv):
    n = len(paths)
    N = grid.n_steps
    d = system.d
    count = np.zeros(N + 1)
    mean = np.zeros((N + 1, d + 1))
    m2 = np.zeros((N + 1, d + 1))
    hist = np.broadcast_to(init[:, None, :], (init.shape[0], n, d)).copy()
    noise = {}

    def increments(k):
        c0 = (k // STEP_CHUNK) * STEP_CHUNK
        if c0 not in noise:
            noise.clear()
            steps = np.arange(c0, min(c0 + STEP_CHUNK, N))
            noise[c0] = increments_block(seed, steps, paths, system.m, grid.delta)
        return noise[c0][k - c0]

    died = np.full(n, -1)
    terminal = None
    for k, x, alive in iterate_batch(system, scheme, grid, hist, increments):
        newly = (died < 0) & ~alive
        died[newly] = k
        xa = x[alive]
        sq = xa * xa
        vals = np.concatenate([sq, np.sum(sq * p_inv, axis=1, keepdims=True)], axis=1)
        c = vals.shape[0]
        count[k] = c
        if c:
            mu = vals.mean(axis=0)
            mean[k] = mu
            m2[k] = ((vals - mu) ** 2).sum(axis=0)
        terminal = x
    return count, mean, m2, terminal, died


def ensemble_moments(
    system: SddeSystem,
    scheme: SchemeConfig,
    grid: GridSpec,
    xi: InitialSegment,
    n_paths: int,
    seed: int,
    p: Optional[Sequence[float]] = None,
    workers: Optional[int] = None,
) -> MomentSeries:
    """Monte Carlo estimate of ``E|X_k^i|^2`` over ``n_paths`` paths.

    Paths run in fixed blocks of ``BLOCK_PATHS``; blocks are merged in block
    order, so the result does not depend on the worker count. Paths that go
    non-finite are dropped from the estimates from that step on and counted
    in ``n_diverged``.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    check_scheme_grid(system, scheme, grid)
    d = system.d
    weights = None
    if p is not None:
        weights = np.asarray(p, dtype=float)
        if weights.shape != (d,) or not np.all(weights > 0):
            raise ValueError(f"p must be a positive vector of length {d}")
    p_inv = 1.0 / weights if weights is not None else np.ones(d)
    init = xi.discretize(grid, d)

    blocks = [np.arange(s, min(s + BLOCK_PATHS, n_paths)) for s in range(0, n_paths, BLOCK_PATHS)]
    n_workers = min(workers or worker_count(), len(blocks))

    def job(paths):
        return _run_block(system, scheme, grid, init, paths, seed, p_inv)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]

    N = grid.n_steps
    acc = (np.zeros(N + 1), np.zeros((N + 1, d + 1)), np.zeros((N + 1, d + 1)))
    for count, mean, m2, _, _ in results:
        acc = _merge(acc, count, mean, m2)
    count, mean, m2 = acc
    dead = np.nonzero(count == 0)[0]
    if dead.size:
        raise EstimationError(f"all {n_paths} paths diverged by step {int(dead[0])}")
    var = m2 / np.where(count > 1, count - 1, 1)[:, None]
    se = np.sqrt(var / count[:, None])

    pre = init * init
    pre_v = np.sum(pre * p_inv, axis=1)
    mb = grid.m_bar
    comp = np.concatenate([pre[:-1], mean[:, :d]]).T
    comp_se = np.concatenate([np.zeros((mb, d)), se[:, :d]]).T
    w = np.concatenate([pre_v[:-1], mean[:, d]])
    w_se = np.concatenate([np.zeros(mb), se[:, d]])
    n_alive = np.concatenate([np.full(mb, n_paths), count]).astype(np.int64)
    terminal = np.concatenate([r[3] for r in results])
    died = np.concatenate([r[4] for r in results])
    return MomentSeries(
        times=np.arange(-mb, N + 1) * grid.delta,
        component_moments=comp,
        component_se=comp_se,
        weighted=w if weights is not None else None,
        weighted_se=w_se if weights is not None else None,
        n_alive=n_alive,
        n_paths=n_paths,
        n_diverged=int(np.count_nonzero(died >= 0)),
        p=weights,
        m_bar=mb,
        terminal=terminal,
        diverged_at=died,
    )


def _merge(acc, count, mean, m2):
    """Chan's pairwise merge of per-step (count, mean, M2) accumulators."""
    n_a, mean_a, m2_a = acc
    n = n_a + count
    safe = np.where(n > 0, n, 1)[:, None]
    delta = mean - mean_a
    new_mean = mean_a + delta * (count[:, None] / safe)
    new_m2 = m2_a + m2 + delta * delta * ((n_a * count)[:, None] / safe)
    return n, new_mean, new_m2


@dataclass(frozen=True)
class DecayFit:
    rate: float
    stderr: float
    intercept: float
    n_points: int
    t_start: float


def fit_decay_rate(series: MomentSeries, window_fraction: float = 0.5) -> DecayFit:
    """Least-squares slope of ``log V_k`` against ``t_k`` over the trailing
    ``window_fraction`` of ``[0, T]``."""
    if series.weighted is None:
        raise FitError("series has no weighted aggregate; pass p to ensemble_moments")
    return fit_log_linear(series.times, series.weighted, window_fraction)


def fit_log_linear(times, values, window_fraction: float = 0.5) -> DecayFit:
    if not 0 < window_fraction <= 1:
        raise ValueError(f"window_fraction must lie in (0, 1], got {window_fraction}")
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    T = t[-1]
    t0 = max(0.0, (1.0 - window_fraction) * T)
    use = (t >= t0 - 1e-12 * max(1.0, abs(T))) & (v > V_FLOOR) & np.isfinite(v)
    if np.count_nonzero(use) < 3:
        raise FitError(f"only {np.count_nonzero(use)} usable points in the fit window")
    tt, lv = t[use], np.log(v[use])
    if np.ptp(lv) == 0.0:
        return DecayFit(0.0, 0.0, float(lv[0]), int(tt.size), float(t0))
    res = stats.linregress(tt, lv)
    return DecayFit(float(res.slope), float(res.stderr), float(res.intercept), int(tt.size), float(t0))


def as_exponent(trajectory, grid: GridSpec) -> np.ndarray:
    """``log|X_N^i| / (N delta)`` per component (``-inf`` where ``X_N^i = 0``).

    ``trajectory`` is a ``Trajectory`` or an array of terminal states with
    shape ``(d,)`` or ``(n_paths, d)``.
    """
    if grid.n_steps == 0:
        raise ValueError("as_exponent needs at least one step")
    xN = trajectory[grid.n_steps] if isinstance(trajectory, Trajectory) else np.asarray(trajectory, float)
    if not np.all(np.isfinite(xN)):
        raise ValueError("terminal state is not finite")
    with np.errstate(divide="ignore"):
        return np.log(np.abs(xN)) / grid.horizon


def to_rows(series: MomentSeries) -> List[list]:
    d = series.component_moments.shape[0]
    w = series.weighted if series.weighted is not None else series.component_moments.sum(axis=0)
    w_se = series.weighted_se if series.weighted_se is not None else np.full_like(w, np.nan)
    rows = []
    for k in range(series.times.size):
        rows.append([series.times[k], *(series.component_moments[i, k] for i in range(d)),
                     w[k], w_se[k], int(series.n_alive[k])])
    return rows
