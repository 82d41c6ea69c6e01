"""Modified truncation of drift and diffusion onto a ball of radius h(delta).

Outside the ball the coefficient is evaluated at the radially rescaled point
and multiplied back up, so the truncated maps stay unbounded but grow
linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .certify import Violation, collect_violations, componentwise_sides, sample_ball
from .model import CoeffBounds, LipschitzModel, ModelError, SddeSystem


@dataclass(frozen=True)
class TruncationConfig:
    """Power-law radius ``h(delta) = h0 * delta**(-gamma)`` on ``(0, delta_star]``."""

    h0: float = 1.0
    gamma: float = 0.2
    delta_star: float = 1.0
    lipschitz: Optional[LipschitzModel] = None

    def __post_init__(self):
        if not self.h0 > 0:
            raise ModelError(f"h0 must be > 0, got {self.h0}")
        if not self.gamma > 0:
            raise ModelError(f"gamma must be > 0, got {self.gamma}")
        if not self.delta_star > 0:
            raise ModelError(f"delta_star must be > 0, got {self.delta_star}")
        lip = self.lipschitz
        # L_h^2 * delta -> 0 needs 2 * q * gamma < 1
        if lip is not None and lip.kind == "polynomial" and lip.q > 0:
            if self.gamma >= 1.0 / (2.0 * lip.q):
                raise ModelError(
                    f"gamma={self.gamma} must be < 1/(2q) = {1.0 / (2.0 * lip.q)} "
                    "for L_h(delta)^2 * delta to vanish"
                )


def h_of_delta(config: TruncationConfig, delta: float) -> float:
    if not 0 < delta <= config.delta_star:
        raise ValueError(f"delta must lie in (0, {config.delta_star}], got {delta}")
    return config.h0 * delta ** (-config.gamma)


def _pair_norm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(np.linalg.norm(x, axis=-1), np.linalg.norm(y, axis=-1))


def truncate_pair(f_like: Callable, h: float, x, y) -> np.ndarray:
    """``f_like`` with its arguments pulled back onto the ball ``|x| v |y| <= h``.

    Works for vector- or matrix-valued ``f_like`` and for batched ``x, y``.
    Points on the sphere itself take the identity branch.
    """
    if not h > 0:
        raise ValueError(f"h must be > 0, got {h}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = _pair_norm(x, y)
    outside = r > h
    if not np.any(outside):
        return f_like(x, y)
    s = np.where(outside, h / np.where(outside, r, 1.0), 1.0)
    out = np.asarray(f_like(x * s[..., None], y * s[..., None]))
    grow = np.where(outside, r / h, 1.0)
    return out * grow.reshape(grow.shape + (1,) * (out.ndim - grow.ndim))


def truncated_coefficients(system: SddeSystem, h: float):
    """Return ``(f_delta, g_delta)`` closures for radius ``h``."""

    def f_delta(x, y):
        return truncate_pair(system.drift, h, x, y)

    def g_delta(x, y):
        return truncate_pair(system.diffusion, h, x, y)

    return f_delta, g_delta


@dataclass
class LemmaReport:
    h: float
    L_h: float
    n_samples: int
    n_outside: int
    bound_violations: List[Violation]
    growth_violations: List[int]

    @property
    def passed(self) -> bool:
        return not self.bound_violations and not self.growth_violations


def check_truncation_lemmas(
    system: SddeSystem,
    bounds: CoeffBounds,
    config: TruncationConfig,
    delta: float,
    n_samples: int = 10_000,
    seed: int = 0,
    rtol: float = 1e-9,
    outside_fraction: float = 0.5,
    inside_only: bool = False,
) -> LemmaReport:
    """Sample-check both truncation properties at step size ``delta``.

    1. ``f_delta, g_delta`` satisfy the componentwise bound with the same
       ``A, B``.
    2. ``|f_delta(x, y)| v |g_delta(x, y)| <= L_h (|x| + |y|)`` with the
       local Lipschitz constant at radius ``h(delta)`` (Frobenius norm for g).

    A fraction ``outside_fraction`` of the samples is drawn from the shell
    ``h < |(x, y)| <= 10 h`` and the rest uniformly inside the ball of
    radius ``h``.
    """
    lip = system.lipschitz_model or config.lipschitz
    if lip is None:
        raise ModelError("check_truncation_lemmas needs a Lipschitz model on the system or config")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    h = h_of_delta(config, delta)
    L_h = lip.local_constant(h)
    d = system.d
    rng = np.random.default_rng(seed)
    n_out = 0 if inside_only else int(math.ceil(outside_fraction * n_samples))
    n_in = n_samples - n_out
    inner = sample_ball(rng, n_in, 2 * d, h)
    direction = rng.standard_normal((n_out, 2 * d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radii = h * (1.0 + 9.0 * rng.random(n_out)) * math.sqrt(2.0)
    shell = direction * radii[:, None]
    pts = np.concatenate([inner, shell])
    x, y = pts[:, :d], pts[:, d:]

    f_delta, g_delta = truncated_coefficients(system, h)
    f = f_delta(x, y)
    g = g_delta(x, y)
    lhs, rhs, scale = componentwise_sides(f, g, x, y, bounds)
    bound_viol = collect_violations(x, y, lhs, rhs, scale, rtol)

    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    size = np.maximum(np.linalg.norm(f, axis=1), np.linalg.norm(g, axis=(1, 2)))
    cap = L_h * (nx + ny)
    growth_viol = [int(k) for k in np.nonzero(size > cap * (1.0 + rtol))[0]]

    n_outside = int(np.count_nonzero(_pair_norm(x, y) > h))
    return LemmaReport(h, L_h, n_samples, n_outside, bound_viol, growth_viol)
