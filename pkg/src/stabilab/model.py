"""Domain types for stochastic differential delay equations.

Drift and diffusion callables are vectorised over leading axes: ``drift`` maps
arrays of shape ``(..., d)`` to ``(..., d)`` and ``diffusion`` maps them to
``(..., d, m)``. Single-path code simply passes 1-d arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Drift = Callable[[np.ndarray, np.ndarray], np.ndarray]
Diffusion = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Raised when inputs violate a model contract (shape, sign, range)."""


@dataclass(frozen=True)
class DelayFunction:
    """Time-varying delay ``tau(t)`` with a uniform upper bound ``tau_max``."""

    evaluate: Callable[[float], float]
    tau_max: float

    def __post_init__(self):
        if not (self.tau_max > 0 and math.isfinite(self.tau_max)):
            raise ModelError(f"tau_max must be positive and finite, got {self.tau_max}")

    def __call__(self, t: float) -> float:
        return float(self.evaluate(t))

    @classmethod
    def constant(cls, tau: float) -> "DelayFunction":
        return cls(lambda t: tau, tau)


@dataclass(frozen=True)
class LipschitzModel:
    """Local Lipschitz constant ``L_R`` for drift and diffusion.

    ``kind`` is ``"global"`` (``L_R = L``) or ``"polynomial"``
    (``L_R = c * (1 + R**q)``).
    """

    kind: str
    L: float = 0.0
    c: float = 0.0
    q: float = 0.0
    one_sided_L: Optional[float] = None
    drift_linear_K: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("global", "polynomial"):
            raise ModelError(f"unknown Lipschitz kind {self.kind!r}")
        for name in ("L", "c", "q", "one_sided_L", "drift_linear_K"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ModelError(f"{name} must be >= 0, got {v}")

    @classmethod
    def global_(cls, L: float, **kw) -> "LipschitzModel":
        return cls("global", L=L, **kw)

    @classmethod
    def polynomial(cls, c: float, q: float, **kw) -> "LipschitzModel":
        return cls("polynomial", c=c, q=q, **kw)

    def local_constant(self, R: float) -> float:
        if self.kind == "global":
            return self.L
        return self.c * (1.0 + R**self.q)


@dataclass(frozen=True)
class CoeffBounds:
    """Matrices ``A`` and ``B`` of the componentwise bound

    ``2 x_i f_i(x, y) + sum_l g_il(x, y)**2 <= sum_j a_ij x_j**2 + sum_j b_ij y_j**2``.
    """

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        B = np.array(self.B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != B.shape:
            raise ModelError(f"A and B must be square and equal-shaped, got {A.shape}, {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ModelError("A and B must be finite")
        off = ~np.eye(A.shape[0], dtype=bool)
        if np.any(A[off] < 0):
            raise ModelError("off-diagonal entries of A must be >= 0")
        if np.any(B < 0):
            raise ModelError("entries of B must be >= 0")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class SddeSystem:
    """``dx = f(x, x(t - tau(t))) dt + g(x, x(t - tau(t))) dB``."""

    d: int
    m: int
    drift: Drift
    diffusion: Diffusion
    delay: DelayFunction
    lipschitz_model: Optional[LipschitzModel] = None
    claimed_bounds: Optional[CoeffBounds] = None
    name: str = ""

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ModelError(f"dimensions must be positive, got d={self.d}, m={self.m}")
        if self.claimed_bounds is not None and self.claimed_bounds.d != self.d:
            raise ModelError("claimed_bounds dimension does not match d")

    @property
    def tau_max(self) -> float:
        return self.delay.tau_max


def _as_state(system: SddeSystem, v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0 or a.shape[-1] != system.d:
        raise ModelError(f"{name} must have trailing dimension {system.d}, got shape {a.shape}")
    return a


def eval_drift(system: SddeSystem, x, y) -> np.ndarray:
    x = _as_state(system, x, "x")
    y = _as_state(system, y, "y")
    out = np.asarray(system.drift(x, y), dtype=float)
    if out.shape != np.broadcast_shapes(x.shape, y.shape):
        raise ModelError(f"drift returned shape {out.shape}")
    return out


def eval_diffusion(system: SddeSystem, x, y) -> np.ndarray:
    x = _as_state(system, x, "x")
    y = _as_state(system, y, "y")
    out = np.asarray(system.diffusion(x, y), dtype=float)
    lead = np.broadcast_shapes(x.shape, y.shape)[:-1]
    if out.shape != lead + (system.d, system.m):
        raise ModelError(
            f"diffusion returned shape {out.shape}, expected {lead + (system.d, system.m)}"
        )
    return out


@dataclass(frozen=True)
class InitialSegment:
    """Initial datum ``xi`` on ``[-tau, 0]``."""

    evaluate: Callable[[float], np.ndarray]
    norm_bound: Optional[float] = None

    def __call__(self, s: float) -> np.ndarray:
        return np.asarray(self.evaluate(s), dtype=float)

    @classmethod
    def constant(cls, value) -> "InitialSegment":
        v = np.array(value, dtype=float)
        v.setflags(write=False)
        return cls(lambda s: v, float(np.linalg.norm(v)))

    def discretize(self, grid: "GridSpec", d: int) -> np.ndarray:
        """States ``xi(k * delta)`` for ``k = -m_bar..0``, shape ``(m_bar + 1, d)``."""
        rows = []
        for k in range(-grid.m_bar, 1):
            v = self(k * grid.delta)
            if v.shape != (d,):
                raise ModelError(f"initial segment returned shape {v.shape} at s={k * grid.delta}")
            if not np.all(np.isfinite(v)):
                raise ModelError(f"initial segment is not finite at s={k * grid.delta}")
            rows.append(v)
        return np.stack(rows)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``delta = tau_max / m_bar`` and ``n_steps`` steps."""

    tau_max: float
    m_bar: int
    n_steps: int
    delta: float = field(init=False)

    def __post_init__(self):
        if int(self.m_bar) != self.m_bar or self.m_bar < 1:
            raise ModelError(f"m_bar must be a positive integer, got {self.m_bar}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ModelError(f"n_steps must be a non-negative integer, got {self.n_steps}")
        if not (self.tau_max > 0 and math.isfinite(self.tau_max)):
            raise ModelError(f"tau_max must be positive, got {self.tau_max}")
        object.__setattr__(self, "m_bar", int(self.m_bar))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "delta", self.tau_max / self.m_bar)

    @classmethod
    def from_horizon(cls, tau_max: float, m_bar: int, horizon: float) -> "GridSpec":
        delta = tau_max / m_bar
        return cls(tau_max, m_bar, int(round(horizon / delta)))

    @property
    def horizon(self) -> float:
        return self.n_steps * self.delta

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.delta
