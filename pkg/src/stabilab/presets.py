"""The two worked 2-D examples, plus a builder for linear systems.

Example 1 has a cubic drift balanced by a quadratic diffusion in the first
coordinate; Example 2 is fully linear. Both share the same ``A, B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import (
    CoeffBounds,
    DelayFunction,
    InitialSegment,
    LipschitzModel,
    ModelError,
    SddeSystem,
)

SQRT38_625 = math.sqrt(38.0) / 625.0
SQRT_2_5 = math.sqrt(2.0 / 5.0)
SQRT10_5 = math.sqrt(10.0) / 5.0
LAG_W = 1e-4

EXAMPLE_A = np.array([[-399.0 / 5000.0, 2.0], [1.0 / 5.0**6, -399.0 / 5000.0]])
EXAMPLE_B = np.full((2, 2), 1e-4)
REFERENCE_P = np.array([500.0, 1.0])
REFERENCE_EPSILON = 499.0 / 1000.0
PRESET_NAMES = ("example1", "example2")


@dataclass(frozen=True)
class Preset:
    system: SddeSystem
    bounds: CoeffBounds
    initial: InitialSegment
    reference_p: np.ndarray
    reference_epsilon: float


def _lagged(y):
    return LAG_W * (y[..., 0] + y[..., 1])


def _example1_drift(x, y):
    x1, x2 = x[..., 0], x[..., 1]
    lag = _lagged(y)
    f1 = -0.2 * x1 - (2.0 / 9.0) * (x1 * x1 * x1) + 0.8 * x2 + lag
    f2 = SQRT38_625 * x1 - x2 + lag
    return np.stack([f1, f2], axis=-1)


def _diag2(a, b):
    out = np.zeros(a.shape + (2, 2))
    out[..., 0, 0] = a
    out[..., 1, 1] = b
    return out


def _components(x, y):
    lead = np.broadcast_shapes(x.shape, y.shape)[:-1]
    return np.broadcast_to(x[..., 0], lead), np.broadcast_to(x[..., 1], lead)


def _example1_diffusion(x, y):
    x1, x2 = _components(x, y)
    return _diag2((2.0 / 3.0) * (x1 * x1), SQRT_2_5 * x2)


def _example2_drift(x, y):
    x1, x2 = x[..., 0], x[..., 1]
    lag = _lagged(y)
    f1 = -0.4 * x1 + 0.8 * x2 + lag
    f2 = SQRT38_625 * x1 - x2 + lag
    return np.stack([f1, f2], axis=-1)


def _example2_diffusion(x, y):
    x1, x2 = _components(x, y)
    return _diag2(SQRT10_5 * x1, SQRT10_5 * x2)


def example1_delay() -> DelayFunction:
    return DelayFunction(lambda t: 0.1 * (1.0 - abs(math.sin(t))), 0.1)


def example2_delay() -> DelayFunction:
    return DelayFunction(lambda t: 0.1 * abs(math.sin(t)), 0.1)


def example1() -> Preset:
    # Drift Jacobian norm <= 1.5 + (2/3) R^2 and diffusion Jacobian norm
    # <= (4/3) R + 0.64 on the ball of radius R; both are <= 2 (1 + R^2).
    lip = LipschitzModel.polynomial(2.0, 2.0, one_sided_L=1.0)
    system = SddeSystem(
        d=2, m=2, drift=_example1_drift, diffusion=_example1_diffusion,
        delay=example1_delay(), lipschitz_model=lip,
        claimed_bounds=CoeffBounds(EXAMPLE_A, EXAMPLE_B), name="example1",
    )
    return Preset(system, system.claimed_bounds, InitialSegment.constant([1.0, 1.0]),
                  REFERENCE_P.copy(), REFERENCE_EPSILON)


def example2() -> Preset:
    Cx = np.array([[-0.4, 0.8], [SQRT38_625, -1.0]])
    Cy = np.full((2, 2), LAG_W)
    K = float(max(np.linalg.norm(Cx, 2), np.linalg.norm(Cy, 2)))
    lip = LipschitzModel.global_(max(K, SQRT10_5), one_sided_L=K, drift_linear_K=K)
    system = SddeSystem(
        d=2, m=2, drift=_example2_drift, diffusion=_example2_diffusion,
        delay=example2_delay(), lipschitz_model=lip,
        claimed_bounds=CoeffBounds(EXAMPLE_A, EXAMPLE_B), name="example2",
    )
    return Preset(system, system.claimed_bounds, InitialSegment.constant([1.0, 1.0]),
                  REFERENCE_P.copy(), REFERENCE_EPSILON)


def preset(name: str) -> Preset:
    if name == "example1":
        return example1()
    if name == "example2":
        return example2()
    raise ValueError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")


def linear_system(
    drift_x,
    drift_y,
    sigma,
    delay: DelayFunction,
    bounds: Optional[CoeffBounds] = None,
    name: str = "inline",
) -> SddeSystem:
    """``f(x, y) = Cx x + Cy y`` and ``g(x, y) = diag(sigma * x)``."""
    Cx = np.array(drift_x, dtype=float)
    Cy = np.array(drift_y, dtype=float)
    s = np.array(sigma, dtype=float)
    d = Cx.shape[0]
    if Cx.shape != (d, d) or Cy.shape != (d, d) or s.shape != (d,):
        raise ModelError("drift_x, drift_y must be d x d and sigma length d")

    def drift(x, y):
        return x @ Cx.T + y @ Cy.T

    def diffusion(x, y):
        x = np.broadcast_to(x, np.broadcast_shapes(x.shape, y.shape))
        out = np.zeros(x.shape + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = s * x
        return out

    K = float(max(np.linalg.norm(Cx, 2), np.linalg.norm(Cy, 2)))
    lip = LipschitzModel.global_(max(K, float(np.abs(s).max(initial=0.0))),
                                 one_sided_L=K, drift_linear_K=K)
    return SddeSystem(d=d, m=d, drift=drift, diffusion=diffusion, delay=delay,
                      lipschitz_model=lip, claimed_bounds=bounds, name=name)


DELAY_KINDS: dict[str, Callable[[float], DelayFunction]] = {
    "constant": DelayFunction.constant,
    "one_minus_abs_sin": lambda tau: DelayFunction(lambda t: tau * (1.0 - abs(math.sin(t))), tau),
    "abs_sin": lambda tau: DelayFunction(lambda t: tau * abs(math.sin(t)), tau),
}
