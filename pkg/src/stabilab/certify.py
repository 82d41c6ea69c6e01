"""Checks and searches over the coefficient matrices ``A`` and ``B``.

Everything here works on ``CoeffBounds`` alone, except the sampling check,
which also evaluates the system's drift and diffusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .model import CoeffBounds, ModelError, SddeSystem, eval_diffusion, eval_drift

ABSCISSA_TOL = 1e-12
BETA_TOL = 1e-10


class CertificateError(ArithmeticError):
    """Numerically degenerate certificate problem (abscissa too close to 0)."""


class EvaluationError(ValueError):
    """Drift or diffusion produced a non-finite value at a sample point."""


@dataclass(frozen=True)
class Certificate:
    p: np.ndarray
    beta: float
    margins: np.ndarray
    abscissa: float

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.margins < 0))


@dataclass(frozen=True)
class Infeasible:
    abscissa: float

    feasible = False


@dataclass(frozen=True)
class Violation:
    index: int
    x: np.ndarray
    y: np.ndarray
    row: int
    lhs: float
    rhs: float


@dataclass(frozen=True)
class KhasminskiiVerdict:
    feasible: bool
    col_sums_a: np.ndarray
    col_sums_b: np.ndarray


@dataclass
class DiagnosticsReport:
    khasminskii: KhasminskiiVerdict
    growth_K: float
    violations: List[Violation] = field(default_factory=list)
    n_samples: int = 0

    @property
    def khasminskii_feasible(self) -> bool:
        return self.khasminskii.feasible

    @property
    def passed(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class MarginReport:
    margins: np.ndarray
    feasible: bool
    epsilon_bound: Optional[float] = None

    @property
    def failing_rows(self) -> List[int]:
        return [i for i, m in enumerate(self.margins) if not m < 0]


def sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """``n`` points uniform in the Euclidean ball of ``radius`` in ``R^dim``."""
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return g * r[:, None]


def componentwise_sides(f, g, x, y, bounds: CoeffBounds):
    """Row-wise left and right sides of the componentwise bound, plus a
    magnitude scale for round-off slack. Shapes ``(n, d)``."""
    lhs = 2.0 * x * f + np.sum(g * g, axis=-1)
    rhs = (x * x) @ bounds.A.T + (y * y) @ bounds.B.T
    scale = (
        np.abs(2.0 * x * f)
        + np.sum(g * g, axis=-1)
        + (x * x) @ np.abs(bounds.A).T
        + (y * y) @ bounds.B.T
    )
    return lhs, rhs, scale


def collect_violations(x, y, lhs, rhs, scale, rtol, offset=0) -> List[Violation]:
    bad = lhs > rhs + rtol * scale
    out = []
    for k, i in zip(*np.nonzero(bad)):
        out.append(Violation(int(k) + offset, x[k].copy(), y[k].copy(), int(i),
                             float(lhs[k, i]), float(rhs[k, i])))
    return out


def check_componentwise_bound(
    system: SddeSystem,
    bounds: CoeffBounds,
    n_samples: int = 10_000,
    radius: float = 10.0,
    seed: int = 0,
    rtol: float = 1e-9,
) -> DiagnosticsReport:
    """Sample ``(x, y)`` uniformly in the ball of ``radius`` in ``R^{2d}`` and
    test the componentwise bound on every row.

    ``rtol`` scales with the magnitude of the terms involved so that exact
    cancellations (e.g. a cubic drift against a quadratic diffusion) are not
    reported as violations.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    if bounds.d != system.d:
        raise ModelError("bounds dimension does not match system")
    d = system.d
    rng = np.random.default_rng(seed)
    pts = sample_ball(rng, n_samples, 2 * d, radius)
    x, y = pts[:, :d], pts[:, d:]
    f = eval_drift(system, x, y)
    g = eval_diffusion(system, x, y)
    finite = np.all(np.isfinite(f), axis=1) & np.all(np.isfinite(g), axis=(1, 2))
    if not finite.all():
        k = int(np.argmin(finite))
        raise EvaluationError(f"non-finite drift/diffusion at sample {k}: x={x[k]}, y={y[k]}")
    lhs, rhs, scale = componentwise_sides(f, g, x, y, bounds)
    return DiagnosticsReport(
        khasminskii=khasminskii_diagnostic(bounds),
        growth_K=growth_constant(bounds),
        violations=collect_violations(x, y, lhs, rhs, scale, rtol),
        n_samples=n_samples,
    )


def khasminskii_diagnostic(bounds: CoeffBounds) -> KhasminskiiVerdict:
    """Column-sum test for whether the aggregated bound can take the
    ``-C1|x|^2 + C2|y|^2`` form with ``C1 > C2 > 0``."""
    sa = bounds.A.sum(axis=0)
    sb = bounds.B.sum(axis=0)
    feasible = bool(sa.max() < 0 and (-sa).min() > sb.max())
    return KhasminskiiVerdict(feasible, sa, sb)


def growth_constant(bounds: CoeffBounds) -> float:
    cols = np.concatenate([np.abs(bounds.A).sum(axis=0), bounds.B.sum(axis=0)])
    return float(max(cols.max(), 1.0))


def spectral_abscissa(M: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest real part of the eigenvalues of a Metzler matrix.

    Closed form for ``d <= 2``. Otherwise the matrix is shifted to be
    nonnegative with positive diagonal and the Perron root is bracketed by
    Collatz-Wielandt bounds under power iteration.
    """
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    if d == 1:
        return float(M[0, 0])
    if d == 2:
        a, b, c, e = M[0, 0], M[0, 1], M[1, 0], M[1, 1]
        half = 0.5 * (a + e)
        disc = 0.25 * (a - e) ** 2 + b * c
        # b*c >= 0 for Metzler M, so the eigenvalues are real
        return float(half + math.sqrt(disc))
    sigma = np.abs(np.diag(M)).max() + np.abs(M).sum(axis=1).max()
    N = M + sigma * np.eye(d)
    v = np.ones(d)
    for _ in range(max_iter):
        w = N @ v
        ratios = w / v
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * max(1.0, abs(hi)):
            return float(0.5 * (lo + hi) - sigma)
        v = w / np.linalg.norm(w)
    raise CertificateError(f"power iteration did not converge in {max_iter} iterations")


def metzler_sum(bounds: CoeffBounds) -> np.ndarray:
    return bounds.A + bounds.B


def find_certificate(
    bounds: CoeffBounds, tau_max: Optional[float] = None
) -> Union[Certificate, Infeasible]:
    """Return ``p = (-(A + B))^{-1} 1`` when ``A + B`` is Hurwitz.

    For a Hurwitz Metzler matrix the inverse of its negation is entrywise
    nonnegative with positive diagonal, so ``p`` is strictly positive and
    every margin equals ``-1``. ``beta`` is filled in when ``tau_max`` is given.
    """
    M = metzler_sum(bounds)
    alpha = spectral_abscissa(M)
    if alpha > ABSCISSA_TOL:
        return Infeasible(alpha)
    if alpha >= -ABSCISSA_TOL:
        raise CertificateError(f"spectral abscissa {alpha:.3e} is within {ABSCISSA_TOL} of zero")
    p = np.linalg.solve(-M, np.ones(bounds.d))
    if not np.all(p > 0):
        raise CertificateError(f"solve returned a non-positive weight vector {p}")
    margins = M @ p
    beta = decay_rate(bounds, p, tau_max) if tau_max is not None else 0.0
    return Certificate(p=p, beta=beta, margins=margins, abscissa=alpha)


def _positive(p, d: int) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (d,):
        raise ValueError(f"p must have shape ({d},), got {p.shape}")
    if not np.all(p > 0):
        raise ValueError(f"p must be strictly positive, got {p}")
    return p


def verify_certificate(bounds: CoeffBounds, p) -> MarginReport:
    p = _positive(p, bounds.d)
    margins = (bounds.A + bounds.B) @ p
    return MarginReport(margins, bool(np.all(margins < 0)))


def decay_objective(bounds: CoeffBounds, p: np.ndarray, tau_max: float, beta: float) -> float:
    """``max_i [sum_j a_ij p_j + e^{beta tau} sum_j b_ij p_j + beta p_i]``."""
    return float(np.max(bounds.A @ p + math.exp(beta * tau_max) * (bounds.B @ p) + beta * p))


def decay_rate(bounds: CoeffBounds, p, tau_max: float, tol: float = BETA_TOL) -> float:
    """Largest ``beta >= 0`` with ``decay_objective(beta) <= 0``, by bisection."""
    p = _positive(p, bounds.d)
    if not tau_max > 0:
        raise ValueError(f"tau_max must be > 0, got {tau_max}")
    report = verify_certificate(bounds, p)
    if not report.feasible:
        raise ValueError(f"p is not a certificate; margins {report.margins}")
    hi = float(np.max(np.abs(report.margins) / p))
    if decay_objective(bounds, p, tau_max, hi) <= 0:
        return hi
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if decay_objective(bounds, p, tau_max, mid) <= 0:
            lo = mid
        else:
            hi = mid
    return lo


def theta_epsilon_bound(bounds: CoeffBounds) -> float:
    diag = np.diag(bounds.A)
    if not np.all(diag < 0):
        raise ValueError("the epsilon condition needs every a_ii < 0")
    mags = np.abs(diag)
    return float(mags.min() / (bounds.d * mags.max()))


def check_theta_condition(bounds: CoeffBounds, p, epsilon: float) -> MarginReport:
    """Margins ``eps a_ii p_i + sum_{j != i} a_ij p_j + sum_j b_ij p_j``."""
    p = _positive(p, bounds.d)
    bound = theta_epsilon_bound(bounds)
    if not 0 < epsilon < bound:
        raise ValueError(f"epsilon must lie in (0, {bound}), got {epsilon}")
    A = bounds.A
    diag = np.diag(A)
    margins = epsilon * diag * p + (A @ p - diag * p) + bounds.B @ p
    return MarginReport(margins, bool(np.all(margins < 0)), bound)


def epsilon_matrix(bounds: CoeffBounds, epsilon: float) -> np.ndarray:
    """``A + B`` with the diagonal of ``A`` scaled by ``epsilon``."""
    A = bounds.A.copy()
    np.fill_diagonal(A, epsilon * np.diag(A))
    return A + bounds.B


def find_theta_certificate(bounds: CoeffBounds, epsilon: float) -> Union[Certificate, Infeasible]:
    """Weights satisfying the epsilon condition, ``p = (-M_eps)^{-1} 1``."""
    theta_epsilon_bound(bounds)
    M = epsilon_matrix(bounds, epsilon)
    alpha = spectral_abscissa(M)
    if alpha > ABSCISSA_TOL:
        return Infeasible(alpha)
    if alpha >= -ABSCISSA_TOL:
        raise CertificateError(f"spectral abscissa {alpha:.3e} is within {ABSCISSA_TOL} of zero")
    p = np.linalg.solve(-M, np.ones(bounds.d))
    report = check_theta_condition(bounds, p, epsilon)
    return Certificate(p=p, beta=0.0, margins=report.margins, abscissa=alpha)


@dataclass(frozen=True)
class LinearGrowth:
    """Linear-growth data for the drift: ``|f(x, y)| <= K (|x| + |y|)``."""

    linear: bool
    K: float
    max_row_sum: float
    empirical_ratio: float
    drift_x: Optional[np.ndarray] = None
    drift_y: Optional[np.ndarray] = None


def linear_drift_growth(
    system: SddeSystem, n_samples: int = 2000, seed: int = 0, radius: float = 10.0
) -> LinearGrowth:
    """Recover ``f(x, y) = Cx x + Cy y`` by probing basis vectors and confirm
    linearity on random samples.

    For a linear drift ``K = max(||Cx||_2, ||Cy||_2)``. Otherwise ``K`` falls
    back to the model's ``drift_linear_K`` (``inf`` when absent).
    ``empirical_ratio`` is the largest sampled ``|f| / (|x| + |y|)``.
    """
    d = system.d
    eye = np.eye(d)
    zero = np.zeros((d, d))
    Cx = eval_drift(system, eye, zero).T
    Cy = eval_drift(system, zero, eye).T
    rng = np.random.default_rng(seed)
    pts = sample_ball(rng, n_samples, 2 * d, radius)
    x, y = pts[:, :d], pts[:, d:]
    f = eval_drift(system, x, y)
    pred = x @ Cx.T + y @ Cy.T
    scale = np.abs(x) @ np.abs(Cx).T + np.abs(y) @ np.abs(Cy).T + 1e-300
    linear = bool(np.all(np.abs(f - pred) <= 1e-9 * scale + 1e-12))
    ratio = float(np.max(np.linalg.norm(f, axis=1) / (np.linalg.norm(x, axis=1) + np.linalg.norm(y, axis=1))))
    if linear:
        K = float(max(np.linalg.norm(Cx, 2), np.linalg.norm(Cy, 2)))
        rows = float(np.max(np.abs(Cx).sum(axis=1) + np.abs(Cy).sum(axis=1)))
        return LinearGrowth(True, K, rows, ratio, Cx, Cy)
    lip = system.lipschitz_model
    K = lip.drift_linear_K if lip is not None and lip.drift_linear_K is not None else math.inf
    return LinearGrowth(False, float(K), math.nan, ratio)


def small_step_margins(bounds: CoeffBounds, K: float, theta: float, delta: float) -> np.ndarray:
    """``2 (1 - 2 theta) K^2 delta + a_ii`` per row; all negative is the
    step-size requirement for ``theta <= 1/2`` under linear drift growth."""
    return 2.0 * (1.0 - 2.0 * theta) * K * K * delta + np.diag(bounds.A)
