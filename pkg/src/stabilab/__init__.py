"""Mean-square stability lab for stochastic differential delay equations."""

from .certify import (
    Certificate,
    Infeasible,
    check_componentwise_bound,
    check_theta_condition,
    decay_rate,
    find_certificate,
    find_theta_certificate,
    growth_constant,
    khasminskii_diagnostic,
    verify_certificate,
)
from .model import (
    CoeffBounds,
    DelayFunction,
    GridSpec,
    InitialSegment,
    LipschitzModel,
    SddeSystem,
    eval_diffusion,
    eval_drift,
)
from .montecarlo import NoiseStream, as_exponent, brownian_increments, ensemble_moments, fit_decay_rate
from .presets import preset
from .schemes import PathState, SchemeConfig, em_step, integrate_path, lag_index, mtem_step, theta_step
from .truncation import TruncationConfig, check_truncation_lemmas, h_of_delta, truncate_pair

__version__ = "0.1.0"
