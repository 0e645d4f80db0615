"""Guided-process smoothing for continuously observed diffusions.

The package simulates partially observed diffusion models, solves the
backward information filter for an affine guide, draws guided proposal
paths with tractable importance weights, and exposes pCN MCMC, importance
sampling, an exact Kalman-RTS cross-check for affine models, and a
stochastic variational fit of the guide parameters.
"""

from .backward_filter import (
    DEFAULT_FLAT_KAPPA,
    BackwardFilterSolution,
    FilterError,
    LinearGuide,
    control,
    eval_log_vtilde,
    solve_backward,
)
from .guided import (
    GuidedSimulationError,
    WeightedPath,
    lemma_tildev_residual,
    psi,
    simulate_guided,
)
from .mcmc import (
    ChainState,
    PcnConfig,
    PosteriorSummary,
    pcn_preserves_prior_test,
    pcn_step,
    run_chain,
)
from .models import build_guide, build_model
from .montecarlo import (
    EstimationError,
    ImportanceEstimate,
    KalmanSmootherSolution,
    effective_sample_size,
    importance_estimate,
    kalman_rts_oracle,
    path_seeds,
)
from .sde import (
    ModelSpec,
    NoiseDraw,
    ObservationRecord,
    Path,
    SimulationError,
    TerminalObservation,
    TimeGrid,
    draw_noise,
    simulate_forward,
    simulate_observation,
)
from .variational import (
    AdamState,
    FitError,
    GuideParams,
    fit_guide,
    guide_from_params,
    reward_and_grad,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BackwardFilterSolution",
    "ChainState",
    "DEFAULT_FLAT_KAPPA",
    "EstimationError",
    "FitError",
    "FilterError",
    "GuideParams",
    "GuidedSimulationError",
    "ImportanceEstimate",
    "KalmanSmootherSolution",
    "LinearGuide",
    "ModelSpec",
    "NoiseDraw",
    "ObservationRecord",
    "Path",
    "PcnConfig",
    "PosteriorSummary",
    "SimulationError",
    "TerminalObservation",
    "TimeGrid",
    "WeightedPath",
    "build_guide",
    "build_model",
    "control",
    "draw_noise",
    "eval_log_vtilde",
    "effective_sample_size",
    "fit_guide",
    "guide_from_params",
    "importance_estimate",
    "kalman_rts_oracle",
    "lemma_tildev_residual",
    "path_seeds",
    "pcn_preserves_prior_test",
    "pcn_step",
    "psi",
    "reward_and_grad",
    "run_chain",
    "simulate_forward",
    "simulate_guided",
    "simulate_observation",
    "solve_backward",
    "__version__",
]
