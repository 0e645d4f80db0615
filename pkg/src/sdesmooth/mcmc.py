"""Preconditioned Crank-Nicolson MCMC on the driving noise of the guided
process.

The chain lives on Brownian increments, not on path values: a state z maps to
a path through the guided Euler solve, so the smoothing posterior has an
explicit density (the path weight) with respect to the Wiener increment prior,
and the pCN proposal

    z' = rho z + sqrt(1 - rho^2) * fresh increments

leaves that prior invariant.  Acceptance only ever compares two weights, so
all additive weight constants cancel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backward_filter import BackwardFilterSolution, LinearGuide
from .guided import GuidedSimulationError, WeightedPath, simulate_guided
from .sde import Array, ModelSpec, NoiseDraw, Path, TimeGrid

__all__ = [
    "PcnConfig",
    "ChainState",
    "PosteriorSummary",
    "PriorCheckStatistic",
    "pcn_step",
    "run_chain",
    "pcn_preserves_prior_test",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcnConfig:
    """Chain settings: step correlation rho, length, burn-in, thinning, seed."""

    rho: float
    n_iters: int
    burn_in: int
    seed: int
    thin: int = 1

    def __post_init__(self) -> None:
        if not (0.0 < self.rho < 1.0):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be positive, got {self.n_iters}")
        if not (0 <= self.burn_in < self.n_iters):
            raise ValueError(
                f"burn_in must satisfy 0 <= burn_in < n_iters, got {self.burn_in}"
            )
        if self.thin < 1:
            raise ValueError(f"thin must be positive, got {self.thin}")


@dataclass(frozen=True, eq=False)
class ChainState:
    """Current increments, the guided path they induce, and step counters.

    ``nonfinite_count`` tracks proposals rejected because their weight was not
    finite; these count as ordinary rejections for the acceptance rate.
    """

    z: NoiseDraw
    current: WeightedPath
    accept_count: int
    iter: int
    nonfinite_count: int = 0


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Moment summary of the retained guided samples.

    ``ess_proxy`` divides the retained sample count by the integrated
    autocorrelation time of the log-weight trace; it is a mixing diagnostic,
    not an importance-sampling effective size.
    """

    mean_path: Path
    var_path: Path
    acceptance_rate: float
    ess_proxy: float


@dataclass(frozen=True, eq=False)
class PriorCheckStatistic:
    """Per-coordinate standardized means and variance ratios of retained
    increments under a constant-weight kernel."""

    mean_zscores: Array
    var_ratio: Array


def pcn_step(
    state: ChainState,
    cfg: PcnConfig,
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    rng: np.random.Generator,
) -> ChainState:
    """One preconditioned Crank-Nicolson update of the noise state.

    Always draws the fresh increments first and the acceptance uniform second,
    so the stream position after a step does not depend on the branch taken.
    A proposal whose weight is non-finite is rejected outright, counted in
    ``nonfinite_count`` and logged.
    """
    grid = state.z.grid
    h = grid.h
    fresh = rng.standard_normal(state.z.increments.shape) * math.sqrt(h)
    u = rng.uniform()
    z_prop = cfg.rho * state.z.increments + math.sqrt(1.0 - cfg.rho**2) * fresh

    proposal: Optional[WeightedPath] = None
    log_ratio = -math.inf
    try:
        proposal = simulate_guided(model, guide, sol, NoiseDraw(grid=grid, increments=z_prop))
        log_ratio = proposal.total_log_weight - state.current.total_log_weight
    except GuidedSimulationError as exc:
        logger.info("iteration %d: proposal rejected, %s", state.iter + 1, exc)

    nonfinite = state.nonfinite_count
    if proposal is None or not math.isfinite(log_ratio):
        if proposal is not None:
            logger.info("iteration %d: proposal rejected, non-finite weight ratio", state.iter + 1)
        nonfinite += 1
        accepted = False
    else:
        accepted = u <= 0.0 or math.log(u) < log_ratio

    if accepted:
        return ChainState(
            z=NoiseDraw(grid=grid, increments=z_prop),
            current=proposal,
            accept_count=state.accept_count + 1,
            iter=state.iter + 1,
            nonfinite_count=nonfinite,
        )
    return ChainState(
        z=state.z,
        current=state.current,
        accept_count=state.accept_count,
        iter=state.iter + 1,
        nonfinite_count=nonfinite,
    )


def _integrated_autocorr(trace: Array) -> float:
    """Integrated autocorrelation time of a scalar trace.

    Sums empirical autocorrelations until the first negative lag (initial
    positive sequence cutoff).  A constant trace has time 1 by convention.
    """
    trace = np.asarray(trace, dtype=float)
    n = trace.size
    if n < 2:
        return 1.0
    centered = trace - trace.mean()
    var = centered @ centered
    if var == 0.0:
        return 1.0
    iact = 1.0
    for lag in range(1, min(n - 1, 1000)):
        rho = (centered[lag:] @ centered[:-lag]) / var
        if rho <= 0.0:
            break
        iact += 2.0 * rho
    return iact


def run_chain(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    cfg: PcnConfig,
    keep_samples: int = 0,
) -> tuple[PosteriorSummary, dict]:
    """Run the pCN chain and accumulate retained-sample moments.

    The initial increments are drawn from the Wiener prior with the chain's
    own generator, so the whole run is a deterministic function of the config.
    After iteration i > burn_in, the sample is retained when
    (i - burn_in - 1) % thin == 0.  Mean and variance are accumulated with
    Welford updates (population variance: one retained sample gives zero).

    ``keep_samples`` > 0 additionally stores that many retained paths, evenly
    spread over the retained run, under the diagnostics key "samples".

    Returns the summary and a diagnostics dict with per-iteration
    ``log_weights`` and ``accepted`` flags plus the non-finite proposal count.
    """
    grid = sol.grid
    rng = np.random.default_rng(cfg.seed)
    z0 = NoiseDraw(
        grid=grid,
        increments=rng.standard_normal((grid.n_steps, model.dim_w)) * math.sqrt(grid.h),
    )
    state = ChainState(
        z=z0,
        current=simulate_guided(model, guide, sol, z0),
        accept_count=0,
        iter=0,
    )

    n_retained = (cfg.n_iters - cfg.burn_in - 1) // cfg.thin + 1
    keep_idx: set[int] = set()
    if keep_samples > 0:
        spread = np.unique(
            np.round(np.linspace(0, n_retained - 1, min(keep_samples, n_retained))).astype(int)
        )
        keep_idx = set(int(j) for j in spread)

    mean = np.zeros((grid.n_steps + 1, model.dim_x))
    m2 = np.zeros_like(mean)
    count = 0
    log_weights = np.empty(cfg.n_iters)
    accepted = np.empty(cfg.n_iters, dtype=bool)
    retained_logw = np.empty(n_retained)
    samples: list[tuple[int, Path]] = []

    for i in range(1, cfg.n_iters + 1):
        prev_accepts = state.accept_count
        state = pcn_step(state, cfg, model, guide, sol, rng)
        log_weights[i - 1] = state.current.total_log_weight
        accepted[i - 1] = state.accept_count > prev_accepts
        if i > cfg.burn_in and (i - cfg.burn_in - 1) % cfg.thin == 0:
            x = state.current.x_path.values
            count += 1
            delta = x - mean
            mean += delta / count
            m2 += delta * (x - mean)
            retained_logw[count - 1] = state.current.total_log_weight
            if (count - 1) in keep_idx:
                samples.append((i, state.current.x_path))

    var = m2 / count
    ess_proxy = count / _integrated_autocorr(retained_logw)
    summary = PosteriorSummary(
        mean_path=Path(grid=grid, values=mean),
        var_path=Path(grid=grid, values=var),
        acceptance_rate=state.accept_count / cfg.n_iters,
        ess_proxy=float(ess_proxy),
    )
    diagnostics = {
        "log_weights": log_weights,
        "accepted": accepted,
        "nonfinite_proposals": state.nonfinite_count,
        "n_retained": count,
        "samples": samples,
    }
    return summary, diagnostics


def pcn_preserves_prior_test(
    cfg: PcnConfig,
    grid: TimeGrid,
    n_samples: int,
    dim: int = 1,
) -> PriorCheckStatistic:
    """Empirical check that the pCN kernel leaves the increment prior invariant.

    Runs the kernel with a constant target weight, so every proposal is
    accepted and the chain is exactly the AR(1) recursion z' = rho z + noise.
    The chain starts from a prior draw, runs cfg.burn_in steps, then retains
    every cfg.thin-th state until n_samples are kept (cfg.n_iters is ignored;
    the required length follows from n_samples).  Returns, per increment
    coordinate, the standardized sample mean (the AR(1) factor
    (1 + r)/(1 - r) with r = rho**thin inflates the variance of the mean) and
    the sample-variance to h ratio.
    """
    if n_samples < 2:
        raise ValueError(f"need at least two samples, got {n_samples}")
    rng = np.random.default_rng(cfg.seed)
    sqrt_h = math.sqrt(grid.h)
    shape = (grid.n_steps, dim)
    z = rng.standard_normal(shape) * sqrt_h
    rho = cfg.rho
    scale = math.sqrt(1.0 - rho**2)

    for _ in range(cfg.burn_in):
        z = rho * z + scale * (rng.standard_normal(shape) * sqrt_h)

    retained = np.empty((n_samples,) + shape)
    retained[0] = z
    for j in range(1, n_samples):
        for _ in range(cfg.thin):
            z = rho * z + scale * (rng.standard_normal(shape) * sqrt_h)
        retained[j] = z

    r = rho**cfg.thin
    mean_sd = math.sqrt(grid.h / n_samples * (1.0 + r) / (1.0 - r))
    mean_z = retained.mean(axis=0) / mean_sd
    var_ratio = retained.var(axis=0, ddof=1) / grid.h
    return PriorCheckStatistic(mean_zscores=mean_z, var_ratio=var_ratio)
