"""Scenario registry and end-to-end pipeline driver.

A scenario bundles everything a reproduction run needs (model, guide, grid,
seeds, sampler and fit settings).  ``run_pipeline`` executes the requested
stages in dependency order; every stage reads its inputs from files written by
the previous stage and writes files in turn, so any stage can equally run in a
separate process.  Artifact layout under the working directory:

    simulate   x.csv, y.csv, zeta.csv
    backward   filter.csv, filter_meta.json
    smooth     mean.csv, var.csv, trace.csv          (the MCMC reference)
    smooth-is  estimate.csv, ess.txt
    fit        theta.csv, loss.csv, B_star.csv, m_star.csv
    compare    mu_adhoc.csv, mu_fitted.csv, err_adhoc.csv, err_fitted.csv,
               compare_norms.json

plus one meta.json updated by every invocation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path as FilePath
from typing import Optional, Union

import numpy as np

from . import artifacts
from .backward_filter import LinearGuide, solve_backward
from .guided import _simulate_guided_batch
from .mcmc import PcnConfig, run_chain
from .models import reaction_diffusion_guide, reaction_diffusion_model
from .montecarlo import importance_estimate, path_seeds
from .sde import (
    Array,
    ModelSpec,
    ObservationRecord,
    Path,
    TimeGrid,
    draw_noise,
    simulate_forward,
    simulate_observation,
)
from .variational import AdamState, GuideParams, fit_guide, guide_from_params

__all__ = [
    "PipelineError",
    "FitSettings",
    "Scenario",
    "build_reaction_diffusion",
    "run_pipeline",
    "STAGE_ORDER",
]

logger = logging.getLogger(__name__)

STAGE_ORDER = ("simulate", "backward", "smooth", "smooth-is", "fit", "compare")


class PipelineError(RuntimeError):
    """Raised when a stage cannot run, naming the stage."""


@dataclass(frozen=True)
class FitSettings:
    """Variational stage settings (Adam learning rate, iterations, batch)."""

    n_iters: int = 2000
    batch: int = 1
    eta: float = 0.01


@dataclass(frozen=True, eq=False)
class Scenario:
    """One reproducible experiment configuration."""

    name: str
    model: ModelSpec
    guide: LinearGuide
    grid: TimeGrid
    seeds: dict
    pcn: PcnConfig
    fit: Optional[FitSettings] = None
    n_is_paths: int = 2000

    def __post_init__(self) -> None:
        B0 = self.guide.B(0.0)
        if B0.shape != (self.model.dim_x, self.model.dim_x):
            raise ValueError(
                f"guide drift matrix shape {B0.shape} does not match model dimension {self.model.dim_x}"
            )
        for key in ("sim", "mcmc"):
            if key not in self.seeds:
                raise ValueError(f"scenario seeds must include '{key}'")
        if self.n_is_paths < 1:
            raise ValueError("n_is_paths must be positive")

    def with_seeds(self, **updates: int) -> "Scenario":
        seeds = dict(self.seeds)
        seeds.update({k: v for k, v in updates.items() if v is not None})
        return replace(self, seeds=seeds)


def build_reaction_diffusion(d: int) -> Scenario:
    """The coupled double-well lattice study: smoothing at d=100, fitting at d=20.

    Drift -5 Lambda x + F(x) with unit dispersion, H = 5 I, T = 1, h = 0.001,
    x0 = 0 and a terminal reading with Sigma = 0.1 I; the ad hoc guide drops
    the bistable force and keeps B = -5 Lambda, m = 0.
    """
    if d < 2:
        raise ValueError(f"the lattice model needs d >= 2, got d={d}")
    return Scenario(
        name=f"reaction_diffusion_d{d}",
        model=reaction_diffusion_model(d),
        guide=reaction_diffusion_guide(d),
        grid=TimeGrid(T=1.0, n_steps=1000),
        seeds={"sim": 11, "mcmc": 13, "fit": 17, "is": 23},
        pcn=PcnConfig(rho=0.9, n_iters=6000, burn_in=1000, seed=13, thin=1),
        fit=FitSettings(n_iters=2000, batch=1, eta=0.01),
        n_is_paths=2000,
    )


def _require(stage: str, workdir: FilePath, *filenames: str) -> None:
    for name in filenames:
        if not (workdir / name).exists():
            raise PipelineError(
                f"stage '{stage}': missing upstream artifact {name}; run earlier stages first"
            )


def _load_observation(scenario: Scenario, workdir: FilePath, stage: str) -> ObservationRecord:
    _require(stage, workdir, "y.csv")
    _, y_values = artifacts.read_wide_csv(workdir / "y.csv")
    zeta = None
    if scenario.model.terminal_obs is not None:
        _require(stage, workdir, "zeta.csv")
        zeta = artifacts.read_vector_csv(workdir / "zeta.csv")
    return ObservationRecord(y_path=Path(grid=scenario.grid, values=y_values), zeta=zeta)


def _guided_mean(
    scenario: Scenario,
    guide: LinearGuide,
    sol,
    seed: int,
    chunk: int = 250,
) -> Array:
    """Unweighted mean of guided paths, accumulated in chunks.

    Paths that come back non-finite are dropped (with a log note) rather than
    poisoning the average.
    """
    model = scenario.model
    seeds = path_seeds(seed, scenario.n_is_paths)
    total = np.zeros((scenario.grid.n_steps + 1, model.dim_x))
    kept = 0
    dropped = 0
    for start in range(0, scenario.n_is_paths, chunk):
        block = seeds[start : start + chunk]
        increments = np.stack(
            [draw_noise(scenario.grid, model.dim_w, int(s)).increments for s in block]
        )
        values, log_psi, log_term = _simulate_guided_batch(model, guide, sol, increments)
        ok = np.isfinite(log_psi) & np.isfinite(log_term)
        if not ok.all():
            dropped += int((~ok).sum())
        if ok.any():
            total += values[ok].sum(axis=0)
            kept += int(ok.sum())
    if kept == 0:
        raise PipelineError("stage 'compare': every guided path diverged")
    if dropped:
        logger.warning("guided mean: dropped %d non-finite paths of %d", dropped, kept + dropped)
    return total / kept


def _stage_simulate(scenario: Scenario, workdir: FilePath) -> None:
    model = scenario.model
    grid = scenario.grid
    x_seed, beta_seed, zeta_seed = (
        int(s) for s in np.random.SeedSequence(scenario.seeds["sim"]).generate_state(3)
    )
    w = draw_noise(grid, model.dim_w, x_seed)
    x = simulate_forward(model, grid, w)
    beta = draw_noise(grid, model.dim_y, beta_seed)
    obs = simulate_observation(
        model, x, beta, zeta_seed=zeta_seed if model.terminal_obs is not None else None
    )
    artifacts.write_wide_csv(workdir / "x.csv", grid.times, x.values, value_prefix="x")
    artifacts.write_wide_csv(workdir / "y.csv", grid.times, obs.y_path.values, value_prefix="y")
    if obs.zeta is not None:
        artifacts.write_vector_csv(workdir / "zeta.csv", obs.zeta)


def _stage_backward(scenario: Scenario, workdir: FilePath) -> None:
    obs = _load_observation(scenario, workdir, "backward")
    sol = solve_backward(scenario.guide, scenario.model, obs, scenario.grid)
    artifacts.save_filter_csv(workdir / "filter.csv", sol)
    (workdir / "filter_meta.json").write_text(
        json.dumps({"guide": "scenario", "scenario": scenario.name}, indent=2) + "\n"
    )


def _stage_smooth(scenario: Scenario, workdir: FilePath) -> None:
    _require("smooth", workdir, "filter.csv")
    obs = _load_observation(scenario, workdir, "smooth")
    sol = artifacts.load_filter_csv(workdir / "filter.csv", obs)
    cfg = replace(scenario.pcn, seed=scenario.seeds["mcmc"])
    summary, diag = run_chain(scenario.model, scenario.guide, sol, cfg)
    t = scenario.grid.times
    artifacts.write_wide_csv(workdir / "mean.csv", t, summary.mean_path.values, value_prefix="x")
    artifacts.write_wide_csv(workdir / "var.csv", t, summary.var_path.values, value_prefix="x")
    artifacts.write_table_csv(
        workdir / "trace.csv",
        ["iter", "log_weight", "accepted"],
        [np.arange(1, cfg.n_iters + 1), diag["log_weights"], diag["accepted"]],
    )
    artifacts.write_meta(
        workdir / "meta.json",
        acceptance_rate=summary.acceptance_rate,
        ess_proxy=summary.ess_proxy,
        nonfinite_proposals=diag["nonfinite_proposals"],
    )


def _stage_smooth_is(scenario: Scenario, workdir: FilePath) -> None:
    _require("smooth-is", workdir, "filter.csv")
    obs = _load_observation(scenario, workdir, "smooth-is")
    sol = artifacts.load_filter_csv(workdir / "filter.csv", obs)
    est = importance_estimate(
        scenario.model,
        scenario.guide,
        sol,
        lambda p: p.values,
        scenario.n_is_paths,
        scenario.seeds.get("is", 23),
    )
    artifacts.write_wide_csv(
        workdir / "estimate.csv", scenario.grid.times, est.value, value_prefix="x"
    )
    (workdir / "ess.txt").write_text(artifacts.FLOAT_FMT % est.ess + "\n")


def _stage_fit(scenario: Scenario, workdir: FilePath) -> None:
    if scenario.fit is None:
        raise PipelineError("stage 'fit': scenario has no fit settings")
    obs = _load_observation(scenario, workdir, "fit")
    d = scenario.model.dim_x
    adam = AdamState.fresh(3 * d - 1, eta=scenario.fit.eta)
    params, loss = fit_guide(
        scenario.model,
        obs,
        scenario.grid,
        GuideParams.zeros(d),
        adam,
        n_iters=scenario.fit.n_iters,
        batch=scenario.fit.batch,
        seed=scenario.seeds.get("fit", 17),
    )
    B_star, m_star = params.matrices()
    artifacts.write_vector_csv(workdir / "theta.csv", params.theta)
    artifacts.write_table_csv(
        workdir / "loss.csv",
        ["iter", "neg_reward"],
        [np.arange(1, loss.size + 1), loss],
    )
    artifacts.write_matrix_csv(workdir / "B_star.csv", B_star)
    artifacts.write_vector_csv(workdir / "m_star.csv", m_star)


def _stage_compare(scenario: Scenario, workdir: FilePath) -> None:
    _require("compare", workdir, "mean.csv", "theta.csv")
    obs = _load_observation(scenario, workdir, "compare")
    _, mu_star = artifacts.read_wide_csv(workdir / "mean.csv")
    params = GuideParams(theta=artifacts.read_vector_csv(workdir / "theta.csv"))
    fitted_guide = guide_from_params(params, scenario.model)
    is_seed = scenario.seeds.get("is", 23)

    sol_adhoc = solve_backward(scenario.guide, scenario.model, obs, scenario.grid)
    mu_adhoc = _guided_mean(scenario, scenario.guide, sol_adhoc, is_seed)
    sol_fit = solve_backward(fitted_guide, scenario.model, obs, scenario.grid)
    mu_fitted = _guided_mean(scenario, fitted_guide, sol_fit, is_seed)

    t = scenario.grid.times
    err_adhoc = np.abs(mu_star - mu_adhoc)
    err_fitted = np.abs(mu_star - mu_fitted)
    artifacts.write_wide_csv(workdir / "mu_adhoc.csv", t, mu_adhoc, value_prefix="x")
    artifacts.write_wide_csv(workdir / "mu_fitted.csv", t, mu_fitted, value_prefix="x")
    artifacts.write_wide_csv(workdir / "err_adhoc.csv", t, err_adhoc, value_prefix="x")
    artifacts.write_wide_csv(workdir / "err_fitted.csv", t, err_fitted, value_prefix="x")
    norms = {
        "adhoc": float(np.trapezoid(np.linalg.norm(mu_star - mu_adhoc, axis=1), t)),
        "fitted": float(np.trapezoid(np.linalg.norm(mu_star - mu_fitted, axis=1), t)),
    }
    (workdir / "compare_norms.json").write_text(json.dumps(norms, indent=2, sort_keys=True) + "\n")


_STAGE_RUNNERS = {
    "simulate": _stage_simulate,
    "backward": _stage_backward,
    "smooth": _stage_smooth,
    "smooth-is": _stage_smooth_is,
    "fit": _stage_fit,
    "compare": _stage_compare,
}


def run_pipeline(
    scenario: Scenario,
    stages,
    workdir: Union[str, FilePath, None] = None,
) -> FilePath:
    """Run the requested stages in canonical order and return the artifact dir.

    Stages read only files produced by earlier stages, so subsets can be run
    across separate invocations against the same working directory.
    """
    requested = set(stages)
    unknown = requested - set(STAGE_ORDER)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}; valid: {list(STAGE_ORDER)}")
    if workdir is None:
        workdir = FilePath("artifacts") / scenario.name
    workdir = FilePath(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    artifacts.write_meta(
        workdir / "meta.json",
        scenario=scenario.name,
        d=scenario.model.dim_x,
        T=scenario.grid.T,
        steps=scenario.grid.n_steps,
        seeds={k: int(v) for k, v in scenario.seeds.items()},
        rho=scenario.pcn.rho,
    )
    for stage in STAGE_ORDER:
        if stage not in requested:
            continue
        logger.info("running stage %s in %s", stage, workdir)
        _STAGE_RUNNERS[stage](scenario, workdir)
    return workdir
