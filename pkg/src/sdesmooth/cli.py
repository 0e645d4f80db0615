"""Command line entry points.

Every command reads and writes plain files, so runs compose across processes:
``simulate`` produces an observation directory, ``backward`` turns it into a
filter table, and the samplers (``guided-sample``, ``smooth``, ``smooth-is``),
the ``oracle`` cross-check and the ``fit`` optimizer consume the two.
``reproduce-rd`` drives the full reaction-diffusion pipeline.

All CSV output uses 12-significant-digit formatting; re-running a command
with identical flags reproduces the files byte for byte (meta.json is the
exception: it records wall-clock timestamps).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path as FilePath

import numpy as np

from . import artifacts
from .backward_filter import DEFAULT_FLAT_KAPPA, solve_backward
from .experiments import STAGE_ORDER, build_reaction_diffusion, run_pipeline
from .guided import _simulate_guided_batch
from .mcmc import PcnConfig, run_chain
from .models import build_guide, build_model
from .montecarlo import importance_estimate, kalman_rts_oracle, path_seeds
from .sde import (
    ModelSpec,
    ObservationRecord,
    Path,
    TimeGrid,
    draw_noise,
    simulate_forward,
    simulate_observation,
)
from .variational import AdamState, GuideParams, fit_guide

AFFINE_MODELS = ("linear", "ou")


def _load_obs_dir(obs_dir: FilePath) -> tuple[ModelSpec, TimeGrid, ObservationRecord, dict]:
    meta = artifacts.read_meta(obs_dir / "meta.json")
    model = build_model(meta["model"], int(meta["d"]))
    grid = TimeGrid(T=float(meta["T"]), n_steps=int(meta["steps"]))
    _, y_values = artifacts.read_wide_csv(obs_dir / "y.csv")
    zeta = None
    if model.terminal_obs is not None:
        zeta = artifacts.read_vector_csv(obs_dir / "zeta.csv")
    obs = ObservationRecord(y_path=Path(grid=grid, values=y_values), zeta=zeta)
    return model, grid, obs, meta


def _load_filter(filter_path: FilePath, obs: ObservationRecord, d: int):
    sol = artifacts.load_filter_csv(filter_path, obs)
    if sol.dim != d:
        raise SystemExit(f"filter dimension {sol.dim} does not match the observation model ({d})")
    return sol


def _guide_for_filter(filter_path: FilePath, d: int):
    meta_path = filter_path.with_name(filter_path.stem + "_meta.json")
    if not meta_path.exists():
        raise SystemExit(f"missing {meta_path}; run the backward command first")
    meta = json.loads(meta_path.read_text())
    name = meta.get("guide")
    if name not in ("reaction_diffusion", "linear", "ou"):
        raise SystemExit(
            f"filter sidecar names guide {name!r}, which is not a registry guide;"
            " use reproduce-rd for scenario-driven runs"
        )
    return build_guide(name, d)


def cmd_simulate(args: argparse.Namespace) -> int:
    model = build_model(args.model, args.d)
    grid = TimeGrid(T=args.T, n_steps=args.steps)
    x_seed, beta_seed, zeta_seed = (
        int(s) for s in np.random.SeedSequence(args.seed).generate_state(3)
    )
    w = draw_noise(grid, model.dim_w, x_seed)
    x = simulate_forward(model, grid, w)
    beta = draw_noise(grid, model.dim_y, beta_seed)
    obs = simulate_observation(
        model, x, beta, zeta_seed=zeta_seed if model.terminal_obs is not None else None
    )
    out = FilePath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_wide_csv(out / "x.csv", grid.times, x.values, value_prefix="x")
    artifacts.write_wide_csv(out / "y.csv", grid.times, obs.y_path.values, value_prefix="y")
    if obs.zeta is not None:
        artifacts.write_vector_csv(out / "zeta.csv", obs.zeta)
    artifacts.write_meta(
        out / "meta.json",
        model=args.model,
        d=args.d,
        T=args.T,
        steps=args.steps,
        seeds={"master": args.seed, "x": x_seed, "beta": beta_seed, "zeta": zeta_seed},
    )
    print(f"wrote observation run to {out}")
    return 0


def cmd_backward(args: argparse.Namespace) -> int:
    obs_dir = FilePath(args.obs)
    model, grid, obs, meta = _load_obs_dir(obs_dir)
    guide = build_guide(args.guide, model.dim_x)
    sol = solve_backward(guide, model, obs, grid, kappa=args.kappa)
    out = FilePath(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    artifacts.save_filter_csv(out, sol)
    sidecar = out.with_name(out.stem + "_meta.json")
    sidecar.write_text(
        json.dumps(
            {
                "guide": args.guide,
                "model": meta["model"],
                "d": model.dim_x,
                "kappa": args.kappa,
                "obs": str(obs_dir),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    print(f"wrote filter table to {out}")
    return 0


def cmd_guided_sample(args: argparse.Namespace) -> int:
    model, grid, obs, _ = _load_obs_dir(FilePath(args.obs))
    filter_path = FilePath(args.filter)
    sol = _load_filter(filter_path, obs, model.dim_x)
    guide = _guide_for_filter(filter_path, model.dim_x)

    seeds = path_seeds(args.seed, args.n_paths)
    increments = np.stack(
        [draw_noise(grid, model.dim_w, int(s)).increments for s in seeds]
    )
    values, log_psi, log_term = _simulate_guided_batch(model, guide, sol, increments)
    endpoints = values[:, -1, :]
    header = (
        ["path", "log_psi_integral", "log_terminal_correction", "total_log_weight"]
        + [f"xT{j + 1}" for j in range(model.dim_x)]
    )
    columns = [
        np.arange(args.n_paths),
        log_psi,
        log_term,
        log_psi + log_term,
    ] + [endpoints[:, j] for j in range(model.dim_x)]
    out = FilePath(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    artifacts.write_table_csv(out, header, columns)
    print(f"wrote {args.n_paths} guided draws to {out}")
    return 0


def cmd_smooth(args: argparse.Namespace) -> int:
    model, grid, obs, _ = _load_obs_dir(FilePath(args.obs))
    filter_path = FilePath(args.filter)
    sol = _load_filter(filter_path, obs, model.dim_x)
    guide = _guide_for_filter(filter_path, model.dim_x)
    cfg = PcnConfig(
        rho=args.rho, n_iters=args.iters, burn_in=args.burn_in, seed=args.seed, thin=args.thin
    )
    summary, diag = run_chain(model, guide, sol, cfg, keep_samples=args.keep_samples)
    out = FilePath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_wide_csv(out / "mean.csv", grid.times, summary.mean_path.values, value_prefix="x")
    artifacts.write_wide_csv(out / "var.csv", grid.times, summary.var_path.values, value_prefix="x")
    artifacts.write_table_csv(
        out / "trace.csv",
        ["iter", "log_weight", "accepted"],
        [np.arange(1, cfg.n_iters + 1), diag["log_weights"], diag["accepted"]],
    )
    for j, (it, sample) in enumerate(diag["samples"]):
        artifacts.write_wide_csv(out / f"sample_{j}.csv", grid.times, sample.values, value_prefix="x")
    print(
        f"chain of {cfg.n_iters} iterations: acceptance {summary.acceptance_rate:.3f},"
        f" ess proxy {summary.ess_proxy:.1f}, {diag['nonfinite_proposals']} non-finite proposals"
    )
    print(f"wrote posterior summary to {out}")
    return 0


def cmd_smooth_is(args: argparse.Namespace) -> int:
    model, grid, obs, _ = _load_obs_dir(FilePath(args.obs))
    filter_path = FilePath(args.filter)
    sol = _load_filter(filter_path, obs, model.dim_x)
    guide = _guide_for_filter(filter_path, model.dim_x)
    est = importance_estimate(model, guide, sol, lambda p: p.values, args.n_paths, args.seed)
    out = FilePath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_wide_csv(out / "estimate.csv", grid.times, est.value, value_prefix="x")
    (out / "ess.txt").write_text(artifacts.FLOAT_FMT % est.ess + "\n")
    print(f"importance estimate over {args.n_paths} paths (ess {est.ess:.1f}) written to {out}")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    model, grid, obs, meta = _load_obs_dir(FilePath(args.obs))
    if meta["model"] not in AFFINE_MODELS:
        raise SystemExit(
            f"oracle requires an affine model ({', '.join(AFFINE_MODELS)}), got {meta['model']!r}"
        )
    sol = kalman_rts_oracle(model, obs)
    out = FilePath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_wide_csv(
        out / "kalman_mean.csv", grid.times, sol.smoothed_mean.values, value_prefix="x"
    )
    print(f"wrote smoother oracle mean to {out}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    model, grid, obs, meta = _load_obs_dir(FilePath(args.obs))
    if args.d != model.dim_x:
        raise SystemExit(f"--d {args.d} does not match the observation model (d={model.dim_x})")
    adam = AdamState.fresh(3 * args.d - 1, eta=args.eta)
    params, loss = fit_guide(
        model,
        obs,
        grid,
        GuideParams.zeros(args.d),
        adam,
        n_iters=args.iters,
        batch=args.batch,
        seed=args.seed,
    )
    B_star, m_star = params.matrices()
    out = FilePath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_vector_csv(out / "theta.csv", params.theta)
    artifacts.write_table_csv(
        out / "loss.csv", ["iter", "neg_reward"], [np.arange(1, loss.size + 1), loss]
    )
    artifacts.write_matrix_csv(out / "B_star.csv", B_star)
    artifacts.write_vector_csv(out / "m_star.csv", m_star)
    print(f"fitted guide written to {out} (final loss {loss[-1]:.4f})")
    return 0


def cmd_reproduce_rd(args: argparse.Namespace) -> int:
    scenario = build_reaction_diffusion(args.d).with_seeds(
        sim=args.seed_sim, mcmc=args.seed_mcmc, fit=args.seed_fit
    )
    if args.stages == "all":
        stages = list(STAGE_ORDER)
    else:
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    workdir = run_pipeline(scenario, stages, workdir=args.workdir)
    print(f"pipeline stages {stages} finished in {workdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdesmooth",
        description="Guided-process smoothing for continuously observed diffusions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a latent path and its observation record")
    p.add_argument("--model", required=True, help="registry model name")
    p.add_argument("--d", type=int, required=True, help="state dimension")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("backward", help="solve the backward information filter")
    p.add_argument("--guide", required=True, help="registry guide name")
    p.add_argument("--obs", required=True, help="observation directory from simulate")
    p.add_argument("--kappa", type=float, default=DEFAULT_FLAT_KAPPA)
    p.add_argument("--out", required=True, help="output filter.csv path")
    p.set_defaults(func=cmd_backward)

    p = sub.add_parser("guided-sample", help="draw independent guided paths and weights")
    p.add_argument("--obs", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--n-paths", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_guided_sample)

    p = sub.add_parser("smooth", help="pCN MCMC posterior summary")
    p.add_argument("--obs", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=13)
    p.add_argument("--keep-samples", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("smooth-is", help="self-normalized importance estimate of the mean path")
    p.add_argument("--obs", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--n-paths", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_smooth_is)

    p = sub.add_parser("oracle", help="discrete Kalman-RTS smoother (affine models only)")
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit", help="variational guide fitting with Adam")
    p.add_argument("--obs", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reproduce-rd", help="run the reaction-diffusion reproduction pipeline")
    p.add_argument("--d", type=int, required=True, choices=[20, 100])
    p.add_argument("--stages", default="all", help="comma-separated subset of: " + ",".join(STAGE_ORDER))
    p.add_argument("--workdir", default=None)
    p.add_argument("--seed-sim", type=int, default=None)
    p.add_argument("--seed-mcmc", type=int, default=None)
    p.add_argument("--seed-fit", type=int, default=None)
    p.set_defaults(func=cmd_reproduce_rd)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
