"""End-to-end sanity run on the affine test model.

On a linear model with a matched guide the machinery is exact: every guided
path carries total log weight 0, the pCN chain accepts every proposal, and
both the chain mean and the importance estimate must agree with the
closed-form Kalman/RTS smoother.  This script runs that whole circuit once
and prints the measured discrepancies, which is the quickest way to confirm
an install is healthy.

Usage:
    python3 scripts/linear_check.py [--steps 1000] [--n-paths 2000] [--seed 101]
"""

import argparse
import time

import numpy as np

from sdesmooth import (
    PcnConfig,
    TimeGrid,
    build_guide,
    build_model,
    draw_noise,
    importance_estimate,
    kalman_rts_oracle,
    path_seeds,
    run_chain,
    simulate_forward,
    simulate_guided,
    simulate_observation,
    solve_backward,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000, help="Euler steps on [0, T]")
    ap.add_argument("--n-paths", type=int, default=2000, help="importance sample size")
    ap.add_argument("--n-iters", type=int, default=2000, help="pCN iterations")
    ap.add_argument("--seed", type=int, default=101, help="master seed")
    args = ap.parse_args()

    model = build_model("linear", 2)
    guide = build_guide("linear", 2)
    grid = TimeGrid(1.0, args.steps)

    x_seed, beta_seed, zeta_seed, w_seed = np.random.SeedSequence(args.seed).generate_state(4)
    x = simulate_forward(model, grid, draw_noise(grid, model.dim_x, int(x_seed)))
    obs = simulate_observation(model, x, draw_noise(grid, model.dim_y, int(beta_seed)), int(zeta_seed))

    t0 = time.perf_counter()
    sol = solve_backward(guide, model, obs, grid)
    print(f"backward filter: {args.steps} steps in {time.perf_counter() - t0:.3f} s")

    weights = []
    for seed in path_seeds(int(w_seed), 50):
        path = simulate_guided(model, guide, sol, draw_noise(grid, model.dim_x, int(seed)))
        weights.append(path.total_log_weight)
    print(f"guided draws:    max |total_log_weight| = {np.abs(weights).max():.3e} over 50 paths")

    cfg = PcnConfig(rho=0.2, n_iters=args.n_iters, burn_in=args.n_iters // 5, seed=args.seed + 1)
    t0 = time.perf_counter()
    summary, _ = run_chain(model, guide, sol, cfg)
    print(
        f"pCN chain:       acceptance {summary.acceptance_rate:.4f}, "
        f"{cfg.n_iters} iterations in {time.perf_counter() - t0:.2f} s"
    )

    t0 = time.perf_counter()
    est = importance_estimate(model, guide, sol, lambda p: p.values, args.n_paths, args.seed + 2)
    print(
        f"importance:      ess {est.ess:.1f} / {args.n_paths} paths "
        f"in {time.perf_counter() - t0:.2f} s"
    )

    oracle = kalman_rts_oracle(model, obs)
    err_mcmc = np.abs(summary.mean_path.values - oracle.smoothed_mean.values).max()
    err_is = np.abs(est.value - oracle.smoothed_mean.values).max()
    print(f"vs Kalman/RTS:   chain mean max error {err_mcmc:.4f}, importance {err_is:.4f}")


if __name__ == "__main__":
    main()
