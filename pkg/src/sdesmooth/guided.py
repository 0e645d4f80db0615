"""Guided-process simulation and its change-of-measure weight.

The guided process follows the model drift plus a steering term pulled from the
backward filter solution,

    dX = [b(t, X) + a(t, X) P_t^{-1} (nu_t - X)] dt + sigma(t, X) dW,

and the density of the smoothing law with respect to the guided law factors
into a running integral of the local rate psi plus one terminal correction.
Both pieces are returned separately on :class:`WeightedPath`; consumers only
ever need their sum up to an additive constant, which is how the flat terminal
condition (no terminal reading) stays usable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backward_filter import (
    LOG_2PI,
    BackwardFilterSolution,
    LinearGuide,
    control,
    eval_log_vtilde,
)
from .sde import Array, ModelSpec, NoiseDraw, Path

__all__ = [
    "GuidedSimulationError",
    "WeightedPath",
    "psi",
    "simulate_guided",
    "lemma_tildev_residual",
]


class GuidedSimulationError(RuntimeError):
    """Raised when a guided path or its weight becomes non-finite."""


@dataclass(frozen=True, eq=False)
class WeightedPath:
    """A guided trajectory together with its log change-of-measure weight.

    The weight splits into the time integral of the local rate psi and a
    terminal correction; ``total_log_weight`` is their sum and is the only
    quantity MCMC and importance sampling consume.
    """

    x_path: Path
    log_psi_integral: float
    log_terminal_correction: float

    @property
    def total_log_weight(self) -> float:
        return self.log_psi_integral + self.log_terminal_correction


def psi(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    k: int,
    x: Array,
) -> float:
    """Local weight rate at node k and state x.

    With rho = P_k^{-1}(nu_k - x), a = sigma sigma'(t_k, x) and atilde the
    guide diffusion:

        psi = (b - btilde)' rho - 1/2 Tr((a - atilde) P_k^{-1})
              + 1/2 rho' (a - atilde) rho.
    """
    x = np.asarray(x, dtype=float)
    t_k = sol.grid.times[k]
    rho = sol.P_inv[k] @ (sol.nu[k] - x)
    b = np.asarray(model.drift(t_k, x), dtype=float)
    bdiff = b - guide.drift(t_k, x)
    value = bdiff @ rho
    sig = np.asarray(model.dispersion(t_k, x), dtype=float)
    adiff = sig @ sig.T - guide.diffusion(t_k)
    if np.any(adiff != 0.0):
        value += -0.5 * np.vdot(adiff, sol.P_inv[k]) + 0.5 * (rho @ adiff @ rho)
    return float(value)


def _terminal_log_weight(model: ModelSpec, sol: BackwardFilterSolution, x_end: Array) -> float:
    """log N(zeta; B x_T, Sigma) - log vtilde(T, x_T), or just the second term.

    The backward terminal condition pins P_T = Sigma_zeta, so the terminal
    density reuses the solution's cached factorization of P_T; with B_zeta = I
    the two terms then cancel exactly instead of to round-off.
    """
    n = sol.grid.n_steps
    log_vt = eval_log_vtilde(sol, n, x_end)
    if model.terminal_obs is None:
        return -log_vt
    r = model.terminal_obs.B @ x_end - sol.zeta
    quad = r @ sol.P_inv[n] @ r
    log_pdf = -0.5 * (sol.dim * LOG_2PI + sol.log_det_P[n] + quad)
    return float(log_pdf - log_vt)


def simulate_guided(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    w: NoiseDraw,
) -> WeightedPath:
    """Run the guided Euler scheme driven by one noise draw.

    X_0 = x0 and

        X_{k+1} = X_k + [b(t_k, X_k) + sigma u](t_k, X_k) h + sigma(t_k, X_k) dW_k,

    with u the steering control.  The psi integral uses the left-point rule on
    the same nodes.  Deterministic in (model, guide, sol, w).

    Raises
    ------
    GuidedSimulationError
        If the state or the weight turns non-finite; the message names the
        first offending step.
    """
    grid = sol.grid
    if w.grid != grid:
        raise ValueError("noise draw lives on a different grid than the filter solution")
    if w.dim != model.dim_w:
        raise ValueError(f"noise dimension {w.dim} != model dim_w {model.dim_w}")
    if sol.dim != model.dim_x:
        raise ValueError(f"filter solution dimension {sol.dim} != model dim_x {model.dim_x}")

    n = grid.n_steps
    h = grid.h
    t = grid.times
    nu = sol.nu
    Pinv = sol.P_inv
    dW = w.increments
    d = model.dim_x

    x = np.empty((n + 1, d))
    x[0] = model.x0
    psis = np.empty(n)

    sig_c = model.dispersion_constant
    fast = (
        sig_c is not None
        and guide.B.is_constant
        and guide.m.is_constant
        and guide.sigma.is_constant
    )
    with np.errstate(over="ignore", invalid="ignore"):
        if fast:
            Bg_T = guide.B.constant.T
            mg = guide.m.constant
            a_c = sig_c @ sig_c.T
            adiff = a_c - guide.diffusion(0.0)
            adiff_zero = not np.any(adiff != 0.0)
            drift = model.drift
            for k in range(n):
                xk = x[k]
                b = np.asarray(drift(t[k], xk), dtype=float)
                rho = Pinv[k] @ (nu[k] - xk)
                val = (b - (xk @ Bg_T + mg)) @ rho
                if not adiff_zero:
                    val += -0.5 * np.vdot(adiff, Pinv[k]) + 0.5 * (rho @ adiff @ rho)
                psis[k] = val
                x[k + 1] = xk + (b + a_c @ rho) * h + sig_c @ dW[k]
        else:
            for k in range(n):
                xk = x[k]
                b = np.asarray(model.drift(t[k], xk), dtype=float)
                sig = np.asarray(model.dispersion(t[k], xk), dtype=float)
                rho = Pinv[k] @ (nu[k] - xk)
                psis[k] = psi(model, guide, sol, k, xk)
                x[k + 1] = xk + (b + sig @ (sig.T @ rho)) * h + sig @ dW[k]

    state_ok = np.isfinite(x).all(axis=1)
    psi_ok = np.isfinite(psis)
    if not (state_ok.all() and psi_ok.all()):
        bad_state = np.flatnonzero(~state_ok)
        bad_psi = np.flatnonzero(~psi_ok)
        k_bad = n + 1
        if bad_state.size:
            k_bad = min(k_bad, int(bad_state[0]) - 1)
        if bad_psi.size:
            k_bad = min(k_bad, int(bad_psi[0]))
        raise GuidedSimulationError(
            f"non-finite state or weight at step {k_bad} (t={t[max(k_bad, 0)]:.6g})"
        )

    log_psi_integral = math.fsum(psis) * h
    log_terminal = _terminal_log_weight(model, sol, x[n])
    if not (math.isfinite(log_psi_integral) and math.isfinite(log_terminal)):
        raise GuidedSimulationError(f"non-finite weight at the terminal node (t={t[n]:.6g})")
    return WeightedPath(
        x_path=Path(grid=grid, values=x),
        log_psi_integral=log_psi_integral,
        log_terminal_correction=log_terminal,
    )


def _drift_broadcasts(model: ModelSpec) -> bool:
    """True if model.drift maps a (N, d) batch to (N, d) row-wise."""
    x0 = model.x0
    probe = np.stack([x0, x0 + 0.1])
    try:
        out = np.asarray(model.drift(0.0, probe), dtype=float)
    except Exception:
        return False
    if out.shape != probe.shape:
        return False
    rows = np.stack([
        np.asarray(model.drift(0.0, probe[0]), dtype=float),
        np.asarray(model.drift(0.0, probe[1]), dtype=float),
    ])
    return bool(np.allclose(out, rows, rtol=1e-12, atol=1e-12))


def _simulate_guided_batch(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    increments: Array,
) -> tuple[Array, Array, Array]:
    """Simulate many guided paths from an (N, n_steps, dim_w) increment block.

    Returns (values, log_psi_integral, log_terminal_correction) with shapes
    (N, n+1, d), (N,), (N,).  Vectorizes over paths when the dispersion and the
    guide are constant and the drift broadcasts over a leading batch axis;
    otherwise falls back to per-path simulation.  Paths whose state or weight
    turns non-finite come back as nan rows rather than raising, so one bad
    path cannot abort a Monte Carlo run.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[1:] != (sol.grid.n_steps, model.dim_w):
        raise ValueError(
            f"increment block must have shape (N, {sol.grid.n_steps}, {model.dim_w}),"
            f" got {increments.shape}"
        )
    n_paths = increments.shape[0]
    grid = sol.grid
    n = grid.n_steps
    h = grid.h
    t = grid.times
    d = model.dim_x

    sig_c = model.dispersion_constant
    fast = (
        sig_c is not None
        and guide.B.is_constant
        and guide.m.is_constant
        and guide.sigma.is_constant
        and _drift_broadcasts(model)
    )
    if not fast:
        values = np.full((n_paths, n + 1, d), np.nan)
        log_psi = np.full(n_paths, np.nan)
        log_term = np.full(n_paths, np.nan)
        for i in range(n_paths):
            try:
                wp = simulate_guided(model, guide, sol, NoiseDraw(grid=grid, increments=increments[i]))
            except GuidedSimulationError:
                continue
            values[i] = wp.x_path.values
            log_psi[i] = wp.log_psi_integral
            log_term[i] = wp.log_terminal_correction
        return values, log_psi, log_term

    nu = sol.nu
    Pinv = sol.P_inv
    Bg_T = guide.B.constant.T
    mg = guide.m.constant
    a_c = sig_c @ sig_c.T
    adiff = a_c - guide.diffusion(0.0)
    adiff_zero = not np.any(adiff != 0.0)
    if not adiff_zero:
        half_tr = 0.5 * np.einsum("kij,ij->k", Pinv, adiff)

    values = np.empty((n_paths, n + 1, d))
    values[:, 0] = model.x0
    psi_acc = np.zeros(n_paths)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            xk = values[:, k]
            b = np.asarray(model.drift(t[k], xk), dtype=float)
            rho = (nu[k] - xk) @ Pinv[k]
            val = np.einsum("nd,nd->n", b - (xk @ Bg_T + mg), rho)
            if not adiff_zero:
                val += -half_tr[k] + 0.5 * np.einsum("nd,nd->n", rho @ adiff, rho)
            psi_acc += val
            values[:, k + 1] = xk + (b + rho @ a_c) * h + increments[:, k] @ sig_c.T
        log_psi = psi_acc * h

        x_end = values[:, n]
        r = x_end - nu[n]
        quad = np.einsum("nd,nd->n", r @ Pinv[n], r)
        log_vt = sol.logC[n] - 0.5 * (d * LOG_2PI + sol.log_det_P[n] + quad)
        if model.terminal_obs is None:
            log_term = -log_vt
        else:
            r1 = x_end @ model.terminal_obs.B.T - sol.zeta
            quad1 = np.einsum("nd,nd->n", r1 @ Pinv[n], r1)
            log_pdf = -0.5 * (d * LOG_2PI + sol.log_det_P[n] + quad1)
            log_term = log_pdf - log_vt

    ok = (
        np.isfinite(values).all(axis=(1, 2))
        & np.isfinite(log_psi)
        & np.isfinite(log_term)
    )
    if not ok.all():
        bad = ~ok
        values[bad] = np.nan
        log_psi[bad] = np.nan
        log_term[bad] = np.nan
    return values, log_psi, log_term


def lemma_tildev_residual(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    w: NoiseDraw,
) -> float:
    """Discretization defect of the pathwise identity for log vtilde.

    Along a guided path X driven by w, the exact dynamics give

        log vtilde(t, X_t) - log vtilde(0, x0)
            = int_0^t [ -(HX)' dY + 1/2 |HX|^2 ds + u' dW + 1/2 |u|^2 ds + psi ds ],

    with u the steering control.  This accumulates the right side with
    left-point sums on the grid and returns the maximum over nodes of the
    absolute gap to the left side.  The gap vanishes as h -> 0.
    """
    wp = simulate_guided(model, guide, sol, w)
    x = wp.x_path.values
    grid = sol.grid
    n = grid.n_steps
    h = grid.h
    t = grid.times
    dY = sol.y_increments
    dW = w.increments
    H_fn = model.obs_operator

    r = x - sol.nu
    quad = np.einsum("ki,kij,kj->k", r, sol.P_inv, r)
    log_vt = sol.logC - 0.5 * (sol.dim * LOG_2PI + sol.log_det_P + quad)
    target = log_vt - log_vt[0]

    residual = 0.0
    acc = 0.0
    for k in range(n):
        Hx = H_fn(t[k]) @ x[k]
        u = control(sol, model, k, x[k])
        acc += (
            -float(Hx @ dY[k])
            + 0.5 * float(Hx @ Hx) * h
            + float(u @ dW[k])
            + 0.5 * float(u @ u) * h
            + psi(model, guide, sol, k, x[k]) * h
        )
        gap = abs(acc - target[k + 1])
        if gap > residual:
            residual = gap
    return residual
