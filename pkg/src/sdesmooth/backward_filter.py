"""Backward information filter for a linear-Gaussian auxiliary model.

Given observed increments of ``dY = H_t X_t dt + d(beta)`` and an auxiliary
linear model ``dX = (B_t X + m_t) dt + sigma_t dW``, the conditional likelihood
of the future data under the auxiliary model is an unnormalized Gaussian in x,

    vtilde(t, x) = C_t / sqrt((2 pi)^d |P_t|) * exp(-1/2 (x - nu_t)' P_t^{-1} (x - nu_t)),

whose parameters (nu, P, log C) solve a backward system driven by Y:

    d nu   = (B nu + m) dt - P H' (dY - H nu dt)
    d P    = (B P + P B' - a + P H' H P) dt,      a = sigma sigma'
    d logC = Tr(B) dt - (H nu)' *dY* + 1/2 |H nu|^2 dt,

where the dY integral in logC is a backward (right-endpoint) Ito integral.
This module integrates the system from the terminal condition at T down to 0
on the simulation grid, and evaluates log vtilde and the steering control
``sigma' P^{-1} (nu - x)`` that downstream guided simulation uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import spd_inverse_and_logdet
from .sde import Array, ModelSpec, ObservationRecord, TimeFunction, TimeGrid, as_time_function

LOG_2PI = float(np.log(2.0 * np.pi))

#: Default pseudo-variance for the flat terminal condition used when the model
#: has no terminal observation (P_T = kappa * I approximates v(T, .) = 1).
DEFAULT_FLAT_KAPPA = 1e6


class FilterError(RuntimeError):
    """Raised when the backward solve leaves the symmetric-PD cone."""


@dataclass(frozen=True, eq=False)
class LinearGuide:
    """Auxiliary linear model: drift B_t x + m_t, dispersion sigma_t.

    Each coefficient may be a constant array or a callable of time.
    """

    B: TimeFunction
    m: TimeFunction
    sigma: TimeFunction

    def __post_init__(self) -> None:
        object.__setattr__(self, "B", as_time_function(self.B))
        object.__setattr__(self, "m", as_time_function(self.m))
        object.__setattr__(self, "sigma", as_time_function(self.sigma))

    def diffusion(self, t: float) -> Array:
        """a_t = sigma_t sigma_t'."""
        sig = self.sigma(t)
        return sig @ sig.T

    def drift(self, t: float, x: Array) -> Array:
        return x @ self.B(t).T + self.m(t)


@dataclass(frozen=True, eq=False)
class BackwardFilterSolution:
    """Grid-sampled (nu, P, log C) with cached inverses and log-determinants.

    The solution also carries the observation data it was solved against
    (increments of Y and the terminal reading), so that consumers needing the
    weight accumulation can work from the solution object alone.  All arrays
    are read-only.
    """

    grid: TimeGrid
    nu: Array
    P: Array
    logC: Array
    P_inv: Array
    log_det_P: Array
    y_increments: Array
    zeta: Optional[Array]

    def __post_init__(self) -> None:
        for name in ("nu", "P", "logC", "P_inv", "log_det_P", "y_increments"):
            arr = getattr(self, name)
            arr.flags.writeable = False
        if self.zeta is not None:
            self.zeta.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.nu.shape[1]


def solve_backward(
    guide: LinearGuide,
    model: ModelSpec,
    obs: ObservationRecord,
    grid: TimeGrid,
    kappa: float = DEFAULT_FLAT_KAPPA,
) -> BackwardFilterSolution:
    """Integrate the backward system from T down to 0.

    All integrands are evaluated at the right endpoint of each step (the
    backward-Ito convention), so with dY_k = Y_{k+1} - Y_k:

        P_k    = P_{k+1} - (B P + P B' - a + P H'H P)_{k+1} h
        nu_k   = nu_{k+1} - (B nu + m)_{k+1} h + P_{k+1} H'_{k+1} (dY_k - H_{k+1} nu_{k+1} h)
        logC_k = logC_{k+1} - Tr(B_{k+1}) h + (H nu)'_{k+1} dY_k - 1/2 |H nu|^2_{k+1} h

    Terminal condition: with a terminal observation, nu_T = B_zeta zeta,
    P_T = Sigma_zeta; without one, nu_T = 0 and P_T = kappa I (flat limit).
    logC_T = 0 in both cases.

    Parameters
    ----------
    kappa:
        Pseudo-variance of the flat terminal condition (no-terminal case only).

    Raises
    ------
    FilterError
        If any P_k leaves the symmetric positive-definite cone (smallest
        eigenvalue below 1e-12 times the largest) or logC becomes non-finite.
    """
    d = model.dim_x
    n = grid.n_steps
    h = grid.h
    t = grid.times
    dY = obs.increments()
    if dY.shape != (n, model.dim_y):
        raise ValueError(f"observation increments have shape {dY.shape}, expected {(n, model.dim_y)}")

    has_terminal = model.terminal_obs is not None
    if has_terminal != (obs.zeta is not None):
        raise FilterError("model terminal observation and observed zeta must be present together")

    nu = np.empty((n + 1, d))
    P = np.empty((n + 1, d, d))
    logC = np.empty(n + 1)
    if has_terminal:
        B_term = model.terminal_obs.B
        if B_term.shape != (d, d):
            raise FilterError(
                f"terminal observation operator must be square ({d}x{d}) for the backward solve"
            )
        nu[n] = B_term @ obs.zeta
        P[n] = model.terminal_obs.Sigma
    else:
        nu[n] = 0.0
        P[n] = kappa * np.eye(d)
    logC[n] = 0.0

    B_fn, m_fn, H_fn = guide.B, guide.m, model.obs_operator
    const_coeffs = B_fn.is_constant and m_fn.is_constant and H_fn.is_constant and guide.sigma.is_constant
    if const_coeffs:
        B = B_fn.constant
        m = m_fn.constant
        H = H_fn.constant
        a = guide.diffusion(0.0)
        HtH = H.T @ H
        trB = float(np.trace(B))

    # Divergence (e.g. a flat start outside the explicit scheme's stability
    # region) is detected after the loop, so intermediate overflow is expected
    # rather than worth warning about.
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n - 1, -1, -1):
            if not const_coeffs:
                tk1 = t[k + 1]
                B = B_fn(tk1)
                m = m_fn(tk1)
                H = H_fn(tk1)
                a = guide.diffusion(tk1)
                HtH = H.T @ H
                trB = float(np.trace(B))
            P1 = P[k + 1]
            nu1 = nu[k + 1]
            BP = B @ P1
            Pk = P1 - (BP + BP.T - a + P1 @ HtH @ P1) * h
            P[k] = 0.5 * (Pk + Pk.T)
            Hnu = H @ nu1
            nu[k] = nu1 - (B @ nu1 + m) * h + P1 @ (H.T @ (dY[k] - Hnu * h))
            logC[k] = logC[k + 1] - trB * h + Hnu @ dY[k] - 0.5 * (Hnu @ Hnu) * h

    if not np.all(np.isfinite(logC)):
        k_bad = int(np.flatnonzero(~np.isfinite(logC))[0])
        raise FilterError(f"log-normalization non-finite at node {k_bad} (t={t[k_bad]:.6g})")
    if not np.all(np.isfinite(P)):
        k_bad = int(np.flatnonzero(~np.isfinite(P).all(axis=(1, 2)))[0])
        raise FilterError(f"covariance non-finite at node {k_bad} (t={t[k_bad]:.6g})")
    eigs = np.linalg.eigvalsh(P)
    bad = eigs[:, 0] < 1e-12 * eigs[:, -1]
    if np.any(bad):
        k_bad = int(np.flatnonzero(bad)[0])
        raise FilterError(
            f"covariance not positive definite at node {k_bad} (t={t[k_bad]:.6g}); refine the grid"
        )

    P_inv, log_det_P = spd_inverse_and_logdet(P)
    return BackwardFilterSolution(
        grid=grid,
        nu=nu,
        P=P,
        logC=logC,
        P_inv=P_inv,
        log_det_P=log_det_P,
        y_increments=dY.copy(),
        zeta=None if obs.zeta is None else obs.zeta.copy(),
    )


def eval_log_vtilde(sol: BackwardFilterSolution, k: int, x: Array) -> float:
    """log vtilde(t_k, x) for the Gaussian ansatz parameterized by the solution."""
    r = np.asarray(x, dtype=float) - sol.nu[k]
    quad = r @ sol.P_inv[k] @ r
    return float(sol.logC[k] - 0.5 * (sol.dim * LOG_2PI + sol.log_det_P[k] + quad))


def control(sol: BackwardFilterSolution, model: ModelSpec, k: int, x: Array) -> Array:
    """Steering control u(t_k, x) = sigma(t_k, x)' P_k^{-1} (nu_k - x)."""
    x = np.asarray(x, dtype=float)
    sig = np.asarray(model.dispersion(sol.grid.times[k], x), dtype=float)
    return sig.T @ (sol.P_inv[k] @ (sol.nu[k] - x))
