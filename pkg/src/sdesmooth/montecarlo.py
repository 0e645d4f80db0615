"""Self-normalized importance sampling over guided paths, and a discrete
Kalman/Rauch-Tung-Striebel smoother used as an independent oracle on affine
models.

The importance estimator averages a path functional over independent guided
draws, weighting each draw by its exponentiated log weight after subtracting
the maximum (log-sum-exp normalization); on nonlinear models the raw weights
span hundreds of log units.

The oracle works on the Euler-discretized state space model on purpose: the
samplers target the same grid approximation, so comparing against the exactly
discretized smoother would mix grid bias into sampler validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward_filter import BackwardFilterSolution, LinearGuide
from .guided import _simulate_guided_batch
from .sde import Array, ModelSpec, ObservationRecord, Path, TimeGrid, draw_noise

__all__ = [
    "EstimationError",
    "ImportanceEstimate",
    "KalmanSmootherSolution",
    "effective_sample_size",
    "importance_estimate",
    "kalman_rts_oracle",
]


class EstimationError(RuntimeError):
    """Raised when an estimator cannot produce a finite answer."""


@dataclass(frozen=True, eq=False)
class ImportanceEstimate:
    """Self-normalized estimate of a smoothed path functional.

    ``ess = (sum w)^2 / sum w^2`` measures how many effective draws the
    normalized weights amount to; it always lies in [1, n_paths].
    """

    value: Array
    ess: float
    n_paths: int


@dataclass(frozen=True, eq=False)
class KalmanSmootherSolution:
    """Smoothed means and covariances of the discretized affine model."""

    grid: TimeGrid
    smoothed_mean: Path
    smoothed_cov: Array


def path_seeds(seed: int, n_paths: int) -> np.ndarray:
    """Independent per-path seeds derived from one master seed."""
    return np.random.SeedSequence(seed).generate_state(n_paths, dtype=np.uint64)


def effective_sample_size(log_weights: Array) -> float:
    """Effective draw count (sum w)^2 / sum w^2 of self-normalized weights.

    Weights are w = exp(log_weights - max over finite entries); non-finite
    entries count as zero weight.  The value lies in [1, #finite] and is
    invariant under adding a constant to every log weight.

    Raises
    ------
    EstimationError
        If no entry is finite.
    """
    log_w = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(log_w)
    if not finite.any():
        raise EstimationError("all importance weights are non-finite")
    w = np.exp(log_w[finite] - log_w[finite].max())
    s = w.sum()
    return float(s * s / (w @ w))


def importance_estimate(
    model: ModelSpec,
    guide: LinearGuide,
    sol: BackwardFilterSolution,
    f,
    n_paths: int,
    seed: int,
) -> ImportanceEstimate:
    """Estimate the smoothed expectation of ``f`` from independent guided paths.

    ``f`` maps a :class:`Path` to a scalar or array; the estimate is
    sum_i w_i f(X_i) / sum_i w_i with w_i = exp(log weight_i - max log weight).
    Paths with non-finite weight get weight zero (they still count toward
    n_paths but not toward the ess).

    Raises
    ------
    EstimationError
        If every path weight is non-finite.
    """
    if n_paths < 1:
        raise ValueError(f"need at least one path, got n_paths={n_paths}")
    grid = sol.grid
    seeds = path_seeds(seed, n_paths)
    increments = np.stack(
        [draw_noise(grid, model.dim_w, int(s)).increments for s in seeds]
    )
    values, log_psi, log_term = _simulate_guided_batch(model, guide, sol, increments)
    log_w = log_psi + log_term
    finite = np.isfinite(log_w)
    if not finite.any():
        raise EstimationError("all importance weights are non-finite")

    w = np.zeros(n_paths)
    w[finite] = np.exp(log_w[finite] - log_w[finite].max())
    sum_w = w.sum()
    ess = effective_sample_size(log_w)

    idx = np.flatnonzero(finite)
    f_vals = np.stack(
        [np.asarray(f(Path(grid=grid, values=values[i])), dtype=float) for i in idx]
    )
    value = np.tensordot(w[idx], f_vals, axes=(0, 0)) / sum_w
    return ImportanceEstimate(value=np.asarray(value), ess=ess, n_paths=n_paths)


def _probe_affine(model: ModelSpec, t: float, basis: Array) -> tuple[Array, Array]:
    """Recover (B_t, m_t) of an affine drift by evaluating it at 0 and e_j."""
    zero = np.zeros(model.dim_x)
    m = np.asarray(model.drift(t, zero), dtype=float)
    cols = [np.asarray(model.drift(t, basis[j]), dtype=float) - m for j in range(model.dim_x)]
    return np.stack(cols, axis=1), m


def kalman_rts_oracle(model: ModelSpec, obs: ObservationRecord) -> KalmanSmootherSolution:
    """Exact smoother for the Euler discretization of an affine model.

    State space form, with A_k = I + B(t_k) h, c_k = m(t_k) h, Q = sigma sigma' h:

        X_{k+1} = A_k X_k + c_k + N(0, Q),
        dY_k    = (h H_k) X_k + N(0, h I),
        zeta    = B_z X_n + N(0, Sigma_z)   (when the model has a terminal reading),

    starting from the point mass at x0.  A forward Kalman filter is followed by
    the Rauch-Tung-Striebel backward pass.  The drift coefficients are recovered
    by probing the drift callable at 0 and at basis vectors, so this shares no
    code with the backward information filter.

    Raises
    ------
    EstimationError
        If an innovation covariance is singular.
    """
    grid = obs.y_path.grid
    n = grid.n_steps
    h = grid.h
    t = grid.times
    d = model.dim_x
    dY = obs.increments()
    H_fn = model.obs_operator
    basis = np.eye(d)

    sig = np.asarray(model.dispersion(t[0], model.x0), dtype=float)
    Q = (sig @ sig.T) * h
    R = h * np.eye(model.dim_y)

    mean_pred = np.empty((n + 1, d))
    cov_pred = np.empty((n + 1, d, d))
    mean_filt = np.empty((n + 1, d))
    cov_filt = np.empty((n + 1, d, d))
    A_all = np.empty((n, d, d))

    mean_pred[0] = model.x0
    cov_pred[0] = 0.0
    for k in range(n):
        C = h * H_fn(t[k])
        S = C @ cov_pred[k] @ C.T + R
        try:
            K = np.linalg.solve(S, C @ cov_pred[k]).T
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"singular innovation covariance at node {k}") from exc
        mean_filt[k] = mean_pred[k] + K @ (dY[k] - C @ mean_pred[k])
        cov = (np.eye(d) - K @ C) @ cov_pred[k]
        cov_filt[k] = 0.5 * (cov + cov.T)

        B_k, m_k = _probe_affine(model, t[k], basis)
        A = np.eye(d) + B_k * h
        A_all[k] = A
        mean_pred[k + 1] = A @ mean_filt[k] + m_k * h
        cov = A @ cov_filt[k] @ A.T + Q
        cov_pred[k + 1] = 0.5 * (cov + cov.T)

    if model.terminal_obs is not None:
        if obs.zeta is None:
            raise ValueError("model has a terminal observation but obs carries no zeta")
        Bz = model.terminal_obs.B
        S = Bz @ cov_pred[n] @ Bz.T + model.terminal_obs.Sigma
        try:
            K = np.linalg.solve(S, Bz @ cov_pred[n]).T
        except np.linalg.LinAlgError as exc:
            raise EstimationError("singular innovation covariance at the terminal node") from exc
        mean_filt[n] = mean_pred[n] + K @ (obs.zeta - Bz @ mean_pred[n])
        cov = (np.eye(d) - K @ Bz) @ cov_pred[n]
        cov_filt[n] = 0.5 * (cov + cov.T)
    else:
        mean_filt[n] = mean_pred[n]
        cov_filt[n] = cov_pred[n]

    mean_s = np.empty_like(mean_filt)
    cov_s = np.empty_like(cov_filt)
    mean_s[n] = mean_filt[n]
    cov_s[n] = cov_filt[n]
    for k in range(n - 1, -1, -1):
        # pinv keeps the degenerate cases (sigma = 0, point-mass start) exact:
        # a zero predicted covariance simply passes the filtered law through.
        G = cov_filt[k] @ A_all[k].T @ np.linalg.pinv(cov_pred[k + 1])
        mean_s[k] = mean_filt[k] + G @ (mean_s[k + 1] - mean_pred[k + 1])
        cov = cov_filt[k] + G @ (cov_s[k + 1] - cov_pred[k + 1]) @ G.T
        cov_s[k] = 0.5 * (cov + cov.T)

    return KalmanSmootherSolution(
        grid=grid,
        smoothed_mean=Path(grid=grid, values=mean_s),
        smoothed_cov=cov_s,
    )
