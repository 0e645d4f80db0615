"""Stochastic gradient fitting of the guide coefficients.

The guide drift is parameterized as B(theta) x + m(theta) with B symmetric
tridiagonal, packed as

    theta[:d]        diagonal of B,
    theta[d:2d-1]    first off-diagonal (mirrored below),
    theta[2d-1:]     offset m,

with the guide dispersion held fixed at the model's.  One noise draw w gives
one reward sample

    J(theta; w) = sum (H X_k)' dY_k - 1/2 sum |H X_k|^2 h
                  + log N(zeta; B_z X_n, Sigma_z)
                  - sum u_k' dW_k - 1/2 sum |u_k|^2 h,

where X is the guided Euler path driven by w under guide(theta) and u_k the
steering control along it.  Holding w fixed makes J differentiable in theta,
and the gradient is propagated forward by hand: the theta-tangents of (nu, P)
ride along the backward filter recursion, then the tangents of (X, J) ride
along the Euler recursion.  No automatic differentiation is involved, so the
gradient is directly checkable against finite differences.

Since (nu, P) and their tangents depend on theta but not on w, they are solved
once per theta and shared across a batch of draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .backward_filter import DEFAULT_FLAT_KAPPA, FilterError, LinearGuide
from .linalg import gaussian_log_density, spd_inverse_and_logdet
from .sde import Array, ModelSpec, NoiseDraw, ObservationRecord, TimeGrid, draw_noise

__all__ = [
    "FitError",
    "GuideParams",
    "AdamState",
    "RewardSample",
    "reward_and_grad",
    "fit_guide",
    "guide_from_params",
]


class FitError(RuntimeError):
    """Raised when an optimization run cannot continue."""


@dataclass(frozen=True, eq=False)
class GuideParams:
    """Packed symmetric-tridiagonal guide coefficients, length 3d - 1."""

    theta: Array

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if theta.size < 2 or (theta.size + 1) % 3 != 0:
            raise ValueError(
                f"parameter vector must have length 3d - 1 for some d >= 1, got {theta.size}"
            )
        object.__setattr__(self, "theta", theta)

    @property
    def dim(self) -> int:
        return (self.theta.size + 1) // 3

    @classmethod
    def zeros(cls, d: int) -> "GuideParams":
        return cls(theta=np.zeros(3 * d - 1))

    def matrices(self) -> tuple[Array, Array]:
        """Unpack into (B, m)."""
        d = self.dim
        B = np.diag(self.theta[:d].copy())
        off = self.theta[d : 2 * d - 1]
        idx = np.arange(d - 1)
        B[idx, idx + 1] = off
        B[idx + 1, idx] = off
        return B, self.theta[2 * d - 1 :].copy()

    @classmethod
    def from_matrices(cls, B: Array, m: Array) -> "GuideParams":
        """Pack (B, m), reading only the diagonal and first superdiagonal."""
        B = np.asarray(B, dtype=float)
        m = np.asarray(m, dtype=float).reshape(-1)
        d = m.size
        if B.shape != (d, d):
            raise ValueError(f"B must have shape ({d}, {d}), got {B.shape}")
        idx = np.arange(d - 1)
        return cls(theta=np.concatenate([np.diag(B), B[idx, idx + 1], m]))


def _fixed_guide_dispersion(model: ModelSpec) -> Array:
    """The dispersion the fitted guide inherits from the model.

    Sensitivity propagation treats it as state-independent, so a callable
    dispersion is frozen at (t=0, x0).
    """
    if model.dispersion_constant is not None:
        return model.dispersion_constant
    return np.asarray(model.dispersion(0.0, model.x0), dtype=float)


def guide_from_params(params: GuideParams, model: ModelSpec) -> LinearGuide:
    """Materialize the LinearGuide a parameter vector denotes."""
    B, m = params.matrices()
    return LinearGuide(B=B, m=m, sigma=_fixed_guide_dispersion(model))


@dataclass
class AdamState:
    """Adam accumulator; ``update`` performs one ascent step on theta."""

    eta: float
    beta1: float
    beta2: float
    eps: float
    first_moment: Array
    second_moment: Array
    step: int = 0

    @classmethod
    def fresh(
        cls,
        n_params: int,
        eta: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            eta=eta,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            first_moment=np.zeros(n_params),
            second_moment=np.zeros(n_params),
        )

    def update(self, theta: Array, grad: Array) -> Array:
        """Ascent: theta + eta * mhat / (sqrt(vhat) + eps), with bias correction."""
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            raise FitError("Adam received a non-finite gradient")
        self.step += 1
        self.first_moment = self.beta1 * self.first_moment + (1.0 - self.beta1) * grad
        self.second_moment = self.beta2 * self.second_moment + (1.0 - self.beta2) * grad**2
        mhat = self.first_moment / (1.0 - self.beta1**self.step)
        vhat = self.second_moment / (1.0 - self.beta2**self.step)
        return theta + self.eta * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True, eq=False)
class RewardSample:
    """One Monte Carlo draw of the reward and its theta-gradient.

    ``valid`` is False when the backward filter (or the path) failed for this
    theta; callers skip such samples.
    """

    value: float
    grad: Array
    valid: bool = True


def _theta_tangent_basis(d: int) -> tuple[Array, Array]:
    """dB/dtheta_p and dm/dtheta_p for every packed component p."""
    n_params = 3 * d - 1
    dB = np.zeros((n_params, d, d))
    dm = np.zeros((n_params, d))
    for i in range(d):
        dB[i, i, i] = 1.0
    for i in range(d - 1):
        dB[d + i, i, i + 1] = 1.0
        dB[d + i, i + 1, i] = 1.0
    for i in range(d):
        dm[2 * d - 1 + i, i] = 1.0
    return dB, dm


@dataclass(frozen=True, eq=False)
class _TangentFilterSolution:
    """Backward filter output plus its theta-tangents, shared across a batch."""

    grid: TimeGrid
    nu: Array
    P: Array
    P_inv: Array
    dnu: Array
    dP: Array
    y_increments: Array
    zeta: Optional[Array]
    sigma: Array


def _solve_filter_tangents(
    params: GuideParams,
    model: ModelSpec,
    obs: ObservationRecord,
    grid: TimeGrid,
    kappa: float = DEFAULT_FLAT_KAPPA,
) -> _TangentFilterSolution:
    """Backward pass for guide(theta) carrying d(nu)/dtheta and dP/dtheta.

    The primal recursion repeats solve_backward's right-endpoint update
    expression for expression, so the two stay bit-identical; the tangent of
    each update is its exact chain-rule derivative (the terminal condition
    does not depend on theta, so the tangents start at zero).
    """
    d = model.dim_x
    if params.dim != d:
        raise ValueError(f"parameter dimension {params.dim} != model dim_x {d}")
    n = grid.n_steps
    h = grid.h
    dY = obs.increments()
    if dY.shape != (n, model.dim_y):
        raise ValueError(f"observation increments have shape {dY.shape}, expected {(n, model.dim_y)}")
    has_terminal = model.terminal_obs is not None
    if has_terminal != (obs.zeta is not None):
        raise FilterError("model terminal observation and observed zeta must be present together")

    B, m = params.matrices()
    dB_basis, dm_basis = _theta_tangent_basis(d)
    n_params = dB_basis.shape[0]
    sigma = _fixed_guide_dispersion(model)
    a = sigma @ sigma.T
    H_fn = model.obs_operator
    t = grid.times

    nu = np.empty((n + 1, d))
    P = np.empty((n + 1, d, d))
    dnu = np.empty((n + 1, n_params, d))
    dP = np.empty((n + 1, n_params, d, d))
    if has_terminal:
        nu[n] = model.terminal_obs.B @ obs.zeta
        P[n] = model.terminal_obs.Sigma
    else:
        nu[n] = 0.0
        P[n] = kappa * np.eye(d)
    dnu[n] = 0.0
    dP[n] = 0.0

    H_const = H_fn.is_constant
    if H_const:
        H = H_fn.constant
        HtH = H.T @ H
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n - 1, -1, -1):
            if not H_const:
                H = H_fn(t[k + 1])
                HtH = H.T @ H
            P1 = P[k + 1]
            nu1 = nu[k + 1]
            BP = B @ P1
            Pk = P1 - (BP + BP.T - a + P1 @ HtH @ P1) * h
            P[k] = 0.5 * (Pk + Pk.T)
            Hnu = H @ nu1
            c1 = H.T @ (dY[k] - Hnu * h)
            nu[k] = nu1 - (B @ nu1 + m) * h + P1 @ c1

            dP1 = dP[k + 1]
            dnu1 = dnu[k + 1]
            W = HtH @ P1
            M = dB_basis @ P1 + B @ dP1 + dP1 @ W
            dP[k] = dP1 - h * (M + np.swapaxes(M, -1, -2))
            dnu[k] = (
                dnu1
                - h * (nu1 @ np.swapaxes(dB_basis, -1, -2) + dnu1 @ B.T + dm_basis)
                + dP1 @ c1
                - h * (dnu1 @ W)
            )

    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(nu))):
        raise FilterError("backward filter left the finite range for this parameter value")
    if not (np.all(np.isfinite(dP)) and np.all(np.isfinite(dnu))):
        raise FilterError("filter tangents left the finite range for this parameter value")
    try:
        P_inv, _ = spd_inverse_and_logdet(P)
    except np.linalg.LinAlgError as exc:
        raise FilterError("filter covariance not positive definite for this parameter value") from exc

    return _TangentFilterSolution(
        grid=grid,
        nu=nu,
        P=P,
        P_inv=P_inv,
        dnu=dnu,
        dP=dP,
        y_increments=dY,
        zeta=None if obs.zeta is None else np.asarray(obs.zeta, dtype=float),
        sigma=sigma,
    )


def _forward_reward(
    ft: _TangentFilterSolution,
    model: ModelSpec,
    increments: Array,
) -> tuple[float, Array, bool]:
    """Euler pass accumulating J and dJ/dtheta along one noise draw."""
    grid = ft.grid
    n = grid.n_steps
    h = grid.h
    t = grid.times
    dY = ft.y_increments
    sig = ft.sigma
    a = sig @ sig.T
    H_fn = model.obs_operator
    jac = model.drift_jacobian
    n_params = ft.dnu.shape[1]

    x = model.x0.copy()
    dx = np.zeros((n_params, model.dim_x))
    j_terms: list[float] = []
    grad = np.zeros(n_params)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            Pinv = ft.P_inv[k]
            rho = Pinv @ (ft.nu[k] - x)
            u = sig.T @ rho
            H = H_fn(t[k])
            Hx = H @ x
            dWk = increments[k]
            j_terms.append(float(Hx @ dY[k]) - 0.5 * float(Hx @ Hx) * h)
            j_terms.append(-float(u @ dWk) - 0.5 * float(u @ u) * h)

            drho = (ft.dnu[k] - dx - ft.dP[k] @ rho) @ Pinv
            du = drho @ sig
            dxH = dx @ H.T
            grad += dxH @ dY[k] - h * (dxH @ Hx) - du @ dWk - h * (du @ u)

            b = np.asarray(model.drift(t[k], x), dtype=float)
            Jb = np.asarray(jac(t[k], x), dtype=float)
            x = x + (b + a @ rho) * h + sig @ dWk
            dx = dx + h * (dx @ Jb.T + drho @ a)

        if model.terminal_obs is not None:
            Bz = model.terminal_obs.B
            Sz = model.terminal_obs.Sigma
            resid = ft.zeta - Bz @ x
            j_terms.append(gaussian_log_density(ft.zeta, Bz @ x, Sz))
            grad += (dx @ Bz.T) @ np.linalg.solve(Sz, resid)

    value = math.fsum(j_terms)
    ok = bool(
        math.isfinite(value) and np.all(np.isfinite(grad)) and np.all(np.isfinite(x))
    )
    return value, grad, ok


def reward_and_grad(
    theta: Union[GuideParams, Array],
    model: ModelSpec,
    obs: ObservationRecord,
    grid: TimeGrid,
    w: NoiseDraw,
) -> RewardSample:
    """One reparameterized reward draw and its exact pathwise gradient.

    Pure function of (theta, w): the increments are held fixed while theta
    varies, which is what makes the finite-difference comparison meaningful.
    A backward-filter failure for this theta yields an invalid sample rather
    than an exception, so optimizers can skip and move on.
    """
    params = theta if isinstance(theta, GuideParams) else GuideParams(theta=np.asarray(theta))
    if model.drift_jacobian is None:
        raise ValueError("reward gradients need model.drift_jacobian")
    if w.grid != grid:
        raise ValueError("noise draw lives on a different grid")
    if w.dim != model.dim_w:
        raise ValueError(f"noise dimension {w.dim} != model dim_w {model.dim_w}")

    n_params = params.theta.size
    try:
        ft = _solve_filter_tangents(params, model, obs, grid)
    except FilterError:
        return RewardSample(value=math.nan, grad=np.zeros(n_params), valid=False)
    value, grad, ok = _forward_reward(ft, model, w.increments)
    if not ok:
        return RewardSample(value=math.nan, grad=np.zeros(n_params), valid=False)
    return RewardSample(value=value, grad=grad, valid=True)


def fit_guide(
    model: ModelSpec,
    obs: ObservationRecord,
    grid: TimeGrid,
    init_theta: Union[GuideParams, Array],
    adam: AdamState,
    n_iters: int,
    batch: int = 1,
    seed: int = 0,
) -> tuple[GuideParams, Array]:
    """Stochastic gradient ascent on the reward; returns (theta_star, loss curve).

    Each iteration draws ``batch`` fresh noise draws, averages their reward
    gradients, and takes one Adam ascent step.  The loss curve records the
    negative mean reward per iteration.  The backward filter and its tangents
    are solved once per iteration and shared across the batch.

    Raises
    ------
    FitError
        If more than half the reward samples of one iteration are invalid.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be positive, got {n_iters}")
    if batch < 1:
        raise ValueError(f"batch must be positive, got {batch}")
    if model.drift_jacobian is None:
        raise ValueError("reward gradients need model.drift_jacobian")

    params = init_theta if isinstance(init_theta, GuideParams) else GuideParams(
        theta=np.asarray(init_theta)
    )
    theta = params.theta.copy()
    seeds = np.random.SeedSequence(seed).generate_state(n_iters * batch, dtype=np.uint64)
    seeds = seeds.reshape(n_iters, batch)
    loss = np.empty(n_iters)

    for it in range(n_iters):
        values: list[float] = []
        grads: list[Array] = []
        invalid = 0
        try:
            ft = _solve_filter_tangents(GuideParams(theta=theta), model, obs, grid)
        except FilterError as exc:
            raise FitError(f"iteration {it}: backward filter failed ({exc})") from exc
        for s in range(batch):
            w = draw_noise(grid, model.dim_w, int(seeds[it, s]))
            value, grad, ok = _forward_reward(ft, model, w.increments)
            if not ok:
                invalid += 1
                continue
            values.append(value)
            grads.append(grad)
        if invalid * 2 > batch:
            raise FitError(
                f"iteration {it}: {invalid} of {batch} reward samples invalid; aborting"
            )
        mean_grad = np.mean(grads, axis=0)
        loss[it] = -float(np.mean(values))
        theta = adam.update(theta, mean_grad)

    return GuideParams(theta=theta), loss
