"""Time grids, model specification, and Euler-Maruyama simulation.

The latent process solves ``dX = b(t, X) dt + sigma(t, X) dW`` and is observed
continuously through ``dY = H_t X_t dt + d(beta_t)``, optionally together with a
noisy terminal reading ``zeta = B X_T + eta``.  Everything downstream (filtering,
guided sampling, MCMC) operates on one fixed uniform grid, so the grid and the
seeded increment draws live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

Array = np.ndarray


class SimulationError(RuntimeError):
    """Raised when a forward simulation produces a non-finite evaluation."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with nodes t_k = k * h, h = T / n_steps."""

    T: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.t0 != 0.0:
            raise ValueError("grids start at t0 = 0")
        if not (self.T > 0.0 and math.isfinite(self.T)):
            raise ValueError(f"horizon must be positive and finite, got T={self.T}")
        if self.n_steps < 1:
            raise ValueError(f"need at least one step, got n_steps={self.n_steps}")

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> Array:
        """Node times, length n_steps + 1; the last node is exactly T."""
        return np.linspace(0.0, self.T, self.n_steps + 1)


class TimeFunction:
    """Constant array or callable of time, behind one callable interface.

    Model and guide coefficients (H_t, B_t, m_t, ...) are usually constant
    matrices; wrapping them keeps the integrators generic while letting hot
    loops hoist the constant case.
    """

    def __init__(self, value: Union[Array, float, Callable[[float], Array]]):
        if callable(value):
            self._fn = value
            self.constant: Optional[Array] = None
        else:
            arr = np.asarray(value, dtype=float)
            self._fn = None
            self.constant = arr

    def __call__(self, t: float) -> Array:
        if self.constant is not None:
            return self.constant
        return np.asarray(self._fn(t), dtype=float)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


def as_time_function(value) -> TimeFunction:
    if isinstance(value, TimeFunction):
        return value
    return TimeFunction(value)


@dataclass(frozen=True, eq=False)
class TerminalObservation:
    """Gaussian terminal reading zeta = B x_T + eta, eta ~ N(0, Sigma)."""

    B: Array
    Sigma: Array

    def __post_init__(self) -> None:
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Sigma", Sigma)
        if Sigma.shape[0] != Sigma.shape[1] or Sigma.shape[0] != B.shape[0]:
            raise ValueError("terminal observation dimensions are inconsistent")
        if not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("terminal noise covariance must be symmetric")
        try:
            np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("terminal noise covariance must be positive definite") from exc


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Diffusion model with continuous observation operator.

    Parameters
    ----------
    dim_x, dim_w, dim_y:
        State, driving-noise, and observation dimensions (d, d', D).
    drift:
        Callable (t, x) -> (d,) drift vector b(t, x).
    dispersion:
        Callable (t, x) -> (d, d') dispersion matrix sigma(t, x), or a constant
        (d, d') array.  Passing the array lets simulators hoist it out of the
        step loop.
    obs_operator:
        Observation matrix H_t, a (D, d) array or a callable of t.
    terminal_obs:
        Optional Gaussian terminal observation of X_T.
    x0:
        Deterministic initial state.
    drift_jacobian:
        Optional callable (t, x) -> (d, d) Jacobian of the drift in x; required
        only by sensitivity-based consumers (variational fitting).
    """

    dim_x: int
    dim_w: int
    dim_y: int
    drift: Callable[[float, Array], Array]
    dispersion: Callable[[float, Array], Array]
    obs_operator: TimeFunction
    x0: Array
    terminal_obs: Optional[TerminalObservation] = None
    drift_jacobian: Optional[Callable[[float, Array], Array]] = None

    def __post_init__(self) -> None:
        for name in ("dim_x", "dim_w", "dim_y"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        object.__setattr__(self, "obs_operator", as_time_function(self.obs_operator))
        if callable(self.dispersion):
            object.__setattr__(self, "dispersion_constant", None)
        else:
            sig = np.asarray(self.dispersion, dtype=float)
            if sig.shape != (self.dim_x, self.dim_w):
                raise ValueError(
                    f"constant dispersion must have shape ({self.dim_x}, {self.dim_w}),"
                    f" got {sig.shape}"
                )
            object.__setattr__(self, "dispersion", lambda t, x, _sig=sig: _sig)
            object.__setattr__(self, "dispersion_constant", sig)
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim_x,):
            raise ValueError(f"x0 must have shape ({self.dim_x},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)
        H0 = self.obs_operator(0.0)
        if H0.shape != (self.dim_y, self.dim_x):
            raise ValueError(
                f"observation operator must map R^{self.dim_x} to R^{self.dim_y}, got shape {H0.shape}"
            )
        if self.terminal_obs is not None and self.terminal_obs.B.shape[1] != self.dim_x:
            raise ValueError("terminal observation operator has wrong state dimension")


@dataclass(frozen=True, eq=False)
class Path:
    """Grid-sampled trajectory: one value vector per node."""

    grid: TimeGrid
    values: Array

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"path needs {self.grid.n_steps + 1} node values, got {values.shape[0]}"
            )
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class NoiseDraw:
    """Brownian increments on a grid: increments[k] ~ N(0, h I) i.i.d."""

    grid: TimeGrid
    increments: Array
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.shape[0] != self.grid.n_steps:
            raise ValueError(
                f"need one increment per step ({self.grid.n_steps}), got {inc.shape[0]}"
            )
        object.__setattr__(self, "increments", inc)

    @property
    def dim(self) -> int:
        return self.increments.shape[1]


@dataclass(frozen=True, eq=False)
class ObservationRecord:
    """Observation path started at zero, plus the optional terminal reading."""

    y_path: Path
    zeta: Optional[Array] = None

    def __post_init__(self) -> None:
        if not np.all(self.y_path.values[0] == 0.0):
            raise ValueError("observation paths start at Y_0 = 0")
        if self.zeta is not None:
            object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float).reshape(-1))

    def increments(self) -> Array:
        return np.diff(self.y_path.values, axis=0)


def draw_noise(grid: TimeGrid, dim: int, seed: int) -> NoiseDraw:
    """Draw seeded Brownian increments: shape (n_steps, dim), variance h each.

    Deterministic: the same (grid, dim, seed) triple reproduces the draw
    sample-exactly on one platform.
    """
    if dim < 1:
        raise ValueError(f"increment dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    increments = rng.standard_normal((grid.n_steps, dim)) * math.sqrt(grid.h)
    return NoiseDraw(grid=grid, increments=increments, seed=seed)


def simulate_forward(model: ModelSpec, grid: TimeGrid, w: NoiseDraw) -> Path:
    """Euler-Maruyama solve of the model SDE from x0 with the given increments.

    X_{k+1} = X_k + b(t_k, X_k) h + sigma(t_k, X_k) dW_k.
    """
    if w.grid != grid:
        raise ValueError("noise draw lives on a different grid")
    if w.dim != model.dim_w:
        raise ValueError(f"noise dimension {w.dim} != model dim_w {model.dim_w}")
    n = grid.n_steps
    h = grid.h
    t = grid.times
    x = np.empty((n + 1, model.dim_x))
    x[0] = model.x0
    inc = w.increments
    for k in range(n):
        b = np.asarray(model.drift(t[k], x[k]), dtype=float)
        sig = np.asarray(model.dispersion(t[k], x[k]), dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
            raise SimulationError(f"non-finite drift or dispersion at step {k} (t={t[k]:.6g})")
        x[k + 1] = x[k] + b * h + sig @ inc[k]
    if not np.all(np.isfinite(x[n])):
        raise SimulationError(f"non-finite state at step {n} (t={t[n]:.6g})")
    return Path(grid=grid, values=x)


def simulate_observation(
    model: ModelSpec,
    x: Path,
    beta: NoiseDraw,
    zeta_seed: Optional[int] = None,
) -> ObservationRecord:
    """Integrate the observation SDE along a latent path.

    Y_0 = 0 and Y_{k+1} = Y_k + H_{t_k} X_k h + d(beta_k).  When the model has a
    terminal observation, ``zeta = B X_T + eta`` is drawn from ``zeta_seed``.
    """
    if beta.grid != x.grid:
        raise ValueError("observation noise lives on a different grid")
    if beta.dim != model.dim_y:
        raise ValueError(f"observation noise dimension {beta.dim} != dim_y {model.dim_y}")
    if x.dim != model.dim_x:
        raise ValueError(f"latent path dimension {x.dim} != dim_x {model.dim_x}")
    grid = x.grid
    n = grid.n_steps
    h = grid.h
    H = model.obs_operator
    if H.is_constant:
        drift_inc = (x.values[:-1] @ H.constant.T) * h
    else:
        t = grid.times
        drift_inc = np.stack([H(t[k]) @ x.values[k] for k in range(n)]) * h
    y = np.zeros((n + 1, model.dim_y))
    np.cumsum(drift_inc + beta.increments, axis=0, out=y[1:])

    zeta = None
    if model.terminal_obs is not None:
        if zeta_seed is None:
            raise ValueError("model has a terminal observation; pass zeta_seed")
        term = model.terminal_obs
        rng = np.random.default_rng(zeta_seed)
        noise = np.linalg.cholesky(term.Sigma) @ rng.standard_normal(term.B.shape[0])
        zeta = term.B @ x.values[n] + noise
    return ObservationRecord(y_path=Path(grid=grid, values=y), zeta=zeta)
