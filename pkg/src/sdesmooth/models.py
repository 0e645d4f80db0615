"""Builtin model and guide registry, keyed by name for CLI use.

Three model families are registered:

``reaction_diffusion``
    Coupled double-well lattice: b(x) = -5 Lambda x + F(x) with Lambda the
    tridiagonal coupling matrix and F(x)_i = 2 x_i - 2 x_i^3, unit dispersion,
    H = 5 I, terminal reading zeta = X_T + N(0, 0.1 I).
``linear``
    Affine benchmark with damped-rotation drift, constant non-diagonal
    dispersion, H = I, and a terminal reading.  Exactly solvable, used by the
    oracle cross-checks.
``ou``
    Diagonal Ornstein-Uhlenbeck, b(x) = -x, H = I, no terminal reading.

Model drifts are written to broadcast over a leading batch axis so vectorized
multi-path simulation can use them directly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .backward_filter import LinearGuide
from .sde import Array, ModelSpec, TerminalObservation


def tridiagonal_coupling(d: int) -> Array:
    """Lattice coupling matrix: 1 on the two boundary diagonal entries, 2 on
    the interior diagonal, -1 on the off-diagonals."""
    if d < 2:
        raise ValueError("coupling matrix needs d >= 2")
    lam = 2.0 * np.eye(d)
    lam[0, 0] = lam[d - 1, d - 1] = 1.0
    idx = np.arange(d - 1)
    lam[idx, idx + 1] = -1.0
    lam[idx + 1, idx] = -1.0
    return lam


def double_well_force(x: Array) -> Array:
    """Componentwise bistable force F(x) = 2x - 2x^3 (roots at 0, +-1)."""
    return 2.0 * x - 2.0 * x**3


def _linear_coefficients(d: int) -> tuple[Array, Array, Array, Array]:
    """Drift matrix, offset, dispersion, and x0 of the affine benchmark."""
    B = -np.eye(d)
    idx = np.arange(d - 1)
    B[idx, idx + 1] = 0.5
    B[idx + 1, idx] = -0.5
    m = np.where(np.arange(d) % 2 == 0, 0.2, -0.1)
    sigma = 0.4 * np.eye(d)
    sigma[idx + 1, idx] += 0.1
    sigma[np.arange(d), np.arange(d)] = np.where(np.arange(d) % 2 == 0, 0.4, 0.3)
    x0 = np.where(np.arange(d) % 2 == 0, 0.5, -0.3)
    return B, m, sigma, x0


def reaction_diffusion_model(d: int) -> ModelSpec:
    lam = tridiagonal_coupling(d)
    minus_five_lam = -5.0 * lam

    def drift(t: float, x: Array) -> Array:
        return x @ minus_five_lam.T + double_well_force(x)

    def drift_jacobian(t: float, x: Array) -> Array:
        return minus_five_lam + np.diag(2.0 - 6.0 * x**2)

    return ModelSpec(
        dim_x=d,
        dim_w=d,
        dim_y=d,
        drift=drift,
        dispersion=np.eye(d),
        obs_operator=5.0 * np.eye(d),
        x0=np.zeros(d),
        terminal_obs=TerminalObservation(B=np.eye(d), Sigma=0.1 * np.eye(d)),
        drift_jacobian=drift_jacobian,
    )


def linear_model(d: int = 2) -> ModelSpec:
    B, m, sigma, x0 = _linear_coefficients(d)
    return ModelSpec(
        dim_x=d,
        dim_w=d,
        dim_y=d,
        drift=lambda t, x: x @ B.T + m,
        dispersion=sigma,
        obs_operator=np.eye(d),
        x0=x0,
        terminal_obs=TerminalObservation(B=np.eye(d), Sigma=0.1 * np.eye(d)),
        drift_jacobian=lambda t, x: B,
    )


def ou_model(d: int = 1) -> ModelSpec:
    return ModelSpec(
        dim_x=d,
        dim_w=d,
        dim_y=d,
        drift=lambda t, x: -x,
        dispersion=np.eye(d),
        obs_operator=np.eye(d),
        x0=np.full(d, 0.5),
        terminal_obs=None,
        drift_jacobian=lambda t, x: -np.eye(d),
    )


def reaction_diffusion_guide(d: int) -> LinearGuide:
    """Linearization of the lattice model around 0 with the cubic force dropped."""
    return LinearGuide(B=-5.0 * tridiagonal_coupling(d), m=np.zeros(d), sigma=np.eye(d))


def linear_guide(d: int = 2) -> LinearGuide:
    """The affine benchmark's own coefficients: guide equals model."""
    B, m, sigma, _ = _linear_coefficients(d)
    return LinearGuide(B=B, m=m, sigma=sigma)


def ou_guide(d: int = 1) -> LinearGuide:
    return LinearGuide(B=-np.eye(d), m=np.zeros(d), sigma=np.eye(d))


MODEL_BUILDERS: dict[str, Callable[[int], ModelSpec]] = {
    "reaction_diffusion": reaction_diffusion_model,
    "linear": linear_model,
    "ou": ou_model,
}

GUIDE_BUILDERS: dict[str, Callable[[int], LinearGuide]] = {
    "reaction_diffusion": reaction_diffusion_guide,
    "linear": linear_guide,
    "ou": ou_guide,
}


def build_model(name: str, d: int) -> ModelSpec:
    try:
        builder = MODEL_BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown model '{name}'; registered: {sorted(MODEL_BUILDERS)}") from None
    return builder(d)


def build_guide(name: str, d: int) -> LinearGuide:
    try:
        builder = GUIDE_BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown guide '{name}'; registered: {sorted(GUIDE_BUILDERS)}") from None
    return builder(d)
