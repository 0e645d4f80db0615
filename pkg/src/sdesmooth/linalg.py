"""Small dense linear-algebra helpers shared across modules."""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def spd_inverse_and_logdet(mats: Array) -> tuple[Array, Array]:
    """Inverses and log-determinants of a stack of SPD matrices.

    Uses one batched Cholesky factorization: with P = L L', the inverse is
    L^{-T} L^{-1} (symmetric by construction) and log|P| = 2 sum(log diag L).
    """
    mats = np.asarray(mats, dtype=float)
    L = np.linalg.cholesky(mats)
    L_inv = np.linalg.inv(L)
    inv = np.swapaxes(L_inv, -1, -2) @ L_inv
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return inv, logdet


def gaussian_log_density(x: Array, mean: Array, cov: Array) -> float:
    """Log density of N(mean, cov) at x, via Cholesky."""
    x = np.asarray(x, dtype=float).reshape(-1)
    mean = np.asarray(mean, dtype=float).reshape(-1)
    L = np.linalg.cholesky(np.atleast_2d(cov))
    r = np.linalg.solve(L, x - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (x.size * np.log(2.0 * np.pi) + logdet + r @ r))
