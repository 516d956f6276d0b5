"""Gaussian negative log-likelihood losses for 3-D location estimates."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_spd(sigma: np.ndarray):
    if sigma.shape != (3, 3):
        raise ShapeError(f"covariance must be 3x3, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-9):
        raise ValueError("covariance is not symmetric")
    # Cholesky doubles as the positive-definiteness test.
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None


def mv_nll_loss(mu, sigma, y):
    """Full-covariance Gaussian NLL: 1/2 r^T S^-1 r + 1/2 log|S| + 3/2 log 2pi.

    mu: (1, 3) tensor or array; sigma: (3, 3) tensor or array (symmetric
    positive definite); y: length-3 array. Differentiable in mu and sigma
    via closed-form matrix derivatives.
    """
    mu = T.as_tensor(mu)
    sigma = T.as_tensor(sigma)
    y = np.asarray(y, dtype=np.float64).reshape(1, 3)
    if mu.shape != (1, 3):
        raise ShapeError(f"mean must be a (1, 3) row, got {mu.shape}")
    chol = _check_spd(sigma.data)

    r = (mu.data - y).reshape(3, 1)
    s_inv = np.linalg.inv(sigma.data)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    val = 0.5 * (r.T @ s_inv @ r).item() + 0.5 * logdet + 1.5 * LOG_2PI

    s_inv_r = s_inv @ r

    def vjp(g):
        gs = float(g)
        g_mu = gs * s_inv_r.reshape(1, 3)
        # d/dS of the quadratic term is -S^-T r r^T S^-T; of log|S| is S^-T.
        g_sigma = gs * 0.5 * (s_inv.T - s_inv.T @ r @ r.T @ s_inv.T)
        return g_mu, g_sigma

    return T._make(np.array(val), (mu, sigma), vjp)


def diag_nll(mu, var, y):
    """Batched diagonal-covariance NLL summed over rows.

    mu, var: (M, 3) tensors (var entries > 0); y: (M, 3) array of targets.
    Equals sum_i mv_nll_loss(mu_i, diag(var_i), y_i), built from autodiff
    primitives so it stays cheap inside training graphs.
    """
    mu = T.as_tensor(mu)
    var = T.as_tensor(var)
    y = T.constant(np.asarray(y, dtype=np.float64))
    if mu.shape != var.shape or mu.shape != y.shape:
        raise ShapeError(f"diag_nll shapes differ: {mu.shape}, {var.shape}, {y.data.shape}")
    r = mu - y
    quad = T.tsum(r * r / var)
    logdet = T.tsum(T.log(var))
    const = 1.5 * LOG_2PI * mu.shape[0]
    return quad * T.constant(0.5) + logdet * T.constant(0.5) + T.constant(const)


def gaussian_nll_value(mu: np.ndarray, sigma: np.ndarray, y: np.ndarray) -> float:
    """Plain-number NLL for evaluation code paths (no graph)."""
    with T.no_grad():
        return float(mv_nll_loss(np.asarray(mu).reshape(1, 3), sigma, y).data)
