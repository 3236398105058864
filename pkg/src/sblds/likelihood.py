"""Exact marginal log-likelihood of the stacked observations.

The observations, stacked time-major into one vector, are zero-mean
Gaussian with covariance R_Y + sigma2*I, where R_Y is assembled from the
mask, the output map, and the block-Toeplitz propagation operator of the
dynamics.  This module evaluates that density directly through one
Cholesky factorization, provides the analytic gradient with respect to
the input variances, and carries a finite-difference oracle for it.

Dense evaluation is intended for K*m up to a few hundred; beyond that,
use the innovations form (which is exactly equal and runs in O(K)).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .model import SystemModel, Theta, validate_model, validate_theta


@dataclass
class StackedCovariance:
    """Signal covariance of the stacked observations plus cached factor.

    ry : (Km, Km) symmetric PSD signal covariance
    sigma_total : ry + sigma2*I
    chol : lower Cholesky factor of sigma_total
    """

    ry: np.ndarray
    sigma_total: np.ndarray
    chol: np.ndarray


def build_dtilde(model: SystemModel) -> np.ndarray:
    """Block lower-triangular propagation operator of the state recursion.

    Block (k, j) is D^(k-j) for k >= j and zero above the diagonal, so the
    stacked states equal this matrix applied to the stacked inputs.
    """
    validate_model(model)
    n, K = model.n, model.K
    powers = [np.eye(n)]
    for _ in range(1, K):
        powers.append(model.D @ powers[-1])
    out = np.zeros((K * n, K * n))
    for k in range(K):
        for j in range(k + 1):
            out[k * n:(k + 1) * n, j * n:(j + 1) * n] = powers[k - j]
    return out


def _stacked_operator(model: SystemModel, z: np.ndarray) -> np.ndarray:
    """(Km, Kn) map from stacked inputs to stacked noiseless observations."""
    G = np.kron(np.diag(np.asarray(z, dtype=float)), model.A)
    return G @ build_dtilde(model)


def build_ry(model: SystemModel, theta: Theta) -> StackedCovariance:
    """Assemble the stacked signal covariance and factor the total."""
    validate_model(model)
    validate_theta(model, theta)
    B = _stacked_operator(model, theta.z)
    g_tiled = np.tile(np.asarray(theta.gamma, dtype=float), model.K)
    ry = (B * g_tiled[None, :]) @ B.T
    ry = 0.5 * (ry + ry.T)
    sigma_total = ry + model.sigma2 * np.eye(ry.shape[0])
    chol = np.linalg.cholesky(sigma_total)
    return StackedCovariance(ry=ry, sigma_total=sigma_total, chol=chol)


def _stacked_y(model: SystemModel, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (model.m, model.K):
        raise ValueError(f"Y: expected shape ({model.m}, {model.K}), got {Y.shape}")
    return Y.flatten(order="F")


def log_likelihood(
    model: SystemModel,
    Y: np.ndarray,
    theta: Theta,
    cov: StackedCovariance | None = None,
) -> float:
    """Gaussian log-density of the stacked observations under theta.

    log-det and the quadratic form both go through the cached Cholesky
    factor: one O((Km)^3) factorization per evaluation, everything else
    is triangular solves.
    """
    y = _stacked_y(model, Y)
    if cov is None:
        cov = build_ry(model, theta)
    L = cov.chol
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    half = solve_triangular(L, y, lower=True)
    quad = float(half @ half)
    km = model.K * model.m
    return -0.5 * km * np.log(2.0 * np.pi) - 0.5 * logdet - 0.5 * quad


def log_likelihood_innovations(model: SystemModel, Y: np.ndarray, theta: Theta) -> float:
    """Same quantity via the forward filter's prediction-error decomposition.

    Independent evaluation path used as an oracle for the dense form; it
    is also the cheap route for long horizons.
    """
    from . import em  # deferred: em imports this module at top level

    fr = em.kalman_filter(model, Y, theta)
    return float(np.sum(fr.loglik_terms))


def grad_gamma(model: SystemModel, Y: np.ndarray, theta: Theta) -> np.ndarray:
    """Analytic gradient of the log-likelihood with respect to gamma.

    d/dgamma_i of the covariance is the rank-K sum of outer products of
    the operator columns addressing input coordinate i, which collapses
    the standard Gaussian score into column-wise quantities.
    """
    y = _stacked_y(model, Y)
    validate_theta(model, theta)
    B = _stacked_operator(model, theta.z)
    g_tiled = np.tile(np.asarray(theta.gamma, dtype=float), model.K)
    ry = (B * g_tiled[None, :]) @ B.T
    sigma_total = 0.5 * (ry + ry.T) + model.sigma2 * np.eye(ry.shape[0])
    chol = np.linalg.cholesky(sigma_total)
    W = cho_solve((chol, True), B)          # Sigma^{-1} B, (Km, Kn)
    alpha = cho_solve((chol, True), y)      # Sigma^{-1} y, (Km,)
    col_trace = np.sum(B * W, axis=0)       # b_c' Sigma^{-1} b_c per column
    col_score = B.T @ alpha                 # b_c' Sigma^{-1} y per column
    per_col = 0.5 * (col_score**2 - col_trace)
    return per_col.reshape(model.K, model.n).sum(axis=0)


def grad_gamma_fd(
    model: SystemModel,
    Y: np.ndarray,
    theta: Theta,
    h: float | np.ndarray | None = None,
) -> np.ndarray:
    """Finite-difference gradient oracle.

    Central differences with per-coordinate step h_i (default
    1e-6*(1+gamma_i)); falls back to one-sided forward differences at
    coordinates where gamma_i - h_i would leave the nonnegative orthant.
    """
    validate_theta(model, theta)
    gamma = np.asarray(theta.gamma, dtype=float)
    n = model.n
    if h is None:
        h_vec = 1e-6 * (1.0 + gamma)
    else:
        h_vec = np.broadcast_to(np.asarray(h, dtype=float), (n,)).copy()
    if np.any(h_vec <= 0):
        raise ValueError("finite-difference step h must be positive")
    grad = np.zeros(n)
    for i in range(n):
        hi = h_vec[i]
        gp = gamma.copy()
        gp[i] += hi
        lp = log_likelihood(model, Y, Theta(gamma=gp, z=theta.z))
        if gamma[i] >= hi:
            gm = gamma.copy()
            gm[i] -= hi
            lm = log_likelihood(model, Y, Theta(gamma=gm, z=theta.z))
            grad[i] = (lp - lm) / (2.0 * hi)
        else:
            l0 = log_likelihood(model, Y, theta)
            grad[i] = (lp - l0) / hi
    return grad
