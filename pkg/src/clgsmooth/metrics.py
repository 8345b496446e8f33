"""Benchmark metrics: time-averaged RMSE, unique-particle counts, and the
average posterior log-density of the true state."""

from __future__ import annotations

import numpy as np

from .gauss import LOG_2PI, logsumexp

__all__ = ["rmse", "unique_particles", "posterior_logdensity"]


def rmse(estimates, truth) -> float:
    """sqrt of the time-mean squared (euclidean) error of the estimates."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.ndim == 1:
        estimates = estimates[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    err = estimates - truth
    return float(np.sqrt(np.mean(np.sum(err**2, axis=-1))))


def unique_particles(u_trajs) -> np.ndarray:
    """Number of distinct nonlinear-state values per time step.

    ``u_trajs`` has shape (M, T, n_u); duplicates arise from backward draws
    selecting the same forward particle, so exact equality is the right
    notion of distinctness.
    """
    u_trajs = np.asarray(u_trajs, dtype=float)
    M, T, _ = u_trajs.shape
    return np.array(
        [len(np.unique(u_trajs[:, t, :], axis=0)) for t in range(T)],
        dtype=np.int64,
    )


def posterior_logdensity(lin_means, lin_covs, z_true, weights=None) -> np.ndarray:
    """Log of the mixture density (1/M) sum_j N(z_t; mean_j, cov_j) at the
    true state, per time step, via log-sum-exp.

    ``weights`` optionally replaces the uniform mixture weights (used by the
    Kitagawa smoother, whose trajectories carry the final forward weights).
    """
    means = np.asarray(lin_means, dtype=float)  # (M, T, n)
    covs = np.asarray(lin_covs, dtype=float)  # (M, T, n, n)
    z_true = np.asarray(z_true, dtype=float)  # (T, n)
    M, T, n = means.shape
    chol = np.linalg.cholesky(covs)
    diff = z_true[None] - means
    alpha = np.linalg.solve(chol, diff[..., None])[..., 0]
    logdet_half = np.sum(np.log(np.einsum("...ii->...i", chol)), axis=-1)
    comp = -0.5 * np.sum(alpha**2, axis=-1) - logdet_half - 0.5 * n * LOG_2PI
    if weights is None:
        logw = np.full(M, -np.log(M))
    else:
        w = np.asarray(weights, dtype=float)
        logw = np.log(np.maximum(w / w.sum(), 1e-300))
    return logsumexp(comp + logw[:, None], axis=0)
