"""Comparison smoothers: constrained RTS, plain FFBS, the Rao-Blackwellized
Kitagawa smoother, and the Rao-Blackwellized joint backward simulator.

All of them share the forward machinery of :mod:`clgsmooth.forward`; the
joint backward simulator follows the same backward-kernel algebra as the
fully Rao-Blackwellized smoother but samples the linear state alongside the
nonlinear one, which makes its backward weights random (they depend on the
sampled linear states) at the price of extra Monte Carlo variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models as mod
from .exceptions import AllWeightsZero, SingularCovariance
from .forward import (
    DynSource,
    FilterOutput,
    MeasSource,
    categorical_draws,
    derived_rng,
    ess,
    meas_update_arrays,
    mixed_time_update_arrays,
    rbpf_run,
    systematic_resample,
    time_update_arrays,
    trans_logpdf_stack,
)
from .gauss import (
    LOG_2PI,
    bt,
    chol_psd_stack,
    normalize_log_weights,
    symmetrize,
)

__all__ = [
    "constrained_rts",
    "constrained_rts_many",
    "ffbs_run",
    "rbfs_run",
    "rbffjbs_run",
    "FFBSResult",
    "RBFSResult",
    "RBFFJBSResult",
]

_TAG_FFBS_FWD = 4
_TAG_FFBS_BWD = 5
_TAG_JBS = 6
_TAG_JBS_STEP = 7


# ---------------------------------------------------------------------------
# constrained RTS smoother
# ---------------------------------------------------------------------------


def constrained_rts_many(
    model,
    u_paths,
    y,
    meas_source: Optional[MeasSource] = None,
    dyn_source: Optional[DynSource] = None,
    path_indices=None,
):
    """Exact smoothed marginals of z given fixed nonlinear paths (batched).

    For mixed models the realized u_{t+1} joins time t's measurement set and
    the prediction runs through the decorrelated dynamics, which keeps the
    constrained system Markov.  Returns (means (K,T,n), covs (K,T,n,n)).
    """
    u_paths = np.asarray(u_paths, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    K, T, _ = u_paths.shape
    n_z = model.n_z
    flavor = model.flavor

    def meas_at(t):
        if meas_source is not None:
            if path_indices is not None and meas_source.recorded:
                return meas_source.at_indices(t, path_indices[:, t - 1])
            return meas_source.at_values(t, u_paths[:, t - 1])
        h, c, r = mod.eval_meas(model, u_paths[:, t - 1], t)
        return h, c, chol_psd_stack(r)

    def dyn_at(t):
        if flavor == "hier":
            return mod.eval_dyn(model, u_paths[:, t], t)
        if dyn_source is not None and dyn_source.recorded and path_indices is not None:
            return dyn_source.at_indices(t, path_indices[:, t - 1])
        return mod.eval_dyn(model, u_paths[:, t - 1], t)

    mean = np.broadcast_to(model.init_z.mean, (K, n_z)).copy()
    gamma = np.broadcast_to(model.init_z.sqrt_cov, (K, n_z, n_z)).copy()
    filt_m = np.zeros((K, T, n_z))
    filt_p = np.zeros((K, T, n_z, n_z))
    pred_m = np.zeros((K, T, n_z))
    pred_p = np.zeros((K, T, n_z, n_z))
    abars = np.zeros((K, T, n_z, n_z))

    for t in range(1, T + 1):
        h, c, rchol = meas_at(t)
        mean, gamma, _ = meas_update_arrays(mean, gamma, h, c, rchol, y[t - 1])
        if t < T:
            if flavor == "hier":
                f, a, fm = dyn_at(t)
                filt_m[:, t - 1] = mean
                filt_p[:, t - 1] = gamma @ bt(gamma)
                abars[:, t - 1] = a
                mean, gamma = time_update_arrays(mean, gamma, f, a, fm)
            else:
                from .forward import mixed_decorrelate

                g, b, gm, f, a, fm = dyn_at(t)
                fbar, abar, gnoise, q_chol, _ = mixed_decorrelate(
                    g, b, gm, f, a, fm, u_paths[:, t]
                )
                mean, gamma, _ = meas_update_arrays(
                    mean, gamma, g, b, q_chol, u_paths[:, t]
                )
                filt_m[:, t - 1] = mean
                filt_p[:, t - 1] = gamma @ bt(gamma)
                abars[:, t - 1] = abar
                mean, gamma = time_update_arrays(mean, gamma, fbar, abar, gnoise)
            pred_m[:, t] = mean
            pred_p[:, t] = symmetrize(gamma @ bt(gamma))
        else:
            filt_m[:, t - 1] = mean
            filt_p[:, t - 1] = gamma @ bt(gamma)

    sm = np.zeros((K, T, n_z))
    sp = np.zeros((K, T, n_z, n_z))
    sm[:, T - 1] = filt_m[:, T - 1]
    sp[:, T - 1] = filt_p[:, T - 1]
    for t in range(T - 1, 0, -1):
        cross = filt_p[:, t - 1] @ bt(abars[:, t - 1])  # P_t Ā_tᵀ
        gain = _rts_gain(cross, pred_p[:, t])
        diff_m = sm[:, t] - pred_m[:, t]
        diff_p = sp[:, t] - pred_p[:, t]
        sm[:, t - 1] = filt_m[:, t - 1] + np.einsum("...ij,...j->...i", gain, diff_m)
        sp[:, t - 1] = symmetrize(
            filt_p[:, t - 1] + gain @ diff_p @ bt(gain)
        )
    return sm, sp


def _rts_gain(cross, pred_p):
    """Smoother gain P Āᵀ (P_pred)⁻¹; flat (rank-deficient) predicted
    directions carry no information and get zero gain."""
    try:
        return bt(np.linalg.solve(pred_p, bt(cross)))
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(symmetrize(pred_p))
    if np.any(w < -1e-8 * np.maximum(np.abs(w[..., -1:]), 1e-300)):
        raise SingularCovariance("predicted covariance is indefinite")
    w_max = np.maximum(w[..., -1:], 1e-300)
    winv = np.where(w > 1e-12 * w_max, 1.0 / np.where(w > 0, w, 1.0), 0.0)
    pinv = (v * winv[..., None, :]) @ bt(v)
    return cross @ pinv


def constrained_rts(model, u_path, y, **kwargs):
    """Single-path constrained RTS; returns (means (T,n), covs (T,n,n))."""
    sm, sp = constrained_rts_many(model, np.asarray(u_path, dtype=float)[None],
                                  y, **kwargs)
    return sm[0], sp[0]


# ---------------------------------------------------------------------------
# plain FFBS on the joint state
# ---------------------------------------------------------------------------


@dataclass
class FFBSResult:
    u: np.ndarray  # (M, T, n_u)
    z: np.ndarray  # (M, T, n_z)


def _joint_transition_logpdf(model, u_next, z_next, u_cur, z_cur, t):
    """log p(x_{t+1} | x_t) batched; hier factorizes, mixed is jointly Gaussian.

    Rank-deficient conditional covariances are evaluated on their range with
    an eigenvalue cut; candidates whose residual leaves the range get -inf.
    """
    if model.flavor == "hier":
        lp = trans_logpdf_stack(model, u_next, u_cur, t)
        f, a, fm = mod.eval_dyn(model, u_next, t)
        mean = f + np.einsum("...ij,...j->...i", a, z_cur)
        cov = fm @ bt(fm)
        return lp + _robust_mvn_logpdf(z_next, mean, cov)
    g, b, gm, f, a, fm = mod.eval_dyn(model, u_cur, t)
    mean_u = g + np.einsum("...ij,...j->...i", b, z_cur)
    mean_z = f + np.einsum("...ij,...j->...i", a, z_cur)
    mean = np.concatenate([mean_u, mean_z], axis=-1)
    noise = np.concatenate([gm, fm], axis=-2)
    cov = noise @ bt(noise)
    x_next = np.concatenate([u_next, z_next], axis=-1)
    return _robust_mvn_logpdf(x_next, mean, cov)


def _robust_mvn_logpdf(x, mean, cov, rtol=1e-10):
    """Gaussian log-density tolerant of PSD-singular covariance (batched)."""
    try:
        chol = np.linalg.cholesky(cov)
        diff = np.asarray(x) - np.asarray(mean)
        alpha = np.linalg.solve(chol, diff[..., None])[..., 0]
        logdiag = np.log(np.einsum("...ii->...i", chol))
        n = cov.shape[-1]
        return (
            -0.5 * np.sum(alpha**2, axis=-1)
            - np.sum(logdiag, axis=-1)
            - 0.5 * n * LOG_2PI
        )
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(symmetrize(cov))
    scale = np.maximum(w[..., -1:], 1e-300)
    keep = w > rtol * scale
    diff = np.asarray(x) - np.asarray(mean)
    proj = np.einsum("...ji,...j->...i", v, diff)  # coordinates in eigenbasis
    w_safe = np.where(keep, w, 1.0)
    quad = np.sum(np.where(keep, proj**2 / w_safe, 0.0), axis=-1)
    resid = np.sum(np.where(keep, 0.0, proj**2), axis=-1)
    logdet = np.sum(np.where(keep, np.log(w_safe), 0.0), axis=-1)
    rank = np.sum(keep, axis=-1)
    out = -0.5 * (quad + logdet + rank * LOG_2PI)
    tol = np.sqrt(rtol) * np.sqrt(np.maximum(scale[..., 0], 1e-300))
    return np.where(np.sqrt(resid) <= tol * (1.0 + np.sqrt(quad)), out, -np.inf)


def ffbs_run(model, y, n_particles: int, n_traj: int, seed: int = 0,
             resample: str = "ess"):
    """Plain forward filtering/backward simulation on the joint state.

    Bootstrap proposal, incremental weight p(y_t | x_t); backward weights
    w_t^i p(x̃_{t+1} | x_t^i).  Returns an :class:`FFBSResult` with the
    sampled (u, z) trajectories.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    N = int(n_particles)
    M = int(n_traj)
    n_u, n_z = model.n_u, model.n_z

    us = np.zeros((T, N, n_u))
    zs = np.zeros((T, N, n_z))
    logws = np.zeros((T, N))
    weights = np.zeros((T, N))

    rng0 = derived_rng(seed, _TAG_FFBS_FWD, 0)
    us[0] = model.init_u.sample(rng0, N)
    zs[0] = model.init_z.mean + rng0.standard_normal((N, n_z)) @ model.init_z.sqrt_cov.T
    logw = _meas_loglik(model, us[0], zs[0], y[0], 1)
    weights[0], lse = normalize_log_weights(logw)
    _check_finite(lse, 1, logw)

    for ti in range(1, T):
        w_prev = weights[ti - 1]
        do_res = resample == "always" or (resample == "ess" and ess(w_prev) < N / 2)
        if do_res and N > 1:
            idx = systematic_resample(w_prev, derived_rng(seed, _TAG_FFBS_FWD,
                                                          2 * ti))
            base = np.zeros(N)
        else:
            idx = np.arange(N)
            base = np.log(np.maximum(w_prev, 1e-300))
        rng_t = derived_rng(seed, _TAG_FFBS_FWD, 2 * ti + 1)
        u_prev, z_prev = us[ti - 1][idx], zs[ti - 1][idx]
        if model.flavor == "hier":
            u_new = _sample_trans(model, rng_t, u_prev, ti)
            f, a, fm = mod.eval_dyn(model, u_new, ti)
            z_new = f + np.einsum("...ij,...j->...i", a, z_prev) + np.einsum(
                "...ij,...j->...i", fm, rng_t.standard_normal((N, model.n_v))
            )
        else:
            g, b, gm, f, a, fm = mod.eval_dyn(model, u_prev, ti)
            v = rng_t.standard_normal((N, model.n_v))
            u_new = g + np.einsum("...ij,...j->...i", b, z_prev) + np.einsum(
                "...ij,...j->...i", gm, v
            )
            z_new = f + np.einsum("...ij,...j->...i", a, z_prev) + np.einsum(
                "...ij,...j->...i", fm, v
            )
        us[ti], zs[ti] = u_new, z_new
        logw = base + _meas_loglik(model, u_new, z_new, y[ti], ti + 1)
        weights[ti], lse = normalize_log_weights(logw)
        _check_finite(lse, ti + 1, logw)

    # backward simulation on the joint state
    children = np.random.SeedSequence([int(seed), _TAG_FFBS_BWD]).spawn(M)
    uniforms = np.stack([np.random.default_rng(ch).uniform(size=T)
                         for ch in children])
    u_out = np.zeros((M, T, n_u))
    z_out = np.zeros((M, T, n_z))
    j = categorical_draws(np.broadcast_to(weights[T - 1], (M, N)),
                          uniforms[:, T - 1])
    u_out[:, T - 1] = us[T - 1][j]
    z_out[:, T - 1] = zs[T - 1][j]
    logw_hist = np.log(np.maximum(weights, 1e-300))
    for t in range(T - 1, 0, -1):
        lp = _joint_transition_logpdf(
            model,
            u_out[:, t][:, None, :],
            z_out[:, t][:, None, :],
            us[t - 1][None],
            zs[t - 1][None],
            t,
        )
        logw = logw_hist[t - 1][None, :] + lp
        wbar, lse = normalize_log_weights(logw, axis=-1)
        if not np.all(np.isfinite(lse)):
            raise AllWeightsZero(
                f"all FFBS backward weights underflowed at t={t}",
                log_weights=logw,
            )
        j = categorical_draws(wbar, uniforms[:, t - 1])
        u_out[:, t - 1] = us[t - 1][j]
        z_out[:, t - 1] = zs[t - 1][j]
    return FFBSResult(u=u_out, z=z_out)


def _sample_trans(model, rng, u_stack, t):
    if model.vectorized:
        return np.asarray(model.trans_sample(rng, u_stack, t), dtype=float)
    return np.stack(
        [np.atleast_1d(model.trans_sample(rng, u, t)) for u in u_stack]
    ).astype(float)


def _meas_loglik(model, u_stack, z_stack, y_t, t):
    h, c, r = mod.eval_meas(model, u_stack, t)
    mean = h + np.einsum("...ij,...j->...i", c, z_stack)
    return _robust_mvn_logpdf(y_t, mean, r)


def _check_finite(lse, t, logw):
    if not np.all(np.isfinite(np.atleast_1d(lse))):
        raise AllWeightsZero(f"all weights underflowed at t={t}",
                             log_weights=logw)


# ---------------------------------------------------------------------------
# Rao-Blackwellized Kitagawa smoother
# ---------------------------------------------------------------------------


@dataclass
class RBFSResult:
    u: np.ndarray  # (N, T, n_u) ancestral paths of the final cloud
    weights: np.ndarray  # (N,) final forward weights
    index_paths: np.ndarray  # (N, T)
    lin_means: np.ndarray  # (N, T, n_z)
    lin_covs: np.ndarray  # (N, T, n_z, n_z)


def rbfs_run(model, y, n_particles: int, seed: int = 0,
             filt: Optional[FilterOutput] = None, resample: str = "ess",
             measurement_fn=None):
    """Kitagawa-style smoother: surviving RBPF ancestral paths with final
    weights, refined by constrained RTS along each unique path."""
    if filt is None:
        filt = rbpf_run(model, y, n_particles, seed=seed, resample=resample,
                        measurement_fn=measurement_fn,
                        record=measurement_fn is not None)
    idx_paths = filt.ancestral_paths()  # (N, T)
    T, N = filt.T, filt.N
    u_paths = np.stack(
        [filt.particles[t][idx_paths[:, t]] for t in range(T)], axis=1
    )
    uniq, inverse = np.unique(idx_paths, axis=0, return_inverse=True)
    meas_source = MeasSource(model, filt)
    dyn_source = DynSource(model, filt)
    u_uniq = np.stack(
        [filt.particles[t][uniq[:, t]] for t in range(T)], axis=1
    )
    sm, sp = constrained_rts_many(
        model, u_uniq, filt.y, meas_source=meas_source, dyn_source=dyn_source,
        path_indices=uniq,
    )
    return RBFSResult(
        u=u_paths,
        weights=filt.weights[T - 1].copy(),
        index_paths=idx_paths,
        lin_means=sm[inverse],
        lin_covs=sp[inverse],
    )


# ---------------------------------------------------------------------------
# Rao-Blackwellized joint backward simulator
# ---------------------------------------------------------------------------


@dataclass
class RBFFJBSResult:
    u: np.ndarray  # (M, T, n_u)
    z_samples: np.ndarray  # (M, T, n_z) jointly sampled linear states
    index_paths: np.ndarray  # (M, T)
    lin_means: np.ndarray  # (M, T, n_z) constrained-RTS refinement
    lin_covs: np.ndarray  # (M, T, n_z, n_z)


def _plugin_supported(model, filt):
    """The sampled-z backward weights need a full-rank joint transition
    noise covariance; probe it once at representative particle values."""
    try:
        if filt.flavor == "hier":
            _, _, fm = mod.eval_dyn(model, filt.particles[-1][:2], filt.T - 1)
            np.linalg.cholesky(np.asarray(fm) @ bt(np.asarray(fm)))
        else:
            blocks = DynSource(model, filt).at_indices(max(filt.T - 1, 1),
                                                       slice(0, 2))
            noise = np.concatenate([blocks[2], blocks[5]], axis=-2)
            np.linalg.cholesky(noise @ bt(noise))
        return True
    except np.linalg.LinAlgError:
        return False


def rbffjbs_run(model, y, n_particles: int, n_traj: int, seed: int = 0,
                filt: Optional[FilterOutput] = None, resample: str = "ess",
                measurement_fn=None, plugin_weights: bool = False):
    """Joint backward simulation of (u, z) from an RBPF, then RTS refinement.

    At each backward step the already-sampled next state (u_{t+1}, z_{t+1})
    is scored against every particle and one pair (u_t, z_t) is selected to
    extend the trajectory.  The weights depend on the sampled linear states
    (that dependence is what distinguishes the method from fully
    Rao-Blackwellized backward weights and costs extra Monte Carlo
    variance).  Two weight variants are implemented:

    * default: w_t^i times the joint predictive density of the next state
      with z_t marginalized under particle i's filter Gaussian; z_t is then
      drawn from the exact conditional given the selected particle and the
      next state.  Well defined for rank-deficient transition noise and
      stable for stiff (integrated) noise covariances.
    * ``plugin_weights=True``: draw candidate z_t^i ~ N(z̄_i, P_i) and plug
      them into the joint transition density.  This requires full-rank
      joint noise and degenerates on stiff noise covariances, where the
      plugged density concentrates on whichever candidate sampled closest;
      it falls back to the default variant when the noise is rank
      deficient.
    """
    if filt is None:
        filt = rbpf_run(model, y, n_particles, seed=seed, resample=resample,
                        measurement_fn=measurement_fn,
                        record=measurement_fn is not None)
    T, N = filt.T, filt.N
    M = int(n_traj)
    n_u, n_z = filt.particles.shape[2], filt.means.shape[2]
    flavor = filt.flavor
    plug_in = plugin_weights and _plugin_supported(model, filt)

    children = np.random.SeedSequence([int(seed), _TAG_JBS]).spawn(M)
    gens = [np.random.default_rng(ch) for ch in children]
    uniforms = np.stack([g.uniform(size=T) for g in gens])
    normals = np.stack([g.standard_normal((T, n_z)) for g in gens])

    u_out = np.zeros((M, T, n_u))
    z_out = np.zeros((M, T, n_z))
    idx_out = np.zeros((M, T), dtype=np.int64)
    rows = np.arange(M)

    j = categorical_draws(np.broadcast_to(filt.weights[T - 1], (M, N)),
                          uniforms[:, T - 1])
    idx_out[:, T - 1] = j
    u_out[:, T - 1] = filt.particles[T - 1][j]
    z_out[:, T - 1] = filt.means[T - 1][j] + np.einsum(
        "...ij,...j->...i", filt.sqrt_covs[T - 1][j], normals[:, T - 1]
    )
    logw_hist = np.log(np.maximum(filt.weights, 1e-300))

    for t in range(T - 1, 0, -1):
        if plug_in:
            _rbffjbs_plugin_step(model, filt, t, u_out, z_out, idx_out,
                                 uniforms, logw_hist, seed)
            continue
        means_t = filt.means[t - 1]  # (N, n_z)
        gammas_t = filt.sqrt_covs[t - 1]
        p_t = gammas_t @ bt(gammas_t)
        if flavor == "hier":
            f, a, fm = mod.eval_dyn(model, u_out[:, t], t)  # per trajectory
            lp_u = trans_logpdf_stack(
                model, u_out[:, t][:, None, :], filt.particles[t - 1][None], t
            )
            pred_mean = f[:, None] + np.einsum(
                "mij,nj->mni", a, means_t
            )
            s = np.einsum("mij,njk,mlk->mnil", a, p_t, a) + (fm @ bt(fm))[:, None]
            target = z_out[:, t][:, None, :]
            cross = np.einsum("nij,mkj->mnik", p_t, a)  # P Ãᵀ
        else:
            g, b, gm, f, a, fm = mod.eval_dyn(model, filt.particles[t - 1], t)
            amat = np.concatenate([b, a], axis=-2)  # (N, n_x, n_z)
            noise = np.concatenate([gm, fm], axis=-2)
            pred_mean_n = np.concatenate(
                [
                    g + np.einsum("nij,nj->ni", b, means_t),
                    f + np.einsum("nij,nj->ni", a, means_t),
                ],
                axis=-1,
            )  # (N, n_x)
            pred_mean = pred_mean_n[None]
            s = (amat @ p_t @ bt(amat) + noise @ bt(noise))[None]
            lp_u = 0.0
            target = np.concatenate([u_out[:, t], z_out[:, t]], axis=-1)[:, None, :]
            cross = (p_t @ bt(amat))[None]  # (1, N, n_z, n_x)

        s = symmetrize(s)
        try:
            s_chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            s_chol = None  # rank-deficient predictive; pseudo-inverse path
        if s_chol is not None:
            lp_target = _robust_chol_logpdf(target, pred_mean, s_chol)
        else:
            lp_target = _robust_mvn_logpdf(target, pred_mean, s)
        logw = logw_hist[t - 1][None] + lp_u + lp_target
        wbar, lse = normalize_log_weights(logw, axis=-1)
        if not np.all(np.isfinite(lse)):
            raise AllWeightsZero(
                f"all joint backward weights underflowed at t={t}",
                log_weights=logw,
            )
        j = categorical_draws(wbar, uniforms[:, t - 1])
        idx_out[:, t - 1] = j
        u_out[:, t - 1] = filt.particles[t - 1][j]

        # conditional draw of z_t given the selected particle and the next state
        def _take(arr):
            return arr[0][j] if arr.shape[0] == 1 else arr[rows, j]

        sel_mean = means_t[j]  # (M, n_z)
        sel_cross = _take(cross)
        sel_pred = _take(pred_mean)
        sel_p = p_t[j]
        resid = target[:, 0, :] - sel_pred
        if s_chol is not None:
            sel_s_chol = _take(s_chol)
            alpha = np.linalg.solve(sel_s_chol, resid[..., None])[..., 0]
            half_gain = np.linalg.solve(sel_s_chol, bt(sel_cross))
            cond_mean = sel_mean + np.einsum("...ji,...j->...i", half_gain, alpha)
            cond_cov = symmetrize(sel_p - bt(half_gain) @ half_gain)
        else:
            sel_s = _take(s)
            w, v = np.linalg.eigh(sel_s)
            w_max = np.maximum(w[..., -1:], 1e-300)
            winv = np.where(w > 1e-10 * w_max, 1.0 / np.where(w > 0, w, 1.0), 0.0)
            s_pinv = (v * winv[..., None, :]) @ bt(v)
            gain = sel_cross @ s_pinv
            cond_mean = sel_mean + np.einsum(
                "...ij,...j->...i", gain, resid
            )
            cond_cov = symmetrize(sel_p - gain @ bt(sel_cross))
        cond_chol = chol_psd_stack(cond_cov)
        z_out[:, t - 1] = cond_mean + np.einsum(
            "...ij,...j->...i", cond_chol, normals[:, t - 1]
        )

    meas_source = MeasSource(model, filt)
    dyn_source = DynSource(model, filt)
    sm, sp = constrained_rts_many(
        model, u_out, filt.y, meas_source=meas_source, dyn_source=dyn_source,
        path_indices=idx_out,
    )
    return RBFFJBSResult(
        u=u_out, z_samples=z_out, index_paths=idx_out, lin_means=sm, lin_covs=sp
    )


def _rbffjbs_plugin_step(model, filt, t, u_out, z_out, idx_out, uniforms,
                         logw_hist, seed):
    """One joint backward step with per-candidate sampled linear states."""
    M, _, n_z = z_out.shape
    rows = np.arange(M)
    rng_t = derived_rng(seed, _TAG_JBS_STEP, t)
    eps = rng_t.standard_normal((M, filt.N, n_z))
    z_cand = filt.means[t - 1][None] + np.einsum(
        "nij,mnj->mni", filt.sqrt_covs[t - 1], eps
    )
    if filt.flavor == "hier":
        f, a, fm = mod.eval_dyn(model, u_out[:, t], t)  # per trajectory
        lp_u = trans_logpdf_stack(
            model, u_out[:, t][:, None, :], filt.particles[t - 1][None], t
        )
        mean_z = np.asarray(f)[:, None] + np.einsum("mij,mnj->mni", a, z_cand)
        noise_chol = np.linalg.cholesky(
            symmetrize(np.asarray(fm) @ bt(np.asarray(fm)))
        )[:, None]
        lp_z = _robust_chol_logpdf(z_out[:, t][:, None, :], mean_z, noise_chol)
        logw = logw_hist[t - 1][None] + lp_u + lp_z
    else:
        g, b, gm, f, a, fm = mod.eval_dyn(model, filt.particles[t - 1], t)
        mean_u = np.asarray(g)[None] + np.einsum("nij,mnj->mni", b, z_cand)
        mean_zn = np.asarray(f)[None] + np.einsum("nij,mnj->mni", a, z_cand)
        mean_x = np.concatenate([mean_u, mean_zn], axis=-1)
        noise = np.concatenate([gm, fm], axis=-2)
        noise_chol = np.linalg.cholesky(symmetrize(noise @ bt(noise)))[None]
        target = np.concatenate([u_out[:, t], z_out[:, t]], axis=-1)[:, None, :]
        logw = logw_hist[t - 1][None] + _robust_chol_logpdf(
            target, mean_x, noise_chol
        )
    wbar, lse = normalize_log_weights(logw, axis=-1)
    if not np.all(np.isfinite(lse)):
        raise AllWeightsZero(
            f"all joint backward weights underflowed at t={t}", log_weights=logw
        )
    jsel = categorical_draws(wbar, uniforms[:, t - 1])
    idx_out[:, t - 1] = jsel
    u_out[:, t - 1] = filt.particles[t - 1][jsel]
    z_out[:, t - 1] = z_cand[rows, jsel]


def _robust_chol_logpdf(x, mean, chol):
    diff = np.asarray(x) - np.asarray(mean)
    alpha = np.linalg.solve(chol, diff[..., None])[..., 0]
    diag = np.einsum("...ii->...i", chol)
    n = chol.shape[-1]
    safe = diag > 1e-150
    logdiag = np.log(np.where(safe, diag, 1.0))
    out = (
        -0.5 * np.sum(alpha**2, axis=-1)
        - np.sum(logdiag, axis=-1)
        - 0.5 * n * LOG_2PI
    )
    return np.where(np.all(safe, axis=-1), out, -np.inf)
