"""Backward information filter and Rao-Blackwellized backward simulation.

The backward statistics (Omega_t, lambda_t, log Z_t) represent
``p(y_{t+1:T}, u_{t+1:T} | z_t, u_t)`` as an unnormalized Gaussian quadratic
in z_t.  The recursions here maintain them exactly, including the log
prefactor, so that

    exp(-(zᵀ Omega_t z - 2 lambda_tᵀ z)/2 + log_z)

equals the suffix predictive density evaluated at the stored nonlinear path
(a property the test suite checks against independent suffix Kalman
filters).  Hierarchical models share one backward prediction across all
forward particles; mixed models predict per particle.

All recursions come in a plain form and a square-root form; the square-root
form propagates a factor S with Omega = S Sᵀ through QR factorizations.
Weight and prefactor arithmetic stays in the log domain with max
subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import models as mod
from .exceptions import AllWeightsZero, DimensionMismatch, QNotPD, RNotPD
from .forward import (
    DynSource,
    FilterOutput,
    MeasSource,
    categorical_draws,
    derived_rng,
    meas_update_arrays,
    mixed_time_update_arrays,
    time_update_arrays,
    trans_logpdf_stack,
)
from .gauss import (
    InfoPotential,
    LOG_2PI,
    bt,
    chol_logdet,
    cho_solve_stack,
    normalize_log_weights,
    qr_upper,
    quad_form,
    symmetrize,
    _fuse_info_arrays,
    chol_psd_stack,
)

__all__ = [
    "BackwardTrajectory",
    "bwd_init",
    "bwd_meas_update",
    "bwd_predict_hier",
    "bwd_predict_mixed",
    "sqrt_bwd_meas_update",
    "sqrt_bwd_predict_hier",
    "sqrt_bwd_predict_mixed",
    "bwd_weights",
    "backward_messages",
    "backward_simulate",
    "smooth_linear",
    "smooth_linear_many",
    "mcmc_backward_simulate",
    "BootstrapProposal",
    "GridProposal",
]

_TAG_BACKWARD = 2
_TAG_MCMC = 3


@dataclass
class BackwardTrajectory:
    """One sampled nonlinear path with its stored backward statistics.

    ``omegas[t], lams[t], log_zs[t]`` are the *predicted* backward message
    at time t+1 (1-based), i.e. the potential for p(y_{t+2:T}, ...); the
    final entry is the empty message (zeros).  ``indices`` holds the forward
    particle index selected at each time, or -1 when the value came from a
    continuous MCMC proposal.  Smoothed linear marginals are filled in by
    :func:`smooth_linear`.
    """

    u_path: np.ndarray  # (T, n_u)
    omegas: np.ndarray  # (T, n_z, n_z)
    lams: np.ndarray  # (T, n_z)
    log_zs: np.ndarray  # (T,)
    indices: np.ndarray  # (T,) int
    smoothed_means: Optional[np.ndarray] = None  # (T, n_z)
    smoothed_sqrt_covs: Optional[np.ndarray] = None  # (T, n_z, n_z)

    @property
    def T(self) -> int:
        return self.u_path.shape[0]


# ---------------------------------------------------------------------------
# array cores (broadcast over leading batch dimensions)
# ---------------------------------------------------------------------------


def _meas_const(h, c, rchol, y):
    """Log prefactor of N(y; h + Cz, R) that does not involve z."""
    resid = y - h
    alpha = np.linalg.solve(rchol, resid[..., None])[..., 0]
    n_y = rchol.shape[-1]
    return -0.5 * (
        n_y * LOG_2PI + chol_logdet(rchol) + np.sum(alpha**2, axis=-1)
    )


def _meas_increment(h, c, rchol, y):
    w = cho_solve_stack(rchol, c)  # R⁻¹ C
    d_omega = symmetrize(bt(c) @ w)
    d_lam = np.einsum("...ij,...i->...j", w, y - h)
    return d_omega, d_lam, _meas_const(h, c, rchol, y)


def _init_arrays(h, c, rchol, y):
    return _meas_increment(h, c, rchol, y)


def _meas_arrays(omega, lam, log_z, h, c, rchol, y):
    d_omega, d_lam, const = _meas_increment(h, c, rchol, y)
    return symmetrize(omega + d_omega), lam + d_lam, log_z + const


def _sqrt_meas_arrays(sq_omega, lam, log_z, h, c, rchol, y):
    """Square-root measurement update: QR of the stacked factor."""
    n = sq_omega.shape[-1]
    n_y = rchol.shape[-1]
    w = cho_solve_stack(rchol, c)
    d_lam = np.einsum("...ij,...i->...j", w, y - h)
    half = np.linalg.solve(rchol, c)  # R^{-1/2} C with R^{1/2} = chol(R)
    lead = np.broadcast_shapes(sq_omega.shape[:-2], half.shape[:-2])
    pre = np.zeros(lead + (n + n_y, n))
    pre[..., :n, :] = bt(sq_omega)
    pre[..., n:, :] = half
    sq_new = bt(qr_upper(pre))
    return sq_new, lam + d_lam, log_z + _meas_const(h, c, rchol, y)


def _predict_hier_arrays(f, a, fmat, omh, lamh):
    """Plain backward prediction, hierarchical model.

    Returns (Omega_t, lambda_t, lemma_const) where lemma_const is the part
    of the log prefactor shared by all forward particles; the per-particle
    transition density log p(u_{t+1} | u_t^i) is added by the caller.
    """
    eps = lamh - np.einsum("...ij,...j->...i", omh, f)
    om_f = omh @ fmat  # Ω̂ F
    k = fmat.shape[-1]
    mmat = symmetrize(bt(fmat) @ om_f) + np.eye(k)  # M = FᵀΩ̂F + I ⪰ I
    lm = np.linalg.cholesky(mmat)
    ft_eps = np.einsum("...ji,...j->...i", fmat, eps)
    sol_eps = cho_solve_stack(lm, ft_eps)
    kmat = cho_solve_stack(lm, bt(om_f))
    core = symmetrize(omh - om_f @ kmat)  # (I - Ω̂ F M⁻¹ Fᵀ) Ω̂
    omega = symmetrize(bt(a) @ core @ a)
    vec = eps - np.einsum("...ij,...j->...i", om_f, sol_eps)
    lam = np.einsum("...ji,...j->...i", a, vec)
    lemma_const = -0.5 * chol_logdet(lm) - 0.5 * (
        quad_form(f, omh)
        - 2.0 * np.einsum("...i,...i->...", lamh, f)
        - np.einsum("...i,...i->...", ft_eps, sol_eps)
    )
    return omega, lam, lemma_const


def _sqrt_predict_hier_arrays(f, a, fmat, sq_omh, lamh):
    """Square-root backward prediction, hierarchical model (QR form)."""
    n = sq_omh.shape[-1]
    k = fmat.shape[-1]
    st = bt(sq_omh)  # Ω̂^{T/2}
    stf = st @ fmat
    sta = st @ a
    lead = np.broadcast_shapes(stf.shape[:-2], sta.shape[:-2])
    pre = np.zeros(lead + (k + n, k + n))
    pre[..., :k, :k] = np.eye(k)
    pre[..., k:, :k] = stf
    pre[..., k:, k:] = sta
    r = qr_upper(pre)
    r1 = r[..., :k, :k]
    r2 = r[..., :k, k:]
    sq_omega = bt(r[..., k:, k:])

    v0 = np.einsum("...ij,...j->...i", st, f)  # Ω̂^{T/2} f
    omh_f = np.einsum("...ij,...j->...i", sq_omh, v0)
    eps = lamh - omh_f
    ft_eps = np.einsum("...ji,...j->...i", fmat, eps)
    y1 = np.linalg.solve(bt(r1), ft_eps[..., None])[..., 0]  # R1⁻ᵀ Fᵀ ε
    lam = np.einsum("...ji,...j->...i", a, eps) - np.einsum(
        "...ji,...j->...i", r2, y1
    )
    logdet_m = 2.0 * np.sum(np.log(np.einsum("...ii->...i", r1)), axis=-1)
    lemma_const = -0.5 * logdet_m - 0.5 * (
        np.sum(v0**2, axis=-1)
        - 2.0 * np.einsum("...i,...i->...", lamh, f)
        - np.sum(y1**2, axis=-1)
    )
    return sq_omega, lam, lemma_const


def _mixed_parts(g, b, gmat, f, a, fmat, u_next):
    q = symmetrize(gmat @ bt(gmat))
    try:
        q_chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise QNotPD("G Gᵀ is not positive definite") from exc
    qi_g = cho_solve_stack(q_chol, gmat)
    fgq = fmat @ bt(qi_g)  # F Gᵀ Q⁻¹
    du = u_next - g
    qi_du = cho_solve_stack(q_chol, du)
    fbar = f + np.einsum("...ij,...j->...i", fgq, du)
    abar = a - fgq @ b
    n_v = gmat.shape[-1]
    pi = np.eye(n_v) - symmetrize(bt(gmat) @ qi_g)
    gam = fmat @ pi  # Γ = F Π
    return q_chol, du, qi_du, fbar, abar, gam


def _predict_mixed_arrays(g, b, gmat, f, a, fmat, u_next, omh, lamh):
    """Plain backward prediction, mixed model.

    Returns (Omega_t, lambda_t, log_z_step); log_z_step carries the
    |Q|^{-1/2} |M|^{-1/2} exp(-tau/2) prefactor, including the 2*pi
    constant of the u-transition density.
    """
    q_chol, du, qi_du, fbar, abar, gam = _mixed_parts(g, b, gmat, f, a, fmat, u_next)
    n_u = g.shape[-1]
    k = gam.shape[-1]
    eps = lamh - np.einsum("...ij,...j->...i", omh, fbar)
    om_g = omh @ gam
    mmat = symmetrize(bt(gam) @ om_g) + np.eye(k)
    lm = np.linalg.cholesky(mmat)
    gt_eps = np.einsum("...ji,...j->...i", gam, eps)
    sol_eps = cho_solve_stack(lm, gt_eps)
    kmat = cho_solve_stack(lm, bt(om_g))
    core = symmetrize(omh - om_g @ kmat)
    qi_b = cho_solve_stack(q_chol, b)
    omega = symmetrize(bt(abar) @ core @ abar + bt(b) @ qi_b)
    vec = eps - np.einsum("...ij,...j->...i", om_g, sol_eps)
    # the u-transition factor contributes Bᵀ Q⁻¹ (u' - g) to the linear term
    lam = np.einsum("...ji,...j->...i", abar, vec) + np.einsum(
        "...ji,...j->...i", b, qi_du
    )
    tau = (
        np.einsum("...i,...i->...", du, qi_du)
        + quad_form(fbar, omh)
        - 2.0 * np.einsum("...i,...i->...", lamh, fbar)
        - np.einsum("...i,...i->...", gt_eps, sol_eps)
    )
    log_z_step = -0.5 * (
        n_u * LOG_2PI + chol_logdet(q_chol) + chol_logdet(lm) + tau
    )
    return omega, lam, log_z_step


def _sqrt_predict_mixed_arrays(g, b, gmat, f, a, fmat, u_next, sq_omh, lamh):
    """Square-root backward prediction, mixed model (three-block QR)."""
    q_chol, du, qi_du, fbar, abar, gam = _mixed_parts(g, b, gmat, f, a, fmat, u_next)
    n_u = g.shape[-1]
    n = sq_omh.shape[-1]
    k = gam.shape[-1]
    st = bt(sq_omh)
    stg = st @ gam
    sta = st @ abar
    qc_b = np.linalg.solve(q_chol, b)  # Q^{-1/2} B
    lead = np.broadcast_shapes(stg.shape[:-2], sta.shape[:-2], qc_b.shape[:-2])
    pre = np.zeros(lead + (k + n + n_u, k + n))
    pre[..., :k, :k] = np.eye(k)
    pre[..., k : k + n, :k] = stg
    pre[..., k : k + n, k:] = sta
    pre[..., k + n :, k:] = qc_b
    r = qr_upper(pre)
    r1 = r[..., :k, :k]
    r2 = r[..., :k, k:]
    sq_omega = bt(r[..., k : k + n, k:])

    v0 = np.einsum("...ij,...j->...i", st, fbar)
    eps = lamh - np.einsum("...ij,...j->...i", sq_omh, v0)
    gt_eps = np.einsum("...ji,...j->...i", gam, eps)
    y1 = np.linalg.solve(bt(r1), gt_eps[..., None])[..., 0]
    lam = (
        np.einsum("...ji,...j->...i", abar, eps)
        - np.einsum("...ji,...j->...i", r2, y1)
        + np.einsum("...ji,...j->...i", b, qi_du)
    )
    logdet_m = 2.0 * np.sum(np.log(np.einsum("...ii->...i", r1)), axis=-1)
    tau = (
        np.einsum("...i,...i->...", du, qi_du)
        + np.sum(v0**2, axis=-1)
        - 2.0 * np.einsum("...i,...i->...", lamh, fbar)
        - np.sum(y1**2, axis=-1)
    )
    log_z_step = -0.5 * (
        n_u * LOG_2PI + chol_logdet(q_chol) + logdet_m + tau
    )
    return sq_omega, lam, log_z_step


def log_weight_term(means, gammas, omega, lam):
    """-log|Λ|/2 - η/2 with Λ = ΓᵀΩΓ + I; broadcasts over batch dims.

    This is the Gaussian integral of the backward potential against the
    per-particle filter density N(z̄, Γ Γᵀ).  Λ ⪰ I, so one Cholesky gives
    both the log-determinant and the whitened norm.
    """
    om_means = (omega @ means[..., None])[..., 0]
    mvec = lam - om_means
    lam_mat = bt(gammas) @ (omega @ gammas)
    n = lam_mat.shape[-1]
    lc = np.linalg.cholesky(symmetrize(lam_mat) + np.eye(n))
    gtm = (bt(gammas) @ mvec[..., None])[..., 0]
    white = np.linalg.solve(lc, gtm[..., None])[..., 0]
    eta = (
        np.einsum("...i,...i->...", means, om_means)
        - 2.0 * np.einsum("...i,...i->...", lam, means)
        - np.einsum("...i,...i->...", white, white)
    )
    return -0.5 * chol_logdet(lc) - 0.5 * eta


def _mixed_weight_stats(blocks, means_t, gammas_t):
    """Per-particle quantities for the integrated mixed backward weights.

    Conditioning each particle's filter moment on the realized u_{t+1} and
    pushing it through the decorrelated dynamics turns the per-(trajectory,
    particle) backward prediction into a per-particle affine map plus one
    shared predictive factor:

        p(y_{t+1:T}, u_{t+1:T} | path_i, y_{1:t})
          = N(u_{t+1}; mean_u_i, S_i) * E[exp(potential_{t+1})]

    with the expectation over N(base_i + T_i u_{t+1}, cov_pred_i).  Only the
    final expectation couples trajectories and particles.
    """
    g, b, gm, f, a, fm = blocks
    q = symmetrize(gm @ bt(gm))
    try:
        q_chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise QNotPD("G Gᵀ is not positive definite") from exc
    qinv = np.linalg.inv(q)
    qi_g = qinv @ gm
    fgq = fm @ bt(qi_g)
    n_v = gm.shape[-1]
    pi = np.eye(n_v) - symmetrize(bt(gm) @ qi_g)
    gam_noise = fm @ pi
    p_t = gammas_t @ bt(gammas_t)
    mean_u = g + (b @ means_t[..., None])[..., 0]
    s_u = symmetrize(b @ p_t @ bt(b)) + q
    s_chol = np.linalg.cholesky(s_u)
    logdet_su = chol_logdet(s_chol)
    s_inv = np.linalg.inv(s_u)
    k_gain = p_t @ bt(b) @ s_inv
    p_cond = symmetrize(p_t - k_gain @ s_u @ bt(k_gain))
    abar = a - fgq @ b
    cov_pred = symmetrize(abar @ p_cond @ bt(abar) + gam_noise @ bt(gam_noise))
    gamma_pred = chol_psd_stack(cov_pred)
    tmat = fgq + abar @ k_gain
    base = (
        f
        + (abar @ means_t[..., None])[..., 0]
        - (fgq @ g[..., None])[..., 0]
        - ((abar @ k_gain) @ mean_u[..., None])[..., 0]
    )
    return mean_u, s_inv, logdet_su, base, tmat, gamma_pred


# ---------------------------------------------------------------------------
# public single-step operations
# ---------------------------------------------------------------------------


def _meas_triple(model, u, t):
    if getattr(model, "meas", None) is None:
        raise RNotPD("model has no linear measurement callback")
    h, c, r = (np.asarray(m, dtype=float) for m in model.meas(np.atleast_1d(u), t))
    try:
        rchol = np.linalg.cholesky(symmetrize(np.atleast_2d(r)))
    except np.linalg.LinAlgError as exc:
        raise RNotPD("R is not positive definite") from exc
    return np.atleast_1d(h), np.atleast_2d(c), rchol


def bwd_init(model, u, y, t: Optional[int] = None) -> InfoPotential:
    """Backward potential at the final time: Ω̂ = CᵀR⁻¹C, λ̂ = CᵀR⁻¹(y - h)."""
    if t is None:
        t = 1
    h, c, rchol = _meas_triple(model, u, t)
    omega, lam, log_z = _init_arrays(h, c, rchol, np.atleast_1d(y))
    return InfoPotential(omega, lam, float(log_z))


def bwd_meas_update(model, u, y, t, pred: InfoPotential) -> InfoPotential:
    """Information-form measurement update: add CᵀR⁻¹C and CᵀR⁻¹(y - h)."""
    h, c, rchol = _meas_triple(model, u, t)
    omega, lam, log_z = _meas_arrays(
        pred.omega, pred.lam, pred.log_z, h, c, rchol, np.atleast_1d(y)
    )
    return InfoPotential(omega, lam, float(log_z))


def sqrt_bwd_meas_update(model, u, y, t, pred: InfoPotential) -> InfoPotential:
    """Square-root form of :func:`bwd_meas_update`."""
    h, c, rchol = _meas_triple(model, u, t)
    sq = pred.sqrt_omega
    if sq is None:
        sq = chol_psd_stack(pred.omega)
    sq_new, lam, log_z = _sqrt_meas_arrays(
        sq, pred.lam, pred.log_z, h, c, rchol, np.atleast_1d(y)
    )
    return InfoPotential.from_sqrt(sq_new, lam, float(log_z))


def bwd_predict_hier(model, u_next, t, upd: InfoPotential, particles=None):
    """Backward prediction for the hierarchical model.

    The predicted (Omega_t, lambda_t) are shared by all forward particles;
    the potential's ``log_z`` carries the shared prefactor.  When
    ``particles`` (N, n_u) is given, also returns the per-particle
    transition log-densities log p(u_{t+1} | u_t^i); the full per-particle
    predicted prefactor is ``pot.log_z + log_z_particles``.
    """
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    f, a, fm = (np.asarray(m, dtype=float) for m in model.dyn(u_next, t))
    omega, lam, lemma_const = _predict_hier_arrays(f, a, fm, upd.omega, upd.lam)
    pot = InfoPotential(omega, lam, float(upd.log_z + lemma_const))
    if particles is None:
        return pot, None
    logz = trans_logpdf_stack(
        model, u_next[None, :], np.asarray(particles, dtype=float), t
    )
    return pot, logz


def sqrt_bwd_predict_hier(model, u_next, t, upd: InfoPotential, particles=None):
    """Square-root form of :func:`bwd_predict_hier`."""
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    f, a, fm = (np.asarray(m, dtype=float) for m in model.dyn(u_next, t))
    sq = upd.sqrt_omega
    if sq is None:
        sq = chol_psd_stack(upd.omega)
    sq_new, lam, lemma_const = _sqrt_predict_hier_arrays(f, a, fm, sq, upd.lam)
    pot = InfoPotential.from_sqrt(sq_new, lam, float(upd.log_z + lemma_const))
    if particles is None:
        return pot, None
    logz = trans_logpdf_stack(
        model, u_next[None, :], np.asarray(particles, dtype=float), t
    )
    return pot, logz


def bwd_predict_mixed(model, u, u_next, t, upd: InfoPotential) -> InfoPotential:
    """Backward prediction for the mixed model at forward-particle value u.

    The returned potential's ``log_z`` is ``upd.log_z`` plus the full
    per-particle step prefactor (|Q|^{-1/2} |M|^{-1/2} exp(-tau/2) with its
    2*pi constant).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    g, b, gm, f, a, fm = (np.asarray(m, dtype=float) for m in model.dyn(u, t))
    omega, lam, step = _predict_mixed_arrays(
        g, b, gm, f, a, fm, u_next, upd.omega, upd.lam
    )
    return InfoPotential(omega, lam, float(upd.log_z + step))


def sqrt_bwd_predict_mixed(model, u, u_next, t, upd: InfoPotential) -> InfoPotential:
    """Square-root form of :func:`bwd_predict_mixed`."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    g, b, gm, f, a, fm = (np.asarray(m, dtype=float) for m in model.dyn(u, t))
    sq = upd.sqrt_omega
    if sq is None:
        sq = chol_psd_stack(upd.omega)
    sq_new, lam, step = _sqrt_predict_mixed_arrays(
        g, b, gm, f, a, fm, u_next, sq, upd.lam
    )
    return InfoPotential.from_sqrt(sq_new, lam, float(upd.log_z + step))


def bwd_weights(log_w, means, gammas, omega, lam, log_z):
    """Normalized backward sampling weights W ∝ w Z |Λ|^{-1/2} exp(-η/2).

    Parameters are stacked per particle along the last batch axis; ``omega``
    and ``lam`` may be shared (hierarchical) or per-particle (mixed).
    Raises :class:`AllWeightsZero` when every weight underflows.
    """
    logw = np.asarray(log_w, dtype=float) + np.asarray(log_z, dtype=float)
    logw = logw + log_weight_term(means, gammas, omega, lam)
    w, lse = normalize_log_weights(logw)
    if not np.all(np.isfinite(np.atleast_1d(lse))):
        raise AllWeightsZero("all backward weights underflowed", log_weights=logw)
    return w


# ---------------------------------------------------------------------------
# backward messages along fixed nonlinear paths
# ---------------------------------------------------------------------------


def backward_messages(
    model,
    u_paths,
    y,
    sqrt_form: bool = False,
    meas_source: Optional[MeasSource] = None,
    dyn_source: Optional[DynSource] = None,
    path_indices=None,
):
    """Predicted backward messages (Omega_t, lambda_t, log Z_t) along fixed
    nonlinear paths.

    ``u_paths`` has shape (K, T, n_u) (a single path may be passed as
    (T, n_u)).  Returns (omegas (K,T,n,n), lams (K,T,n), log_zs (K,T));
    entries at t = T are the empty message.  With ``sqrt_form`` the matrices
    are produced by the QR recursions (and are PSD by construction).
    """
    u_paths = np.asarray(u_paths, dtype=float)
    single = u_paths.ndim == 2
    if single:
        u_paths = u_paths[None]
    y = np.atleast_2d(np.asarray(y, dtype=float))
    K, T, _ = u_paths.shape
    n_z = model.n_z
    flavor = model.flavor

    omegas = np.zeros((K, T, n_z, n_z))
    lams = np.zeros((K, T, n_z))
    log_zs = np.zeros((K, T))

    def meas_at(t):
        if meas_source is not None:
            if path_indices is not None and meas_source.recorded:
                return meas_source.at_indices(t, path_indices[:, t - 1])
            return meas_source.at_values(t, u_paths[:, t - 1])
        h, c, r = mod.eval_meas(model, u_paths[:, t - 1], t)
        return h, c, chol_psd_stack(r)

    def dyn_at(t):
        # hierarchical blocks are functions of u_{t+1}; mixed of u_t
        if flavor == "hier":
            return mod.eval_dyn(model, u_paths[:, t], t)
        if dyn_source is not None and dyn_source.recorded and path_indices is not None:
            return dyn_source.at_indices(t, path_indices[:, t - 1])
        return mod.eval_dyn(model, u_paths[:, t - 1], t)

    h, c, rchol = meas_at(T)
    if sqrt_form:
        sq_upd, lam_upd, logz_upd = _sqrt_meas_arrays(
            np.zeros((K, n_z, n_z)), np.zeros((K, n_z)), np.zeros(K),
            h, c, rchol, y[T - 1],
        )
    else:
        om_upd, lam_upd, logz_upd = _meas_arrays(
            np.zeros((K, n_z, n_z)), np.zeros((K, n_z)), np.zeros(K),
            h, c, rchol, y[T - 1],
        )

    for t in range(T - 1, 0, -1):
        if flavor == "hier":
            f, a, fm = dyn_at(t)
            if sqrt_form:
                sq_pred, lam_pred, lemma = _sqrt_predict_hier_arrays(
                    f, a, fm, sq_upd, lam_upd
                )
                om_pred = symmetrize(sq_pred @ bt(sq_pred))
            else:
                om_pred, lam_pred, lemma = _predict_hier_arrays(
                    f, a, fm, om_upd, lam_upd
                )
            ztrans = trans_logpdf_stack(
                model, u_paths[:, t], u_paths[:, t - 1], t
            )
            logz_pred = logz_upd + lemma + ztrans
        else:
            blocks = dyn_at(t)
            if sqrt_form:
                sq_pred, lam_pred, step = _sqrt_predict_mixed_arrays(
                    *blocks, u_paths[:, t], sq_upd, lam_upd
                )
                om_pred = symmetrize(sq_pred @ bt(sq_pred))
            else:
                om_pred, lam_pred, step = _predict_mixed_arrays(
                    *blocks, u_paths[:, t], om_upd, lam_upd
                )
            logz_pred = logz_upd + step
        omegas[:, t - 1] = om_pred
        lams[:, t - 1] = lam_pred
        log_zs[:, t - 1] = logz_pred
        h, c, rchol = meas_at(t)
        if sqrt_form:
            sq_upd, lam_upd, logz_upd = _sqrt_meas_arrays(
                sq_pred, lam_pred, logz_pred, h, c, rchol, y[t - 1]
            )
        else:
            om_upd, lam_upd, logz_upd = _meas_arrays(
                om_pred, lam_pred, logz_pred, h, c, rchol, y[t - 1]
            )

    if single:
        return omegas[0], lams[0], log_zs[0]
    return omegas, lams, log_zs


# ---------------------------------------------------------------------------
# Rao-Blackwellized backward simulation
# ---------------------------------------------------------------------------


def _traj_uniforms(seed, n_traj, T):
    children = np.random.SeedSequence([int(seed), _TAG_BACKWARD]).spawn(n_traj)
    return np.stack(
        [np.random.default_rng(ch).uniform(size=T) for ch in children]
    )


def backward_simulate(
    filt: FilterOutput,
    model,
    n_traj: int,
    seed: int = 0,
    sqrt_form: bool = False,
    return_weights: bool = False,
):
    """Sample nonlinear backward trajectories from the RBPF approximation.

    All trajectories advance in lockstep over time, so the per-time work is
    batched over (trajectory, particle) pairs.  Each trajectory consumes its
    own pre-drawn uniform stream, making the output independent of batching.

    Returns a list of :class:`BackwardTrajectory` (with stored predicted
    messages, ready for :func:`smooth_linear`); with ``return_weights`` a
    second value gives, per time t = 1..T-1, the (n_traj, N) backward weight
    matrices for diagnostics and oracle tests.
    """
    T, N = filt.T, filt.N
    M = int(n_traj)
    if M < 1:
        raise ValueError("need at least one trajectory")
    n_u = filt.particles.shape[2]
    n_z = filt.means.shape[2]
    flavor = filt.flavor
    meas_src = MeasSource(model, filt)
    dyn_src = DynSource(model, filt)
    y = filt.y

    uniforms = _traj_uniforms(seed, M, T)
    u_path = np.zeros((M, T, n_u))
    omegas = np.zeros((M, T, n_z, n_z))
    lams = np.zeros((M, T, n_z))
    log_zs = np.zeros((M, T))
    indices = np.zeros((M, T), dtype=np.int64)
    wbar_out = [] if return_weights else None

    j = categorical_draws(np.broadcast_to(filt.weights[T - 1], (M, N)),
                          uniforms[:, T - 1])
    indices[:, T - 1] = j
    u_path[:, T - 1] = filt.particles[T - 1][j]
    h, c, rchol = meas_src.at_indices(T, j)
    if sqrt_form:
        sq_upd, lam_upd, logz_upd = _sqrt_meas_arrays(
            np.zeros((M, n_z, n_z)), np.zeros((M, n_z)), np.zeros(M),
            h, c, rchol, y[T - 1],
        )
    else:
        om_upd, lam_upd, logz_upd = _meas_arrays(
            np.zeros((M, n_z, n_z)), np.zeros((M, n_z)), np.zeros(M),
            h, c, rchol, y[T - 1],
        )

    log_w_hist = np.log(np.maximum(filt.weights, 1e-300))
    rows = np.arange(M)
    for t in range(T - 1, 0, -1):
        if flavor == "hier":
            f, a, fm = dyn_src.at_values(t, u_path[:, t])
            if sqrt_form:
                sq_pred, lam_pred, lemma = _sqrt_predict_hier_arrays(
                    f, a, fm, sq_upd, lam_upd
                )
                om_pred = symmetrize(sq_pred @ bt(sq_pred))
            else:
                om_pred, lam_pred, lemma = _predict_hier_arrays(
                    f, a, fm, om_upd, lam_upd
                )
            ztrans = trans_logpdf_stack(
                model, u_path[:, t][:, None, :], filt.particles[t - 1][None, :, :], t
            )
            logz_pred = (logz_upd + lemma)[:, None] + ztrans  # (M, N)
            logw = log_w_hist[t - 1][None, :] + logz_pred + log_weight_term(
                filt.means[t - 1][None], filt.sqrt_covs[t - 1][None],
                om_pred[:, None], lam_pred[:, None],
            )
        else:
            # integrated route: condition each particle on u_{t+1}, then
            # integrate the updated potential against the predicted moment
            # (identical weights, but only O(N) per-particle matrix work)
            blocks = tuple(
                np.asarray(bl) for bl in dyn_src.at_indices(t, slice(None))
            )
            mean_u, s_inv, logdet_su, base, tmat, gamma_pred = (
                _mixed_weight_stats(blocks, filt.means[t - 1],
                                    filt.sqrt_covs[t - 1])
            )
            om_upd_w = (
                symmetrize(sq_upd @ bt(sq_upd)) if sqrt_form else om_upd
            )
            du = u_path[:, t][:, None, :] - mean_u[None]
            n_u_dim = du.shape[-1]
            logn_u = -0.5 * (
                n_u_dim * LOG_2PI
                + logdet_su[None]
                + np.einsum("mni,nij,mnj->mn", du, s_inv, du)
            )
            m_pred = base[None] + np.einsum("nij,mj->mni", tmat, u_path[:, t])
            lemma_w = log_weight_term(
                m_pred, gamma_pred[None], om_upd_w[:, None], lam_upd[:, None]
            )
            logw = (
                log_w_hist[t - 1][None, :]
                + logz_upd[:, None]
                + logn_u
                + lemma_w
            )
        wbar, lse = normalize_log_weights(logw, axis=-1)
        if not np.all(np.isfinite(lse)):
            raise AllWeightsZero(
                f"all backward weights underflowed at t={t}", log_weights=logw
            )
        if return_weights:
            wbar_out.append((t, wbar.copy()))
        j = categorical_draws(wbar, uniforms[:, t - 1])
        indices[:, t - 1] = j
        u_path[:, t - 1] = filt.particles[t - 1][j]
        if flavor == "hier":
            omegas[:, t - 1] = om_pred
            lams[:, t - 1] = lam_pred
            om_sel = om_pred
            lam_sel = lam_pred
            sq_sel = sq_pred if sqrt_form else None
            log_zs[:, t - 1] = logz_pred[rows, j]
        else:
            # per-particle backward prediction only for the selected pairs
            sel_blocks = tuple(bl[j] for bl in blocks)
            if sqrt_form:
                sq_sel, lam_sel, step = _sqrt_predict_mixed_arrays(
                    *sel_blocks, u_path[:, t], sq_upd, lam_upd
                )
                om_sel = symmetrize(sq_sel @ bt(sq_sel))
            else:
                om_sel, lam_sel, step = _predict_mixed_arrays(
                    *sel_blocks, u_path[:, t], om_upd, lam_upd
                )
                sq_sel = None
            omegas[:, t - 1] = om_sel
            lams[:, t - 1] = lam_sel
            log_zs[:, t - 1] = logz_upd + step

        h, c, rchol = meas_src.at_indices(t, j)
        if sqrt_form:
            sq_upd, lam_upd, logz_upd = _sqrt_meas_arrays(
                sq_sel, lam_sel, log_zs[:, t - 1], h, c, rchol, y[t - 1]
            )
        else:
            om_upd, lam_upd, logz_upd = _meas_arrays(
                om_sel, lam_sel, log_zs[:, t - 1], h, c, rchol, y[t - 1]
            )

    trajs = [
        BackwardTrajectory(
            u_path=u_path[m],
            omegas=omegas[m],
            lams=lams[m],
            log_zs=log_zs[m],
            indices=indices[m],
        )
        for m in range(M)
    ]
    if return_weights:
        return trajs, dict(wbar_out)
    return trajs


# ---------------------------------------------------------------------------
# linear-state smoothing (forward-backward-forward)
# ---------------------------------------------------------------------------


def smooth_linear_many(
    model,
    u_paths,
    omegas,
    lams,
    y,
    meas_source: Optional[MeasSource] = None,
    dyn_source: Optional[DynSource] = None,
    path_indices=None,
):
    """Smoothed linear marginals along fixed paths with stored messages.

    Runs a fresh conditional Kalman filter along each path (the RBPF moments
    are *not* reused, since they condition on different nonlinear
    trajectories), then fuses the filtered moments with the stored predicted
    backward messages.  Returns (means (K,T,n), sqrt_covs (K,T,n,n)).
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

    means = np.zeros((K, T, n_z))
    sqrts = np.zeros((K, T, n_z, n_z))
    mean = np.broadcast_to(model.init_z.mean, (K, n_z)).copy()
    gamma = np.broadcast_to(model.init_z.sqrt_cov, (K, n_z, n_z)).copy()
    for t in range(1, T + 1):
        h, c, rchol = meas_at(t)
        mean, gamma, _ = meas_update_arrays(mean, gamma, h, c, rchol, y[t - 1])
        mean_s, cov_s = _fuse_info_arrays(
            mean, gamma, omegas[:, t - 1], lams[:, t - 1]
        )
        means[:, t - 1] = mean_s
        sqrts[:, t - 1] = chol_psd_stack(cov_s)
        if t < T:
            if flavor == "hier":
                f, a, fm = dyn_at(t)
                mean, gamma = time_update_arrays(mean, gamma, f, a, fm)
            else:
                blocks = dyn_at(t)
                mean, gamma, _ = mixed_time_update_arrays(
                    mean, gamma, u_paths[:, t], *blocks
                )
    return means, sqrts


def smooth_linear(model, traj: BackwardTrajectory, y, filt: Optional[FilterOutput] = None):
    """Fill in smoothed linear marginals for one backward trajectory.

    Returns the trajectory with ``smoothed_means`` / ``smoothed_sqrt_covs``
    set.  ``filt`` is required when the forward pass recorded synthesized
    matrices (approximate models); the trajectory's stored particle indices
    select the recorded entries.
    """
    meas_source = None
    dyn_source = None
    path_indices = None
    if filt is not None:
        meas_source = MeasSource(model, filt)
        dyn_source = DynSource(model, filt)
        if meas_source.recorded or dyn_source.recorded:
            path_indices = traj.indices[None, :]
            if np.any(traj.indices < 0):
                raise ValueError(
                    "trajectory contains off-support values; recorded matrices "
                    "cannot be indexed"
                )
    means, sqrts = smooth_linear_many(
        model,
        traj.u_path[None],
        traj.omegas[None],
        traj.lams[None],
        y,
        meas_source=meas_source,
        dyn_source=dyn_source,
        path_indices=path_indices,
    )
    traj.smoothed_means = means[0]
    traj.smoothed_sqrt_covs = sqrts[0]
    return traj


def smooth_trajectories(model, trajs, filt: FilterOutput):
    """Batched Algorithm-2 smoothing for trajectories from one filter run."""
    meas_source = MeasSource(model, filt)
    dyn_source = DynSource(model, filt)
    u_paths = np.stack([tr.u_path for tr in trajs])
    omegas = np.stack([tr.omegas for tr in trajs])
    lams = np.stack([tr.lams for tr in trajs])
    path_indices = None
    if meas_source.recorded or dyn_source.recorded:
        path_indices = np.stack([tr.indices for tr in trajs])
        if np.any(path_indices < 0):
            raise ValueError("off-support trajectory with recorded matrices")
    means, sqrts = smooth_linear_many(
        model, u_paths, omegas, lams, filt.y,
        meas_source=meas_source, dyn_source=dyn_source, path_indices=path_indices,
    )
    for m, tr in enumerate(trajs):
        tr.smoothed_means = means[m]
        tr.smoothed_sqrt_covs = sqrts[m]
    return trajs


# ---------------------------------------------------------------------------
# MCMC-rejuvenated backward simulation
# ---------------------------------------------------------------------------


class BootstrapProposal:
    """Default MCMC proposal: the model's own transition density.

    Hierarchical models propose u_t ~ p(u_t | u_{t-1}^i); mixed models use
    the exact conditional N(g + B z̄, B P Bᵀ + Q) available from the RBPF
    moments.  At t = 1 the initial law is used.
    """

    def sample(self, rng, model, filt, t, blk, suffix_u):
        if t == 1:
            return model.init_u.sample(rng, blk.shape[0])
        u_prev = filt.particles[t - 2][blk]
        if model.flavor == "hier":
            return _trans_sample_stack_local(model, rng, u_prev, t - 1)
        mean, chol = _mixed_u_predictive(model, filt, t, blk)
        eps = rng.standard_normal(mean.shape)
        return mean + np.einsum("...ij,...j->...i", chol, eps)

    def logpdf(self, model, filt, t, blk, values, suffix_u):
        if t == 1:
            return model.init_u.logpdf(values)
        u_prev = filt.particles[t - 2][blk]
        if model.flavor == "hier":
            return trans_logpdf_stack(model, values, u_prev, t - 1)
        mean, chol = _mixed_u_predictive(model, filt, t, blk)
        from .gauss import log_mvn_pdf_stack

        return log_mvn_pdf_stack(values, mean, chol)


class GridProposal:
    """Discrete proposal over the forward particle values at time t.

    Used for exact-enumeration tests: the chain then lives on the lattice of
    (previous-particle, current-value) pairs.  Densities are with respect to
    the counting measure on the N stored values.
    """

    def sample(self, rng, model, filt, t, blk, suffix_u):
        n = filt.N
        k = rng.integers(0, n, size=blk.shape[0])
        return filt.particles[t - 1][k]

    def logpdf(self, model, filt, t, blk, values, suffix_u):
        return np.full(values.shape[0], -np.log(filt.N))


def _trans_sample_stack_local(model, rng, u_stack, t):
    if model.vectorized:
        return np.asarray(model.trans_sample(rng, u_stack, t), dtype=float)
    return np.stack(
        [np.atleast_1d(model.trans_sample(rng, u, t)) for u in u_stack]
    ).astype(float)


def _mixed_u_predictive(model, filt, t, blk):
    """Mean and Cholesky factor of p(u_t | u_{1:t-1}^blk, y_{1:t-1})."""
    u_prev = filt.particles[t - 2][blk]
    g, b, gm, f, a, fm = mod.eval_dyn(model, u_prev, t - 1)
    mean_prev = filt.means[t - 2][blk]
    gamma_prev = filt.sqrt_covs[t - 2][blk]
    bg = b @ gamma_prev
    s = symmetrize(bg @ bt(bg) + gm @ bt(gm))
    return g + np.einsum("...ij,...j->...i", b, mean_prev), np.linalg.cholesky(s)


def _mcmc_candidate_eval(model, filt, t, blk, values, y, shared):
    """Evaluate the unnormalized stage-t target at candidates (blk, values).

    Returns a dict with the log target, the y-updated filter moments, and
    the per-candidate stored backward statistics.  ``shared`` carries the
    measurement-updated potential from time t+1 (and, for hierarchical
    models, the shared predicted message).
    """
    M = values.shape[0]
    if t == 1:
        log_w = np.zeros(M)
        mean_prev = np.broadcast_to(model.init_z.mean, (M, model.n_z))
        gamma_prev = np.broadcast_to(
            model.init_z.sqrt_cov, (M, model.n_z, model.n_z)
        )
        prior_lp = np.asarray(model.init_u.logpdf(values), dtype=float)
    else:
        log_w = np.log(np.maximum(filt.weights[t - 2][blk], 1e-300))
        mean_prev = filt.means[t - 2][blk]
        gamma_prev = filt.sqrt_covs[t - 2][blk]

    if model.flavor == "hier":
        if t > 1:
            u_prev = filt.particles[t - 2][blk]
            prior_lp = trans_logpdf_stack(model, values, u_prev, t - 1)
            f, a, fm = mod.eval_dyn(model, values, t - 1)
            mean_pred, gamma_pred = time_update_arrays(
                mean_prev, gamma_prev, f, a, fm
            )
        else:
            mean_pred, gamma_pred = mean_prev, gamma_prev
        om_step, lam_step = shared["om_pred"], shared["lam_pred"]
        logz_pred = shared["logz_base"] + trans_logpdf_stack(
            model, shared["u_next"], values, t
        )
    else:
        if t > 1:
            g, b, gm, f, a, fm = mod.eval_dyn(
                model, filt.particles[t - 2][blk], t - 1
            )
            mean_pred, gamma_pred, prior_lp = mixed_time_update_arrays(
                mean_prev, gamma_prev, values, g, b, gm, f, a, fm
            )
        else:
            mean_pred, gamma_pred = mean_prev, gamma_prev
        blocks = mod.eval_dyn(model, values, t)
        om_step, lam_step, step = _predict_mixed_arrays(
            *blocks, shared["u_next"], shared["om_upd"], shared["lam_upd"]
        )
        logz_pred = shared["logz_upd"] + step

    h, c, rchol = shared["meas_src"].at_values(t, values)
    mean_f, gamma_f, loglik_y = meas_update_arrays(
        mean_pred, gamma_pred, h, c, rchol, y[t - 1]
    )
    wterm = log_weight_term(mean_f, gamma_f, om_step, lam_step)
    log_target = log_w + prior_lp + loglik_y + logz_pred + wterm
    return {
        "log_target": log_target,
        "omega": np.broadcast_to(om_step, (M, model.n_z, model.n_z)),
        "lam": np.broadcast_to(lam_step, (M, model.n_z)),
        "logz": logz_pred,
    }


def _merge(accept, prop, cur):
    out = {}
    for key in cur:
        a = accept.reshape((-1,) + (1,) * (cur[key].ndim - 1))
        out[key] = np.where(a, prop[key], cur[key])
    return out


def mcmc_backward_simulate(
    filt: FilterOutput,
    model,
    n_traj: int,
    r_steps: int = 10,
    seed: int = 0,
    proposal=None,
    wtilde=None,
):
    """Backward simulation by Metropolis-Hastings rejuvenation.

    At each time t the partial trajectories are extended by ``r_steps``
    independence-MH moves targeting the backward kernel refreshed through
    the time-(t-1) particle cloud.  Each move touches a single forward
    particle, so the per-trajectory cost is independent of N.  With a
    continuous proposal the sampled values are not confined to the forward
    particle support.

    ``r_steps = 0`` keeps the initialization state: the trajectory follows
    the ancestral path of the particle drawn at time T (documented
    degenerate behavior, not an error).  ``wtilde`` optionally reweights the
    proposal mixture over previous-time particles (default: the forward
    weights).  Requires a model with linear measurement callbacks.
    """
    T, N = filt.T, filt.N
    M = int(n_traj)
    n_u = filt.particles.shape[2]
    n_z = filt.means.shape[2]
    flavor = filt.flavor
    y = filt.y
    meas_src = MeasSource(model, filt)
    if meas_src.recorded:
        raise ValueError(
            "MCMC backward simulation needs measurement callbacks at arbitrary "
            "u values; recorded (approximate) matrices are keyed by particle"
        )
    if proposal is None:
        proposal = BootstrapProposal()
    if wtilde is None:
        wtilde = filt.weights
    else:
        wtilde = np.asarray(wtilde, dtype=float)
    # per-time proposal CDFs, computed once so each MH move costs O(log N)
    wtilde_cdf = np.cumsum(wtilde, axis=1)
    wtilde_cdf[:, -1] = 1.0

    u_path = np.zeros((M, T, n_u))
    omegas = np.zeros((M, T, n_z, n_z))
    lams = np.zeros((M, T, n_z))
    log_zs = np.zeros((M, T))
    indices = np.full((M, T), -1, dtype=np.int64)

    rng_init = derived_rng(seed, _TAG_MCMC, 0)
    j = categorical_draws(
        np.broadcast_to(filt.weights[T - 1], (M, N)), rng_init.uniform(size=M)
    )
    indices[:, T - 1] = j
    u_path[:, T - 1] = filt.particles[T - 1][j]
    h, c, rchol = meas_src.at_indices(T, j)
    om_upd, lam_upd, logz_upd = _meas_arrays(
        np.zeros((M, n_z, n_z)), np.zeros((M, n_z)), np.zeros(M),
        h, c, rchol, y[T - 1],
    )
    # chain init for time T-1: the ancestor of the particle drawn at T
    k_prev = filt.ancestors[T - 1][j] if T > 1 else j

    for t in range(T - 1, 0, -1):
        shared = {"meas_src": meas_src, "u_next": u_path[:, t],
                  "om_upd": om_upd, "lam_upd": lam_upd, "logz_upd": logz_upd}
        if flavor == "hier":
            f, a, fm = mod.eval_dyn(model, u_path[:, t], t)
            om_pred, lam_pred, lemma = _predict_hier_arrays(f, a, fm, om_upd, lam_upd)
            shared["om_pred"] = om_pred
            shared["lam_pred"] = lam_pred
            shared["logz_base"] = logz_upd + lemma

        # chain state: the current trajectory's path restricted to 1..t
        val_cur = filt.particles[t - 1][k_prev]
        blk_cur = filt.ancestors[t - 1][k_prev] if t > 1 else np.zeros(M, np.int64)
        ev_cur = _mcmc_candidate_eval(model, filt, t, blk_cur, val_cur, y, shared)
        logq_cur = proposal.logpdf(model, filt, t, blk_cur, val_cur, u_path[:, t])
        if t > 1:
            logq_cur = logq_cur + np.log(np.maximum(wtilde[t - 2][blk_cur], 1e-300))

        for r in range(int(r_steps)):
            rng_r = derived_rng(seed, _TAG_MCMC, t * 100003 + r + 1)
            if t > 1:
                blk_prop = np.searchsorted(
                    wtilde_cdf[t - 2], rng_r.uniform(size=M), side="left"
                ).astype(np.int64)
            else:
                blk_prop = np.zeros(M, np.int64)
            val_prop = proposal.sample(rng_r, model, filt, t, blk_prop, u_path[:, t])
            ev_prop = _mcmc_candidate_eval(
                model, filt, t, blk_prop, val_prop, y, shared
            )
            logq_prop = proposal.logpdf(
                model, filt, t, blk_prop, val_prop, u_path[:, t]
            )
            if t > 1:
                logq_prop = logq_prop + np.log(
                    np.maximum(wtilde[t - 2][blk_prop], 1e-300)
                )
            log_acc = (ev_prop["log_target"] - logq_prop) - (
                ev_cur["log_target"] - logq_cur
            )
            accept = np.log(rng_r.uniform(size=M)) < log_acc
            val_cur = np.where(accept[:, None], val_prop, val_cur)
            blk_cur = np.where(accept, blk_prop, blk_cur)
            logq_cur = np.where(accept, logq_prop, logq_cur)
            ev_cur = _merge(accept, ev_prop, ev_cur)

        u_path[:, t - 1] = val_cur
        omegas[:, t - 1] = ev_cur["omega"]
        lams[:, t - 1] = ev_cur["lam"]
        log_zs[:, t - 1] = ev_cur["logz"]
        # values proposed from the particle grid remain attributable
        match = np.all(
            np.isclose(val_cur[:, None, :], filt.particles[t - 1][None]), axis=-1
        )
        has = match.any(axis=1)
        indices[:, t - 1] = np.where(has, match.argmax(axis=1), -1)

        h, c, rchol = meas_src.at_values(t, val_cur)
        om_upd, lam_upd, logz_upd = _meas_arrays(
            ev_cur["omega"], ev_cur["lam"], ev_cur["logz"], h, c, rchol, y[t - 1]
        )
        k_prev = blk_cur if t > 1 else k_prev

    return [
        BackwardTrajectory(
            u_path=u_path[m],
            omegas=omegas[m],
            lams=lams[m],
            log_zs=log_zs[m],
            indices=indices[m],
        )
        for m in range(M)
    ]
