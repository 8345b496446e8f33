"""Bootstrap Rao-Blackwellized particle filter with square-root conditional
Kalman filters.

The filter vectorizes over particles: per-particle moments are carried as
stacked arrays ``(N, n_z)`` / ``(N, n_z, n_z)`` and all Kalman algebra is
batched.  The conditional covariance factors are propagated in square-root
form (QR on stacked factors, no subtraction of PSD matrices).

Randomness is drawn from generators derived deterministically from
``(seed, stream_tag, t)``, so output is a pure function of the seed and is
independent of how a parallel implementation would schedule the per-particle
work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models as mod
from .exceptions import (
    AllWeightsZero,
    DegenerateWeights,
    DimensionMismatch,
    QNotPD,
    SingularInnovation,
)
from .gauss import (
    MomentGaussian,
    bt,
    chol_logdet,
    chol_psd_stack,
    cho_solve_stack,
    LOG_2PI,
    normalize_log_weights,
    qr_upper,
    symmetrize,
)

__all__ = [
    "FilterOutput",
    "systematic_resample",
    "ess",
    "kf_meas_update",
    "kf_time_update_hier",
    "kf_time_update_mixed",
    "rbpf_run",
]

# stream tags for derived RNGs
_TAG_PROPOSAL = 0
_TAG_RESAMPLE = 1


def derived_rng(seed: int, tag: int, t: int = 0) -> np.random.Generator:
    """Deterministic generator for stream (seed, tag, t)."""
    return np.random.default_rng([int(seed), int(tag), int(t)])


def systematic_resample(weights, rng) -> np.ndarray:
    """Systematic resampling: N indices from one uniform draw.

    The expected multiplicity of index i is N * w_i and the realized count
    never deviates from it by more than one.
    """
    w = np.asarray(weights, dtype=float)
    s = np.sum(w)
    if not np.isfinite(s) or s <= 0.0 or np.any(w < 0.0):
        raise DegenerateWeights("weights are not a valid simplex")
    n = w.shape[0]
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(w / s)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left").astype(np.int64)


def ess(weights) -> float:
    """Effective sample size 1 / sum(w_i^2) of a normalized weight vector."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


def categorical_draws(weights, uniforms) -> np.ndarray:
    """Inverse-CDF categorical draws; ``weights`` (..., N), ``uniforms`` (...)."""
    cum = np.cumsum(weights, axis=-1)
    cum[..., -1] = 1.0
    u = np.asarray(uniforms, dtype=float)[..., None]
    return np.sum(cum < u, axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# batched square-root Kalman steps
# ---------------------------------------------------------------------------


def meas_update_arrays(mean, gamma, h, c, r_chol, y):
    """Square-root measurement update, batched.

    Returns (posterior mean, posterior factor, predictive log-likelihood).
    The covariance update is a QR factorization of the stacked pre-array,
    which never subtracts PSD matrices.
    """
    n_y = r_chol.shape[-1]
    n_z = gamma.shape[-1]
    cg = c @ gamma  # (..., ny, nz)
    lead = np.broadcast_shapes(cg.shape[:-2], r_chol.shape[:-2], gamma.shape[:-2])
    pre = np.zeros(lead + (n_y + n_z, n_y + n_z))
    pre[..., :n_y, :n_y] = bt(r_chol)
    pre[..., n_y:, :n_y] = bt(cg)
    pre[..., n_y:, n_y:] = bt(np.broadcast_to(gamma, lead + (n_z, n_z)))
    r = qr_upper(pre)
    u1 = r[..., :n_y, :n_y]  # S = U1ᵀ U1, innovation covariance
    u2 = r[..., :n_y, n_y:]
    gamma_post = bt(r[..., n_y:, n_y:])

    diag = np.einsum("...ii->...i", u1)
    if np.any(diag <= 0.0):
        raise SingularInnovation("innovation covariance factor is singular")
    s_chol = bt(u1)
    innov = y - h - np.einsum("...ij,...j->...i", c, mean)
    alpha = np.linalg.solve(s_chol, innov[..., None])[..., 0]
    loglik = (
        -0.5 * np.sum(alpha**2, axis=-1)
        - np.sum(np.log(diag), axis=-1)
        - 0.5 * n_y * LOG_2PI
    )
    # K innov = U2ᵀ U1⁻ᵀ innov = U2ᵀ alpha, with alpha the whitened residual
    mean_post = mean + np.einsum("...ji,...j->...i", u2, alpha)
    return mean_post, gamma_post, loglik


def time_update_arrays(mean, gamma, f, a, fmat):
    """Square-root time update z' = f + A z + F v, batched."""
    mean_new = f + np.einsum("...ij,...j->...i", a, mean)
    ag = a @ gamma
    n_z = ag.shape[-1]
    k = fmat.shape[-1]
    lead = np.broadcast_shapes(ag.shape[:-2], fmat.shape[:-2])
    pre = np.zeros(lead + (n_z + k, n_z))
    pre[..., :n_z, :] = bt(ag)
    pre[..., n_z:, :] = bt(np.broadcast_to(fmat, lead + (n_z, k)))
    gamma_new = bt(qr_upper(pre))
    return mean_new, gamma_new


def mixed_decorrelate(g, b, gmat, f, a, fmat, u_next):
    """Gram-Schmidt decorrelated dynamics given the realized next u.

    Returns (fbar, abar, gamma_noise, q_chol, pi) where the conditional
    transition is z' = fbar + abar z + gamma_noise xi, xi ~ N(0, I).
    """
    q = symmetrize(gmat @ bt(gmat))
    try:
        q_chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise QNotPD("G Gᵀ is not positive definite") from exc
    qi_g = cho_solve_stack(q_chol, gmat)  # Q⁻¹ G (..., nu, nv)
    fgq = fmat @ bt(qi_g)  # F Gᵀ Q⁻¹ (..., nz, nu)
    du = u_next - g
    fbar = f + np.einsum("...ij,...j->...i", fgq, du)
    abar = a - fgq @ b
    n_v = gmat.shape[-1]
    pi = np.eye(n_v) - symmetrize(bt(gmat) @ qi_g)
    gamma_noise = fmat @ pi  # Γ = F Π; Γ Γᵀ = F Π Fᵀ since Π is a projection
    return fbar, abar, gamma_noise, q_chol, pi


def mixed_time_update_arrays(mean, gamma, u_next, g, b, gmat, f, a, fmat):
    """Condition on the realized u', then propagate the decorrelated dynamics.

    Returns (mean', gamma', log p(u' | filter moment)), the exact moments of
    p(z_{t+1} | u_{1:t+1}, y_{1:t}).
    """
    fbar, abar, gamma_noise, q_chol, _ = mixed_decorrelate(
        g, b, gmat, f, a, fmat, u_next
    )
    mean_u, gamma_u, loglik_u = meas_update_arrays(mean, gamma, g, b, q_chol, u_next)
    mean_new, gamma_new = time_update_arrays(mean_u, gamma_u, fbar, abar, gamma_noise)
    return mean_new, gamma_new, loglik_u


# public single-instance wrappers ------------------------------------------------


def kf_meas_update(moment: MomentGaussian, h, c, r_sqrt, y):
    """Conditional KF measurement update for y = h + C z + e, e ~ N(0, R).

    ``r_sqrt`` is the lower Cholesky factor of R.  Returns the posterior
    moment and the predictive log-likelihood log N(y; h + C z̄, C P Cᵀ + R).
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    r_sqrt = np.atleast_2d(np.asarray(r_sqrt, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if c.shape != (h.shape[0], moment.dim):
        raise DimensionMismatch(f"C has shape {c.shape}")
    mean, gamma, loglik = meas_update_arrays(
        moment.mean, moment.sqrt_cov, h, c, r_sqrt, y
    )
    return MomentGaussian(mean, gamma), float(loglik)


def kf_time_update_hier(moment: MomentGaussian, f, a, fmat) -> MomentGaussian:
    """Time update z' = f + A z + F v; P' = A P Aᵀ + F Fᵀ via stacked QR."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    fmat = np.atleast_2d(np.asarray(fmat, dtype=float))
    mean, gamma = time_update_arrays(moment.mean, moment.sqrt_cov, f, a, fmat)
    return MomentGaussian(mean, gamma)


def kf_time_update_mixed(moment: MomentGaussian, u_next, g, b, gmat, f, a, fmat):
    """Mixed-model time update: the realized u' is an extra measurement on z.

    Returns the exact conditional moment of z_{t+1} given u_{1:t+1}, y_{1:t}.
    """
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    args = [np.atleast_1d(np.asarray(g, dtype=float))]
    args += [np.atleast_2d(np.asarray(m, dtype=float)) for m in (b, gmat)]
    args.append(np.atleast_1d(np.asarray(f, dtype=float)))
    args += [np.atleast_2d(np.asarray(m, dtype=float)) for m in (a, fmat)]
    mean, gamma, _ = mixed_time_update_arrays(
        moment.mean, moment.sqrt_cov, u_next, *args
    )
    return MomentGaussian(mean, gamma)


# ---------------------------------------------------------------------------
# filter output container
# ---------------------------------------------------------------------------


@dataclass
class FilterOutput:
    """Full RBPF history needed by the backward pass.

    Per time step t (0-based array index, time t+1): particles, normalized
    weights, ancestor indices into the previous cloud, measurement-updated
    conditional moments, and the effective sample size.  ``ancestors[0]`` is
    the identity.  When the filter ran with synthesized (approximate)
    matrices, the per-particle measurement triples and, for general models,
    the dynamics blocks are recorded for reuse in the backward pass.
    """

    flavor: str
    y: np.ndarray  # (T, n_y) the data the filter ran on
    particles: np.ndarray  # (T, N, n_u)
    weights: np.ndarray  # (T, N)
    ancestors: np.ndarray  # (T, N) int
    means: np.ndarray  # (T, N, n_z)
    sqrt_covs: np.ndarray  # (T, N, n_z, n_z)
    ess: np.ndarray  # (T,)
    resampled: np.ndarray  # (T,) bool
    meas_h: Optional[np.ndarray] = None  # (T, N, n_y)
    meas_c: Optional[np.ndarray] = None  # (T, N, n_y, n_z)
    meas_rchol: Optional[np.ndarray] = None  # (T, N, n_y, n_y)
    dyn_blocks: Optional[tuple] = None  # mixed: (g, B, G, f, A, F), each (T, N, ...)
    lin_points: Optional[np.ndarray] = None  # (T, N, n_z) measurement anchors
    dyn_lin_points: Optional[np.ndarray] = None  # (T, N, n_z) dynamics anchors

    @property
    def T(self) -> int:
        return self.particles.shape[0]

    @property
    def N(self) -> int:
        return self.particles.shape[1]

    def ancestral_paths(self) -> np.ndarray:
        """Trace ancestor indices back from the final cloud.

        Returns (N, T) index array: row i is the index path of final
        particle i through the stored clouds.
        """
        T, N = self.T, self.N
        idx = np.empty((N, T), dtype=np.int64)
        idx[:, T - 1] = np.arange(N)
        for t in range(T - 1, 0, -1):
            idx[:, t - 1] = self.ancestors[t][idx[:, t]]
        return idx

    def save(self, path, fmt: str = "npz") -> None:
        """Dump the history; fmt selects 'npz' (binary) or 'csv'."""
        if fmt == "npz":
            data = {
                "flavor": np.asarray(self.flavor),
                "y": self.y,
                "particles": self.particles,
                "weights": self.weights,
                "ancestors": self.ancestors,
                "means": self.means,
                "sqrt_covs": self.sqrt_covs,
                "ess": self.ess,
                "resampled": self.resampled,
            }
            np.savez_compressed(path, **data)
            return
        if fmt != "csv":
            raise ValueError(f"unknown filter dump format {fmt!r}")
        T, N = self.T, self.N
        n_u = self.particles.shape[2]
        n_z = self.means.shape[2]
        cols = (
            ["t", "i", "w", "ancestor"]
            + [f"u_{k+1}" for k in range(n_u)]
            + [f"zbar_{k+1}" for k in range(n_z)]
            + [f"gamma_{r+1}_{c+1}" for r in range(n_z) for c in range(n_z)]
        )
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for t in range(T):
                for i in range(N):
                    row = [str(t + 1), str(i + 1), format(self.weights[t, i], '.17g'),
                           str(self.ancestors[t, i] + 1)]
                    row += [format(v, '.17g') for v in self.particles[t, i]]
                    row += [format(v, '.17g') for v in self.means[t, i]]
                    row += [format(v, '.17g') for v in self.sqrt_covs[t, i].ravel()]
                    fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# the filter
# ---------------------------------------------------------------------------


def _trans_sample_stack(model, rng, u_stack, t):
    if model.vectorized:
        return np.asarray(model.trans_sample(rng, u_stack, t), dtype=float)
    return np.stack(
        [np.atleast_1d(model.trans_sample(rng, u, t)) for u in u_stack]
    ).astype(float)


def trans_logpdf_stack(model, u_next, u, t):
    """Broadcasting transition log-density; loops for non-vectorized models."""
    if model.vectorized:
        return np.asarray(model.trans_logpdf(u_next, u, t), dtype=float)
    u_next = np.asarray(u_next, dtype=float)
    u = np.asarray(u, dtype=float)
    lead = np.broadcast_shapes(u_next.shape[:-1], u.shape[:-1])
    un = np.broadcast_to(u_next, lead + u_next.shape[-1:]).reshape(-1, u_next.shape[-1])
    uu = np.broadcast_to(u, lead + u.shape[-1:]).reshape(-1, u.shape[-1])
    out = np.array([model.trans_logpdf(a, b, t) for a, b in zip(un, uu)], dtype=float)
    return out.reshape(lead)


def _default_measurement_fn(model):
    def fn(t, u_stack, pred_means):
        h, c, r = mod.eval_meas(model, u_stack, t)
        return h, c, chol_psd_stack(r)

    return fn


def rbpf_run(
    model,
    y,
    n_particles: int,
    seed: int = 0,
    resample: str = "ess",
    measurement_fn=None,
    dynamics_fn=None,
    record: bool = False,
) -> FilterOutput:
    """Bootstrap RBPF for hierarchical and mixed CLG models.

    Hierarchical models propose u' ~ p(u'|u); mixed models propose from the
    exact conditional N(g + B z̄, B P Bᵀ + Q) that the RBPF structure makes
    available.  In both cases the incremental weight is the predictive
    likelihood of y.  Resampling is systematic, triggered when
    ESS < N/2 (``resample='ess'``), every step (``'always'``), or never.

    ``measurement_fn(t, u_stack, pred_means) -> (h, C, R_chol)`` and, for
    mixed models, ``dynamics_fn(t, u_stack, filt_means) -> blocks`` override
    the model callbacks (used by the approximate Rao-Blackwellization
    layer); with ``record=True`` their outputs are stored per (t, i).

    Raises
    ------
    AllWeightsZero
        If every particle weight underflows at some step.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != model.n_y:
        raise DimensionMismatch(f"y has shape {y.shape}, expected (T, {model.n_y})")
    T = y.shape[0]
    N = int(n_particles)
    if N < 1:
        raise ValueError("need at least one particle")
    if resample not in ("ess", "always", "never"):
        raise ValueError(f"unknown resampling policy {resample!r}")
    flavor = model.flavor
    if flavor not in ("hier", "mixed"):
        raise ValueError("rbpf_run handles hierarchical and mixed models only")
    if measurement_fn is None:
        measurement_fn = _default_measurement_fn(model)

    n_u, n_z, n_y = model.n_u, model.n_z, model.n_y
    particles = np.zeros((T, N, n_u))
    weights = np.zeros((T, N))
    ancestors = np.zeros((T, N), dtype=np.int64)
    means = np.zeros((T, N, n_z))
    sqrt_covs = np.zeros((T, N, n_z, n_z))
    ess_hist = np.zeros(T)
    resampled = np.zeros(T, dtype=bool)
    rec_h = np.zeros((T, N, n_y)) if record else None
    rec_c = np.zeros((T, N, n_y, n_z)) if record else None
    rec_rchol = np.zeros((T, N, n_y, n_y)) if record else None
    rec_lin = np.zeros((T, N, n_z)) if record else None
    rec_dyn = None
    rec_dyn_lin = None

    ancestors[0] = np.arange(N)
    rng0 = derived_rng(seed, _TAG_PROPOSAL, 0)
    particles[0] = model.init_u.sample(rng0, N)
    mean_cur = np.broadcast_to(model.init_z.mean, (N, n_z)).copy()
    gamma_cur = np.broadcast_to(model.init_z.sqrt_cov, (N, n_z, n_z)).copy()

    h, c, rchol = measurement_fn(1, particles[0], mean_cur)
    mean_cur, gamma_cur, loglik = meas_update_arrays(
        mean_cur, gamma_cur, h, c, rchol, y[0]
    )
    logw = loglik
    weights[0], ess_hist[0] = _normalize_or_raise(logw, 1)
    means[0], sqrt_covs[0] = mean_cur, gamma_cur
    if record:
        # reuse copies for the backward pass anchor at the filtered means
        rec_h[0], rec_c[0], rec_rchol[0] = measurement_fn(1, particles[0],
                                                          mean_cur)
        rec_lin[0] = mean_cur

    for ti in range(1, T):
        w_prev = weights[ti - 1]
        do_resample = resample == "always" or (
            resample == "ess" and ess(w_prev) < N / 2.0
        )
        if do_resample and N > 1:
            idx = systematic_resample(w_prev, derived_rng(seed, _TAG_RESAMPLE, ti))
            base_logw = np.zeros(N)
            resampled[ti] = True
        else:
            idx = np.arange(N)
            base_logw = np.log(np.maximum(w_prev, 1e-300))
        ancestors[ti] = idx
        u_prev = particles[ti - 1][idx]
        mean_prev = means[ti - 1][idx]
        gamma_prev = sqrt_covs[ti - 1][idx]

        rng_t = derived_rng(seed, _TAG_PROPOSAL, ti)
        if flavor == "hier":
            u_new = _trans_sample_stack(model, rng_t, u_prev, ti)
            f, a, fm = mod.eval_dyn(model, u_new, ti)
            mean_pred, gamma_pred = time_update_arrays(mean_prev, gamma_prev, f, a, fm)
        else:
            if dynamics_fn is not None:
                blocks = dynamics_fn(ti, particles[ti - 1], means[ti - 1])
                if rec_dyn is None and record:
                    rec_dyn = tuple(
                        np.zeros((T,) + np.asarray(bl).shape) for bl in blocks
                    )
                    rec_dyn_lin = np.zeros((T, N, n_z))
                if record:
                    for slot, bl in zip(rec_dyn, blocks):
                        slot[ti - 1] = bl
                    rec_dyn_lin[ti - 1] = means[ti - 1]
                blocks = tuple(np.asarray(bl)[idx] for bl in blocks)
            else:
                blocks = mod.eval_dyn(model, u_prev, ti)
            g, b, gm, f, a, fm = blocks
            prop_mean = g + np.einsum("...ij,...j->...i", b, mean_prev)
            bg = b @ gamma_prev
            s = symmetrize(bg @ bt(bg) + gm @ bt(gm))
            s_chol = np.linalg.cholesky(s)
            eps = rng_t.standard_normal((N, n_u))
            u_new = prop_mean + np.einsum("...ij,...j->...i", s_chol, eps)
            mean_pred, gamma_pred, _ = mixed_time_update_arrays(
                mean_prev, gamma_prev, u_new, g, b, gm, f, a, fm
            )

        h, c, rchol = measurement_fn(ti + 1, u_new, mean_pred)
        mean_cur, gamma_cur, loglik = meas_update_arrays(
            mean_pred, gamma_pred, h, c, rchol, y[ti]
        )
        particles[ti] = u_new
        means[ti], sqrt_covs[ti] = mean_cur, gamma_cur
        logw = base_logw + loglik
        weights[ti], ess_hist[ti] = _normalize_or_raise(logw, ti + 1)
        if record:
            rec_h[ti], rec_c[ti], rec_rchol[ti] = measurement_fn(
                ti + 1, u_new, mean_cur
            )
            rec_lin[ti] = mean_cur

    return FilterOutput(
        flavor=flavor,
        y=y,
        particles=particles,
        weights=weights,
        ancestors=ancestors,
        means=means,
        sqrt_covs=sqrt_covs,
        ess=ess_hist,
        resampled=resampled,
        meas_h=rec_h,
        meas_c=rec_c,
        meas_rchol=rec_rchol,
        dyn_blocks=rec_dyn,
        lin_points=rec_lin,
        dyn_lin_points=rec_dyn_lin,
    )


def _normalize_or_raise(logw, t_onebased):
    w, lse = normalize_log_weights(logw)
    if not np.isfinite(lse):
        raise AllWeightsZero(
            f"all particle weights underflowed at t={t_onebased}", log_weights=logw
        )
    return w, ess(w)


# ---------------------------------------------------------------------------
# measurement/dynamics sources shared by backward passes and smoothers
# ---------------------------------------------------------------------------


class MeasSource:
    """Uniform access to (h, C, R_chol), exact or recorded per (t, i)."""

    def __init__(self, model=None, filt: Optional[FilterOutput] = None):
        self._model = model
        self._filt = filt
        self._recorded = filt is not None and filt.meas_h is not None
        if not self._recorded and (model is None or getattr(model, "meas", None) is None):
            raise ValueError(
                "model has no linear measurement; run the filter through the "
                "approximate layer so matrices are recorded"
            )

    @property
    def recorded(self) -> bool:
        return self._recorded

    def at_indices(self, t_onebased: int, idx):
        ti = t_onebased - 1
        if self._recorded:
            return (
                self._filt.meas_h[ti][idx],
                self._filt.meas_c[ti][idx],
                self._filt.meas_rchol[ti][idx],
            )
        return self.at_values(t_onebased, self._filt.particles[ti][idx])

    def at_values(self, t_onebased: int, u_stack):
        if self._recorded:
            raise ValueError("recorded measurement matrices are keyed by particle")
        h, c, r = mod.eval_meas(self._model, np.asarray(u_stack, dtype=float),
                                t_onebased)
        return h, c, chol_psd_stack(r)


class DynSource:
    """Uniform access to dynamics blocks, exact or recorded per (t, i)."""

    def __init__(self, model=None, filt: Optional[FilterOutput] = None):
        self._model = model
        self._filt = filt
        self._recorded = filt is not None and filt.dyn_blocks is not None

    @property
    def recorded(self) -> bool:
        return self._recorded

    def at_indices(self, t_onebased: int, idx):
        ti = t_onebased - 1
        if self._recorded:
            return tuple(bl[ti][idx] for bl in self._filt.dyn_blocks)
        return tuple(
            np.asarray(m)
            for m in mod.eval_dyn(self._model, self._filt.particles[ti][idx],
                                  t_onebased)
        )

    def at_values(self, t_onebased: int, u_stack):
        if self._recorded:
            raise ValueError("recorded dynamics blocks are keyed by particle")
        return mod.eval_dyn(self._model, np.asarray(u_stack, dtype=float), t_onebased)
