"""Approximate Rao-Blackwellization: synthesize per-step CLG matrices from
black-box nonlinear maps via a Gaussian approximation scheme.

A scheme turns a (map, input Gaussian, noise dimension) triple into a joint
Gaussian of (output, input).  Anchored at an artificial prior N(mu, sigma),
the joint factorizes into conditionally linear blocks in which the prior
cancels exactly, so only the anchor point matters for a first-order Taylor
scheme; the anchor covariance never enters.  The forward filter anchors
measurement synthesis at each particle's predicted mean and dynamics
synthesis at the filtered mean, records the synthesized matrices per
(t, particle), and the backward pass reuses exactly those matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backward import backward_simulate, smooth_trajectories
from .exceptions import NonFiniteJacobian, RDegenerate, SigmaSingular
from .forward import rbpf_run
from .gauss import bt, chol_psd, chol_psd_stack, symmetrize
from .models import GeneralModel, HierarchicalModel, MixedModel

__all__ = [
    "ArtificialPrior",
    "Taylor1Scheme",
    "UnscentedScheme",
    "taylor1_joint",
    "approx_dynamics",
    "approx_measurement",
    "linearized_measurement_fn",
    "synthesized_dynamics_fn",
    "approx_rbpf_rbps_run",
    "wrap_mixed_as_general",
    "wrap_hier_meas_as_map",
]

FD_REL_STEP = 1e-6


@dataclass
class ArtificialPrior:
    """Anchor Gaussian for the approximation scheme; cancels in the recursions."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))


def fd_jacobians(map_fn, x0, noise_dim, step=FD_REL_STEP):
    """Central-difference Jacobians of y = map_fn(x, v) at (x0, 0).

    ``x0`` may carry leading batch dimensions; ``map_fn`` must broadcast.
    Returns (y0, J_x, J_v) with shapes (..., m), (..., m, n), (..., m, k).
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[-1]
    k = int(noise_dim)
    v0 = np.zeros(k)
    y0 = np.asarray(map_fn(x0, v0), dtype=float)

    hx = step * (1.0 + np.abs(x0))  # (..., n)
    pert = hx[..., :, None] * np.eye(n)  # (..., n, n), row j = h_j e_j
    xp = x0[..., None, :] + pert
    xm = x0[..., None, :] - pert
    jx = (np.asarray(map_fn(xp, v0), dtype=float)
          - np.asarray(map_fn(xm, v0), dtype=float)) / (2.0 * hx[..., :, None])
    jx = bt(jx)  # (..., m, n)

    hv = step
    ev = hv * np.eye(k)
    x_b = x0[..., None, :]
    jv = (np.asarray(map_fn(x_b, ev), dtype=float)
          - np.asarray(map_fn(x_b, -ev), dtype=float)) / (2.0 * hv)
    jv = bt(jv)  # (..., m, k)
    if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(jx))
            and np.all(np.isfinite(jv))):
        raise NonFiniteJacobian("map or Jacobian non-finite at the anchor point")
    return y0, jx, jv


def taylor1_joint(map_fn, mu, sigma, noise_dim, jacobian=None):
    """First-order Taylor joint Gaussian of (map(x, v), x), x ~ N(mu, sigma).

    Returns (c, sigma_out, sigma_cross) with c = map(mu, 0),
    sigma_cross = J_x sigma and sigma_out = J_x sigma J_xᵀ + J_v J_vᵀ.
    ``jacobian(mu, 0) -> (J_x, J_v)`` optionally replaces the default
    central finite differences (relative step 1e-6).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if jacobian is not None:
        c = np.asarray(map_fn(mu, np.zeros(int(noise_dim))), dtype=float)
        jx, jv = (np.asarray(j, dtype=float) for j in jacobian(mu, np.zeros(int(noise_dim))))
        if not (np.all(np.isfinite(jx)) and np.all(np.isfinite(jv))):
            raise NonFiniteJacobian("analytic Jacobian non-finite")
    else:
        c, jx, jv = fd_jacobians(map_fn, mu, noise_dim)
    cross = jx @ sigma
    out = symmetrize(cross @ bt(jx) + jv @ bt(jv))
    return c, out, cross


class Taylor1Scheme:
    """Gaussian approximation by first-order Taylor expansion.

    Exposes both the generic moment interface (``joint``) and the direct
    linearization (``linearize``); the latter keeps the synthesized blocks
    exactly independent of the anchor covariance.
    """

    def __init__(self, jacobian=None, step=FD_REL_STEP):
        self.jacobian = jacobian
        self.step = step

    def joint(self, map_fn, mu, sigma, noise_dim):
        return taylor1_joint(map_fn, mu, sigma, noise_dim, jacobian=self.jacobian)

    def linearize(self, map_fn, mu, noise_dim):
        if self.jacobian is not None:
            c = np.asarray(map_fn(np.asarray(mu, dtype=float),
                                  np.zeros(int(noise_dim))), dtype=float)
            jx, jv = self.jacobian(mu, np.zeros(int(noise_dim)))
            return c, np.asarray(jx, dtype=float), np.asarray(jv, dtype=float)
        return fd_jacobians(map_fn, mu, noise_dim, self.step)


class UnscentedScheme:
    """Interface reserved; the benchmark experiments use linearization."""

    def joint(self, map_fn, mu, sigma, noise_dim):
        raise NotImplementedError("unscented scheme is reserved, not implemented")


def _conditional_blocks(c, sigma_out, sigma_cross, mu, sigma):
    """Factor the joint Gaussian into x|z blocks: gain, offset, residual cov."""
    try:
        gain = bt(np.linalg.solve(symmetrize(sigma), bt(sigma_cross)))
    except np.linalg.LinAlgError as exc:
        raise SigmaSingular(str(exc)) from exc
    if not np.all(np.isfinite(gain)):
        raise SigmaSingular("anchor covariance is numerically singular")
    offset = c - np.einsum("...ij,...j->...i", gain, mu)
    resid = symmetrize(sigma_out - gain @ bt(sigma_cross))
    return gain, offset, resid


def approx_dynamics(gmodel, u, prior: ArtificialPrior, scheme, t=1):
    """Synthesize mixed-model blocks (g, B, G, f, A, F) from general dynamics.

    The joint noise factor [G; F] is a semidefinite Cholesky factor of the
    residual covariance, which may be singular.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n_u = gmodel.n_u

    def map_fn(z, v):
        return gmodel.dyn_map(u, z, v, t)

    if hasattr(scheme, "linearize"):
        c, jx, jv = scheme.linearize(map_fn, prior.mu, gmodel.n_v)
        gain = jx
        offset = c - jx @ prior.mu
        resid = symmetrize(jv @ bt(jv))
    else:
        c, s_out, s_cross = scheme.joint(map_fn, prior.mu, prior.sigma, gmodel.n_v)
        gain, offset, resid = _conditional_blocks(c, s_out, s_cross, prior.mu,
                                                  prior.sigma)
    noise = chol_psd(resid)
    return (
        offset[:n_u],
        gain[:n_u],
        noise[:n_u],
        offset[n_u:],
        gain[n_u:],
        noise[n_u:],
    )


def approx_measurement(model, u, prior: ArtificialPrior, scheme, t=1):
    """Synthesize a linear measurement (h, C, R) from a measurement map.

    R is the residual covariance and must be positive definite.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))

    def map_fn(z, e):
        return model.meas_map(u, z, e, t)

    if hasattr(scheme, "linearize"):
        d, jx, jv = scheme.linearize(map_fn, prior.mu, model.n_e)
        gain = jx
        offset = d - jx @ prior.mu
        resid = symmetrize(jv @ bt(jv))
    else:
        d, s_out, s_cross = scheme.joint(map_fn, prior.mu, prior.sigma, model.n_e)
        gain, offset, resid = _conditional_blocks(d, s_out, s_cross, prior.mu,
                                                  prior.sigma)
    try:
        np.linalg.cholesky(resid)
    except np.linalg.LinAlgError as exc:
        raise RDegenerate("synthesized R is not positive definite") from exc
    return offset, gain, resid


# ---------------------------------------------------------------------------
# per-particle synthesis plugged into the forward filter
# ---------------------------------------------------------------------------


def _aligned_map(raw_map, u_arr, base_ndim, t):
    """Adapt raw_map(u, z, e, t) to map_fn(z, e): inserts perturbation axes
    into u so it broadcasts against the finite-difference stacks of z."""

    def map_fn(z, e):
        z = np.asarray(z, dtype=float)
        u = u_arr
        for _ in range(z.ndim - base_ndim):
            u = u[..., None, :]
        return np.asarray(raw_map(u, z, e, t), dtype=float)

    return map_fn


def linearized_measurement_fn(model, scheme: Optional[Taylor1Scheme] = None):
    """Measurement provider: linearize the map at each particle's current
    predicted mean (the filter-mean policy)."""
    scheme = scheme or Taylor1Scheme()

    def fn(t, u_stack, pred_means):
        u_arr = np.asarray(u_stack, dtype=float)
        pred_means = np.asarray(pred_means, dtype=float)
        map_fn = _aligned_map(model.meas_map, u_arr, pred_means.ndim, t)
        d, jx, jv = fd_jacobians(map_fn, pred_means, model.n_e, scheme.step)
        h = d - np.einsum("...ij,...j->...i", jx, pred_means)
        r = symmetrize(jv @ bt(jv))
        try:
            rchol = np.linalg.cholesky(r)
        except np.linalg.LinAlgError as exc:
            raise RDegenerate("synthesized R is not positive definite") from exc
        return h, jx, rchol

    return fn


def synthesized_dynamics_fn(gmodel: GeneralModel, scheme: Optional[Taylor1Scheme] = None):
    """Dynamics provider for general models: per-particle Taylor-1 blocks
    anchored at the filtered means."""
    scheme = scheme or Taylor1Scheme()
    n_u = gmodel.n_u

    def fn(t, u_stack, filt_means):
        u_arr = np.asarray(u_stack, dtype=float)
        filt_means = np.asarray(filt_means, dtype=float)
        map_fn = _aligned_map(gmodel.dyn_map, u_arr, filt_means.ndim, t)
        c, jx, jv = fd_jacobians(map_fn, filt_means, gmodel.n_v, scheme.step)
        offset = c - np.einsum("...ij,...j->...i", jx, filt_means)
        noise = chol_psd_stack(symmetrize(jv @ bt(jv)))
        return (
            offset[..., :n_u],
            jx[..., :n_u, :],
            noise[..., :n_u, :],
            offset[..., n_u:],
            jx[..., n_u:, :],
            noise[..., n_u:, :],
        )

    return fn


def _mixed_view(gmodel: GeneralModel) -> MixedModel:
    """Mixed-model shell for a general model driven entirely by recorded
    synthesized blocks (its own callbacks are never evaluated)."""

    def _unavailable(*args, **kwargs):
        raise RuntimeError("synthesized model has no closed-form callbacks")

    return MixedModel(
        n_u=gmodel.n_u, n_z=gmodel.n_z, n_v=gmodel.n_u + gmodel.n_z,
        n_y=gmodel.n_y, dyn=_unavailable, meas=None,
        init_u=gmodel.init_u, init_z=gmodel.init_z,
        vectorized=True, name=f"{gmodel.name}-synthesized",
    )


def approx_rbpf_rbps_run(
    gmodel,
    y,
    n_particles: int,
    n_traj: int,
    seed: int = 0,
    scheme: Optional[Taylor1Scheme] = None,
    resample: str = "ess",
):
    """Forward approximate RBPF plus Rao-Blackwellized backward smoothing.

    Supports hierarchical models whose measurement is a nonlinear map
    (dynamics stay exact), and general models, whose dynamics and
    measurement are both synthesized per particle.  The backward pass and
    the linear-state smoothing reuse the matrices recorded during forward
    filtering, keyed by (time, particle).

    Returns (filter output, smoothed backward trajectories).
    """
    scheme = scheme or Taylor1Scheme()
    if isinstance(gmodel, HierarchicalModel) and gmodel.meas_map is not None:
        meas_fn = linearized_measurement_fn(gmodel, scheme)
        filt = rbpf_run(
            gmodel, y, n_particles, seed=seed, resample=resample,
            measurement_fn=meas_fn, record=True,
        )
        model_for_backward = gmodel
    elif isinstance(gmodel, GeneralModel):
        meas_fn = linearized_measurement_fn(gmodel, scheme)
        dyn_fn = synthesized_dynamics_fn(gmodel, scheme)
        view = _mixed_view(gmodel)
        filt = rbpf_run(
            view, y, n_particles, seed=seed, resample=resample,
            measurement_fn=meas_fn, dynamics_fn=dyn_fn, record=True,
        )
        model_for_backward = view
    else:
        raise TypeError(
            "approximate pipeline expects a HierarchicalModel with a "
            "measurement map or a GeneralModel"
        )
    trajs = backward_simulate(filt, model_for_backward, n_traj, seed=seed + 1)
    smooth_trajectories(model_for_backward, trajs, filt)
    return filt, trajs


# ---------------------------------------------------------------------------
# wrappers used for exactness checks
# ---------------------------------------------------------------------------


def wrap_mixed_as_general(model: MixedModel) -> GeneralModel:
    """Expose a mixed CLG model through the black-box general interface."""

    def dyn_map(u, z, v, t):
        g, b, gm, f, a, fm = model.dyn(u, t)
        u_next = np.asarray(g) + np.einsum("...ij,...j->...i", np.asarray(b), z) \
            + np.einsum("...ij,...j->...i", np.asarray(gm), v)
        z_next = np.asarray(f) + np.einsum("...ij,...j->...i", np.asarray(a), z) \
            + np.einsum("...ij,...j->...i", np.asarray(fm), v)
        return np.concatenate([u_next, z_next], axis=-1)

    def meas_map(u, z, e, t):
        h, c, r = model.meas(u, t)
        rchol = chol_psd_stack(np.asarray(r))
        return np.asarray(h) + np.einsum("...ij,...j->...i", np.asarray(c), z) \
            + np.einsum("...ij,...j->...i", rchol, e)

    return GeneralModel(
        n_u=model.n_u, n_z=model.n_z, n_v=model.n_v, n_e=model.n_y,
        n_y=model.n_y, dyn_map=dyn_map, meas_map=meas_map,
        init_u=model.init_u, init_z=model.init_z,
        vectorized=model.vectorized, name=f"{model.name}-as-general",
    )


def wrap_hier_meas_as_map(model: HierarchicalModel) -> HierarchicalModel:
    """Replace a linear measurement by the equivalent black-box map."""
    assert model.meas is not None

    def meas_map(u, z, e, t):
        h, c, r = model.meas(u, t)
        rchol = chol_psd_stack(np.asarray(r))
        return np.asarray(h) + np.einsum("...ij,...j->...i", np.asarray(c), z) \
            + np.einsum("...ij,...j->...i", rchol, e)

    return HierarchicalModel(
        n_u=model.n_u, n_z=model.n_z, n_v=model.n_v, n_y=model.n_y,
        trans_sample=model.trans_sample, trans_logpdf=model.trans_logpdf,
        dyn=model.dyn, init_u=model.init_u, init_z=model.init_z,
        meas=None, meas_map=meas_map, n_e=model.n_y,
        vectorized=model.vectorized, name=f"{model.name}-meas-map",
    )
