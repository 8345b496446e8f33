"""Shared fixtures: small randomized models exercising both CLG flavors."""

import math

import numpy as np
import pytest

from clgsmooth.gauss import MomentGaussian
from clgsmooth.models import GaussianInitial, HierarchicalModel, MixedModel


def _stable(rng, n, radius=0.9):
    a = rng.standard_normal((n, n))
    return a * (radius / max(abs(np.linalg.eigvals(a))))


def make_hier_model(rng, n_z=2, n_v=None, n_y=1, rank_deficient_f=False,
                    u_dependent=True):
    """Random hierarchical CLG model with a Gaussian nonlinear random walk."""
    n_v = n_z if n_v is None else n_v
    a0 = _stable(rng, n_z, 0.85)
    a1 = 0.1 * rng.standard_normal((n_z, n_z))
    f0 = rng.standard_normal(n_z)
    fm0 = 0.5 * rng.standard_normal((n_z, n_v))
    if rank_deficient_f:
        fm0[:, -1] = 0.0
        if n_z > 1:
            fm0[-1] = 0.0
    c0 = rng.standard_normal((n_y, n_z))
    h0 = rng.standard_normal(n_y)
    r_half = rng.standard_normal((n_y, n_y))
    r0 = r_half @ r_half.T + 0.5 * np.eye(n_y)
    phi = 0.8
    sig = 0.6
    dep = 1.0 if u_dependent else 0.0

    def trans_sample(rng_, u, t):
        return phi * u + sig * rng_.standard_normal(u.shape)

    def trans_logpdf(u_next, u, t):
        d = (np.asarray(u_next) - phi * np.asarray(u))[..., 0]
        return -0.5 * (d / sig) ** 2 - math.log(sig) - 0.5 * math.log(2 * math.pi)

    def dyn(u_next, t):
        s = np.asarray(u_next)[..., 0]
        lead = s.shape
        a = a0 + dep * 0.1 * np.sin(s)[..., None, None] * a1
        f = dep * np.tanh(s)[..., None] * f0 + 0.05 * t * 0.0
        fm = np.broadcast_to(fm0, lead + fm0.shape)
        return f, a, fm

    def meas(u, t):
        s = np.asarray(u)[..., 0]
        lead = s.shape
        c = (1.0 + dep * 0.2 * np.cos(s))[..., None, None] * c0
        h = dep * 0.3 * s[..., None] * h0 + 0.1 * h0
        r = np.broadcast_to(r0, lead + r0.shape)
        return h, c, r

    return HierarchicalModel(
        n_u=1, n_z=n_z, n_v=n_v, n_y=n_y,
        trans_sample=trans_sample, trans_logpdf=trans_logpdf, dyn=dyn, meas=meas,
        init_u=GaussianInitial(np.zeros(1), np.eye(1)),
        init_z=MomentGaussian(0.3 * rng.standard_normal(n_z),
                              np.linalg.cholesky(np.eye(n_z) * 0.8)),
        vectorized=True, name="rand-hier",
    )


def make_mixed_model(rng, n_u=1, n_z=2, n_v=None, n_y=1, rank_deficient_f=False,
                     coupled_noise=True):
    """Random mixed linear/nonlinear CLG model; G Gᵀ is kept PD."""
    n_v = n_u + n_z if n_v is None else n_v
    a0 = _stable(rng, n_z, 0.8)
    b0 = 0.4 * rng.standard_normal((n_u, n_z))
    g0 = 0.5 * rng.standard_normal((n_u, n_v))
    g0[:, :n_u] += 0.8 * np.eye(n_u)  # keep Q = G Gᵀ well conditioned
    fm0 = 0.4 * rng.standard_normal((n_z, n_v))
    if not coupled_noise:
        fm0[:, :n_u] = 0.0
        g0[:, n_u:] = 0.0
    if rank_deficient_f:
        fm0[-1] = 0.0
    c0 = rng.standard_normal((n_y, n_z))
    h0 = rng.standard_normal(n_y)
    r_half = rng.standard_normal((n_y, n_y))
    r0 = r_half @ r_half.T + 0.5 * np.eye(n_y)
    f0 = rng.standard_normal(n_z)
    a1 = 0.3 * rng.standard_normal((n_z, n_z))

    def dyn(u, t):
        s = np.asarray(u)[..., 0]
        lead = s.shape
        g = 0.7 * np.asarray(u) + 0.3 * np.tanh(np.asarray(u))
        b = (1.0 + 0.2 * np.sin(s))[..., None, None] * b0
        f = 0.2 * np.cos(s)[..., None] * f0
        a = a0 + 0.1 * np.tanh(s)[..., None, None] * a1
        gm = np.broadcast_to(g0, lead + g0.shape)
        fm = np.broadcast_to(fm0, lead + fm0.shape)
        return g, b, gm, f, a, fm

    def meas(u, t):
        s = np.asarray(u)[..., 0]
        lead = s.shape
        c = (1.0 + 0.1 * np.cos(s))[..., None, None] * c0
        h = 0.2 * s[..., None] * h0
        r = np.broadcast_to(r0, lead + r0.shape)
        return h, c, r

    return MixedModel(
        n_u=n_u, n_z=n_z, n_v=n_v, n_y=n_y, dyn=dyn, meas=meas,
        init_u=GaussianInitial(np.zeros(n_u), 0.8 * np.eye(n_u)),
        init_z=MomentGaussian(0.2 * rng.standard_normal(n_z),
                              np.linalg.cholesky(0.7 * np.eye(n_z))),
        vectorized=True, name="rand-mixed",
    )


def make_tiny_hier_model():
    """1-d hierarchical model small enough for exact path enumeration."""
    phi, sig = 0.7, 0.6

    def trans_sample(rng, u, t):
        return phi * u + sig * rng.standard_normal(u.shape)

    def trans_logpdf(u_next, u, t):
        d = (np.asarray(u_next) - phi * np.asarray(u))[..., 0]
        return -0.5 * (d / sig) ** 2 - math.log(sig) - 0.5 * math.log(2 * math.pi)

    def dyn(u_next, t):
        s = np.asarray(u_next)[..., 0]
        lead = s.shape
        f = 0.3 * s[..., None]
        a = np.broadcast_to(np.array([[0.8]]), lead + (1, 1))
        fm = np.broadcast_to(np.array([[0.5]]), lead + (1, 1))
        return f, a, fm

    def meas(u, t):
        s = np.asarray(u)[..., 0]
        lead = s.shape
        h = 0.2 * s[..., None]
        c = np.broadcast_to(np.array([[1.0]]), lead + (1, 1))
        r = np.broadcast_to(np.array([[0.4]]), lead + (1, 1))
        return h, c, r

    return HierarchicalModel(
        n_u=1, n_z=1, n_v=1, n_y=1,
        trans_sample=trans_sample, trans_logpdf=trans_logpdf, dyn=dyn, meas=meas,
        init_u=GaussianInitial(np.zeros(1), np.eye(1)),
        init_z=MomentGaussian(np.zeros(1), np.eye(1)),
        vectorized=True, name="tiny-hier",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240511)
