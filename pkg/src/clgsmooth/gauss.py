"""Dense Gaussian and linear-algebra primitives shared by all filters.

Conventions used throughout the package:

* Vectors are 1-d ``ndarray``, matrices 2-d.  Most functions accept stacked
  inputs with arbitrary leading batch dimensions and broadcast across them.
* Covariances are carried as lower-triangular square-root factors
  ``L`` with ``P = L @ L.T`` wherever possible.
* All prefactors (normalizing constants, weights) live in the log domain.
* After every update that produces a symmetric matrix, the result is
  replaced by ``(M + M.T) / 2`` to bound floating-point asymmetry drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DimensionMismatch,
    NotPSD,
    SingularCovariance,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# Eigenvalue floor, relative to the spectral norm, below which a matrix is
# declared not PSD.  Square-root recursions make stricter checks spurious.
PSD_RTOL = 1e-8


def bt(a):
    """Transpose of the last two axes (batched matrix transpose)."""
    return np.swapaxes(a, -1, -2)


def symmetrize(m):
    """Return (M + Mᵀ)/2, batched over leading dimensions."""
    return 0.5 * (m + bt(m))


def _as_matrix(m):
    m = np.asarray(m, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        raise DimensionMismatch(f"expected a matrix, got shape {m.shape}")
    return m


def _as_vector(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    return v


@dataclass
class MomentGaussian:
    """Gaussian in moment form: mean and lower-triangular covariance factor.

    ``cov = sqrt_cov @ sqrt_cov.T``; ``sqrt_cov`` must be lower triangular.
    """

    mean: np.ndarray
    sqrt_cov: np.ndarray

    def __post_init__(self):
        self.mean = _as_vector(self.mean)
        self.sqrt_cov = _as_matrix(self.sqrt_cov)
        n = self.mean.shape[-1]
        if self.sqrt_cov.shape[-2:] != (n, n):
            raise DimensionMismatch(
                f"sqrt_cov shape {self.sqrt_cov.shape} does not match mean dim {n}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def cov(self) -> np.ndarray:
        return self.sqrt_cov @ bt(self.sqrt_cov)


@dataclass
class InfoPotential:
    """Unnormalized Gaussian potential exp(-(zᵀΩz - 2λᵀz)/2 + log_z).

    ``omega`` is symmetric PSD but may be rank deficient (flat directions).
    ``sqrt_omega``, when present, satisfies ``omega = sqrt_omega @ sqrt_omega.T``
    and is what the square-root recursions propagate.
    """

    omega: np.ndarray
    lam: np.ndarray
    log_z: float = 0.0
    sqrt_omega: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.omega = _as_matrix(self.omega)
        self.lam = _as_vector(self.lam)
        n = self.lam.shape[-1]
        if self.omega.shape[-2:] != (n, n):
            raise DimensionMismatch(
                f"omega shape {self.omega.shape} does not match lambda dim {n}"
            )
        if not np.isfinite(self.log_z):
            raise ValueError("log_z must be finite")

    @classmethod
    def zero(cls, n: int) -> "InfoPotential":
        return cls(np.zeros((n, n)), np.zeros(n), 0.0)

    @classmethod
    def from_sqrt(cls, sqrt_omega, lam, log_z=0.0) -> "InfoPotential":
        sqrt_omega = _as_matrix(sqrt_omega)
        omega = symmetrize(sqrt_omega @ bt(sqrt_omega))
        return cls(omega, lam, log_z, sqrt_omega=sqrt_omega)

    @property
    def dim(self) -> int:
        return self.lam.shape[-1]


def spectral_norm(m) -> float:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


def chol_psd(m, rtol: float = PSD_RTOL) -> np.ndarray:
    """Lower-triangular L with L Lᵀ = M for symmetric PSD M.

    Positive definite input goes through a plain Cholesky factorization.
    Semidefinite (singular) input falls back to an eigendecomposition
    followed by a QR step, which still yields a lower-triangular factor.

    Raises
    ------
    NotPSD
        If an eigenvalue falls below ``-rtol * ||M||``.
    """
    m = symmetrize(_as_matrix(m))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"chol_psd expects a square matrix, got {m.shape}")
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(m)
    scale = max(abs(w[0]), abs(w[-1]), np.finfo(float).tiny)
    if w[0] < -rtol * scale:
        raise NotPSD(f"minimum eigenvalue {w[0]:.3e} below -{rtol:.0e} * {scale:.3e}")
    w = np.clip(w, 0.0, None)
    half = v * np.sqrt(w)  # M = half @ half.T
    return bt(qr_upper(bt(half)))


def chol_psd_stack(m, rtol: float = PSD_RTOL) -> np.ndarray:
    """Batched :func:`chol_psd`; falls back element-wise on singular members."""
    m = symmetrize(np.asarray(m, dtype=float))
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        flat = m.reshape((-1,) + m.shape[-2:])
        out = np.empty_like(flat)
        for i, mi in enumerate(flat):
            out[i] = chol_psd(mi, rtol)
        return out.reshape(m.shape)


def qr_upper(a) -> np.ndarray:
    """Upper-triangular R with Rᵀ R = Aᵀ A and non-negative diagonal.

    Accepts stacked input; requires m >= n in the last two axes.  Rank
    deficiency is allowed and shows up as (near-)zero rows of R.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2:
        raise DimensionMismatch("qr_upper expects at least a 2-d array")
    if a.shape[-2] < a.shape[-1]:
        raise DimensionMismatch(f"qr_upper needs m >= n, got shape {a.shape[-2:]}")
    r = np.linalg.qr(a, mode="r")
    sign = np.sign(np.einsum("...ii->...i", r))
    sign[sign == 0.0] = 1.0
    return r * sign[..., :, None]


def tri_solve(chol_lower, rhs):
    """Solve L x = rhs for lower-triangular (possibly stacked) L.

    ``rhs`` may be a stack of vectors (``(..., n)``) or matrices
    (``(..., n, k)``); pass ``rhs_is_matrix`` shaped input accordingly.
    """
    if rhs.ndim == chol_lower.ndim - 1:
        return np.linalg.solve(chol_lower, rhs[..., None])[..., 0]
    return np.linalg.solve(chol_lower, rhs)


def chol_logdet(chol_lower) -> np.ndarray:
    """log det(L Lᵀ) from a (stacked) Cholesky factor."""
    diag = np.einsum("...ii->...i", chol_lower)
    return 2.0 * np.sum(np.log(diag), axis=-1)


def cho_solve_stack(chol_lower, rhs):
    """Solve (L Lᵀ) x = rhs given the (stacked) lower Cholesky factor."""
    y = tri_solve(chol_lower, rhs)
    if rhs.ndim == chol_lower.ndim - 1:
        return np.linalg.solve(bt(chol_lower), y[..., None])[..., 0]
    return np.linalg.solve(bt(chol_lower), y)


def quad_form(x, m):
    """xᵀ M x, batched."""
    return np.einsum("...i,...ij,...j->...", x, m, x)


def lemma1_integrate(c, ax, gamma, omega, lam):
    """log E[exp(-(zᵀΩz - 2λᵀz)/2)] for z = c + Ax + Γξ, ξ ~ N(0, I).

    Returns ``-log|M|/2 - γ/2`` where ``M = ΓᵀΩΓ + I`` (always invertible
    since M ⪰ I) and γ collects the quadratic, cross and constant terms of
    the integrated exponent.  Broadcasts over leading batch dimensions.

    Parameters
    ----------
    c, ax : array (..., n)
        Constant offset and the already-formed product A x.
    gamma : array (..., n, k)
        Square-root noise gain.
    omega : array (..., n, n)
        Symmetric PSD weight matrix of the quadratic.
    lam : array (..., n)
        Linear coefficient.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    ax = np.atleast_1d(np.asarray(ax, dtype=float))
    omega = _as_matrix(omega)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gamma = gamma.reshape(1, 1)
    n = omega.shape[-1]
    if c.shape[-1] != n or ax.shape[-1] != n or lam.shape[-1] != n:
        raise DimensionMismatch("lemma1_integrate: vector dims do not match omega")
    if gamma.shape[-2] != n:
        raise DimensionMismatch("lemma1_integrate: gamma rows do not match omega")
    k = gamma.shape[-1]

    om_g = omega @ gamma                                   # Ω Γ, (..., n, k)
    mmat = symmetrize(bt(gamma) @ om_g) + np.eye(k)        # M = ΓᵀΩΓ + I ⪰ I
    lm = np.linalg.cholesky(mmat)
    m_vec = lam - np.einsum("...ij,...j->...i", omega, c)  # m = λ - Ωc

    gt_om_ax = np.einsum("...ji,...j->...i", om_g, ax)     # ΓᵀΩ (Ax)
    gt_m = np.einsum("...ji,...j->...i", gamma, m_vec)     # Γᵀ m
    sol_ax = cho_solve_stack(lm, gt_om_ax)
    sol_m = cho_solve_stack(lm, gt_m)

    t_quad = quad_form(ax, omega) - np.einsum("...i,...i->...", gt_om_ax, sol_ax)
    t_cross = -2.0 * (
        np.einsum("...i,...i->...", ax, m_vec)
        - np.einsum("...i,...i->...", gt_om_ax, sol_m)
    )
    t_const = (
        quad_form(c, omega)
        - 2.0 * np.einsum("...i,...i->...", lam, c)
        - np.einsum("...i,...i->...", gt_m, sol_m)
    )
    gam = t_quad + t_cross + t_const
    out = -0.5 * chol_logdet(lm) - 0.5 * gam
    if out.ndim == 0:
        return float(out)
    return out


def fuse_info(moment: MomentGaussian, info: InfoPotential) -> MomentGaussian:
    """Combine a moment-form filter density with a backward info potential.

    Returns the moment form of the product: covariance (P⁻¹ + Ω)⁻¹ and mean
    (P⁻¹ + Ω)⁻¹ (P⁻¹ z̄ + λ), computed without inverting P via the
    push-through identity (I + PΩ)⁻¹ (z̄ + Pλ).
    """
    if info.dim != moment.dim:
        raise DimensionMismatch("fuse_info: dimension mismatch")
    mean_s, cov_s = _fuse_info_arrays(
        moment.mean, moment.sqrt_cov, info.omega, info.lam
    )
    try:
        sqrt_s = chol_psd(cov_s)
    except NotPSD as exc:
        raise SingularCovariance(f"fused covariance not PSD: {exc}") from exc
    return MomentGaussian(mean_s, sqrt_s)


def _fuse_info_arrays(mean, sqrt_cov, omega, lam):
    """Batched fusion core; returns (smoothed mean, smoothed covariance)."""
    p = sqrt_cov @ bt(sqrt_cov)
    n = p.shape[-1]
    a = np.eye(n) + p @ omega
    try:
        cov_s = np.linalg.solve(a, p)
        mean_s = np.linalg.solve(
            a, (mean + np.einsum("...ij,...j->...i", p, lam))[..., None]
        )[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    if not (np.all(np.isfinite(cov_s)) and np.all(np.isfinite(mean_s))):
        raise SingularCovariance("fusion produced non-finite moments")
    return mean_s, symmetrize(cov_s)


def log_mvn_pdf(x, mean, sqrt_cov) -> float:
    """Exact log N(x; mean, L Lᵀ) for lower-triangular L with positive diagonal."""
    x = _as_vector(x)
    mean = _as_vector(mean)
    sqrt_cov = _as_matrix(sqrt_cov)
    n = x.shape[-1]
    if mean.shape[-1] != n or sqrt_cov.shape[-2:] != (n, n):
        raise DimensionMismatch("log_mvn_pdf: shape mismatch")
    diag = np.diagonal(sqrt_cov)
    if np.any(diag <= 0.0):
        raise SingularCovariance("sqrt_cov has a non-positive diagonal entry")
    alpha = tri_solve(sqrt_cov, x - mean)
    return float(
        -0.5 * np.sum(alpha**2) - np.sum(np.log(diag)) - 0.5 * n * LOG_2PI
    )


def log_mvn_pdf_stack(x, mean, chol_lower):
    """Batched log N(x; mean, L Lᵀ); broadcasts leading dimensions."""
    diff = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    alpha = np.linalg.solve(chol_lower, diff[..., None])[..., 0]
    n = chol_lower.shape[-1]
    logdiag = np.log(np.einsum("...ii->...i", chol_lower))
    return (
        -0.5 * np.sum(alpha**2, axis=-1)
        - np.sum(logdiag, axis=-1)
        - 0.5 * n * LOG_2PI
    )


def logsumexp(logw, axis=None):
    """Stable log-sum-exp with max subtraction; -inf rows stay -inf."""
    logw = np.asarray(logw, dtype=float)
    mx = np.max(logw, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(logw - safe), axis=axis)) + np.squeeze(
            safe, axis=axis
        )
    return np.where(np.isfinite(np.squeeze(mx, axis=axis)), out, -np.inf)


def normalize_log_weights(logw, axis=-1):
    """Normalized weights from log weights via max subtraction.

    Returns (weights, log_normalizer).  Rows whose weights all underflow
    come back as NaN; callers decide whether that is an error.
    """
    logw = np.asarray(logw, dtype=float)
    lse = logsumexp(logw, axis=axis)
    w = np.exp(logw - np.expand_dims(np.where(np.isfinite(lse), lse, 0.0), axis))
    s = np.sum(w, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        return w / s, lse
