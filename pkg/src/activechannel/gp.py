"""Exact GP regression with an RBF kernel.

Kernel::

    K_ij = alpha * exp(-0.5 * |z_i - z_j|^2 / l^2) + delta_ij * noise

All solves go through a Cholesky factor with escalating diagonal jitter.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .errors import NumericError, ShapeError

JITTER_START = 1e-6
JITTER_MAX = 1e-2
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GpHyperparams:
    alpha: float = 1.0
    lengthscale: float = 1.0
    noise: float = 1e-2

    def __post_init__(self):
        if not (self.alpha > 0 and self.lengthscale > 0 and self.noise >= 0):
            raise ValueError(f"invalid hyperparameters {self}")

    def to_log(self):
        """``[log alpha, log l, log noise]``; noise 0 maps to ``-inf``."""
        with np.errstate(divide="ignore"):
            return np.log([self.alpha, self.lengthscale, self.noise])

    @classmethod
    def from_log(cls, log_theta):
        a, l, s = np.exp(np.asarray(log_theta, dtype=float))
        return cls(float(a), float(l), float(s))


@dataclass
class PosteriorPredictive:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.variance = np.asarray(self.variance, dtype=float)
        if self.mean.shape != self.variance.shape:
            raise ShapeError("mean and variance lengths differ")

    def __len__(self):
        return self.mean.shape[0]


def sq_dist(Z1, Z2):
    diff = Z1[:, None, :] - Z2[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _as_points(Z, name):
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array of points, got shape {Z.shape}")
    return Z


def rbf_kernel(Z1, Z2, hyper, with_noise=False):
    """RBF (squared-exponential) kernel matrix between two point sets.

    ``with_noise`` adds ``noise`` on the diagonal and is only legal when
    ``Z1`` and ``Z2`` are the same set of points.
    """
    Z1 = _as_points(Z1, "Z1")
    Z2 = _as_points(Z2, "Z2")
    if Z1.shape[1] != Z2.shape[1]:
        raise ShapeError(f"point dimensions differ: {Z1.shape[1]} vs {Z2.shape[1]}")
    K = hyper.alpha * np.exp(-0.5 * sq_dist(Z1, Z2) / hyper.lengthscale ** 2)
    if with_noise:
        if Z1.shape != Z2.shape or not np.array_equal(Z1, Z2):
            raise ShapeError("with_noise requires identical point sets")
        K[np.diag_indices_from(K)] += hyper.noise
    return K


def cholesky_jitter(K):
    """Lower Cholesky factor of ``K + jitter*I`` and the jitter used.

    Tries ``K`` as is, then adds ``JITTER_START`` and escalates x10 up to
    ``JITTER_MAX``.
    """
    n = K.shape[0]
    if np.isfinite(K).all():
        jitter = 0.0
        while jitter <= JITTER_MAX * (1 + 1e-12):
            Kj = K.copy()
            Kj.flat[::n + 1] += jitter
            L, info = lapack.dpotrf(Kj, lower=1, clean=1, overwrite_a=1)
            if info == 0:
                return L, jitter
            jitter = JITTER_START if jitter == 0.0 else jitter * 10
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(K) if np.isfinite(K).all() else np.inf
    raise NumericError("Cholesky failed after jitter escalation", condition=float(cond), max_jitter=JITTER_MAX)


def cho_solve(L, b):
    x, info = lapack.dpotrs(L, b, lower=1)
    if info != 0:
        raise NumericError("triangular solve failed", info=int(info))
    return x


def cho_inverse(L):
    """``(L L^T)^-1`` from a lower factor whose upper triangle is zero."""
    inv, info = lapack.dpotri(L, lower=1)
    if info != 0:
        raise NumericError("inverse from Cholesky failed", info=int(info))
    out = inv + inv.T
    out.flat[::inv.shape[0] + 1] *= 0.5
    return out


def log_marginal_likelihood(Z, y, hyper, grad=True):
    """Log-density of ``y`` under ``N(0, K(Z))``.

    Returns
    -------
    value : float
    dZ : ndarray ``[n x q]``
        Gradient w.r.t. the kernel input points (only with ``grad``).
    dlog : ndarray ``[3]``
        Gradient w.r.t. ``(log alpha, log l, log noise)`` (only with ``grad``).
    """
    Z = _as_points(Z, "Z")
    y = np.asarray(y, dtype=float)
    n = Z.shape[0]
    if y.shape != (n,):
        raise ShapeError(f"targets shape {y.shape} does not match {n} points")
    if n < 1:
        raise ShapeError("need at least one training point")
    a, l, s = hyper.alpha, hyper.lengthscale, hyper.noise
    D = sq_dist(Z, Z)
    Kf = a * np.exp(-0.5 * D / l ** 2)
    K = Kf.copy()
    K[np.diag_indices(n)] += s
    L, _ = cholesky_jitter(K)
    beta = cho_solve(L, y)
    value = -0.5 * y @ beta - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    if not grad:
        return float(value)
    W = 0.5 * (np.outer(beta, beta) - cho_inverse(L))
    M = W * Kf
    d_log_alpha = M.sum()
    d_log_l = (M * D).sum() / l ** 2
    d_log_noise = s * np.trace(W)
    # K_ij depends on z_i and z_j; M symmetric so both slots contribute equally
    dZ = (-2.0 / l ** 2) * (M.sum(axis=1)[:, None] * Z - M @ Z)
    return float(value), dZ, np.array([d_log_alpha, d_log_l, d_log_noise])


def posterior_predictive(Ztrain, y, Zstar, hyper, full_cov=False):
    """Posterior predictive of the latent function at ``Zstar``.

    The noise term enters the training covariance only, so the variance is
    that of the noiseless latent function. Returns
    :class:`PosteriorPredictive` (and the full covariance if ``full_cov``).
    """
    Ztrain = _as_points(Ztrain, "Ztrain")
    Zstar = _as_points(Zstar, "Zstar")
    y = np.asarray(y, dtype=float)
    if Ztrain.shape[0] == 0:
        raise ShapeError("empty training set")
    if y.shape != (Ztrain.shape[0],):
        raise ShapeError(f"targets shape {y.shape} does not match {Ztrain.shape[0]} points")
    K = rbf_kernel(Ztrain, Ztrain, hyper, with_noise=True)
    L, _ = cholesky_jitter(K)
    Ks = rbf_kernel(Zstar, Ztrain, hyper)
    mean = Ks @ cho_solve(L, y)
    V, info = lapack.dtrtrs(L, Ks.T, lower=1)
    if info != 0:
        raise NumericError("triangular solve failed", info=int(info))
    var = np.maximum(hyper.alpha - np.einsum("ij,ij->j", V, V), 0.0)
    pred = PosteriorPredictive(mean, var)
    if full_cov:
        cov = rbf_kernel(Zstar, Zstar, hyper) - V.T @ V
        return pred, cov
    return pred
