"""Radial kernels and the RKHS representation of the shape gradient.

A radial kernel is K(x, y) = phi_sigma(|x - y|^2) I with
phi_sigma(r) = phi(r / sigma).  Derivatives are the profile derivatives
evaluated at r / sigma, so chain-rule factors of 1/sigma appear explicitly in
the formulas below.

For shape tensors (S1, S0) the Riesz representative of dJ in the kernel's
Hilbert space is

    g(y) = int_D phi_sigma(|x-y|^2) S0(x) + (2/sigma) phi'_sigma(|x-y|^2) S1(x)(x-y) dx.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

_CHUNK = 256


class Profile(str, Enum):
    GAUSS = "GAUSS"
    WENDLAND = "WENDLAND"


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RadialKernel:
    profile: Profile
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "profile", Profile(self.profile))
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be positive")

    def with_sigma(self, sigma):
        return RadialKernel(self.profile, sigma)


def profile_eval(profile, s):
    """phi, phi', phi'' of the unscaled profile at s >= 0."""
    s = np.asarray(s, dtype=float)
    if profile is Profile.GAUSS:
        e = np.exp(-s)
        return e, -e, e
    # Wendland: (1 - s)_+^4 (4 s + 1)
    c = np.clip(1.0 - s, 0.0, None)
    c2 = c * c
    return c2 * c2 * (4.0 * s + 1.0), -20.0 * s * c2 * c, c2 * (80.0 * s - 20.0)


def kernel_eval(kernel: RadialKernel, r):
    """(phi_sigma(r), phi'_sigma(r), phi''_sigma(r)) for squared distances r."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("squared distance must be non-negative")
    return profile_eval(kernel.profile, r / kernel.sigma)


def _as_points(y):
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    return np.atleast_2d(y), single


def _chunks(n):
    for s in range(0, n, _CHUNK):
        yield slice(s, min(n, s + _CHUNK))


def rkhs_gradient_at(tensors, kernel: RadialKernel, y):
    """Closed-form RKHS gradient at one point (2,) or many points (m, 2)."""
    ys, single = _as_points(y)
    x, w, S1, S0 = tensors.flat()
    out = np.empty((ys.shape[0], 2))
    for sl in _chunks(ys.shape[0]):
        d = x[None, :, :] - ys[sl, None, :]
        phi, dphi, _ = kernel_eval(kernel, np.einsum("mqd,mqd->mq", d, d))
        s1d = np.einsum("qab,mqb->mqa", S1, d)
        out[sl] = (np.einsum("q,mq,qa->ma", w, phi, S0)
                   + (2.0 / kernel.sigma) * np.einsum("q,mq,mqa->ma", w, dphi, s1d))
    return out[0] if single else out


def gauss_gradient_at(tensors, sigma, y):
    """Gauss-kernel gradient written directly as
    int exp(-|x-y|^2/sigma) (S0 - (2/sigma) S1(x)(x-y)) dx, point by point."""
    ys, single = _as_points(y)
    x, w, S1, S0 = tensors.flat()
    out = np.zeros((ys.shape[0], 2))
    for m, yy in enumerate(ys):
        diff = x - yy
        g = np.exp(-np.sum(diff * diff, axis=1) / sigma)
        integrand = S0 - (2.0 / sigma) * np.matmul(S1, diff[:, :, None])[:, :, 0]
        out[m] = (w * g) @ integrand
    return out[0] if single else out


def rkhs_jacobian_at(tensors, kernel: RadialKernel, y):
    """Jacobian J[a, b] = d g_a / d y_b at one or many points."""
    ys, single = _as_points(y)
    x, w, S1, S0 = tensors.flat()
    sig = kernel.sigma
    out = np.empty((ys.shape[0], 2, 2))
    for sl in _chunks(ys.shape[0]):
        d = x[None, :, :] - ys[sl, None, :]
        _, dphi, ddphi = kernel_eval(kernel, np.einsum("mqd,mqd->mq", d, d))
        s1d = np.einsum("qab,mqb->mqa", S1, d)
        a = w[None, :] * dphi
        b = w[None, :] * ddphi
        out[sl] = (-(2.0 / sig) * (np.einsum("mq,qa,mqb->mab", a, S0, d)
                                   + np.einsum("mq,qab->mab", a, S1))
                   - (4.0 / sig**2) * np.einsum("mq,mqa,mqb->mab", b, s1d, d))
    return out[0] if single else out


def rkhs_divergence_at(tensors, kernel: RadialKernel, y):
    """Divergence of the RKHS gradient at one or many points."""
    ys, single = _as_points(y)
    x, w, S1, S0 = tensors.flat()
    sig = kernel.sigma
    tr = S1[:, 0, 0] + S1[:, 1, 1]
    out = np.empty(ys.shape[0])
    for sl in _chunks(ys.shape[0]):
        d = x[None, :, :] - ys[sl, None, :]
        _, dphi, ddphi = kernel_eval(kernel, np.einsum("mqd,mqd->mq", d, d))
        s1d = np.einsum("qab,mqb->mqa", S1, d)
        out[sl] = (-(2.0 / sig) * np.einsum("q,mq,mq->m", w, dphi,
                                            np.einsum("qa,mqa->mq", S0, d) + tr[None, :])
                   - (4.0 / sig**2) * np.einsum("q,mq,mq->m", w, ddphi,
                                                np.einsum("mqa,mqa->mq", s1d, d)))
    return out[0] if single else out


def sup_norms(tensors, kernel: RadialKernel, ys):
    """(max Frobenius norm of the Jacobian, max |divergence|) over ``ys``."""
    jac = rkhs_jacobian_at(tensors, kernel, np.atleast_2d(ys))
    div = rkhs_divergence_at(tensors, kernel, np.atleast_2d(ys))
    return float(np.linalg.norm(jac, axis=(1, 2)).max()), float(np.abs(div).max())


# -- finite-dimensional spaces spanned by kernel sections ---------------------

@dataclass(frozen=True, eq=False)
class GramSystem:
    """Scalar Gram matrix of the centers.

    For K = k I the vector-valued system is block diagonal with this matrix
    in each component, so one factorisation serves both.
    """

    centers: np.ndarray
    kernel: RadialKernel
    matrix: np.ndarray

    @property
    def block_matrix(self):
        return np.kron(np.eye(2), self.matrix)


def gram_matrix(kernel: RadialKernel, centers) -> GramSystem:
    z = np.atleast_2d(np.asarray(centers, dtype=float))
    if z.shape[0] > 1 and cKDTree(z).query_pairs(1e-14):
        raise ValueError("centers must be pairwise distinct")
    d = z[:, None, :] - z[None, :, :]
    A, _, _ = kernel_eval(kernel, np.einsum("ijd,ijd->ij", d, d))
    A = 0.5 * (A + A.T)
    return GramSystem(z, kernel, A)


def finite_dim_gradient(gram: GramSystem, F, cond_limit=1e12):
    """Coefficients alpha with A alpha = F.

    ``F`` has one row per center (one column per component).  Raises
    :class:`IllConditionedError` if the Gram matrix condition number
    exceeds ``cond_limit``.
    """
    F = np.asarray(F, dtype=float)
    if not np.any(F):
        return np.zeros_like(F)
    cond = np.linalg.cond(gram.matrix)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditionedError(
            f"Gram matrix condition number {cond:.3e} exceeds {cond_limit:.0e}; "
            "use a smaller sigma relative to the center spacing or fewer centers")
    # symmetric indefinite solve: the Wendland profile of the squared
    # distance does not give a positive definite matrix
    return scipy.linalg.solve(gram.matrix, F, assume_a="sym")


def expand(gram: GramSystem, alpha, y):
    """Evaluate sum_k alpha_k k(z_k, y)."""
    ys, single = _as_points(y)
    d = ys[:, None, :] - gram.centers[None, :, :]
    k, _, _ = kernel_eval(gram.kernel, np.einsum("mkd,mkd->mk", d, d))
    out = k @ np.asarray(alpha)
    return out[0] if single else out


def finite_dim_rkhs_gradient(tensors, kernel: RadialKernel, centers, y, cond_limit=1e12):
    """Projection of the gradient onto span{k(., z_k) e_i}, evaluated at y.

    The functional values are F_k = dJ(k(., z_k) e_i), which equal the
    closed-form gradient at z_k.
    """
    gram = gram_matrix(kernel, centers)
    F = rkhs_gradient_at(tensors, kernel, gram.centers)
    alpha = finite_dim_gradient(gram, F, cond_limit)
    return expand(gram, alpha, y)


def reproducing_check(kernel: RadialKernel, centers, alpha, ys):
    """Max deviation between (k(y, .), f)_H and f(y) for f = sum alpha_k k(z_k, .).

    The inner product is computed through the Gram matrix of the centers
    augmented by y, with k(y, .) and f as coefficient vectors in that span;
    f(y) is evaluated directly.
    """
    z = np.atleast_2d(np.asarray(centers, dtype=float))
    alpha = np.asarray(alpha, dtype=float)
    worst = 0.0
    for y in np.atleast_2d(ys):
        aug = np.vstack([z, y])
        d = aug[:, None, :] - aug[None, :, :]
        A, _, _ = kernel_eval(kernel, np.einsum("ijd,ijd->ij", d, d))
        c_f = np.append(alpha, 0.0)
        c_y = np.zeros(len(aug))
        c_y[-1] = 1.0
        inner = c_y @ A @ c_f
        diff = z - y
        direct = kernel_eval(kernel, np.sum(diff * diff, axis=1))[0] @ alpha
        worst = max(worst, abs(inner - direct))
    return worst
