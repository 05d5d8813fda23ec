"""Descent directions: Riesz representatives of dJ_vol in three metrics.

All fields are (n_vertices, 2) arrays that vanish on the outer boundary, so
they can be used directly as mesh deformations.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .kernels import Profile, RadialKernel, kernel_eval, rkhs_gradient_at
from .mesh import boundary_constraint_mask, interface_vertex_mask
from .shape_calculus import volume_load


class MethodKind(str, Enum):
    RKHS_GAUSS = "RKHS_GAUSS"
    RKHS_WENDLAND = "RKHS_WENDLAND"
    H1 = "H1"
    EUCLIDEAN = "EUCLIDEAN"


class ConfigError(ValueError):
    pass


def parse_kind(text) -> MethodKind:
    if isinstance(text, MethodKind):
        return text
    key = str(text).strip().upper()
    try:
        return MethodKind(key)
    except ValueError:
        valid = ", ".join(k.value for k in MethodKind)
        raise ConfigError(f"unknown gradient method {text!r}; valid options: {valid}") from None


@dataclass(frozen=True)
class GradientMethod:
    kind: MethodKind
    sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("sigma must be positive")

    @property
    def is_rkhs(self):
        return self.kind in (MethodKind.RKHS_GAUSS, MethodKind.RKHS_WENDLAND)

    def kernel(self, sigma=None) -> RadialKernel:
        if not self.is_rkhs:
            raise ConfigError(f"{self.kind.value} has no kernel")
        s = self.sigma if sigma is None else sigma
        if s is None:
            raise ConfigError(f"{self.kind.value} requires sigma")
        prof = Profile.GAUSS if self.kind is MethodKind.RKHS_GAUSS else Profile.WENDLAND
        return RadialKernel(prof, s)


def rkhs_gradient_field(mesh, tensors, kernel: RadialKernel, mode="closed"):
    """RKHS gradient at every vertex, zeroed on the outer boundary.

    ``mode="closed"`` (default) evaluates the closed-form integral
    :func:`kernels.rkhs_gradient_at` and projects the boundary values to zero.
    That integral also responds to X on the fixed outer boundary, and for
    large sigma its projection need not be a descent direction.

    ``mode="discrete"`` represents the functional X -> dJ_vol(I_h X), where
    I_h interpolates X at the interior vertices only:
    g(y) = sum_i k(y, z_i) dJ_vol(phi_i e_c).  Then dJ_vol(g) = L^T K L >= 0,
    so -g is a descent direction exactly.
    """
    if mode == "closed":
        g = rkhs_gradient_at(tensors, kernel, mesh.vertices)
    elif mode == "discrete":
        L = volume_load(tensors)
        inner = np.nonzero(~mesh.boundary)[0]
        g = np.zeros((mesh.n_vertices, 2))
        z = mesh.vertices
        for s in range(0, mesh.n_vertices, 512):
            d = z[s:s + 512, None, :] - z[None, inner, :]
            k, _, _ = kernel_eval(kernel, np.einsum("mkd,mkd->mk", d, d))
            g[s:s + 512] = k @ L[inner]
    else:
        raise ConfigError(f"unknown RKHS mode {mode!r}; valid: discrete, closed")
    g[mesh.boundary] = 0.0
    return g


def h1_matrix(mesh, seminorm=False):
    A = fem.full_stiffness(mesh)
    return A if seminorm else A + fem.mass_matrix(mesh)


def h1_inner(mesh, V, X, seminorm=False):
    """(V, X) in H1 (or the H1 seminorm) for P1 vector fields."""
    A = h1_matrix(mesh, seminorm)
    return float(sum(X[:, c] @ (A @ V[:, c]) for c in range(2)))


def h1_gradient_field(mesh, tensors, *, seminorm=False, tol=fem.DEFAULT_CG_TOL):
    """Solve (V, X)_H1 = dJ_vol(X) for all P1 X vanishing on the boundary."""
    A = h1_matrix(mesh, seminorm)
    free = np.nonzero(~mesh.boundary)[0]
    Af = A[free][:, free].tocsr()
    rhs = volume_load(tensors)
    V = np.zeros((mesh.n_vertices, 2))
    for c in range(2):
        b = rhs[free, c]
        if np.any(b):
            V[free, c] = fem.cg_solve(Af, b, tol=tol)
    return V


def euclidean_gradient_field(mesh, tensors):
    """Coefficients dJ_vol(phi_i e_c) of the hat basis, zeroed on the boundary."""
    V = volume_load(tensors)
    V[mesh.boundary] = 0.0
    return V


def gradient_field(method: GradientMethod, mesh, tensors, sigma=None):
    """Dispatch on ``method``; ``sigma`` overrides the method's own for RKHS."""
    if method.is_rkhs:
        return rkhs_gradient_field(mesh, tensors, method.kernel(sigma))
    if method.kind is MethodKind.H1:
        return h1_gradient_field(mesh, tensors)
    return euclidean_gradient_field(mesh, tensors)



class MeshMotion:
    """Mesh displacements driven by the interface vertices.

    Interface vertices carry a prescribed displacement; all other vertices
    follow as the solution of a Laplace problem whose element weights are
    ``|K|^-stiffness_exponent``, so small elements move almost rigidly.
    Constrained boundary components (see ``boundary_constraint_mask``) stay
    zero; with ``slide`` the tangential ones are unknowns like the bulk.

    ``extend`` is the linear map E from interface values to a full field and
    ``adjoint`` applies its transpose, which turns the hat-basis load of
    dJ_vol into the load seen by the interface vertices.
    """

    def __init__(self, mesh, slide=True, stiffness_exponent=2.0):
        self.mesh = mesh
        is_gamma = interface_vertex_mask(mesh)
        self.gamma = np.nonzero(is_gamma)[0]
        A = fem.full_stiffness(mesh, mesh.signed_areas ** (-float(stiffness_exponent))).tocsr()
        fixed = boundary_constraint_mask(mesh, slide)
        self._blocks = []
        for c in range(2):
            free = np.nonzero(~(is_gamma | fixed[:, c]))[0]
            lu = spla.splu(A[free][:, free].tocsc()) if free.size else None
            self._blocks.append((free, lu, A[free][:, self.gamma].tocsr()))

    @property
    def points(self):
        return self.mesh.vertices[self.gamma]

    def extend(self, values):
        values = np.asarray(values, dtype=float).reshape(self.gamma.size, 2)
        out = np.zeros((self.mesh.n_vertices, 2))
        out[self.gamma] = values
        for c, (free, lu, A_fg) in enumerate(self._blocks):
            if lu is not None and np.any(values[:, c]):
                out[free, c] = lu.solve(-(A_fg @ values[:, c]))
        return out

    def adjoint(self, load):
        load = np.asarray(load, dtype=float)
        out = load[self.gamma].copy()
        for c, (free, lu, A_fg) in enumerate(self._blocks):
            if lu is not None and np.any(load[free, c]):
                out[:, c] -= A_fg.T @ lu.solve(load[free, c])
        return out


def rkhs_interface_gradient(mesh, tensors, kernel: RadialKernel, motion: MeshMotion):
    """RKHS gradient of J as a function of the interface vertex positions.

    With L_eff = E^T L the interface load, the interface displacement is
    g_i = sum_j k(z_i, z_j) L_eff_j and the full field is E g.  Then
    dJ_vol(E g) = L_eff^T K L_eff >= 0.
    """
    if motion.gamma.size == 0:
        return np.zeros((mesh.n_vertices, 2))
    leff = motion.adjoint(volume_load(tensors))
    z = motion.points
    d = z[:, None, :] - z[None, :, :]
    k, _, _ = kernel_eval(kernel, np.einsum("ijd,ijd->ij", d, d))
    return motion.extend(k @ leff)
