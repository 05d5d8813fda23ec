"""Shape-derivative tensors and the volume / boundary forms of dJ.

For the tracking functional J = int_D |u - u_d|^2 the derivative along a
vector field X has the distributed form

    dJ(X) = int_D S1 : DX + S0 . X dx

with
    S1 = -beta (grad u (x) grad p + grad p (x) grad u)
         + I (beta grad u . grad p - f p + |u - u_d|^2)
    S0 = -p grad f - 2 (u - u_d) grad u_d.

On the interface the jump of S1 gives the boundary forms BD1 and BD2.
Jumps are PLUS trace minus MINUS trace, with the normal pointing from PLUS
into MINUS.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import fem
from .fem import MIDPOINT_BARY, ProblemData, ScalarFieldP1
from .mesh import (PLUS, ShapeSpec, TriMesh, barycentric, deform, interface_arrays,
                   validate)

logger = logging.getLogger(__name__)

_GAUSS2 = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])


class DeformationError(ValueError):
    """A trial deformation produced an invalid mesh."""


class ExpressionKind(str, Enum):
    VOL = "VOL"
    BD1 = "BD1"
    BD2 = "BD2"
    FD = "FD"


@dataclass(frozen=True)
class DirectionalDerivative:
    value: float
    kind: ExpressionKind

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("derivative is not finite")


@dataclass(frozen=True, eq=False)
class ShapeTensors:
    """S1 and S0 sampled at the three edge midpoints of every element.

    ``points`` (nt, 3, 2), ``weights`` (nt, 3), ``S1`` (nt, 3, 2, 2),
    ``S0`` (nt, 3, 2).  ``trace`` evaluates S1 at barycentric points of given
    elements, which the boundary forms need.
    """

    mesh: TriMesh
    points: np.ndarray
    weights: np.ndarray
    S1: np.ndarray
    S0: np.ndarray
    trace: Callable = field(repr=False)
    piecewise_constant: bool = False

    def flat(self):
        """Quadrature data as flat arrays (x, w, S1, S0)."""
        return (self.points.reshape(-1, 2), self.weights.reshape(-1),
                self.S1.reshape(-1, 2, 2), self.S0.reshape(-1, 2))

    def scaled(self, c):
        tr = self.trace
        return ShapeTensors(self.mesh, self.points, self.weights, c * self.S1, c * self.S0,
                            lambda e, b: c * tr(e, b), self.piecewise_constant)


def _quadrature(mesh):
    pts = np.einsum("qi,kid->kqd", MIDPOINT_BARY, mesh.corners)
    w = np.repeat((mesh.signed_areas / 3.0)[:, None], 3, axis=1)
    return pts, w


def _s1(beta, gu, gp, scalar):
    """S1 for per-row element data; ``scalar`` is -f p + |u - u_d|^2."""
    outer = np.einsum("...a,...b->...ab", gu, gp)
    s = -beta[..., None, None] * (outer + np.swapaxes(outer, -1, -2))
    iso = beta * np.einsum("...a,...a->...", gu, gp) + scalar
    return s + iso[..., None, None] * np.eye(2)


def assemble_tensors(mesh: TriMesh, u_h: ScalarFieldP1, p_h: ScalarFieldP1,
                     data: ProblemData) -> ShapeTensors:
    for fld in (u_h, p_h):
        if fld.mesh is not mesh and fld.values.shape[0] != mesh.n_vertices:
            raise ValueError("field does not belong to this mesh")
    pts, w = _quadrature(mesh)
    beta = data.beta(mesh)
    gu = u_h.element_gradients(mesh)
    gp = p_h.element_gradients(mesh)
    gf = fem.source_gradient(mesh, data.f)
    f_q = fem.source_at_quadrature(mesh, data.f)
    u_q = u_h.at_quadrature(mesh)
    p_q = p_h.at_quadrature(mesh)
    ud_q, gud_q = data.u_d.sample(mesh)
    e_q = u_q - ud_q

    nq = 3
    S1 = _s1(np.repeat(beta[:, None], nq, 1), np.repeat(gu[:, None], nq, 1),
             np.repeat(gp[:, None], nq, 1), -f_q * p_q + e_q * e_q)
    S0 = -p_q[..., None] * gf[:, None, :] - 2.0 * e_q[..., None] * gud_q

    tri = mesh.triangles
    fvals = data.f.values if isinstance(data.f, ScalarFieldP1) else None

    def trace(elements, bary):
        elements = np.asarray(elements)
        u = np.einsum("ki,ki->k", u_h.values[tri[elements]], bary)
        p = np.einsum("ki,ki->k", p_h.values[tri[elements]], bary)
        f = (np.einsum("ki,ki->k", fvals[tri[elements]], bary) if fvals is not None
             else np.full(elements.shape[0], float(data.f)))
        ud, _ = data.u_d.sample_points(mesh, elements, bary)
        e = u - ud
        return _s1(beta[elements], gu[elements], gp[elements], -f * p + e * e)

    return ShapeTensors(mesh, pts, w, S1, S0, trace, piecewise_constant=False)


def simple_tensors(mesh: TriMesh, f1: float, f2: float) -> ShapeTensors:
    """Tensors of J = int_D f_Omega with f_Omega = f1 on PLUS, f2 on MINUS.

    Here S1 = f_Omega I and S0 = 0, constant per element.
    """
    pts, w = _quadrature(mesh)
    fo = np.where(mesh.labels == PLUS, float(f1), float(f2))
    S1 = np.repeat((fo[:, None, None] * np.eye(2))[:, None], 3, axis=1)
    S0 = np.zeros((mesh.n_triangles, 3, 2))

    def trace(elements, bary):
        del bary
        return fo[np.asarray(elements)][:, None, None] * np.eye(2)

    return ShapeTensors(mesh, pts, w, S1, S0, trace, piecewise_constant=True)


def zero_tensors(mesh: TriMesh) -> ShapeTensors:
    return simple_tensors(mesh, 0.0, 0.0)


def _check_field(mesh, X):
    X = np.asarray(X, dtype=float)
    if X.shape != (mesh.n_vertices, 2):
        raise ValueError(f"vector field must have shape ({mesh.n_vertices}, 2)")
    return X


def field_jacobian(mesh, X):
    """Element-wise DX with DX[k, a, b] = d X_a / d x_b."""
    return np.einsum("kia,kib->kab", X[mesh.triangles], mesh.basis_gradients)


def dJ_vol(tensors: ShapeTensors, X) -> float:
    mesh = tensors.mesh
    X = _check_field(mesh, X)
    DX = field_jacobian(mesh, X)
    Xq = np.einsum("qi,kia->kqa", MIDPOINT_BARY, X[mesh.triangles])
    dens = np.einsum("kqab,kab->kq", tensors.S1, DX) + np.einsum("kqa,kqa->kq", tensors.S0, Xq)
    return float(np.sum(tensors.weights * dens))


def volume_load(tensors: ShapeTensors) -> np.ndarray:
    """dJ_vol of every hat field: ``L[i, c] = dJ_vol(phi_i e_c)``."""
    mesh = tensors.mesh
    G = mesh.basis_gradients
    loc = (np.einsum("kq,kqab,kib->kia", tensors.weights, tensors.S1, G)
           + np.einsum("kq,kqa,qi->kia", tensors.weights, tensors.S0, MIDPOINT_BARY))
    out = np.zeros((mesh.n_vertices, 2))
    np.add.at(out, mesh.triangles, loc)
    return out


def _edge_gauss(mesh, edges):
    """Gauss points on each edge: returns (ne, 2, 2) coordinates."""
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    return a[:, None, :] + _GAUSS2[None, :, None] * (b - a)[:, None, :]


def _side_trace(tensors, elems, pts):
    """S1 traces from ``elems`` at points (ne, 2, 2) -> (ne, 2, 2, 2)."""
    ne = elems.shape[0]
    rep = np.repeat(elems, 2)
    bary = barycentric(tensors.mesh, rep, pts.reshape(-1, 2))
    return tensors.trace(rep, bary).reshape(ne, 2, 2, 2)


def dJ_bd(tensors: ShapeTensors, X, kind=ExpressionKind.BD2, interface=None) -> float:
    """Boundary forms on the PLUS/MINUS interface.

    BD1 = int_Gamma [S1 nu . nu] (X . nu),  BD2 = int_Gamma [S1 nu] . X.
    ``interface`` may be a precomputed ``interface_arrays`` triple.
    """
    kind = ExpressionKind(kind)
    if kind not in (ExpressionKind.BD1, ExpressionKind.BD2):
        raise ValueError("kind must be BD1 or BD2")
    mesh = tensors.mesh
    X = _check_field(mesh, X)
    idx, plus, minus = interface_arrays(mesh) if interface is None else interface
    if len(idx) == 0:
        logger.warning("empty interface: boundary derivative is 0")
        return 0.0
    d = mesh.vertices[idx[:, 1]] - mesh.vertices[idx[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    nu = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    pts = _edge_gauss(mesh, idx)
    jump = _side_trace(tensors, plus, pts) - _side_trace(tensors, minus, pts)
    Xg = X[idx[:, 0]][:, None, :] + _GAUSS2[None, :, None] * (X[idx[:, 1]] - X[idx[:, 0]])[:, None, :]
    jn = np.einsum("egab,eb->ega", jump, nu)
    if kind is ExpressionKind.BD1:
        dens = np.einsum("ega,ea->eg", jn, nu) * np.einsum("ega,ea->eg", Xg, nu)
    else:
        dens = np.einsum("ega,ega->eg", jn, Xg)
    return float(np.sum(0.5 * length[:, None] * dens))


def ibp_identity_check(tensors: ShapeTensors, X) -> float:
    """Residual of element-wise integration by parts for constant tensors.

    With S1 constant per element and S0 = 0, dJ_vol(X) equals the sum of
    edge jumps of S1 n against X: BD2 on the interface plus the remaining
    interior edges (and boundary edges, which vanish when X does).
    """
    if not tensors.piecewise_constant:
        raise ValueError("identity is only implemented for piecewise constant tensors")
    if np.any(tensors.S0 != 0):
        raise ValueError("identity requires S0 = 0")
    mesh = tensors.mesh
    X = _check_field(mesh, X)
    vol = dJ_vol(tensors, X)
    bd2 = dJ_bd(tensors, X, ExpressionKind.BD2)

    Sk = tensors.S1[:, 0]
    adj = mesh.edge_triangles
    lab = mesh.labels
    inner = adj[:, 1] >= 0
    not_gamma = ~inner | (lab[adj[:, 0]] == lab[np.maximum(adj[:, 1], 0)])
    e = mesh.edges[not_gamma]
    k0, k1 = adj[not_gamma, 0], adj[not_gamma, 1]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    d = b - a
    n = np.column_stack([d[:, 1], -d[:, 0]])  # length-weighted normal
    # orient n outward from k0: it must point away from k0's centroid
    flip = np.einsum("ed,ed->e", n, 0.5 * (a + b) - mesh.centroids[k0]) < 0
    n[flip] *= -1
    jump = Sk[k0] - np.where((k1 >= 0)[:, None, None], Sk[np.maximum(k1, 0)], 0.0)
    Xm = 0.5 * (X[e[:, 0]] + X[e[:, 1]])
    rest = float(np.sum(np.einsum("eab,eb,ea->e", jump, n, Xm)))
    return abs(vol - (bd2 + rest))


def conservation_residual(tensors: ShapeTensors) -> float:
    """max |-div S1 + S0| per element for piecewise constant tensors."""
    if not tensors.piecewise_constant:
        raise ValueError("diagnostic is only implemented for piecewise constant tensors")
    return float(np.abs(tensors.S0).max(initial=0.0))


# -- problems -----------------------------------------------------------------

@dataclass(eq=False)
class Solution:
    mesh: TriMesh
    data: ProblemData
    u: ScalarFieldP1
    J: float
    system: fem.SparseSpd
    _p: ScalarFieldP1 | None = None
    _tensors: ShapeTensors | None = None

    @property
    def p(self):
        if self._p is None:
            self._p = fem.solve_adjoint(self.mesh, self.data, self.u, system=self.system,
                                        tol=self._tol)
        return self._p

    @property
    def tensors(self):
        if self._tensors is None:
            self._tensors = assemble_tensors(self.mesh, self.u, self.p, self.data)
        return self._tensors

    _tol: float = fem.DEFAULT_CG_TOL


class TrackingProblem:
    """J = int_D |u - u_d|^2 for the transmission state u.

    ``target_mode`` selects how u_d is formed:

    * ``"background"``: solved once on a mesh fitted to ``target_shape`` and
      read at the quadrature points of whichever mesh is being evaluated;
    * ``"current"``: re-solved on every evaluated mesh with the target
      phases read at element centroids (see :func:`fem.compute_target`);
    * ``"given"``: ``data.u_d`` is used as supplied.
    """

    def __init__(self, data: ProblemData, target_shape: ShapeSpec | None = None,
                 target_mode="background", n_interface=100, grid_res=21,
                 cg_tol=fem.DEFAULT_CG_TOL):
        if target_mode not in ("background", "current", "given"):
            raise ValueError(f"unknown target mode {target_mode!r}; "
                             "valid: background, current, given")
        if target_mode != "given" and target_shape is None:
            raise ValueError("target_shape is required")
        if target_mode == "given" and data.u_d is None:
            raise ValueError("data.u_d is required for the 'given' target mode")
        self.base = data
        self.target_shape = target_shape
        self.target_mode = target_mode
        self.cg_tol = cg_tol
        self._background = None
        if target_mode == "background":
            self._background = fem.background_target(target_shape, data, n_interface, grid_res,
                                                     tol=cg_tol)

    def data_for(self, mesh):
        if self.target_mode == "background":
            return self.base.with_target(self._background)
        if self.target_mode == "current":
            return self.base.with_target(fem.compute_target(mesh, self.target_shape, self.base,
                                                            tol=self.cg_tol))
        return self.base

    def solve(self, mesh) -> Solution:
        data = self.data_for(mesh)
        system = fem.assemble_system(mesh, data)
        u = fem.solve_state(mesh, data, system=system, tol=self.cg_tol)
        J = fem.cost(mesh, u, data.u_d)
        return Solution(mesh, data, u, J, system, _tol=self.cg_tol)

    def cost(self, mesh) -> float:
        return self.solve(mesh).J

    def tensors(self, mesh) -> ShapeTensors:
        return self.solve(mesh).tensors


class GeometricProblem:
    """J = int_D f_Omega with f_Omega = f1 on PLUS, f2 on MINUS."""

    def __init__(self, f1=1.0, f2=0.0):
        self.f1, self.f2 = float(f1), float(f2)

    def cost(self, mesh) -> float:
        a = mesh.signed_areas
        return float(np.sum(np.where(mesh.labels == PLUS, self.f1, self.f2) * a))

    def tensors(self, mesh) -> ShapeTensors:
        return simple_tensors(mesh, self.f1, self.f2)


def fd_oracle(problem, mesh: TriMesh, X, t: float) -> float:
    """Central difference (J(id + tX) - J(id - tX)) / 2t; labels move with the mesh."""
    X = _check_field(mesh, X)
    if not np.any(X):
        return 0.0
    vals = []
    for s in (t, -t):
        m = deform(mesh, X, s)
        if not validate(m, angle_floor=0.0).valid:
            raise DeformationError(f"deformation by t={s:g} inverts elements; use a smaller t")
        vals.append(problem.cost(m))
    return (vals[0] - vals[1]) / (2.0 * t)


def random_direction(mesh: TriMesh, rng) -> np.ndarray:
    """Seeded smooth-ish test field: uniform(-1, 1) per component, zero on the
    outer boundary, then one Jacobi averaging pass over vertex neighbours."""
    X = rng.uniform(-1.0, 1.0, size=(mesh.n_vertices, 2))
    X[mesh.boundary] = 0.0
    indptr, nbr = mesh.vertex_neighbors
    counts = np.diff(indptr)
    sums = np.add.reduceat(X[nbr], indptr[:-1], axis=0) if nbr.size else np.zeros_like(X)
    X = (X + sums) / (1.0 + counts)[:, None]
    X[mesh.boundary] = 0.0
    return X
