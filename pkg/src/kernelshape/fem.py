"""P1 finite elements for the two-phase transmission problem.

State:   find u in V_h0 with  int beta_chi grad u . grad v = int f v
Adjoint: find p in V_h0 with  int beta_chi grad v . grad p = -int 2 (u - u_d) v

All volume integrals use the three-point edge-midpoint rule, which is exact
for the piecewise quadratic integrands produced by P1 fields.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline

from .mesh import PLUS, MINUS, ShapeSpec, TriMesh, generate_mesh, locate, validate

logger = logging.getLogger(__name__)

# barycentric coordinates of the edge midpoints; row q is the midpoint of
# the edge opposite local vertex q
MIDPOINT_BARY = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])

DEFAULT_CG_TOL = 1e-10


class SolverError(RuntimeError):
    """Conjugate gradients did not reach the requested tolerance."""

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)

    @property
    def achieved(self):
        return self.residuals[-1] if self.residuals else np.nan


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScalarFieldP1:
    """Nodal values of a continuous piecewise linear function on ``mesh``."""

    values: np.ndarray
    mesh: TriMesh

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.shape[0] != self.mesh.n_vertices:
            raise ValueError("field length must equal the vertex count")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def element_gradients(self, mesh=None):
        m = self.mesh if mesh is None else mesh
        return np.einsum("ki,kid->kd", self.values[m.triangles], m.basis_gradients)

    def at_quadrature(self, mesh=None):
        m = self.mesh if mesh is None else mesh
        return self.values[m.triangles] @ MIDPOINT_BARY.T

    def sample(self, mesh):
        """Values ``(nt, 3)`` and gradients ``(nt, 3, 2)`` at the midpoints of ``mesh``.

        The field is read nodally, so ``mesh`` must share this field's
        connectivity (e.g. a deformed copy): the field moves with the mesh.
        """
        if mesh.triangles.shape != self.mesh.triangles.shape or mesh.n_vertices != self.mesh.n_vertices:
            raise ValueError("nodal sampling needs identical connectivity")
        g = self.element_gradients(mesh)
        return self.at_quadrature(mesh), np.repeat(g[:, None, :], 3, axis=1)

    def sample_points(self, mesh, elements, bary):
        del mesh
        g = self.element_gradients()
        vals = np.einsum("ki,ki->k", self.values[self.mesh.triangles[elements]], bary)
        return vals, g[elements]


class PointTarget:
    """Target defined by values and gradients at arbitrary points.

    Subclasses implement ``evaluate(points) -> (values, gradients)``.  The
    target stays attached to space while the computational mesh moves.
    """

    def evaluate(self, points):
        raise NotImplementedError

    def sample(self, mesh):
        pts = np.einsum("qi,kid->kqd", MIDPOINT_BARY, mesh.corners)
        vals, grads = self.evaluate(pts.reshape(-1, 2))
        return vals.reshape(-1, 3), grads.reshape(-1, 3, 2)

    def sample_points(self, mesh, elements, bary):
        pts = np.einsum("ki,kid->kd", bary, mesh.corners[elements])
        return self.evaluate(pts)


@dataclass(frozen=True, eq=False)
class BackgroundField(PointTarget):
    """A P1 field on its own fixed mesh, evaluated by point location."""

    field: ScalarFieldP1

    def evaluate(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        elems, bary = locate(self.field.mesh, pts, tol=1e-10)
        if np.any(elems < 0):
            # points on the outer boundary may miss by round-off
            miss = elems < 0
            e2, b2 = locate(self.field.mesh, np.clip(pts[miss], 0.0, 1.0), tol=1e-8)
            if np.any(e2 < 0):
                raise ValueError("target evaluated outside its mesh")
            elems[miss], bary[miss] = e2, b2
        vals = np.einsum("ki,ki->k", self.field.values[self.field.mesh.triangles[elems]], bary)
        grads = self.field.element_gradients()[elems]
        return vals, grads


class SplineTarget(PointTarget):
    """Bicubic spline through samples of a field on a regular grid of D.

    Unlike a P1 field on a foreign mesh, the spline is C^2, so the cost is a
    smooth function of the computational mesh's vertex positions.
    """

    def __init__(self, source: PointTarget, resolution=129):
        g = np.linspace(0.0, 1.0, int(resolution))
        gx, gy = np.meshgrid(g, g, indexing="ij")
        vals, _ = source.evaluate(np.column_stack([gx.ravel(), gy.ravel()]))
        self.resolution = int(resolution)
        self.spline = RectBivariateSpline(g, g, vals.reshape(gx.shape), kx=3, ky=3, s=0)

    def evaluate(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        sp_ = self.spline
        vals = sp_.ev(x, y)
        grads = np.column_stack([sp_.ev(x, y, dx=1), sp_.ev(x, y, dy=1)])
        return vals, grads


@dataclass(frozen=True)
class ProblemData:
    """Coefficients of the transmission problem.

    ``f`` is a constant or a :class:`ScalarFieldP1`; ``u_d`` is the tracking
    target (``ScalarFieldP1`` on the same connectivity, or a
    :class:`BackgroundField`), or None when only the state is needed.
    """

    beta_plus: float = 1.0
    beta_minus: float = 0.5
    f: float | ScalarFieldP1 = 1.0
    u_d: object = None

    def __post_init__(self):
        if not (self.beta_plus > 0 and self.beta_minus > 0):
            raise ValueError("conductivities must be positive")

    def beta(self, mesh):
        return np.where(mesh.labels == PLUS, self.beta_plus, self.beta_minus)

    def with_target(self, u_d):
        return ProblemData(self.beta_plus, self.beta_minus, self.f, u_d)


@dataclass(frozen=True, eq=False)
class SparseSpd:
    """Stiffness matrix restricted to the free (interior) vertices."""

    matrix: sp.csr_matrix
    free: np.ndarray
    n_total: int
    diagonal: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "diagonal", self.matrix.diagonal())

    def restrict(self, full):
        return np.asarray(full)[self.free]

    def extend(self, reduced):
        out = np.zeros(self.n_total)
        out[self.free] = reduced
        return out


def element_stiffness(mesh, coeff):
    """(nt, 3, 3) local matrices coeff_K |K| grad phi_i . grad phi_j."""
    G = mesh.basis_gradients
    return (coeff * mesh.signed_areas)[:, None, None] * np.einsum("kid,kjd->kij", G, G)


def assemble_system(mesh: TriMesh, data: ProblemData) -> SparseSpd:
    if validate(mesh, angle_floor=0.0).min_signed_area <= 0:
        raise AssemblyError("mesh has degenerate or inverted triangles")
    ke = element_stiffness(mesh, data.beta(mesh))
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    A = sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    free = np.nonzero(~mesh.boundary)[0]
    return SparseSpd(A[free][:, free].tocsr(), free, mesh.n_vertices)


def full_stiffness(mesh, coeff=1.0):
    ke = element_stiffness(mesh, np.broadcast_to(coeff, (mesh.n_triangles,)))
    t = mesh.triangles
    return sp.csr_matrix((ke.ravel(), (np.repeat(t, 3, axis=1).ravel(), np.tile(t, (1, 3)).ravel())),
                         shape=(mesh.n_vertices,) * 2)


def mass_matrix(mesh):
    """Consistent P1 mass matrix (exact with the midpoint rule)."""
    w = mesh.signed_areas / 3.0
    me = np.einsum("k,qi,qj->kij", w, MIDPOINT_BARY, MIDPOINT_BARY)
    t = mesh.triangles
    return sp.csr_matrix((me.ravel(), (np.repeat(t, 3, axis=1).ravel(), np.tile(t, (1, 3)).ravel())),
                         shape=(mesh.n_vertices,) * 2)


def load_vector(mesh, quad_values):
    """Assemble int g phi_i from values of g at the midpoints, shape (nt, 3)."""
    w = mesh.signed_areas / 3.0
    local = np.einsum("k,kq,qi->ki", w, quad_values, MIDPOINT_BARY)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.triangles, local)
    return b


def source_at_quadrature(mesh, f):
    if isinstance(f, ScalarFieldP1):
        return f.at_quadrature(mesh)
    return np.full((mesh.n_triangles, 3), float(f))


def source_gradient(mesh, f):
    """Piecewise constant gradient of f per element, (nt, 2)."""
    if isinstance(f, ScalarFieldP1):
        return f.element_gradients(mesh)
    return np.zeros((mesh.n_triangles, 2))


def cg_solve(A, b, tol=DEFAULT_CG_TOL, max_iter=None, x0=None, *, return_info=False):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= tol * ||b||``.  Raises :class:`SolverError`
    carrying the residual history if ``max_iter`` (default ``10 n``) is hit.
    """
    if isinstance(A, SparseSpd):
        diag, A = A.diagonal, A.matrix
    else:
        diag = A.diagonal() if hasattr(A, "diagonal") else np.diag(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    if np.any(diag <= 0):
        raise SolverError("matrix has a non-positive diagonal entry", [])
    inv_d = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    target = tol * bnorm
    history = [float(np.linalg.norm(r))]
    it = 0
    if history[0] <= target:
        return (x, {"iterations": 0, "residuals": history}) if return_info else x
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    while it < max_iter:
        it += 1
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if rn <= target:
            break
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise SolverError(f"CG did not converge in {max_iter} iterations "
                          f"(relative residual {history[-1] / bnorm:.3e})", history)
    if return_info:
        return x, {"iterations": it, "residuals": history}
    return x


def _solve(system, rhs_full, tol):
    if not np.any(rhs_full[system.free]):
        return np.zeros(system.n_total)
    x = cg_solve(system, system.restrict(rhs_full), tol=tol)
    return system.extend(x)


def solve_state(mesh: TriMesh, data: ProblemData, *, system=None, tol=DEFAULT_CG_TOL) -> ScalarFieldP1:
    system = assemble_system(mesh, data) if system is None else system
    rhs = load_vector(mesh, source_at_quadrature(mesh, data.f))
    return ScalarFieldP1(_solve(system, rhs, tol), mesh)


def solve_adjoint(mesh: TriMesh, data: ProblemData, u_h: ScalarFieldP1, *, system=None,
                  tol=DEFAULT_CG_TOL) -> ScalarFieldP1:
    if u_h.mesh is not mesh and u_h.mesh.n_vertices != mesh.n_vertices:
        raise ValueError("state lives on a different mesh")
    system = assemble_system(mesh, data) if system is None else system
    ud_q, _ = data.u_d.sample(mesh)
    rhs = load_vector(mesh, -2.0 * (u_h.at_quadrature(mesh) - ud_q))
    return ScalarFieldP1(_solve(system, rhs, tol), mesh)


def cost(mesh: TriMesh, u_h: ScalarFieldP1, u_d) -> float:
    """Tracking cost int_D |u_h - u_d|^2 by the midpoint rule."""
    ud_q, _ = u_d.sample(mesh)
    e = u_h.at_quadrature(mesh) - ud_q
    return float(np.sum((mesh.signed_areas / 3.0)[:, None] * e * e))


def relabel(mesh: TriMesh, shape: ShapeSpec) -> TriMesh:
    """Copy of ``mesh`` with labels from ``shape`` evaluated at element centroids."""
    labels = np.where(shape.contains(mesh.centroids), PLUS, MINUS)
    return TriMesh(mesh.vertices, mesh.triangles, labels, mesh.boundary)


def compute_target(mesh: TriMesh, target_shape: ShapeSpec, data: ProblemData, *,
                   tol=DEFAULT_CG_TOL) -> ScalarFieldP1:
    """Target state on the current mesh with the target phases read at centroids."""
    u = solve_state(relabel(mesh, target_shape), data, tol=tol)
    return ScalarFieldP1(u.values, mesh)


def background_target(target_shape: ShapeSpec, data: ProblemData, n_interface=100, grid_res=21,
                      *, resolution=129, tol=DEFAULT_CG_TOL) -> SplineTarget:
    """Target state solved once on a mesh fitted to ``target_shape``, then
    represented by a bicubic spline fixed in space."""
    m = generate_mesh(target_shape, n_interface, grid_res)
    return SplineTarget(BackgroundField(solve_state(m, data, tol=tol)), resolution)


def energy(mesh, u_h, data):
    """int beta_chi |grad u_h|^2."""
    g = u_h.element_gradients(mesh)
    return float(np.sum(data.beta(mesh) * mesh.signed_areas * np.einsum("kd,kd->k", g, g)))
