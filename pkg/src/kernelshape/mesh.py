"""Body-fitted triangulations of the unit square with an internal interface.

A :class:`TriMesh` carries per-element phase labels (``PLUS`` inside the
design domain, ``MINUS`` outside).  Meshes are immutable; :func:`deform`
returns a new mesh with moved vertices and unchanged connectivity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

logger = logging.getLogger(__name__)

MINUS = 0
PLUS = 1

BOUNDARY_TOL = 1e-12


class MeshError(Exception):
    """Raised for invalid shape input or failed mesh generation."""


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def contains(self, points):
        p = np.asarray(points, dtype=float)
        d = p - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) < self.radius**2


@dataclass(frozen=True)
class ShapeSpec:
    """Union of discs describing the design domain."""

    discs: tuple[Disc, ...] = ()

    @classmethod
    def from_tuples(cls, discs):
        return cls(tuple(Disc((float(c[0]), float(c[1])), float(r)) for c, r in discs))

    def validate(self):
        for d in self.discs:
            cx, cy = d.center
            if d.radius <= 0:
                raise MeshError(f"disc {d} has non-positive radius")
            margin = min(cx, cy, 1.0 - cx, 1.0 - cy)
            if margin <= d.radius:
                raise MeshError(f"disc {d} touches or crosses the boundary of the unit square")

    def contains(self, points):
        p = np.asarray(points, dtype=float)
        inside = np.zeros(p.shape[:-1], dtype=bool)
        for d in self.discs:
            inside |= d.contains(p)
        return inside

    def signed_distance(self, points):
        """Approximate signed distance to the union boundary (negative inside)."""
        p = np.asarray(points, dtype=float)
        if not self.discs:
            return np.full(p.shape[:-1], np.inf)
        dist = [np.linalg.norm(p - np.asarray(d.center), axis=-1) - d.radius for d in self.discs]
        return np.min(dist, axis=0)


@dataclass(frozen=True)
class InterfaceEdge:
    endpoints: tuple[int, int]
    normal: np.ndarray
    length: float
    plus_element: int
    minus_element: int


@dataclass(frozen=True)
class QualityReport:
    min_signed_area: float
    min_angle: float
    valid: bool


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation of D = (0,1)^2.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counter-clockwise
    labels : (nt,) int array, ``PLUS`` or ``MINUS``
    boundary : (nv,) bool array, True for vertices on the outer boundary
    """

    vertices: np.ndarray
    triangles: np.ndarray
    labels: np.ndarray
    boundary: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        lab = np.array(self.labels, dtype=np.int8).reshape(-1)
        if self.boundary is None:
            b = on_unit_square_boundary(v)
        else:
            b = np.array(self.boundary, dtype=bool)
        if lab.shape[0] != t.shape[0]:
            raise ValueError("one label per triangle required")
        if b.shape[0] != v.shape[0]:
            raise ValueError("one boundary flag per vertex required")
        for arr in (v, t, lab, b):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "boundary", b)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @cached_property
    def corners(self):
        """(nt, 3, 2) vertex coordinates per triangle."""
        return self.vertices[self.triangles]

    @cached_property
    def signed_areas(self):
        p = self.corners
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def centroids(self):
        return self.corners.mean(axis=1)

    @cached_property
    def basis_gradients(self):
        """(nt, 3, 2) gradients of the three P1 hat functions on each triangle."""
        p = self.corners
        area2 = 2.0 * self.signed_areas
        # grad phi_i = rot90(p_{i+2} - p_{i+1}) / (2|K|)
        d = np.roll(p, -2, axis=1) - np.roll(p, -1, axis=1)
        g = np.stack([-d[..., 1], d[..., 0]], axis=-1)
        return g / area2[:, None, None]

    @cached_property
    def edges(self):
        """Unique undirected edges (ne, 2) with sorted endpoints."""
        return self._edge_data[0]

    @cached_property
    def edge_triangles(self):
        """(ne, 2) adjacent triangles per edge, -1 where missing."""
        return self._edge_data[1]

    @cached_property
    def _edge_data(self):
        t = self.triangles
        # local edge k is opposite local vertex k
        e = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        owner = np.tile(np.arange(t.shape[0]), 3)
        key = np.sort(e, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        adj = np.full((uniq.shape[0], 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        inv_sorted = inv[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = inv_sorted[1:] != inv_sorted[:-1]
        adj[inv_sorted[first], 0] = owner[order[first]]
        adj[inv_sorted[~first], 1] = owner[order[~first]]
        return uniq, adj

    @cached_property
    def vertex_neighbors(self):
        """CSR-style adjacency (indptr, indices) over mesh edges."""
        e = self.edges
        nv = self.n_vertices
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.zeros(nv + 1, dtype=np.int64)
        np.add.at(indptr, both[:, 0] + 1, 1)
        return np.cumsum(indptr), both[:, 1]

    def plus_area(self):
        return float(self.signed_areas[self.labels == PLUS].sum())


def on_unit_square_boundary(points, tol=BOUNDARY_TOL):
    p = np.asarray(points, dtype=float)
    return np.any((np.abs(p) <= tol) | (np.abs(p - 1.0) <= tol), axis=1)


# --------------------------------------------------------------------------
# interface polylines of a union of discs


def _uncovered_arcs(shape, i):
    """Angular intervals of circle ``i`` lying outside all other discs."""
    d = shape.discs[i]
    c = np.asarray(d.center)
    cuts = []
    for j, o in enumerate(shape.discs):
        if j == i:
            continue
        oc = np.asarray(o.center)
        dist = float(np.linalg.norm(oc - c))
        if dist + d.radius <= o.radius:
            return []  # fully covered
        if dist >= d.radius + o.radius or dist + o.radius <= d.radius:
            continue
        # half-angle of the covered arc, centred on direction to the other disc
        cos_a = (d.radius**2 + dist**2 - o.radius**2) / (2 * d.radius * dist)
        a = math.acos(max(-1.0, min(1.0, cos_a)))
        mid = math.atan2(oc[1] - c[1], oc[0] - c[0])
        cuts.append((mid - a, mid + a))
    if not cuts:
        return [None]  # full circle
    two_pi = 2 * math.pi
    ends = sorted({lo % two_pi for lo, _ in cuts} | {hi % two_pi for _, hi in cuts})
    free = []
    for k, a in enumerate(ends):
        b = ends[k + 1] if k + 1 < len(ends) else ends[0] + two_pi
        m = 0.5 * (a + b)
        if not any((m - lo) % two_pi < hi - lo for lo, hi in cuts):
            if free and abs(free[-1][1] - a) < 1e-14:
                free[-1] = (free[-1][0], b)
            else:
                free.append((a, b))
    return free


def interface_polylines(shape: ShapeSpec, n_interface: int):
    """Closed polylines sampling the boundary of the disc union.

    Each full circle gets ``n_interface`` equidistant vertices.  Partially
    covered circles are sampled arc by arc with the same target spacing; arc
    endpoints are the exact circle intersection points.
    """
    arcs = []
    for i, d in enumerate(shape.discs):
        c = np.asarray(d.center)
        for iv in _uncovered_arcs(shape, i):
            if iv is None:
                theta = 2 * math.pi * np.arange(n_interface) / n_interface
                pts = c + d.radius * np.column_stack([np.cos(theta), np.sin(theta)])
                arcs.append(("closed", pts))
                continue
            lo, hi = iv
            m = max(1, int(round((hi - lo) / (2 * math.pi) * n_interface)))
            theta = lo + (hi - lo) * np.arange(m + 1) / m
            pts = c + d.radius * np.column_stack([np.cos(theta), np.sin(theta)])
            arcs.append(("open", pts))
    loops = [p for kind, p in arcs if kind == "closed"]
    open_arcs = [p for kind, p in arcs if kind == "open"]
    # chain open arcs end-to-start
    while open_arcs:
        chain = [open_arcs.pop(0)]
        while True:
            tail = chain[-1][-1]
            head = chain[0][0]
            if np.linalg.norm(tail - head) < 1e-9 and len(chain) >= 1 and (len(chain) > 1 or chain[0].shape[0] > 2):
                break
            dist = [np.linalg.norm(a[0] - tail) for a in open_arcs]
            if not dist or min(dist) > 1e-9:
                raise MeshError("could not close interface polyline")
            chain.append(open_arcs.pop(int(np.argmin(dist))))
        pts = np.concatenate([a[:-1] for a in chain])
        loops.append(pts)
    return loops


def _loop_normals(loop):
    """Outward unit vertex normals of a counter-clockwise closed polyline."""
    nxt = np.roll(loop, -1, axis=0)
    prv = np.roll(loop, 1, axis=0)
    t = nxt - prv
    n = np.column_stack([t[:, 1], -t[:, 0]])
    return n / np.linalg.norm(n, axis=1)[:, None]


def _resample_closed(curve, spacing, active):
    """Walk a closed polyline placing points at the local target spacing."""
    seg = np.roll(curve, -1, axis=0) - curve
    seg_len = np.linalg.norm(seg, axis=1)
    total = seg_len.sum()
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    pts, sp = [], []
    pos = 0.0
    while pos < total - 0.5 * spacing[0] or not pts:
        k = min(int(np.searchsorted(cum, pos, side="right")) - 1, len(seg_len) - 1)
        if active[k]:
            f = (pos - cum[k]) / seg_len[k]
            pts.append(curve[k] + f * seg[k])
            sp.append(spacing[k])
        pos += spacing[k]
        if pos >= total:
            break
    return np.asarray(pts).reshape(-1, 2), np.asarray(sp)


def _segment_distance(points, a, b):
    """Distance from each point to the nearest of the segments a[k]-b[k]."""
    if a.shape[0] == 0:
        return np.full(points.shape[0], np.inf)
    tree = cKDTree(0.5 * (a + b))
    out = np.full(points.shape[0], np.inf)
    # nearest segments by midpoint, then exact distance on a small candidate set
    k = min(8, a.shape[0])
    _, idx = tree.query(points, k=k)
    idx = np.atleast_2d(idx).reshape(points.shape[0], k)
    for j in range(k):
        sa, sb = a[idx[:, j]], b[idx[:, j]]
        d = sb - sa
        s = np.clip(np.einsum("ij,ij->i", points - sa, d) / np.einsum("ij,ij->i", d, d), 0, 1)
        out = np.minimum(out, np.linalg.norm(points - sa - s[:, None] * d, axis=1))
    return out


def _greedy_filter(candidates, min_dist, accepted=None):
    """Keep candidates in order if at least ``min_dist`` from everything kept."""
    keep = []
    pts = [] if accepted is None else list(accepted)
    for k, p in enumerate(candidates):
        if pts:
            d = np.min(np.linalg.norm(np.asarray(pts) - p, axis=1))
            if d < min_dist[k]:
                continue
        pts.append(p)
        keep.append(k)
    return np.asarray(keep, dtype=np.int64)


def _triangulate(points):
    tri = Delaunay(points)
    t = tri.simplices.astype(np.int64)
    p = points[t]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = area < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    return t[np.abs(area) > 1e-14]


def _missing_segments(triangles, segments):
    t = triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    have = set(map(tuple, e.tolist()))
    return [k for k, s in enumerate(np.sort(segments, axis=1).tolist()) if tuple(s) not in have]


def _smooth(points, triangles, fixed, sweeps):
    """Laplacian smoothing of free vertices with fixed connectivity.

    A vertex move is undone if it inverts or degrades an incident triangle.
    """
    p = points.copy()
    nv = p.shape[0]
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    deg = np.bincount(e[:, 0], minlength=nv).astype(float)
    for _ in range(sweeps):
        s = np.zeros_like(p)
        np.add.at(s, e[:, 0], p[e[:, 1]])
        # each undirected edge appears twice per adjacent triangle; averaging is unaffected
        target = s / np.maximum(deg, 1)[:, None]
        new = np.where(fixed[:, None], p, target)
        old_q = _min_angle_per_triangle(p, triangles)
        new_q = _min_angle_per_triangle(new, triangles)
        bad = new_q < np.minimum(old_q, 0.35)
        if np.any(bad):
            revert = np.zeros(nv, dtype=bool)
            revert[triangles[bad].ravel()] = True
            new[revert] = p[revert]
        p = new
    return p


def _min_angle_per_triangle(points, triangles):
    p = points[triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    # sin(angle) = 2A / (product of adjacent sides); smallest angle opposite the shortest side
    ang_a = np.arcsin(np.clip(area2 / (b * c), -1, 1))
    ang_b = np.arcsin(np.clip(area2 / (a * c), -1, 1))
    ang_c = np.arcsin(np.clip(area2 / (a * b), -1, 1))
    return np.minimum(np.minimum(ang_a, ang_b), ang_c)


def generate_mesh(shape: ShapeSpec, n_interface: int = 100, grid_res: int = 21,
                  *, ring_stride: int = 4, smooth_sweeps: int = 6, max_recovery: int = 12) -> TriMesh:
    """Constrained Delaunay mesh of the unit square resolving the disc union.

    Vertices are a ``grid_res x grid_res`` background lattice, the interface
    polylines, and one coarsened offset ring on either side of the interface
    that grades the element size from the interface spacing to the lattice
    spacing.  Missing interface segments are recovered by splitting.
    """
    if n_interface < 8:
        raise MeshError("n_interface must be at least 8")
    if grid_res < 4:
        raise MeshError("grid_res must be at least 4")
    shape.validate()
    h = 1.0 / (grid_res - 1)

    g = np.linspace(0.0, 1.0, grid_res)
    gx, gy = np.meshgrid(g, g, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    on_bnd = on_unit_square_boundary(grid)

    loops = interface_polylines(shape, n_interface)
    iface = []
    segments = []
    ring_pts = []
    ring_spacing = []
    offset_used = 0.0
    for loop in loops:
        # counter-clockwise orientation
        x, y = loop[:, 0], loop[:, 1]
        if 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) < 0:
            loop = loop[::-1]
        base = sum(len(l) for l in iface)
        m = loop.shape[0]
        iface.append(loop)
        segments.extend((base + k, base + (k + 1) % m) for k in range(m))
        seg_len = np.linalg.norm(np.roll(loop, -1, axis=0) - loop, axis=1)
        s = 0.5 * (seg_len + np.roll(seg_len, 1))
        s_ring = np.minimum(ring_stride * s, 0.7 * h)
        active = s_ring > 1.5 * s
        if not active.any():
            continue
        normals = _loop_normals(loop)
        a = 0.6 * s_ring
        offset_used = max(offset_used, float(a[active].max()))
        for sign in (1.0, -1.0):
            curve = loop + sign * a[:, None] * normals
            pts, spacing = _resample_closed(curve, s_ring, active)
            ring_pts.append(pts)
            ring_spacing.append(spacing)
    iface = np.concatenate(iface) if iface else np.zeros((0, 2))
    segments = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
    seg_a, seg_b = iface[segments[:, 0]], iface[segments[:, 1]]

    if ring_pts:
        rp = np.concatenate(ring_pts)
        rs = np.concatenate(ring_spacing)
        dist_if = _segment_distance(rp, seg_a, seg_b)
        edge_margin = np.min(np.column_stack([rp, 1 - rp]), axis=1)
        ok = (dist_if >= 0.45 * 0.6 * rs) & (edge_margin >= 0.5 * rs)
        rp, rs = rp[ok], rs[ok]
        keep = _greedy_filter(rp, 0.6 * rs)
        rp = rp[keep]
    else:
        rp = np.zeros((0, 2))

    # drop lattice points that crowd the interface or the rings
    clearance = max(offset_used + 0.45 * h, 0.5 * h) if len(rp) else 0.45 * h
    inner = ~on_bnd
    if len(segments):
        d_if = _segment_distance(grid, seg_a, seg_b)
        inner &= d_if >= clearance
    if len(rp):
        d_r, _ = cKDTree(rp).query(grid)
        inner &= d_r >= 0.5 * h
    grid_keep = grid[on_bnd | inner]
    bflag = on_unit_square_boundary(grid_keep)

    points = np.concatenate([grid_keep, iface, rp])
    n_grid = grid_keep.shape[0]
    n_if = iface.shape[0]
    constraint = segments + n_grid
    fixed = np.zeros(points.shape[0], dtype=bool)
    fixed[:n_grid] = bflag
    fixed[n_grid:n_grid + n_if] = True

    tri = None
    for _ in range(max_recovery + 1):
        tri = _triangulate(points)
        missing = _missing_segments(tri, constraint)
        if not missing:
            break
        new_pts = []
        new_segs = []
        keep_segs = []
        n0 = points.shape[0]
        for k, (i, j) in enumerate(constraint):
            if k in set(missing):
                mid = 0.5 * (points[i] + points[j])
                idx = n0 + len(new_pts)
                new_pts.append(mid)
                new_segs.extend([(i, idx), (idx, j)])
            else:
                keep_segs.append((i, j))
        points = np.concatenate([points, np.asarray(new_pts)])
        fixed = np.concatenate([fixed, np.ones(len(new_pts), dtype=bool)])
        constraint = np.asarray(keep_segs + new_segs, dtype=np.int64)
        logger.debug("split %d interface segments", len(missing))
    else:
        seg = constraint[_missing_segments(tri, constraint)[0]]
        raise MeshError(f"edge recovery failed for segment {points[seg[0]]} -> {points[seg[1]]}")

    points = _smooth(points, tri, fixed, smooth_sweeps)
    # re-triangulate smoothed points; keep it only if constraints survive
    tri2 = _triangulate(points)
    if not _missing_segments(tri2, constraint):
        if _min_angle_per_triangle(points, tri2).min() >= _min_angle_per_triangle(points, tri).min():
            tri = tri2

    labels = np.where(shape.contains(points[tri].mean(axis=1)), PLUS, MINUS)
    mesh = TriMesh(points, tri, labels, on_unit_square_boundary(points))
    _check_interface_matches(mesh, constraint)
    return mesh


def _check_interface_matches(mesh, constraint):
    got = {tuple(sorted(e.endpoints)) for e in interface_edges(mesh)}
    want = {tuple(sorted(map(int, s))) for s in constraint}
    if got != want:
        extra = got - want
        lost = want - got
        bad = next(iter(extra or lost))
        raise MeshError(
            f"labelled interface does not match the constraint polyline near segment "
            f"{mesh.vertices[bad[0]]} -> {mesh.vertices[bad[1]]}")


def structured_mesh(n: int) -> TriMesh:
    """Uniform right-triangle mesh with ``n`` cells per side, all ``MINUS``."""
    g = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(g, g, indexing="xy")
    v = np.column_stack([gx.ravel(), gy.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    a = (j * (n + 1) + i).ravel()
    b, c, d = a + 1, a + n + 1, a + n + 2
    tri = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return TriMesh(v, tri, np.zeros(tri.shape[0], dtype=np.int8))


# --------------------------------------------------------------------------
# queries


def boundary_constraint_mask(mesh: TriMesh, slide: bool = False):
    """(nv, 2) mask of displacement components that must stay zero.

    Without ``slide`` both components of every boundary vertex are fixed.
    With ``slide`` only the component normal to the side a vertex lies on
    is fixed, so vertices may glide along the sides; corners stay put.
    """
    if not slide:
        return np.repeat(mesh.boundary[:, None], 2, axis=1)
    v = mesh.vertices
    on_side = (np.abs(v) <= BOUNDARY_TOL) | (np.abs(v - 1.0) <= BOUNDARY_TOL)
    return on_side & mesh.boundary[:, None]


def deform(mesh: TriMesh, V, t: float, slide: bool = False) -> TriMesh:
    """Move every vertex by ``t * V``.

    Boundary components of V are ignored (the normal ones only when
    ``slide`` is set), so the vertices stay on the boundary of D.
    """
    V = np.asarray(getattr(V, "values", V), dtype=float)
    if t == 0:
        return mesh
    disp = np.where(boundary_constraint_mask(mesh, slide), 0.0, V)
    return TriMesh(mesh.vertices + t * disp, mesh.triangles, mesh.labels, mesh.boundary)


def triangle_angles(mesh: TriMesh):
    """(nt, 3) interior angles in degrees (NaN-free for inverted triangles)."""
    p = mesh.corners
    out = np.empty((mesh.n_triangles, 3))
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        w = p[:, (k + 2) % 3] - p[:, k]
        cross = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
        out[:, k] = np.degrees(np.arctan2(np.abs(cross), np.einsum("ij,ij->i", u, w)))
    return out


def validate(mesh: TriMesh, area_floor: float = 1e-12, angle_floor: float = 5.0) -> QualityReport:
    areas = mesh.signed_areas
    min_area = float(areas.min()) if areas.size else math.inf
    min_angle = float(triangle_angles(mesh).min()) if areas.size else 180.0
    v = mesh.vertices
    inside = bool(np.all((v >= -BOUNDARY_TOL) & (v <= 1.0 + BOUNDARY_TOL)))
    return QualityReport(min_area, min_angle,
                         bool(inside and min_area > area_floor and min_angle > angle_floor))


def interface_edges(mesh: TriMesh) -> list[InterfaceEdge]:
    """Edges separating a PLUS from a MINUS triangle, normals PLUS -> MINUS."""
    idx, plus, minus = interface_arrays(mesh)
    out = []
    v = mesh.vertices
    for (a, b), kp, km in zip(idx, plus, minus):
        d = v[b] - v[a]
        length = float(np.hypot(d[0], d[1]))
        n = np.array([d[1], -d[0]]) / length
        out.append(InterfaceEdge((int(a), int(b)), n, length, int(kp), int(km)))
    return out


def interface_arrays(mesh):
    """Interface edges oriented counter-clockwise w.r.t. their PLUS triangle."""
    adj = mesh.edge_triangles
    lab = mesh.labels
    both = (adj[:, 1] >= 0)
    la = np.where(adj[:, 0] >= 0, lab[adj[:, 0]], -1)
    lb = np.where(both, lab[np.maximum(adj[:, 1], 0)], -1)
    sel = both & (la != lb)
    e = mesh.edges[sel]
    t0, t1 = adj[sel, 0], adj[sel, 1]
    plus = np.where(lab[t0] == PLUS, t0, t1)
    minus = np.where(lab[t0] == PLUS, t1, t0)
    # orient each edge as it appears in the PLUS triangle
    tri = mesh.triangles[plus]
    oriented = np.empty_like(e)
    for k in range(e.shape[0]):
        t = tri[k].tolist()
        a, b = e[k]
        ia = t.index(a)
        oriented[k] = (a, b) if t[(ia + 1) % 3] == b else (b, a)
    return oriented, plus, minus


def interface_polylines_of(mesh: TriMesh):
    """Chain interface edges into closed loops of vertex indices."""
    idx, _, _ = interface_arrays(mesh)
    nxt = {}
    for a, b in idx.tolist():
        nxt.setdefault(a, []).append(b)
    loops = []
    used = set()
    for a, b in idx.tolist():
        if (a, b) in used:
            continue
        loop = [a]
        cur, prev = b, a
        used.add((a, b))
        while cur != a:
            loop.append(cur)
            cands = [c for c in nxt.get(cur, []) if (cur, c) not in used]
            if not cands:
                raise MeshError("interface is not a closed polyline")
            used.add((cur, cands[0]))
            prev, cur = cur, cands[0]
        del prev
        loops.append(np.asarray(loop))
    return loops


def locate(mesh: TriMesh, points, tol: float = 1e-12):
    """Find the containing triangle and barycentric coordinates of points.

    Returns ``(elements, bary)`` with ``elements[k] == -1`` for points
    outside the mesh.  A single point may be passed as a length-2 sequence.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    elems = np.full(pts.shape[0], -1, dtype=np.int64)
    bary = np.full((pts.shape[0], 3), np.nan)
    tree = _centroid_tree(mesh)
    k = min(12, mesh.n_triangles)
    _, cand = tree.query(pts, k=k)
    cand = np.asarray(cand).reshape(pts.shape[0], k)
    todo = np.ones(pts.shape[0], dtype=bool)
    for j in range(k):
        if not todo.any():
            break
        rows = np.nonzero(todo)[0]
        c = cand[rows, j]
        lam = barycentric(mesh, c, pts[rows])
        hit = np.all(lam >= -tol, axis=1)
        elems[rows[hit]] = c[hit]
        bary[rows[hit]] = lam[hit]
        todo[rows[hit]] = False
    # brute force for stragglers (strongly graded meshes)
    for r in np.nonzero(todo)[0]:
        lam = barycentric(mesh, np.arange(mesh.n_triangles), np.repeat(pts[r:r + 1], mesh.n_triangles, 0))
        ok = np.nonzero(np.all(lam >= -tol, axis=1))[0]
        if ok.size:
            elems[r] = ok[0]
            bary[r] = lam[ok[0]]
    if single:
        return (int(elems[0]), bary[0]) if elems[0] >= 0 else (None, None)
    return elems, bary


def _centroid_tree(mesh):
    tree = mesh.__dict__.get("_ctree")
    if tree is None:
        tree = cKDTree(mesh.centroids)
        mesh.__dict__["_ctree"] = tree
    return tree


def barycentric(mesh, elems, pts):
    p = mesh.corners[elems]
    a = p[:, 0]
    e1 = p[:, 1] - a
    e2 = p[:, 2] - a
    r = pts - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def interface_vertex_mask(mesh: TriMesh):
    idx, _, _ = interface_arrays(mesh)
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[idx.ravel()] = True
    return mask


def _incircle(a, b, c, d):
    """Positive when d lies inside the circumcircle of counter-clockwise (a, b, c)."""
    m = np.stack([a - d, b - d, c - d], axis=-2)
    s = np.sum(m * m, axis=-1)
    return (m[:, 0, 0] * (m[:, 1, 1] * s[:, 2] - s[:, 1] * m[:, 2, 1])
            - m[:, 0, 1] * (m[:, 1, 0] * s[:, 2] - s[:, 1] * m[:, 2, 0])
            + s[:, 0] * (m[:, 1, 0] * m[:, 2, 1] - m[:, 1, 1] * m[:, 2, 0]))


def _orient(P, i, j, k):
    u = P[j] - P[i]
    v = P[k] - P[i]
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


def flip_improve(mesh: TriMesh, max_passes: int = 50) -> TriMesh:
    """Lawson edge flips towards a Delaunay mesh within each phase.

    Only edges between two triangles of the same label are flipped, so the
    interface, the labels and the vertex positions are untouched.  Flips are
    applied in passes of non-overlapping edges, worst violation first.
    """
    P = mesh.vertices
    tri = mesh.triangles.copy()
    lab = mesh.labels
    changed = False
    for _ in range(max_passes):
        cur = TriMesh(P, tri, lab, mesh.boundary)
        adj = cur.edge_triangles
        keep = adj[:, 1] >= 0
        keep[keep] = lab[adj[keep, 0]] == lab[adj[keep, 1]]
        e, t1, t2 = cur.edges[keep], adj[keep, 0], adj[keep, 1]
        if e.shape[0] == 0:
            break
        T1, T2 = tri[t1], tri[t2]
        c = T1[(T1 != e[:, [0]]) & (T1 != e[:, [1]])]
        d = T2[(T2 != e[:, [0]]) & (T2 != e[:, [1]])]
        pos = np.argmax(T1 == c[:, None], axis=1)
        rows = np.arange(T1.shape[0])
        a, b = T1[rows, (pos + 1) % 3], T1[rows, (pos + 2) % 3]
        scale = np.sum((P[a] - P[b]) ** 2, axis=1) ** 2
        viol = _incircle(P[a], P[b], P[c], P[d]) / scale
        ok = (viol > 1e-10) & (_orient(P, a, d, c) > 0) & (_orient(P, d, b, c) > 0)
        cand = np.nonzero(ok)[0]
        if cand.size == 0:
            break
        used = np.zeros(tri.shape[0], dtype=bool)
        for i in cand[np.argsort(-viol[cand], kind="stable")]:
            if used[t1[i]] or used[t2[i]]:
                continue
            used[t1[i]] = used[t2[i]] = True
            tri[t1[i]] = (a[i], d[i], c[i])
            tri[t2[i]] = (d[i], b[i], c[i])
        changed = True
    if not changed:
        return mesh
    return TriMesh(P, tri, lab, mesh.boundary)


def _star_min_angle(P, tris):
    """Smallest angle (degrees) of the triangles ``tris``; -1 if any is inverted."""
    p = P[tris]
    worst = 180.0
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        w = p[:, (k + 2) % 3] - p[:, k]
        cross = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
        if np.any(cross <= 0):
            return -1.0
        worst = min(worst, float(np.degrees(np.arctan2(cross, np.einsum("ij,ij->i", u, w))).min()))
    return worst


def smooth_vertices(mesh: TriMesh, sweeps: int = 3) -> TriMesh:
    """Quality-guarded Laplacian smoothing of the bulk vertices.

    Each vertex off the interface and off the outer boundary is moved
    towards the mean of its neighbours (full, half or quarter way), but only
    if the smallest angle of its star improves.  Interface and boundary
    vertices stay put, so the shape and D are unchanged.
    """
    P = mesh.vertices.copy()
    movable = np.nonzero(~(mesh.boundary | interface_vertex_mask(mesh)))[0]
    ip, ix = mesh.vertex_neighbors
    owner = mesh.triangles.ravel()
    order = np.argsort(owner, kind="stable")
    tp = np.searchsorted(owner[order], np.arange(mesh.n_vertices + 1))
    tri_of = order // 3
    T = mesh.triangles
    for _ in range(sweeps):
        for v in movable:
            tris = T[tri_of[tp[v]:tp[v + 1]]]
            old = P[v].copy()
            base = _star_min_angle(P, tris)
            target = P[ix[ip[v]:ip[v + 1]]].mean(axis=0)
            for a in (1.0, 0.5, 0.25):
                P[v] = old + a * (target - old)
                if _star_min_angle(P, tris) > base + 1e-9:
                    break
            else:
                P[v] = old
    return TriMesh(P, mesh.triangles, mesh.labels, mesh.boundary)


def repair(mesh: TriMesh, area_floor: float = 1e-12, angle_floor: float = 5.0,
           rounds: int = 4, sweeps: int = 3) -> TriMesh:
    """Try to restore mesh quality without touching the shape.

    Alternates same-phase edge flips and guarded bulk smoothing until
    ``validate`` passes or ``rounds`` is exhausted, and returns the last
    mesh either way.  Inverted input is returned unchanged.
    """
    if not validate(mesh, area_floor, 0.0).valid:
        return mesh
    m = mesh
    for _ in range(rounds):
        m = flip_improve(m)
        if validate(m, area_floor, angle_floor).valid:
            break
        m = smooth_vertices(m, sweeps)
        if validate(m, area_floor, angle_floor).valid:
            break
    return m


# --------------------------------------------------------------------------
# snapshot text format


SNAPSHOT_SUFFIX = ".mesh.txt"


def format_snapshot(mesh: TriMesh, fields=None) -> str:
    """Text snapshot: "nv nt", then "x y boundary_flag" per vertex, then
    "v0 v1 v2 label" per triangle.  Optional per-vertex fields follow, each
    as a "FIELD <name>" line and nv values.  Floats use 17 significant
    digits, so everything round-trips exactly."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x:.17g} {y:.17g} {int(b)}"
              for (x, y), b in zip(mesh.vertices.tolist(), mesh.boundary.tolist())]
    lines += [f"{a} {b} {c} {int(l)}"
              for (a, b, c), l in zip(mesh.triangles.tolist(), mesh.labels.tolist())]
    for name, values in (fields or {}).items():
        values = np.asarray(getattr(values, "values", values), dtype=float).reshape(-1)
        if values.shape[0] != mesh.n_vertices or not name or any(c.isspace() for c in name):
            raise MeshError(f"field {name!r} needs one value per vertex and a name without spaces")
        lines.append(f"FIELD {name}")
        lines += [f"{v:.17g}" for v in values.tolist()]
    return "\n".join(lines) + "\n"


def parse_snapshot(text: str, with_fields: bool = False):
    """Inverse of :func:`format_snapshot`.  Returns the mesh, or
    ``(mesh, {name: values})`` when ``with_fields`` is set."""
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows or len(rows[0]) != 2:
        raise MeshError("snapshot header must be 'nv nt'")
    try:
        nv, nt = int(rows[0][0]), int(rows[0][1])
    except ValueError:
        raise MeshError("snapshot header must hold two integers") from None
    if len(rows) < 1 + nv + nt:
        raise MeshError(f"snapshot has {len(rows) - 1} data lines, expected {nv + nt}")
    try:
        vert = np.array([[float(r[0]), float(r[1])] for r in rows[1:1 + nv]]).reshape(nv, 2)
        flag = np.array([int(r[2]) for r in rows[1:1 + nv]], dtype=bool)
        tri = np.array([[int(x) for x in r[:3]] for r in rows[1 + nv:1 + nv + nt]],
                       dtype=np.int64).reshape(nt, 3)
        lab = np.array([int(r[3]) for r in rows[1 + nv:1 + nv + nt]], dtype=np.int8)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed snapshot line: {exc}") from None
    if tri.size and (tri.min() < 0 or tri.max() >= nv):
        raise MeshError("triangle refers to a missing vertex")
    if np.any((lab != MINUS) & (lab != PLUS)):
        raise MeshError("labels must be 0 (MINUS) or 1 (PLUS)")
    fields = {}
    rest = rows[1 + nv + nt:]
    while rest:
        head = rest[0]
        if len(head) != 2 or head[0] != "FIELD" or len(rest) < 1 + nv:
            raise MeshError(f"malformed field section starting at {' '.join(head)!r}")
        try:
            fields[head[1]] = np.array([float(r[0]) for r in rest[1:1 + nv]])
        except ValueError as exc:
            raise MeshError(f"malformed field value: {exc}") from None
        rest = rest[1 + nv:]
    mesh = TriMesh(vert, tri, lab, flag)
    return (mesh, fields) if with_fields else mesh


def write_snapshot(mesh: TriMesh, path, fields=None) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_snapshot(mesh, fields))


def read_snapshot(path, with_fields: bool = False):
    with open(path, encoding="ascii") as fh:
        return parse_snapshot(fh.read(), with_fields)
