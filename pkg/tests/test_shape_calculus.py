import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernelshape.fem import PointTarget, ProblemData, ScalarFieldP1, solve_state
from kernelshape.mesh import ShapeSpec, deform, generate_mesh, interface_vertex_mask
from kernelshape.shape_calculus import (DeformationError, ExpressionKind, GeometricProblem,
                                        TrackingProblem, assemble_tensors, conservation_residual,
                                        dJ_bd, dJ_vol, fd_oracle, ibp_identity_check,
                                        random_direction, simple_tensors, volume_load,
                                        zero_tensors)

CENTER = np.array([0.5, 0.5])
RADIUS = 0.2
DISC = ShapeSpec.from_tuples([(tuple(CENTER), RADIUS)])
LEVELS = [(50, 11), (100, 21), (200, 41)]


def cutoff(p):
    """1 within 0.3 of the centre, cosine taper to 0 at 0.45."""
    d = np.linalg.norm(p - CENTER, axis=1)
    s = np.clip((d - 0.3) / 0.15, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * s))


def radial_field(mesh):
    return cutoff(mesh.vertices)[:, None] * (mesh.vertices - CENTER)


class SineTarget(PointTarget):
    def evaluate(self, points):
        x, y = np.asarray(points, dtype=float).reshape(-1, 2).T
        a = 0.02
        v = a * np.sin(np.pi * x) * np.sin(np.pi * y)
        g = a * np.pi * np.column_stack([np.cos(np.pi * x) * np.sin(np.pi * y),
                                         np.sin(np.pi * x) * np.cos(np.pi * y)])
        return v, g


@pytest.fixture(scope="module")
def disc_meshes():
    return [generate_mesh(DISC, n, g) for n, g in LEVELS]


def test_geometric_oracle_converges(disc_meshes):
    errs = []
    for m in disc_meshes:
        v = dJ_vol(simple_tensors(m, 1.0, 0.0), radial_field(m))
        errs.append(abs(v - 2 * math.pi * RADIUS**2) / (2 * math.pi * RADIUS**2))
    assert errs[1] < 0.02
    assert errs[0] > errs[1] > errs[2]


def test_geometric_fd_oracle(disc_meshes):
    m = disc_meshes[1]
    fd = fd_oracle(GeometricProblem(1.0, 0.0), m, radial_field(m), 1e-3)
    vol = dJ_vol(simple_tensors(m, 1.0, 0.0), radial_field(m))
    assert fd == pytest.approx(vol, rel=1e-8)
    assert fd == pytest.approx(2 * math.pi * RADIUS**2, rel=0.02)


def test_constant_tensors_integrate_divergence_to_zero(disc_meshes, rng):
    m = disc_meshes[1]
    X = random_direction(m, rng)
    assert abs(dJ_vol(simple_tensors(m, 2.5, 2.5), X)) < 1e-12


def test_translation_of_disc_has_zero_derivative(disc_meshes):
    m = disc_meshes[1]
    X = cutoff(m.vertices)[:, None] * np.array([1.0, 0.0])
    assert abs(dJ_vol(simple_tensors(m, 1.0, 0.0), X)) < 1e-12


def test_zero_field_and_zero_tensors(disc_meshes, rng):
    m = disc_meshes[0]
    T = simple_tensors(m, 1.0, 0.0)
    assert dJ_vol(T, np.zeros((m.n_vertices, 2))) == 0.0
    assert dJ_vol(zero_tensors(m), random_direction(m, rng)) == 0.0
    assert fd_oracle(GeometricProblem(), m, np.zeros((m.n_vertices, 2)), 1e-3) == 0.0


def test_volume_load_matches_dj_vol(disc_meshes, rng):
    m = disc_meshes[0]
    T = TrackingProblem(ProblemData(u_d=SineTarget()), None, "given").tensors(m)
    X = random_direction(m, rng)
    assert np.sum(volume_load(T) * X) == pytest.approx(dJ_vol(T, X), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_dj_vol_is_linear(seed, a, b):
    m = _small_mesh()
    T = _small_tensors()
    r = np.random.default_rng(seed)
    X, Y = random_direction(m, r), random_direction(m, r)
    lhs = dJ_vol(T, a * X + b * Y)
    rhs = a * dJ_vol(T, X) + b * dJ_vol(T, Y)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-18)


_cache = {}


def _small_mesh():
    if "m" not in _cache:
        _cache["m"] = generate_mesh(DISC, 50, 11)
    return _cache["m"]


def _small_tensors():
    if "T" not in _cache:
        _cache["T"] = TrackingProblem(ProblemData(u_d=SineTarget()), None, "given").tensors(_small_mesh())
    return _cache["T"]


def test_stationary_target_gives_zero_tensors(disc_meshes):
    m = disc_meshes[0]
    data = ProblemData()
    u = solve_state(m, data)
    T = assemble_tensors(m, u, ScalarFieldP1(np.zeros(m.n_vertices), m), data.with_target(u))
    assert not np.any(T.S1) and not np.any(T.S0)


def test_mismatched_mesh_refused(disc_meshes):
    a, b = disc_meshes[0], disc_meshes[1]
    data = ProblemData()
    u = solve_state(a, data)
    with pytest.raises(ValueError):
        assemble_tensors(b, u, u, data.with_target(u))


def test_boundary_forms_vanish_without_jump(disc_meshes, rng):
    m = disc_meshes[1]
    T = simple_tensors(m, 0.7, 0.7)
    X = random_direction(m, rng)
    for kind in ("BD1", "BD2"):
        assert abs(dJ_bd(T, X, kind)) < 1e-10


def test_boundary_forms_on_empty_interface(rng):
    m = generate_mesh(ShapeSpec(), 50, 11)
    assert dJ_bd(simple_tensors(m, 1, 0), random_direction(m, rng)) == 0.0


def test_boundary_forms_geometric(disc_meshes):
    # [S1 nu . nu] = 1 for f1 = 1, f2 = 0, so BD1 = int X . nu on the polygon
    m = disc_meshes[1]
    T = simple_tensors(m, 1.0, 0.0)
    X = radial_field(m)
    vol = dJ_vol(T, X)
    assert dJ_bd(T, X, ExpressionKind.BD1) == pytest.approx(vol, rel=1e-12)
    assert dJ_bd(T, X, ExpressionKind.BD2) == pytest.approx(vol, rel=1e-12)


@pytest.mark.parametrize("f1,f2", [(1.0, 0.0), (0.3, -2.0), (1.0, 1.0)])
def test_ibp_identity(disc_meshes, rng, f1, f2):
    for m in disc_meshes:
        T = simple_tensors(m, f1, f2)
        X = rng.normal(size=(m.n_vertices, 2))
        X[m.boundary] = 0.0
        assert ibp_identity_check(T, X) <= 1e-10 * (1 + abs(dJ_vol(T, X)))
        assert ibp_identity_check(T, np.zeros_like(X)) == 0.0
    assert conservation_residual(simple_tensors(disc_meshes[0], f1, f2)) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.02))
def test_ibp_identity_on_perturbed_meshes(seed, amp):
    m = _small_mesh()
    r = np.random.default_rng(seed)
    V = r.uniform(-1, 1, size=(m.n_vertices, 2)) * amp * 0.2
    m = deform(m, V, 1.0)
    T = simple_tensors(m, 1.0, 0.0)
    X = r.normal(size=(m.n_vertices, 2))
    X[m.boundary] = 0.0
    assert ibp_identity_check(T, X) <= 1e-10 * (1 + abs(dJ_vol(T, X)))


def test_ibp_refuses_full_tensors():
    with pytest.raises(ValueError):
        ibp_identity_check(_small_tensors(), np.zeros((_small_mesh().n_vertices, 2)))


def test_boundary_forms_approach_volume_form(disc_meshes):
    problem = TrackingProblem(ProblemData(u_d=SineTarget()), None, "given")
    gaps = {"BD1": [], "BD2": []}
    for m in disc_meshes:
        T = problem.tensors(m)
        X = radial_field(m)
        vol = dJ_vol(T, X)
        for kind in gaps:
            gaps[kind].append(abs(dJ_bd(T, X, kind) - vol))
    for kind, g in gaps.items():
        assert g[0] > g[1] > g[2], (kind, g)


def test_fd_consistency(problem, initial_solution):
    m = initial_solution.mesh
    X = random_direction(m, np.random.default_rng(7))
    vol = dJ_vol(initial_solution.tensors, X)
    fd = fd_oracle(problem, m, X, 1e-4)
    assert abs(vol - fd) / abs(fd) <= 1e-2


def test_fd_oracle_rejects_inverting_step(disc_meshes, rng):
    m = disc_meshes[0]
    X = rng.normal(size=(m.n_vertices, 2))
    with pytest.raises(DeformationError):
        fd_oracle(GeometricProblem(), m, X, 1.0)


def test_random_direction_is_seeded_and_zero_on_boundary(disc_meshes):
    m = disc_meshes[0]
    a = random_direction(m, np.random.default_rng(3))
    b = random_direction(m, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    assert not np.any(a[m.boundary])
    assert np.any(a[interface_vertex_mask(m)])
