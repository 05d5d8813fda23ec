import numpy as np
import pytest

from kernelshape.gradients import (ConfigError, GradientMethod, MeshMotion, MethodKind,
                                   euclidean_gradient_field, gradient_field, h1_gradient_field,
                                   h1_inner, parse_kind, rkhs_gradient_field,
                                   rkhs_interface_gradient)
from kernelshape.kernels import (Profile, RadialKernel, finite_dim_rkhs_gradient, kernel_eval,
                                 rkhs_gradient_at)
from kernelshape.mesh import interface_vertex_mask
from kernelshape.shape_calculus import dJ_vol, random_direction, volume_load, zero_tensors

GAUSS10 = RadialKernel(Profile.GAUSS, 10.0)


@pytest.fixture(scope="module")
def tensors(initial_solution):
    return initial_solution.tensors


def test_parse_kind():
    assert parse_kind(" rkhs_gauss ") is MethodKind.RKHS_GAUSS
    with pytest.raises(ConfigError, match="RKHS_WENDLAND"):
        parse_kind("sobolev")


def test_rkhs_method_needs_sigma():
    with pytest.raises(ConfigError):
        GradientMethod("RKHS_GAUSS").kernel()
    with pytest.raises(ConfigError):
        GradientMethod("H1").kernel(1.0)
    with pytest.raises(ConfigError):
        GradientMethod("RKHS_GAUSS", -1.0)


@pytest.mark.parametrize("kind", list(MethodKind))
def test_zero_tensors_give_zero_field(initial_mesh, kind):
    m = initial_mesh
    V = gradient_field(GradientMethod(kind, 1.0), m, zero_tensors(m))
    assert V.shape == (m.n_vertices, 2)
    assert not np.any(V)


def test_h1_gradient_is_riesz_representative(initial_mesh, tensors, rng):
    V = h1_gradient_field(initial_mesh, tensors)
    assert not np.any(V[initial_mesh.boundary])
    for _ in range(3):
        X = random_direction(initial_mesh, rng)
        ref = dJ_vol(tensors, X)
        assert h1_inner(initial_mesh, V, X) == pytest.approx(ref, rel=1e-7)


def test_euclidean_gradient(initial_mesh, tensors, rng):
    V = euclidean_gradient_field(initial_mesh, tensors)
    L = volume_load(tensors)
    inner = ~initial_mesh.boundary
    np.testing.assert_array_equal(V[inner], L[inner])
    assert not np.any(V[initial_mesh.boundary])
    X = random_direction(initial_mesh, rng)
    assert np.sum(V * X) == pytest.approx(dJ_vol(tensors, X), rel=1e-12)


def test_dispatch(initial_mesh, tensors):
    np.testing.assert_array_equal(gradient_field(GradientMethod("H1"), initial_mesh, tensors),
                                  h1_gradient_field(initial_mesh, tensors))
    np.testing.assert_array_equal(
        gradient_field(GradientMethod("RKHS_GAUSS", 10.0), initial_mesh, tensors),
        rkhs_gradient_field(initial_mesh, tensors, GAUSS10))


def test_closed_field_equals_pointwise_gradient(initial_mesh, tensors):
    V = rkhs_gradient_field(initial_mesh, tensors, GAUSS10)
    inner = ~initial_mesh.boundary
    ref = rkhs_gradient_at(tensors, GAUSS10, initial_mesh.vertices[inner])
    assert np.abs(V[inner] - ref).max() <= 1e-14 * max(1.0, np.abs(ref).max()) + 1e-14
    assert not np.any(V[initial_mesh.boundary])


def test_discrete_rkhs_field_is_descent(initial_mesh, tensors):
    for sigma in (0.01, 1.0, 100.0):
        g = rkhs_gradient_field(initial_mesh, tensors, GAUSS10.with_sigma(sigma), mode="discrete")
        assert dJ_vol(tensors, g) > 0


def test_unknown_rkhs_mode(initial_mesh, tensors):
    with pytest.raises(ConfigError):
        rkhs_gradient_field(initial_mesh, tensors, GAUSS10, mode="spectral")


def test_large_sigma_is_a_translation(initial_mesh, tensors):
    V = rkhs_gradient_field(initial_mesh, tensors, GAUSS10.with_sigma(1e3))
    g = V[~initial_mesh.boundary]
    mean = g.mean(axis=0)
    spread = np.linalg.norm(g - mean, axis=1).max()
    assert spread <= 0.10 * np.linalg.norm(mean)


def test_finite_dimensional_gradient_converges(tensors):
    k = RadialKernel(Profile.GAUSS, 0.02)
    ys = np.random.default_rng(0).uniform(0.1, 0.9, size=(30, 2))
    ref = rkhs_gradient_at(tensors, k, ys)
    errs = []
    for n in (4, 8, 16):
        g = np.linspace(0.02, 0.98, n)
        centers = np.array(np.meshgrid(g, g)).reshape(2, -1).T
        approx = finite_dim_rkhs_gradient(tensors, k, centers, ys)
        errs.append(np.abs(approx - ref).max() / np.abs(ref).max())
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2


@pytest.mark.parametrize("slide,p", [(False, 0.0), (True, 2.0)])
def test_mesh_motion_adjoint_is_transpose(initial_mesh, rng, slide, p):
    motion = MeshMotion(initial_mesh, slide, p)
    a = rng.normal(size=(motion.gamma.size, 2))
    L = rng.normal(size=(initial_mesh.n_vertices, 2))
    lhs = np.sum(motion.extend(a) * L)
    rhs = np.sum(a * motion.adjoint(L))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_mesh_motion_extension(initial_mesh, rng):
    motion = MeshMotion(initial_mesh, slide=False, stiffness_exponent=0.0)
    a = rng.normal(size=(motion.gamma.size, 2))
    V = motion.extend(a)
    np.testing.assert_array_equal(V[motion.gamma], a)
    assert not np.any(V[initial_mesh.boundary])
    # a rigid interface translation moves the bulk by at most the same amount
    V = motion.extend(np.tile([1.0, -0.5], (motion.gamma.size, 1)))
    assert np.abs(V[:, 0]).max() <= 1.0 + 1e-12
    assert np.all(np.isin(motion.gamma, np.nonzero(interface_vertex_mask(initial_mesh))[0]))


@pytest.mark.parametrize("sigma", [0.01, 1.0, 10.0])
def test_interface_gradient_is_descent(initial_mesh, tensors, sigma):
    k = GAUSS10.with_sigma(sigma)
    motion = MeshMotion(initial_mesh, slide=False, stiffness_exponent=0.0)
    d = rkhs_interface_gradient(initial_mesh, tensors, k, motion)
    leff = motion.adjoint(volume_load(tensors))
    z = motion.points
    diff = z[:, None, :] - z[None, :, :]
    K, _, _ = kernel_eval(k, np.einsum("ijd,ijd->ij", diff, diff))
    expected = float(np.sum(leff * (K @ leff)))
    assert dJ_vol(tensors, d) == pytest.approx(expected, rel=1e-8)
    assert expected > 0
