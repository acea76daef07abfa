import numpy as np
import pytest

from mfg_decode.grid import (
    BoundaryData,
    Grid,
    MetricField,
    boundary_flux,
    divergence,
    gradient,
    inner,
    integrate,
    laplacian,
    normal_derivative,
    trace,
)


@pytest.mark.parametrize("dim,n", [(1, 9), (2, 7)])
def test_counts_and_weights(dim, n):
    g = Grid.unit(n, dim=dim, n_time=4)
    assert g.n_nodes == n**dim
    assert len(g.boundary_index) + len(g.interior_index) == g.n_nodes
    assert np.isclose(g.weights.sum(), 1.0)
    assert np.isclose(g.time_weights.sum(), 1.0)
    assert g.st_shape == (5, *([n] * dim))


def test_normals_point_outward_2d():
    g = Grid.unit(5, dim=2, n_time=2)
    X = g.coords.reshape(-1, 2)[g.boundary_index]
    nu = g.normals
    assert np.allclose(np.linalg.norm(nu, axis=1), 1.0)
    # outward: moving along nu leaves the unit square's centre behind
    assert np.all(np.einsum("bi,bi->b", nu, X - 0.5) > 0)


def test_second_order_accuracy_of_gradient_and_laplacian():
    errs = []
    for n in (33, 65):
        g = Grid.unit(n, dim=2, n_time=2)
        x, y = g.coords[..., 0], g.coords[..., 1]
        f = np.sin(np.pi * x) * np.cos(2 * y)
        dfx = np.pi * np.cos(np.pi * x) * np.cos(2 * y)
        lap = -(np.pi**2 + 4) * f
        errs.append((np.abs(gradient(g, f)[..., 0] - dfx).max(), np.abs(laplacian(g, f) - lap).max()))
    for k in range(2):
        assert np.log2(errs[0][k] / errs[1][k]) == pytest.approx(2.0, abs=0.25)


def test_summation_by_parts_is_exact():
    rng = np.random.default_rng(1)
    g = Grid.unit(11, dim=2, n_time=2)
    f = rng.standard_normal(g.shape)
    v = rng.standard_normal((*g.shape, 2))
    lhs = inner(g, gradient(g, f), v) + inner(g, f, divergence(g, v))
    assert lhs == pytest.approx(boundary_flux(g, f, v), abs=1e-13)


def test_boundary_flux_matches_continuous_value_for_affine_fields():
    # f = 1 and v = (x, y): the flux equals the integral of div v = 2
    g = Grid.unit(9, dim=2, n_time=2)
    v = g.coords.copy()
    assert boundary_flux(g, np.ones(g.shape), v) == pytest.approx(2.0, abs=1e-13)


def test_integrate_space_time_polynomial():
    g = Grid.unit(17, n_time=16)
    t = g.times[:, None]
    x = g.axes[0][None]
    # trapezoid is exact for functions bilinear in (t, x)
    assert integrate(g, np.broadcast_to(t * x, g.st_shape)) == pytest.approx(0.25, abs=1e-14)


def test_trace_and_normal_derivative_1d():
    g = Grid.unit(21, n_time=2)
    x = g.axes[0]
    f = x**2
    assert np.allclose(trace(g, f), [0.0, 1.0])
    # one-sided stencils are exact for quadratics; outward normals are -1 and +1
    assert np.allclose(normal_derivative(g, f), [0.0, 2.0], atol=1e-12)


def test_metric_validation():
    g = Grid.unit(5, n_time=2)
    with pytest.raises(ValueError):
        MetricField.euclidean(g, -np.ones(g.shape))
    met = MetricField.euclidean(g, 2.0)
    assert np.allclose(met.A[..., 0, 0], 2.0)


def test_boundary_data_validation_and_difference():
    g = Grid.unit(5, n_time=3)
    nb = len(g.boundary_index)
    a = BoundaryData(g, np.ones((4, nb)))
    b = BoundaryData(g, np.full((4, nb), 3.0))
    assert np.allclose((a - b).values, -2.0)
    with pytest.raises(ValueError):
        BoundaryData(g, np.ones((4, nb + 1)))
    with pytest.raises(ValueError):
        BoundaryData(g, np.ones((4, nb)), kind="flux")
