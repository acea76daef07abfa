import numpy as np
import pytest

from mfg_decode.errors import OverflowRisk, ZeroDirection
from mfg_decode.grid import Grid, divergence, gradient, normal_derivative, trace
from mfg_decode.inverse import LinearResponse
from mfg_decode.probes import (
    CGOParams,
    boundary_pairing,
    bump,
    cgo_backward,
    cgo_forward,
    discrete_symbol,
    fft_coefficient,
    fourier_coefficient,
    leading_limit,
    pairing,
    probe_sweep,
    ray_integral,
)


def test_params_validation():
    with pytest.raises(ValueError):
        CGOParams(4.0, (0.6, 0.6))
    with pytest.raises(ValueError):
        CGOParams(4.0, (1.0, 0.0), xi=(1.0, 1.0))
    with pytest.raises(ValueError):
        CGOParams(0.0, (1.0,))
    g = Grid.unit(9, n_time=8)
    with pytest.raises(ValueError):
        CGOParams(4.0, (1.0,), chi_center=0.1, chi_width=0.3).chi(g)


def test_bump_support():
    t = np.linspace(0, 1, 101)
    b = bump(t, 0.5, 0.3)
    assert b.max() == pytest.approx(1.0)
    assert np.all(b[(t <= 0.2) | (t >= 0.8)] == 0.0)


def test_discrete_symbol_is_the_laplacian_eigenvalue():
    g = Grid.unit(17, dim=2, n_time=2)
    zeta = np.array([0.6, 0.8])
    e = np.exp(8.0 * g.coords @ zeta).ravel()
    lap = (g.lap_op @ e)[g.interior_index]
    assert np.allclose(lap, discrete_symbol(g, 8.0, zeta) * e[g.interior_index], rtol=1e-10)
    fine = Grid.unit(1025, n_time=2)
    assert discrete_symbol(fine, 8.0, (1.0,)) == pytest.approx(64.0, rel=1e-4)


def test_exponent_budget():
    g = Grid.unit(33, n_time=16)
    with pytest.raises(OverflowRisk):
        cgo_forward(g, CGOParams(32.0, (1.0,)))


def test_ray_integral_of_linear_field():
    g = Grid.unit(41, n_time=2)
    phi = g.coords.copy()
    # int_0^0.75 (0.25 + s) ds
    assert ray_integral(g, phi, [0.25], [1.0]) == pytest.approx(0.46875, abs=1e-12)
    with pytest.raises(ZeroDirection):
        ray_integral(g, phi, [0.25], [0.0])


def test_remainders_decay_along_rho_ladder():
    g = Grid.unit(65, n_time=64)
    x = g.coords[..., 0]
    phi = (0.8 * (1 + 0.5 * np.sin(2 * np.pi * x)))[..., None]
    rows = probe_sweep(g, CGOParams(4.0, (1.0,), tau=2.0), [4.0, 8.0, 16.0], phi, -divergence(g, phi), phi)
    norms = [r.remainder_norm for r in rows]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] <= 0.7 * norms[0]


def test_leading_pairing_is_a_fourier_coefficient():
    g = Grid.unit(33, 2, 1.0, 64)
    X = g.coords
    dq = np.stack([0.3 + np.cos(2 * np.pi * X[..., 1]), np.sin(2 * np.pi * X[..., 0])], -1)
    p = CGOParams(6.0, (1.0, 0.0), xi=(0.0, 2 * np.pi), tau=1.0)
    phi = np.stack([0.5 + 0.3 * np.sin(np.pi * X[..., 0]), 0.2 * X[..., 1]], -1)
    lim = leading_limit(g, cgo_forward(g, p, phi), cgo_backward(g, p, phi), dq)
    chi = p.chi(g)
    direct = fourier_coefficient(g, dq[..., 0], p.xi, p.tau, chi)
    tchi = complex(np.sum(g.time_weights * chi**2 * np.exp(-1j * p.tau * g.times)))
    assert abs(lim + direct) <= 0.02 * abs(direct)
    assert abs(lim + tchi * fft_coefficient(g, dq[..., 0], (0, 1))) <= 0.02 * abs(direct)


def test_fft_coefficient_matches_trapezoid_for_periodic_fields():
    g = Grid.unit(33, 2, 1.0, 2)
    f = np.cos(2 * np.pi * g.coords[..., 1]) + 0.25
    assert fft_coefficient(g, f, (0, 1)) == pytest.approx(0.5, abs=1e-13)
    assert fft_coefficient(g, f, (0, 0)) == pytest.approx(0.25, abs=1e-13)


def test_green_identity_boundary_equals_volume_pairing():
    g = Grid.unit(129, n_time=128)
    x = g.coords[..., 0]
    q = (1.1 + 0.3 * np.sin(np.pi * x))[..., None]
    q_ref = np.zeros_like(q)
    p = CGOParams(8.0, (1.0,))
    fw = cgo_forward(g, p, q_ref, -divergence(g, q_ref))
    lead = cgo_backward(g, p, q_ref).leading
    U = LinearResponse(g, q)(p, trace(g, lead))
    Ut = trace(g, U)
    Un = normal_derivative(g, U) - p.rho * Ut * (g.normals @ np.asarray(p.zeta))
    bp = boundary_pairing(g, fw, Ut, Un, q_ref)
    gU = gradient(g, U) - p.rho * U[..., None] * np.asarray(p.zeta)
    vp = pairing(g, fw.weighted[..., None] * (q - q_ref)[None], gU)
    assert abs(bp - vp) <= 0.02 * abs(vp)


def test_full_probe_guards_overflow():
    g = Grid.unit(17, n_time=16)
    fw = cgo_forward(g, CGOParams(4.0, (1.0,)))
    full = fw.full()
    assert np.all(np.isfinite(full))
