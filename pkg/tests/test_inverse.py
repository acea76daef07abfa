import copy
import warnings

import numpy as np
import pytest

from mfg_decode.config import REFERENCE, ExperimentConfig
from mfg_decode.errors import DegenerateEverywhere, InsufficientData, MissingLowerOrder
from mfg_decode.forward import CauchyDataset, MFGProblem, PerturbationSpec, RunningCost
from mfg_decode.grid import Grid, trace
from mfg_decode.inverse import (
    GroundTruth,
    LinearResponse,
    ReconstructionConfig,
    add_noise,
    cost_directions,
    divided_difference,
    harmonic_fill,
    reconstruct,
    recover_F2,
    recover_Fk,
    recover_kappa,
    recover_m0,
    recover_q_probe,
    recover_u0,
    relative_l2,
    simulate_measurements,
    uniqueness_gate,
)


@pytest.fixture(scope="module")
def setup():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"].update(n_cells=33, n_time=32)
    p = ExperimentConfig(raw).problem()
    meas = simulate_measurements(p, p.perturbations, 0.02, jobs=2)
    truth = GroundTruth(p.state.drift(p.grid, p.metric), p.state.u0, p.metric.kappa, p.state.m0, p.cost.coefficients)
    return p, meas, truth


def _dataset(value):
    v = np.full((2, 2), value)
    return CauchyDataset(v, v[..., None], v, v[..., None])


@pytest.mark.parametrize("order", [1, 2, 3])
def test_divided_differences_are_exact_on_polynomials(order):
    # cubic in eps: five-point stencils reproduce derivatives up to order 3 exactly
    f = lambda e: 0.3 + 1.5 * e - 2.0 * e**2 + 4.0 * e**3
    exact = {1: 1.5, 2: -4.0, 3: 24.0}[order]
    eps = 0.1
    samples = {j: _dataset(f(j * eps)) for j in (-2, -1, 0, 1, 2)}
    d = divided_difference(samples, eps, order)
    assert np.allclose(d.u, exact, rtol=1e-10)


def test_noise_is_relative_and_reproducible():
    rng = np.random.default_rng(0)
    base = CauchyDataset(np.zeros((50, 40)), np.ones((50, 40, 1)), np.zeros((50, 40)), np.ones((50, 40, 1)))
    noisy = add_noise(base, 0.01, rng)
    assert np.std(noisy.du - base.du) == pytest.approx(0.01, rel=0.05)
    assert np.array_equal(noisy.u, base.u)
    a = add_noise(base, 0.01, np.random.default_rng(3))
    b = add_noise(base, 0.01, np.random.default_rng(3))
    assert np.array_equal(a.du, b.du)


def test_elliptic_stages_are_exact_with_the_true_drift(setup):
    p, meas, truth = setup
    g = p.grid
    u0 = recover_u0(g, truth.q, meas.base.u)
    m0 = recover_m0(g, truth.q, meas.base.m)
    kappa, mask = recover_kappa(g, truth.q, truth.u0, p.metric.g)
    assert np.abs(u0 - truth.u0).max() < 1e-10
    assert np.abs(m0 - truth.m0).max() < 1e-10
    assert np.abs(kappa - truth.kappa)[~mask].max() < 1e-10


def test_recovered_u0_follows_the_gauge(setup):
    p, meas, truth = setup
    shifted = recover_u0(p.grid, truth.q, meas.base.u + 1.7)
    assert np.allclose(shifted - truth.u0, 1.7, atol=1e-10)


def test_kappa_needs_a_nondegenerate_gradient():
    g = Grid.unit(9, n_time=2)
    q = np.zeros((*g.shape, 1))
    with pytest.raises(DegenerateEverywhere):
        recover_kappa(g, q, np.ones(g.shape), np.eye(1))


def test_harmonic_fill_reproduces_affine_fields():
    g = Grid.unit(9, dim=2, n_time=2)
    f = 1 + 2 * g.coords[..., 0] - g.coords[..., 1]
    mask = np.zeros(g.shape, dtype=bool)
    mask[3:6, 2:5] = True
    filled = harmonic_fill(g, np.where(mask, 0.0, f), mask)
    assert np.allclose(filled, f, atol=1e-12)


def test_pipeline_recovers_every_field(setup):
    p, meas, truth = setup
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = reconstruct(meas, p.metric.g, ReconstructionConfig(max_order=3), truth)
    limits = {"q": 0.05, "u0": 0.05, "kappa": 0.05, "m0": 0.05, "F2": 0.10, "F3": 0.15}
    for k, v in limits.items():
        assert rep.errors[k] <= v, (k, rep.errors[k])
    assert set(rep.to_dict()["stages"]) == {"q", "u0", "kappa", "m0", "F2", "F3"}


def test_probe_mode_recovers_the_mean_drift():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"].update(n_cells=129, n_time=128)
    cfg = ExperimentConfig(raw)
    g = cfg.grid()
    met = cfg.metric(g)
    q = cfg.stationary(g, met).drift(g, met)
    res = recover_q_probe(g, LinearResponse(g, q), ReconstructionConfig(mode="probe"))
    mean_true = float(np.sum(g.weights * q[..., 0]))
    # the tolerance covers the second-order remainder left by the two-rung extrapolation
    assert float(np.sum(g.weights * res.value[..., 0])) == pytest.approx(mean_true, rel=0.05)


def test_probe_mode_warns_when_under_resolved(setup):
    p, _, truth = setup
    with pytest.warns(UserWarning, match="under-resolved"):
        recover_q_probe(p.grid, LinearResponse(p.grid, truth.q), ReconstructionConfig(mode="probe"))


def test_probe_mode_without_response_is_rejected(setup):
    p, meas, _ = setup
    with pytest.raises(InsufficientData):
        reconstruct(meas, p.metric.g, ReconstructionConfig(mode="probe"))


def _f_inputs(setup):
    p, meas, _ = setup
    g = p.grid
    chosen = cost_directions(meas)
    first = [(trace(g, meas.directions[l].g), trace(g, meas.directions[l].h)) for l in chosen]
    data = [meas.derivative(l, 2) for l in chosen]
    return p, first, data


def test_inverse_source_is_linear_in_the_data(setup):
    p, first, data = _f_inputs(setup)
    g = p.grid
    other = [d.combine([0.5], [d]) for d in data]
    twice = [a.combine([1.0, 3.0], [a, b]) for a, b in zip(data, other)]
    r = [recover_F2(g, p.metric, p.state, first, dd, lam=1e-6).value for dd in (data, other, twice)]
    assert np.allclose(r[2], r[0] + 3.0 * r[1], atol=1e-9 * np.abs(r[2]).max())


def test_tikhonov_misfit_is_monotone_in_lambda(setup):
    p, first, data = _f_inputs(setup)
    g = p.grid
    misfits = [recover_F2(g, p.metric, p.state, first, data, lam=lam).residual for lam in 10.0 ** np.arange(-10, -2)]
    assert all(b >= a * (1 - 1e-9) for a, b in zip(misfits, misfits[1:]))


def test_higher_orders_need_lower_coefficients(setup):
    p, first, data = _f_inputs(setup)
    with pytest.raises(MissingLowerOrder):
        recover_Fk(p.grid, p.metric, p.state, 3, first, data, {})


def test_zero_cost_is_recovered_as_zero():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"].update(n_cells=17, n_time=16)
    raw["problem"]["cost"] = {}
    raw["problem"]["perturbations"] = raw["problem"]["perturbations"][4:]
    p = ExperimentConfig(raw).problem()
    meas = simulate_measurements(p, p.perturbations, 0.02)
    g = p.grid
    first = [(trace(g, d.g), trace(g, d.h)) for d in meas.directions]
    data = [meas.derivative(l, 2) for l in range(len(first))]
    f = recover_F2(g, p.metric, p.state, first, data).value
    assert np.abs(f).max() < 1e-3


def test_uniqueness_gate_both_directions():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"].update(n_cells=17, n_time=16)
    p = ExperimentConfig(raw).problem()
    dirs = [d for d in p.perturbations if np.any(d.h)][:1]
    same = uniqueness_gate(p, p, dirs)
    assert same.measurement_distance <= 1e-9 and same.passed
    coeffs = dict(p.cost.coefficients)
    coeffs[2] = coeffs[2] + np.sin(np.pi * p.grid.coords[..., 0])
    q = MFGProblem(p.grid, p.metric, RunningCost(p.cost.m0, coeffs), p.state)
    diff = uniqueness_gate(p, q, dirs)
    assert diff.config_distance > 0 and diff.separation >= 10 * diff.noise_floor


def test_config_validation():
    with pytest.raises(ValueError):
        ReconstructionConfig(mode="other")
    with pytest.raises(ValueError):
        ReconstructionConfig(max_order=5)
    with pytest.raises(ValueError):
        ReconstructionConfig(frequencies=(9,)).check_lattice(Grid.unit(9, n_time=2))


def test_relative_l2_with_mask():
    g = Grid.unit(5, n_time=2)
    truth = np.ones(g.shape)
    approx = truth.copy()
    approx[0] = 5.0
    mask = np.zeros(g.shape, dtype=bool)
    mask[0] = True
    assert relative_l2(g, approx, truth, where=~mask) == 0.0
    assert relative_l2(g, approx, truth) > 0


def test_perturbation_spec_boundary_shape(setup):
    p, _, _ = setup
    d = PerturbationSpec(np.zeros(p.grid.st_shape), np.ones(p.grid.st_shape))
    gb, hb = d.boundary(p.grid)
    assert gb.shape == hb.shape == (p.grid.n_time + 1, 2)
