"""The acceptance battery: ten numbered checks shared by the CLI and the tests.

Each check builds its own small experiment, times itself and returns a
``CriterionResult``. Checks 6, 7 and 10 run on the problem of the supplied
experiment configuration (the shipped reference by default); the others
use fixed setups that the configuration does not affect.
"""

from __future__ import annotations

import time
import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, reference_config
from .forward import (
    MFGProblem,
    PerturbationSpec,
    RunningCost,
    SolverSettings,
    StationaryState,
    _hjb_parts,
    solve_mfg,
    solve_stationary,
)
from .grid import Grid, MetricField, boundary_flux, divergence, gradient, inner, laplacian
from .inverse import (
    GroundTruth,
    Measurements,
    ReconstructionConfig,
    reconstruct,
    simulate_measurements,
    uniqueness_gate,
)
from .linearize import LinearizedOperator, frechet_report
from .probes import CGOParams, cgo_backward, cgo_forward, fft_coefficient, leading_limit, probe_pairing

MACHINE_EPS = float(np.finfo(float).eps)


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    measured: dict
    limits: str
    seconds: float = 0.0
    budget: float = float("inf")

    @property
    def in_budget(self) -> bool:
        return self.seconds <= self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.in_budget

    def line(self) -> str:
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        status = "PASS" if self.ok else "FAIL"
        over = "" if self.in_budget else f" (over the {self.budget:.0f} s budget)"
        return f"[{status}] {self.number:2d} {self.title}: {vals} | {self.limits} | {self.seconds:.1f} s{over}"

    def to_dict(self) -> dict:
        return {
            "number": self.number,
            "title": self.title,
            "passed": self.ok,
            "measured": {k: _plain(v) for k, v in self.measured.items()},
            "limits": self.limits,
            "seconds": self.seconds,
            "budget": self.budget,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _plain(v):
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _timed(number: int, title: str, budget: float, fn: Callable[[], tuple[bool, dict, str]]) -> CriterionResult:
    t0 = time.perf_counter()
    passed, measured, limits = fn()
    return CriterionResult(number, title, bool(passed), measured, limits, time.perf_counter() - t0, budget)


# -- small shared setups ------------------------------------------------------


def _small_problem(n_cells: int = 65, n_time: int = 64) -> MFGProblem:
    grid = Grid.unit(n_cells, n_time=n_time)
    x = grid.axes[0]
    metric = MetricField.euclidean(grid, 1 + 0.5 * np.sin(2 * np.pi * x))
    state = solve_stationary(grid, metric, (np.array([0.0, 0.6]), np.array([1.0, 0.7])))
    cost = RunningCost(state.m0, {2: np.sin(np.pi * x), 3: np.cos(np.pi * x)})
    return MFGProblem(grid, metric, cost, state)


# -- 1. stationary persistence -------------------------------------------------------


def check_persistence() -> CriterionResult:
    def run():
        p = _small_problem(65, 64)
        sol = solve_mfg(p, SolverSettings(tol_fp=1e-13))
        dev = max(np.abs(sol.u - p.state.u0).max(), np.abs(sol.m - p.state.m0).max())
        return dev <= 1e-8, {"sup_deviation": float(dev)}, "sup deviation <= 1e-8"

    return _timed(1, "stationary persistence", 5.0, run)


# -- 2. linearization order --------------------------------------------------------


def check_frechet() -> CriterionResult:
    def run():
        p = _small_problem(65, 64)
        grid = p.grid
        x, t = grid.axes[0], grid.times[:, None]
        d = PerturbationSpec(np.sin(np.pi * t) * (1 + x), np.sin(np.pi * t) * (2 - x))
        rep = frechet_report(p, d, (1e-2, 5e-3, 2.5e-3), orders=(1, 2))
        s1, s2 = rep.slopes[1], rep.slopes[2]
        ok = abs(s1 - 2.0) <= 0.2 and abs(s2 - 3.0) <= 0.3
        return ok, {"slope1": s1, "slope2": s2}, "slope1 in 2.0 +- 0.2, slope2 in 3.0 +- 0.3"

    return _timed(2, "linearization order", 60.0, run)


# -- 3. drift identity ----------------------------------------------------------------


def assembled_drift(op: LinearizedOperator) -> np.ndarray:
    """Drift read off the assembled first-order operator by applying it to coordinate functions."""
    grid = op.grid
    K = op._steppers[0].K + grid.lap_op
    return np.stack([K @ grid.coords[..., k].ravel() for k in range(grid.dim)], -1).reshape(*grid.shape, grid.dim)


def hamiltonian_drift(grid: Grid, metric: MetricField, u0: np.ndarray, delta: float = 1.0) -> np.ndarray:
    """Directional derivative of the discrete Hamiltonian at ``u0`` along coordinate functions.

    The Hamiltonian is quadratic, so the central difference is exact for any ``delta``.
    """
    A = metric.A.reshape(grid.n_nodes, grid.dim, grid.dim)
    u = u0.ravel()
    cols = []
    for k in range(grid.dim):
        e = grid.coords[..., k].ravel()
        hp, _ = _hjb_parts(grid, A, u + delta * e)
        hm, _ = _hjb_parts(grid, A, u - delta * e)
        cols.append((hp - hm) / (2 * delta))
    return np.stack(cols, -1).reshape(*grid.shape, grid.dim)


def check_drift_identity() -> CriterionResult:
    def run():
        worst = 0.0
        for dim, n in ((1, 65), (2, 33)):
            grid = Grid.unit(n, dim=dim, n_time=8)
            X = grid.coords
            kappa = 1 + 0.3 * np.prod(np.sin(np.pi * X), axis=-1)
            metric = MetricField.euclidean(grid, kappa)
            u0 = 0.4 * np.sum(X, axis=-1) + 0.2 * np.prod(np.sin(np.pi * X), axis=-1)
            state = StationaryState(u0, np.ones(grid.shape))
            truth = 2.0 * np.einsum("...ij,...j->...i", metric.A, gradient(grid, u0))
            scale = np.abs(truth).max()
            op = LinearizedOperator(grid, state, metric)
            for q in (assembled_drift(op), hamiltonian_drift(grid, metric, u0)):
                worst = max(worst, float(np.abs(q - truth).max() / scale))
        return worst <= 1e-12, {"relative_error": worst}, "relative nodewise error <= 1e-12"

    return _timed(3, "drift identity", 1.0, run)


# -- 4. CGO decay ----------------------------------------------------------------------


def check_cgo_decay(rhos: Sequence[float] = (4.0, 8.0, 16.0)) -> CriterionResult:
    def run():
        grid = Grid.unit(129, 1, 1.0, 128)
        x = grid.coords[..., 0]
        drift = (0.8 * (1 + 0.5 * np.sin(2 * np.pi * x)))[..., None]
        dq = (np.sin(np.pi * x) + 0.3)[..., None]
        ok = True
        measured = {}
        for label, phi in (("zero", None), ("drift", drift)):
            qp = None if phi is None else -divergence(grid, phi)
            rem_f, rem_b, defect = [], [], []
            for rho in rhos:
                p = CGOParams(rho, (1.0,), tau=2.0)
                fw = cgo_forward(grid, p, phi, qp)
                bw = cgo_backward(grid, p, phi, None)
                rem_f.append(fw.remainder_norm)
                rem_b.append(bw.remainder_norm)
                defect.append(abs(probe_pairing(grid, fw, bw, dq) / rho - leading_limit(grid, fw, bw, dq)))
            ratio = max(rem_f[-1] / rem_f[0], rem_b[-1] / rem_b[0])
            mono = all(b < a for a, b in zip(defect, defect[1:]))
            ok = ok and ratio <= 0.7 and mono
            measured[f"{label}_ratio"] = float(ratio)
            measured[f"{label}_pairing"] = [float(d) for d in defect]
        return ok, measured, "remainder(16)/remainder(4) <= 0.7, pairing defect decreasing"

    return _timed(4, "CGO decay", 60.0, run)


# -- 5. Fourier pairing -------------------------------------------------------------------


def check_fourier_pairing(frequencies: Sequence[int] = (0, 1, 2, 3)) -> CriterionResult:
    def run():
        grid = Grid.unit(65, 2, 1.0, 128)
        X = grid.coords
        x, y = X[..., 0], X[..., 1]
        dq = np.stack(
            [0.2 + np.cos(2 * np.pi * y) + 0.5 * np.sin(4 * np.pi * y) + 0.3 * np.sin(6 * np.pi * y)
             + 0.4 * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y),
             np.sin(2 * np.pi * x)], -1,
        )
        phi = np.stack([0.5 + 0.3 * np.sin(np.pi * x), 0.2 * y], -1)
        tau = 1.5
        # every tested frequency carries a nonzero coefficient, so the relative error is meaningful
        worst = 0.0
        for k in frequencies:
            xi = (0.0, 2 * np.pi * k)
            p = CGOParams(8.0, (1.0, 0.0), xi=xi, tau=tau)
            fw, bw = cgo_forward(grid, p, phi), cgo_backward(grid, p, phi)
            lim = leading_limit(grid, fw, bw, dq)
            chi = p.chi(grid)
            tchi = complex(np.sum(grid.time_weights * chi**2 * np.exp(-1j * tau * grid.times)))
            ref = -tchi * fft_coefficient(grid, dq[..., 0], (0, k))
            worst = max(worst, abs(lim - ref) / abs(ref))
        return worst <= 0.02, {"relative_error": float(worst)}, "relative error <= 2%"

    return _timed(5, "Fourier pairing", 30.0, run)


# -- 6, 10. reconstruction ------------------------------------------------------------------


@dataclass
class ReferenceRun:
    """Measurements of a configured problem, simulated once and shared by several checks."""

    config: ExperimentConfig
    jobs: int = 1
    _cache: dict = field(default_factory=dict)

    @property
    def problem(self) -> MFGProblem:
        if "problem" not in self._cache:
            self._cache["problem"] = self.config.problem()
        return self._cache["problem"]

    @property
    def reconstruction(self) -> tuple[ReconstructionConfig, dict]:
        return self.config.reconstruction()

    @property
    def measurements(self) -> Measurements:
        if "meas" not in self._cache:
            p = self.problem
            _, extra = self.reconstruction
            self._cache["meas"] = simulate_measurements(
                p, p.perturbations, float(extra.get("eps", 0.02)),
                tuple(extra.get("multiples", (-2, -1, 1, 2))), self.config.settings(), self.jobs,
            )
        return self._cache["meas"]

    @property
    def truth(self) -> GroundTruth:
        p = self.problem
        return GroundTruth(p.state.drift(p.grid, p.metric), p.state.u0, p.metric.kappa, p.state.m0, p.cost.coefficients)


def check_end_to_end(run_data: ReferenceRun) -> CriterionResult:
    limits = {"q": 0.05, "u0": 0.05, "kappa": 0.05, "m0": 0.05, "F2": 0.10, "F3": 0.15}

    def run():
        rc, _ = run_data.reconstruction
        rc = ReconstructionConfig(**{**rc.__dict__, "mode": "variational", "noise_level": 0.0, "max_order": 3})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = reconstruct(run_data.measurements, run_data.problem.metric.g, rc, run_data.truth)
        err = {k: float(rep.errors.get(k, np.inf)) for k in limits}
        ok = all(err[k] <= v for k, v in limits.items())
        return ok, err, "q, u0, kappa, m0 <= 5%; F2 <= 10%; F3 <= 15%"

    return _timed(6, "end-to-end reconstruction", 600.0, run)


def check_noise(run_data: ReferenceRun, level: float = 0.01, seed: int = 0) -> CriterionResult:
    def run():
        rc, _ = run_data.reconstruction
        rc = ReconstructionConfig(**{**rc.__dict__, "mode": "variational", "noise_level": level, "max_order": 2})
        noisy = run_data.measurements.with_noise(level, seed, orders=(1, 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = reconstruct(noisy, run_data.problem.metric.g, rc, run_data.truth)
        err = float(rep.errors["F2"])
        return err <= 0.25, {"F2": err, "lambda": float(rep.info["F2"]["lambda"]), "seed": seed}, "F2 <= 25%"

    return _timed(10, "noise robustness", 600.0, run)


# -- 7. uniqueness gate ----------------------------------------------------------------


def check_uniqueness(run_data: ReferenceRun, eps: float = 1e-2) -> CriterionResult:
    def run():
        p = run_data.problem
        grid = p.grid
        # density-driving directions are the ones that see the running cost
        dirs = [d for d in p.perturbations if np.any(d.h)] or list(p.perturbations)
        settings = run_data.config.settings()
        same = uniqueness_gate(p, p, dirs, eps, settings)
        coeffs = dict(p.cost.coefficients)
        coeffs[2] = p.cost.coefficient(2) + np.sin(np.pi * grid.coords[..., 0])
        other = MFGProblem(grid, p.metric, RunningCost(p.cost.m0, coeffs), p.state, p.perturbations)
        diff = uniqueness_gate(p, other, dirs, eps, settings)
        ok = same.measurement_distance <= 1e-9 and diff.separation >= 10.0 * diff.noise_floor
        measured = {
            "identical_distance": same.measurement_distance,
            "separation": diff.separation,
            "noise_floor": diff.noise_floor,
            "ratio": diff.separation / diff.noise_floor if diff.noise_floor > 0 else float("inf"),
        }
        return ok, measured, "identical distance <= 1e-9, separation >= 10x noise floor"

    return _timed(7, "uniqueness gate", 300.0, run)


# -- 8. adjoint and affine exactness -------------------------------------------------------


def check_exactness() -> CriterionResult:
    def run():
        rng = np.random.default_rng(7)
        adj, aff = 0.0, 0.0
        for dim, n in ((1, 33), (2, 17)):
            grid = Grid.unit(n, dim=dim, n_time=4)
            X = grid.coords
            f = rng.standard_normal(grid.shape)
            v = rng.standard_normal((*grid.shape, dim))
            terms = (inner(grid, gradient(grid, f), v), inner(grid, f, divergence(grid, v)), boundary_flux(grid, f, v))
            # scale by the sum of absolute contributions so cancellation does not flatter the check
            scale = inner(grid, np.abs(f), np.abs(divergence(grid, v))) + inner(
                grid, np.abs(gradient(grid, f)), np.abs(v)
            )
            adj = max(adj, abs(terms[0] + terms[1] - terms[2]) / scale)
            c = rng.standard_normal(dim)
            lin = 0.7 + X @ c
            quad = np.sum(X**2, axis=-1) + lin
            gnorm = max(abs(G).sum(axis=1).max() for G in grid.grad_ops)
            lnorm = abs(grid.lap_op).sum(axis=1).max()
            aff = max(
                aff,
                np.abs(gradient(grid, lin) - c).max() / (gnorm * np.abs(lin).max()),
                np.abs(divergence(grid, np.broadcast_to(lin[..., None], (*grid.shape, dim))) - c.sum()).max()
                / (gnorm * np.abs(lin).max()),
                np.abs(laplacian(grid, quad) - 2.0 * dim).max() / (lnorm * np.abs(quad).max()),
            )
        tol = 10 * MACHINE_EPS
        ok = adj <= tol and aff <= tol
        return ok, {"adjoint": float(adj), "affine": float(aff)}, "both <= 10 machine-eps (scaled)"

    return _timed(8, "adjoint and affine exactness", 1.0, run)


# -- 9. manufactured solutions ------------------------------------------------------------


def manufactured_problem(grid: Grid, u_fn, m_fn, kappa: float = 1.0, f2: float = 0.5):
    """Problem whose exact discrete-free solution is ``(u_fn, m_fn)`` in one dimension.

    ``u_fn`` and ``m_fn`` map ``(t, x)`` to ``(value, d_t, d_x, d_xx)``.
    """
    t = grid.times[:, None]
    x = grid.axes[0][None, :]
    u, ut, ux, uxx = u_fn(t, x)
    m, mt, mx, mxx = m_fn(t, x)
    cost = RunningCost(np.ones(grid.shape), {2: np.full(grid.shape, f2)})
    src_u = -ut - uxx + kappa * ux**2 - f2 * (m - 1.0) ** 2 / 2
    # d_x (m kappa u_x) = kappa (m_x u_x + m u_xx)
    src_m = mt - mxx - 2.0 * kappa * (mx * ux + m * uxx)
    state = StationaryState.constant(grid, 0.0, 1.0)
    pert = PerturbationSpec(u - 0.0, m - 1.0)
    metric = MetricField.euclidean(grid, kappa)
    p = MFGProblem(grid, metric, cost, state, (pert,), u[-1], m[0], src_u, src_m)
    return p, u, m


def _mms_error(grid: Grid, u_fn, m_fn) -> float:
    p, u, m = manufactured_problem(grid, u_fn, m_fn)
    sol = solve_mfg(p, SolverSettings(tol_fp=1e-13, delta_fp=10.0))
    return float(max(np.abs(sol.u - u).max(), np.abs(sol.m - m).max()))


def _u_space(t, x):
    # linear in time: implicit Euler is exact, only the spatial error remains
    a = 0.3 * (1 + 0.5 * t)
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    return a * s + 0.2 * x, 0.15 * s + 0 * x, a * np.pi * c + 0.2, -a * np.pi**2 * s


def _m_space(t, x):
    a = 0.2 * (1 + t)
    c, s = np.cos(np.pi * x), np.sin(np.pi * x)
    return 1 + a * c, 0.2 * c, -a * np.pi * s, -a * np.pi**2 * c


def _u_time(t, x):
    # quadratic in space: every stencil is exact, only the temporal error remains
    a = 0.3 * np.sin(np.pi * t) + 0.1
    return a * x**2 + 0.1 * x, 0.3 * np.pi * np.cos(np.pi * t) * x**2, 2 * a * x + 0.1, 2 * a + 0 * x


def _m_time(t, x):
    b = 0.2 * np.cos(np.pi * t)
    return 1 + b * x, -0.2 * np.pi * np.sin(np.pi * t) * x, b + 0 * x, 0 * x * t


def mms_orders() -> dict:
    es = [_mms_error(Grid.unit(n, n_time=16), _u_space, _m_space) for n in (33, 65)]
    et = [_mms_error(Grid.unit(17, n_time=nt), _u_time, _m_time) for nt in (32, 64)]
    return {
        "space_errors": es,
        "time_errors": et,
        "space_order": float(np.log2(es[0] / es[1])),
        "time_order": float(np.log2(et[0] / et[1])),
    }


def check_mms() -> CriterionResult:
    def run():
        r = mms_orders()
        ok = abs(r["space_order"] - 2.0) <= 0.2 and abs(r["time_order"] - 1.0) <= 0.2
        return ok, {"space_order": r["space_order"], "time_order": r["time_order"]}, "space 2.0 +- 0.2, time 1.0 +- 0.2"

    return _timed(9, "convergence orders", 120.0, run)


# -- battery --------------------------------------------------------------------------------


CRITERIA = tuple(range(1, 11))


def run_battery(
    config: ExperimentConfig | None = None,
    only: Sequence[int] | None = None,
    jobs: int = 1,
    seed: int = 0,
    report: Callable[[CriterionResult], None] | None = None,
) -> list[CriterionResult]:
    """Run the selected checks in order; ``report`` sees each result as it lands."""
    data = ReferenceRun(config or reference_config(), jobs)
    table = {
        1: check_persistence,
        2: check_frechet,
        3: check_drift_identity,
        4: check_cgo_decay,
        5: check_fourier_pairing,
        6: lambda: check_end_to_end(data),
        7: lambda: check_uniqueness(data),
        8: check_exactness,
        9: check_mms,
        10: lambda: check_noise(data, seed=seed),
    }
    out = []
    for k in only or CRITERIA:
        if k not in table:
            raise ValueError(f"unknown criterion {k}")
        res = table[k]()
        out.append(res)
        if report is not None:
            report(res)
    return out
