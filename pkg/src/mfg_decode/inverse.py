"""Decoding pipeline: drift, stationary state, conformal factor and running cost.

Measurements are boundary records of the nonlinear solver at a few multiples
of a base amplitude ``eps`` along each perturbation direction. Linearized
data of order ``n`` are extracted by central divided differences in ``eps``;
every later stage works with those records.

Stages, each a pure function of the previous ones:

    q       first-order u data            (variational or CGO probe mode)
    u0      q and the eps = 0 trace       (linear elliptic solve)
    kappa   q, u0 and the base metric g   (pointwise, degenerate nodes filled)
    m0      q and the eps = 0 trace       (linear elliptic solve)
    F^(k)   order-k data, lower orders    (linear inverse source, Tikhonov)
"""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Callable, Mapping, Sequence
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from .errors import (
    DegenerateEverywhere,
    IllConditioned,
    InsufficientData,
    InsufficientExcitation,
    MFGError,
    MissingLowerOrder,
    NegativeDensityWarning,
    SingularSystem,
)
from .forward import (
    CauchyDataset,
    MFGProblem,
    PerturbationSpec,
    RunningCost,
    SolverSettings,
    StationaryState,
    measure,
    solve_mfg,
)
from .grid import Grid, MetricField, gradient, integrate, trace
from .linearize import LinearizedOperator, LinearizedSolution, assemble_sources, solve_first_order
from .parabolic import ImplicitEuler
from .probes import (
    CGOParams,
    boundary_pairing,
    cgo_backward,
    cgo_forward,
    weighted_backward,
)

log = logging.getLogger(__name__)

# central stencils: order -> {multiple: weight}, divided by eps**order
STENCILS = {
    1: ({-1: -0.5, 1: 0.5}, {-2: 1 / 12, -1: -2 / 3, 1: 2 / 3, 2: -1 / 12}),
    2: ({-1: 1.0, 0: -2.0, 1: 1.0}, {-2: -1 / 12, -1: 4 / 3, 0: -5 / 2, 1: 4 / 3, 2: -1 / 12}),
    3: ({-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},),
    4: ({-2: 1.0, -1: -4.0, 0: 6.0, 1: -4.0, 2: 1.0},),
}


# -- measurements ------------------------------------------------------------


def divided_difference(samples: Mapping[int, CauchyDataset], eps: float, order: int) -> CauchyDataset:
    """``d^order S / d eps^order`` at 0 from samples at integer multiples of ``eps``.

    The most accurate central stencil covered by ``samples`` is used.
    """
    if order not in STENCILS:
        raise ValueError(f"no stencil for order {order}")
    for stencil in reversed(STENCILS[order]):
        if all(j in samples for j in stencil):
            break
    else:
        raise InsufficientData(f"order-{order} data needs multiples {sorted(STENCILS[order][0])}")
    keys = sorted(stencil)
    ref = samples[keys[0]]
    weights = [stencil[j] / eps**order for j in keys]
    return ref.combine(weights, [samples[j] for j in keys])


def add_noise(data: CauchyDataset, level: float, rng: np.random.Generator) -> CauchyDataset:
    """Additive Gaussian noise with standard deviation ``level * rms(record)`` per record.

    Dirichlet records (``u``, ``m``) are prescribed inputs and stay exact.
    """
    out = {}
    for k, v in data.records().items():
        if k in ("du", "dm") and level > 0:
            rms = float(np.sqrt(np.mean(v**2)))
            v = v + level * rms * rng.standard_normal(v.shape)
        out[k] = v
    return CauchyDataset(**out, eps=data.eps, meta=dict(data.meta))


@dataclass(eq=False)
class Measurements:
    """Nonlinear boundary records along a battery of perturbation directions."""

    grid: Grid
    base: CauchyDataset
    directions: tuple[PerturbationSpec, ...]
    samples: tuple[dict[int, CauchyDataset], ...]
    eps: float
    _cache: dict = field(default_factory=dict, repr=False)

    def derivative(self, direction: int, order: int) -> CauchyDataset:
        key = (direction, order)
        if key not in self._cache:
            s = dict(self.samples[direction])
            s.setdefault(0, self.base)
            self._cache[key] = divided_difference(s, self.eps, order)
        return self._cache[key]

    def with_noise(self, level: float, seed: int, orders: Sequence[int]) -> Measurements:
        """Copy whose derived linearized records carry relative Gaussian noise."""
        rng = np.random.default_rng(seed)
        out = Measurements(self.grid, self.base, self.directions, self.samples, self.eps)
        for order in orders:
            for l in range(len(self.directions)):
                out._cache[(l, order)] = add_noise(self.derivative(l, order), level, rng)
        return out


def simulate_measurements(
    problem: MFGProblem,
    directions: Sequence[PerturbationSpec],
    eps: float,
    multiples: Sequence[int] = (-2, -1, 1, 2),
    settings: SolverSettings | None = None,
    jobs: int = 1,
) -> Measurements:
    """Run the nonlinear solver at ``j * eps`` along every direction and record boundary data."""
    settings = settings or SolverSettings(tol_fp=1e-13)
    grid = problem.grid
    base_problem = problem.with_perturbations(())
    state = problem.state
    base = measure(grid, np.broadcast_to(state.u0, grid.st_shape), np.broadcast_to(state.m0, grid.st_shape), 0.0)

    tasks = [(l, j) for l in range(len(directions)) for j in multiples if j != 0]

    def run(task):
        l, j = task
        p = base_problem.with_perturbations([directions[l].scaled(j * eps)])
        sol = solve_mfg(p, settings)
        return task, measure(grid, sol.u, sol.m, j * eps, direction=l)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    samples = tuple({} for _ in directions)
    for (l, j), data in results:
        samples[l][j] = data
    return Measurements(grid, base, tuple(directions), samples, eps)


# -- configuration and report ---------------------------------------------------


@dataclass(frozen=True)
class ReconstructionConfig:
    mode: str = "variational"
    frequencies: tuple[int, ...] = (0,)
    rhos: tuple[float, ...] = (4.0, 8.0, 16.0)
    lam_q: float = 1e-14
    lam_F: float | None = None
    delta_nd: float = 1e-3
    noise_level: float = 0.0
    max_order: int = 3
    gn_max_iter: int = 30
    gn_tol: float = 1e-10
    cond_cap: float = 1e15
    excitation_floor: float = 1e-8
    discrepancy_tau: float = 1.5

    def __post_init__(self):
        if self.mode not in ("variational", "probe"):
            raise ValueError("mode must be 'variational' or 'probe'")
        if self.lam_q < 0 or (self.lam_F is not None and self.lam_F < 0):
            raise ValueError("Tikhonov weights must be nonnegative")
        if not self.delta_nd > 0:
            raise ValueError("non-degeneracy floor must be positive")
        if not 2 <= self.max_order <= 4:
            raise ValueError("running-cost order must be between 2 and 4")
        if any(r <= 0 for r in self.rhos) or len(self.rhos) < 2:
            raise ValueError("rho ladder needs at least two positive values")
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")
        object.__setattr__(self, "frequencies", tuple(int(k) for k in self.frequencies))
        object.__setattr__(self, "rhos", tuple(sorted(float(r) for r in self.rhos)))

    def check_lattice(self, grid: Grid):
        nyquist = min(grid.n_cells) // 2
        if any(abs(k) > nyquist for k in self.frequencies):
            raise ValueError(f"frequency lattice exceeds the grid Nyquist limit {nyquist}")


@dataclass(frozen=True, eq=False)
class StageResult:
    value: np.ndarray
    residual: float
    info: dict = field(default_factory=dict)


@dataclass(eq=False)
class ReconstructionReport:
    q: np.ndarray | None = None
    u0: np.ndarray | None = None
    kappa: np.ndarray | None = None
    mask: np.ndarray | None = None
    m0: np.ndarray | None = None
    F: dict[int, np.ndarray] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)
    errors: dict[str, float] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stages": [k for k in ("q", "u0", "kappa", "m0") if getattr(self, k) is not None]
            + [f"F{k}" for k in sorted(self.F)],
            "residuals": dict(self.residuals),
            "errors": dict(self.errors),
            "masked_nodes": int(self.mask.sum()) if self.mask is not None else None,
            "info": self.info,
        }


def relative_l2(grid: Grid, approx: np.ndarray, truth: np.ndarray, where: np.ndarray | None = None) -> float:
    w = np.broadcast_to(grid.weights, grid.shape)
    if where is not None:
        w = w * where
    d = np.asarray(approx) - np.asarray(truth)
    t = np.asarray(truth)
    if d.ndim > grid.dim:
        d = np.linalg.norm(d, axis=-1)
        t = np.linalg.norm(t, axis=-1)
    den = math.sqrt(float(np.sum(w * t**2)))
    num = math.sqrt(float(np.sum(w * d**2)))
    return num / den if den > 0 else num


# -- linear-algebra helpers -------------------------------------------------


def _cols_apply(G: sp.spmatrix, U: np.ndarray) -> np.ndarray:
    """Apply a node operator to ``(levels, N, cols)`` along the node axis."""
    L, N, c = U.shape
    out = G @ U.transpose(1, 0, 2).reshape(N, L * c)
    return out.reshape(G.shape[0], L, c).transpose(1, 0, 2)


def _grad_trace_cols(grid: Grid, U: np.ndarray) -> np.ndarray:
    """Boundary gradient of ``(levels, N, cols)`` -> ``(levels, nb, dim, cols)``."""
    B = grid.boundary_index
    return np.stack([_cols_apply(G[B], U) for G in grid.grad_ops], axis=2)


def _u_stepper(grid: Grid, q: np.ndarray) -> ImplicitEuler:
    qf = np.asarray(q).reshape(grid.n_nodes, grid.dim)
    K = -grid.lap_op + sum(sp.diags(qf[:, k]) @ G for k, G in enumerate(grid.grad_ops))
    return ImplicitEuler(grid, K)


def _regularizer(grid: Grid, ncomp: int, order: int = 2) -> sp.csr_matrix:
    """Weighted smoothness operator per node-field component.

    ``order = 1`` penalises ``|grad f|^2``, ``order = 2`` the per-axis second
    derivatives (boundary rows use the one-sided closure), whose null space
    contains affine fields.
    """
    sw = sp.diags(np.sqrt(np.broadcast_to(grid.weights, grid.shape).ravel()))
    if order == 1:
        D = sp.vstack([sw @ G for G in grid.grad_ops])
    else:
        D = sp.vstack([sw @ S for S in grid.second_ops])
    return sp.block_diag([D] * ncomp, format="csr")


def _solve_normal(J: np.ndarray, r: np.ndarray, R: sp.spmatrix, lam: float, cap: float, shift=None):
    """Minimise ``|J x - r|^2 + lam |R (x + shift)|^2``."""
    RtR = (R.T @ R).toarray()
    H = J.T @ J + lam * RtR
    rhs = J.T @ r
    if shift is not None:
        rhs = rhs - lam * RtR @ shift
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > cap:
        raise IllConditioned(f"normal-equation condition {cond:.2e} exceeds {cap:.1e}")
    return np.linalg.solve(H, rhs), cond


# -- drift ------------------------------------------------------------------------


def _drives_u(grid: Grid, spec: PerturbationSpec) -> bool:
    return bool(np.any(trace(grid, spec.g) != 0))


def _first_order_records(meas: Measurements):
    """First-order u records of the directions that perturb the u boundary data."""
    out = []
    for l, spec in enumerate(meas.directions):
        if _drives_u(meas.grid, spec):
            d = meas.derivative(l, 1)
            out.append((d.u, d.du))
    if not out:
        raise InsufficientData("no perturbed records with u boundary data supplied")
    return out


def cost_directions(meas: Measurements) -> list[int]:
    """Directions used for the running cost: density-only excitations when present.

    With ``g = 0`` the first-order u vanishes, so the gradient cross terms
    drop out of the higher-order sources and the data respond to ``F^(k)``
    without the metric-weighted background.
    """
    density_only = [l for l, d in enumerate(meas.directions) if not _drives_u(meas.grid, d)]
    return density_only or list(range(len(meas.directions)))


def recover_q_variational(grid: Grid, records, config: ReconstructionConfig, q_init=None) -> StageResult:
    """Gauss-Newton fit of the drift to first-order u data with a curvature penalty.

    ``records`` is a list of ``(u_trace, grad_trace)`` pairs of first-order
    data; the traces are the Dirichlet inputs, the gradients the fitted data.
    """
    if not records:
        raise InsufficientData("no perturbed records supplied")
    N, d = grid.n_nodes, grid.dim
    theta = np.zeros(N * d) if q_init is None else np.asarray(q_init, dtype=float).ravel().copy()
    meas = np.concatenate([du.ravel() for _, du in records])
    scale = float(np.linalg.norm(meas))
    if scale == 0:
        raise InsufficientData("first-order data vanish")
    R = _regularizer(grid, d)
    L = grid.n_time + 1
    nb = len(grid.boundary_index)

    def forward(theta, jac):
        q = theta.reshape(N, d)
        stepper = _u_stepper(grid, q)
        preds, blocks = [], []
        for ub, _ in records:
            u = stepper.backward(np.zeros(N), ub)
            preds.append(_grad_trace_cols(grid, u[..., None])[..., 0].ravel())
            if jac:
                gu = np.stack([G @ u.T for G in grid.grad_ops], axis=-1).transpose(1, 0, 2)
                src = np.zeros((L, N, N * d))
                for k in range(d):
                    src[:, np.arange(N), np.arange(N) * d + k] = -gu[:, :, k]
                du = stepper.backward(np.zeros((N, N * d)), np.zeros((L, nb, N * d)), src)
                blocks.append(_grad_trace_cols(grid, du).reshape(-1, N * d))
        pred = np.concatenate(preds)
        return pred, (np.vstack(blocks) if jac else None)

    def objective(theta, pred, lam):
        return float(np.sum((pred - meas) ** 2) / scale**2 + lam * np.sum((R @ theta) ** 2))

    def gauss_newton(theta, lam):
        pred, J = forward(theta, True)
        obj = objective(theta, pred, lam)
        it, cond = 0, float("nan")
        for it in range(1, config.gn_max_iter + 1):
            step, cond = _solve_normal(J / scale, (meas - pred) / scale, R, lam, config.cond_cap, theta)
            t = 1.0
            while True:
                trial = theta + t * step
                try:
                    p_trial, _ = forward(trial, False)
                    o_trial = objective(trial, p_trial, lam)
                except SingularSystem:
                    p_trial, o_trial = pred, np.inf
                if o_trial <= obj or t < 1e-3:
                    break
                t /= 2
            if o_trial > obj:
                break
            theta, obj, pred = trial, o_trial, p_trial
            if np.linalg.norm(t * step) <= config.gn_tol * max(1.0, np.linalg.norm(theta)):
                break
            J = forward(theta, True)[1]
        return theta, pred, it, cond

    # continuation from strong to weak smoothing keeps Gauss-Newton in its
    # basin; with a declared noise level it stops at the discrepancy target
    target = config.discrepancy_tau * config.noise_level
    lams = _lambda_ladder(config.lam_q)
    history = []
    for lam in lams:
        theta, pred, it, cond = gauss_newton(theta, lam)
        residual = float(np.linalg.norm(pred - meas) / scale)
        history.append((lam, residual, it))
        if residual <= target:
            break
    log.info("variational q: lambda %.1e, misfit %.3e, cond %.2e", lam, residual, cond)
    info = {"lambda": lam, "condition": cond, "continuation": history}
    return StageResult(theta.reshape(*grid.shape, d), residual, info)


def _lambda_ladder(lam_min: float, start: float = 1e-6) -> list[float]:
    if lam_min >= start:
        return [lam_min]
    n = int(np.ceil(np.log10(start / lam_min)))
    return [start * 10.0**-j for j in range(n)] + [lam_min]


def _probe_directions(grid: Grid, config: ReconstructionConfig):
    """``(xi, zeta)`` pairs: ``zeta`` spans the axes at ``xi = 0`` and is ``xi``-orthogonal otherwise."""
    out = [(np.zeros(grid.dim), np.eye(grid.dim)[k]) for k in range(grid.dim)]
    if grid.dim == 1:
        out.append((np.zeros(1), -np.ones(1)))
        return out
    L = np.array([e[1] - e[0] for e in grid.extent])
    ks = [k for k in config.frequencies]
    for kx in ks:
        for ky in ks:
            if (kx, ky) <= (0, 0):
                continue
            xi = 2 * np.pi * np.array([kx, ky]) / L
            z = np.array([-xi[1], xi[0]]) / np.linalg.norm(xi)
            out.append((xi, z))
    return out


def _pairings(grid, response, params_list, q_ref):
    from .grid import divergence, normal_derivative

    qpot = -divergence(grid, q_ref)
    vals = []
    for p in params_list:
        fw = cgo_forward(grid, p, q_ref, qpot)
        lead = cgo_backward(grid, p, q_ref).leading
        U = response(p, trace(grid, lead))
        zeta = np.asarray(p.zeta)
        # weighted Cauchy data of u = e^{-psi} U
        Ut = trace(grid, U)
        Un = normal_derivative(grid, U) - p.rho * Ut * (grid.normals @ zeta)
        vals.append(boundary_pairing(grid, fw, Ut, Un, q_ref) / p.rho)
    return vals


def _richardson(rhos, vals) -> complex:
    r1, r2 = rhos[-2], rhos[-1]
    f1, f2 = vals[-2], vals[-1]
    return (r2 * f2 - r1 * f1) / (r2 - r1)


def recover_q_probe(
    grid: Grid,
    response: Callable[[CGOParams, np.ndarray], np.ndarray],
    config: ReconstructionConfig,
    q_ref: np.ndarray | None = None,
    tau: float = 0.0,
) -> StageResult:
    """Drift from CGO pairings of first-order data, synthesised on the Fourier lattice.

    Each lattice pair ``(xi, zeta)`` yields ``int e^{-i x.xi} (q - q_ref).zeta dx``
    to first order in ``q - q_ref``. In one dimension ``xi = 0`` is the only
    admissible frequency and the mean is recovered through the exact
    amplitude relation ``int (q - q_ref) zeta = 2 log(1 - L / (2 T_chi))``:
    the response amplitude is pinned at the inflow end of the ``zeta`` ray,
    so the paired amplitudes multiply to ``exp(int_inflow^x (q - q_ref) / 2)``.
    Components along ``xi`` are invisible to the pairing and set to zero.
    """
    config.check_lattice(grid)
    if max(config.rhos) * max(grid.h) > 0.25:
        warnings.warn(
            f"rho = {max(config.rhos):g} is under-resolved at h = {max(grid.h):.3g}; "
            "probe pairings carry large discretisation errors", stacklevel=2,
        )
    q_ref = np.zeros((*grid.shape, grid.dim)) if q_ref is None else np.asarray(q_ref, dtype=float)
    vol = float(np.prod([e[1] - e[0] for e in grid.extent]))
    coeffs = np.zeros((*grid.shape, grid.dim), dtype=complex)
    spread = 0.0
    info = []
    for xi, zeta in _probe_directions(grid, config):
        plist = [CGOParams(r, tuple(zeta), tuple(xi), tau) for r in config.rhos]
        vals = _pairings(grid, response, plist, q_ref)
        lim = _richardson(config.rhos, vals)
        chi = plist[0].chi(grid)
        tchi = complex(np.sum(grid.time_weights * chi**2 * np.exp(-1j * tau * grid.times)))
        if grid.dim == 1:
            c = 2.0 * np.log(1.0 - lim / (2.0 * tchi))
            c_prev = 2.0 * np.log(1.0 - _richardson(config.rhos[:-1], vals[:-1]) / (2.0 * tchi)) if len(vals) > 2 else c
        else:
            c = -lim / tchi
            c_prev = -_richardson(config.rhos[:-1], vals[:-1]) / tchi if len(vals) > 2 else c
        spread = max(spread, abs(c - c_prev) / vol)
        info.append({"xi": xi.tolist(), "zeta": zeta.tolist(), "coefficient": [c.real, c.imag]})
        phase = np.exp(1j * (grid.coords @ xi))
        # real field: a nonzero xi stands for the +-xi pair
        weight = 1.0 if not np.any(xi) else 2.0
        coeffs = coeffs + weight * (c / vol) * phase[..., None] * zeta
    if grid.dim == 1:
        # two opposite rays estimate the same mean
        coeffs = coeffs / 2.0
    q = q_ref + coeffs.real
    return StageResult(q, spread, {"lattice": info})


class LinearResponse:
    """First-order u response in weighted CGO coordinates for a given drift.

    Stands in for the linearized measurement map when synthetic data are
    generated: it returns ``e^{psi} u`` for the equation
    ``-d_t u - Lap u + q . grad u = 0`` with weighted Dirichlet data.
    """

    def __init__(self, grid: Grid, q: np.ndarray):
        self.grid = grid
        self.q = np.asarray(q, dtype=float)

    def __call__(self, params: CGOParams, boundary: np.ndarray) -> np.ndarray:
        return weighted_backward(self.grid, params, self.q, None, boundary)


# -- stationary state and conformal factor ---------------------------------------


def _trace_values(grid: Grid, data) -> np.ndarray:
    if isinstance(data, CauchyDataset):
        return np.asarray(data.u)[0] if np.ndim(data.u) == 2 else np.asarray(data.u)
    data = np.asarray(data, dtype=float)
    return data[0] if data.ndim == 2 else data


def _elliptic_solve(grid: Grid, K: sp.spmatrix, dirichlet: np.ndarray) -> np.ndarray:
    I, B = grid.interior_index, grid.boundary_index
    K = sp.csr_matrix(K)
    KI = K[I]
    x = np.zeros(grid.n_nodes)
    x[B] = dirichlet
    rhs = -KI[:, B] @ x[B]
    try:
        x[I] = spsolve(sp.csc_matrix(KI[:, I]), rhs)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("elliptic solve produced non-finite values")
    res = np.abs(KI @ x).max() if len(I) else 0.0
    scale = max(1.0, float(np.abs(KI[:, B] @ x[B]).max()) if len(I) else 1.0)
    if res > 1e-10 * scale:
        raise SingularSystem(f"elliptic residual {res:.2e} above tolerance")
    return x.reshape(grid.shape)


def recover_u0(grid: Grid, q: np.ndarray, u_trace) -> np.ndarray:
    """Solve ``-Lap u0 + q . grad u0 / 2 = 0`` with the stationary Dirichlet trace."""
    qf = np.asarray(q).reshape(grid.n_nodes, grid.dim)
    K = -grid.lap_op + 0.5 * sum(sp.diags(qf[:, k]) @ G for k, G in enumerate(grid.grad_ops))
    return _elliptic_solve(grid, K, _trace_values(grid, u_trace))


def recover_m0(grid: Grid, q: np.ndarray, m_trace, tol: float = 1e-10) -> np.ndarray:
    """Solve ``-Lap m0 - div(q m0) = 0`` with the stationary Dirichlet trace."""
    mb = _trace_values(grid, m_trace.m if isinstance(m_trace, CauchyDataset) else m_trace)
    if np.min(mb) < 0:
        raise ValueError("stationary density trace must be nonnegative")
    qf = np.asarray(q).reshape(grid.n_nodes, grid.dim)
    K = -grid.lap_op - sum(G @ sp.diags(qf[:, k]) for k, G in enumerate(grid.grad_ops))
    m0 = _elliptic_solve(grid, K, mb)
    if m0.min() < -tol:
        warnings.warn(f"recovered density dips to {m0.min():.3e}", NegativeDensityWarning)
    return m0


def _neighbor_laplacian(grid: Grid) -> sp.csr_matrix:
    """Graph Laplacian of the node lattice (nearest neighbours, no boundary closure)."""
    mats = []
    for a, n in enumerate(grid.n_cells):
        d = sp.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n))
        eyes = [sp.identity(m) for m in grid.n_cells]
        eyes[a] = d
        out = eyes[0]
        for e in eyes[1:]:
            out = sp.kron(out, e)
        mats.append(out)
    adj = sum(mats).tocsr()
    return (sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj).tocsr()


def harmonic_fill(grid: Grid, values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace ``values`` on ``mask`` by the discrete harmonic extension of the rest."""
    mask = np.asarray(mask, dtype=bool).ravel()
    out = np.asarray(values, dtype=float).ravel().copy()
    if not mask.any():
        return out.reshape(grid.shape)
    Lg = _neighbor_laplacian(grid)
    M, K = np.flatnonzero(mask), np.flatnonzero(~mask)
    A = Lg[M][:, M]
    rhs = -Lg[M][:, K] @ out[K]
    out[M] = spsolve(sp.csc_matrix(A), rhs)
    return out.reshape(grid.shape)


def recover_kappa(
    grid: Grid, q: np.ndarray, u0: np.ndarray, g: np.ndarray, delta_nd: float = 1e-3
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ``kappa = q . g grad u0 / (2 |g grad u0|^2)``; returns ``(kappa, mask)``.

    ``mask`` flags degenerate nodes (``|g grad u0| < delta_nd``), which are
    filled by harmonic extension.
    """
    gu = np.einsum("...ij,...j->...i", np.broadcast_to(g, (*grid.shape, grid.dim, grid.dim)), gradient(grid, u0))
    norm2 = np.sum(gu**2, axis=-1)
    mask = np.sqrt(norm2) < delta_nd
    if mask.all():
        raise DegenerateEverywhere("g grad u0 vanishes below the non-degeneracy floor at every node")
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(mask, 0.0, np.sum(np.asarray(q) * gu, axis=-1) / (2.0 * np.where(mask, 1.0, norm2)))
    return harmonic_fill(grid, kappa, mask), mask


# -- running cost -----------------------------------------------------------


def _order_sources(grid, op: LinearizedOperator, cost: RunningCost, first: LinearizedSolution, k: int):
    """Sources of the order-``k`` directional system with ``F^(k)`` removed, plus ``m1^k``.

    All labels carry the same direction, so every sub-multi-index of size
    ``r`` shares the order-``r`` directional derivative.
    """
    base = RunningCost(cost.m0, {j: c for j, c in cost.coefficients.items() if j < k})
    by_order = {1: first}
    for n in range(2, k):
        S = tuple(range(1, n + 1))
        lower = {B: by_order[len(B)] for r in range(1, n) for B in combinations(S, r)}
        su, sm = assemble_sources(grid, base, lower, S, op)
        zero = np.zeros((grid.n_time + 1, len(grid.boundary_index)))
        u, m = op.solve(zero, zero, su, sm)
        by_order[n] = LinearizedSolution(S, u.reshape(grid.st_shape), m.reshape(grid.st_shape))
    S = tuple(range(1, k + 1))
    lower = {B: by_order[len(B)] for r in range(1, k) for B in combinations(S, r)}
    su, sm = assemble_sources(grid, base, lower, S, op)
    mk = first.m.reshape(grid.n_time + 1, grid.n_nodes) ** k
    return su, sm, mk


def _data_vector(grid: Grid, u: np.ndarray, m: np.ndarray, records=("du", "dm")) -> np.ndarray:
    """Boundary gradients of u and m; ``(levels, N, cols)`` -> ``(rows, cols)``."""
    parts = {"du": u, "dm": m}
    return np.concatenate([_grad_trace_cols(grid, parts[r]).reshape(-1, u.shape[-1]) for r in records])


def _morozov(J, d, R, target, cap):
    """Largest ``lam`` with misfit ``|J f - d| <= target`` (bisection in log lam)."""
    RtR = (R.T @ R).toarray()
    JtJ, Jtd = J.T @ J, J.T @ d
    s = np.trace(JtJ) / max(np.trace(RtR), 1e-300)

    def fit(lam):
        return np.linalg.solve(JtJ + lam * RtR, Jtd)

    def misfit(loglam):
        f = fit(s * 10.0**loglam)
        return float(np.linalg.norm(J @ f - d)) - target

    lo, hi = -16.0, 2.0
    if misfit(lo) > 0:
        return s * 10.0**lo
    if misfit(hi) < 0:
        return s * 10.0**hi
    return s * 10.0 ** brentq(misfit, lo, hi, xtol=1e-3)


@dataclass(frozen=True, eq=False)
class InverseSourceResult:
    value: np.ndarray
    lam: float
    residual: float
    condition: float


def recover_Fk(
    grid: Grid,
    metric: MetricField,
    state: StationaryState,
    k: int,
    first_order: Sequence[tuple[np.ndarray, np.ndarray]],
    data: Sequence[CauchyDataset],
    lower: Mapping[int, np.ndarray] | None = None,
    lam: float | None = None,
    noise: float | None = None,
    config: ReconstructionConfig | None = None,
    op: LinearizedOperator | None = None,
    records: tuple[str, ...] = ("du",),
) -> InverseSourceResult:
    """Linear inverse-source solve for ``F^(k)`` from order-``k`` directional data.

    ``first_order`` lists the Dirichlet inputs ``(g, h)`` of each direction;
    ``data`` the matching order-``k`` records. First-order and lower-order
    solutions are simulated from ``(metric, state)`` with ``lower``
    coefficients. ``lam = None`` picks the weight by the discrepancy
    principle at noise level ``noise`` (relative, defaults to the config).
    """
    config = config or ReconstructionConfig()
    lower = dict(lower or {})
    missing = [j for j in range(2, k) if j not in lower]
    if missing:
        raise MissingLowerOrder(f"F^({k}) needs lower coefficients {missing}")
    if len(first_order) != len(data) or not data:
        raise InsufficientData("one order-k record per first-order direction is required")
    op = op or LinearizedOperator(grid, state, metric)
    cost = RunningCost(state.m0, lower)
    N = grid.n_nodes
    L = grid.n_time + 1
    nb = len(grid.boundary_index)
    blocks, rhs = [], []
    excitation = 0.0
    for (g, h), rec in zip(first_order, data):
        first = solve_first_order(grid, state, metric, g, h, 1, op)
        su, sm, mk = _order_sources(grid, op, cost, first, k)
        excitation = max(excitation, float(np.sqrt(abs(integrate(grid, mk.reshape(grid.st_shape) ** 2)))))
        zero = np.zeros((L, nb))
        u_known, m_known = op.solve(zero, zero, su, sm)
        known = _data_vector(grid, u_known[..., None], m_known[..., None], records)[:, 0]
        src = np.zeros((L, N, N))
        src[:, np.arange(N), np.arange(N)] = mk
        zc = np.zeros((L, nb, N))
        if "dm" in records:
            uc, mc = op.solve(zc, zc, src, None)
        else:
            uc = mc = op.solve_u(zc, src)
        meas = np.concatenate([np.asarray(getattr(rec, r)).ravel() for r in records])
        blocks.append(_data_vector(grid, uc, mc, records))
        rhs.append(meas - known)
    if excitation < config.excitation_floor:
        raise InsufficientExcitation(f"|m1^{k}| = {excitation:.2e} below the excitation floor")
    J = np.vstack(blocks)
    d = np.concatenate(rhs)
    # the noise is relative to the records, so the discrepancy target scales with them;
    # J and d stay unscaled to keep a fixed-lam solve linear in the data
    scale = _record_norm(data, records) or 1.0
    R = _regularizer(grid, 1)
    if lam is None:
        lam = config.lam_F
    if lam is None:
        level = config.noise_level if noise is None else noise
        floor = _model_floor(J, d, R)
        target = config.discrepancy_tau * max(level * scale, floor)
        lam = _morozov(J, d, R, target, config.cond_cap)
    f, cond = _solve_normal(J, d, R, lam, config.cond_cap)
    residual = float(np.linalg.norm(J @ f - d)) / scale
    log.info("F^(%d): lam=%.3e misfit=%.3e cond=%.2e", k, lam, residual, cond)
    return InverseSourceResult(f.reshape(grid.shape), float(lam), residual, float(cond))


def _record_norm(data: Sequence[CauchyDataset], records) -> float:
    """Euclidean norm of the fitted records (the noise model is relative to it)."""
    return float(np.sqrt(sum(np.sum(np.asarray(getattr(r, k)) ** 2) for r in data for k in records)))


def _model_floor(J, d, R) -> float:
    """Misfit of the nearly unregularised fit: the part of the data no source explains."""
    RtR = (R.T @ R).toarray()
    JtJ = J.T @ J
    lam = 1e-12 * np.trace(JtJ) / max(np.trace(RtR), 1e-300)
    f = np.linalg.lstsq(np.vstack([J, math.sqrt(lam) * R.toarray()]), np.concatenate([d, np.zeros(R.shape[0])]), rcond=None)[0]
    return float(np.linalg.norm(J @ f - d))


def recover_F2(grid, metric, state, first_order, data, lam=None, noise=None, config=None, op=None):
    return recover_Fk(grid, metric, state, 2, first_order, data, {}, lam, noise, config, op)


# -- pipeline -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruth:
    q: np.ndarray
    u0: np.ndarray
    kappa: np.ndarray
    m0: np.ndarray
    F: dict[int, np.ndarray]


@contextmanager
def _stage(name: str):
    """Attach the pipeline stage to solver errors raised inside the block."""
    try:
        yield
    except MFGError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def reconstruct(
    meas: Measurements,
    g: np.ndarray,
    config: ReconstructionConfig,
    truth: GroundTruth | None = None,
    response: Callable | None = None,
) -> ReconstructionReport:
    """Run every stage in order; stages after a failure are absent from the report."""
    grid = meas.grid
    rep = ReconstructionReport()
    with _stage("q"):
        if config.mode == "probe":
            if response is None:
                raise InsufficientData("probe mode needs a first-order response operator")
            res = recover_q_probe(grid, response, config)
        else:
            res = recover_q_variational(grid, _first_order_records(meas), config)
    rep.q, rep.residuals["q"] = res.value, res.residual
    rep.info["q"] = {k: v for k, v in res.info.items() if k != "lattice"}

    with _stage("u0"):
        rep.u0 = recover_u0(grid, rep.q, meas.base.u)
    with _stage("kappa"):
        rep.kappa, rep.mask = recover_kappa(grid, rep.q, rep.u0, g, config.delta_nd)
    with _stage("m0"):
        rep.m0 = recover_m0(grid, rep.q, meas.base.m)

    metric = MetricField(grid, g, rep.kappa)
    state = StationaryState(rep.u0, rep.m0)
    op = LinearizedOperator(grid, state, metric)
    chosen = cost_directions(meas)
    first = [(trace(grid, meas.directions[l].g), trace(grid, meas.directions[l].h)) for l in chosen]
    for k in range(2, config.max_order + 1):
        with _stage(f"F{k}"):
            data = [meas.derivative(l, k) for l in chosen]
            out = recover_Fk(grid, metric, state, k, first, data, rep.F, config=config, op=op)
        rep.F[k] = out.value
        rep.residuals[f"F{k}"] = out.residual
        rep.info[f"F{k}"] = {"lambda": out.lam, "condition": out.condition, "directions": chosen}

    if truth is not None:
        rep.errors = reconstruction_errors(grid, rep, truth)
    return rep


def reconstruction_errors(grid: Grid, rep: ReconstructionReport, truth: GroundTruth) -> dict[str, float]:
    B = grid.boundary_index
    err = {}
    if rep.q is not None:
        err["q"] = relative_l2(grid, rep.q, truth.q)
    if rep.u0 is not None:
        # gauge: compare after removing the boundary mean
        c_rec = float(np.mean(rep.u0.ravel()[B]))
        c_true = float(np.mean(truth.u0.ravel()[B]))
        err["u0"] = relative_l2(grid, rep.u0 - c_rec, truth.u0 - c_true)
    if rep.kappa is not None:
        err["kappa"] = relative_l2(grid, rep.kappa, truth.kappa, where=~rep.mask)
    if rep.m0 is not None:
        err["m0"] = relative_l2(grid, rep.m0, truth.m0)
    for k, f in rep.F.items():
        if k in truth.F:
            err[f"F{k}"] = relative_l2(grid, f, truth.F[k])
    return err


# -- uniqueness gate ----------------------------------------------------------------


@dataclass(frozen=True)
class UniquenessReport:
    measurement_distance: float
    config_distance: float
    separation: float
    noise_floor: float
    forward_tolerance: float

    @property
    def pass_forward(self) -> bool:
        """Equal configurations must give equal measurements."""
        return self.config_distance > 0 or self.measurement_distance <= self.forward_tolerance

    @property
    def pass_inverse(self) -> bool:
        """Distinct configurations must be separated above the noise floor."""
        return self.config_distance == 0 or self.separation >= 10.0 * self.noise_floor

    @property
    def passed(self) -> bool:
        return self.pass_forward and self.pass_inverse


def _config_distance(p1: MFGProblem, p2: MFGProblem) -> float:
    parts = [
        np.abs(p1.metric.A - p2.metric.A).max(),
        np.abs(p1.state.u0 - p2.state.u0).max(),
        np.abs(p1.state.m0 - p2.state.m0).max(),
    ]
    for k in set(p1.cost.coefficients) | set(p2.cost.coefficients):
        parts.append(np.abs(p1.cost.coefficient(k) - p2.cost.coefficient(k)).max())
    return float(max(parts))


def _record_distance(a: CauchyDataset, b: CauchyDataset) -> float:
    return a.distance(b)


def uniqueness_gate(
    p1: MFGProblem,
    p2: MFGProblem,
    directions: Sequence[PerturbationSpec],
    eps: float = 1e-2,
    settings: SolverSettings | None = None,
    forward_tolerance: float = 1e-9,
) -> UniquenessReport:
    """Compare the measurement maps of two configurations on a shared battery.

    ``separation`` is the largest distance between second-order data; the
    noise floor is the divided-difference truncation estimate, i.e. the
    change of each configuration's second-order data between ``eps`` and
    ``eps / 2``.
    """
    settings = settings or SolverSettings(tol_fp=1e-13)
    m1 = simulate_measurements(p1, directions, eps, (-2, -1, 1, 2), settings)
    m2 = simulate_measurements(p2, directions, eps, (-2, -1, 1, 2), settings)
    dist = _record_distance(m1.base, m2.base)
    for s1, s2 in zip(m1.samples, m2.samples):
        for j in s1:
            dist = max(dist, _record_distance(s1[j], s2[j]))
    sep, floor = 0.0, 0.0
    for l in range(len(directions)):
        d1 = {j: m1.samples[l][j] for j in (-1, 1)} | {0: m1.base}
        d2 = {j: m2.samples[l][j] for j in (-1, 1)} | {0: m2.base}
        a = divided_difference(d1, eps, 2)
        b = divided_difference(d2, eps, 2)
        sep = max(sep, _record_distance(a, b))
        # same stencil at 2 eps
        for mm in (m1, m2):
            coarse = divided_difference({-1: mm.samples[l][-2], 0: mm.base, 1: mm.samples[l][2]}, 2 * eps, 2)
            fine = divided_difference({-1: mm.samples[l][-1], 0: mm.base, 1: mm.samples[l][1]}, eps, 2)
            # Richardson: the truncation error at eps is a third of the difference
            floor = max(floor, _record_distance(coarse, fine) / 3.0)
    return UniquenessReport(dist, _config_distance(p1, p2), sep, floor, forward_tolerance)
