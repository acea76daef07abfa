"""Forward solvers: the stationary system, the time-dependent quadratic MFG system, and measurement.

Discrete system on a :class:`~mfg_decode.grid.Grid` with implicit Euler in time:

    (u^n - u^{n+1})/dt - Lap u^n + (grad u^n)^T A grad u^n = F(x, m^n) + s_u^n
    (m^{n+1} - m^n)/dt - Lap m^{n+1} - 2 div(m^{n+1} A grad u^{n+1}) = s_m^{n+1}

at interior nodes, Dirichlet data on the boundary, ``u^{N} = u_T`` and
``m^0 = f``. The coupling is resolved by a relaxed backward-forward sweep.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import (
    FixedPointDivergence,
    IndefiniteJacobian,
    NegativeDensityWarning,
    NonConvergence,
)
from .grid import Grid, MetricField, gradient, gradient_trace, trace
from .parabolic import lu_solve, restricted

log = logging.getLogger(__name__)


# -- data -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RunningCost:
    """Running cost expanded around ``m0``: ``F(x, z) = sum_k F_k(x) (z - m0)^k / k!``, k >= 2."""

    m0: np.ndarray
    coefficients: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        m0 = np.asarray(self.m0, dtype=float)
        coeffs = {}
        for k, c in self.coefficients.items():
            if int(k) < 2:
                raise ValueError("running cost starts at quadratic order")
            coeffs[int(k)] = np.broadcast_to(np.asarray(c, dtype=float), m0.shape).copy()
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "coefficients", dict(sorted(coeffs.items())))

    @property
    def K(self) -> int:
        return max(self.coefficients, default=2)

    def coefficient(self, k: int) -> np.ndarray:
        return self.coefficients.get(k, np.zeros_like(self.m0))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        d = z - self.m0
        out = np.zeros(np.shape(z))
        for k, c in self.coefficients.items():
            out = out + c * d**k / math.factorial(k)
        return out

    def dz(self, z: np.ndarray) -> np.ndarray:
        d = z - self.m0
        out = np.zeros(np.shape(z))
        for k, c in self.coefficients.items():
            out = out + c * d ** (k - 1) / math.factorial(k - 1)
        return out

    def with_center(self, m0: np.ndarray) -> RunningCost:
        return RunningCost(m0, self.coefficients)


@dataclass(frozen=True, eq=False)
class StationaryState:
    u0: np.ndarray
    m0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u0", np.asarray(self.u0, dtype=float))
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float))

    @classmethod
    def constant(cls, grid: Grid, u: float = 0.0, m: float = 1.0) -> StationaryState:
        return cls(np.full(grid.shape, float(u)), np.full(grid.shape, float(m)))

    def drift(self, grid: Grid, metric: MetricField) -> np.ndarray:
        """``q = 2 A grad u0``."""
        return 2.0 * np.einsum("...ij,...j->...i", metric.A, gradient(grid, self.u0))


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    """Boundary perturbation ``(g, h)`` with amplitude ``eps``.

    ``g`` and ``h`` are space-time fields over the whole grid; only their
    boundary traces drive the solvers, the interior values serve as the
    extension needed by the compatibility relations.
    """

    g: np.ndarray
    h: np.ndarray
    eps: float = 1.0
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))

    def scaled(self, eps: float) -> PerturbationSpec:
        return PerturbationSpec(self.g, self.h, eps, self.index)

    def boundary(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        return trace(grid, self.g), trace(grid, self.h)


@dataclass(frozen=True)
class SolverSettings:
    theta: float = 0.5
    tol_fp: float = 1e-9
    max_iter: int = 500
    patience: int = 8
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    delta_fp: float | None = None


@dataclass(frozen=True, eq=False)
class MFGProblem:
    grid: Grid
    metric: MetricField
    cost: RunningCost
    state: StationaryState
    perturbations: tuple[PerturbationSpec, ...] = ()
    u_T: np.ndarray | None = None
    f: np.ndarray | None = None
    source_u: np.ndarray | None = None
    source_m: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "perturbations", tuple(self.perturbations))
        g = self.grid
        uT = self.state.u0 if self.u_T is None else np.asarray(self.u_T, dtype=float)
        f = self.state.m0 if self.f is None else np.asarray(self.f, dtype=float)
        object.__setattr__(self, "u_T", uT)
        object.__setattr__(self, "f", f)
        ub, mb = self.boundary_values()
        scale = 1e-10 * max(1.0, np.abs(ub).max(), np.abs(mb).max())
        if np.abs(trace(g, uT) - ub[-1]).max() > scale:
            raise ValueError("terminal data u_T disagrees with the boundary data at t = T")
        if np.abs(trace(g, f) - mb[0]).max() > scale:
            raise ValueError("initial density f disagrees with the boundary data at t = 0")

    def boundary_values(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        nt = g.n_time + 1
        ub = np.tile(trace(g, self.state.u0), (nt, 1))
        mb = np.tile(trace(g, self.state.m0), (nt, 1))
        for p in self.perturbations:
            gb, hb = p.boundary(g)
            ub = ub + p.eps * gb
            mb = mb + p.eps * hb
        return ub, mb

    def amplitude(self) -> float:
        return sum(abs(p.eps) * max(np.abs(p.g).max(), np.abs(p.h).max(), 0.0) for p in self.perturbations)

    def with_perturbations(self, perturbations) -> MFGProblem:
        return MFGProblem(
            self.grid, self.metric, self.cost, self.state, tuple(perturbations),
            None, None, self.source_u, self.source_m,
        )


@dataclass(frozen=True, eq=False)
class MFGSolution:
    u: np.ndarray
    m: np.ndarray
    iterations: int = 0
    increment: float = 0.0

    def __iter__(self):
        return iter((self.u, self.m))


@dataclass(frozen=True, eq=False)
class CauchyDataset:
    """Boundary records ``(u, grad u, m, grad m)`` on boundary nodes for every time level."""

    u: np.ndarray
    du: np.ndarray
    m: np.ndarray
    dm: np.ndarray
    eps: float | tuple = 0.0
    meta: dict = field(default_factory=dict)

    RECORDS = ("u", "du", "m", "dm")

    def __post_init__(self):
        for name in self.RECORDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"record {name} is not finite")

    def records(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.RECORDS}

    def combine(self, weights, others) -> CauchyDataset:
        """Linear combination ``sum_i w_i * others_i`` record by record."""
        out = {k: sum(w * getattr(o, k) for w, o in zip(weights, others)) for k in self.RECORDS}
        return CauchyDataset(**out, eps=self.eps, meta=dict(self.meta))

    def distance(self, other: CauchyDataset) -> float:
        return max(float(np.abs(getattr(self, k) - getattr(other, k)).max()) for k in self.RECORDS)


# -- discrete nonlinear terms -------------------------------------------------


def _grad_flat(grid: Grid, u: np.ndarray) -> np.ndarray:
    return np.stack([G @ u for G in grid.grad_ops], axis=-1)


def _metric_flat(grid: Grid, metric: MetricField) -> np.ndarray:
    return metric.A.reshape(grid.n_nodes, grid.dim, grid.dim)


def _hjb_parts(grid, A, u):
    p = _grad_flat(grid, u)
    b = np.einsum("nij,nj->ni", A, p)
    return np.einsum("ni,ni->n", p, b), b


def _div_flux(grid, m, b):
    return sum(G @ (m * b[:, k]) for k, G in enumerate(grid.grad_ops))


def _advection_matrix(grid, b, rows) -> sp.csr_matrix:
    """``sum_k diag(b_k) G_k`` restricted to ``rows``."""
    out = None
    for k, G in enumerate(grid.grad_ops):
        t = sp.diags(b[rows, k]) @ G[rows]
        out = t if out is None else out + t
    return sp.csr_matrix(out)


def _div_matrix(grid, b, rows) -> sp.csr_matrix:
    """Matrix of ``m -> sum_k G_k (b_k m)`` restricted to ``rows``."""
    out = None
    for k, G in enumerate(grid.grad_ops):
        t = G[rows] @ sp.diags(b[:, k])
        out = t if out is None else out + t
    return sp.csr_matrix(out)


# -- stationary system -------------------------------------------------------


def stationary_residual(grid: Grid, state: StationaryState, metric: MetricField):
    """Discrete residuals of the stationary pair; boundary nodes carry zero."""
    A = _metric_flat(grid, metric)
    u, m = state.u0.ravel(), state.m0.ravel()
    H, b = _hjb_parts(grid, A, u)
    ru = -grid.lap_op @ u + H
    rm = -grid.lap_op @ m - 2.0 * _div_flux(grid, m, b)
    ru[grid.boundary_index] = 0.0
    rm[grid.boundary_index] = 0.0
    return ru.reshape(grid.shape), rm.reshape(grid.shape)


def solve_stationary(
    grid: Grid,
    metric: MetricField,
    dirichlet: tuple[np.ndarray, np.ndarray],
    seed: StationaryState | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> StationaryState:
    """Damped Newton iteration on the coupled stationary system with Dirichlet data."""
    I, B = grid.interior_index, grid.boundary_index
    ub, mb = (np.asarray(d, dtype=float) for d in dirichlet)
    if np.min(mb) < 0:
        raise ValueError("boundary density must be nonnegative")
    if seed is None:
        seed = StationaryState.constant(grid, float(np.mean(ub)), float(np.mean(mb)))
    u, m = seed.u0.ravel().copy(), seed.m0.ravel().copy()
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(m))):
        raise ValueError("seed must be finite")
    u[B], m[B] = ub, mb
    A = _metric_flat(grid, metric)
    lap_I = grid.lap_op[I]
    nI = len(I)

    def resid(u, m):
        H, b = _hjb_parts(grid, A, u)
        ru = -lap_I @ u + H[I]
        rm = -lap_I @ m - 2.0 * _div_flux(grid, m, b)[I]
        return np.concatenate([ru, rm]), b

    r, b = resid(u, m)
    norm = np.abs(r).max()
    for it in range(max_iter):
        if norm <= tol:
            break
        Juu = (-lap_I + 2.0 * _advection_matrix(grid, b, I))[:, I]
        Jmm = (-lap_I - 2.0 * _div_matrix(grid, b, I))[:, I]
        # d/du of -2 sum_k G_k (m (A grad u)_k)
        Jmu = None
        for k, Gk in enumerate(grid.grad_ops):
            inner_k = None
            for j, Gj in enumerate(grid.grad_ops):
                t = sp.diags(A[:, k, j]) @ Gj
                inner_k = t if inner_k is None else inner_k + t
            t = Gk[I] @ sp.diags(m) @ inner_k
            Jmu = t if Jmu is None else Jmu + t
        Jmu = -2.0 * Jmu[:, I]
        J = sp.bmat([[Juu, None], [Jmu, Jmm]], format="csc")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                step = spsolve(J, -r)
        except Exception as exc:
            raise IndefiniteJacobian(f"stationary Newton solve failed: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise IndefiniteJacobian("stationary Newton step is not finite")
        lam = 1.0
        while True:
            u_try, m_try = u.copy(), m.copy()
            u_try[I] += lam * step[:nI]
            m_try[I] += lam * step[nI:]
            r_try, b_try = resid(u_try, m_try)
            n_try = np.abs(r_try).max()
            if n_try < norm or lam < 1e-4:
                break
            lam /= 2
        if n_try >= norm and lam < 1e-4:
            break
        u, m, r, b, norm = u_try, m_try, r_try, b_try, n_try
        log.debug("stationary newton it=%d residual=%.3e damping=%g", it, norm, lam)
    if norm > tol:
        raise NonConvergence(f"stationary residual {norm:.3e} > {tol:.1e}")
    if np.min(m) < -tol:
        warnings.warn("stationary density has negative values", NegativeDensityWarning)
    return StationaryState(u.reshape(grid.shape), m.reshape(grid.shape))


# -- time-dependent system ---------------------------------------------------


def _hjb_sweep(grid, A, cost, m, uT, ub, src, settings, guess):
    """Backward implicit-Euler HJB solve for given density ``m`` (flat arrays)."""
    I, B = grid.interior_index, grid.boundary_index
    ops = restricted(grid)
    dt = grid.dt
    nt = grid.n_time
    u = np.empty_like(m)
    u[nt] = uT
    rhs_F = cost(m.reshape(-1, *grid.shape)).reshape(m.shape) if cost.coefficients else np.zeros_like(m)
    asm = ops.assembler
    base = [(0, 1.0 / dt, None, None), (1, -1.0, None, None)]
    for n in range(nt - 1, -1, -1):
        x = guess[n].copy()
        x[B] = ub[n]
        target = u[n + 1][I] / dt + rhs_F[n][I]
        if src is not None:
            target = target + src[n][I]
        for _ in range(settings.newton_max_iter):
            H, b = _hjb_parts(grid, A, x)
            r = x[I] / dt - ops.lap_I @ x + H[I] - target
            if np.abs(r).max() <= settings.newton_tol:
                break
            J = asm.factor(base + [(2 + k, 2.0, b[I, k], None) for k in range(grid.dim)])
            dx = lu_solve(J, -r)
            x[I] += dx
            if np.abs(dx).max() <= settings.newton_tol * (1.0 + np.abs(x).max()):
                break
        else:
            raise NonConvergence(f"HJB Newton failed at time level {n}")
        u[n] = x
    return u


def _kfp_sweep(grid, A, u, f, mb, src):
    I, B = grid.interior_index, grid.boundary_index
    ops = restricted(grid)
    dt = grid.dt
    m = np.empty_like(u)
    m[0] = f
    asm = ops.assembler
    base = [(0, 1.0 / dt, None, None), (1, -1.0, None, None)]
    for n in range(grid.n_time):
        _, b = _hjb_parts(grid, A, u[n + 1])
        M = asm.factor(base + [(2 + k, -2.0, None, b[I, k]) for k in range(grid.dim)])
        bd = mb[n + 1]
        K_IB_mb = -ops.lap_IB @ bd - 2.0 * sum(G @ (b[B, k] * bd) for k, G in enumerate(ops.G_IB))
        rhs = m[n][I] / dt - K_IB_mb
        if src is not None:
            rhs = rhs + src[n + 1][I]
        m[n + 1, B] = mb[n + 1]
        m[n + 1, I] = lu_solve(M, rhs)
    return m


def mfg_residual(problem: MFGProblem, u: np.ndarray, m: np.ndarray):
    """Residuals of both discrete equations at interior nodes (zero elsewhere)."""
    grid = problem.grid
    N = grid.n_nodes
    A = _metric_flat(grid, problem.metric)
    u = u.reshape(-1, N)
    m = m.reshape(-1, N)
    F = problem.cost(m.reshape(grid.st_shape)).reshape(-1, N)
    su = np.zeros_like(u) if problem.source_u is None else problem.source_u.reshape(-1, N)
    sm = np.zeros_like(m) if problem.source_m is None else problem.source_m.reshape(-1, N)
    ru = np.zeros_like(u)
    rm = np.zeros_like(m)
    for n in range(grid.n_time):
        H, _ = _hjb_parts(grid, A, u[n])
        ru[n] = (u[n] - u[n + 1]) / grid.dt - grid.lap_op @ u[n] + H - F[n] - su[n]
        _, b = _hjb_parts(grid, A, u[n + 1])
        rm[n + 1] = (
            (m[n + 1] - m[n]) / grid.dt
            - grid.lap_op @ m[n + 1]
            - 2.0 * _div_flux(grid, m[n + 1], b)
            - sm[n + 1]
        )
    ru[:, grid.boundary_index] = 0.0
    rm[:, grid.boundary_index] = 0.0
    return ru.reshape(grid.st_shape), rm.reshape(grid.st_shape)


def solve_mfg(
    problem: MFGProblem,
    settings: SolverSettings | None = None,
    initial: tuple[np.ndarray, np.ndarray] | None = None,
) -> MFGSolution:
    """Relaxed backward-forward fixed point for the coupled system."""
    s = settings or SolverSettings()
    grid = problem.grid
    N = grid.n_nodes
    state = problem.state
    delta = s.delta_fp
    if delta is None:
        delta = 0.1 * max(1.0, np.abs(state.u0).max(), np.abs(state.m0).max())
    if problem.amplitude() > delta:
        raise ValueError(
            f"perturbation amplitude {problem.amplitude():.3g} exceeds the fixed-point radius {delta:.3g}"
        )
    A = _metric_flat(grid, problem.metric)
    cost = problem.cost
    ub, mb = problem.boundary_values()
    uT = problem.u_T.ravel()
    f = problem.f.ravel()
    src_u = None if problem.source_u is None else problem.source_u.reshape(-1, N)
    src_m = None if problem.source_m is None else problem.source_m.reshape(-1, N)

    if initial is None:
        u = np.tile(state.u0.ravel(), (grid.n_time + 1, 1))
        m = np.tile(state.m0.ravel(), (grid.n_time + 1, 1))
    else:
        u, m = (np.asarray(a, dtype=float).reshape(-1, N).copy() for a in initial)
    u[:, grid.boundary_index] = ub
    m[:, grid.boundary_index] = mb
    u[-1], m[0] = uT, f

    history = []
    m_kfp = m
    for it in range(1, s.max_iter + 1):
        u_new = _hjb_sweep(grid, A, cost, m, uT, ub, src_u, s, u)
        m_kfp = _kfp_sweep(grid, A, u_new, f, mb, src_m)
        m_new = s.theta * m_kfp + (1.0 - s.theta) * m
        inc = max(np.abs(u_new - u).max(), np.abs(m_new - m).max())
        u, m = u_new, m_new
        history.append(inc)
        log.debug("fixed point it=%d increment=%.3e", it, inc)
        if not np.isfinite(inc):
            raise FixedPointDivergence("fixed-point iterate is not finite")
        if inc <= s.tol_fp:
            break
        if len(history) > s.patience and all(
            history[-k] > history[-k - 1] for k in range(1, s.patience + 1)
        ):
            raise FixedPointDivergence(
                f"increments grew for {s.patience} consecutive sweeps (last {inc:.3e})"
            )
    else:
        raise NonConvergence(f"fixed point did not reach {s.tol_fp:.1e} in {s.max_iter} sweeps")
    m = m_kfp
    if m.min() < -s.tol_fp:
        warnings.warn(f"density minimum {m.min():.3e} is negative", NegativeDensityWarning)
    return MFGSolution(u.reshape(grid.st_shape), m.reshape(grid.st_shape), it, inc)


def measure(grid: Grid, u: np.ndarray, m: np.ndarray, eps=0.0, **meta) -> CauchyDataset:
    """The measurement map: traces and full gradients on the boundary."""
    return CauchyDataset(
        trace(grid, u), gradient_trace(grid, u), trace(grid, m), gradient_trace(grid, m), eps, meta
    )


# -- compatibility -------------------------------------------------------------


@dataclass(frozen=True)
class CompatibilityReport:
    violations: dict[str, float]
    tolerances: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(self.violations[k] <= self.tolerances[k] for k in self.violations)

    @property
    def algebraic_passed(self) -> bool:
        return all(self.violations[k] <= self.tolerances[k] for k in ("g_terminal", "h_initial"))


def check_compatibility(
    grid: Grid,
    spec: PerturbationSpec,
    state: StationaryState,
    metric: MetricField,
    tol_algebraic: float = 1e-8,
    tol_pde: float | None = None,
) -> CompatibilityReport:
    """Evaluate the four corner/trace compatibility relations of a boundary perturbation."""
    B = grid.boundary_index
    gb, hb = spec.boundary(grid)
    v = {"g_terminal": float(np.abs(gb[-1]).max()), "h_initial": float(np.abs(hb[0]).max())}

    A = _metric_flat(grid, metric)
    N = grid.n_nodes
    g = spec.g.reshape(-1, N)
    h = spec.h.reshape(-1, N)
    u0 = state.u0.ravel()
    m0 = state.m0.ravel()
    q = 2.0 * np.einsum("nij,nj->ni", A, _grad_flat(grid, u0))
    dt_g = np.gradient(g, grid.dt, axis=0, edge_order=2)
    dt_h = np.gradient(h, grid.dt, axis=0, edge_order=2)
    ru, rm = [], []
    for n in range(grid.n_time + 1):
        pg = _grad_flat(grid, g[n])
        ru.append(-dt_g[n] - grid.lap_op @ g[n] + np.einsum("ni,ni->n", q, pg))
        flux = m0[:, None] * np.einsum("nij,nj->ni", A, pg)
        rm.append(
            dt_h[n]
            - grid.lap_op @ h[n]
            - 2.0 * sum(G @ flux[:, k] for k, G in enumerate(grid.grad_ops))
            - _div_flux(grid, h[n], q)
        )
    v["u_trace_pde"] = float(np.abs(np.array(ru)[:, B]).max())
    v["m_trace_pde"] = float(np.abs(np.array(rm)[:, B]).max())
    if tol_pde is None:
        tol_pde = 10.0 * max(max(grid.h) ** 2, grid.dt) * max(1.0, np.abs(g).max(), np.abs(h).max())
    tols = {"g_terminal": tol_algebraic, "h_initial": tol_algebraic, "u_trace_pde": tol_pde, "m_trace_pde": tol_pde}
    return CompatibilityReport(v, tols)
