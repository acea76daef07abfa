"""High-order linearization of the discrete MFG system around a stationary state.

Perturbing the boundary data by ``sum_l eps_l (g_l, h_l)`` and differentiating
once in each of ``eps_1..eps_N`` at ``eps = 0`` gives a cascade of linear
parabolic systems. Every order shares the same pair of operators

    u:  -d_t u - Lap u + q . grad u           (backward, q = 2 A grad u0)
    m:   d_t m - Lap m - div(q m) - 2 div(m0 A grad u)   (forward)

and differs only in its sources, which are built from strictly lower orders.
Solutions are keyed by sorted tuples of perturbation labels, e.g. ``(1, 2)``.
Repeating a label's data under two labels yields derivatives along a single
direction.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .errors import MissingLowerOrder
from .forward import (
    MFGProblem,
    PerturbationSpec,
    RunningCost,
    SolverSettings,
    StationaryState,
    solve_mfg,
)
from .grid import Grid, MetricField, trace
from .parabolic import ImplicitEuler

MAX_ORDER = 5


@dataclass(frozen=True, eq=False)
class LinearizedSolution:
    order: tuple[int, ...]
    u: np.ndarray
    m: np.ndarray

    def __mul__(self, a: float) -> LinearizedSolution:
        return LinearizedSolution(self.order, a * self.u, a * self.m)

    __rmul__ = __mul__


@dataclass(eq=False)
class LinearizedOperator:
    """Factored linear operators of the cascade for one ``(grid, state, metric)``.

    ``drift`` overrides ``q = 2 A grad u0``; the inverse pipeline uses this to
    evaluate candidate drifts.
    """

    grid: Grid
    state: StationaryState
    metric: MetricField
    drift: np.ndarray | None = None
    _steppers: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        g = self.grid
        if self.drift is None:
            self.drift = self.state.drift(g, self.metric)
        q = np.asarray(self.drift).reshape(g.n_nodes, g.dim)
        Ku = -g.lap_op + sum(sp.diags(q[:, k]) @ G for k, G in enumerate(g.grad_ops))
        Km = -g.lap_op - sum(G @ sp.diags(q[:, k]) for k, G in enumerate(g.grad_ops))
        self._steppers = (ImplicitEuler(g, Ku), ImplicitEuler(g, Km))
        self._A = self.metric.A.reshape(g.n_nodes, g.dim, g.dim)
        self._m0 = self.state.m0.ravel()

    @property
    def q(self) -> np.ndarray:
        return np.asarray(self.drift)

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Gradient of arrays ``(levels, N, *extra)`` -> ``(levels, N, *extra, dim)``."""
        return np.stack([_apply_nodes(G, f) for G in self.grid.grad_ops], axis=-1)

    def div(self, v: np.ndarray) -> np.ndarray:
        return sum(_apply_nodes(G, v[..., k]) for k, G in enumerate(self.grid.grad_ops))

    def flux(self, m, u) -> np.ndarray:
        """``m A grad u``."""
        return m[..., None] * np.einsum("nij,ln...j->ln...i", self._A, self.grad(u))

    def cross(self, u1, u2) -> np.ndarray:
        return np.einsum("ln...i,nij,ln...j->ln...", self.grad(u1), self._A, self.grad(u2))

    def solve_u(self, boundary, source=None) -> np.ndarray:
        g = self.grid
        bshape = np.shape(boundary)
        extra = bshape[2:] if len(bshape) > 2 else ()
        zero = np.zeros((g.n_nodes, *extra))
        return self._steppers[0].backward(zero, boundary, source)

    def coupling(self, u) -> np.ndarray:
        """Source ``2 div(m0 A grad u)`` of the density equation (flat)."""
        m0 = self._m0.reshape(1, -1, *([1] * (u.ndim - 2)))
        return 2.0 * self.div(self.flux(np.broadcast_to(m0, u.shape), u))

    def solve_m(self, boundary, u, source=None) -> np.ndarray:
        g = self.grid
        src = self.coupling(u)
        if source is not None:
            src = src + source
        zero = np.zeros((g.n_nodes, *np.shape(boundary)[2:]))
        return self._steppers[1].forward(zero, boundary, src)

    def solve(self, gb, hb, src_u=None, src_m=None) -> tuple[np.ndarray, np.ndarray]:
        u = self.solve_u(gb, src_u)
        m = self.solve_m(hb, u, src_m)
        return u, m


def _apply_nodes(G: sp.spmatrix, f: np.ndarray) -> np.ndarray:
    """Apply a node operator along axis 1 of ``(levels, N, *extra)``."""
    f = np.asarray(f)
    moved = np.moveaxis(f, 1, 0)
    out = G @ moved.reshape(f.shape[1], -1)
    return np.moveaxis(out.reshape(moved.shape), 0, 1)


def _flat(grid: Grid, f: np.ndarray) -> np.ndarray:
    return np.asarray(f).reshape(grid.n_time + 1, grid.n_nodes)


def _shape(grid: Grid, f: np.ndarray) -> np.ndarray:
    return f.reshape(grid.st_shape)


def _boundary(grid: Grid, data) -> np.ndarray:
    """Accept boundary records or full space-time extensions."""
    data = np.asarray(data, dtype=float)
    if data.shape == grid.st_shape:
        return trace(grid, data)
    return data


def _operator(grid, state, metric, op):
    return op if op is not None else LinearizedOperator(grid, state, metric)


def solve_first_order(
    grid: Grid,
    state: StationaryState,
    metric: MetricField,
    g,
    h,
    label: int = 1,
    op: LinearizedOperator | None = None,
) -> LinearizedSolution:
    """First-order system with boundary data ``(g, h)``; zero terminal/initial data."""
    op = _operator(grid, state, metric, op)
    u, m = op.solve(_boundary(grid, g), _boundary(grid, h))
    return LinearizedSolution((label,), _shape(grid, u), _shape(grid, m))


def solve_second_order(
    grid: Grid,
    state: StationaryState,
    metric: MetricField,
    F2: np.ndarray,
    first1: LinearizedSolution,
    first2: LinearizedSolution,
    op: LinearizedOperator | None = None,
) -> LinearizedSolution:
    """Mixed second derivative from two first-order solutions; homogeneous boundary data."""
    op = _operator(grid, state, metric, op)
    u1, m1 = _flat(grid, first1.u), _flat(grid, first1.m)
    u2, m2 = _flat(grid, first2.u), _flat(grid, first2.m)
    F2 = np.asarray(F2, dtype=float).ravel()
    src_u = F2 * (m1 * m2)
    src_u = src_u - op.cross(u1, u2) - op.cross(u2, u1)
    src_m = 2.0 * op.div(op.flux(m1, u2)) + 2.0 * op.div(op.flux(m2, u1))
    zero = np.zeros((grid.n_time + 1, len(grid.boundary_index)))
    u, m = op.solve(zero, zero, src_u, src_m)
    order = tuple(sorted(first1.order + first2.order))
    return LinearizedSolution(order, _shape(grid, u), _shape(grid, m))


def set_partitions(items: tuple) -> Iterator[list[tuple]]:
    """All partitions of ``items`` into nonempty blocks (blocks keep item order)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [(first,), *part]
        for i in range(len(part)):
            yield [*part[:i], (first, *part[i]), *part[i + 1 :]]


def proper_splits(S: tuple) -> Iterator[tuple[tuple, tuple]]:
    """Ordered pairs ``(B, S - B)`` with ``B`` a nonempty proper subset of ``S``."""
    for r in range(1, len(S)):
        for B in combinations(S, r):
            C = tuple(x for x in S if x not in B)
            yield B, C


def assemble_sources(
    grid: Grid,
    cost: RunningCost,
    lower: Mapping[tuple, LinearizedSolution],
    S: tuple,
    op: LinearizedOperator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sources of the order-``S`` system (flat space-time arrays)."""
    S = tuple(sorted(S))
    for r in range(1, len(S)):
        for B in combinations(S, r):
            if B not in lower:
                raise MissingLowerOrder(f"order {S} needs the solution for {B}")
    u = {k: _flat(grid, v.u) for k, v in lower.items()}
    m = {k: _flat(grid, v.m) for k, v in lower.items()}
    src_u = np.zeros((grid.n_time + 1, grid.n_nodes))
    for part in set_partitions(S):
        k = len(part)
        if k < 2 or k not in cost.coefficients:
            continue
        prod = cost.coefficients[k].ravel()
        for block in part:
            prod = prod * m[block]
        src_u = src_u + prod
    src_m = np.zeros_like(src_u)
    for B, C in proper_splits(S):
        src_u = src_u - op.cross(u[B], u[C])
        src_m = src_m + 2.0 * op.div(op.flux(m[B], u[C]))
    return src_u, src_m


def solve_order_N(
    grid: Grid,
    state: StationaryState,
    metric: MetricField,
    cost: RunningCost,
    lower: Mapping[tuple, LinearizedSolution],
    N: int,
    boundary: Mapping[int, tuple] | None = None,
    labels: tuple | None = None,
    op: LinearizedOperator | None = None,
) -> LinearizedSolution:
    """Solve the order-``N`` system for labels ``1..N`` (or ``labels``)."""
    if not 1 <= N <= MAX_ORDER:
        raise ValueError(f"order must be between 1 and {MAX_ORDER}")
    S = tuple(sorted(labels)) if labels is not None else tuple(range(1, N + 1))
    if len(S) != N:
        raise ValueError("labels must have length N")
    op = _operator(grid, state, metric, op)
    if N == 1:
        if boundary is None or S[0] not in boundary:
            raise MissingLowerOrder("first order needs boundary data for its label")
        g, h = boundary[S[0]]
        return solve_first_order(grid, state, metric, g, h, S[0], op)
    src_u, src_m = assemble_sources(grid, cost, lower, S, op)
    zero = np.zeros((grid.n_time + 1, len(grid.boundary_index)))
    u, m = op.solve(zero, zero, src_u, src_m)
    return LinearizedSolution(S, _shape(grid, u), _shape(grid, m))


def directional_derivatives(
    grid: Grid,
    state: StationaryState,
    metric: MetricField,
    cost: RunningCost,
    g,
    h,
    N: int,
    op: LinearizedOperator | None = None,
) -> list[LinearizedSolution]:
    """``d^n/d eps^n`` of the solution along one perturbation, ``n = 1..N``."""
    op = _operator(grid, state, metric, op)
    out = [solve_first_order(grid, state, metric, g, h, 1, op)]
    for n in range(2, N + 1):
        lower = {}
        for r in range(1, n):
            for B in combinations(range(1, n + 1), r):
                lower[B] = LinearizedSolution(B, out[r - 1].u, out[r - 1].m)
        out.append(solve_order_N(grid, state, metric, cost, lower, n, op=op))
    return out


@dataclass(frozen=True)
class FrechetReport:
    eps: tuple[float, ...]
    remainders: dict[int, tuple[float, ...]]
    slopes: dict[int, float]
    tolerance: float = 0.2

    @property
    def passed(self) -> bool:
        return all(
            all(r == 0.0 for r in self.remainders[n]) or self.slopes[n] >= n + 1 - self.tolerance
            for n in self.slopes
        )


def frechet_report(
    problem: MFGProblem,
    direction: PerturbationSpec,
    eps_ladder=(1e-2, 5e-3, 2.5e-3),
    orders=(1, 2),
    settings: SolverSettings | None = None,
) -> FrechetReport:
    """Taylor remainders of ``eps -> S(eps * direction)`` and their log-log slopes."""
    grid, state, metric, cost = problem.grid, problem.state, problem.metric, problem.cost
    settings = settings or SolverSettings(tol_fp=1e-13)
    derivs = directional_derivatives(grid, state, metric, cost, direction.g, direction.h, max(orders))
    u0 = np.broadcast_to(state.u0, grid.st_shape)
    m0 = np.broadcast_to(state.m0, grid.st_shape)
    rem = {n: [] for n in orders}
    for eps in eps_ladder:
        sol = solve_mfg(problem.with_perturbations([direction.scaled(eps)]), settings)
        du, dm = sol.u - u0, sol.m - m0
        for n in range(1, max(orders) + 1):
            c = eps**n / math.factorial(n)
            du = du - c * derivs[n - 1].u
            dm = dm - c * derivs[n - 1].m
            if n in rem:
                rem[n].append(float(max(np.abs(du).max(), np.abs(dm).max())))
    slopes = {}
    for n, r in rem.items():
        r = np.asarray(r)
        if np.all(r > 0):
            slopes[n] = float(np.polyfit(np.log(eps_ladder), np.log(r), 1)[0])
        else:
            slopes[n] = float("nan")
    return FrechetReport(tuple(eps_ladder), {n: tuple(v) for n, v in rem.items()}, slopes)
