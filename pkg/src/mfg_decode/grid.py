"""Structured node-centred grids on boxes and the finite-difference operators on them.

Fields are plain numpy arrays. A spatial field has shape ``grid.shape``; a
space-time field has shape ``(grid.n_time + 1, *grid.shape)`` with time level
as the slowest axis; vector fields carry their components on a trailing axis
of length ``grid.dim``. Complex-valued fields use a complex dtype.

Stencils: second-order central differences in the interior, second-order
one-sided differences on boundary nodes. The divergence uses the same
stencils as the gradient, so that for the trapezoidal inner product

    <grad f, v> + <f, div v> = boundary_flux(f, v)

holds exactly, with ``boundary_flux`` a bilinear form supported on the two
node layers next to each face.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "MetricField",
    "BoundaryData",
    "gradient",
    "divergence",
    "laplacian",
    "trace",
    "normal_derivative",
    "quadratic_form",
    "boundary_flux",
    "inner",
    "integrate",
]


def _diff1(n: int, h: float) -> sp.csr_matrix:
    d = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        d[i, i - 1] = -0.5 / h
        d[i, i + 1] = 0.5 / h
    d[0, 0:3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    d[n - 1, n - 3 : n] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return d.tocsr()


def _diff2(n: int, h: float) -> sp.csr_matrix:
    d = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        d[i, i - 1 : i + 2] = np.array([1.0, -2.0, 1.0]) / h**2
    if n >= 4:
        d[0, 0:4] = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
        d[n - 1, n - 4 : n] = np.array([-1.0, 4.0, -5.0, 2.0]) / h**2
    else:
        d[0, 0:3] = np.array([1.0, -2.0, 1.0]) / h**2
        d[n - 1, n - 3 : n] = np.array([1.0, -2.0, 1.0]) / h**2
    return d.tocsr()


def _flux1(n: int) -> sp.csr_matrix:
    # closure of H D + D^T H for the stencils above; dimensionless
    b = sp.lil_matrix((n, n))
    b[0, 0] += -1.5
    b[0, 1] += 0.5
    b[1, 0] += 0.5
    b[0, 2] += -0.25
    b[2, 0] += -0.25
    b[n - 1, n - 1] += 1.5
    b[n - 1, n - 2] += -0.5
    b[n - 2, n - 1] += -0.5
    b[n - 1, n - 3] += 0.25
    b[n - 3, n - 1] += 0.25
    return b.tocsr()


def _trapezoid1(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


def _kron_axis(mats: list[sp.spmatrix], axis: int, op: sp.spmatrix) -> sp.csr_matrix:
    """Tensor ``op`` along ``axis`` with the given per-axis factors elsewhere."""
    out = None
    for a, m in enumerate(mats):
        factor = op if a == axis else m
        out = factor if out is None else sp.kron(out, factor)
    return sp.csr_matrix(out)


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform node lattice on a box ``prod(extent)`` times the interval ``[0, T]``.

    ``n_cells`` counts nodes per axis (endpoints included).
    """

    extent: tuple[tuple[float, float], ...]
    n_cells: tuple[int, ...]
    T: float = 1.0
    n_time: int = 64

    def __post_init__(self):
        extent = tuple((float(lo), float(hi)) for lo, hi in self.extent)
        n_cells = tuple(int(n) for n in self.n_cells)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "n_cells", n_cells)
        if len(extent) not in (1, 2) or len(n_cells) != len(extent):
            raise ValueError("grid must be 1D or 2D with one node count per axis")
        if any(n < 3 for n in n_cells):
            raise ValueError("need at least 3 nodes per axis")
        if any(hi <= lo for lo, hi in extent):
            raise ValueError("empty extent")
        if self.n_time < 2 or not self.T > 0:
            raise ValueError("need n_time >= 2 and T > 0")

    @classmethod
    def unit(cls, n_cells: int, dim: int = 1, T: float = 1.0, n_time: int = 64) -> Grid:
        return cls(((0.0, 1.0),) * dim, (n_cells,) * dim, T, n_time)

    # -- geometry ----------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.n_cells)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_cells

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.n_cells))

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for (lo, hi), n in zip(self.extent, self.n_cells))

    @property
    def dt(self) -> float:
        return self.T / self.n_time

    @property
    def st_shape(self) -> tuple[int, ...]:
        return (self.n_time + 1, *self.shape)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(self.extent, self.n_cells))

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_time + 1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dim)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def diameter(self) -> float:
        return float(np.hypot.reduce([hi - lo for lo, hi in self.extent]))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for a in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[a] = 0
            mask[tuple(idx)] = True
            idx[a] = -1
            mask[tuple(idx)] = True
        return mask

    @cached_property
    def boundary_index(self) -> np.ndarray:
        """Flat (row-major) indices of boundary nodes, ascending."""
        return np.flatnonzero(self.boundary_mask.ravel())

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask.ravel())

    @cached_property
    def normals(self) -> np.ndarray:
        """Outward unit normals at boundary nodes, shape ``(n_boundary, dim)``.

        Corner nodes get the normalised sum of the adjacent face normals.
        """
        nu = np.zeros((*self.shape, self.dim))
        for a in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[a] = 0
            nu[(*idx, a)] -= 1.0
            idx[a] = -1
            nu[(*idx, a)] += 1.0
        nu = nu.reshape(-1, self.dim)[self.boundary_index]
        return nu / np.linalg.norm(nu, axis=1, keepdims=True)

    # -- quadrature --------------------------------------------------------

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal weights over the box, shape ``shape``."""
        w = np.ones(())
        for n, h in zip(self.n_cells, self.h):
            w = np.multiply.outer(w, _trapezoid1(n, h))
        return w

    @cached_property
    def time_weights(self) -> np.ndarray:
        return _trapezoid1(self.n_time + 1, self.dt)

    # -- sparse operators on flattened nodes --------------------------------

    @cached_property
    def _eyes(self) -> list[sp.spmatrix]:
        return [sp.identity(n, format="csr") for n in self.n_cells]

    @cached_property
    def grad_ops(self) -> tuple[sp.csr_matrix, ...]:
        return tuple(
            _kron_axis(self._eyes, a, _diff1(n, h))
            for a, (n, h) in enumerate(zip(self.n_cells, self.h))
        )

    @cached_property
    def lap_op(self) -> sp.csr_matrix:
        out = sp.csr_matrix((self.n_nodes, self.n_nodes))
        for a, (n, h) in enumerate(zip(self.n_cells, self.h)):
            out = out + _kron_axis(self._eyes, a, _diff2(n, h))
        return out.tocsr()

    @cached_property
    def second_ops(self) -> tuple[sp.csr_matrix, ...]:
        """Per-axis second derivatives; their sum is ``lap_op``."""
        return tuple(
            _kron_axis(self._eyes, a, _diff2(n, h))
            for a, (n, h) in enumerate(zip(self.n_cells, self.h))
        )

    @cached_property
    def flux_ops(self) -> tuple[sp.csr_matrix, ...]:
        ws = [sp.diags(_trapezoid1(n, h)) for n, h in zip(self.n_cells, self.h)]
        return tuple(_kron_axis(ws, a, _flux1(n)) for a, n in enumerate(self.n_cells))

    def __repr__(self) -> str:
        return f"Grid(extent={self.extent}, n_cells={self.n_cells}, T={self.T}, n_time={self.n_time})"

    def metadata(self) -> dict:
        return {
            "dim": self.dim,
            "extent": [list(e) for e in self.extent],
            "n_cells": list(self.n_cells),
            "T": self.T,
            "n_time": self.n_time,
        }

    def same_as(self, other: Grid) -> bool:
        return self.metadata() == other.metadata()


# -- field helpers ----------------------------------------------------------


def _flat(grid: Grid, f: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    """Split off the spatial axes of ``f`` (which must trail) as one flat axis."""
    f = np.asarray(f)
    nd = grid.dim
    if f.shape[f.ndim - nd :] != grid.shape:
        raise ValueError(f"field shape {f.shape} does not end with grid shape {grid.shape}")
    lead = f.shape[: f.ndim - nd]
    return f.reshape(*lead, grid.n_nodes), lead


def _apply(op: sp.spmatrix, flat: np.ndarray) -> np.ndarray:
    if flat.ndim == 1:
        return op @ flat
    lead = flat.shape[:-1]
    return (op @ flat.reshape(-1, flat.shape[-1]).T).T.reshape(*lead, op.shape[0])


def gradient(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Gradient of a scalar (or batch of scalar) fields; components on a new last axis."""
    flat, lead = _flat(grid, f)
    comps = [_apply(G, flat).reshape(*lead, *grid.shape) for G in grid.grad_ops]
    return np.stack(comps, axis=-1)


def divergence(grid: Grid, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1] != grid.dim:
        raise ValueError("vector field must carry dim components on the last axis")
    out = 0
    for a, G in enumerate(grid.grad_ops):
        flat, lead = _flat(grid, v[..., a])
        out = out + _apply(G, flat).reshape(*lead, *grid.shape)
    return out


def laplacian(grid: Grid, f: np.ndarray) -> np.ndarray:
    flat, lead = _flat(grid, f)
    return _apply(grid.lap_op, flat).reshape(*lead, *grid.shape)


def trace(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Restriction to boundary nodes; the spatial axes collapse to one boundary axis."""
    flat, _ = _flat(grid, f)
    return flat[..., grid.boundary_index]


def gradient_trace(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Full gradient at boundary nodes, shape ``(..., n_boundary, dim)``."""
    g = gradient(grid, f)
    flat = g.reshape(*g.shape[: g.ndim - grid.dim - 1], grid.n_nodes, grid.dim)
    return flat[..., grid.boundary_index, :]


def normal_derivative(grid: Grid, f: np.ndarray) -> np.ndarray:
    return np.einsum("...bi,bi->...b", gradient_trace(grid, f), grid.normals)


def quadratic_form(A: np.ndarray, p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Pointwise ``p^T A r``; ``A`` has shape ``(..., dim, dim)`` and broadcasts."""
    return np.einsum("...i,...ij,...j->...", p, A, r)


def apply_metric(A: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A, p)


def inner(grid: Grid, f: np.ndarray, g: np.ndarray) -> float:
    """Trapezoidal L2 product of spatial fields; vector fields are contracted too."""
    prod = f * g
    if prod.ndim == grid.dim + 1:
        prod = prod.sum(axis=-1)
    return float(np.sum(grid.weights * prod))


def integrate(grid: Grid, f: np.ndarray) -> complex | float:
    """Space-time trapezoidal integral over ``Q``."""
    f = np.asarray(f)
    if f.shape != grid.st_shape:
        raise ValueError(f"expected space-time field of shape {grid.st_shape}")
    val = np.tensordot(grid.time_weights, f, axes=(0, 0))
    return np.sum(grid.weights * val)[()]


def boundary_flux(grid: Grid, f: np.ndarray, v: np.ndarray) -> float:
    """Discrete counterpart of the boundary integral of ``f v . nu``."""
    ff = np.asarray(f).ravel()
    total = 0.0
    for a, B in enumerate(grid.flux_ops):
        total += float(ff @ (B @ np.asarray(v)[..., a].ravel()))
    return total


@dataclass(frozen=True, eq=False)
class MetricField:
    """``A(x) = kappa(x) g(x)`` with known base metric ``g`` and conformal factor ``kappa``."""

    grid: Grid
    g: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        d = self.grid.dim
        g = np.broadcast_to(np.asarray(self.g, dtype=float), (*self.grid.shape, d, d)).copy()
        kappa = np.broadcast_to(np.asarray(self.kappa, dtype=float), self.grid.shape).copy()
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "kappa", kappa)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(kappa))):
            raise ValueError("metric must be finite")
        if not np.allclose(g, np.swapaxes(g, -1, -2)):
            raise ValueError("base metric must be symmetric")
        if np.min(np.linalg.eigvalsh(g)) <= 0:
            raise ValueError("base metric must be positive definite")
        if np.min(kappa) <= 0:
            raise ValueError("conformal factor must be positive")

    @classmethod
    def euclidean(cls, grid: Grid, kappa=1.0) -> MetricField:
        return cls(grid, np.eye(grid.dim), kappa)

    @cached_property
    def A(self) -> np.ndarray:
        return self.kappa[..., None, None] * self.g

    def hamiltonian(self, p: np.ndarray) -> np.ndarray:
        return quadratic_form(self.A, p, p)


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Values on boundary nodes, optionally per time level and per component.

    ``values`` has shape ``(n_time + 1, n_boundary[, dim])`` or, for
    time-independent records, ``(n_boundary[, dim])``.
    """

    grid: Grid
    values: np.ndarray
    kind: str = "trace"
    meta: dict = field(default_factory=dict)

    KINDS = ("trace", "normal-derivative", "gradient")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown boundary data kind {self.kind!r}")
        vals = np.asarray(self.values)
        nb = len(self.grid.boundary_index)
        if nb not in vals.shape[:2]:
            raise ValueError("boundary data must have one value per boundary node")
        if not np.all(np.isfinite(vals)):
            raise ValueError("boundary data must be finite")
        object.__setattr__(self, "values", vals)

    def __sub__(self, other: BoundaryData) -> BoundaryData:
        return BoundaryData(self.grid, self.values - other.values, self.kind)
