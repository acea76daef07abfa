"""Implicit-Euler stepping for linear parabolic equations with Dirichlet boundary data.

The spatial operator ``K`` is a sparse matrix on the flattened node lattice;
only its interior rows are used. Forward problems read

    (y^{n+1} - gamma * y^n) / dt + K y^{n+1} = s^{n+1},

backward problems

    (y^n - gamma * y^{n+1}) / dt + K y^n = s^n,

with boundary values of every level prescribed. ``gamma`` is 1 except for
exponentially conjugated probe equations.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .errors import SingularSystem
from .grid import Grid


def interior_block(grid: Grid, K: sp.spmatrix) -> tuple[sp.csc_matrix, sp.csr_matrix]:
    K = sp.csr_matrix(K)
    rows = K[grid.interior_index]
    return rows[:, grid.interior_index].tocsc(), rows[:, grid.boundary_index].tocsr()


class _Banded:
    """Tridiagonal factor stand-in; 1D interior systems are always tridiagonal."""

    def __init__(self, A: sp.spmatrix):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        self.ab = np.zeros((3, n))
        self.ab[0, 1:] = A.diagonal(1)
        self.ab[1] = A.diagonal()
        self.ab[2, :-1] = A.diagonal(-1)

    def solve(self, rhs):
        return solve_banded((1, 1), self.ab, rhs, check_finite=False)


def _is_tridiagonal(A: sp.spmatrix) -> bool:
    A = sp.coo_matrix(A)
    return A.nnz == 0 or int(np.abs(A.row - A.col).max()) <= 1


def factorize(A: sp.spmatrix):
    """Factor a sparse square matrix; tridiagonal matrices use a banded solver."""
    try:
        if _is_tridiagonal(A):
            return _Banded(A)
        return splu(sp.csc_matrix(A))
    except (RuntimeError, np.linalg.LinAlgError) as exc:  # singular factor
        raise SingularSystem(str(exc)) from exc


def lu_solve(lu, rhs: np.ndarray) -> np.ndarray:
    try:
        if np.iscomplexobj(rhs):
            out = lu.solve(np.ascontiguousarray(rhs.real)) + 1j * lu.solve(np.ascontiguousarray(rhs.imag))
        else:
            out = lu.solve(np.ascontiguousarray(rhs))
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise SingularSystem("linear solve produced non-finite values")
    return out


class _BandedData(_Banded):
    def __init__(self, ab):
        self.ab = ab


class Assembler:
    """Fast repeated assembly of ``sum_i w_i diag(r_i) M_i diag(c_i)`` on a fixed pattern."""

    def __init__(self, mats):
        coos = [sp.coo_matrix(m) for m in mats]
        self.shape = coos[0].shape
        ncol = self.shape[1]
        keys = [c.row.astype(np.int64) * ncol + c.col for c in coos]
        union = np.unique(np.concatenate(keys))
        self.rows = union // ncol
        self.cols = union % ncol
        self.pos = [np.searchsorted(union, k) for k in keys]
        self.parts = [(c.data, c.row, c.col) for c in coos]
        self.tridiagonal = bool(np.all(np.abs(self.rows - self.cols) <= 1))
        self.nnz = len(union)

    def data(self, terms) -> np.ndarray:
        """``terms``: iterable of ``(index, weight, row_scale or None, col_scale or None)``."""
        out = np.zeros(self.nnz)
        for i, w, rs, cs in terms:
            d, r, c = self.parts[i]
            d = w * d
            if rs is not None:
                d = d * rs[r]
            if cs is not None:
                d = d * cs[c]
            out += np.bincount(self.pos[i], d, minlength=self.nnz)
        return out

    def matrix(self, terms) -> sp.csr_matrix:
        return sp.csr_matrix((self.data(terms), (self.rows, self.cols)), shape=self.shape)

    def factor(self, terms):
        data = self.data(terms)
        try:
            if self.tridiagonal:
                ab = np.zeros((3, self.shape[0]))
                ab[1 + self.rows - self.cols, self.cols] = data
                return _BandedData(ab)
            return splu(sp.csc_matrix((data, (self.rows, self.cols)), shape=self.shape))
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc


class RestrictedOps:
    """Interior/boundary blocks of the grid operators, computed once per grid."""

    def __init__(self, grid: Grid):
        I, B = grid.interior_index, grid.boundary_index
        self.lap_I = grid.lap_op[I].tocsr()
        self.lap_II = self.lap_I[:, I].tocsr()
        self.lap_IB = self.lap_I[:, B].tocsr()
        self.G_I = tuple(G[I].tocsr() for G in grid.grad_ops)
        self.G_II = tuple(G[:, I].tocsr() for G in self.G_I)
        self.G_IB = tuple(G[:, B].tocsr() for G in self.G_I)
        self.eye = sp.identity(len(I), format="csr")
        # pattern indices: 0 eye, 1 lap, 2.. gradient components
        self.assembler = Assembler([self.eye, self.lap_II, *self.G_II])


@lru_cache(maxsize=32)
def _restricted(grid: Grid) -> RestrictedOps:
    return RestrictedOps(grid)


def restricted(grid: Grid) -> RestrictedOps:
    return _restricted(grid)


class ImplicitEuler:
    """Pre-factorised stepper for a time-independent operator ``K``."""

    def __init__(self, grid: Grid, K: sp.spmatrix, gamma: float = 1.0):
        self.grid = grid
        self.gamma = gamma
        self.K = sp.csr_matrix(K)
        K_II, self.K_IB = interior_block(grid, K)
        n = K_II.shape[0]
        self.lu = factorize(sp.identity(n, format="csc") / grid.dt + K_II)

    def _step(self, prev_int, bdry, src_int):
        rhs = self.gamma * prev_int / self.grid.dt - self.K_IB @ bdry
        if src_int is not None:
            rhs = rhs + src_int
        return lu_solve(self.lu, rhs)

    def _run(self, order, start, boundary, source):
        g = self.grid
        I, B = g.interior_index, g.boundary_index
        start = np.asarray(start)
        extra = start.shape[1:]
        dtype = np.result_type(start, boundary, source if source is not None else 0.0)
        y = np.zeros((g.n_time + 1, g.n_nodes, *extra), dtype=dtype)
        y[order[0]] = start
        y[:, B] = boundary
        prev = order[0]
        for n in order[1:]:
            src = None if source is None else source[n][I]
            y[n, I] = self._step(y[prev, I], y[n, B], src)
            prev = n
        return y

    def forward(self, y0, boundary, source=None) -> np.ndarray:
        """Levels ``1..n_time`` from ``y0``; arrays are flat ``(levels, n_nodes, ...)``."""
        return self._run(range(self.grid.n_time + 1), y0, boundary, source)

    def backward(self, yT, boundary, source=None) -> np.ndarray:
        return self._run(range(self.grid.n_time, -1, -1), yT, boundary, source)
