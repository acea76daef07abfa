"""Complex geometric optics (CGO) probes for convection-diffusion parabolic equations.

Probes have the form ``w = e^{psi} (lead_+ + z_+)`` (forward equation) and
``v = e^{-psi} (lead_- + z_-)`` (backward equation) with
``psi = sigma_h t + rho zeta . x``, where ``sigma_h`` is the symbol of the
discrete Laplacian on ``e^{rho zeta . x}`` (``rho^2 + O(rho^4 h^2)``), so the
``rho^2`` terms cancel exactly in the weighted equation. The exponential
weight is never formed: the discrete operator is conjugated by
``e^{rho zeta . x}`` entrywise and the solver works with ``W = e^{-psi} w``. Remainders satisfy zero boundary and zero
initial (forward) / terminal (backward) data because the boundary data of
the probe is its leading term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .errors import OverflowRisk, ZeroDirection
from .grid import Grid, integrate, trace
from .parabolic import ImplicitEuler

EXPONENT_CAP = 650.0


def bump(t: np.ndarray, center: float, width: float) -> np.ndarray:
    """Smooth bump ``exp(1 - 1/(1 - s^2))``, ``s = (t - center)/width``, zero for ``|s| >= 1``."""
    s = (np.asarray(t, dtype=float) - center) / width
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True)
class CGOParams:
    rho: float
    zeta: tuple[float, ...]
    xi: tuple[float, ...] | None = None
    tau: float = 0.0
    chi_center: float | None = None
    chi_width: float | None = None
    ray_direction: Literal["zeta", "xi"] | tuple[float, ...] = "zeta"

    def __post_init__(self):
        zeta = np.asarray(self.zeta, dtype=float)
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not np.isclose(np.linalg.norm(zeta), 1.0, atol=1e-12):
            raise ValueError("zeta must be a unit vector")
        xi = np.zeros_like(zeta) if self.xi is None else np.asarray(self.xi, dtype=float)
        if xi.shape != zeta.shape:
            raise ValueError("xi and zeta must have the same dimension")
        if abs(float(zeta @ xi)) > 1e-12 * max(1.0, np.linalg.norm(xi)):
            raise ValueError("xi must be orthogonal to zeta")
        object.__setattr__(self, "zeta", tuple(zeta))
        object.__setattr__(self, "xi", tuple(xi))

    def chi(self, grid: Grid, t=None) -> np.ndarray:
        t = grid.times if t is None else t
        c = 0.5 * grid.T if self.chi_center is None else self.chi_center
        w = 0.3 * grid.T if self.chi_width is None else self.chi_width
        if c - w <= 0 or c + w >= grid.T:
            raise ValueError("temporal cutoff must be supported inside (0, T)")
        return bump(t, c, w)

    def ray(self) -> np.ndarray:
        if isinstance(self.ray_direction, str):
            d = self.zeta if self.ray_direction == "zeta" else self.xi
        else:
            d = self.ray_direction
        return np.asarray(d, dtype=float)

    def with_rho(self, rho: float) -> CGOParams:
        return CGOParams(rho, self.zeta, self.xi, self.tau, self.chi_center, self.chi_width, self.ray_direction)


@dataclass(frozen=True, eq=False)
class CGOResult:
    """Probe in weighted form: the full probe is ``exp(sign * psi) * (leading + remainder)``."""

    params: CGOParams
    sign: int
    leading: np.ndarray
    remainder: np.ndarray
    remainder_norm: float
    psi: np.ndarray

    @property
    def weighted(self) -> np.ndarray:
        return self.leading + self.remainder

    def full(self) -> np.ndarray:
        if np.abs(self.psi).max() > EXPONENT_CAP:
            raise OverflowRisk("probe exponent exceeds the safety cap")
        return np.exp(self.sign * self.psi) * self.weighted


def ray_integral(grid: Grid, phi: np.ndarray, x, direction, zeta=None) -> float:
    """``int_0^inf zeta . phi(x + s d) ds`` with ``phi`` extended by zero outside the box.

    Composite trapezoid with step at most ``min(h)/2`` up to the exit point.
    """
    d = np.asarray(direction, dtype=float)
    nd = np.linalg.norm(d)
    if nd == 0:
        raise ZeroDirection("ray direction must be nonzero")
    zeta = d / nd if zeta is None else np.asarray(zeta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    proj = np.einsum("...i,i->...", np.asarray(phi, dtype=float), zeta)
    interp = RegularGridInterpolator(grid.axes, proj, bounds_error=False, fill_value=0.0)
    return float(_ray_integrals(grid, interp, x[None, :], d)[0])


def _exit_lengths(grid: Grid, x: np.ndarray, d: np.ndarray) -> np.ndarray:
    s = np.full(len(x), np.inf)
    for a, (lo, hi) in enumerate(grid.extent):
        if d[a] > 0:
            s = np.minimum(s, (hi - x[:, a]) / d[a])
        elif d[a] < 0:
            s = np.minimum(s, (lo - x[:, a]) / d[a])
    return np.maximum(s, 0.0)


def _ray_integrals(grid: Grid, interp, pts: np.ndarray, d: np.ndarray) -> np.ndarray:
    lengths = _exit_lengths(grid, pts, d)
    step = min(grid.h) / 2
    n = int(np.ceil(lengths.max() / step)) if lengths.max() > 0 else 0
    out = np.zeros(len(pts))
    if n == 0:
        return out
    frac = np.linspace(0.0, 1.0, n + 1)
    # each ray is sampled on its own [0, length] with n uniform panels
    s = lengths[:, None] * frac[None, :]
    samples = pts[:, None, :] + s[..., None] * d
    # clip round-off excursions at the exit point back onto the box
    lo = np.array([e[0] for e in grid.extent])
    hi = np.array([e[1] for e in grid.extent])
    samples = np.clip(samples, lo, hi)
    vals = interp(samples.reshape(-1, grid.dim)).reshape(len(pts), n + 1)
    w = np.full(n + 1, 1.0)
    w[0] = w[-1] = 0.5
    return (vals @ w) * lengths / n


def amplitude_exponent(grid: Grid, phi: np.ndarray | None, params: CGOParams) -> np.ndarray:
    """``1/2 int_0^inf zeta . phi(x + s d) ds`` at every node."""
    if phi is None:
        return np.zeros(grid.shape)
    zeta = np.asarray(params.zeta)
    d = params.ray()
    if np.linalg.norm(d) == 0:
        raise ZeroDirection("ray direction must be nonzero")
    proj = np.einsum("...i,i->...", np.asarray(phi, dtype=float), zeta)
    interp = RegularGridInterpolator(grid.axes, proj, bounds_error=False, fill_value=0.0)
    pts = grid.coords.reshape(-1, grid.dim)
    return 0.5 * _ray_integrals(grid, interp, pts, d).reshape(grid.shape)


def _spatial_operator(grid: Grid, phi, q_pot, advect_sign: float) -> sp.csr_matrix:
    K = -grid.lap_op
    if phi is not None:
        phi = np.asarray(phi, dtype=float).reshape(grid.n_nodes, grid.dim)
        K = K + advect_sign * sum(sp.diags(phi[:, k]) @ G for k, G in enumerate(grid.grad_ops))
    if q_pot is not None:
        K = K + sp.diags(np.broadcast_to(np.asarray(q_pot, dtype=float), grid.shape).ravel())
    return sp.csr_matrix(K)


def _conjugate(grid: Grid, K: sp.csr_matrix, rho: float, zeta: np.ndarray, sign: float) -> sp.csr_matrix:
    """Entries ``K_ij exp(sign * rho zeta . (x_j - x_i))``: ``D^{-s} K D^{s}``, ``D = diag(e^{rho zeta.x})``."""
    K = sp.coo_matrix(K)
    phase = grid.coords.reshape(-1, grid.dim) @ zeta
    data = K.data * np.exp(sign * rho * (phase[K.col] - phase[K.row]))
    return sp.csr_matrix((data, (K.row, K.col)), shape=K.shape)


def discrete_symbol(grid: Grid, rho: float, zeta) -> float:
    """``sigma_h`` with ``Lap_h e^{rho zeta . x} = sigma_h e^{rho zeta . x}`` at interior nodes."""
    return float(sum((2 * np.cosh(rho * z * h) - 2) / h**2 for z, h in zip(zeta, grid.h)))


def _check_budget(grid: Grid, rho: float):
    if rho**2 * grid.T + rho * grid.diameter > EXPONENT_CAP:
        raise OverflowRisk(
            f"rho^2 T + rho diam = {rho**2 * grid.T + rho * grid.diameter:.1f} exceeds {EXPONENT_CAP}"
        )


def _psi(grid: Grid, params: CGOParams) -> np.ndarray:
    zx = grid.coords @ np.asarray(params.zeta)
    t = grid.times.reshape(-1, *([1] * grid.dim))
    return discrete_symbol(grid, params.rho, params.zeta) * t + params.rho * zx[None]


def _leading(grid: Grid, params: CGOParams, log_amp: np.ndarray, oscillate: bool) -> np.ndarray:
    chi = params.chi(grid).reshape(-1, *([1] * grid.dim))
    phase = np.zeros(grid.st_shape)
    if oscillate:
        xi = np.asarray(params.xi)
        t = grid.times.reshape(-1, *([1] * grid.dim))
        phase = (grid.coords @ xi)[None] + params.tau * t
    return chi * np.exp(log_amp)[None] * np.exp(-1j * phase)


def _l2(grid: Grid, z: np.ndarray) -> float:
    return float(np.sqrt(abs(integrate(grid, np.abs(z) ** 2))))


def cgo_forward(grid: Grid, params: CGOParams, phi=None, q_pot=None) -> CGOResult:
    """Probe for ``d_t w - Lap w - phi . grad w + q w = 0`` with ``w(., 0) = 0``."""
    _check_budget(grid, params.rho)
    rho, zeta = params.rho, np.asarray(params.zeta)
    lead = _leading(grid, params, amplitude_exponent(grid, phi, params), oscillate=True)
    K = _conjugate(grid, _spatial_operator(grid, phi, q_pot, -1.0), rho, zeta, +1.0)
    K = K + discrete_symbol(grid, rho, zeta) * sp.identity(grid.n_nodes, format="csr")
    stepper = ImplicitEuler(grid, K)
    flat = lead.reshape(grid.n_time + 1, grid.n_nodes)
    W = stepper.forward(flat[0], flat[:, grid.boundary_index])
    z = W.reshape(grid.st_shape) - lead
    return CGOResult(params, +1, lead, z, _l2(grid, z), _psi(grid, params))


def _backward_stepper(grid: Grid, params: CGOParams, phi, q_pot) -> ImplicitEuler:
    rho, zeta = params.rho, np.asarray(params.zeta)
    K = _conjugate(grid, _spatial_operator(grid, phi, q_pot, +1.0), rho, zeta, -1.0)
    K = K + discrete_symbol(grid, rho, zeta) * sp.identity(grid.n_nodes, format="csr")
    return ImplicitEuler(grid, K)


def weighted_backward(grid: Grid, params: CGOParams, phi, q_pot, boundary: np.ndarray) -> np.ndarray:
    """``V = e^{psi} v`` for ``-d_t v - Lap v + phi . grad v + q v = 0``, ``v(T) = 0``.

    ``boundary`` holds the weighted Dirichlet data ``e^{psi} v`` on boundary
    nodes, shape ``(n_time + 1, n_boundary)``.
    """
    _check_budget(grid, params.rho)
    stepper = _backward_stepper(grid, params, phi, q_pot)
    boundary = np.asarray(boundary)
    V = stepper.backward(np.zeros(grid.n_nodes, dtype=boundary.dtype), boundary)
    return V.reshape(grid.st_shape)


def cgo_backward(grid: Grid, params: CGOParams, phi=None, q_pot=None) -> CGOResult:
    """Probe for ``-d_t v - Lap v + phi . grad v + q v = 0`` with ``v(., T) = 0``."""
    _check_budget(grid, params.rho)
    lead = _leading(grid, params, -amplitude_exponent(grid, phi, params), oscillate=False)
    flat = lead.reshape(grid.n_time + 1, grid.n_nodes)
    V = _backward_stepper(grid, params, phi, q_pot).backward(flat[-1], flat[:, grid.boundary_index])
    z = V.reshape(grid.st_shape) - lead
    return CGOResult(params, -1, lead, z, _l2(grid, z), _psi(grid, params))


def pairing(grid: Grid, w: np.ndarray, f: np.ndarray) -> complex:
    """Space-time trapezoidal integral of ``w * f``; vector fields are contracted."""
    prod = np.asarray(w) * np.asarray(f)
    if prod.ndim == grid.dim + 2:
        prod = prod.sum(axis=-1)
    return complex(integrate(grid, prod))


def _weighted_gradient(grid: Grid, probe: CGOResult, part: str = "weighted") -> np.ndarray:
    """``e^{psi} grad(e^{-psi} V)`` for a backward probe, i.e. ``grad V - rho zeta V``."""
    from .grid import gradient

    V = getattr(probe, part)
    zeta = np.asarray(probe.params.zeta)
    return gradient(grid, V) - probe.params.rho * V[..., None] * zeta


def probe_pairing(grid: Grid, fw: CGOResult, bw: CGOResult, dq: np.ndarray, part: str = "weighted") -> complex:
    """``int_Q w (dq . grad v)`` with the exponential weights cancelled exactly.

    ``part`` selects ``"weighted"`` (leading + remainder) or ``"leading"`` terms.
    """
    if fw.params.rho != bw.params.rho or fw.params.zeta != bw.params.zeta:
        raise ValueError("paired probes must share rho and zeta")
    W = getattr(fw, part)
    gv = _weighted_gradient(grid, bw, part)
    return pairing(grid, W[..., None] * np.asarray(dq)[None], gv)


def leading_limit(grid: Grid, fw: CGOResult, bw: CGOResult, dq: np.ndarray) -> complex:
    """``rho -> inf`` limit of ``probe_pairing / rho``: ``-int_Q lead_+ lead_- (dq . zeta)``."""
    zeta = np.asarray(fw.params.zeta)
    return -pairing(grid, fw.leading * bw.leading, np.broadcast_to(np.asarray(dq) @ zeta, grid.shape)[None])


def fourier_coefficient(grid: Grid, f: np.ndarray, xi, tau: float, chi: np.ndarray) -> complex:
    """``int chi^2 e^{-i tau t} dt * int_Omega f e^{-i x . xi} dx`` by trapezoid products."""
    tfac = complex(np.sum(grid.time_weights * chi**2 * np.exp(-1j * tau * grid.times)))
    phase = grid.coords @ np.asarray(xi, dtype=float)
    return tfac * complex(np.sum(grid.weights * f * np.exp(-1j * phase)))


def fft_coefficient(grid: Grid, f: np.ndarray, k: tuple[int, ...]) -> complex:
    """Spatial Fourier coefficient at ``xi = 2 pi k / L`` from the FFT of the periodic node samples."""
    samples = np.asarray(f)[tuple(slice(0, n - 1) for n in grid.n_cells)]
    F = np.fft.fftn(samples)
    lo = np.array([e[0] for e in grid.extent])
    L = np.array([e[1] - e[0] for e in grid.extent])
    xi = 2 * np.pi * np.asarray(k) / L
    idx = tuple(int(ki) % (n - 1) for ki, n in zip(k, grid.n_cells))
    return complex(F[idx] * np.prod(grid.h) * np.exp(-1j * lo @ xi))


@dataclass(frozen=True)
class SweepRow:
    rho: float
    zeta: tuple
    xi: tuple
    tau: float
    remainder_norm: float
    pairing: complex


def probe_sweep(grid: Grid, base: CGOParams, rhos, phi=None, q_pot=None, dq=None) -> list[SweepRow]:
    """Forward probes over a rho ladder; pairing against ``dq`` with a zero-coefficient backward probe."""
    rows = []
    for rho in rhos:
        p = base.with_rho(rho)
        fw = cgo_forward(grid, p, phi, q_pot)
        val = 0j
        if dq is not None:
            bw = cgo_backward(grid, p, phi, None)
            val = probe_pairing(grid, fw, bw, dq) / rho
        rows.append(SweepRow(rho, p.zeta, p.xi, p.tau, fw.remainder_norm, val))
    return rows


def boundary_pairing(
    grid: Grid,
    probe: CGOResult,
    u_trace: np.ndarray,
    u_normal: np.ndarray,
    q_ref: np.ndarray | None = None,
) -> complex:
    """Boundary side of the first-order integral identity for a measured backward solution ``u``.

    With ``w`` a forward probe of the adjoint operator for ``q_ref`` and ``u``
    solving ``-d_t u - Lap u + q . grad u = 0``,

        int_Q w (q - q_ref) . grad u
            = int_Gamma (w d_nu u - u d_nu w - (q_ref . nu) w u),

    returned with the exponential weights cancelled, i.e. scaled by
    ``e^{-psi}`` of the probe and ``e^{+psi}`` carried by the data. Callers
    pass data already multiplied by ``e^{psi}`` (the backward-probe boundary
    datum has this form).
    """
    from .grid import normal_derivative

    zeta = np.asarray(probe.params.zeta)
    nu = grid.normals
    W = probe.weighted
    Wt = trace(grid, W)
    # d_nu w = e^psi (d_nu W + rho (zeta . nu) W)
    dW = normal_derivative(grid, W) + probe.params.rho * Wt * (nu @ zeta)
    integrand = Wt * u_normal - u_trace * dW
    if q_ref is not None:
        qn = np.einsum("bi,bi->b", np.asarray(q_ref).reshape(-1, grid.dim)[grid.boundary_index], nu)
        integrand = integrand - qn * Wt * u_trace
    return complex(np.sum(grid.time_weights[:, None] * _surface_weights(grid)[None] * integrand))


def _surface_weights(grid: Grid) -> np.ndarray:
    """Trapezoidal weights for the boundary surface (point masses in 1D)."""
    if grid.dim == 1:
        return np.ones(2)
    w = np.zeros(grid.shape)
    (nx, ny), (hx, hy) = grid.n_cells, grid.h
    wx = np.full(nx, hx)
    wx[[0, -1]] = hx / 2
    wy = np.full(ny, hy)
    wy[[0, -1]] = hy / 2
    w[0, :] += wy
    w[-1, :] += wy
    w[:, 0] += wx
    w[:, -1] += wx
    return w.ravel()[grid.boundary_index]
