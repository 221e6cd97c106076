"""Grids, complex fields and their polar (Madelung) decomposition.

All spatial derivatives are spectral on a uniform periodic grid.  The
unwrapped phase ``S`` of a field is generally *not* periodic (a plane wave
winds by ``2*pi*n`` across the box), so derivatives of ``S`` are never taken
by differentiating ``S`` itself.  They are obtained from the logarithmic
derivatives of the periodic field ``psi``::

    d^n/dx^n log(psi) = d^n log(R)/dx^n + (i/hbar) d^n S/dx^n

which are computed from ``psi^(k)/psi`` ratios (see :func:`log_derivatives`).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import AllNodes, GridMismatch, InsufficientHistory

DEFAULT_EPS_NODE = 1e-6

MODELS = ("schrodinger", "nonconstant_mass", "pauli", "klein_gordon", "weyl")


@dataclass(frozen=True)
class Constants:
    """Physical constants. ``m`` is the constant mass (reference mass for
    position-dependent mass models); ``m = 0`` is only meaningful for the
    massless Weyl equation."""

    hbar: float = 1.0
    m: float = 1.0
    c: float = 1.0
    q: float = 1.0

    def __post_init__(self):
        for name in ("hbar", "c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.m >= 0:
            raise ValueError("m must be non-negative")


@dataclass(frozen=True)
class UniformGrid:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        n = self.n_points
        if n < 4 or n & (n - 1):
            raise ValueError("n_points must be a power of two >= 4")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return self.length / self.n_points

    @cached_property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @cached_property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)

    def wrap(self, x):
        """Map positions into ``[x_min, x_max)``."""
        return self.x_min + np.mod(np.asarray(x, dtype=float) - self.x_min, self.length)

    def integrate(self, f) -> float:
        """Rectangle rule, spectrally accurate for periodic integrands."""
        return float(np.sum(f) * self.dx)


@dataclass(frozen=True)
class ComplexField:
    grid: UniformGrid
    t: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.grid.n_points,):
            raise ValueError("field length must equal grid.n_points")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    def norm(self) -> float:
        return self.grid.integrate(np.abs(self.values) ** 2)


@dataclass(frozen=True)
class SpinorField:
    components: tuple[ComplexField, ComplexField]

    def __post_init__(self):
        a, b = self.components
        if a.grid != b.grid or a.t != b.t:
            raise GridMismatch("spinor components must share grid and time")

    @property
    def grid(self) -> UniformGrid:
        return self.components[0].grid

    @property
    def t(self) -> float:
        return self.components[0].t

    def norm(self) -> float:
        return sum(c.norm() for c in self.components)


@dataclass(frozen=True)
class KGState:
    """Klein-Gordon state: the field and its first time derivative."""

    psi: ComplexField
    dpsi_dt: ComplexField

    def __post_init__(self):
        if self.psi.grid != self.dpsi_dt.grid or self.psi.t != self.dpsi_dt.t:
            raise GridMismatch("psi and dpsi_dt must share grid and time")

    @property
    def grid(self) -> UniformGrid:
        return self.psi.grid

    @property
    def t(self) -> float:
        return self.psi.t


def spectral_derivative(f, grid: UniformGrid, order: int = 1) -> np.ndarray:
    """``d^order f / dx^order`` by Fourier multiplication.

    Odd orders drop the Nyquist mode so real input stays real.
    """
    f = np.asarray(f)
    mult = (1j * grid.k) ** order
    if order % 2 == 1:
        mult = mult.copy()
        mult[grid.n_points // 2] = 0.0
    out = np.fft.ifft(mult * np.fft.fft(f))
    return out.real if np.isrealobj(f) else out


def gradient(f, grid: UniformGrid) -> np.ndarray:
    return spectral_derivative(np.asarray(f, dtype=float), grid, 1)


def laplacian(f, grid: UniformGrid) -> np.ndarray:
    return spectral_derivative(np.asarray(f, dtype=float), grid, 2)


def biharmonic(f, grid: UniformGrid) -> np.ndarray:
    return spectral_derivative(np.asarray(f, dtype=float), grid, 4)


def log_derivatives(psi, grid: UniformGrid, order: int = 4) -> list[np.ndarray]:
    """Return ``[g1, ..., g_order]`` with ``g_n = d^n log(psi) / dx^n``.

    Built from the ratios ``a_n = psi^(n)/psi`` via the moment-cumulant
    relations, so no branch of the complex logarithm is ever chosen.
    Values at zeros of ``psi`` are meaningless (inf/nan).
    """
    if not 1 <= order <= 4:
        raise ValueError("order must be in 1..4")
    psi = np.asarray(psi, dtype=complex)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = [spectral_derivative(psi, grid, n) / psi for n in range(1, order + 1)]
        a1 = a[0]
        g = [a1]
        if order >= 2:
            g.append(a[1] - a1**2)
        if order >= 3:
            g.append(a[2] - 3 * a1 * a[1] + 2 * a1**3)
        if order >= 4:
            g.append(a[3] - 4 * a1 * a[2] - 3 * a[1] ** 2 + 12 * a1**2 * a[1] - 6 * a1**4)
    return g


@dataclass(frozen=True)
class PolarField:
    """Madelung decomposition ``psi = R exp(i S / hbar)``.

    ``psi`` keeps the source values; all derivatives of ``R`` and ``S`` are
    computed from it.  ``S`` itself is only used for output and for
    along-curve anchoring.
    """

    grid: UniformGrid
    t: float
    R: np.ndarray
    S: np.ndarray
    node_mask: np.ndarray
    psi: np.ndarray
    hbar: float = 1.0
    eps_node: float = DEFAULT_EPS_NODE

    @cached_property
    def _g(self):
        return log_derivatives(self.psi, self.grid, 4)

    def _masked(self, arr):
        out = np.array(arr, dtype=float)
        out[self.node_mask] = np.nan
        return out

    def dS(self, n: int = 1) -> np.ndarray:
        """``d^n S / dx^n``; NaN on the node mask."""
        return self._masked(self.hbar * self._g[n - 1].imag)

    def dlogR(self, n: int = 1) -> np.ndarray:
        """``d^n log R / dx^n``; NaN on the node mask."""
        return self._masked(self._g[n - 1].real)

    def dR(self, n: int = 1) -> np.ndarray:
        """``d^n R / dx^n`` for n <= 2, via the log-derivatives."""
        l1 = self.dlogR(1)
        if n == 1:
            return self.R * l1
        if n == 2:
            return self.R * (self.dlogR(2) + l1**2)
        raise ValueError("n must be 1 or 2")

    def laplacian_R_over_R(self) -> np.ndarray:
        l1 = self.dlogR(1)
        return self.dlogR(2) + l1**2

    def grad_laplacian_R_over_R(self) -> np.ndarray:
        """``d/dx (R''/R)``."""
        return self.dlogR(3) + 2 * self.dlogR(1) * self.dlogR(2)


def unwrap_runs(phase: np.ndarray, mask: np.ndarray, anchor: int) -> np.ndarray:
    """Unwrap ``phase`` (radians) independently on each unmasked run.

    The run containing ``anchor`` keeps ``phase[anchor]`` at the anchor;
    other runs keep their first sample.  Masked runs are filled linearly
    between the neighbouring run end points.
    """
    n = phase.size
    out = np.array(phase, dtype=float)
    good = ~mask
    idx = np.flatnonzero(np.diff(np.concatenate(([0], good.astype(np.int8), [0]))))
    starts, stops = idx[::2], idx[1::2]
    for a, b in zip(starts, stops):
        seg = np.unwrap(phase[a:b])
        if a <= anchor < b:
            seg += phase[anchor] - seg[anchor - a]
        out[a:b] = seg
    if mask.any() and good.any():
        gi = np.flatnonzero(good)
        bi = np.flatnonzero(mask)
        # linear fill between run end points, constant beyond the outermost runs
        out[bi] = np.interp(bi, gi, out[gi])
    elif not good.any():
        out[:] = 0.0
    assert out.size == n
    return out


def polar_decompose(field: ComplexField, eps_node: float = DEFAULT_EPS_NODE,
                    hbar: float = 1.0) -> PolarField:
    if not 0 < eps_node < 1:
        raise ValueError("eps_node must lie in (0, 1)")
    psi = field.values
    R = np.abs(psi)
    rmax = R.max()
    if rmax == 0:
        raise AllNodes("field vanishes identically")
    mask = R < eps_node * rmax
    anchor = int(np.argmax(R))
    S = hbar * unwrap_runs(np.angle(psi), mask, anchor)
    return PolarField(field.grid, field.t, R, S, mask, psi, hbar, eps_node)


def recompose(p: PolarField) -> np.ndarray:
    return p.R * np.exp(1j * p.S / p.hbar)


def _mass_array(mass, grid: UniformGrid, consts: Constants) -> np.ndarray:
    if mass is None:
        return np.full(grid.n_points, consts.m)
    m = np.asarray(mass, dtype=float)
    if m.ndim == 0:
        return np.full(grid.n_points, float(m))
    return m


def quantum_potential(p: PolarField, consts: Constants, mass=None) -> np.ndarray:
    """``Q = -(hbar^2 / 2m) R''/R``; NaN on the node mask."""
    m = _mass_array(mass, p.grid, consts)
    return -(p.hbar**2 / (2 * m)) * p.laplacian_R_over_R()


def total_potential(p: PolarField, V, consts: Constants, model: str = "schrodinger",
                    mass=None, neighbours: tuple[PolarField, PolarField] | None = None):
    """Classical plus quantum potential for the given model.

    * ``schrodinger``: ``W = V + Q``.
    * ``nonconstant_mass``: ``Omega = V - hbar^2 R''/(2 m R) + hbar^2 m' R'/(2 m^2 R)``.
    * ``klein_gordon``: ``W = hbar^2 (R_tt / c^2 - R'') / R`` with ``R_tt`` from a
      centred difference over ``neighbours = (previous, next)`` snapshots.
    """
    V = np.broadcast_to(np.asarray(V, dtype=float), (p.grid.n_points,))
    if model in ("schrodinger", "pauli"):
        return V + quantum_potential(p, consts)
    if model == "nonconstant_mass":
        m = _mass_array(mass, p.grid, consts)
        dm = gradient(m, p.grid)
        return (V - p.hbar**2 / (2 * m) * p.laplacian_R_over_R()
                + p.hbar**2 * dm * p.dlogR(1) / (2 * m**2))
    if model == "klein_gordon":
        if neighbours is None or len(neighbours) != 2:
            raise InsufficientHistory("klein_gordon total potential needs 3 snapshots")
        prev, nxt = neighbours
        dt = 0.5 * (nxt.t - prev.t)
        R_tt = (nxt.R - 2 * p.R + prev.R) / dt**2
        with np.errstate(divide="ignore", invalid="ignore"):
            W = p.hbar**2 * (R_tt / (consts.c**2 * p.R) - p.laplacian_R_over_R())
        W[p.node_mask | prev.node_mask | nxt.node_mask] = np.nan
        return W
    raise ValueError(f"unknown model {model!r}")


def flux(p: PolarField, consts: Constants, mass=None) -> np.ndarray:
    """Probability current ``j = R^2 S' / m``."""
    m = _mass_array(mass, p.grid, consts)
    return p.R**2 * p.dS(1) / m


def _periodic_flux(psi, grid, hbar, m):
    # hbar Im(psi* psi') is smooth and periodic even across nodes
    return hbar * np.imag(np.conj(psi) * spectral_derivative(psi, grid, 1)) / m


def continuity_residual(p_prev: PolarField, p_now: PolarField, p_next: PolarField,
                        consts: Constants, mass=None, return_field: bool = False):
    """L2 norm of ``d(R^2)/dt + d j/dx`` at the middle snapshot.

    ``d/dt`` is a centred difference, ``d/dx`` spectral.  Points in the union
    of the three node masks are excluded.
    """
    if not (p_prev.grid == p_now.grid == p_next.grid):
        raise GridMismatch("snapshots live on different grids")
    grid = p_now.grid
    dt = 0.5 * (p_next.t - p_prev.t)
    m = _mass_array(mass, grid, consts)
    drho = (p_next.R**2 - p_prev.R**2) / (2 * dt)
    div_j = gradient(_periodic_flux(p_now.psi, grid, p_now.hbar, m), grid)
    res = drho + div_j
    mask = p_prev.node_mask | p_now.node_mask | p_next.node_mask
    res = np.where(mask, np.nan, res)
    if return_field:
        return res
    return float(np.sqrt(np.nansum(res**2) * grid.dx))
