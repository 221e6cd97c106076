"""Reference time evolution for the five quantum evolution equations.

Every stepper is a pure ``state -> state`` map.  ``make_*_stepper`` builds a
closure with the exponentials precomputed; the ``step_*`` functions are
one-shot conveniences around them.

* Schroedinger: Strang split-operator (second order, unitary).
* Position-dependent mass: Crank-Nicolson with ``D diag(1/m) D`` kinetic
  operator, solved by preconditioned GMRES.
* Pauli (A = 0): Strang split, exact 2x2 Zeeman exponential.
* Free Klein-Gordon and 1-D Dirac (Weyl representation): exact per-mode
  exponentials, so time stepping introduces no error at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import AllNodes, GridMismatch, SolverDiverged
from .fields import (ComplexField, Constants, KGState, PolarField, SpinorField,
                     UniformGrid, polar_decompose, DEFAULT_EPS_NODE)

POTENTIAL_KINDS = ("zero", "harmonic", "gaussian_barrier", "tabulated")
MASS_KINDS = ("constant", "sinusoidal", "tabulated")


@dataclass(frozen=True)
class PotentialSpec:
    """Static external potential.

    ``harmonic``: ``V = m omega^2 (x - center)^2 / 2``;
    ``gaussian_barrier``: ``V = height exp(-(x - center)^2 / (2 width^2))``.
    """

    kind: str = "zero"
    omega: float = 0.0
    center: float = 0.0
    height: float = 0.0
    width: float = 1.0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    def evaluate(self, grid: UniformGrid, consts: Constants) -> np.ndarray:
        x = grid.x
        if self.kind == "zero":
            return np.zeros(grid.n_points)
        if self.kind == "harmonic":
            return 0.5 * consts.m * self.omega**2 * (x - self.center) ** 2
        if self.kind == "gaussian_barrier":
            return self.height * np.exp(-((x - self.center) ** 2) / (2 * self.width**2))
        values = np.asarray(self.values, dtype=float)
        if values.shape != (grid.n_points,):
            raise ValueError("tabulated potential length must equal n_points")
        return values


@dataclass(frozen=True)
class MassSpec:
    """Static mass profile, strictly positive.

    ``sinusoidal``: ``m(x) = m0 (1 + amplitude sin(2 pi periods (x - x_min) / L))``.
    """

    kind: str = "constant"
    m0: float = 1.0
    amplitude: float = 0.0
    periods: int = 1
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in MASS_KINDS:
            raise ValueError(f"unknown mass kind {self.kind!r}")

    def evaluate(self, grid: UniformGrid) -> np.ndarray:
        if self.kind == "constant":
            m = np.full(grid.n_points, float(self.m0))
        elif self.kind == "sinusoidal":
            phase = 2 * np.pi * self.periods * (grid.x - grid.x_min) / grid.length
            m = self.m0 * (1 + self.amplitude * np.sin(phase))
        else:
            m = np.asarray(self.values, dtype=float)
            if m.shape != (grid.n_points,):
                raise ValueError("tabulated mass length must equal n_points")
        if not m.min() > 0:
            raise ValueError("mass must be strictly positive everywhere")
        return m


@dataclass(frozen=True)
class ExternalFieldSpec:
    """Pauli fields with vanishing vector potential: scalar potential ``phi``
    and a magnetic field ``B`` given directly, either as one uniform
    3-vector or as ``n_points`` rows of 3-vectors."""

    phi: PotentialSpec = field(default_factory=PotentialSpec)
    B: tuple = (0.0, 0.0, 0.0)

    def B_array(self, grid: UniformGrid) -> np.ndarray:
        B = np.asarray(self.B, dtype=float)
        if B.shape == (3,):
            return np.tile(B, (grid.n_points, 1))
        if B.shape != (grid.n_points, 3):
            raise ValueError("B must be a 3-vector or an (n_points, 3) table")
        return B


# --------------------------------------------------------------------------
# Schroedinger


def make_schrodinger_stepper(grid: UniformGrid, V, consts: Constants, dt: float):
    half_v = np.exp(-0.5j * np.asarray(V) * dt / consts.hbar)
    kin = np.exp(-0.5j * consts.hbar * grid.k**2 * dt / consts.m)

    def step(psi: ComplexField) -> ComplexField:
        u = half_v * psi.values
        u = np.fft.ifft(kin * np.fft.fft(u))
        return ComplexField(grid, psi.t + dt, half_v * u)

    return step


def step_schrodinger(psi: ComplexField, V, consts: Constants, dt: float) -> ComplexField:
    return make_schrodinger_stepper(psi.grid, V, consts, dt)(psi)


# --------------------------------------------------------------------------
# position-dependent mass


def _d1(u, ik):
    return np.fft.ifft(ik * np.fft.fft(u))


def nonconstant_mass_hamiltonian(grid: UniformGrid, V, mass, consts: Constants):
    """Return ``H psi = -(hbar^2/2) d/dx[(1/m) d psi/dx] + V psi`` as a callable."""
    ik = 1j * grid.k
    ik[grid.n_points // 2] = 0.0
    inv_m = 1.0 / np.asarray(mass, dtype=float)
    V = np.asarray(V, dtype=float)
    h2 = consts.hbar**2

    def apply(u):
        return -0.5 * h2 * _d1(inv_m * _d1(u, ik), ik) + V * u

    return apply


def make_nonconstant_mass_stepper(grid: UniformGrid, V, mass, consts: Constants, dt: float,
                                  tol: float = 1e-13, maxiter: int = 5):
    n = grid.n_points
    H = nonconstant_mass_hamiltonian(grid, V, mass, consts)
    a = 0.5j * dt / consts.hbar
    A = LinearOperator((n, n), matvec=lambda u: u + a * H(u), dtype=complex)
    # constant-mass spectral CN inverse as preconditioner
    k2 = grid.k**2
    k2[n // 2] = 0.0
    mean_inv_m = float(np.mean(1.0 / np.asarray(mass)))
    diag = 1 + a * (0.5 * consts.hbar**2 * mean_inv_m * k2 + float(np.mean(V)))
    M = LinearOperator((n, n), matvec=lambda u: np.fft.ifft(np.fft.fft(u) / diag),
                       dtype=complex)

    def step(psi: ComplexField) -> ComplexField:
        u = psi.values
        rhs = u - a * H(u)
        sol, info = gmres(A, rhs, x0=u, rtol=tol, atol=0.0, restart=40,
                          maxiter=maxiter, M=M)
        if info != 0:
            # tol can sit below the rounding floor of a stiff operator; accept
            # the iterate if its true residual is still tiny
            res = np.linalg.norm(A.matvec(sol) - rhs) / np.linalg.norm(rhs)
            if not res < 100 * tol:
                raise SolverDiverged(f"GMRES did not converge (info={info}, residual={res:.3g})")
        return ComplexField(grid, psi.t + dt, sol)

    return step


def step_nonconstant_mass(psi: ComplexField, V, mass, consts: Constants, dt: float,
                          **solver_options) -> ComplexField:
    return make_nonconstant_mass_stepper(psi.grid, V, mass, consts, dt, **solver_options)(psi)


# --------------------------------------------------------------------------
# Pauli, A = 0


def zeeman_propagator(phi, B, consts: Constants, dt: float) -> np.ndarray:
    """Pointwise ``exp(-(i dt/hbar)[q phi I - (q hbar/2m) sigma.B])`` as an
    ``(n, 2, 2)`` array."""
    phi = np.asarray(phi, dtype=float)
    B = np.asarray(B, dtype=float)
    bnorm = np.linalg.norm(B, axis=1)
    theta = consts.q * bnorm * dt / (2 * consts.m)
    with np.errstate(divide="ignore", invalid="ignore"):
        nhat = np.where(bnorm[:, None] > 0, B / bnorm[:, None], 0.0)
    c, s = np.cos(theta), np.sin(theta)
    nx, ny, nz = nhat.T
    U = np.empty((phi.size, 2, 2), dtype=complex)
    U[:, 0, 0] = c + 1j * s * nz
    U[:, 0, 1] = 1j * s * (nx - 1j * ny)
    U[:, 1, 0] = 1j * s * (nx + 1j * ny)
    U[:, 1, 1] = c - 1j * s * nz
    return U * np.exp(-1j * consts.q * phi * dt / consts.hbar)[:, None, None]


def make_pauli_stepper(grid: UniformGrid, phi, B, consts: Constants, dt: float,
                       freeze_kinetic: bool = False):
    """Strang split: half Zeeman/scalar step, kinetic, half Zeeman/scalar step.

    ``freeze_kinetic`` drops the kinetic factor (test mode for the 2-level
    Zeeman dynamics).
    """
    Uh = zeeman_propagator(phi, B, consts, 0.5 * dt)
    kin = np.exp(-0.5j * consts.hbar * grid.k**2 * dt / consts.m)

    def local(u):
        return np.einsum("nij,jn->in", Uh, u)

    def step(spinor: SpinorField) -> SpinorField:
        u = np.stack([c.values for c in spinor.components])
        u = local(u)
        if not freeze_kinetic:
            u = np.fft.ifft(kin * np.fft.fft(u, axis=1), axis=1)
        u = local(u)
        t = spinor.t + dt
        return SpinorField((ComplexField(grid, t, u[0]), ComplexField(grid, t, u[1])))

    return step


def step_pauli(spinor: SpinorField, fields: ExternalFieldSpec, consts: Constants, dt: float,
               freeze_kinetic: bool = False) -> SpinorField:
    grid = spinor.grid
    phi = fields.phi.evaluate(grid, consts)
    return make_pauli_stepper(grid, phi, fields.B_array(grid), consts, dt, freeze_kinetic)(spinor)


# --------------------------------------------------------------------------
# free Klein-Gordon


def kg_frequencies(grid: UniformGrid, consts: Constants) -> np.ndarray:
    c = consts.c
    return np.sqrt(c**2 * grid.k**2 + (consts.m * c**2 / consts.hbar) ** 2)


def kg_energy(state: KGState, consts: Constants) -> float:
    """``int |psi_t|^2/c^2 + |psi_x|^2 + (m c/hbar)^2 |psi|^2 dx``."""
    grid = state.grid
    psi = state.psi.values
    psi_x = np.fft.ifft(1j * grid.k * np.fft.fft(psi))
    mu2 = (consts.m * consts.c / consts.hbar) ** 2
    dens = (np.abs(state.dpsi_dt.values) ** 2 / consts.c**2 + np.abs(psi_x) ** 2
            + mu2 * np.abs(psi) ** 2)
    return grid.integrate(dens)


def make_kg_stepper(grid: UniformGrid, consts: Constants, dt: float):
    w = kg_frequencies(grid, consts)
    cw, sw = np.cos(w * dt), np.sin(w * dt)

    def step(state: KGState) -> KGState:
        a = np.fft.fft(state.psi.values)
        b = np.fft.fft(state.dpsi_dt.values)
        a2 = cw * a + (sw / w) * b
        b2 = -w * sw * a + cw * b
        t = state.t + dt
        return KGState(ComplexField(grid, t, np.fft.ifft(a2)),
                       ComplexField(grid, t, np.fft.ifft(b2)))

    return step


def step_klein_gordon(state: KGState, consts: Constants, dt: float) -> KGState:
    return make_kg_stepper(state.grid, consts, dt)(state)


# --------------------------------------------------------------------------
# 1-D Dirac, Weyl representation


def weyl_mode_propagator(grid: UniformGrid, consts: Constants, dt: float) -> np.ndarray:
    """Per-mode ``exp(-(i dt/hbar)(m c^2 sigma_3 + c hbar k sigma_1))``, shape (n, 2, 2)."""
    a = consts.m * consts.c**2 / consts.hbar
    b = consts.c * grid.k
    W = np.sqrt(a**2 + b**2)
    cos = np.cos(W * dt)
    sinc = dt * np.sinc(W * dt / np.pi)  # sin(W dt)/W, finite at W = 0
    U = np.empty((grid.n_points, 2, 2), dtype=complex)
    U[:, 0, 0] = cos - 1j * sinc * a
    U[:, 1, 1] = cos + 1j * sinc * a
    U[:, 0, 1] = U[:, 1, 0] = -1j * sinc * b
    return U


def make_weyl_stepper(grid: UniformGrid, consts: Constants, dt: float):
    U = weyl_mode_propagator(grid, consts, dt)

    def step(spinor: SpinorField) -> SpinorField:
        u = np.fft.fft(np.stack([c.values for c in spinor.components]), axis=1)
        u = np.fft.ifft(np.einsum("nij,jn->in", U, u), axis=1)
        t = spinor.t + dt
        return SpinorField((ComplexField(grid, t, u[0]), ComplexField(grid, t, u[1])))

    return step


def step_weyl(spinor: SpinorField, consts: Constants, dt: float) -> SpinorField:
    return make_weyl_stepper(spinor.grid, consts, dt)(spinor)


# --------------------------------------------------------------------------
# histories


@dataclass
class SnapshotHistory:
    """Time-ordered states at uniform spacing ``dt``.

    Polar decompositions are computed lazily and cached per snapshot.
    """

    model: str
    dt: float
    states: list
    eps_node: float = DEFAULT_EPS_NODE
    hbar: float = 1.0
    _polar: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.states:
            raise ValueError("history needs at least one state")
        grid = self.states[0].grid
        if any(s.grid != grid for s in self.states):
            raise GridMismatch("all snapshots must share one grid")
        t = self.times
        if t.size > 1:
            steps = np.diff(t)
            if not np.all(steps > 0) or not np.allclose(steps, self.dt, rtol=1e-9, atol=1e-12):
                raise ValueError("snapshot times must be strictly increasing at spacing dt")

    @property
    def grid(self) -> UniformGrid:
        return self.states[0].grid

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states], dtype=float)

    def __len__(self):
        return len(self.states)

    @property
    def is_spinor(self) -> bool:
        return self.model in ("pauli", "weyl")

    def field(self, i: int, component: int = 0) -> ComplexField:
        s = self.states[i]
        if isinstance(s, KGState):
            return s.psi
        if isinstance(s, SpinorField):
            return s.components[component]
        return s

    def polar(self, i: int, component: int = 0) -> PolarField:
        key = (i, component)
        if key not in self._polar:
            f = self.field(i, component)
            try:
                self._polar[key] = polar_decompose(f, self.eps_node, self.hbar)
            except AllNodes:
                if self.model not in ("pauli", "weyl"):
                    raise
                # a vanishing spinor component is all node: nothing is defined on it
                z = np.zeros(f.grid.n_points)
                self._polar[key] = PolarField(f.grid, f.t, z, z.copy(),
                                              np.ones(z.size, dtype=bool), f.values,
                                              self.hbar, self.eps_node)
        return self._polar[key]

    def norms(self) -> np.ndarray:
        if self.model == "klein_gordon":
            return np.array([s.psi.norm() for s in self.states])
        return np.array([s.norm() for s in self.states])


def run_stepper(step: Callable, state, n_steps: int, stride: int = 1) -> list:
    if n_steps < 0 or stride < 1:
        raise ValueError("n_steps must be >= 0 and stride >= 1")
    out = [state]
    for i in range(1, n_steps + 1):
        state = step(state)
        if i % stride == 0:
            out.append(state)
    return out


def make_stepper(scenario, dt: float | None = None):
    """Stepper closure for ``scenario.model`` with step ``dt`` (default
    ``scenario.dt``)."""
    dt = scenario.dt if dt is None else dt
    grid, consts = scenario.grid, scenario.constants
    model = scenario.model
    if model == "schrodinger":
        return make_schrodinger_stepper(grid, scenario.potential.evaluate(grid, consts), consts, dt)
    if model == "nonconstant_mass":
        return make_nonconstant_mass_stepper(grid, scenario.potential.evaluate(grid, consts),
                                             scenario.mass.evaluate(grid), consts, dt)
    if model == "pauli":
        ext = scenario.external_field
        return make_pauli_stepper(grid, ext.phi.evaluate(grid, consts), ext.B_array(grid),
                                  consts, dt, scenario.freeze_kinetic)
    if model == "klein_gordon":
        return make_kg_stepper(grid, consts, dt)
    if model == "weyl":
        return make_weyl_stepper(grid, consts, dt)
    raise ValueError(f"unknown model {model!r}")


def propagate(scenario, initial_state=None) -> SnapshotHistory:
    """Apply the scenario's stepper ``n_steps`` times, keeping every
    ``snapshot_stride``-th state."""
    from .scenario_io import build_initial_state

    if initial_state is None:
        initial_state = build_initial_state(scenario)
    states = run_stepper(make_stepper(scenario), initial_state, scenario.n_steps,
                         scenario.snapshot_stride)
    return SnapshotHistory(scenario.model, scenario.dt * scenario.snapshot_stride, states,
                           scenario.eps_node, scenario.constants.hbar)


def reverse_check(step_forward: Callable, step_backward: Callable, state) -> float:
    """Max-norm distance after one forward and one backward step."""
    back = step_backward(step_forward(state))

    def vals(s):
        if isinstance(s, KGState):
            return np.concatenate([s.psi.values, s.dpsi_dt.values])
        if isinstance(s, SpinorField):
            return np.concatenate([c.values for c in s.components])
        return s.values

    return float(np.max(np.abs(vals(back) - vals(state))))


def stack_values(states: Sequence) -> np.ndarray:
    """Complex values of a list of states, shape ``(n_states, n_components, n_points)``."""
    rows = []
    for s in states:
        if isinstance(s, KGState):
            rows.append([s.psi.values, s.dpsi_dt.values])
        elif isinstance(s, SpinorField):
            rows.append([c.values for c in s.components])
        else:
            rows.append([s.values])
    return np.array(rows)
