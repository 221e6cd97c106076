"""Characteristic velocities, trajectory integration and along-curve quantities.

All field quantities are evaluated per snapshot from the stored wave function
(spectral space derivatives; exact time derivatives where the model supplies
them) and cached in a :class:`SnapshotFields`.  Trajectories are advanced with
classical RK4 at the snapshot spacing, so every accepted point lies on a
snapshot time and along-curve samples need only spatial interpolation.

Signs follow direct derivation from the field equations.  Alternative sign
choices stay reachable through explicit ``*_sign`` or ``coupling`` arguments,
which the verification suite uses for fault injection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NodeCrossing, SeedUndefined, UndefinedRegion
from .fields import Constants, UniformGrid, spectral_derivative
from .propagators import SnapshotHistory

NODE_HALO = 3
EPS_DENOMINATOR = 1e-3

COMPLETED = "completed"
ABORTED = "aborted_near_node"
LEFT_TOLERANCE = "left_refinement_tolerance"


@dataclass(frozen=True)
class ModelContext:
    """Static model data needed to turn snapshots into physical fields.

    ``V`` is the scalar potential (``q phi`` for Pauli), ``dV`` its exact
    gradient.  ``B`` is an ``(n, 3)`` table for Pauli.
    """

    model: str
    consts: Constants
    V: np.ndarray | None = None
    dV: np.ndarray | None = None
    mass: np.ndarray | None = None
    B: np.ndarray | None = None
    weyl_family: str = "per_component"

    @classmethod
    def from_scenario(cls, scenario) -> "ModelContext":
        grid, consts = scenario.grid, scenario.constants
        if scenario.model == "pauli":
            ext = scenario.external_field
            V = consts.q * ext.phi.evaluate(grid, consts)
            dV = consts.q * potential_gradient(ext.phi, grid, consts)
            B = ext.B_array(grid)
        else:
            V = scenario.potential.evaluate(grid, consts)
            dV = potential_gradient(scenario.potential, grid, consts)
            B = None
        mass = scenario.mass.evaluate(grid) if scenario.mass is not None else None
        return cls(scenario.model, consts, V, dV, mass, B, scenario.weyl_family or "per_component")


def potential_gradient(spec, grid: UniformGrid, consts: Constants) -> np.ndarray:
    """Exact gradient for analytic potentials, spectral for tabulated ones."""
    x = grid.x
    if spec.kind == "zero":
        return np.zeros(grid.n_points)
    if spec.kind == "harmonic":
        return consts.m * spec.omega**2 * (x - spec.center)
    if spec.kind == "gaussian_barrier":
        d = x - spec.center
        return -spec.height * d / spec.width**2 * np.exp(-(d**2) / (2 * spec.width**2))
    return spectral_derivative(np.asarray(spec.values, dtype=float), grid, 1)


@dataclass(frozen=True)
class VelocityField:
    model: str
    component: int
    grid: UniformGrid
    t: float
    v: np.ndarray
    defined_mask: np.ndarray
    superluminal: np.ndarray | None = None


def halo_mask(node_mask: np.ndarray, halo: int = NODE_HALO) -> np.ndarray:
    """``node_mask`` dilated by ``halo`` cells on the periodic grid."""
    out = node_mask.copy()
    for s in range(1, halo + 1):
        out |= np.roll(node_mask, s) | np.roll(node_mask, -s)
    return out


def _velocity(model, component, p, v, extra_undefined=None, superluminal=None):
    undefined = halo_mask(p.node_mask)
    if extra_undefined is not None:
        undefined = undefined | extra_undefined
    v = np.where(undefined, np.nan, v)
    return VelocityField(model, component, p.grid, p.t, v, ~undefined, superluminal)


def velocity_schrodinger(p, consts: Constants) -> VelocityField:
    """``v = S'/m``."""
    return _velocity("schrodinger", 0, p, p.dS(1) / consts.m)


def velocity_nonconstant_mass(p, mass, consts: Constants) -> VelocityField:
    """``v = S'/m(x)``."""
    return _velocity("nonconstant_mass", 0, p, p.dS(1) / np.asarray(mass))


def velocity_pauli(polars, consts: Constants) -> tuple[VelocityField, VelocityField]:
    """``v_i = S_i'/m`` per spinor component (vector potential zero)."""
    return tuple(_velocity("pauli", i, p, p.dS(1) / consts.m) for i, p in enumerate(polars))


def velocity_klein_gordon(p, dS_dt, consts: Constants,
                          eps_denominator: float = EPS_DENOMINATOR) -> VelocityField:
    """``v = -c^2 S' / S_t``, unclamped.  Points with
    ``|S_t| < eps_denominator m c^2`` are undefined; ``|v| > c`` is flagged."""
    dS_dt = np.asarray(dS_dt, dtype=float)
    small = ~(np.abs(dS_dt) >= eps_denominator * consts.m * consts.c**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = -consts.c**2 * p.dS(1) / dS_dt
    vf = _velocity("klein_gordon", 0, p, v, extra_undefined=small)
    sup = vf.defined_mask & (np.abs(np.nan_to_num(vf.v)) > consts.c)
    return VelocityField(vf.model, 0, vf.grid, vf.t, vf.v, vf.defined_mask, sup)


def weyl_phase_angle(polars) -> tuple[np.ndarray, np.ndarray]:
    """``(sin chi, cos chi)`` with ``chi = (S1 - S2)/hbar - pi/2``, computed
    from ``psi1 conj(psi2)`` so no unwrapping enters."""
    p1, p2 = polars
    prod = p1.psi * np.conj(p2.psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = prod / np.abs(prod)
    return -unit.real, unit.imag


def velocity_weyl_per_component(polars, consts: Constants):
    """``v_1 = c sin chi`` and ``v_2 = -c sin chi``, defined where neither
    component is near a node."""
    sin_chi, _ = weyl_phase_angle(polars)
    undefined = halo_mask(polars[0].node_mask | polars[1].node_mask)
    out = []
    for comp, sign in ((0, 1.0), (1, -1.0)):
        v = np.where(undefined, np.nan, sign * consts.c * sin_chi)
        out.append(VelocityField("weyl", comp, polars[0].grid, polars[0].t, v, ~undefined))
    return tuple(out)


def velocity_weyl_full(grid: UniformGrid, t: float, consts: Constants):
    """State-independent ``+c`` and ``-c`` fields."""
    n = grid.n_points
    full = np.ones(n, dtype=bool)
    return (VelocityField("weyl", 0, grid, t, np.full(n, consts.c), full),
            VelocityField("weyl", 1, grid, t, np.full(n, -consts.c), full))


# --------------------------------------------------------------------------
# interpolation


def _stencil(grid: UniformGrid, x):
    s = (np.asarray(x, dtype=float) - grid.x_min) / grid.dx
    j = np.floor(s).astype(int)
    u = s - j
    idx = (j[..., None] + np.arange(-1, 3)) % grid.n_points
    return idx, u


def catmull_rom(values: np.ndarray, grid: UniformGrid, x, rows=None) -> np.ndarray:
    """Periodic Catmull-Rom interpolation of grid ``values`` at ``x``.

    With ``rows`` given, ``values`` is 2-D and point ``j`` reads row ``rows[j]``.
    """
    idx, u = _stencil(grid, x)
    p = values[idx] if rows is None else values[np.asarray(rows)[..., None], idx]
    p0, p1, p2, p3 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    return 0.5 * (2 * p1 + (p2 - p0) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
                  + (3 * (p1 - p2) + p3 - p0) * u**3)


SAMPLE_ORDER = 8
_OFFSETS = np.arange(-(SAMPLE_ORDER // 2 - 1), SAMPLE_ORDER // 2 + 1)
_DENOM = np.array([np.prod([k - l for l in _OFFSETS if l != k]) for k in _OFFSETS], dtype=float)


def _lagrange_weights(u):
    # prefix/suffix products give prod_{l != k}(u - o_l) without division
    d = u[..., None] - _OFFSETS
    ones = np.ones(d.shape[:-1] + (1,))
    pre = np.cumprod(np.concatenate([ones, d[..., :-1]], axis=-1), axis=-1)
    suf = np.cumprod(np.concatenate([ones, d[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return pre * suf / _DENOM


def lagrange_interp(values: np.ndarray, grid: UniformGrid, x, rows=None) -> np.ndarray:
    """Periodic 8-point Lagrange interpolation.

    Used for along-curve samples, which are later differenced in time; the
    cubic error of Catmull-Rom oscillates on the cell-crossing time scale and
    would be amplified by those differences.  NaN in the stencil propagates.
    With ``rows`` given, ``values`` is 2-D and point ``j`` reads row
    ``rows[j]``.
    """
    s = (np.asarray(x, dtype=float) - grid.x_min) / grid.dx
    j = np.floor(s).astype(int)
    idx = (j[..., None] + _OFFSETS) % grid.n_points
    w = _lagrange_weights(s - j)
    vals = values[idx] if rows is None else values[np.asarray(rows)[..., None], idx]
    return np.sum(w * vals, axis=-1)


def stencil_defined(mask: np.ndarray, grid: UniformGrid, x) -> np.ndarray:
    idx, _ = _stencil(grid, x)
    return np.all(mask[idx], axis=-1)


def sample_velocity(fields: list[VelocityField], x, t):
    """Velocity at ``(x, t)``: Catmull-Rom in space, linear in time between
    the bracketing snapshots.  Raises :class:`UndefinedRegion` if any stencil
    cell at a contributing snapshot is undefined."""
    times = np.array([f.t for f in fields])
    if not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
        raise ValueError("t outside the history span")
    grid = fields[0].grid
    x = grid.wrap(np.asarray(x, dtype=float))
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(fields) - 2)) \
        if len(fields) > 1 else 0
    if len(fields) == 1:
        w = 0.0
    else:
        w = (t - times[i]) / (times[i + 1] - times[i])
        if abs(w - 1) < 1e-12:
            i, w = i + 1, 0.0
    out = 0.0
    for j, wt in ((i, 1 - w), (i + 1, w)):
        if wt == 0.0 and j != i:
            continue
        f = fields[j]
        if not np.all(stencil_defined(f.defined_mask, grid, x)):
            raise UndefinedRegion(f"stencil touches undefined cells at t={f.t}")
        out = out + wt * catmull_rom(np.nan_to_num(f.v), grid, x)
    return out


# --------------------------------------------------------------------------
# per-snapshot field cache


class SnapshotFields:
    """Lazily computed, cached physical fields of a snapshot history."""

    def __init__(self, history: SnapshotHistory, ctx: ModelContext):
        if history.model != ctx.model:
            raise ValueError("history and context disagree on the model")
        self.history = history
        self.ctx = ctx
        self.grid = history.grid
        self._cache: dict = {}

    def get(self, name: str, i: int, component: int = 0) -> np.ndarray:
        key = (name, i, component)
        if key not in self._cache:
            self._cache[key] = getattr(self, "_f_" + name)(i, component)
        return self._cache[key]

    def stack(self, name: str, component: int = 0, upto: int | None = None) -> np.ndarray:
        """Field ``name`` for snapshots ``0..upto-1`` as one 2-D array."""
        upto = len(self.history) if upto is None else upto
        key = ("stack", name, component)
        have = self._cache.get(key)
        if have is None or have.shape[0] < upto:
            have = np.stack([self.get(name, i, component) for i in range(upto)])
            self._cache[key] = have
        return have[:upto]

    def along(self, traj, name: str, component: int | None = None) -> np.ndarray:
        """Field ``name`` sampled along ``traj`` at every recorded time."""
        c = traj.component if component is None else component
        k = traj.times.size
        return lagrange_interp(self.stack(name, c, k), self.grid, traj.positions,
                               rows=np.arange(k))

    # -- generic
    def _p(self, i, c):
        return self.history.polar(i, c)

    def _m(self):
        if self.ctx.mass is not None:
            return self.ctx.mass
        return np.full(self.grid.n_points, self.ctx.consts.m)

    def _f_velocity(self, i, c) -> VelocityField:
        ctx, h = self.ctx, self.history
        if ctx.model == "schrodinger":
            return velocity_schrodinger(self._p(i, 0), ctx.consts)
        if ctx.model == "nonconstant_mass":
            return velocity_nonconstant_mass(self._p(i, 0), ctx.mass, ctx.consts)
        if ctx.model == "pauli":
            return velocity_pauli((self._p(i, 0), self._p(i, 1)), ctx.consts)[c]
        if ctx.model == "klein_gordon":
            return velocity_klein_gordon(self._p(i, 0), self.get("S_t", i), ctx.consts)
        if ctx.model == "weyl":
            if ctx.weyl_family == "full_system":
                return velocity_weyl_full(self.grid, h.states[i].t, ctx.consts)[c]
            return velocity_weyl_per_component((self._p(i, 0), self._p(i, 1)), ctx.consts)[c]
        raise ValueError(ctx.model)

    def _f_v(self, i, c):
        return self.get("velocity", i, c).v

    def _f_defined(self, i, c):
        return self.get("velocity", i, c).defined_mask

    def _f_logR(self, i, c):
        p = self._p(i, c)
        with np.errstate(divide="ignore"):
            return np.where(p.node_mask, np.nan, np.log(p.R))

    def _f_Rmax(self, i, c):
        return np.array([self._p(i, c).R.max()])

    def _f_R(self, i, c):
        return self._p(i, c).R

    def _f_R_x(self, i, c):
        return self._p(i, c).dR(1)

    def _f_S_x(self, i, c):
        return self._p(i, c).dS(1)

    def _f_S_xx(self, i, c):
        return self._p(i, c).dS(2)

    def _f_S_xxx(self, i, c):
        return self._p(i, c).dS(3)

    def _f_S_xxxx(self, i, c):
        return self._p(i, c).dS(4)

    def _f_dlogR1(self, i, c):
        return self._p(i, c).dlogR(1)

    def _f_dlogR2(self, i, c):
        return self._p(i, c).dlogR(2)

    def _f_RppR(self, i, c):
        return self._p(i, c).laplacian_R_over_R()

    def _f_psi_re(self, i, c):
        return self._p(i, c).psi.real

    def _f_psi_im(self, i, c):
        return self._p(i, c).psi.imag

    def _f_S_t_fd(self, i, c):
        """Centred-difference ``S_t`` from the neighbouring snapshots, taken
        as the phase of ``psi(t+dt) conj(psi(t-dt))`` (exact for plane waves);
        NaN at the first and last snapshot."""
        h = self.history
        if i == 0 or i == len(h) - 1:
            return np.full(self.grid.n_points, np.nan)
        a, b = h.field(i + 1, c).values, h.field(i - 1, c).values
        out = h.hbar * np.angle(a * np.conj(b)) / (h.states[i + 1].t - h.states[i - 1].t)
        return np.where(self._p(i, c).node_mask, np.nan, out)

    def _f_R_t_fd(self, i, c):
        h = self.history
        if i == 0 or i == len(h) - 1:
            return np.full(self.grid.n_points, np.nan)
        return (h.polar(i + 1, c).R - h.polar(i - 1, c).R) / (h.states[i + 1].t - h.states[i - 1].t)

    # -- Klein-Gordon: exact time derivatives from the field equation
    def _kg_logs(self, i):
        key = ("kg_logs", i, 0)
        if key in self._cache:
            return self._cache[key]
        g, consts = self.grid, self.ctx.consts
        st = self.history.states[i]
        psi, pt = st.psi.values, st.dpsi_dt.values
        mu2 = (consts.m * consts.c / consts.hbar) ** 2
        d = lambda f, n: spectral_derivative(f, g, n)  # noqa: E731
        p_xx = d(psi, 2)
        pt_x, pt_xx = d(pt, 1), d(pt, 2)
        ptt = consts.c**2 * (p_xx - mu2 * psi)
        pttt = consts.c**2 * (pt_xx - mu2 * pt)
        with np.errstate(divide="ignore", invalid="ignore"):
            a1, a2, a3 = d(psi, 1) / psi, p_xx / psi, d(psi, 3) / psi
            b1, e2, e3 = pt / psi, ptt / psi, pttt / psi
            c1, c2, d2x = pt_x / psi, pt_xx / psi, d(ptt, 1) / psi
            L = {
                "x": a1, "xx": a2 - a1**2, "xxx": a3 - 3 * a1 * a2 + 2 * a1**3,
                "t": b1, "tt": e2 - b1**2, "ttt": e3 - 3 * b1 * e2 + 2 * b1**3,
                "xt": c1 - a1 * b1,
                "xxt": c2 - a2 * b1 - 2 * a1 * (c1 - a1 * b1),
                "ttx": d2x - e2 * a1 - 2 * b1 * (c1 - a1 * b1),
            }
        mask = self._p(i, 0).node_mask
        for k in L:
            L[k] = np.where(mask, np.nan, L[k])
        self._cache[key] = L
        return L

    def _f_S_t(self, i, c):
        if self.ctx.model != "klein_gordon":
            raise ValueError("exact S_t is only available for klein_gordon")
        return self.ctx.consts.hbar * self._kg_logs(i)["t"].imag

    def _f_S_tt(self, i, c):
        return self.ctx.consts.hbar * self._kg_logs(i)["tt"].imag

    def _f_rho_kg(self, i, c):
        # density R^2 S_t with the sign of the conserved charge
        return self._p(i, 0).R ** 2 * self.get("S_t", i)

    def _f_W(self, i, c):
        ctx, consts = self.ctx, self.ctx.consts
        hb2 = consts.hbar**2
        if ctx.model in ("schrodinger", "pauli"):
            return ctx.V - hb2 / (2 * consts.m) * self.get("RppR", i, c)
        if ctx.model == "nonconstant_mass":
            m, p = ctx.mass, self._p(i, 0)
            dm = spectral_derivative(m, self.grid, 1)
            return ctx.V - hb2 / (2 * m) * p.laplacian_R_over_R() + hb2 * dm * p.dlogR(1) / (
                2 * m**2)
        if ctx.model == "klein_gordon":
            L = self._kg_logs(i)
            return hb2 * ((L["tt"].real + L["t"].real ** 2) / consts.c**2
                          - (L["xx"].real + L["x"].real ** 2))
        return np.full(self.grid.n_points, np.nan)

    def _f_accel(self, i, c):
        """Model acceleration field (force per unit mass), without the
        velocity-dependent parts that need the trajectory's own speed."""
        ctx, consts = self.ctx, self.ctx.consts
        hb2 = consts.hbar**2
        p = self._p(i, c)
        if ctx.model in ("schrodinger", "pauli"):
            dW = ctx.dV - hb2 / (2 * consts.m) * p.grad_laplacian_R_over_R()
            return -dW / consts.m
        raise ValueError("use newton_residual for this model")

    def _f_dOmega(self, i, c):
        m, p, g = self.ctx.mass, self._p(i, 0), self.grid
        hb2 = self.ctx.consts.hbar**2
        m_x, m_xx = spectral_derivative(m, g, 1), spectral_derivative(m, g, 2)
        A, A_x = p.laplacian_R_over_R(), p.grad_laplacian_R_over_R()
        B, B_x = p.dlogR(1), p.dlogR(2)
        return (self.ctx.dV - hb2 * A_x / (2 * m) + hb2 * A * m_x / (2 * m**2)
                + hb2 * (m_xx * B + m_x * B_x) / (2 * m**2) - hb2 * m_x**2 * B / m**3)

    def _f_m_x(self, i, c):
        return spectral_derivative(self.ctx.mass, self.grid, 1)

    def _f_W_x(self, i, c):
        L, consts = self._kg_logs(i), self.ctx.consts
        return consts.hbar**2 * ((L["ttx"].real + 2 * L["t"].real * L["xt"].real) / consts.c**2
                                 - (L["xxx"].real + 2 * L["x"].real * L["xx"].real))

    def _f_W_t(self, i, c):
        L, consts = self._kg_logs(i), self.ctx.consts
        return consts.hbar**2 * ((L["ttt"].real + 2 * L["t"].real * L["tt"].real) / consts.c**2
                                 - (L["xxt"].real + 2 * L["x"].real * L["xt"].real))

    # -- spinor coupling
    def _f_cross_re(self, i, c):
        """``R_other cos(xi)`` where ``xi = S_other - S_c`` (over hbar)."""
        p, q = self._p(i, c), self._p(i, 1 - c)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p.node_mask, np.nan, (q.psi * np.conj(p.psi)).real / p.R)

    def _f_cross_im(self, i, c):
        p, q = self._p(i, c), self._p(i, 1 - c)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p.node_mask, np.nan, (q.psi * np.conj(p.psi)).imag / p.R)

    def _f_sin_chi(self, i, c):
        return weyl_phase_angle((self._p(i, 0), self._p(i, 1)))[0]

    def _f_cos_chi(self, i, c):
        return weyl_phase_angle((self._p(i, 0), self._p(i, 1)))[1]

    # -- rates along the curve
    def _f_dlogR_rate(self, i, c):
        """``d log R / dt`` along the model's characteristic (uncoupled part)."""
        ctx, consts = self.ctx, self.ctx.consts
        p = self._p(i, c)
        if ctx.model in ("schrodinger", "pauli"):
            return -p.dS(2) / (2 * consts.m)
        if ctx.model == "nonconstant_mass":
            m = ctx.mass
            return -0.5 * (p.dS(2) / m - p.dS(1) * self.get("m_x", i) / m**2)
        if ctx.model == "klein_gordon":
            S_t = self.get("S_t", i)
            with np.errstate(divide="ignore", invalid="ignore"):
                return -(self.get("S_tt", i) - consts.c**2 * p.dS(2)) / (2 * S_t)
        raise ValueError(f"no density law for model {ctx.model!r}")

    def _f_pauli_coupling(self, i, c):
        """Coupling part of ``d log R_c / dt`` for Pauli spinors."""
        q, m = self.ctx.consts.q, self.ctx.consts.m
        B = self.ctx.B
        re, im = self.get("cross_re", i, c), self.get("cross_im", i, c)
        R = self._p(i, c).R
        with np.errstate(divide="ignore", invalid="ignore"):
            if c == 0:
                return -(q / (2 * m)) * (B[:, 0] * im - B[:, 1] * re) / R
            # for the lower component xi changes sign: sin -> -sin
            return -(q / (2 * m)) * (B[:, 1] * re + B[:, 0] * im) / R


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One characteristic curve sampled at snapshot times.

    ``positions`` are wrapped into ``[x_min, x_max)``; :meth:`unwrapped`
    returns the continuous curve.  ``W`` is NaN for models without a total
    potential (Weyl).
    """

    component: int
    x0: float
    times: np.ndarray
    positions: np.ndarray
    status: str
    v: np.ndarray = field(default=None, repr=False)
    R: np.ndarray = field(default=None, repr=False)
    S: np.ndarray = field(default=None, repr=False)
    W: np.ndarray = field(default=None, repr=False)
    length: float = 0.0

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    @property
    def samples(self) -> dict:
        return {"v": self.v, "R": self.R, "S": self.S, "W": self.W}

    def unwrapped(self) -> np.ndarray:
        if self.positions.size < 2:
            return self.positions.copy()
        return np.unwrap(self.positions, period=self.length) if self.length else self.positions


def integrate_ensemble(history: SnapshotHistory, ctx: ModelContext, seeds, component: int = 0,
                       fields: SnapshotFields | None = None) -> list[Trajectory]:
    """Integrate all ``seeds`` (positions) of one component together.

    Raises :class:`SeedUndefined` if any seed lies in an undefined region of
    the first snapshot.  Seeds whose RK4 stencil later touches an undefined
    cell stop there with status ``aborted_near_node``.
    """
    sf = fields if fields is not None else SnapshotFields(history, ctx)
    grid = history.grid
    x = grid.wrap(np.atleast_1d(np.asarray(seeds, dtype=float)))
    n_seeds, n_snap = x.size, len(history)
    dt = history.dt

    def defined(i, pts):
        return stencil_defined(sf.get("defined", i, component), grid, grid.wrap(pts))

    def vel(i, pts):
        return catmull_rom(np.nan_to_num(sf.get("v", i, component)), grid, grid.wrap(pts))

    ok0 = defined(0, x)
    if not np.all(ok0):
        bad = x[~ok0]
        raise SeedUndefined(f"seed(s) {bad.tolist()} lie in an undefined region for component "
                            f"{component} at t={history.states[0].t}")
    pos = np.full((n_snap, n_seeds), np.nan)
    pos[0] = x
    alive = np.ones(n_seeds, dtype=bool)
    last = np.zeros(n_seeds, dtype=int)
    for i in range(n_snap - 1):
        if not alive.any():
            break
        xa = pos[i, alive]
        ok = defined(i, xa) & defined(i + 1, xa)
        k1 = vel(i, xa)
        xm = xa + 0.5 * dt * k1
        ok &= defined(i, xm) & defined(i + 1, xm)
        k2 = 0.5 * (vel(i, xm) + vel(i + 1, xm))
        xm = xa + 0.5 * dt * k2
        ok &= defined(i, xm) & defined(i + 1, xm)
        k3 = 0.5 * (vel(i, xm) + vel(i + 1, xm))
        xe = xa + dt * k3
        ok &= defined(i + 1, xe)
        k4 = vel(i + 1, xe)
        xn = grid.wrap(xa + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
        idx = np.flatnonzero(alive)
        pos[i + 1, idx[ok]] = xn[ok]
        last[idx[ok]] = i + 1
        alive[idx[~ok]] = False

    times = history.times
    out = []
    for s in range(n_seeds):
        k = last[s] + 1
        traj = Trajectory(component, float(x[s]), times[:k].copy(), pos[:k, s].copy(),
                          COMPLETED if k == n_snap else ABORTED, length=grid.length)
        _fill_samples(traj, sf)
        out.append(traj)
    return out


def integrate_trajectory(history: SnapshotHistory, ctx: ModelContext, x0: float,
                         component: int = 0, fields: SnapshotFields | None = None) -> Trajectory:
    return integrate_ensemble(history, ctx, [x0], component, fields)[0]


def _fill_samples(traj: Trajectory, sf: SnapshotFields) -> None:
    c = traj.component
    k = traj.times.size
    traj.v = catmull_rom(np.nan_to_num(sf.stack("v", c, k)), sf.grid, traj.positions,
                         rows=np.arange(k))
    traj.R = np.exp(sf.along(traj, "logR"))
    traj.W = sf.along(traj, "W")
    psi = sf.along(traj, "psi_re") + 1j * sf.along(traj, "psi_im")
    hbar = sf.ctx.consts.hbar
    S = hbar * np.unwrap(np.angle(psi))
    # anchor the along-curve phase to the unwrapped field value at the seed
    S += lagrange_interp(sf.history.polar(0, c).S, sf.grid, traj.positions[:1])[0] - S[0]
    traj.S = S


def seed_positions(trajs) -> np.ndarray:
    return np.array([t.x0 for t in trajs])


# --------------------------------------------------------------------------
# along-curve identities


def _require_completed(traj: Trajectory):
    if not traj.completed:
        raise ValueError("trajectory did not complete")


def _curve_samples(traj, sf, name, component=None):
    return sf.along(traj, name, component)


def _check_nodes(traj, sf):
    k = traj.times.size
    rmax = sf.stack("Rmax", traj.component, k)[:, 0]
    thresh = sf.history.eps_node * rmax
    bad = ~(traj.R >= thresh)
    if bad.any():
        i = int(np.argmax(bad))
        raise NodeCrossing(f"trajectory from x0={traj.x0} meets a node at t={traj.times[i]}")


def _trapezoid_cumulative(f, dt):
    out = np.zeros_like(f)
    out[1:] = np.cumsum(0.5 * (f[1:] + f[:-1])) * dt
    return out


def density_along_trajectory(traj: Trajectory, sf: SnapshotFields, exponent_sign: float = 1.0,
                             coupling: bool = True) -> np.ndarray:
    """Amplitude reconstructed from ``R(x0, t0)`` by integrating the model's
    ``d log R / dt`` along the curve (trapezoid rule).

    ``exponent_sign=-1`` flips the exponent (fault injection).
    """
    _require_completed(traj)
    _check_nodes(traj, sf)
    rate = _curve_samples(traj, sf, "dlogR_rate")
    if sf.ctx.model == "pauli" and coupling:
        rate = rate + _curve_samples(traj, sf, "pauli_coupling")
    dt = sf.history.dt
    return traj.R[0] * np.exp(exponent_sign * _trapezoid_cumulative(rate, dt))


def action_along_trajectory(traj: Trajectory, sf: SnapshotFields,
                            kinetic_sign: float = 1.0) -> np.ndarray:
    """``S(x(t), t)`` accumulated from ``S(x0, t0)`` along the curve.

    Integrand ``S'^2/2m - W`` (Schroedinger-type) or ``S_t - c^2 S'^2/S_t``
    (Klein-Gordon).  ``kinetic_sign=-1`` flips the kinetic term and is used
    only for fault injection.
    """
    _require_completed(traj)
    _check_nodes(traj, sf)
    ctx = sf.ctx
    S_x = _curve_samples(traj, sf, "S_x")
    if ctx.model in ("schrodinger", "pauli", "nonconstant_mass"):
        if ctx.model == "pauli":
            raise ValueError("action integral is defined for uncoupled scalar models")
        m = ctx.consts.m if ctx.mass is None else lagrange_interp(
            ctx.mass, sf.grid, traj.positions)
        rate = kinetic_sign * S_x**2 / (2 * m) - traj.W
    elif ctx.model == "klein_gordon":
        S_t = _curve_samples(traj, sf, "S_t")
        rate = S_t - kinetic_sign * ctx.consts.c**2 * S_x**2 / S_t
    else:
        raise ValueError(f"no action law for model {ctx.model!r}")
    return traj.S[0] + _trapezoid_cumulative(rate, sf.history.dt)


def _fd_second(x, dt):
    return (x[2:] - 2 * x[1:-1] + x[:-2]) / dt**2


def newton_terms(traj: Trajectory, sf: SnapshotFields, force_sign: float = 1.0):
    """Interior FD acceleration and model acceleration along ``traj``.

    For position-dependent mass both sides are ``d(m v)/dt / m``.
    """
    _require_completed(traj)
    if traj.times.size < 3:
        raise ValueError("need at least 3 trajectory points")
    _check_nodes(traj, sf)
    ctx, dt = sf.ctx, sf.history.dt
    x = traj.unwrapped()
    inner = slice(1, -1)
    if ctx.model in ("schrodinger", "pauli"):
        fd = _fd_second(x, dt)
        model = force_sign * _curve_samples(traj, sf, "accel")[inner]
    elif ctx.model == "nonconstant_mass":
        g = sf.grid
        xm = 0.5 * (x[1:] + x[:-1])
        mom = lagrange_interp(ctx.mass, g, xm) * np.diff(x) / dt
        m_i = lagrange_interp(ctx.mass, g, x[inner])
        fd = np.diff(mom) / dt / m_i
        v = traj.v[inner]
        dOm = _curve_samples(traj, sf, "dOmega")[inner]
        m_x = _curve_samples(traj, sf, "m_x")[inner]
        model = force_sign * (-dOm + 0.5 * v**2 * m_x) / m_i
    elif ctx.model == "klein_gordon":
        fd = _fd_second(x, dt)
        c = ctx.consts.c
        S_t = _curve_samples(traj, sf, "S_t")[inner]
        W_x = _curve_samples(traj, sf, "W_x")[inner]
        W_t = _curve_samples(traj, sf, "W_t")[inner]
        v = traj.v[inner]
        model = -force_sign * c**4 / (2 * S_t**2) * (W_x + v * W_t / c**2)
    else:
        raise ValueError(f"no Newton law for model {ctx.model!r}")
    return fd, model


def newton_residual(traj: Trajectory, sf: SnapshotFields, force_sign: float = 1.0) -> float:
    """Max over interior points of ``|FD acceleration - model acceleration|``."""
    fd, model = newton_terms(traj, sf, force_sign)
    return float(np.max(np.abs(fd - model)))


def pauli_dR_dt_residual(traj: Trajectory, sf: SnapshotFields, coupling: bool = True) -> float:
    """Max over interior points of ``|dR_c/dt (centred FD) - rhs|`` along a
    Pauli component trajectory, where ``rhs`` is the kinetic term plus (if
    ``coupling``) the magnetic exchange with the other component."""
    if sf.ctx.model != "pauli":
        raise ValueError("pauli_dR_dt_residual needs a pauli history")
    _require_completed(traj)
    _check_nodes(traj, sf)
    dt = sf.history.dt
    R = traj.R
    rate = _curve_samples(traj, sf, "dlogR_rate")
    if coupling:
        rate = rate + _curve_samples(traj, sf, "pauli_coupling")
    lhs = (R[2:] - R[:-2]) / (2 * dt)
    return float(np.max(np.abs(lhs - R[1:-1] * rate[1:-1])))


# -- Weyl characteristic forms


def weyl_form_terms(traj: Trajectory, sf: SnapshotFields, family: str, mass_sign: float = 1.0):
    """Residuals of the two characteristic-form identities for ``family`` on
    ``traj`` and their common scale (the largest term magnitude).

    The per-component energy form is divided by ``hbar`` so both forms carry
    the units of ``R / time``.

    The curve is assumed to move along the family's characteristic for its
    component: ``+-c sin chi`` (per_component) or ``+-c`` (full_system).
    Along-curve derivatives are centred differences; returned arrays are
    interior points only.  ``mass_sign=-1`` flips the mass terms (fault
    injection).
    """
    if sf.ctx.model != "weyl":
        raise ValueError("weyl forms need a weyl history")
    _require_completed(traj)
    consts, dt = sf.ctx.consts, sf.history.dt
    hb, c, m = consts.hbar, consts.c, consts.m
    mc2 = mass_sign * m * c**2
    s = lambda name, comp=0: _curve_samples(traj, sf, name, comp)  # noqa: E731
    R1, R2 = np.exp(s("logR", 0)), np.exp(s("logR", 1))
    R1x, R2x = s("R_x", 0), s("R_x", 1)
    S1x, S2x = s("S_x", 0), s("S_x", 1)
    sn, co = s("sin_chi"), s("cos_chi")
    psi1 = s("psi_re", 0) + 1j * s("psi_im", 0)
    psi2 = s("psi_re", 1) + 1j * s("psi_im", 1)
    S1 = hb * np.unwrap(np.angle(psi1))
    S2 = hb * np.unwrap(np.angle(psi2))

    def ddt(f):
        return (f[2:] - f[:-2]) / (2 * dt)

    R1d, R2d, S1d, S2d = ddt(R1), ddt(R2), ddt(S1), ddt(S2)
    i = slice(1, -1)
    R1, R2, R1x, R2x, S1x, S2x, sn, co = (a[i] for a in (R1, R2, R1x, R2x, S1x, S2x, sn, co))
    up = traj.component == 0
    if family == "per_component":
        if up:
            terms = [[R1d - R2d, c / hb * co * R1 * S1x, c / hb * co * R2 * S2x],
                     [R1 * S1d, -R2 * S2d, mc2 * (R1 + R2), -hb * c * co * (R1x + R2x)]]
        else:
            terms = [[R1d + R2d, -c / hb * co * R1 * S1x, c / hb * co * R2 * S2x],
                     [R1 * S1d, R2 * S2d, mc2 * (R1 - R2), -hb * c * co * (R2x - R1x)]]
        terms[1] = [t / hb for t in terms[1]]
    elif family == "full_system":
        if up:
            terms = [[hb * sn * R1d, -hb * R2d, R1 * co * (S1d + mc2)],
                     [hb * R1d, -hb * sn * R2d, R2 * co * (S2d - mc2)]]
        else:
            terms = [[hb * sn * R1d, hb * R2d, R1 * co * (S1d + mc2)],
                     [-hb * R1d, -hb * sn * R2d, R2 * co * (S2d - mc2)]]
    else:
        raise ValueError(f"unknown weyl family {family!r}")
    res = [np.sum(t, axis=0) for t in terms]
    # physical floor so that identically vanishing forms do not divide 0 by 0
    amp = float(np.max(R1 + R2))
    rate = abs(mc2) / hb + c * float(np.max(np.abs(S1x) + np.abs(S2x))) / hb \
        + c * float(np.max(np.abs(R1x) + np.abs(R2x))) / max(amp, 1e-300)
    floor = amp * rate * (hb if family == "full_system" else 1.0)
    scale = max(float(max(np.max(np.abs(np.array(t))) for t in terms)), floor)
    return res, scale


def weyl_form_residual(trajs, sf: SnapshotFields, family: str, mass_sign: float = 1.0) -> float:
    """Largest residual of the family's characteristic forms over ``trajs``,
    relative to the largest single term anywhere in the ensemble."""
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    worst, scale = 0.0, 0.0
    for t in trajs:
        res, sc = weyl_form_terms(t, sf, family, mass_sign)
        worst = max(worst, max(float(np.max(np.abs(r))) for r in res))
        scale = max(scale, sc)
    return worst / scale if scale > 0 else 0.0
