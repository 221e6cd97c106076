"""Verification suite: every along-trajectory and field identity as a residual.

Each ``check_*`` function is a pure function of a snapshot history (plus
trajectories where needed) returning a :class:`CheckResult`.  The registry
:data:`CHECKS` binds checks to bundled reference scenarios with tolerances,
convergence orders and a documented fault injection; :func:`run_suite` runs a
selection and returns a :class:`DiagnosticsReport`.

Residuals are L-infinity norms off node masks.  Tolerances are relative to a
characteristic scale of the scenario where the residual carries units.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .characteristics import (ModelContext, SnapshotFields, action_along_trajectory,
                              density_along_trajectory, integrate_ensemble, newton_residual,
                              halo_mask, pauli_dR_dt_residual, velocity_klein_gordon,
                              velocity_weyl_per_component, weyl_form_residual,
                              weyl_phase_angle)
from .errors import InsufficientHistory
from .fields import ComplexField, KGState, SpinorField, spectral_derivative
from .propagators import SnapshotHistory, kg_energy, propagate

PASS, FAIL, SKIP = "PASS", "FAIL", "SKIP"


class Skipped(Exception):
    """A check's precondition does not hold for this history."""


@dataclass
class CheckResult:
    residual: float
    details: dict = field(default_factory=dict)


@dataclass
class ReportEntry:
    name: str
    residual: float
    tolerance: float
    status: str
    runtime: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status != FAIL

    def to_dict(self) -> dict:
        residual = None if math.isnan(self.residual) else self.residual
        return {"name": self.name, "residual": residual, "tolerance": self.tolerance,
                "status": self.status, "runtime": self.runtime, "details": self.details}


@dataclass
class DiagnosticsReport:
    entries: list[ReportEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failed(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": [e.to_dict() for e in self.entries]}


# --------------------------------------------------------------------------
# helpers


def _states_map(history: SnapshotHistory, fn) -> SnapshotHistory:
    """New history with ``fn(i, values) -> values`` applied to every component."""
    out = []
    for i, s in enumerate(history.states):
        if isinstance(s, KGState):
            out.append(KGState(ComplexField(s.grid, s.t, fn(i, s.psi.values)),
                               ComplexField(s.grid, s.t, fn(i, s.dpsi_dt.values))))
        elif isinstance(s, SpinorField):
            out.append(SpinorField(tuple(ComplexField(c.grid, c.t, fn(i, c.values))
                                         for c in s.components)))
        else:
            out.append(ComplexField(s.grid, s.t, fn(i, s.values)))
    return SnapshotHistory(history.model, history.dt, out, history.eps_node, history.hbar)


def scale_snapshot(history: SnapshotHistory, index: int, factor: float) -> SnapshotHistory:
    """Fault injection: multiply one snapshot by ``factor``."""
    return _states_map(history, lambda i, v: v * factor if i == index else v)


def rotate_snapshot(history: SnapshotHistory, index: int, angle: float) -> SnapshotHistory:
    """Fault injection: multiply one snapshot by ``exp(i angle)``."""
    return _states_map(history, lambda i, v: v * np.exp(1j * angle) if i == index else v)


def _linf(arrays) -> float:
    vals = [np.nanmax(np.abs(a)) for a in arrays if np.any(np.isfinite(a))]
    return float(max(vals)) if vals else 0.0


def _interior(history):
    if len(history) < 3:
        raise InsufficientHistory("check needs at least 3 snapshots")
    return range(1, len(history) - 1)


def _mass(sf: SnapshotFields):
    return sf.ctx.mass if sf.ctx.mass is not None else sf.ctx.consts.m


# --------------------------------------------------------------------------
# structural checks


def density_current(history: SnapshotHistory, ctx: ModelContext, i: int):
    """Conserved density and current of the model at snapshot ``i``."""
    g, consts = history.grid, ctx.consts
    hb = consts.hbar
    d = lambda f: spectral_derivative(f, g, 1)  # noqa: E731
    s = history.states[i]
    if ctx.model in ("schrodinger", "nonconstant_mass"):
        m = ctx.mass if ctx.mass is not None else consts.m
        psi = s.values
        return np.abs(psi) ** 2, hb * np.imag(np.conj(psi) * d(psi)) / m
    if ctx.model == "pauli":
        rho = sum(np.abs(c.values) ** 2 for c in s.components)
        j = sum(hb * np.imag(np.conj(c.values) * d(c.values)) for c in s.components) / consts.m
        return rho, j
    if ctx.model == "klein_gordon":
        psi, pt = s.psi.values, s.dpsi_dt.values
        # d/dt(R^2 S_t) - c^2 d/dx(R^2 S') = 0, written as rho_t + j_x = 0
        return hb * np.imag(np.conj(psi) * pt), -consts.c**2 * hb * np.imag(np.conj(psi) * d(psi))
    if ctx.model == "weyl":
        p1, p2 = (c.values for c in s.components)
        return np.abs(p1) ** 2 + np.abs(p2) ** 2, 2 * consts.c * np.real(np.conj(p1) * p2)
    raise ValueError(ctx.model)


def _node_union(history, i):
    comps = 2 if history.is_spinor else 1
    if history.is_spinor:
        rho = sum(np.abs(history.field(i, c).values) ** 2 for c in range(comps))
        return rho < (history.eps_node**2) * rho.max()
    return history.polar(i, 0).node_mask


def check_continuity(history: SnapshotHistory, ctx: ModelContext) -> CheckResult:
    """``d rho/dt + d j/dx`` (centred in time, spectral in space), L-inf."""
    res = []
    for i in _interior(history):
        rp, _ = density_current(history, ctx, i - 1)
        rn, _ = density_current(history, ctx, i + 1)
        _, j = density_current(history, ctx, i)
        r = (rn - rp) / (2 * history.dt) + spectral_derivative(j, history.grid, 1)
        mask = _node_union(history, i - 1) | _node_union(history, i) | _node_union(history, i + 1)
        res.append(np.where(mask, np.nan, r))
    return CheckResult(_linf(res))


def qhj_residual_field(sf: SnapshotFields, i: int) -> np.ndarray:
    """``S_t + S'^2/2m + W`` at snapshot ``i`` (centred ``S_t``)."""
    if sf.ctx.model not in ("schrodinger", "nonconstant_mass"):
        raise ValueError("QHJ residual is defined for schrodinger and nonconstant_mass")
    S_x = sf.get("S_x", i)
    return sf.get("S_t_fd", i) + S_x**2 / (2 * _mass(sf)) + sf.get("W", i)


def check_qhj_residual(sf: SnapshotFields) -> CheckResult:
    return CheckResult(_linf(qhj_residual_field(sf, i) for i in _interior(sf.history)))


def check_norm_liouville(history: SnapshotHistory, ctx: ModelContext) -> CheckResult:
    """Relative drift of the norm (energy functional for Klein-Gordon)."""
    if ctx.model == "klein_gordon":
        vals = np.array([kg_energy(s, ctx.consts) for s in history.states])
        kind = "kg_energy"
    else:
        vals = history.norms() ** 2
        kind = "norm"
    return CheckResult(float(np.max(np.abs(vals / vals[0] - 1))), {"functional": kind})


def lagrangian_density(R, S_x, R_xx, R_t, S_t, V, m, hbar, coeff=None):
    """Polar Lagrangian density ``coeff R R'' - R^2 S'^2/2m + i hbar R R_t
    - R^2 S_t - R^2 V``.  The default ``coeff = hbar^2/2m`` makes its
    Euler-Lagrange equations the continuity and QHJ equations."""
    if coeff is None:
        coeff = hbar**2 / (2 * m)
    return (coeff * R * R_xx - R**2 * S_x**2 / (2 * m) + 1j * hbar * R * R_t
            - R**2 * S_t - R**2 * V)


def hamiltonian_density(R, R_x, R_xx, S_x, S_xx, V, m, hbar):
    """Hamiltonian density with the momenta ``Pi_R = i hbar R`` and
    ``Pi_S = -R^2`` substituted."""
    Pi_R, Pi_S = 1j * hbar * R, -(R**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = hbar**2 / (2 * m) * R_xx / R
    return ((q + S_x**2 / (2 * m) - V) * Pi_S + (R_x * S_x / m - R * S_xx / m) * Pi_R
            - hbar**2 / (2 * m) * R * R_xx - 1j * hbar * R * R_x * S_x / m)


def _partial(f, args: dict, name: str):
    # L is at most quadratic in each argument, so a centred difference is exact
    a = args[name]
    h = 1e-3 * (1 + np.abs(a))
    up, dn = dict(args), dict(args)
    up[name], dn[name] = a + h, a - h
    return (f(**up) - f(**dn)) / (2 * h)


def euler_lagrange_residuals(sf: SnapshotFields, i: int, coeff=None):
    """``(E_S, E_R)`` of the polar Lagrangian at snapshot ``i``; partial
    derivatives are finite differences in the Lagrangian's arguments."""
    h, g = sf.history, sf.grid
    consts = sf.ctx.consts
    m, hb = _mass(sf), consts.hbar

    def args_at(j):
        p = h.polar(j)
        # S' from the current so that R^2 S' stays smooth where R underflows
        psi = h.field(j).values
        r2 = np.abs(psi) ** 2
        cur = np.imag(np.conj(psi) * spectral_derivative(psi, g, 1))
        S_x = hb * np.divide(cur, r2, out=np.zeros_like(r2), where=r2 > 0)
        return dict(R=p.R, S_x=S_x, R_xx=spectral_derivative(p.R, g, 2),
                    R_t=sf.get("R_t_fd", j), S_t=np.nan_to_num(sf.get("S_t_fd", j)),
                    V=sf.ctx.V)

    def L(**kw):
        return lagrangian_density(m=m, hbar=hb, coeff=coeff, **kw)

    A0 = args_at(i)
    Am, Ap = args_at(i - 1), args_at(i + 1)
    # neighbours only enter through the momenta, which depend on R alone
    for A in (Am, Ap):
        A["R_t"] = np.zeros_like(A["R"])
        A["S_t"] = np.zeros_like(A["R"])
    dt2 = 2 * h.dt
    E_S = -(_partial(L, Ap, "S_t") - _partial(L, Am, "S_t")) / dt2 \
        - spectral_derivative(_partial(L, A0, "S_x"), g, 1)
    E_R = _partial(L, A0, "R") - (_partial(L, Ap, "R_t") - _partial(L, Am, "R_t")) / dt2 \
        + spectral_derivative(_partial(L, A0, "R_xx"), g, 2)
    return E_S.real, E_R


def check_euler_lagrange(sf: SnapshotFields, coeff=None) -> CheckResult:
    """L-inf difference between the Euler-Lagrange residuals and the direct
    continuity and QHJ residuals (``E_S`` vs continuity, ``-E_R/2R`` vs QHJ)."""
    h = sf.history
    d_cont, d_qhj = [], []
    for i in _interior(h):
        E_S, E_R = euler_lagrange_residuals(sf, i, coeff)
        rp, _ = density_current(h, sf.ctx, i - 1)
        rn, _ = density_current(h, sf.ctx, i + 1)
        _, j = density_current(h, sf.ctx, i)
        cont = (rn - rp) / (2 * h.dt) + spectral_derivative(j, h.grid, 1)
        p = h.polar(i)
        good = ~p.node_mask & (p.R > 1e-3 * p.R.max())
        d_cont.append(np.where(good, E_S - cont, np.nan))
        with np.errstate(divide="ignore", invalid="ignore"):
            d_qhj.append(np.where(good, -E_R / (2 * p.R) - qhj_residual_field(sf, i), np.nan))
    a, b = _linf(d_cont), _linf(d_qhj)
    return CheckResult(max(a, b), {"continuity_difference": a, "qhj_difference": b})


def check_hamiltonian_stationarity(sf: SnapshotFields) -> CheckResult:
    """Relative drift of the spatial integral of the Hamiltonian density."""
    h, g = sf.history, sf.grid
    vals = []
    for i in range(len(h)):
        p = h.polar(i)
        R = p.R
        Hd = hamiltonian_density(R, spectral_derivative(R, g, 1), spectral_derivative(R, g, 2),
                                 np.nan_to_num(p.dS(1)), np.nan_to_num(p.dS(2)), sf.ctx.V,
                                 _mass(sf), sf.ctx.consts.hbar)
        Hd = np.where(p.node_mask, 0.0, Hd)
        vals.append(g.integrate(Hd.real) + 1j * g.integrate(Hd.imag))
    vals = np.array(vals)
    return CheckResult(float(np.max(np.abs(vals - vals[0])) / abs(vals[0])),
                       {"H0": complex(vals[0]).real})


def check_second_derivative_consistency(sf: SnapshotFields, energy_scale: float,
                                        cond: float = 0.05) -> CheckResult:
    """``R Sigma - R''`` pointwise, the time-constancy of ``R''/(R Sigma)``
    and of ``r/(R S'')`` (``r = 2m(R_t + R' S'/m)``, equal to ``-1``).

    Ratios are only evaluated where they are well conditioned: ``R`` above
    1e-3 of its maximum and the denominator above ``cond`` of its maximum.
    Raises :class:`Skipped` when ``R''`` and ``Sigma`` vanish identically.
    """
    h = sf.history
    consts = sf.ctx.consts
    m, hb = _mass(sf), consts.hbar
    ident, ratio_r, ratio_s = [], {}, {}
    rpp_max = 0.0
    for i in _interior(h):
        p = h.polar(i)
        Rpp = p.R * p.laplacian_R_over_R()
        S_x = p.dS(1)
        Sigma = (2 * m / hb**2) * (sf.get("S_t_fd", i) + S_x**2 / (2 * m) + sf.ctx.V)
        rpp_max = max(rpp_max, float(np.nanmax(np.abs(Rpp))))
        ident.append(p.R * Sigma - Rpp)
        big = ~p.node_mask & (p.R > 1e-3 * p.R.max())
        RS = p.R * Sigma
        ok = big & (np.abs(RS) > cond * np.nanmax(np.abs(RS)))
        ratio_r[i] = np.where(ok, Rpp / np.where(ok, RS, 1.0), np.nan)
        S_xx = p.dS(2)
        r = 2 * m * (sf.get("R_t_fd", i) + p.dR(1) * S_x / m)
        den = p.R * S_xx
        scale = np.nanmax(np.abs(np.where(big, S_xx, np.nan))) if big.any() else 0.0
        # S'' at rounding level (real stationary states): the S'' ratio is undefined
        if scale > 1e-6 * 2 * m * energy_scale / hb:
            ok = big & (np.abs(S_xx) > cond * scale)
            ratio_s[i] = np.where(ok, r / np.where(ok, den, 1.0), np.nan)
    if rpp_max < 1e-12:
        raise Skipped("R'' and Sigma vanish identically (precondition R Sigma != 0 fails)")
    identity = _linf(ident) / rpp_max

    def drift(ratios):
        if not ratios:
            return 0.0
        keys = sorted(ratios)
        ref = ratios[keys[0]]
        return _linf(ratios[k] - ref for k in keys)

    drift_r, drift_s = drift(ratio_r), drift(ratio_s)
    details = {"identity": identity, "amplitude_ratio_drift": drift_r,
               "phase_ratio_drift": drift_s}
    if ratio_s:
        details["phase_ratio_value"] = float(np.nanmedian(next(iter(ratio_s.values()))))
    else:
        details["phase_ratio"] = "skipped: S'' vanishes"
    return CheckResult(max(identity, drift_r, drift_s), details)


# --------------------------------------------------------------------------
# trajectory checks


def check_guiding_equation(sf: SnapshotFields, trajs, oracle: str, mass_factor: float = 1.0,
                           **params) -> CheckResult:
    """Guiding-equation oracles.

    ``plane_wave``: ``|S'/m - hbar k/m|`` over every defined point of every
    snapshot, relative to ``hbar k/m``; the field is evaluated with mass
    ``mass_factor m``.  ``free_gaussian``: relative error of
    ``x(t) = x0 sigma(t)/sigma0`` over the ensemble ``trajs``.
    """
    consts = sf.ctx.consts
    if oracle == "plane_wave":
        target = consts.hbar * params["k"] / consts.m
        err = [sf.get("S_x", i) / (consts.m * mass_factor) - target
               for i in range(len(sf.history))]
        return CheckResult(_linf(err) / abs(target))
    if oracle == "free_gaussian":
        s0 = params["sigma0"]
        worst = 0.0
        for t in _completed(trajs):
            sig = s0 * np.sqrt(1 + (consts.hbar * t.times / (2 * consts.m * s0**2)) ** 2)
            law = t.x0 * sig / s0
            err = np.abs(t.unwrapped() - law) / np.maximum(np.abs(law), 1e-12)
            worst = max(worst, float(np.max(err)))
        return CheckResult(worst)
    raise ValueError(f"unknown guiding oracle {oracle!r}")


def _completed(trajs):
    done = [t for t in trajs if t.completed]
    if not done:
        raise Skipped("no completed trajectories")
    return done


def check_density_reconstruction(sf: SnapshotFields, trajs, exponent_sign: float = 1.0,
                                 eulerian: bool = False) -> CheckResult:
    """Largest relative deviation of the reconstructed ``R`` from ``|psi|``
    interpolated along the curve.  ``eulerian`` compares against ``|psi|`` at
    the fixed seed position instead (fault injection)."""
    done = _completed(trajs)
    worst = 0.0
    for t in done:
        direct = t.R
        if eulerian:
            fixed = replace(t, positions=np.full_like(t.positions, t.x0))
            direct = np.exp(sf.along(fixed, "logR"))
        rec = density_along_trajectory(t, sf, exponent_sign)
        worst = max(worst, float(np.max(np.abs(rec / direct - 1))))
    return CheckResult(worst, {"trajectories": len(done)})


def check_action(sf: SnapshotFields, trajs, kinetic_sign: float = 1.0) -> CheckResult:
    done = _completed(trajs)
    hb = sf.ctx.consts.hbar
    worst = max(float(np.max(np.abs(action_along_trajectory(t, sf, kinetic_sign) - t.S))) / hb
                for t in done)
    return CheckResult(worst)


def check_newton(sf: SnapshotFields, trajs, force_sign: float = 1.0) -> CheckResult:
    done = _completed(trajs)
    return CheckResult(max(newton_residual(t, sf, force_sign) for t in done),
                       {"trajectories": len(done)})


def check_pauli_density(sf: SnapshotFields, trajs, coupling: bool = True) -> CheckResult:
    """Largest ``dR/dt`` residual relative to the largest ``|dR/dt|``."""
    done = _completed(trajs)
    dt = sf.history.dt
    scale = max(float(np.max(np.abs(np.diff(t.R)))) / dt for t in done)
    res = max(pauli_dR_dt_residual(t, sf, coupling) for t in done)
    return CheckResult(res / scale, {"absolute": res})


def s_equation_residuals(sf: SnapshotFields, trajs) -> np.ndarray:
    """Integro-differential S-equation residual at the last interior point of
    every completed trajectory.

    ``R''/R`` is rebuilt from the seed data ``a = (ln R)'``, ``b = (ln R)''``
    and the history integrals ``I3 = int S''' dt``, ``I4 = int S'''' dt`` as
    ``(b - I4/2m) + (a - I3/2m)^2``.
    """
    consts = sf.ctx.consts
    m, hb = consts.m, consts.hbar
    dt = sf.history.dt
    out = []
    for t in _completed(trajs):
        k = t.times.size
        if k < 3:
            raise InsufficientHistory("S-equation needs at least 3 snapshots")
        j = k - 2
        S3 = sf.along(t, "S_xxx")[: j + 1]
        S4 = sf.along(t, "S_xxxx")[: j + 1]
        I3 = float(np.sum(0.5 * (S3[1:] + S3[:-1])) * dt)
        I4 = float(np.sum(0.5 * (S4[1:] + S4[:-1])) * dt)
        a = sf.along(t, "dlogR1")[0]
        b = sf.along(t, "dlogR2")[0]
        rppr = (b - I4 / (2 * m)) + (a - I3 / (2 * m)) ** 2
        S_t = sf.along(t, "S_t_fd")[j]
        S_x = sf.along(t, "S_x")[j]
        V = sf.along(t, "W")[j] + hb**2 / (2 * m) * sf.along(t, "RppR")[j]
        out.append(S_t + S_x**2 / (2 * m) + V - hb**2 / (2 * m) * rppr)
    return np.array(out)


def check_s_equation_residual(sf: SnapshotFields, trajs, energy_scale: float) -> CheckResult:
    if len(_completed(trajs)) < 8:
        raise Skipped("S-equation check needs at least 8 completed trajectories")
    res = s_equation_residuals(sf, trajs)
    return CheckResult(float(np.max(np.abs(res))) / energy_scale, {"energy_scale": energy_scale})


def check_weyl_characteristic_forms(sf: SnapshotFields, trajs_by_component, family: str,
                                    mass_sign: float = 1.0) -> CheckResult:
    worst = 0.0
    for trajs in trajs_by_component:
        worst = max(worst, weyl_form_residual(_completed(trajs), sf, family, mass_sign))
    return CheckResult(worst, {"family": family})


def kg_flag_fractions(sf: SnapshotFields, clamp: bool = False, unsigned: bool = False,
                      velocity: str = "klein_gordon"):
    """Fractions of defined points with ``|v| > c`` and with density of the
    opposite sign to the total charge, over all snapshots."""
    consts = sf.ctx.consts
    h = sf.history
    n_def = n_sup = n_neg = 0
    for i in range(len(h)):
        p = h.polar(i)
        S_t = sf.get("S_t", i)
        vf = velocity_klein_gordon(p, S_t, consts)
        v = vf.v if velocity == "klein_gordon" else p.dS(1) / consts.m
        if clamp:
            v = np.clip(v, -consts.c, consts.c)
        rho = p.R**2 * S_t
        if unsigned:
            rho = np.abs(rho)
        total = h.grid.integrate(np.nan_to_num(rho))
        d = vf.defined_mask
        n_def += int(d.sum())
        n_sup += int((d & (np.abs(np.nan_to_num(v)) > consts.c)).sum())
        n_neg += int((d & (np.sign(rho) == -np.sign(total)) & (rho != 0)).sum())
    return n_sup / max(n_def, 1), n_neg / max(n_def, 1)


def check_coherent_state_acceleration(sf: SnapshotFields, trajs, omega: float, x0: float,
                                      force_sign: float = 1.0) -> CheckResult:
    """Finite-difference acceleration of every trajectory against
    ``-omega^2 x_c(t)`` with ``x_c = x0 cos(omega t)``, relative to
    ``omega^2 |x0|``.  The same law for every seed means the acceleration is
    independent of the offset from the packet centre."""
    done = _completed(trajs)
    dt = sf.history.dt
    scale = omega**2 * abs(x0)
    worst = 0.0
    for t in done:
        x = t.unwrapped()
        acc = (x[2:] - 2 * x[1:-1] + x[:-2]) / dt**2
        law = -force_sign * omega**2 * x0 * np.cos(omega * t.times[1:-1])
        worst = max(worst, float(np.max(np.abs(acc - law))) / scale)
    return CheckResult(worst, {"trajectories": len(done)})


def check_weyl_velocities(sf: SnapshotFields, mode: str, fault: bool = False,
                          trajs_by_component=()) -> CheckResult:
    """Weyl guidance laws.

    ``speeds``: per-component fields satisfy ``|v| <= c`` and ``v2 = -v1``
    at every defined point of every snapshot (residual in units of ``c``).
    ``zero_velocity``: the first snapshot has ``S1 - S2 = (2n+1) h/4``
    everywhere, so ``v`` must vanish (residual ``max |v|/c``).
    ``full_lines``: full-system trajectories are the lines ``x0 +- c t``
    (residual in units of the box length).
    """
    consts, h = sf.ctx.consts, sf.history
    c = consts.c
    if mode == "speeds":
        worst = 0.0
        for i in range(len(h)):
            p1, p2 = h.polar(i, 0), h.polar(i, 1)
            if fault:
                v1, v2 = p1.dS(1) / consts.m, p2.dS(1) / consts.m
                d = ~(p1.node_mask | p2.node_mask)
            else:
                f1, f2 = velocity_weyl_per_component((p1, p2), consts)
                v1, v2, d = f1.v, f2.v, f1.defined_mask
            over = np.maximum(np.abs(v1[d]) - c, 0.0)
            worst = max(worst, float(np.max(over, initial=0.0)),
                        float(np.max(np.abs(v1[d] + v2[d]), initial=0.0)))
        return CheckResult(worst / c)
    if mode == "zero_velocity":
        p1, p2 = h.polar(0, 0), h.polar(0, 1)
        sin_chi, cos_chi = weyl_phase_angle((p1, p2))
        v = c * (cos_chi if fault else sin_chi)
        d = ~halo_mask(p1.node_mask | p2.node_mask)
        return CheckResult(float(np.max(np.abs(v[d]))) / c)
    if mode == "full_lines":
        worst = 0.0
        for comp, trajs in enumerate(trajs_by_component):
            sign = 1.0 if comp == 0 else -1.0
            for t in _completed(trajs):
                dev = t.unwrapped() - (t.x0 + sign * c * t.times)
                worst = max(worst, float(np.max(np.abs(dev))))
        return CheckResult(worst / sf.grid.length)
    raise ValueError(f"unknown Weyl velocity mode {mode!r}")


def kg_speed_error(sf: SnapshotFields, k: float, velocity: str = "klein_gordon") -> float:
    """Largest ``|v - c^2 k/omega| / c`` for a single Klein-Gordon mode."""
    consts, h = sf.ctx.consts, sf.history
    omega = consts.c * math.hypot(k, consts.m * consts.c / consts.hbar)
    target = consts.c**2 * k / omega
    worst = 0.0
    for i in range(len(h)):
        p = h.polar(i)
        vf = velocity_klein_gordon(p, sf.get("S_t", i), consts)
        v = vf.v if velocity == "klein_gordon" else p.dS(1) / consts.m
        worst = max(worst, float(np.max(np.abs(v[vf.defined_mask] - target), initial=0.0)))
    return worst / consts.c


# --------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class CheckSpec:
    """One registered check.

    ``criterion`` is ``below`` (pass if residual < tolerance) or ``above``
    (pass if residual > tolerance, for existence claims).  ``order`` is the
    expected dt convergence order; the check then also runs at ``dt/2`` and
    requires ``log2(r(dt)/r(dt/2)) >= order - 0.2`` unless ``r(dt)`` is below
    ``order_floor``.
    """

    name: str
    scenario: str
    tolerance: float
    fault: str
    order: float | None = None
    criterion: str = "below"
    order_floor: float = 0.0
    params: tuple = ()

    def __post_init__(self):
        if self.criterion not in ("below", "above"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @property
    def key(self) -> str:
        return f"{self.name}[{self.scenario}]"


class Workspace:
    """Caches histories, field caches and trajectories per scenario."""

    def __init__(self, scenarios: dict):
        self.scenarios = scenarios
        self._hist: dict = {}
        self._sf: dict = {}
        self._traj: dict = {}

    def scenario(self, name, refine=1):
        s = self.scenarios[name]
        return s if refine == 1 else s.with_dt(refine)

    def history(self, name, refine=1):
        key = (name, refine)
        if key not in self._hist:
            self._hist[key] = propagate(self.scenario(name, refine))
        return self._hist[key]

    def fields(self, name, refine=1, history=None):
        scen = self.scenario(name, refine)
        if history is not None:
            return SnapshotFields(history, ModelContext.from_scenario(scen))
        key = (name, refine)
        if key not in self._sf:
            self._sf[key] = SnapshotFields(self.history(name, refine),
                                           ModelContext.from_scenario(scen))
        return self._sf[key]

    def trajectories(self, name, refine=1, component=0, sf=None):
        from .scenario_io import resolve_seeds

        cached = sf is None
        key = (name, refine, component)
        if cached and key in self._traj:
            return self._traj[key]
        sf = sf if sf is not None else self.fields(name, refine)
        scen = self.scenario(name, refine)
        seeds = [x for x, c in resolve_seeds(scen, sf.history.states[0]) if c == component]
        trajs = integrate_ensemble(sf.history, sf.ctx, seeds, component, sf)
        if cached:
            self._traj[key] = trajs
        return trajs


def energy_scale(scenario) -> float:
    """``hbar^2 / (2 m l^2)`` with ``l`` the packet width, inverse wave number
    or oscillator length."""
    c, spec = scenario.constants, scenario.initial_state
    m = c.m if c.m > 0 else 1.0
    if spec.kind in ("gaussian", "spinor_gaussian", "kg_gaussian"):
        ell = spec.sigma0
    elif spec.kind in ("plane_wave", "spinor_plane_wave") and spec.k != 0:
        ell = 1 / abs(spec.k)
    elif scenario.potential.kind == "harmonic" and scenario.potential.omega > 0:
        ell = math.sqrt(c.hbar / (m * scenario.potential.omega))
    else:
        ell = 1.0
    return c.hbar**2 / (2 * m * ell**2)


def _run_one(spec: CheckSpec, ws: Workspace, refine: int, fault: bool) -> CheckResult:
    name, sc = spec.name, spec.scenario
    params = dict(spec.params)
    scen = ws.scenario(sc, refine)
    if name == "check_continuity":
        h = ws.history(sc, refine)
        if fault:
            h = scale_snapshot(h, len(h) // 2, 1.01)
        return check_continuity(h, ModelContext.from_scenario(scen))
    if name == "check_norm_liouville":
        h = ws.history(sc, refine)
        if fault:
            h = scale_snapshot(h, len(h) // 2, 1.01)
        return check_norm_liouville(h, ModelContext.from_scenario(scen))
    if name == "check_qhj_residual":
        h = ws.history(sc, refine)
        sf = ws.fields(sc, refine, rotate_snapshot(h, len(h) // 2, 0.01)) if fault \
            else ws.fields(sc, refine)
        r = check_qhj_residual(sf)
        return CheckResult(r.residual / energy_scale(scen), r.details)
    if name == "check_second_derivative_consistency":
        h = ws.history(sc, refine)
        sf = ws.fields(sc, refine, rotate_snapshot(h, len(h) // 2, 0.01)) if fault \
            else ws.fields(sc, refine)
        return check_second_derivative_consistency(sf, energy_scale(scen))
    if name == "check_euler_lagrange":
        sf = ws.fields(sc, refine)
        coeff = scen.constants.hbar**2 / scen.constants.m if fault else None
        return check_euler_lagrange(sf, coeff)
    if name == "check_hamiltonian_stationarity":
        h = ws.history(sc, refine)
        sf = ws.fields(sc, refine, scale_snapshot(h, len(h) // 2, 1.01)) if fault \
            else ws.fields(sc, refine)
        return check_hamiltonian_stationarity(sf)
    if name == "check_kg_flags":
        sf = ws.fields(sc, refine)
        mode = params["mode"]
        if mode == "single":
            vel = "schrodinger" if fault else "klein_gordon"
            sup, neg = kg_flag_fractions(sf, velocity=vel)
            speed = kg_speed_error(sf, params["k"], vel)
            return CheckResult(max(sup, neg, speed),
                               {"superluminal": sup, "negative_rho": neg, "speed_error": speed})
        if mode == "superluminal":
            sup, neg = kg_flag_fractions(sf, clamp=fault)
            return CheckResult(sup, {"superluminal": sup, "negative_rho": neg})
        sup, neg = kg_flag_fractions(sf, unsigned=fault)
        return CheckResult(neg, {"superluminal": sup, "negative_rho": neg})

    if name == "check_weyl_velocities" and params["mode"] != "full_lines":
        return check_weyl_velocities(ws.fields(sc, refine), params["mode"], fault)

    # trajectory-based checks
    sf = ws.fields(sc, refine)
    trajs = ws.trajectories(sc, refine, params.get("component", 0))
    if name == "check_guiding_equation":
        factor = 1.1 if fault else 1.0
        if fault:
            ctx = replace(sf.ctx, consts=replace(sf.ctx.consts, m=sf.ctx.consts.m * factor))
            trajs = integrate_ensemble(sf.history, ctx, [t.x0 for t in trajs], 0,
                                       SnapshotFields(sf.history, ctx))
        extra = {k: v for k, v in params.items() if k != "oracle"}
        return check_guiding_equation(sf, trajs, params["oracle"], factor, **extra)
    if name == "check_density_reconstruction":
        if params.get("fault_mode") == "eulerian":
            return check_density_reconstruction(sf, trajs, eulerian=fault)
        return check_density_reconstruction(sf, trajs, -1.0 if fault else 1.0)
    if name == "check_action":
        return check_action(sf, trajs, -1.0 if fault else 1.0)
    if name == "check_newton" and params.get("oracle") == "coherent":
        return check_coherent_state_acceleration(sf, trajs, scen.potential.omega,
                                                 scen.initial_state.x0 - scen.potential.center,
                                                 -1.0 if fault else 1.0)
    if name == "check_newton":
        return check_newton(sf, trajs, -1.0 if fault else 1.0)
    if name == "check_weyl_velocities":
        if fault:
            ctx = replace(sf.ctx, weyl_family="per_component")
            sf = SnapshotFields(sf.history, ctx)
            seeds = [ws.trajectories(sc, refine, c) for c in (0, 1)]
            trajs2 = tuple(integrate_ensemble(sf.history, ctx, [t.x0 for t in tr], c, sf)
                           for c, tr in enumerate(seeds))
        else:
            trajs2 = tuple(ws.trajectories(sc, refine, c) for c in (0, 1))
        return check_weyl_velocities(sf, "full_lines", trajs_by_component=trajs2)
    if name == "check_pauli_density":
        return check_pauli_density(sf, trajs, coupling=not fault)
    if name == "check_s_equation_residual":
        if fault:
            h = rotate_snapshot(sf.history, len(sf.history) - 1, 0.01)
            sf = ws.fields(sc, refine, h)
        return check_s_equation_residual(sf, trajs, energy_scale(scen))
    if name == "check_weyl_characteristic_forms":
        t0 = ws.trajectories(sc, refine, 0)
        t1 = ws.trajectories(sc, refine, 1)
        family = scen.weyl_family
        if params.get("fault_mode") == "family" and fault:
            family = "full_system" if family == "per_component" else "per_component"
            return check_weyl_characteristic_forms(sf, (t0, t1), family)
        return check_weyl_characteristic_forms(sf, (t0, t1), family, -1.0 if fault else 1.0)
    raise ValueError(f"unknown check {name!r}")


def run_check(spec: CheckSpec, ws: Workspace, tol_scale: float = 1.0,
              fault: bool = False) -> ReportEntry:
    t0 = time.perf_counter()
    tol = spec.tolerance * tol_scale
    base = dict(spec.params).get("refine", 1)
    try:
        res = _run_one(spec, ws, base, fault)
    except Skipped as e:
        return ReportEntry(spec.key, float("nan"), tol, SKIP, time.perf_counter() - t0,
                           {"reason": str(e)})
    ok = res.residual < tol if spec.criterion == "below" else res.residual > tol
    details = dict(res.details)
    if np.isnan(res.residual):
        ok = False
    if spec.order is not None and res.residual >= spec.order_floor:
        fine = _run_one(spec, ws, 2 * base, fault)
        observed = math.log2(res.residual / fine.residual) if fine.residual > 0 else math.inf
        details.update(residual_half_dt=fine.residual, observed_order=observed,
                       expected_order=spec.order)
        ok = ok and observed >= spec.order - 0.2
    details["criterion"] = spec.criterion
    if fault:
        details["fault"] = spec.fault
    return ReportEntry(spec.key, float(res.residual), tol, PASS if ok else FAIL,
                       time.perf_counter() - t0, details)


# Tolerances: relative to energy_scale for QHJ/S-equation; relative amplitudes
# for density; absolute (hbar = m = 1 units) elsewhere, as documented in README.
CHECKS: tuple[CheckSpec, ...] = (
    CheckSpec("check_guiding_equation", "plane_wave", 1e-10, "mass scaled by 1.1",
              params=(("oracle", "plane_wave"), ("k", 2 * math.pi * 4 / 40.0))),
    CheckSpec("check_guiding_equation", "free_gaussian", 1e-3, "mass scaled by 1.1",
              params=(("oracle", "free_gaussian"), ("sigma0", 1.0))),
    CheckSpec("check_continuity", "free_gaussian", 1e-4, "mid snapshot scaled by 1.01",
              order=2.0),
    CheckSpec("check_continuity", "eigenstate", 1e-8, "mid snapshot scaled by 1.01"),
    CheckSpec("check_continuity", "kg_gaussian", 1e-3, "mid snapshot scaled by 1.01",
              order=2.0),
    CheckSpec("check_continuity", "weyl_two_mode_full", 1e-4, "mid snapshot scaled by 1.01"),
    CheckSpec("check_qhj_residual", "free_gaussian", 1e-4, "mid snapshot phase-rotated",
              order=2.0),
    CheckSpec("check_qhj_residual", "plane_wave", 1e-8, "mid snapshot phase-rotated"),
    CheckSpec("check_qhj_residual", "eigenstate", 1e-6, "mid snapshot phase-rotated"),
    CheckSpec("check_norm_liouville", "free_gaussian", 1e-10, "mid snapshot scaled by 1.01",
              params=(("refine", 2),)),
    CheckSpec("check_norm_liouville", "sinusoidal_mass", 1e-10, "mid snapshot scaled by 1.01"),
    CheckSpec("check_norm_liouville", "pauli_coupled", 1e-10, "mid snapshot scaled by 1.01"),
    CheckSpec("check_norm_liouville", "kg_gaussian", 1e-10, "mid snapshot scaled by 1.01"),
    CheckSpec("check_norm_liouville", "weyl_two_mode_full", 1e-10,
              "mid snapshot scaled by 1.01"),
    CheckSpec("check_euler_lagrange", "free_gaussian", 1e-6,
              "coefficient hbar^2/m instead of hbar^2/2m"),
    CheckSpec("check_hamiltonian_stationarity", "eigenstate", 1e-8,
              "mid snapshot scaled by 1.01"),
    CheckSpec("check_second_derivative_consistency", "free_gaussian", 1e-3,
              "mid snapshot phase-rotated"),
    CheckSpec("check_second_derivative_consistency", "eigenstate", 1e-6,
              "mid snapshot phase-rotated"),
    CheckSpec("check_second_derivative_consistency", "plane_wave", 1e-6,
              "mid snapshot phase-rotated"),
    CheckSpec("check_density_reconstruction", "free_gaussian", 1e-3, "exponent sign flipped"),
    CheckSpec("check_density_reconstruction", "coherent_state", 1e-3,
              "density read at the fixed seed position", params=(("fault_mode", "eulerian"),)),
    CheckSpec("check_density_reconstruction", "sinusoidal_mass", 1e-3, "exponent sign flipped",
              order=2.0),
    CheckSpec("check_density_reconstruction", "kg_gaussian", 1e-3, "exponent sign flipped",
              order=2.0),
    CheckSpec("check_action", "plane_wave", 1e-4, "kinetic sign flipped"),
    CheckSpec("check_action", "free_gaussian", 1e-4, "kinetic sign flipped"),
    CheckSpec("check_newton", "coherent_state", 1e-3, "force sign flipped",
              params=(("oracle", "coherent"),)),
    CheckSpec("check_newton", "free_gaussian", 1e-4, "force sign flipped", order=2.0),
    CheckSpec("check_newton", "sinusoidal_mass", 1e-2, "force sign flipped", order=2.0),
    CheckSpec("check_newton", "pauli_bz_harmonic", 1e-3, "force sign flipped", order=2.0),
    CheckSpec("check_newton", "kg_gaussian", 1e-3, "force sign flipped", order=2.0),
    CheckSpec("check_pauli_density", "pauli_coupled", 1e-3, "coupling term dropped"),
    CheckSpec("check_s_equation_residual", "free_gaussian_short", 5e-3,
              "last snapshot phase-rotated"),
    CheckSpec("check_s_equation_residual", "plane_wave", 1e-8, "last snapshot phase-rotated"),
    CheckSpec("check_weyl_characteristic_forms", "weyl_massless", 1e-6,
              "forms of the other family", params=(("fault_mode", "family"),)),
    CheckSpec("check_weyl_characteristic_forms", "weyl_two_mode_full", 1e-3,
              "mass sign flipped", order=2.0),
    CheckSpec("check_weyl_characteristic_forms", "weyl_two_mode_per_component", 1e-3,
              "mass sign flipped", order=2.0),
    CheckSpec("check_weyl_velocities", "weyl_two_mode_per_component", 1e-12,
              "nonrelativistic velocity S'/m", params=(("mode", "speeds"),)),
    CheckSpec("check_weyl_velocities", "weyl_zero_velocity", 1e-10,
              "phase angle offset by pi/2", params=(("mode", "zero_velocity"),)),
    CheckSpec("check_weyl_velocities", "weyl_two_mode_full", 1e-10,
              "per-component velocity field", params=(("mode", "full_lines"),)),
    CheckSpec("check_kg_flags", "kg_plane_wave", 1e-10, "nonrelativistic velocity S'/m",
              params=(("mode", "single"), ("k", 2 * math.pi * 5 / 20))),
    CheckSpec("check_kg_flags", "kg_two_mode", 1e-12, "velocity clamped at c",
              criterion="above", params=(("mode", "superluminal"),)),
    CheckSpec("check_kg_flags", "kg_mixed_branch", 1e-12, "density sign dropped",
              criterion="above", params=(("mode", "negative_rho"),)),
)


def check_names() -> list[str]:
    return sorted({c.name for c in CHECKS})


def select_checks(selector: str) -> list[CheckSpec]:
    """``all`` or a comma list of check names or ``name[scenario]`` keys."""
    if selector.strip() == "all":
        return list(CHECKS)
    wanted = [w.strip() for w in selector.split(",") if w.strip()]
    out = []
    for w in wanted:
        hits = [c for c in CHECKS if c.name == w or c.key == w]
        if not hits:
            raise KeyError(w)
        out += [c for c in hits if c not in out]
    return out


def run_suite(specs, scenarios: dict | None = None, tol_scale: float = 1.0,
              inject_fault: bool = False, progress=None) -> DiagnosticsReport:
    """Run ``specs`` over ``scenarios`` (default: the bundled references).
    Entries are ordered by check key."""
    if scenarios is None:
        from .scenario_io import bundled_scenarios

        scenarios = bundled_scenarios()
    ws = Workspace(scenarios)
    report = DiagnosticsReport()
    for spec in sorted(specs, key=lambda c: c.key):
        entry = run_check(spec, ws, tol_scale, inject_fault)
        if progress is not None:
            progress(entry)
        report.entries.append(entry)
    return report


__all__ = [n for n in dir() if n.startswith(("check_", "run_", "Check", "Diagnostics", "Report"))]
__all__ += ["lagrangian_density", "hamiltonian_density", "euler_lagrange_residuals",
            "kg_flag_fractions", "kg_speed_error", "s_equation_residuals", "energy_scale",
            "select_checks", "Workspace", "scale_snapshot", "rotate_snapshot", "density_current"]
