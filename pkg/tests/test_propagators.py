from dataclasses import replace

import numpy as np
import pytest

from conftest import scenario
from quantraj.errors import SolverDiverged
from quantraj.fields import ComplexField, Constants, KGState, SpinorField, UniformGrid
from quantraj.propagators import (ExternalFieldSpec, MassSpec, PotentialSpec, kg_energy,
                                  kg_frequencies, make_kg_stepper, make_nonconstant_mass_stepper,
                                  make_pauli_stepper, make_schrodinger_stepper, make_weyl_stepper,
                                  propagate, reverse_check, run_stepper, step_klein_gordon,
                                  step_nonconstant_mass, step_pauli, step_schrodinger, step_weyl)
from quantraj.scenario_io import gaussian_packet


def gauss(grid, x0=0.0, k0=0.0, sigma=1.0):
    return ComplexField(grid, 0.0, gaussian_packet(grid, x0, k0, sigma))


def spinor(grid, a, b, t=0.0):
    return SpinorField((ComplexField(grid, t, a), ComplexField(grid, t, b)))


def moments(grid, psi):
    rho = np.abs(psi) ** 2
    rho = rho / grid.integrate(rho)
    mean = grid.integrate(grid.x * rho)
    return mean, np.sqrt(grid.integrate((grid.x - mean) ** 2 * rho))


def test_plane_wave_phase_advance(grid, consts):
    k = 2 * np.pi * 5 / grid.length
    dt = 0.01
    psi = ComplexField(grid, 0.0, np.exp(1j * k * grid.x))
    out = step_schrodinger(psi, np.zeros(grid.n_points), consts, dt)
    np.testing.assert_allclose(np.abs(out.values), 1.0, atol=1e-14)
    np.testing.assert_allclose(out.values / psi.values, np.exp(-0.5j * k**2 * dt), atol=1e-14)
    assert out.t == pytest.approx(dt)


def test_coherent_state_follows_classical_centre():
    grid = UniformGrid(-20.0, 20.0, 256)
    consts = Constants()
    omega, x0, dt = 1.0, 2.0, 1e-3
    V = PotentialSpec("harmonic", omega=omega).evaluate(grid, consts)
    step = make_schrodinger_stepper(grid, V, consts, dt)
    psi = gauss(grid, x0, 0.0, np.sqrt(0.5 / omega))
    n = int(round(2 * np.pi / omega / dt))
    worst = 0.0
    for i in range(1, n + 1):
        psi = step(psi)
        if i % 50 == 0:
            worst = max(worst, abs(moments(grid, psi.values)[0] - x0 * np.cos(omega * i * dt)))
    assert worst < 1e-6


def test_schrodinger_norm_1000_steps(grid, consts):
    V = 0.5 * grid.x**2
    states = run_stepper(make_schrodinger_stepper(grid, V, consts, 0.01), gauss(grid, 1.0, 0.5),
                         1000, stride=1000)
    assert abs(states[-1].norm() - states[0].norm()) < 1e-12


def test_nonconstant_mass_reduces_to_schrodinger(grid, consts):
    psi = gauss(grid, 0.0, 1.0)
    V = 0.1 * grid.x**2 / 20
    dt = 1e-3
    a = step_nonconstant_mass(psi, V, np.full(grid.n_points, 1.0), consts, dt)
    b = step_schrodinger(psi, V, consts, dt)
    assert np.max(np.abs(a.values - b.values)) < 1e-8


def test_nonconstant_mass_norm_drift(grid, consts):
    m = MassSpec("sinusoidal", 1.0, 0.3, 1).evaluate(grid)
    step = make_nonconstant_mass_stepper(grid, np.zeros(grid.n_points), m, consts, 0.01)
    psi = gauss(grid, 0.0, 1.0)
    n0 = psi.norm()
    for _ in range(20):
        nxt = step(psi)
        assert abs(nxt.norm() - psi.norm()) < 1e-10
        psi = nxt
    assert abs(psi.norm() - n0) < 20e-10


def test_nonconstant_mass_solver_failure_raises(grid, consts):
    m = MassSpec("sinusoidal", 1.0, 0.3, 1).evaluate(grid)
    # a tolerance below the rounding floor cannot be met
    step = make_nonconstant_mass_stepper(grid, np.zeros(grid.n_points), m, consts, 0.5,
                                         tol=1e-30, maxiter=1)
    with pytest.raises(SolverDiverged):
        step(gauss(grid, 0.0, 3.0, 0.7))


def test_nonconstant_mass_eigenstate_only_phase_advances():
    doc = scenario("sinusoidal_mass")
    grid = UniformGrid(-10.0, 10.0, 128)
    scen = replace(doc, grid=grid, mass=MassSpec("sinusoidal", 1.0, 0.3, 1),
                   potential=PotentialSpec("harmonic", omega=1.0),
                   initial_state=replace(doc.initial_state, kind="eigenstate", level=2),
                   dt=0.02, n_steps=50)
    h = propagate(scen)
    u0, u1 = h.states[0].values, h.states[-1].values
    phase = np.vdot(u0, u1) / np.vdot(u0, u0)
    assert abs(abs(phase) - 1) < 1e-10
    assert np.max(np.abs(u1 - phase * u0)) < 1e-9


def test_pauli_decoupled_limit(grid, consts):
    V = 0.02 * grid.x**2
    a, b = gauss(grid, -1.0, 0.5).values, 0.5 * gauss(grid, 2.0, -1.0).values
    fields = ExternalFieldSpec(PotentialSpec("harmonic", omega=0.2), (0.0, 0.0, 0.0))
    out = step_pauli(spinor(grid, a, b), fields, consts, 0.01)
    V = fields.phi.evaluate(grid, consts)
    ra = step_schrodinger(ComplexField(grid, 0.0, a), V, consts, 0.01).values
    rb = step_schrodinger(ComplexField(grid, 0.0, b), V, consts, 0.01).values
    assert np.max(np.abs(out.components[0].values - ra)) < 1e-13
    assert np.max(np.abs(out.components[1].values - rb)) < 1e-13


@pytest.mark.parametrize("Bx,q", [(1.0, 1.0), (2.5, 0.7)])
def test_pauli_rabi_oscillation(grid, Bx, q):
    consts = Constants(q=q)
    dt = 0.01
    B = np.tile([Bx, 0.0, 0.0], (grid.n_points, 1))
    step = make_pauli_stepper(grid, np.zeros(grid.n_points), B, consts, dt, freeze_kinetic=True)
    psi = gauss(grid).values
    states = run_stepper(step, spinor(grid, psi, np.zeros_like(psi)), 300)
    for n, s in enumerate(states):
        p1 = s.components[0].norm() / s.norm()
        assert p1 == pytest.approx(np.cos(q * Bx * dt * n / (2 * consts.m)) ** 2, abs=1e-12)


def test_pauli_norm_1000_steps(grid, consts):
    B = np.column_stack([np.sin(grid.x / 5), np.cos(grid.x / 7), 0.3 * np.ones(grid.n_points)])
    step = make_pauli_stepper(grid, 0.01 * grid.x**2, B, consts, 0.01)
    s0 = spinor(grid, gauss(grid, 0.0, 1.0).values, gauss(grid, 1.0, -1.0).values)
    states = run_stepper(step, s0, 1000, stride=1000)
    assert abs(states[-1].norm() - states[0].norm()) < 1e-12


def kg_mode(grid, consts, k, branch=1):
    w = consts.c * np.hypot(k, consts.m * consts.c / consts.hbar)
    psi = np.exp(1j * k * grid.x)
    return KGState(ComplexField(grid, 0.0, psi), ComplexField(grid, 0.0, -branch * 1j * w * psi)), w


@pytest.mark.parametrize("mode", [0, 3, 11])
def test_kg_plane_wave_dispersion(grid, consts, mode):
    k = 2 * np.pi * mode / grid.length
    state, w = kg_mode(grid, consts, k)
    dt = 0.05
    out = step_klein_gordon(state, consts, dt)
    ratio = out.psi.values / state.psi.values
    np.testing.assert_allclose(np.abs(out.psi.values), 1.0, atol=1e-12)
    measured = -np.angle(ratio.mean()) / dt
    assert measured == pytest.approx(w, abs=1e-10)


def test_kg_two_mode_energies(grid, consts):
    k1, k2 = 2 * np.pi * 3 / grid.length, 2 * np.pi * 8 / grid.length
    s1, _ = kg_mode(grid, consts, k1)
    s2, _ = kg_mode(grid, consts, k2, branch=-1)
    state = KGState(ComplexField(grid, 0.0, s1.psi.values + 0.5 * s2.psi.values),
                    ComplexField(grid, 0.0, s1.dpsi_dt.values + 0.5 * s2.dpsi_dt.values))
    step = make_kg_stepper(grid, consts, 0.1)
    states = run_stepper(step, state, 200)

    def mode_energy(s, k):
        proj = lambda f: np.exp(1j * k * grid.x) * np.mean(np.exp(-1j * k * grid.x) * f)  # noqa: E731
        part = KGState(ComplexField(grid, s.t, proj(s.psi.values)),
                       ComplexField(grid, s.t, proj(s.dpsi_dt.values)))
        return kg_energy(part, consts)

    for k in (k1, k2):
        e = np.array([mode_energy(s, k) for s in states])
        assert np.max(np.abs(e - e[0])) < 1e-10 * e[0]
    total = np.array([kg_energy(s, consts) for s in states])
    assert np.max(np.abs(total / total[0] - 1)) < 1e-10


@pytest.mark.parametrize("sign", [1, -1])
def test_weyl_massless_chirality(sign):
    # H = -i hbar c sigma_1 d/dx: the sigma_1 eigenvalue lambda moves rigidly at lambda c
    grid = UniformGrid(-20.0, 20.0, 512)
    consts = Constants(m=0.0)
    env = gauss(grid, 0.0, 1.0).values
    s0 = spinor(grid, env, sign * env)
    shift = 16
    dt = shift * grid.dx / 40
    out = run_stepper(make_weyl_stepper(grid, consts, dt), s0, 40, stride=40)[-1]
    expected = np.roll(env, sign * shift)
    assert np.max(np.abs(out.components[0].values - expected)) < 1e-12
    assert np.max(np.abs(out.components[1].values - sign * expected)) < 1e-12


def test_weyl_norm_1000_steps():
    grid = UniformGrid(-20.0, 20.0, 256)
    consts = Constants()
    s0 = spinor(grid, gauss(grid, 0.0, 1.0).values, 0.4j * gauss(grid, 1.0).values)
    states = run_stepper(make_weyl_stepper(grid, consts, 0.01), s0, 1000, stride=1000)
    assert abs(states[-1].norm() - states[0].norm()) < 1e-12


def test_weyl_step_matches_stepper(grid):
    consts = Constants(m=0.5)
    s0 = spinor(grid, gauss(grid).values, gauss(grid, 1.0).values)
    a = step_weyl(s0, consts, 0.03)
    b = make_weyl_stepper(grid, consts, 0.03)(s0)
    assert np.array_equal(a.components[1].values, b.components[1].values)


def test_kg_frequencies_massless_limit(grid):
    w = kg_frequencies(grid, Constants(m=0.0, c=2.0))
    np.testing.assert_allclose(w, 2.0 * np.abs(grid.k))


def _steppers(grid):
    consts = Constants()
    V = 0.01 * grid.x**2
    m = MassSpec("sinusoidal", 1.0, 0.3, 1).evaluate(grid)
    B = np.tile([0.3, 0.0, 0.5], (grid.n_points, 1))
    g = gauss(grid, 0.0, 1.0)
    kg = KGState(ComplexField(grid, 0.0, g.values), ComplexField(grid, 0.0, -1j * g.values))
    sp = spinor(grid, g.values, 0.5 * g.values)
    return [
        ("schrodinger", lambda dt: make_schrodinger_stepper(grid, V, consts, dt), g),
        ("nonconstant_mass", lambda dt: make_nonconstant_mass_stepper(grid, V, m, consts, dt), g),
        ("pauli", lambda dt: make_pauli_stepper(grid, V, B, consts, dt), sp),
        ("klein_gordon", lambda dt: make_kg_stepper(grid, consts, dt), kg),
        ("weyl", lambda dt: make_weyl_stepper(grid, consts, dt), sp),
    ]


@pytest.mark.parametrize("index", range(5))
def test_time_reversal(grid, index):
    name, make, state = _steppers(grid)[index]
    assert reverse_check(make(0.01), make(-0.01), state) < 1e-10, name


def test_propagate_zero_steps():
    scen = replace(scenario("free_gaussian_short"), n_steps=0)
    h = propagate(scen)
    assert len(h) == 1 and h.states[0].t == 0.0


def test_propagate_free_gaussian_width():
    scen = scenario("free_gaussian")
    h = propagate(scen)
    t = h.times[-1]
    sigma0 = scen.initial_state.sigma0
    exact = sigma0 * np.sqrt(1 + (t / (2 * sigma0**2)) ** 2)
    assert moments(scen.grid, h.states[-1].values)[1] == pytest.approx(exact, rel=1e-4)


def test_propagate_stride_and_dt():
    scen = replace(scenario("free_gaussian_short"), snapshot_stride=5)
    h = propagate(scen)
    assert len(h) == 11
    assert h.dt == pytest.approx(5 * scen.dt)
    np.testing.assert_allclose(np.diff(h.times), h.dt)


def test_split_operator_second_order():
    # harmonic potential so splitting error is nonzero
    base = replace(scenario("coherent_state"), n_steps=100, initial_state=replace(
        scenario("coherent_state").initial_state, sigma0=1.2, k0=0.5))
    ref = propagate(base.with_dt(16)).states[-1].values
    e1 = np.max(np.abs(propagate(base).states[-1].values - ref))
    e2 = np.max(np.abs(propagate(base.with_dt(2)).states[-1].values - ref))
    assert e1 / e2 >= 3.8
