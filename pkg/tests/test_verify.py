import functools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import scenario
from quantraj.characteristics import ModelContext, SnapshotFields, weyl_form_residual
from quantraj.errors import InsufficientHistory
from quantraj.fields import Constants, UniformGrid
from quantraj.propagators import SnapshotHistory, propagate
from quantraj.scenario_io import bundled_scenario_names
from quantraj.verify import (CHECKS, CheckSpec, DiagnosticsReport, ReportEntry, Workspace,
                             check_continuity, check_names, check_norm_liouville,
                             check_s_equation_residual, energy_scale, hamiltonian_density,
                             kg_flag_fractions, lagrangian_density, qhj_residual_field,
                             rotate_snapshot, run_check, run_suite, scale_snapshot,
                             select_checks)


@pytest.fixture(scope="module")
def nominal():
    return {e.name: e for e in run_suite(CHECKS).entries}


@pytest.fixture(scope="module")
def faulted():
    return {e.name: e for e in run_suite(CHECKS, inject_fault=True).entries}


@functools.lru_cache(maxsize=None)
def workspace(name):
    return Workspace({name: scenario(name)})


# -- registry


def test_registry_consistent():
    keys = [c.key for c in CHECKS]
    assert len(keys) == len(set(keys))
    names = set(bundled_scenario_names())
    for c in CHECKS:
        assert c.tolerance > 0
        assert c.scenario in names
        assert c.fault
    assert check_names() == sorted({c.name for c in CHECKS})


@pytest.mark.parametrize("tol", [0.0, -1e-3, float("nan")])
def test_checkspec_rejects_nonpositive_tolerance(tol):
    with pytest.raises(ValueError):
        CheckSpec("check_continuity", "eigenstate", tol, "none")


def test_checkspec_rejects_unknown_criterion():
    with pytest.raises(ValueError):
        CheckSpec("check_continuity", "eigenstate", 1e-3, "none", criterion="between")


def test_select_checks():
    assert select_checks("all") == list(CHECKS)
    newton = select_checks("check_newton")
    assert newton and all(c.name == "check_newton" for c in newton)
    one = select_checks("check_continuity[eigenstate], check_newton")
    assert one[0].key == "check_continuity[eigenstate]" and len(one) == 1 + len(newton)
    with pytest.raises(KeyError):
        select_checks("check_nothing")


# -- suite behaviour


@pytest.mark.parametrize("key", [c.key for c in CHECKS])
def test_check_passes_on_reference(nominal, key):
    e = nominal[key]
    assert e.passed, (e.residual, e.tolerance, e.details)


@pytest.mark.parametrize("key", [c.key for c in CHECKS])
def test_fault_injection_fails(faulted, key):
    e = faulted[key]
    if e.status == "SKIP":
        # a degenerate reference stays degenerate under the fault
        assert key == "check_second_derivative_consistency[plane_wave]"
    else:
        assert not e.passed, (e.residual, e.tolerance, e.details)


@pytest.mark.parametrize("key", [c.key for c in CHECKS if c.order is not None])
def test_declared_order_observed(nominal, key):
    d = nominal[key].details
    spec = next(c for c in CHECKS if c.key == key)
    if "observed_order" in d:
        assert d["observed_order"] >= spec.order - 0.2
    else:
        assert nominal[key].residual < spec.order_floor


def test_plane_wave_second_derivative_skipped(nominal):
    e = nominal["check_second_derivative_consistency[plane_wave]"]
    assert e.status == "SKIP" and e.passed and math.isnan(e.residual)
    assert e.to_dict()["residual"] is None


def test_tol_scale_tightens():
    spec = select_checks("check_continuity[free_gaussian]")[0]
    ws = workspace("free_gaussian")
    assert run_check(spec, ws).passed
    e = run_check(spec, ws, tol_scale=1e-6)
    assert not e.passed and e.tolerance == pytest.approx(1e-10)


@given(st.lists(st.sampled_from(["PASS", "FAIL", "SKIP"]), max_size=10))
def test_report_overall_flag(statuses):
    rep = DiagnosticsReport([ReportEntry(f"c{i}", 0.1, 1.0, s) for i, s in enumerate(statuses)])
    assert rep.passed == ("FAIL" not in statuses)
    assert rep.failed() == [f"c{i}" for i, s in enumerate(statuses) if s == "FAIL"]
    assert json.loads(json.dumps(rep.to_dict()))["passed"] == rep.passed


def test_suite_deterministic_order():
    specs = select_checks("check_weyl_velocities,check_kg_flags")
    a = run_suite(list(reversed(specs)))
    b = run_suite(specs)
    assert [e.name for e in a.entries] == sorted(c.key for c in specs)
    assert [(e.name, e.residual, e.status) for e in a.entries] == \
        [(e.name, e.residual, e.status) for e in b.entries]


# -- individual checks


def test_continuity_eigenstate_and_fault():
    ws = workspace("eigenstate")
    h = ws.history("eigenstate")
    ctx = ModelContext.from_scenario(scenario("eigenstate"))
    assert check_continuity(h, ctx).residual < 1e-8
    assert check_continuity(scale_snapshot(h, 5, 1.01), ctx).residual > 1e-3


def test_qhj_plane_wave_and_eigenstate():
    for name, tol in (("plane_wave", 1e-8), ("eigenstate", 1e-6)):
        sf = workspace(name).fields(name)
        worst = max(np.nanmax(np.abs(qhj_residual_field(sf, i))) for i in range(1, 10))
        assert worst / energy_scale(scenario(name)) < tol


def test_qhj_nonconstant_mass_reduction():
    s = replace(scenario("free_gaussian_short"), n_steps=8)
    h = propagate(s)
    ctx = ModelContext.from_scenario(s)
    h2 = SnapshotHistory("nonconstant_mass", h.dt, h.states, h.eps_node, h.hbar)
    ctx2 = replace(ctx, model="nonconstant_mass", mass=np.ones(s.grid.n_points))
    a, b = SnapshotFields(h, ctx), SnapshotFields(h2, ctx2)
    for i in range(1, 8):
        np.testing.assert_allclose(qhj_residual_field(b, i), qhj_residual_field(a, i),
                                   atol=1e-12)


def test_phase_rotation_breaks_qhj():
    sf = workspace("plane_wave").fields("plane_wave")
    h = rotate_snapshot(sf.history, 5, 0.01)
    bad = SnapshotFields(h, sf.ctx)
    # the centred S_t of the neighbours sees the jump: 0.01 / (2 dt)
    for i in (4, 6):
        assert np.nanmax(np.abs(qhj_residual_field(bad, i))) == pytest.approx(0.5, rel=1e-6)
    assert np.nanmax(np.abs(qhj_residual_field(bad, 5))) < 1e-12


def test_norm_unitary_and_kg_functional():
    ws = workspace("kg_gaussian")
    h = ws.history("kg_gaussian")
    res = check_norm_liouville(h, ModelContext.from_scenario(scenario("kg_gaussian")))
    assert res.details["functional"] == "kg_energy" and res.residual < 1e-10
    ws = workspace("free_gaussian_short")
    h = ws.history("free_gaussian_short")
    ctx = ModelContext.from_scenario(scenario("free_gaussian_short"))
    assert check_norm_liouville(h, ctx).residual < 1e-12
    assert check_norm_liouville(scale_snapshot(h, 3, 1.01), ctx).residual > 1e-2


def test_lagrangian_constant_amplitude_limit(grid):
    k, R, V = 0.6, 0.3, 0.25
    ones = np.ones(grid.n_points)
    S_t = -0.5 * k**2 * ones
    L = lagrangian_density(R * ones, k * ones, 0 * ones, 0 * ones, S_t, V * ones, 1.0, 1.0)
    np.testing.assert_allclose(L, -R**2 * (S_t + k**2 / 2 + V), atol=1e-15)


def test_hamiltonian_density_plane_wave(grid):
    # constant R: only the potential-energy part of -R^2 (S'^2/2m - V) survives
    ones = np.ones(grid.n_points)
    Hd = hamiltonian_density(0.5 * ones, 0 * ones, 0 * ones, 2.0 * ones, 0 * ones, 0.1 * ones,
                             1.0, 1.0)
    np.testing.assert_allclose(Hd, -0.25 * (2.0 - 0.1) + 0j)


def test_short_history_insufficient():
    s = replace(scenario("free_gaussian_short"), n_steps=1)
    h = propagate(s)
    with pytest.raises(InsufficientHistory):
        check_continuity(h, ModelContext.from_scenario(s))


def test_s_equation_growth_at_most_quadratic():
    base = scenario("free_gaussian_short")
    spans = (6, 12, 25, 50, 100)
    ratios = []
    for n in spans:
        ws = Workspace({"x": replace(base, n_steps=n)})
        sf = ws.fields("x")
        r = check_s_equation_residual(sf, ws.trajectories("x"), energy_scale(base)).residual
        ratios.append(r / n**2)
    # r / t^2 stays bounded over the sweep
    assert max(ratios) <= 1.5 * ratios[0]


def test_weyl_families_inequivalent():
    out = {}
    for name in ("weyl_two_mode_full", "weyl_two_mode_per_component"):
        ws = workspace(name)
        sf = ws.fields(name)
        trajs = [t for c in (0, 1) for t in ws.trajectories(name, component=c) if t.completed]
        out[name] = {f: max(weyl_form_residual([t], sf, f) for t in trajs)
                     for f in ("per_component", "full_system")}
    full, per = out["weyl_two_mode_full"], out["weyl_two_mode_per_component"]
    assert full["full_system"] < 1e-3 < full["per_component"]
    assert per["per_component"] < 1e-3 < per["full_system"]


@pytest.mark.parametrize("name,sup,neg", [("kg_plane_wave", False, False),
                                          ("kg_two_mode", True, None),
                                          ("kg_mixed_branch", None, True)])
def test_kg_flag_fractions(name, sup, neg):
    f_sup, f_neg = kg_flag_fractions(workspace(name).fields(name))
    if sup is not None:
        assert (f_sup > 0) == sup
    if neg is not None:
        assert (f_neg > 0) == neg


def test_kg_flags_clamp_hides_superluminal():
    sf = workspace("kg_two_mode").fields("kg_two_mode")
    assert kg_flag_fractions(sf, clamp=True)[0] == 0.0


def test_energy_scale_cases():
    assert energy_scale(scenario("free_gaussian")) == pytest.approx(0.5)
    k = scenario("plane_wave").initial_state.k
    assert energy_scale(scenario("plane_wave")) == pytest.approx(k**2 / 2)
    assert energy_scale(scenario("eigenstate")) == pytest.approx(0.5)


def test_custom_scenarios_mapping():
    grid = UniformGrid(-20.0, 20.0, 256)
    s = replace(scenario("plane_wave"), grid=grid, constants=Constants(m=2.0))
    rep = run_suite(select_checks("check_guiding_equation[plane_wave]"), {"plane_wave": s})
    assert rep.passed
