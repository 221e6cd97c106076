"""Scenario documents, built-in initial states and file formats.

A scenario is one JSON object; see ``docs/scenario_schema.md`` for every key
and its default.  Numbers are written with 17 significant digits so that
every file round-trips 64-bit floats exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .fields import (ComplexField, Constants, DEFAULT_EPS_NODE, KGState, MODELS, SpinorField,
                     UniformGrid)
from .propagators import (ExternalFieldSpec, MassSpec, PotentialSpec, kg_frequencies,
                          make_nonconstant_mass_stepper, make_schrodinger_stepper,
                          nonconstant_mass_hamiltonian)

INITIAL_KINDS = ("plane_wave", "gaussian", "spinor_gaussian", "spinor_plane_wave",
                 "spinor_modes", "kg_gaussian", "kg_modes", "eigenstate")
SCALAR_KINDS = ("plane_wave", "gaussian", "eigenstate")
SPINOR_KINDS = ("spinor_gaussian", "spinor_plane_wave", "spinor_modes")
KG_KINDS = ("kg_gaussian", "kg_modes")
WEYL_FAMILIES = ("per_component", "full_system")

FMT = "%.17g"


@dataclass(frozen=True)
class InitialStateSpec:
    """Built-in initial states.

    ``modes`` (kg_modes, spinor_modes) holds ``(k, amplitude, branch)``
    triples with branch ``+1`` (positive frequency, ``psi_t = -i w psi``) or
    ``-1``.  For spinor_modes each mode carries the Dirac-Weyl eigenvector of
    its branch, so the state is a superposition of exact stationary modes.
    ``level`` (eigenstate) selects the n-th stationary state of the
    discretised one-step propagator, ordered by energy.
    """

    kind: str
    x0: float = 0.0
    k0: float = 0.0
    sigma0: float = 1.0
    k: float = 0.0
    amplitudes: tuple[float, float] = (1.0, 0.0)
    relative_phase: float = 0.0
    frequency_branch: str = "positive"
    modes: tuple[tuple[float, float, int], ...] = ()
    level: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str
    model: str
    grid: UniformGrid
    constants: Constants
    initial_state: InitialStateSpec
    dt: float
    n_steps: int
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    mass: MassSpec | None = None
    external_field: ExternalFieldSpec | None = None
    snapshot_stride: int = 1
    seeds: tuple[tuple[float, int], ...] = ()
    quantile_seeds: int = 0
    quantile_components: tuple[int, ...] = (0,)
    weyl_family: str | None = None
    eps_node: float = DEFAULT_EPS_NODE
    tolerances: tuple[tuple[str, float], ...] = ()
    freeze_kinetic: bool = False

    def tolerance(self, name: str, default: float) -> float:
        return dict(self.tolerances).get(name, default)

    def with_dt(self, factor: float) -> "Scenario":
        """Same physical span with time step ``dt / factor`` and snapshot
        spacing scaled alike."""
        return replace(self, dt=self.dt / factor, n_steps=int(round(self.n_steps * factor)))


# --------------------------------------------------------------------------
# parsing


def _take(obj: dict, key: str, typ, default=None, where: str = "scenario"):
    if key not in obj:
        return default
    val = obj[key]
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ParseError(f"{where}.{key}: expected a number, got {val!r}")
        return float(val)
    if typ is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ParseError(f"{where}.{key}: expected an integer, got {val!r}")
        return val
    if typ is str:
        if not isinstance(val, str):
            raise ParseError(f"{where}.{key}: expected a string, got {val!r}")
        return val
    if typ is bool:
        if not isinstance(val, bool):
            raise ParseError(f"{where}.{key}: expected true/false, got {val!r}")
        return val
    if typ is dict:
        if not isinstance(val, dict):
            raise ParseError(f"{where}.{key}: expected an object")
        return val
    if typ is list:
        if not isinstance(val, list):
            raise ParseError(f"{where}.{key}: expected an array")
        return val
    raise TypeError(typ)


def _check_keys(obj: dict, allowed, where: str):
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ParseError(f"{where}: unknown key(s) {', '.join(extra)}")


def _float_list(val, where):
    if not isinstance(val, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        raise ParseError(f"{where}: expected an array of numbers")
    return tuple(float(v) for v in val)


def _parse_potential(obj: dict, where: str) -> PotentialSpec:
    _check_keys(obj, ("kind", "omega", "center", "height", "width", "values"), where)
    kind = _take(obj, "kind", str, "zero", where)
    vals = _float_list(obj["values"], where + ".values") if "values" in obj else ()
    try:
        return PotentialSpec(kind=kind, omega=_take(obj, "omega", float, 0.0, where),
                             center=_take(obj, "center", float, 0.0, where),
                             height=_take(obj, "height", float, 0.0, where),
                             width=_take(obj, "width", float, 1.0, where), values=vals)
    except ValueError as e:
        raise ValidationError("potential", str(e)) from None


def _parse_mass(obj: dict, where: str) -> MassSpec:
    _check_keys(obj, ("kind", "m0", "amplitude", "periods", "values"), where)
    vals = _float_list(obj["values"], where + ".values") if "values" in obj else ()
    try:
        return MassSpec(kind=_take(obj, "kind", str, "constant", where),
                        m0=_take(obj, "m0", float, 1.0, where),
                        amplitude=_take(obj, "amplitude", float, 0.0, where),
                        periods=_take(obj, "periods", int, 1, where), values=vals)
    except ValueError as e:
        raise ValidationError("mass", str(e)) from None


def _parse_external(obj: dict, where: str) -> ExternalFieldSpec:
    _check_keys(obj, ("phi", "B"), where)
    phi = _parse_potential(_take(obj, "phi", dict, {}, where), where + ".phi")
    B = obj.get("B", [0.0, 0.0, 0.0])
    if isinstance(B, list) and B and isinstance(B[0], list):
        Bt = tuple(_float_list(row, where + ".B") for row in B)
        if any(len(r) != 3 for r in Bt):
            raise ParseError(f"{where}.B: rows must have 3 entries")
    else:
        Bt = _float_list(B, where + ".B")
        if len(Bt) != 3:
            raise ParseError(f"{where}.B: expected 3 components")
    return ExternalFieldSpec(phi=phi, B=Bt)


def _parse_initial(obj: dict, where: str) -> InitialStateSpec:
    _check_keys(obj, ("kind", "x0", "k0", "sigma0", "k", "amplitudes", "relative_phase",
                      "frequency_branch", "modes", "level"), where)
    kind = _take(obj, "kind", str, None, where)
    if kind is None:
        raise ParseError(f"{where}: missing key 'kind'")
    amps = _float_list(obj["amplitudes"], where + ".amplitudes") if "amplitudes" in obj \
        else (1.0, 0.0)
    if len(amps) != 2:
        raise ParseError(f"{where}.amplitudes: expected 2 entries")
    modes = []
    for i, mode in enumerate(_take(obj, "modes", list, [], where)):
        w = f"{where}.modes[{i}]"
        if not isinstance(mode, dict):
            raise ParseError(f"{w}: expected an object")
        _check_keys(mode, ("k", "amplitude", "branch"), w)
        branch = _take(mode, "branch", int, 1, w)
        modes.append((_take(mode, "k", float, 0.0, w), _take(mode, "amplitude", float, 1.0, w),
                      branch))
    return InitialStateSpec(
        kind=kind, x0=_take(obj, "x0", float, 0.0, where), k0=_take(obj, "k0", float, 0.0, where),
        sigma0=_take(obj, "sigma0", float, 1.0, where), k=_take(obj, "k", float, 0.0, where),
        amplitudes=amps, relative_phase=_take(obj, "relative_phase", float, 0.0, where),
        frequency_branch=_take(obj, "frequency_branch", str, "positive", where),
        modes=tuple(modes), level=_take(obj, "level", int, 0, where))


SCENARIO_KEYS = ("name", "model", "grid", "constants", "potential", "mass", "external_field",
                 "initial_state", "dt", "n_steps", "snapshot_stride", "seeds", "quantile_seeds",
                 "quantile_components", "weyl_family", "eps_node", "tolerances",
                 "freeze_kinetic")


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ParseError("scenario: top level must be a JSON object")
    _check_keys(doc, SCENARIO_KEYS, "scenario")
    for req in ("model", "grid", "initial_state", "dt", "n_steps"):
        if req not in doc:
            raise ParseError(f"scenario: missing key {req!r}")
    g = _take(doc, "grid", dict)
    _check_keys(g, ("x_min", "x_max", "n_points"), "grid")
    for req in ("x_min", "x_max", "n_points"):
        if req not in g:
            raise ParseError(f"grid: missing key {req!r}")
    try:
        grid = UniformGrid(_take(g, "x_min", float, where="grid"),
                           _take(g, "x_max", float, where="grid"),
                           _take(g, "n_points", int, where="grid"))
    except ValueError as e:
        raise ValidationError("grid", str(e)) from None
    cdoc = _take(doc, "constants", dict, {})
    _check_keys(cdoc, ("hbar", "m", "c", "q"), "constants")
    try:
        consts = Constants(**{k: _take(cdoc, k, float, where="constants") for k in cdoc})
    except ValueError as e:
        raise ValidationError("constants", str(e)) from None

    seeds = []
    for i, s in enumerate(_take(doc, "seeds", list, [])):
        w = f"seeds[{i}]"
        if not isinstance(s, dict):
            raise ParseError(f"{w}: expected an object")
        _check_keys(s, ("x0", "component"), w)
        if "x0" not in s:
            raise ParseError(f"{w}: missing key 'x0'")
        seeds.append((_take(s, "x0", float, where=w), _take(s, "component", int, 0, w)))
    tol = _take(doc, "tolerances", dict, {})
    tolerances = tuple(sorted((str(k), _take(tol, k, float, where="tolerances")) for k in tol))
    qc = _take(doc, "quantile_components", list, [0])
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in qc):
        raise ParseError("scenario.quantile_components: expected integers")

    scen = Scenario(
        name=_take(doc, "name", str, "unnamed"),
        model=_take(doc, "model", str),
        grid=grid,
        constants=consts,
        initial_state=_parse_initial(_take(doc, "initial_state", dict), "initial_state"),
        dt=_take(doc, "dt", float),
        n_steps=_take(doc, "n_steps", int),
        potential=_parse_potential(_take(doc, "potential", dict, {}), "potential"),
        mass=_parse_mass(doc["mass"], "mass") if "mass" in doc else None,
        external_field=(_parse_external(doc["external_field"], "external_field")
                        if "external_field" in doc else None),
        snapshot_stride=_take(doc, "snapshot_stride", int, 1),
        seeds=tuple(seeds),
        quantile_seeds=_take(doc, "quantile_seeds", int, 0),
        quantile_components=tuple(qc),
        weyl_family=_take(doc, "weyl_family", str, None),
        eps_node=_take(doc, "eps_node", float, DEFAULT_EPS_NODE),
        tolerances=tolerances,
        freeze_kinetic=_take(doc, "freeze_kinetic", bool, False),
    )
    validate_scenario(scen)
    return scen


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"line {e.lineno} column {e.colno}: {e.msg}") from None
    return scenario_from_dict(doc)


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read scenario {path}: {e.strerror}") from None
    return parse_scenario(text)


SCENARIO_DIR = Path(__file__).with_name("scenarios")


def bundled_scenario_names() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


def bundled_scenario(name: str) -> Scenario:
    """Load the bundled reference scenario ``name``."""
    path = SCENARIO_DIR / f"{name}.json"
    if not path.is_file():
        raise ParseError(f"no bundled scenario {name!r}")
    return load_scenario(path)


def bundled_scenarios() -> dict[str, Scenario]:
    return {n: bundled_scenario(n) for n in bundled_scenario_names()}


def group_speed(scen: Scenario) -> float:
    """Classical speed of the initial packet, for the self-wrap rule."""
    spec, c = scen.initial_state, scen.constants
    if spec.kind in ("plane_wave", "spinor_plane_wave", "eigenstate", "kg_modes"):
        return 0.0
    if scen.model == "weyl":
        return c.c
    if scen.model == "klein_gordon":
        w = math.sqrt(c.c**2 * spec.k0**2 + (c.m * c.c**2 / c.hbar) ** 2)
        return c.c**2 * abs(spec.k0) / w
    if scen.model == "pauli" and scen.external_field is not None \
            and scen.external_field.phi.kind == "harmonic":
        return 0.0
    if scen.potential.kind == "harmonic":
        return 0.0
    m = scen.mass.evaluate(scen.grid).min() if scen.mass is not None else c.m
    return c.hbar * abs(spec.k0) / m


def validate_scenario(s: Scenario) -> None:
    """Raise :class:`ValidationError` naming the first violated rule."""
    if s.model not in MODELS:
        raise ValidationError("model", f"unknown model {s.model!r}; expected one of {MODELS}")
    if not s.dt > 0:
        raise ValidationError("dt", "dt must be positive")
    if s.n_steps < 0:
        raise ValidationError("n_steps", "n_steps must be non-negative")
    if s.snapshot_stride < 1:
        raise ValidationError("snapshot_stride", "snapshot_stride must be >= 1")
    if not 0 < s.eps_node < 1:
        raise ValidationError("eps_node", "eps_node must lie in (0, 1)")
    if s.model != "weyl" and not s.constants.m > 0:
        raise ValidationError("constants", "m must be positive for this model")
    # model-specific fields present exactly when required
    if s.model == "weyl":
        if s.weyl_family is None:
            raise ValidationError("weyl_family", "weyl scenarios require weyl_family")
        if s.weyl_family not in WEYL_FAMILIES:
            raise ValidationError("weyl_family", f"expected one of {WEYL_FAMILIES}")
    elif s.weyl_family is not None:
        raise ValidationError("weyl_family", "weyl_family is only allowed for weyl scenarios")
    if s.model == "pauli":
        if s.external_field is None:
            raise ValidationError("external_field", "pauli scenarios require external_field")
    elif s.external_field is not None:
        raise ValidationError("external_field", "external_field is only allowed for pauli")
    if s.freeze_kinetic and s.model != "pauli":
        raise ValidationError("freeze_kinetic", "freeze_kinetic is a pauli test mode")
    if s.model == "nonconstant_mass":
        if s.mass is None:
            raise ValidationError("mass", "nonconstant_mass scenarios require mass")
    elif s.mass is not None:
        raise ValidationError("mass", "mass profile is only allowed for nonconstant_mass")
    if s.model in ("klein_gordon", "weyl") and s.potential.kind != "zero":
        raise ValidationError("potential", f"{s.model} is implemented for free particles only")
    try:
        s.potential.evaluate(s.grid, s.constants)
        if s.mass is not None:
            s.mass.evaluate(s.grid)
        if s.external_field is not None:
            s.external_field.B_array(s.grid)
            s.external_field.phi.evaluate(s.grid, s.constants)
    except ValueError as e:
        raise ValidationError("tabulated", str(e)) from None

    spec = s.initial_state
    if spec.kind not in INITIAL_KINDS:
        raise ValidationError("initial_state", f"unknown kind {spec.kind!r}")
    allowed = {"pauli": SPINOR_KINDS, "weyl": SPINOR_KINDS, "klein_gordon": KG_KINDS}.get(
        s.model, SCALAR_KINDS)
    if spec.kind not in allowed:
        raise ValidationError("initial_state", f"{spec.kind} is not valid for model {s.model}")
    if spec.kind == "eigenstate" and spec.level < 0:
        raise ValidationError("initial_state", "eigenstate level must be >= 0")
    if spec.frequency_branch not in ("positive", "negative"):
        raise ValidationError("initial_state", "frequency_branch must be positive or negative")
    if any(b not in (1, -1) for _, _, b in spec.modes):
        raise ValidationError("initial_state", "mode branch must be +1 or -1")
    if spec.kind in ("kg_modes", "spinor_modes") and not spec.modes:
        raise ValidationError("initial_state", f"{spec.kind} needs at least one mode")
    if spec.kind == "spinor_modes" and s.model != "weyl":
        raise ValidationError("initial_state", "spinor_modes is defined for weyl only")
    if spec.kind in SPINOR_KINDS and not any(spec.amplitudes):
        raise ValidationError("initial_state", "spinor amplitudes must not both vanish")

    dx = s.grid.dx
    kmax = math.pi / (2 * dx)
    if spec.kind in ("gaussian", "spinor_gaussian", "kg_gaussian"):
        if spec.sigma0 < 4 * dx:
            raise ValidationError("resolvability", f"sigma0={spec.sigma0} < 4*dx={4 * dx}")
    wavenumbers = [spec.k0, spec.k] + [k for k, _, _ in spec.modes]
    if any(abs(k) >= kmax for k in wavenumbers):
        raise ValidationError("resolvability", f"|k| must stay below pi/(2 dx) = {kmax}")
    plane = [spec.k] if spec.kind in ("plane_wave", "spinor_plane_wave") else []
    if spec.kind in ("kg_modes", "spinor_modes"):
        plane = [k for k, _, _ in spec.modes]
    for k in plane:
        n = k * s.grid.length / (2 * math.pi)
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("grid_mode", f"wavenumber {k} is not a grid mode")

    travel = group_speed(s) * s.dt * s.n_steps
    if travel >= 0.5 * s.grid.length:
        raise ValidationError("traversal", "packet would travel more than half the domain")

    ncomp = 2 if s.model in ("pauli", "weyl") else 1
    for x0, comp in s.seeds:
        if not 0 <= comp < ncomp:
            raise ValidationError("seeds", f"component {comp} invalid for model {s.model}")
        if not s.grid.x_min <= x0 < s.grid.x_max:
            raise ValidationError("seeds", f"seed {x0} outside the domain")
    if s.quantile_seeds < 0:
        raise ValidationError("seeds", "quantile_seeds must be >= 0")
    if any(not 0 <= c < ncomp for c in s.quantile_components):
        raise ValidationError("seeds", "invalid quantile component")


# --------------------------------------------------------------------------
# serialisation of scenarios


def _potential_dict(p: PotentialSpec) -> dict:
    d = {"kind": p.kind}
    if p.kind == "harmonic":
        d.update(omega=p.omega, center=p.center)
    elif p.kind == "gaussian_barrier":
        d.update(height=p.height, width=p.width, center=p.center)
    elif p.kind == "tabulated":
        d["values"] = list(p.values)
    return d


def scenario_to_dict(s: Scenario) -> dict:
    spec = s.initial_state
    init = {f.name: getattr(spec, f.name) for f in fields(spec)}
    init["amplitudes"] = list(spec.amplitudes)
    init["modes"] = [{"k": k, "amplitude": a, "branch": b} for k, a, b in spec.modes]
    doc = {
        "name": s.name,
        "model": s.model,
        "grid": {"x_min": s.grid.x_min, "x_max": s.grid.x_max, "n_points": s.grid.n_points},
        "constants": {"hbar": s.constants.hbar, "m": s.constants.m, "c": s.constants.c,
                      "q": s.constants.q},
        "potential": _potential_dict(s.potential),
        "initial_state": init,
        "dt": s.dt,
        "n_steps": s.n_steps,
        "snapshot_stride": s.snapshot_stride,
        "seeds": [{"x0": x, "component": c} for x, c in s.seeds],
        "quantile_seeds": s.quantile_seeds,
        "quantile_components": list(s.quantile_components),
        "eps_node": s.eps_node,
        "tolerances": dict(s.tolerances),
    }
    if s.mass is not None:
        m = s.mass
        doc["mass"] = {"kind": m.kind, "m0": m.m0, "amplitude": m.amplitude,
                       "periods": m.periods, "values": list(m.values)}
    if s.external_field is not None:
        B = s.external_field.B
        doc["external_field"] = {"phi": _potential_dict(s.external_field.phi),
                                 "B": [list(r) for r in B] if B and isinstance(B[0], tuple)
                                 else list(B)}
    if s.weyl_family is not None:
        doc["weyl_family"] = s.weyl_family
    if s.freeze_kinetic:
        doc["freeze_kinetic"] = True
    return doc


def serialize_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# initial states


def _normalise(values, grid: UniformGrid):
    return values / math.sqrt(grid.integrate(np.sum(np.abs(values) ** 2, axis=0)))


def gaussian_packet(grid: UniformGrid, x0: float, k0: float, sigma0: float) -> np.ndarray:
    """Normalised ``exp(-(x-x0)^2 / (4 sigma0^2) + i k0 x)``, periodised over one
    neighbouring image on each side."""
    L = grid.length
    env = sum(np.exp(-((grid.x - x0 + j * L) ** 2) / (4 * sigma0**2)) for j in (-1, 0, 1))
    return _normalise(env * np.exp(1j * k0 * grid.x), grid)


@lru_cache(maxsize=16)
def _discrete_eigenstates(scenario: Scenario):
    grid, consts = scenario.grid, scenario.constants
    n = grid.n_points
    V = scenario.potential.evaluate(grid, consts)
    if scenario.model == "nonconstant_mass":
        mass = scenario.mass.evaluate(grid)
        apply_h = nonconstant_mass_hamiltonian(grid, V, mass, consts)
        step = make_nonconstant_mass_stepper(grid, V, mass, consts, scenario.dt)
    else:
        ik2 = -grid.k**2

        def apply_h(u):
            return -0.5 * consts.hbar**2 / consts.m * np.fft.ifft(ik2 * np.fft.fft(u)) + V * u

        step = make_schrodinger_stepper(grid, V, consts, scenario.dt)
    eye = np.eye(n, dtype=complex)
    H = np.column_stack([apply_h(eye[:, j]) for j in range(n)])
    H = 0.5 * (H + H.conj().T)
    energies, vecs = np.linalg.eigh(H)
    # stationary states of the one-step map itself, matched to the H eigenbasis
    U = np.column_stack([step(ComplexField(grid, 0.0, eye[:, j])).values for j in range(n)])
    _, uvecs = np.linalg.eig(U)
    return energies, vecs, uvecs


def discrete_eigenstate(scenario: Scenario, level: int) -> np.ndarray:
    """Normalised eigenvector of the scenario's one-step propagator whose
    overlap with the ``level``-th eigenvector of the discretised Hamiltonian is
    largest.  Propagating it only advances a global phase."""
    _, vecs, uvecs = _discrete_eigenstates(replace(scenario, initial_state=InitialStateSpec(
        "eigenstate"), seeds=(), quantile_seeds=0, tolerances=(), name=""))
    target = vecs[:, level]
    j = int(np.argmax(np.abs(uvecs.conj().T @ target)))
    v = uvecs[:, j]
    v = v * np.exp(-1j * np.angle(v[np.argmax(np.abs(v))]))
    return _normalise(v, scenario.grid)


def weyl_mode_vector(k: float, branch: int, consts: Constants) -> np.ndarray:
    """Unit eigenvector of ``[[m c^2, hbar c k], [hbar c k, -m c^2]]`` for
    eigenvalue ``branch * hbar * Omega``."""
    a = consts.m * consts.c**2
    b = consts.hbar * consts.c * k
    w = math.hypot(a, b)
    if w == 0.0:
        v = np.array([1.0, float(branch)])
    elif branch > 0:
        v = np.array([a + w, b])
    else:
        v = np.array([-b, a + w])
    return v / np.linalg.norm(v)


def build_initial_state(scenario: Scenario):
    """Normalised model state for ``scenario.initial_state``."""
    spec, grid, consts = scenario.initial_state, scenario.grid, scenario.constants
    x = grid.x
    kind = spec.kind
    if kind == "plane_wave":
        return ComplexField(grid, 0.0, _normalise(np.exp(1j * spec.k * x), grid))
    if kind == "gaussian":
        return ComplexField(grid, 0.0, gaussian_packet(grid, spec.x0, spec.k0, spec.sigma0))
    if kind == "eigenstate":
        return ComplexField(grid, 0.0, discrete_eigenstate(scenario, spec.level))
    if kind == "spinor_modes":
        u = np.zeros((2, grid.n_points), dtype=complex)
        for k, amp, branch in spec.modes:
            u += amp * weyl_mode_vector(k, branch, consts)[:, None] * np.exp(1j * k * x)
        u = _normalise(u, grid)
        return SpinorField((ComplexField(grid, 0.0, u[0]), ComplexField(grid, 0.0, u[1])))
    if kind in SPINOR_KINDS:
        if kind == "spinor_gaussian":
            base = gaussian_packet(grid, spec.x0, spec.k0, spec.sigma0)
        else:
            base = np.exp(1j * spec.k * x)
        a1, a2 = spec.amplitudes
        u = np.stack([a1 * base, a2 * np.exp(1j * spec.relative_phase) * base])
        u = _normalise(u, grid)
        return SpinorField((ComplexField(grid, 0.0, u[0]), ComplexField(grid, 0.0, u[1])))
    if kind == "kg_gaussian":
        psi = gaussian_packet(grid, spec.x0, spec.k0, spec.sigma0)
        sign = -1 if spec.frequency_branch == "positive" else 1
        w = kg_frequencies(grid, consts)
        dpsi = np.fft.ifft(sign * 1j * w * np.fft.fft(psi))
        return KGState(ComplexField(grid, 0.0, psi), ComplexField(grid, 0.0, dpsi))
    if kind == "kg_modes":
        psi = np.zeros(grid.n_points, dtype=complex)
        dpsi = np.zeros_like(psi)
        for k, amp, branch in spec.modes:
            w = math.sqrt(consts.c**2 * k**2 + (consts.m * consts.c**2 / consts.hbar) ** 2)
            e = amp * np.exp(1j * k * x)
            psi += e
            dpsi += -branch * 1j * w * e
        scale = 1.0 / math.sqrt(grid.integrate(np.abs(psi) ** 2))
        return KGState(ComplexField(grid, 0.0, psi * scale), ComplexField(grid, 0.0, dpsi * scale))
    raise ValidationError("initial_state", f"unknown kind {kind!r}")


def initial_density(scenario: Scenario, state, component: int = 0) -> np.ndarray:
    if isinstance(state, KGState):
        return np.abs(state.psi.values) ** 2
    if isinstance(state, SpinorField):
        return np.abs(state.components[component].values) ** 2
    return np.abs(state.values) ** 2


def quantile_seeds(density: np.ndarray, grid: UniformGrid, count: int) -> np.ndarray:
    """Positions at the probability quantiles ``(i + 1/2)/count`` of
    ``density`` (inverse of the piecewise-linear cumulative distribution)."""
    if count <= 0:
        return np.zeros(0)
    cell = np.asarray(density, dtype=float) * grid.dx
    edges = grid.x_min + grid.dx * (np.arange(grid.n_points + 1) - 0.5)
    cdf = np.concatenate(([0.0], np.cumsum(cell)))
    cdf /= cdf[-1]
    q = (np.arange(count) + 0.5) / count
    return grid.wrap(np.interp(q, cdf, edges))


def resolve_seeds(scenario: Scenario, state=None) -> list[tuple[float, int]]:
    """Explicit seeds followed by quantile seeds for each listed component."""
    seeds = list(scenario.seeds)
    if scenario.quantile_seeds:
        if state is None:
            state = build_initial_state(scenario)
        for comp in scenario.quantile_components:
            dens = initial_density(scenario, state, comp)
            seeds += [(float(x), comp) for x in
                      quantile_seeds(dens, scenario.grid, scenario.quantile_seeds)]
    return seeds


# --------------------------------------------------------------------------
# writers / readers


def _atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def snapshot_columns(model: str) -> list[str]:
    cols = ["t", "x", "re_psi", "im_psi"]
    if model in ("pauli", "weyl"):
        cols += ["re_psi2", "im_psi2"]
    if model == "klein_gordon":
        cols += ["re_dpsi_dt", "im_dpsi_dt"]
    return cols


def _fmt(v: float) -> str:
    return FMT % v


def write_snapshots(history, path) -> None:
    from .propagators import stack_values

    cols = snapshot_columns(history.model)
    vals = stack_values(history.states)
    x = history.grid.x
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    for i, t in enumerate(history.times):
        tt = _fmt(t)
        parts = [vals[i, c] for c in range(vals.shape[1])]
        for j in range(x.size):
            row = [tt, _fmt(x[j])]
            for p in parts:
                row += [_fmt(p[j].real), _fmt(p[j].imag)]
            out.write(",".join(row) + "\n")
    _atomic_write(path, out.getvalue())


def read_snapshots(path):
    """Return ``(columns, times, x, values)`` with ``values`` of shape
    ``(n_snapshots, n_components, n_points)`` complex."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    times_all = data[:, 0]
    times = np.unique(times_all)
    npts = int(np.sum(times_all == times[0]))
    ncomp = (len(cols) - 2) // 2
    data = data.reshape(times.size, npts, len(cols))
    values = np.empty((times.size, ncomp, npts), dtype=complex)
    for c in range(ncomp):
        values[:, c, :] = data[:, :, 2 + 2 * c] + 1j * data[:, :, 3 + 2 * c]
    return cols, times, data[0, :, 1], values


TRAJECTORY_COLUMNS = ["traj_id", "component", "t", "x", "v", "R", "S", "status"]


def write_trajectories(ensemble, path) -> None:
    out = io.StringIO()
    out.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    for tid, traj in enumerate(ensemble):
        for i, t in enumerate(traj.times):
            out.write(",".join([str(tid), str(traj.component), _fmt(t), _fmt(traj.positions[i]),
                                _fmt(traj.v[i]), _fmt(traj.R[i]), _fmt(traj.S[i]),
                                traj.status]) + "\n")
    _atomic_write(path, out.getvalue())


def read_trajectories(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(report, txt_path, json_path=None) -> None:
    lines = [f"# quantraj verification report: overall {'PASS' if report.passed else 'FAIL'}"]
    for e in report.entries:
        lines.append(f"{e.name} residual={_fmt(e.residual)} tolerance={_fmt(e.tolerance)} "
                     f"{e.status}")
    _atomic_write(txt_path, "\n".join(lines) + "\n")
    if json_path is not None:
        _atomic_write(json_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_manifest(scenario: Scenario, path, extra: dict | None = None) -> None:
    from . import __version__

    doc = {"scenario": scenario_to_dict(scenario),
           "grid": {"x_min": scenario.grid.x_min, "x_max": scenario.grid.x_max,
                    "n_points": scenario.grid.n_points, "dx": scenario.grid.dx},
           "versions": {"quantraj": __version__, "numpy": np.__version__}}
    if extra:
        doc.update(extra)
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
