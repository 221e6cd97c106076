"""Command-line entry point: ``quantraj run | verify | export``.

Exit codes: 0 success, 1 verification failure, 2 parse/validation/usage
error, 3 runtime error.  Data go to stdout or files; diagnostics go to
stderr only.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ParseError, QuantrajError, ValidationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
EXPORTS = ("density_heatmap", "trajectories_overlay", "velocity_field", "residual_convergence")
FORMATS = ("csv", "json")
SCHEMA_NOTE = ("Scenario files are JSON documents; the schema (every key, its type and "
               "default) is documented in docs/scenario_schema.md of the source "
               "distribution.  Reference scenarios ship in quantraj/scenarios/.")


class UsageError(Exception):
    """Bad command-line input (exit code 2)."""


def _err(op: str, exc: BaseException) -> None:
    print(f"error: {op}: {type(exc).__name__}: {exc}", file=sys.stderr)


# --------------------------------------------------------------------------
# run


def _with_seed_override(scenario, count: int):
    from dataclasses import replace

    from .scenario_io import SPINOR_KINDS

    comps = (0, 1) if scenario.initial_state.kind in SPINOR_KINDS else (0,)
    if scenario.quantile_components and scenario.initial_state.kind in SPINOR_KINDS:
        comps = scenario.quantile_components
    return replace(scenario, seeds=(), quantile_seeds=count, quantile_components=tuple(comps))


def cmd_run(scenario_path, out_dir, seeds: int | None = None) -> int:
    """Propagate a scenario, integrate its trajectories and write
    ``snapshots.csv``, ``trajectories.csv`` and ``manifest.json``."""
    from .characteristics import ModelContext, SnapshotFields, integrate_ensemble
    from .propagators import propagate
    from .scenario_io import (build_initial_state, load_scenario, resolve_seeds,
                              write_manifest, write_snapshots, write_trajectories)

    op = "scenario_io.load_scenario"
    try:
        scen = load_scenario(scenario_path)
        if seeds is not None:
            if seeds < 1:
                raise ValidationError("seeds", "--seeds must be a positive integer")
            scen = _with_seed_override(scen, seeds)
    except (ParseError, ValidationError) as e:
        _err(op, e)
        return EXIT_USAGE
    try:
        op = "scenario_io.build_initial_state"
        state = build_initial_state(scen)
        op = "propagators.propagate"
        history = propagate(scen, state)
        op = "characteristics.integrate_ensemble"
        ctx = ModelContext.from_scenario(scen)
        sf = SnapshotFields(history, ctx)
        seed_list = resolve_seeds(scen, state)
        ensemble = []
        for comp in sorted({c for _, c in seed_list}):
            xs = [x for x, c in seed_list if c == comp]
            ensemble += integrate_ensemble(history, ctx, xs, comp, sf)
        op = "scenario_io.write_snapshots"
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_snapshots(history, out / "snapshots.csv")
        op = "scenario_io.write_trajectories"
        write_trajectories(ensemble, out / "trajectories.csv")
        op = "scenario_io.write_manifest"
        statuses = [t.status for t in ensemble]
        write_manifest(scen, out / "manifest.json", {
            "n_snapshots": len(history), "snapshot_dt": history.dt,
            "n_trajectories": len(ensemble),
            "trajectory_status": {s: statuses.count(s) for s in sorted(set(statuses))}})
    except (QuantrajError, OSError, ValueError) as e:
        _err(op, e)
        return EXIT_RUNTIME
    print(f"wrote {out / 'snapshots.csv'}, {out / 'trajectories.csv'}, "
          f"{out / 'manifest.json'}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(suite: str = "all", tol_scale: float = 1.0, out_dir=None,
               inject_fault: bool = False, quiet: bool = False) -> int:
    """Run the verification suite; exit 0 iff every entry passes."""
    from .scenario_io import write_report
    from .verify import run_suite, select_checks

    try:
        specs = select_checks(suite)
    except KeyError as e:
        from .verify import check_names

        print(f"error: verify.select_checks: unknown check {e.args[0]!r}; valid: "
              f"{', '.join(check_names())}", file=sys.stderr)
        return EXIT_USAGE
    if not tol_scale > 0:
        print("error: --tol-scale must be positive", file=sys.stderr)
        return EXIT_USAGE

    def progress(entry):
        if not quiet:
            print(f"{entry.status} {entry.name} residual={entry.residual:.3e} "
                  f"tolerance={entry.tolerance:.1e} ({entry.runtime:.1f}s)", file=sys.stderr)

    try:
        report = run_suite(specs, tol_scale=tol_scale, inject_fault=inject_fault,
                           progress=progress)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_report(report, out / "report.txt", out / "report.json")
    except (QuantrajError, OSError) as e:
        _err("verify.run_suite", e)
        return EXIT_RUNTIME
    for name in report.failed():
        print(f"FAILED: {name}", file=sys.stderr)
    print(f"overall: {'PASS' if report.passed else 'FAIL'} "
          f"({len(report.entries)} checks)", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


# --------------------------------------------------------------------------
# export


def _load_run(run_dir: Path):
    from .scenario_io import read_snapshots, scenario_from_dict

    manifest = json.loads((run_dir / "manifest.json").read_text())
    scen = scenario_from_dict(manifest["scenario"])
    cols, times, x, values = read_snapshots(run_dir / "snapshots.csv")
    return scen, manifest, times, x, values


def _history_from_values(scen, manifest, times, values):
    from .fields import ComplexField, KGState, SpinorField
    from .propagators import SnapshotHistory

    g = scen.grid
    states = []
    for i, t in enumerate(times):
        comps = [ComplexField(g, float(t), values[i, c]) for c in range(values.shape[1])]
        if scen.model == "klein_gordon":
            states.append(KGState(comps[0], comps[1]))
        elif scen.model in ("pauli", "weyl"):
            states.append(SpinorField(tuple(comps)))
        else:
            states.append(comps[0])
    dt = manifest.get("snapshot_dt", scen.dt * scen.snapshot_stride)
    return SnapshotHistory(scen.model, dt, states, scen.eps_node, scen.constants.hbar)


def export_table(run_dir, what: str) -> tuple[list[str], list[list]]:
    """Long-format table ``(columns, rows)`` for ``what``."""
    run_dir = Path(run_dir)
    if what == "trajectories_overlay":
        from .scenario_io import read_trajectories

        # traj_id is unique across spinor components
        rows = [[int(r["traj_id"]), float(r["t"]), float(r["x"])]
                for r in read_trajectories(run_dir / "trajectories.csv")]
        return ["traj_id", "t", "x"], rows
    if what == "residual_convergence":
        doc = json.loads((run_dir / "report.json").read_text())
        rows = []
        for e in doc["entries"]:
            d = e.get("details", {})
            if "residual_half_dt" in d:
                rows.append([e["name"], 1.0, e["residual"]])
                rows.append([e["name"], 0.5, d["residual_half_dt"]])
        return ["check", "dt_factor", "residual"], rows
    scen, manifest, times, x, values = _load_run(run_dir)
    if what == "density_heatmap":
        if scen.model == "klein_gordon":
            dens = np.abs(values[:, 0]) ** 2
        else:
            dens = np.sum(np.abs(values) ** 2, axis=1)
        rows = [[float(t), float(x[j]), float(dens[i, j])]
                for i, t in enumerate(times) for j in range(x.size)]
        return ["t", "x", "density"], rows
    if what == "velocity_field":
        from .characteristics import ModelContext, SnapshotFields

        history = _history_from_values(scen, manifest, times, values)
        sf = SnapshotFields(history, ModelContext.from_scenario(scen))
        ncomp = 2 if scen.model in ("pauli", "weyl") else 1
        rows = []
        for i, t in enumerate(times):
            for c in range(ncomp):
                vf = sf.get("velocity", i, c)
                for j in range(x.size):
                    v = float(vf.v[j]) if vf.defined_mask[j] else float("nan")
                    rows.append([float(t), c, float(x[j]), v, int(vf.defined_mask[j])])
        return ["t", "component", "x", "v", "defined"], rows
    raise UsageError(f"unknown export {what!r}; valid: {', '.join(EXPORTS)}")


def _render(cols, rows, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["%.17g" % v if isinstance(v, float) else v for v in r])
        return buf.getvalue()
    recs = [{c: (None if isinstance(v, float) and np.isnan(v) else v) for c, v in zip(cols, r)}
            for r in rows]
    return json.dumps(recs, indent=1) + "\n"


def cmd_export(run_dir, what: str, fmt: str = "csv", output=None) -> int:
    """Emit a plot-ready table from a run (or verify) output directory."""
    if what not in EXPORTS:
        print(f"error: unknown export {what!r}; valid: {', '.join(EXPORTS)}", file=sys.stderr)
        return EXIT_USAGE
    if fmt not in FORMATS:
        print(f"error: unknown format {fmt!r}; valid: {', '.join(FORMATS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cols, rows = export_table(run_dir, what)
        text = _render(cols, rows, fmt)
    except (ParseError, ValidationError) as e:
        _err("cli.export_table", e)
        return EXIT_USAGE
    except (QuantrajError, OSError, KeyError, ValueError) as e:
        _err("cli.export_table", e)
        return EXIT_RUNTIME
    if output is None:
        try:
            sys.stdout.write(text)
            sys.stdout.flush()
        except BrokenPipeError:
            # reader closed early (e.g. piped into head); not an error for a data stream
            sys.stdout = open(os.devnull, "w")
    else:
        Path(output).write_text(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="quantraj",
        description="Quantum trajectories as characteristics: propagate, verify, export.",
        epilog=SCHEMA_NOTE)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="propagate a scenario and integrate its trajectories",
                       epilog=SCHEMA_NOTE)
    r.add_argument("scenario", help="scenario JSON file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seeds", type=int, default=None,
                   help="replace the scenario's seeds by N quantiles of the initial density")

    v = sub.add_parser("verify", help="run the verification suite on the reference scenarios",
                       epilog=SCHEMA_NOTE)
    v.add_argument("--suite", default="all",
                   help="'all' or a comma list of check names or name[scenario] keys")
    v.add_argument("--tol-scale", type=float, default=1.0,
                   help="multiply every tolerance (exploratory runs only)")
    v.add_argument("--out", default=None, help="directory for report.txt and report.json")
    v.add_argument("--inject-fault", action="store_true",
                   help="apply each check's documented fault injection (every check must fail)")
    v.add_argument("--quiet", action="store_true", help="no per-check progress on stderr")

    e = sub.add_parser("export", help="emit plot-ready long-format tables",
                       epilog=SCHEMA_NOTE)
    e.add_argument("run_dir", help="output directory of 'run' (or 'verify --out')")
    e.add_argument("what", help="one of: " + ", ".join(EXPORTS))
    e.add_argument("format", nargs="?", default="csv", help="csv (default) or json")
    e.add_argument("--output", default=None, help="write to this file instead of stdout")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    if args.command == "run":
        return cmd_run(args.scenario, args.out, args.seeds)
    if args.command == "verify":
        return cmd_verify(args.suite, args.tol_scale, args.out, args.inject_fault, args.quiet)
    return cmd_export(args.run_dir, args.what, args.format, args.output)


if __name__ == "__main__":
    sys.exit(main())
