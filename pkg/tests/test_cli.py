import csv
import io
import json
import shutil
import subprocess
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from conftest import scenario
from quantraj.cli import EXPORTS, main
from quantraj.scenario_io import serialize_scenario


@pytest.fixture
def scen_file(tmp_path):
    path = tmp_path / "free_gaussian_short.json"
    path.write_text(serialize_scenario(scenario("free_gaussian_short")))
    return path


@pytest.fixture
def run_dir(tmp_path, scen_file):
    out = tmp_path / "out"
    assert main(["run", str(scen_file), "--out", str(out)]) == 0
    return out


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_run_outputs(run_dir):
    assert {p.name for p in run_dir.iterdir()} == {"snapshots.csv", "trajectories.csv",
                                                   "manifest.json"}
    man = json.loads((run_dir / "manifest.json").read_text())
    assert man["scenario"]["name"] == "free_gaussian_short"
    assert man["grid"]["n_points"] == 1024
    assert {"quantraj", "numpy"} <= set(man["versions"])
    assert man["n_snapshots"] == 51 and man["n_trajectories"] == 16


def test_run_missing_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "ParseError" in capsys.readouterr().err


def test_run_validation_error(tmp_path, capsys):
    base = scenario("free_gaussian_short")
    bad = replace(base, initial_state=replace(base.initial_state, sigma0=2 * base.grid.dx))
    path = tmp_path / "bad.json"
    path.write_text(serialize_scenario(bad))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "resolvability" in capsys.readouterr().err


def test_run_seed_override_quantiles(tmp_path, scen_file):
    out = tmp_path / "q"
    assert main(["run", str(scen_file), "--out", str(out), "--seeds", "32"]) == 0
    traj = rows((out / "trajectories.csv").read_text())
    x0 = np.array([float(r["x"]) for r in traj if r["t"] == "0"])
    assert x0.size == 32
    # |psi|^2 of the sigma0 = 1 packet is a unit normal density
    exact = norm.ppf((np.arange(32) + 0.5) / 32)
    assert np.max(np.abs(x0 - exact)) < 1e-3


def test_run_deterministic(tmp_path, scen_file):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", str(scen_file), "--out", str(out), "--seeds", "8"]) == 0
        outs.append(out)
    for f in ("snapshots.csv", "trajectories.csv", "manifest.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_verify_selected_suite(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--suite", "check_weyl_velocities", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    lines = (out / "report.txt").read_text().splitlines()
    assert len(lines) == 4 and all(line.endswith("PASS") for line in lines)
    assert all(json.loads((out / "report.json").read_text())["entries"][i]["status"] == "PASS"
               for i in range(3))
    # verify has no data stream: progress and summary both go to stderr
    assert captured.out == ""
    assert "overall: PASS (3 checks)" in captured.err


def test_verify_newton_only(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "--suite", "check_newton", "--quiet", "--out", str(out)]) == 0
    names = [e["name"] for e in json.loads((out / "report.json").read_text())["entries"]]
    assert len(names) == 5 and all(n.startswith("check_newton[") for n in names)
    assert {"free_gaussian", "sinusoidal_mass", "pauli_bz_harmonic", "kg_gaussian"} <= \
        {n[len("check_newton["):-1] for n in names}


def test_verify_fault_names_failure(capsys):
    assert main(["verify", "--suite", "check_continuity[eigenstate]", "--inject-fault",
                 "--quiet"]) == 1
    assert "FAILED: check_continuity[eigenstate]" in capsys.readouterr().err


def test_verify_tol_scale(capsys):
    assert main(["verify", "--suite", "check_norm_liouville[pauli_coupled]",
                 "--tol-scale", "1e-8", "--quiet"]) == 1


def test_verify_unknown_check(capsys):
    assert main(["verify", "--suite", "check_bogus"]) == 2
    assert "check_bogus" in capsys.readouterr().err


def test_export_heatmap_rows(run_dir, capsys):
    assert main(["export", str(run_dir), "density_heatmap"]) == 0
    table = rows(capsys.readouterr().out)
    assert len(table) == 51 * 1024
    assert set(table[0]) >= {"t", "x"}


def test_export_overlay_columns(run_dir, capsys):
    assert main(["export", str(run_dir), "trajectories_overlay", "csv"]) == 0
    table = rows(capsys.readouterr().out)
    assert list(table[0]) == ["traj_id", "t", "x"]
    assert len(table) == 16 * 51


@pytest.mark.parametrize("what", ["velocity_field", "trajectories_overlay"])
def test_export_json(run_dir, capsys, what, tmp_path):
    target = tmp_path / f"{what}.json"
    assert main(["export", str(run_dir), what, "json", "--output", str(target)]) == 0
    assert capsys.readouterr().out == ""
    data = json.loads(target.read_text())
    assert data


def test_export_residual_convergence(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--suite", "check_continuity[free_gaussian]", "--quiet",
                 "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["export", str(out), "residual_convergence"]) == 0
    table = rows(capsys.readouterr().out)
    assert table and table[0]["check"] == "check_continuity[free_gaussian]"


def test_export_unknown_what(run_dir, capsys):
    assert main(["export", str(run_dir), "histogram"]) == 2
    err = capsys.readouterr().err
    assert all(w in err for w in EXPORTS)


def test_export_missing_run_dir(tmp_path):
    assert main(["export", str(tmp_path / "none"), "density_heatmap"]) in (2, 3)


def test_console_script_streams(run_dir):
    exe = shutil.which("quantraj")
    assert exe is not None
    help_text = subprocess.run([exe, "--help"], capture_output=True, text=True, check=True).stdout
    assert "scenario_schema.md" in help_text
    res = subprocess.run([exe, "export", str(run_dir), "trajectories_overlay"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.splitlines()[0] == "traj_id,t,x"
    bad = subprocess.run([exe, "export", str(run_dir), "nothing"], capture_output=True, text=True)
    assert bad.returncode == 2 and bad.stdout == ""
