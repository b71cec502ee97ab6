import json
import subprocess
import sys

import numpy as np
import pytest

from geoehrenfest import cli


def ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


SMALL_SAMPLE = """
[model]
type = toy
epsilon = 0.8
[sampler]
n_samples = 3000
burn_in = 200
seed = 7
[average]
observables = energy, one, sigma_z
"""


def test_simulate_writes_outputs(tmp_path):
    cfg = ini(tmp_path, "[integrator]\nn_steps = 2000\nrecord_every = 100\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "simulate.json").read_text())
    assert summary["n_records"] == 21 and summary["error"] is None
    assert summary["max_norm_deviation"] <= 1e-12
    header = (tmp_path / "o" / "trajectory.csv").read_text().splitlines()[0]
    assert header.startswith("t,") and header.endswith("energy,norm")


def test_simulate_spin_oscillator_rk4(tmp_path):
    cfg = ini(tmp_path, "[model]\ntype = spin-oscillator\n[integrator]\nmethod = rk4\nn_steps = 500\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "simulate.json").read_text())["energy_drift"] < 1e-8


def test_zero_steps_rejected_without_output(tmp_path, capsys):
    cfg = ini(tmp_path, "[integrator]\nn_steps = 0\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 1
    assert "n_steps" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = ini(tmp_path, "[model]\ntype = toy\n\n[integrator]\ndt = 0.01\nstepz = 3\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "run.ini:6" in err and "stepz" in err


def test_non_hermitian_matrix_file(tmp_path, capsys):
    mat = tmp_path / "m.json"
    mat.write_text(json.dumps({"h0": [[0, 1], [0, 0]], "couplings": [[[1, 0], [0, -1]]], "masses": [1.0]}))
    cfg = ini(tmp_path, f"[model]\ntype = matrix-file\nmatrix_file = {mat}\n[integrator]\nn_steps = 10\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "not Hermitian" in err and "1" in err
    assert not (tmp_path / "o").exists()


def test_matrix_file_model_runs(tmp_path):
    mat = tmp_path / "m.json"
    mat.write_text(json.dumps({
        "h0": {"re": [[0.5, 0], [0, -0.5]]},
        "couplings": [{"re": [[0, 0.2], [0.2, 0]], "im": [[0, 0.1], [-0.1, 0]]}],
        "masses": [1.0], "omegas": [1.0],
    }))
    cfg = ini(tmp_path, f"[model]\ntype = matrix-file\nmatrix_file = {mat}\n[integrator]\nn_steps = 200\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0


def test_poincare_requires_toy(tmp_path, capsys):
    cfg = ini(tmp_path, "[model]\ntype = spin-oscillator\n")
    assert cli.main(["poincare", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "toy" in capsys.readouterr().err


def test_poincare_single_crossing(tmp_path):
    cfg = ini(tmp_path, "[poincare]\ncrossings = 1\n")
    assert cli.main(["poincare", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "poincare.csv").read_text().splitlines()
    assert rows[0] == "n,phi,I_phi" and len(rows) == 2
    assert json.loads((tmp_path / "poincare.json").read_text())["crossings"] == 1


def test_poincare_uncoupled_is_flat(tmp_path):
    cfg = ini(tmp_path, "[model]\nepsilon = 0\n[poincare]\ncrossings = 200\nsteps_per_period = 100\n")
    assert cli.main(["poincare", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = np.loadtxt(tmp_path / "poincare.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(data[:, 2] - 0.6)) <= 1e-10


def test_average_one_and_determinism(tmp_path):
    cfg = ini(tmp_path, SMALL_SAMPLE)
    outs = []
    for k, threads in enumerate(["1", "4"]):
        out = tmp_path / f"o{k}"
        assert cli.main(["average", "--config", cfg, "--out", str(out), "--threads", threads]) == 0
        outs.append((out / "average.json").read_bytes())
    assert outs[0] == outs[1]
    rows = {r["observable"]: r for r in json.loads(outs[0])["averages"]}
    assert rows["one"]["mean"] == pytest.approx(1.0, abs=1e-12)
    assert set(rows["energy"]) == {"observable", "mean", "stdError", "nEff"}
    out = tmp_path / "o2"
    assert cli.main(["average", "--config", cfg, "--out", str(out), "--seed", "8"]) == 0
    assert (out / "average.json").read_bytes() != outs[0]


def test_sample_then_average_from_file(tmp_path):
    cfg = ini(tmp_path, SMALL_SAMPLE)
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path)]) == 0
    ens = tmp_path / "ensemble.csv"
    assert ens.read_text().splitlines()[0] == "R1,P1,q1,q2,p1,p2,weight"
    assert cli.main(["average", "--config", cfg, "--out", str(tmp_path), "--ensemble", str(ens)]) == 0
    direct = json.loads((tmp_path / "average.json").read_text())
    assert direct["n_members"] == 3000


def test_unknown_observable(tmp_path, capsys):
    cfg = ini(tmp_path, SMALL_SAMPLE.replace("sigma_z", "sigma_q"))
    assert cli.main(["average", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "sigma_q" in capsys.readouterr().err


def test_sampler_warning_exit_code(tmp_path):
    cfg = ini(tmp_path, SMALL_SAMPLE.replace("seed = 7", "seed = 7\nclassical_step_scale = 80"))
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path)]) == 3
    assert json.loads((tmp_path / "sample.json").read_text())["sampler"]["warnings"]


def test_json_round_trip(tmp_path):
    cfg = ini(tmp_path, "[integrator]\nn_steps = 300\ndt = 0.002\n[initial]\nI_phi = 0.25\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    again = str(tmp_path / "a" / "simulate.json")
    assert cli.main(["simulate", "--config", again, "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "simulate.json").read_text())
    b = json.loads((tmp_path / "b" / "simulate.json").read_text())
    assert a == b
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_timing_is_opt_in(tmp_path):
    cfg = ini(tmp_path, "[integrator]\nn_steps = 10\n")
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)])
    assert "wall_time_s" not in json.loads((tmp_path / "simulate.json").read_text())
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path), "--timing"])
    assert "wall_time_s" in json.loads((tmp_path / "simulate.json").read_text())


def test_invalid_values(tmp_path):
    for text in ("[model]\nepsilon = -1\n", "[initial]\nI_phi = 1.5\n", "[sampler]\nbeta = 0\n", "[bogus]\nx = 1\n"):
        assert cli.main(["simulate", "--config", ini(tmp_path, text), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 1
    assert cli.main(["sample", "--threads", "0", "--out", str(tmp_path / "x")]) == 1


def test_check_passes_with_doubled_bracket(tmp_path, capsys):
    cfg = ini(tmp_path, "[integrator]\nhbar = 2\n")
    assert cli.main(["check", "--config", cfg, "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    assert all(r["passed"] for r in json.loads((tmp_path / "check.json").read_text())["results"])


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "geoehrenfest.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout


def test_inline_comments(tmp_path):
    cfg = ini(tmp_path, "[model]\ntype = spin-oscillator   ; two-level model\n[integrator]\nn_steps = 20 ; short\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "simulate.json").read_text())["config"]["integrator"]["n_steps"] == 20
