import copy
import json
import subprocess
import sys

import numpy as np
import pytest

from mfg_decode import cli
from mfg_decode.acceptance import CriterionResult
from mfg_decode.config import REFERENCE
from mfg_decode.io import read_container


def _write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


@pytest.fixture
def tiny(tmp_path):
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"].update(n_cells=17, n_time=16)
    raw["probe"] = {"rhos": [2, 4], "tau": 1.0}
    raw["reconstruction"]["max_order"] = 2
    return raw


@pytest.mark.parametrize("command", ["stationary", "forward", "linearize", "probe", "reconstruct"])
def test_subcommands_succeed_and_stamp_outputs(tmp_path, tiny, command):
    out = tmp_path / "out"
    cfg = _write(tmp_path, tiny)
    assert cli.main([command, "--config", cfg, "--out", str(out), "--seed", "3"]) == cli.EXIT_OK
    files = sorted(out.iterdir())
    assert files
    for f in files:
        if f.suffix == ".csv":
            assert "seed=3" in f.read_text().splitlines()[0]
        elif f.suffix == ".mfgc":
            assert read_container(f)[2]["seed"] == 3
        elif f.suffix == ".json":
            assert json.loads(f.read_text())["seed"] == 3


def test_probe_sweep_columns(tmp_path, tiny):
    out = tmp_path / "p"
    assert cli.main(["probe", "--config", _write(tmp_path, tiny), "--out", str(out)]) == 0
    lines = [l for l in (out / "probe_sweep.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "rho,zeta_x,xi_x,tau,remainder_norm,pairing_re,pairing_im"
    assert len(lines) == 3


def test_outputs_are_deterministic(tmp_path, tiny):
    tiny["reconstruction"]["noise_level"] = 0.01
    cfg = _write(tmp_path, tiny)
    runs = []
    for k, jobs in enumerate((1, 3)):
        out = tmp_path / f"r{k}"
        assert cli.main(["reconstruct", "--config", cfg, "--out", str(out), "--seed", "7", "--jobs", str(jobs)]) == 0
        runs.append({f.name: f.read_bytes() for f in out.iterdir()})
    assert runs[0] == runs[1]


def test_empty_battery_gives_the_stationary_extension(tmp_path, tiny):
    tiny["problem"]["perturbations"] = []
    out = tmp_path / "f"
    assert cli.main(["forward", "--config", _write(tmp_path, tiny), "--out", str(out)]) == 0
    _, u, _ = read_container(out / "u_stationary.mfgc")
    assert np.abs(u - u[0]).max() < 1e-10


def test_config_error_exit_code(tmp_path, tiny, capsys):
    del tiny["problem"]["metric"]
    assert cli.main(["stationary", "--config", _write(tmp_path, tiny)]) == cli.EXIT_CONFIG
    assert "problem.metric" in capsys.readouterr().err
    assert cli.main(["stationary", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path, tiny, capsys):
    tiny["problem"]["perturbations"] = [{"g": "sin(pi*t)", "eps": 50.0}]
    assert cli.main(["forward", "--config", _write(tmp_path, tiny), "--out", str(tmp_path / "o")]) == cli.EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_verify_runs_selected_criteria(tmp_path, tiny):
    out = tmp_path / "v"
    assert cli.main(["verify", "--config", _write(tmp_path, tiny), "--out", str(out), "--only", "3", "8"]) == 0
    report = json.loads((out / "acceptance.json").read_text())
    assert report["passed"] and [c["number"] for c in report["criteria"]] == [3, 8]


def test_verify_failure_exit_code(tmp_path, tiny, monkeypatch):
    failing = CriterionResult(1, "forced", False, {}, "never")
    monkeypatch.setattr(cli, "run_battery", lambda *a, **k: [failing])
    assert cli.main(["verify", "--config", _write(tmp_path, tiny), "--out", str(tmp_path / "v")]) == cli.EXIT_ACCEPTANCE


def test_module_entry_point(tmp_path, tiny):
    cfg = _write(tmp_path, tiny)
    res = subprocess.run(
        [sys.executable, "-m", "mfg_decode.cli", "stationary", "--config", cfg, "--out", str(tmp_path / "s")],
        capture_output=True, text=True,
    )
    assert res.returncode == 0, res.stderr
    bad = subprocess.run([sys.executable, "-m", "mfg_decode.cli", "nonsense", "--config", cfg], capture_output=True)
    assert bad.returncode == 2
