import copy
import json
from pathlib import Path

import numpy as np
import pytest

from mfg_decode.config import REFERENCE, ExperimentConfig, evaluate, load_config, reference_config, spacetime_field
from mfg_decode.errors import ConfigError
from mfg_decode.grid import Grid

ROOT = Path(__file__).resolve().parents[1]


def test_expressions_use_a_whitelist():
    env = {"x": np.array([0.0, 0.5])}
    assert np.allclose(evaluate("1 + 0.5*sin(2*pi*x)", env), [1.0, 1.0])
    assert evaluate(2, env) == 2.0
    for bad in ("__import__('os')", "x.real", "open('f')", "[1, 2]", "sin(x, out=x)"):
        with pytest.raises(ConfigError):
            evaluate(bad, env)
    with pytest.raises(ConfigError, match="unknown name"):
        evaluate("y + 1", env)


def test_spacetime_fields_broadcast():
    g = Grid.unit(5, n_time=4)
    f = spacetime_field(g, "t*x", "f")
    assert f.shape == g.st_shape
    assert f[-1, -1] == pytest.approx(1.0)
    with pytest.raises(ConfigError, match="not finite"):
        spacetime_field(g, "log(x)", "f")


def test_shipped_reference_matches_the_builtin():
    shipped = json.loads((ROOT / "configs" / "reference.json").read_text())
    assert shipped == REFERENCE
    assert load_config(ROOT / "configs" / "reference.json").digest == reference_config().digest


def test_missing_metric_names_the_path(tmp_path):
    raw = copy.deepcopy(REFERENCE)
    del raw["problem"]["metric"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match="problem.metric"):
        load_config(path)


def test_unreadable_configs(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    p = tmp_path / "broken.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


def test_bad_entries_are_reported():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["cost"] = {"1": "x"}
    with pytest.raises(ConfigError, match="problem.cost.1"):
        ExperimentConfig(raw).cost(Grid.unit(5, n_time=2), np.ones(5))
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"]["dim"] = 3
    with pytest.raises(ConfigError, match="dim"):
        ExperimentConfig(raw).grid()
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["solver"] = {"bogus": 1}
    with pytest.raises(ConfigError, match="problem.solver"):
        ExperimentConfig(raw).settings()


def test_digest_tracks_content_and_overrides():
    a = reference_config()
    b = a.with_overrides(seed=5)
    assert a.digest != b.digest and b.run["seed"] == 5
    assert a.with_overrides(seed=None).digest == a.digest


def test_perturbation_amplitude_defaults_to_measurement_step():
    cfg = reference_config()
    g = cfg.grid()
    assert all(p.eps == REFERENCE["reconstruction"]["eps"] for p in cfg.perturbations(g))


def test_two_dimensional_problem_assembles():
    raw = copy.deepcopy(REFERENCE)
    raw["problem"]["grid"] = {"dim": 2, "n_cells": [9, 7], "n_time": 4}
    raw["problem"]["metric"] = {"g": [["1", "0"], ["0", "1 + 0.2*y"]], "kappa": "1 + 0.1*x*y"}
    raw["problem"]["stationary"] = {"u_boundary": "0.3*x + 0.1*y", "m_boundary": "1"}
    p = ExperimentConfig(raw).problem()
    assert p.grid.shape == (9, 7) and p.metric.g.shape == (9, 7, 2, 2)
