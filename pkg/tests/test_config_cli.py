import json
from pathlib import Path

import pytest
import yaml

from robust2bsde import ConfigurationError, black_scholes
from robust2bsde.cli import main
from robust2bsde.config import build, load_config, validate_config

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"

MINIMAL = {
    "task": "robust-value",
    "market": {"sigmas": [0.1, 0.3], "x0": 100.0, "horizon": 1.0},
    "generator": {"name": "zero"},
    "claim": {"name": "call", "params": {"strike": 100.0}},
    "numerics": {"steps": 10, "seed": 0, "nodes": 201},
}


def _write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def _without(cfg, section, key):
    out = json.loads(json.dumps(cfg))
    del out[section][key]
    return out


def test_defaults_are_filled():
    cfg = validate_config(MINIMAL)
    assert cfg["numerics"]["mode"] == "lattice"
    assert cfg["tolerances"]["hedge_fraction"] == 0.005
    exp = build(cfg)
    assert exp.grid.steps == 10 and exp.x0 == 100.0


def test_missing_seed_names_the_field(tmp_path, capsys):
    path = _write_cfg(tmp_path, _without(MINIMAL, "numerics", "seed"))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "numerics/seed" in capsys.readouterr().err


def test_unknown_generator_lists_valid_names(tmp_path, capsys):
    cfg = dict(MINIMAL, generator={"name": "three_rate"})
    assert main(["run", "--config", str(_write_cfg(tmp_path, cfg))]) == 2
    err = capsys.readouterr().err
    assert "three_rate" in err and "two_rate" in err and "linear" in err


def test_schema_errors():
    with pytest.raises(ConfigurationError, match="steps"):
        validate_config(dict(MINIMAL, numerics={"steps": 0, "seed": 0}))
    with pytest.raises(ConfigurationError, match="surprise"):
        validate_config(dict(MINIMAL, surprise=1))
    with pytest.raises(ConfigurationError):
        validate_config(["not", "a", "mapping"])
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config("/nonexistent/cfg.yaml")


def test_bad_params_are_configuration_errors(tmp_path, capsys):
    cfg = dict(MINIMAL, claim={"name": "call", "params": {"strik": 100.0}})
    assert main(["run", "--config", str(_write_cfg(tmp_path, cfg))]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_unknown_suite(tmp_path, capsys):
    assert main(["verify", "--suite", "nightly", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "nightly" in err and "fast" in err and "full" in err


def test_robust_value_outputs(tmp_path):
    out = tmp_path / "o"
    cfg = dict(MINIMAL, verifiers=["dpp", "minimality"])
    assert main(["-q", "run", "--config", str(_write_cfg(tmp_path, cfg)), "--out", str(out)]) == 0
    result = json.loads((out / "result.json").read_text())
    assert result["passed"] and result["task"] == "robust-value"
    assert "minimality" in result["verifiers"]
    assert {k for k in result["verifiers"] if k.startswith("dpp_k")}
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] and not report["failures"]
    assert (out / "surface.csv").read_text().startswith("k,bucket,state,V,ustar,Z")


def test_solve_bsde_outputs(tmp_path):
    out = tmp_path / "o"
    cfg = dict(MINIMAL, task="solve-bsde")
    assert main(["-q", "run", "--config", str(_write_cfg(tmp_path, cfg)), "--out", str(out)]) == 0
    assert (out / "diagnostics.csv").exists() and (out / "surface.csv").exists()


def test_seed_override_changes_path_results(tmp_path):
    cfg = dict(MINIMAL, task="robust-value", verifiers=[],
               numerics={"steps": 5, "seed": 0, "mode": "path", "paths": 2000})
    path = _write_cfg(tmp_path, cfg)
    values = []
    for seed in ("1", "2", "1"):
        out = tmp_path / f"o{seed}{len(values)}"
        assert main(["-q", "run", "--config", str(path), "--seed", seed, "--out", str(out)]) == 0
        result = json.loads((out / "result.json").read_text())
        assert result["config"]["numerics"]["seed"] == int(seed)
        values.append(result["result"]["value"])
    assert values[0] == values[2] != values[1]


def test_singleton_experiment_is_byte_identical(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["-q", "run", "--config", str(EXPERIMENTS / "singleton.yaml"),
                     "--out", str(out)]) == 0
    for name in ("result.json", "report.json", "surface.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    checks = json.loads((outs[0] / "report.json").read_text())["checks"]
    assert checks and all(abs(c["value"]) <= 1e-10 for c in checks)


@pytest.mark.parametrize("name", ["butterfly", "two_rate"])
def test_experiments_pass(tmp_path, name):
    assert main(["-q", "run", "--config", str(EXPERIMENTS / f"{name}.yaml"),
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "result.json").read_text())["passed"]


@pytest.mark.slow
def test_uvm_call_experiment(tmp_path):
    assert main(["-q", "run", "--config", str(EXPERIMENTS / "uvm_call.yaml"),
                 "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "result.json").read_text())
    assert abs(result["result"]["price"] / black_scholes(100, 100, 0.3, 0, 1) - 1) <= 0.005
