import json
import math
import subprocess
import sys

import pytest
import yaml

from contacthj.cli import main
from contacthj.geometry import read_grid


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main([*args, "--out", str(out)])
    return code, out


def test_flow_oracle_row(tmp_path):
    code, out = run(tmp_path, "flow", "--model", "E1", "--x0", "0", "--p0", "1", "--u0", "0", "--t", "1",
                    "--h", "1e-3")
    assert code == 0
    lines = (out / "trajectory.csv").read_text().strip().splitlines()
    head = lines[0].split(",")
    last = dict(zip(head, map(float, lines[-1].split(","))))
    assert last["t"] == pytest.approx(1.0)
    assert last["x1"] == pytest.approx(1 - math.exp(-1), abs=1e-6)
    assert last["p1"] == pytest.approx(math.exp(-1), abs=1e-6)
    assert last["u"] == pytest.approx(0.5 * math.exp(-1) - 0.5 * math.exp(-2), abs=1e-6)


def test_manifest_contents(tmp_path):
    code, out = run(tmp_path, "flow", "--model", "E1", "--t", "0.1", "--h", "1e-2", "--seed", "7")
    m = json.loads((out / "manifest.json").read_text())
    for key in ("tool", "version", "command", "argv", "config", "seed", "started", "wall_time_s",
                "input_sha256", "outputs", "exit_code"):
        assert key in m
    assert m["seed"] == 7 and m["exit_code"] == 0 and m["command"] == "flow"
    assert set(m["outputs"]) == {"trajectory.csv", "flow.yaml"}


def test_flow_from_config_with_several_states(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"model": "E2", "data": {"states": [[0, 1, 0], [0.5, -1, 0.2]], "T": 0.2}}))
    code, out = run(tmp_path, "flow", "--config", str(cfg), "--workers", "2")
    assert code == 0
    assert (out / "trajectory_000.csv").exists() and (out / "trajectory_001.csv").exists()


def test_semigroup_outputs(tmp_path):
    code, out = run(tmp_path, "semigroup", "--model", "E1", "--phi", "-1", "--t", "0.1", "--dt", "1e-2",
                    "--resolution", "32", "--snapshot-every", "5")
    assert code == 0
    final = read_grid(out / "final.grid")
    assert final.values[0] == pytest.approx(-1.01 ** -10, abs=1e-12)
    assert (out / "initial.grid").exists() and (out / "series.csv").exists()
    assert len(list((out / "snapshots").glob("*.grid"))) == 2


def test_action_outputs(tmp_path):
    code, out = run(tmp_path, "action", "--model", "E1", "--x0", "0", "--u0", "0", "--x", "0.5", "--t", "1")
    assert code == 0
    res = yaml.safe_load((out / "action.yaml").read_text())
    assert res["value"] == pytest.approx(0.0727471, abs=1e-7)
    assert (out / "sweep.csv").read_text().startswith("p0,x_t,u_t")


def test_verify_pass_and_fail_exit_codes(tmp_path):
    common = ["--model", "E1", "--resolution", "32", "--samples", "20", "--horizons", "0.1,0.2", "--dt", "1e-2"]
    code, out = run(tmp_path, "verify", "--battery", "theorem-a", "--phi", "-1", *common)
    assert code == 0
    rep = yaml.safe_load((out / "report.yaml").read_text())
    assert rep["passed"] and rep["unanimous"]
    assert (out / "samples.csv").exists()
    code, _ = run(tmp_path, "verify", "--battery", "theorem-a", "--phi", "0.5", *common)
    assert code == 2


def test_verify_samples_are_deterministic(tmp_path):
    args = ["verify", "--battery", "theorem-a", "--model", "E1", "--phi=-0.3+0.05*sin(2*pi*x1)",
            "--resolution", "32", "--samples", "20", "--horizons", "0.1", "--dt", "1e-2", "--seed", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()


def test_diagnose_and_legendre(tmp_path):
    code, out = run(tmp_path, "diagnose", "--model", "E1")
    assert code == 0 and (out / "diagnostics.yaml").exists()
    code, out = run(tmp_path, "legendre", "--model", "E1", "--u", "0.5", "--n-v", "5")
    assert code == 0
    rows = (out / "legendre.csv").read_text().strip().splitlines()
    assert len(rows) == 6
    v, p, L = map(float, rows[1].split(","))
    assert L == pytest.approx(0.5 * v * v - 0.5)


def test_missing_model_in_config(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("grid:\n  resolution: 64\n")
    code, _ = run(tmp_path, "flow", "--config", str(cfg))
    assert code == 1
    assert "'model'" in capsys.readouterr().err


def test_yaml_syntax_error_location(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model: E1\ngrid:\n  resolution: [1,\n")
    code, _ = run(tmp_path, "flow", "--config", str(cfg))
    assert code == 1
    assert "line" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model: E1\ngrid:\n  cells: 64\n")
    assert run(tmp_path, "flow", "--config", str(cfg))[0] == 1
    assert "cells" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main(["nonsense"]) == 1
    assert main([]) == 1
    assert run(tmp_path, "verify", "--model", "E1", "--battery", "nope")[0] == 1
    assert run(tmp_path, "flow", "--model", "p1^2 +", "--t", "0.1")[0] == 1


def test_grid_model_dimension_mismatch(tmp_path):
    assert run(tmp_path, "semigroup", "--model", "E1", "--dim", "2", "--t", "0.01")[0] == 1


def test_unstable_dt_is_a_config_error(tmp_path):
    assert run(tmp_path, "semigroup", "--model", "E1", "--dt", "1.5", "--t", "2")[0] == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "contacthj", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout
