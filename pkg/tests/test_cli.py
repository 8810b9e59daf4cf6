import json
import os
import subprocess
import sys

import pytest

from delaymm.cli import main
from delaymm.model import DEFAULT_BOUNDS, config_text

MODEL = {
    "beta": "1", "zeta": "1", "beta0": "1", "zeta0": "1", "rho_I": "0.25*exp(-a)", "d": 2,
    "zp_1": "cos(0.5*cos(pi*x))", "zp_2": "sin(0.5*cos(pi*x))", "epsilon": 0.1, "T": 0.05,
    "bounds": DEFAULT_BOUNDS,
}
NUMERICS = {"delta_a": 0.04, "Nx": 5, "tol_age": 1e-12}


def _config(tmp_path, model=None, numerics=None, run=None, name="c.ini"):
    path = tmp_path / name
    path.write_text(config_text(dict(MODEL, **(model or {})), dict(NUMERICS, **(numerics or {})), run))
    return str(path)


@pytest.mark.parametrize("cmd", ["validate", "density", "flow", "limit", "layer"])
def test_commands_pass(tmp_path, cmd):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    assert main([cmd, "--config", cfg, "--out", str(out), "--stride", "5"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["ok"] and summary["command"] == cmd
    assert summary["checks"]


def test_sweeps_and_kernel(tmp_path):
    cfg = _config(tmp_path, run={"da_list": "0.04, 0.02", "eps_list": "0.1, 0.05", "checks": "lambda_bound"})
    for cmd in ("sweep-da", "sweep-eps"):
        out = tmp_path / cmd
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0
    assert (tmp_path / "sweep-da" / "sweep_da.csv").read_text().startswith("delta_a,err_yt,order_err_yt\n")
    header = (tmp_path / "sweep-eps" / "sweep_eps.csv").read_text().splitlines()[0]
    assert header.startswith("epsilon,err_z_c0,err_rho_weighted,lambda_l1_sup,Ldotz_l1,h1_time_sum")
    cfg = _config(tmp_path, {"rho_I": "well_prepared"}, run={"init": "discrete_steady"}, name="k.ini")
    out = tmp_path / "kernel"
    assert main(["kernel", "--config", cfg, "--out", str(out), "--format", "json"]) == 0
    tab = json.loads((out / "kernel.json").read_text())
    assert abs(tab["rows"][0]["K_eps"]) <= 1e-8


def test_json_format(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    assert main(["density", "--config", cfg, "--out", str(out), "--format", "json", "--stride", "10"]) == 0
    data = json.loads((out / "density.json").read_text())
    assert data["header"] == ["n", "t", "j", "a", "k", "x", "rho"]


def test_exit_codes(tmp_path):
    out = str(tmp_path / "o")
    bad = tmp_path / "bad.ini"
    bad.write_text(config_text(MODEL, dict(NUMERICS, delta_t=0.004)))
    assert main(["density", "--config", str(bad), "--out", out]) == 1
    assert main(["density", "--config", str(tmp_path / "missing.ini"), "--out", out]) == 1
    assert main(["bogus"]) == 1
    assert main(["density", "--config", _config(tmp_path), "--stride", "0"]) == 1
    hyp = _config(tmp_path, {"zp_1": "1", "zp_2": "1"}, name="h.ini")
    assert main(["validate", "--config", hyp, "--out", out]) == 1
    assert main(["flow", "--config", hyp, "--out", out]) == 1
    # a failing acceptance check exits 2
    fail = _config(tmp_path, run={"da_list": "0.04, 0.03"}, name="f.ini")
    assert main(["sweep-da", "--config", fail, "--out", out]) == 2
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["ok"] is False


def test_reproducible_bytes(tmp_path):
    cfg = _config(tmp_path, run={"eps_list": "0.1, 0.05", "checks": "lambda_bound"})
    outs = []
    for i, threads in enumerate(("1", "2", "1")):
        out = tmp_path / f"r{i}"
        assert main(["sweep-eps", "--config", cfg, "--out", str(out), "--threads", threads]) == 0
        outs.append((out / "sweep_eps.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    assert b"\r" not in outs[0]


def test_console_entry_point(tmp_path):
    cfg = _config(tmp_path)
    res = subprocess.run([sys.executable, "-m", "delaymm.cli", "validate", "--config", cfg, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert all(line.startswith(("PASS", "FAIL")) for line in res.stdout.splitlines())
