import filecmp
import subprocess
import sys

import numpy as np
import pytest

from conftest import CONFIGS
from wchj.cli import main
from wchj.config import parse_config_text
from wchj.model import read_field_csv

SMALL = """
[system]
m = 2
c_1 = 0.5
c_2 = 0.5
P_1 = 0.5*u_2
P_2 = 0.5*sin(u_1)
a = 0.4
A = 1.2
theta = 0.5

[grid]
n_x = 32
T = 0.25
n_t = 16

[operator]
v_max = 4
tol = 1e-10

[initial]
phi_1 = cos(2*pi*x)
phi_2 = sin(2*pi*x)
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(trees_equal(a / d, b / d) for d in cmp.common_dirs)


def test_validate(capsys):
    assert main(["validate", str(CONFIGS / "cross_coupling.cfg")]) == 0
    out = capsys.readouterr().out
    assert ": pass" in out and "FAIL" not in out


def test_validate_failure(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(SMALL.replace("P_1 = 0.5*u_2", "P_1 = 2*u_2"))
    assert main(["validate", str(path)]) == 1


def test_run_writes_outputs(small_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(small_cfg), "--out", str(out)]) == 0
    for name in ("solution.csv", "report.csv", "audit.csv", "audit.txt", "config.cfg"):
        assert (out / name).is_file(), name
    curves = sorted((out / "curves").glob("*.csv"))
    assert curves and curves[0].read_text().startswith("slice,t,x,vx,step_action")
    exp = parse_config_text(SMALL)
    u = read_field_csv(out / "solution.csv", exp.build_grid())
    assert u.values.shape == (2, 17, 32)
    assert (out / "report.csv").read_text().splitlines()[1].endswith(",")
    text = (out / "audit.txt").read_text()
    assert "[PASS] fixed-point residual (hard)" in text
    assert "[PASS] contraction (hard)" in text
    assert "[PASS] calibration equality (hard)" in text
    assert "PASS" in capsys.readouterr().out


def test_run_flags(small_cfg, tmp_path):
    out = tmp_path / "out"
    code = main(["run", str(small_cfg), "--out", str(out), "--audit", "none", "--tol", "1e-8",
                 "--max-iter", "50", "--timing", "--set", "operator.quadrature=midpoint"])
    assert code == 0
    cfg = (out / "config.cfg").read_text()
    assert "quadrature = midpoint" in cfg and "tol = 1e-08" in cfg and "audit = none" in cfg
    assert not (out / "curves").exists()
    assert not (out / "report.csv").read_text().splitlines()[1].endswith(",")


def test_bad_override(small_cfg, tmp_path, capsys):
    assert main(["run", str(small_cfg), "--out", str(tmp_path / "o"), "--set", "tol=1"]) == 2
    assert "section.key=value" in capsys.readouterr().err


def test_config_error_exit(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(SMALL.replace("a = 0.4", "a = 1.5"))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "0<a<1<A" in capsys.readouterr().err


def test_nan_initial_csv(tmp_path, capsys):
    rows = ["component,ix,value"] + [f"{i},{j},{0.1 * j}" for i in (1, 2) for j in range(32)]
    rows[6] = "1,5,nan"
    (tmp_path / "phi.csv").write_text("\n".join(rows) + "\n")
    text = SMALL.replace("phi_1 = cos(2*pi*x)\nphi_2 = sin(2*pi*x)", "csv = phi.csv")
    path = tmp_path / "nan.cfg"
    path.write_text(text)
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "row 7: non-finite" in capsys.readouterr().err


def test_not_converged(small_cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", str(small_cfg), "--out", str(out), "--max-iter", "2"]) == 1
    assert "did not reach tol" in capsys.readouterr().err
    assert (out / "report.csv").is_file()


def test_deterministic(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(small_cfg), "--out", str(a)]) == 0
    assert main(["run", str(small_cfg), "--out", str(b)]) == 0
    assert trees_equal(a, b)


def test_memory_cap(small_cfg, tmp_path, capsys):
    code = main(["run", str(small_cfg), "--out", str(tmp_path / "o"), "--set", "run.memory_cap_mb=0.001"])
    assert code == 1
    err = capsys.readouterr().err
    assert "refusing" in err and "MiB" in err
    assert main(["refine", str(small_cfg), "--levels", "3", "--set", "run.memory_cap_mb=0.5"]) == 1
    assert "level" in capsys.readouterr().err


def test_refine_constant(tmp_path, capsys):
    path = tmp_path / "const.cfg"
    path.write_text(SMALL.replace("P_1 = 0.5*u_2\nP_2 = 0.5*sin(u_1)\n", "").replace(
        "phi_1 = cos(2*pi*x)\nphi_2 = sin(2*pi*x)", "phi_1 = 1.5\nphi_2 = -2"))
    assert main(["refine", str(path), "--levels", "3", "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "refine.csv").read_text().splitlines()
    assert lines[0] == "level,n_x,n_t,diff_to_next,order"
    assert [ln.split(",")[3] for ln in lines[1:3]] == ["0.000000e+00", "0.000000e+00"]
    assert capsys.readouterr().out.splitlines()[0] == lines[0]


def test_refine_needs_two_levels(small_cfg, capsys):
    assert main(["refine", str(small_cfg), "--levels", "1"]) == 1


def test_plots(small_cfg, tmp_path):
    pytest.importorskip("matplotlib")
    out = tmp_path / "o"
    assert main(["run", str(small_cfg), "--out", str(out), "--plots"]) == 0
    names = {p.name for p in (out / "figures").glob("*.png")}
    assert {"solution.png", "residuals.png", "curves.png", "lipschitz.png"} <= names


def test_entry_point(small_cfg, tmp_path):
    res = subprocess.run([sys.executable, "-m", "wchj.cli", "validate", str(small_cfg)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
