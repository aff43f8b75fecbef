from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from lyapqfi import cli
from lyapqfi.operators import EigensolverError


def run(*args: str) -> int:
    return cli.main(list(args))


def test_probe_degeneracy(tmp_path):
    out = tmp_path / "p.json"
    assert run("probe", "--n", "4", "--g", "0", "--beta", "4", "--out", str(out)) == 0
    data = json.loads(out.read_text())
    assert data["m"] == 2
    assert run("probe", "--n", "4", "--g", "2", "--out", str(out)) == 0
    data = json.loads(out.read_text())
    assert data["m"] == 1 and data["gap"] > 0
    assert len(data["eigenvalues_head"]) == 16


def test_probe_infinite_temperature_entropy(tmp_path):
    out = tmp_path / "p.json"
    assert run("probe", "--n", "3", "--beta", "0", "--out", str(out)) == 0
    assert json.loads(out.read_text())["S"] == pytest.approx(3 * 0.6931471805599453)


def test_qfi_outputs(tmp_path):
    trace, summary = tmp_path / "t.csv", tmp_path / "s.json"
    code = run(
        "qfi", "--n", "4", "--g", "2", "--x-max", "20", "--adaptive-tol", "1e-3",
        "--tail-window", "5", "--out", str(trace), "--summary", str(summary),
    )
    assert code == 0
    rows = list(csv.reader(trace.open()))
    assert tuple(rows[0]) == ("s", "ds", "dF", "F_cum", "max_bond", "sv_cutoff", "discarded_weight", "wall_ms")
    data = json.loads(summary.read_text())
    assert data["F_X"] <= data["F_oracle_X"] + 1e-9
    assert abs(data["eps_total"]) < 5e-3
    assert data["config"]["extrapolate_tail"] is True


def test_qfi_zero_cutoff(tmp_path, capsys):
    assert run("qfi", "--n", "2", "--x-max", "0") == 0
    data = json.loads(capsys.readouterr().out)
    assert data["F_X"] == 0.0 and data["F_total"] == 0.0


def test_qfi_sld_and_variant(tmp_path, capsys):
    assert run("qfi", "--n", "3", "--x-max", "30", "--step", "0.01", "--quadrature", "trapezoid", "--sld") == 0
    data = json.loads(capsys.readouterr().out)
    assert data["sld_residual"] < 1e-3
    assert run("qfi", "--n", "3", "--x-max", "5", "--step", "0.05", "--variant", "encoding-operator") == 0
    data = json.loads(capsys.readouterr().out)
    assert data["F_variant"] == pytest.approx(data["F_X"], rel=1e-8)


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 3, "g": 0.5, "x-max": 7.0, "step": 0.1}))
    m, _ = cli.load_manifest(["qfi", "--config", str(cfg), "--g", "1.5"])
    assert m.n == 3 and m.g == 1.5 and m.x_max == 7.0 and m.step == 0.1
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("qfi", "--config", str(cfg)) == 2


@pytest.mark.parametrize(
    "args",
    [
        ("sweep", "--n", "2"),
        ("qfi", "--n", "13"),
        ("qfi", "--step", "0.1", "--adaptive-tol", "1e-3"),
        ("qfi", "--beta", "nan"),
        ("qfi", "--x-max", "-1"),
        ("qfi", "--backend", "mpo", "--n", "1"),
        ("qfi", "--out", "/nonexistent-dir/t.csv"),
        ("qfi", "--model", "heisenberg"),
        ("qfi", "--inject-fault", "bogus"),
    ],
)
def test_invalid_manifest_exit_code(args):
    assert run(*args) == 2


def test_numerical_failure_exit_code(monkeypatch):
    def boom(*_a, **_k):
        raise EigensolverError("forced", float("nan"))

    monkeypatch.setattr(cli.probes, "build_probe", boom)
    assert run("qfi", "--n", "2") == 3


def test_qfi_determinism(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        assert run("qfi", "--n", "3", "--x-max", "10", "--adaptive-tol", "1e-3", "--no-timing", "--out", str(p)) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_sweep_determinism_and_columns(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        code = run("sweep", "--n", "3", "--g-list", "0", "1", "2", "--x-max", "5", "--step", "0.05", "--out", str(p))
        assert code == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rows = list(csv.reader(paths[0].open()))
    assert tuple(rows[0]) == cli.SWEEP_COLUMNS
    assert [float(r[0]) for r in rows[1:]] == [0.0, 1.0, 2.0]


def test_bounds_command(tmp_path):
    out = tmp_path / "b.json"
    assert run("bounds", "--n", "4", "--g", "2", "--out", str(out)) == 0
    data = json.loads(out.read_text())
    exact, worst = data["eps_exact"], data["eps_worst"]
    assert all(e <= w + 1e-12 for e, w in zip(exact, worst))


def test_mpo_checkpoint_roundtrip(tmp_path):
    ck = tmp_path / "rho.mpo"
    args = ["qfi", "--backend", "mpo", "--n", "3", "--x-max", "1", "--step", "0.1", "--dbeta", "0.05",
            "--checkpoint", str(ck), "--no-timing"]
    assert run(*args, "--out", str(tmp_path / "a.csv")) == 0
    assert ck.exists()
    assert run(*args, "--out", str(tmp_path / "b.csv")) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert run("qfi", "--backend", "mpo", "--n", "4", "--checkpoint", str(ck)) == 2


def test_validate_passes_and_detects_fault(tmp_path, capsys):
    report = tmp_path / "v.json"
    assert run("validate", "--out", str(report)) == 0
    assert json.loads(report.read_text())["passed"] is True
    assert "mpo-thermal-state" in capsys.readouterr().out
    assert run("validate", "--inject-fault", "quadrature-sign") == 4
    err = capsys.readouterr().err
    assert "lower-bound-quadrature" in err


def test_module_entry_point():
    res = subprocess.run(
        [sys.executable, "-m", "lyapqfi", "qfi", "--n", "2", "--x-max", "1", "--step", "0.1"],
        capture_output=True, text=True, check=False,
    )
    assert res.returncode == 0
    assert json.loads(res.stdout)["steps"] == 10
