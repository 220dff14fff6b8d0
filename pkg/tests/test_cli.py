import json
import os
import subprocess
import sys

import pytest

from fluxcrit.cli import main


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_classify_sink(tmp_path, capsys):
    out = tmp_path / "map.json"
    csv = tmp_path / "map.csv"
    code, stdout, _ = run(["classify", "--field", "sink:strength=1", "--alpha", "1", "--r", "0.1",
                           "--level", "3", "--out", str(out), "--csv", str(csv), "--threads", "2"], capsys)
    assert code == 0
    assert stdout.split() == [str(out), str(csv)]
    doc = json.loads(out.read_text())
    assert doc["signed_flux_member"] == pytest.approx(-1, abs=1e-6)
    assert doc["counts"]["member"] == 1280
    assert "threads" not in doc["config"]
    assert csv.read_text().startswith("tri_index,status\n0,member\n")


def test_classify_rotating_has_no_members(capsys):
    code, stdout, _ = run(["classify", "--field", "rotating:gamma=3", "--alpha", "1", "--r", "0.1",
                           "--level", "2"], capsys)
    assert code == 0
    assert json.loads(stdout)["counts"]["member"] == 0


@pytest.mark.parametrize("argv, msg", [
    (["classify", "--field", "sink:strength=1", "--alpha", "1", "--r", "2"], "r must be < alpha"),
    (["classify", "--field", "vortex:strength=1", "--r", "0.1"], "unknown field"),
    (["classify", "--field", "sink:strength=1"], "--r is required"),
    (["classify", "--field", "sink:strength=1", "--r", "0.1", "--level", "12"], "level"),
    (["flux-scan", "--field", "sink:strength=1", "--p", "0.5"], "p must be >= 1"),
    (["flux-scan", "--field", "sink:strength=1", "--r-grid", "0.1,2"], "alpha"),
    (["tube-verify", "--field", "sink:strength=1", "--r", "0.2"], "--patch is required"),
    (["tube-verify", "--field", "sink:strength=1", "--r", "0.2", "--patch", "blob:x=1"], "bad patch"),
    (["trace", "--field", "sink:strength=1", "--seed", "1,2"], "three components"),
    (["classify", "--field", "sink:strength=1", "--r", "0.1", "--rel-tol", "-1"], "rel_tol"),
    (["report"], "at least one"),
])
def test_config_errors_exit_2(argv, msg, capsys):
    code, stdout, err = run(argv, capsys)
    assert code == 2
    assert stdout == ""
    assert msg in err


def test_argparse_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["classify", "--level", "five"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_bad_threads_env(monkeypatch, capsys):
    monkeypatch.setenv("FLUXCRIT_THREADS", "many")
    code, _, err = run(["classify", "--field", "sink:strength=1", "--r", "0.1", "--level", "1"], capsys)
    assert code == 2 and "FLUXCRIT_THREADS" in err


def test_computation_error_exit_3(capsys):
    # the patch reaches outside the capture region of a uniform flow
    code, stdout, err = run(["tube-verify", "--field", "uniform:dir=0,0,-1", "--r", "0.1",
                             "--patch", "cap:half_angle=0.5", "--resolution", "4"], capsys)
    assert code == 3
    assert "computation failed" in err and stdout == ""


def test_config_file_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"field": "sink:strength=2", "r": 0.2, "level": 1, "alpha": 1.0}))
    code, stdout, _ = run(["classify", "--config", str(cfg)], capsys)
    assert code == 0
    doc = json.loads(stdout)
    assert doc["signed_flux_member"] == pytest.approx(-2, abs=1e-6)
    assert doc["level"] == 1
    code, stdout, _ = run(["classify", "--config", str(cfg), "--level", "2"], capsys)
    assert json.loads(stdout)["level"] == 2
    cfg.write_text(json.dumps({"field": "sink:strength=2", "colour": "red"}))
    code, _, err = run(["classify", "--config", str(cfg), "--r", "0.1"], capsys)
    assert code == 2 and "colour" in err
    code, _, err = run(["classify", "--config", str(tmp_path / "missing.json")], capsys)
    assert code == 2


def test_flux_scan_verdict_line(tmp_path, capsys):
    out, csv = tmp_path / "scan.json", tmp_path / "scan.csv"
    code, stdout, _ = run(["flux-scan", "--field", "sink:strength=1", "--alpha", "1", "--p", "2",
                           "--rmin", "0.025", "--rmax", "0.4", "--level", "2", "--out", str(out),
                           "--csv", str(csv)], capsys)
    assert code == 0
    assert stdout.splitlines()[-1] == "CRITERION SATISFIED: beta=0.00 threshold=0.50"
    doc = json.loads(out.read_text())
    assert doc["grid"] == [0.4, 0.2, 0.1, 0.05, 0.025]
    assert doc["verdict"] == "CriterionSatisfied"
    assert csv.read_text().count("\n") == 6


def test_shell_scan_uniform(capsys):
    code, stdout, _ = run(["shell-scan", "--field", "uniform:dir=0,0,-1", "--p", "2", "--level", "2"], capsys)
    assert code == 0
    assert stdout.strip() == "convergent near 0 (q=-2.0)"


def test_tube_verify_and_report(tmp_path, capsys):
    tube, off = tmp_path / "tube.json", tmp_path / "tube.off"
    code, stdout, _ = run(["tube-verify", "--field", "sink:strength=1", "--patch",
                           "cap:axis=0,0,1,half_angle=0.5236", "--alpha", "1", "--r", "0.2",
                           "--resolution", "16", "--out", str(tube), "--off", str(off)], capsys)
    assert code == 0
    assert stdout.splitlines()[-1].startswith("FLUX TUBE PASS: rel_err=")
    doc = json.loads(tube.read_text())
    assert doc["rel_err"] < 1e-4
    assert off.read_text().startswith("OFF\n")

    shell = tmp_path / "shell.json"
    run(["shell-scan", "--field", "sink:strength=1", "--level", "2", "--out", str(shell)], capsys)
    merged = tmp_path / "report.json"
    code, stdout, _ = run(["report", str(tube), str(shell), "--out", str(merged)], capsys)
    assert code == 0
    assert stdout.splitlines()[-1] == "REPORT: not L^p near 0 (shell integral diverges)"
    rep = json.loads(merged.read_text())
    assert rep["summary"]["tubes"][0]["passed"] is True
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run(["report", str(bad)], capsys)[0] == 2


def test_mesh_export_and_trace(tmp_path, capsys):
    mesh = tmp_path / "m.off"
    assert run(["mesh-export", "--radius", "2", "--level", "1", "--out", str(mesh)], capsys)[0] == 0
    assert mesh.read_text().splitlines()[1] == "42 80 0"
    code, stdout, _ = run(["trace", "--field", "uniform:dir=0,0,-1", "--seed", "0,0,1", "--r", "0.5",
                           "--record-every", "0.25"], capsys)
    assert code == 0
    rows = stdout.splitlines()
    assert rows[0] == "s,x,y,z"
    assert [float(r.split(",")[3]) for r in rows[1:]] == pytest.approx([1, 0.75, 0.5])
    code, _, err = run(["trace", "--field", "sink:strength=1", "--seed", "3,0,0", "--r", "0.5"], capsys)
    assert code == 2


def test_reports_identical_across_threads(tmp_path, capsys):
    outs = []
    for i, threads in enumerate(("1", "4", "4")):
        out = tmp_path / f"scan{i}.json"
        run(["flux-scan", "--field", "uniform:dir=0,0,-1+sink:strength=0.05", "--r-grid", "0.4,0.2",
             "--level", "3", "--threads", threads, "--out", str(out)], capsys)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_module_entry_point(tmp_path):
    env = dict(os.environ, FLUXCRIT_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "fluxcrit", "shell-scan", "--field", "sink:strength=1",
                           "--level", "1"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.startswith("divergent near 0")
    proc = subprocess.run([sys.executable, "-m", "fluxcrit", "classify", "--field", "sink:strength=1",
                           "--r", "3"], capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and "r must be < alpha" in proc.stderr
