"""Command-line behaviour: outputs, exit codes and determinism."""

import csv
import io
import json
import subprocess
import sys
import time

import pytest

from jive_infer.cli import main
from jive_infer.dataio import save_dataset, save_restriction
from jive_infer.simulation import DGP1Spec, gen_dgp1

TOY_SCHEMA = '{"outcome": "y", "regressors": ["x"], "instruments": ["z"]}'


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("y,x,z\n3,1,1\n6,2,2\n")
    return p


@pytest.fixture
def dgp1_files(tmp_path):
    spec = DGP1Spec()
    schema = save_dataset(tmp_path / "d.csv", gen_dgp1(spec, seed=1))
    (tmp_path / "s.json").write_text(json.dumps(schema.to_json()
                                                if hasattr(schema, "to_json") else schema))
    save_restriction(tmp_path / "r.json", spec.restriction())
    return tmp_path


def test_toy_exact_fit(capsys, toy):
    code, out, _ = run(capsys, "test", "--data", str(toy), "--schema", TOY_SCHEMA,
                       "--null", "3", "--format", "json")
    assert code == 0
    res = json.loads(out)
    assert len(res["methods"]) == 4
    for m in res["methods"]:
        assert m["beta_hat"] == pytest.approx([3.0])
        assert all(t["p_value"] == 1.0 for t in m["reports"])


def test_restriction_rows(capsys, dgp1_files):
    d = dgp1_files
    code, out, _ = run(capsys, "test", "--data", str(d / "d.csv"), "--schema",
                       str(d / "s.json"), "--restriction", str(d / "r.json"),
                       "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 4 * 9
    assert {r["method"] for r in rows} == {"SJIVE", "HLIM", "JIVE1", "JIVE2"}
    for r in rows:
        assert 0.0 <= float(r["p_value"]) <= 1.0
        assert (r["reference"] == "chisq") == bool(r["df"])


def test_malformed_csv(capsys, tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,x,z\n3,1,1\n6,oops,2\n")
    code, out, err = run(capsys, "test", "--data", str(p), "--schema", TOY_SCHEMA,
                         "--null", "3")
    assert code == 2 and out == ""
    obj = json.loads(err)
    assert obj["error"] == "ParseError" and obj["row"] == 2 and obj["column"] == "x"


@pytest.mark.parametrize("argv", [
    [],
    ["test", "--schema", TOY_SCHEMA, "--null", "1"],
    ["simulate", "--dgp", "dgp1", "--reps", "0"],
    ["simulate", "--table", "dgp7", "--reps", "1"],
    ["simulate", "--dgp", "dgp1", "--alpha", "0.013", "--reps", "1"],
    ["power", "--dgp", "dgp1", "--grid", "a,b", "--reps", "1"],
    ["simulate", "--bogus"],
])
def test_user_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert "error" in json.loads(err.splitlines()[-1])


def test_simulate_smoke(capsys):
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "simulate", "--dgp", "dgp1", "--reps", "10", "--seed", "1")
    assert code == 0 and time.perf_counter() - t0 < 10.0
    lines = out.splitlines()
    assert lines[0].split() == ["Method", "alpha", "r", "null", "D", "W1", "LM", "D*1",
                                "W*1", "LM*", "ARn", "ARcf"]
    assert [ln.split()[0] for ln in lines[2:6]] == ["SJIVE", "HLIM", "JIVE1", "JIVE2"]


def test_table_preset_layout(capsys):
    code, out, _ = run(capsys, "simulate", "--table", "dgp2", "--reps", "2",
                       "--methods", "SJIVE,JIVE1")
    assert code == 0
    body = [ln.split() for ln in out.splitlines()[2:] if ln.strip()]
    assert [(b[0], b[1], b[2]) for b in body] == [
        ("SJIVE", "0.05", "0.1"), ("SJIVE", "0.05", "0.2"),
        ("SJIVE", "0.10", "0.1"), ("SJIVE", "0.10", "0.2"),
        ("JIVE1", "0.05", "0.1"), ("JIVE1", "0.05", "0.2"),
        ("JIVE1", "0.10", "0.1"), ("JIVE1", "0.10", "0.2")]


def test_deterministic_across_runs_and_workers(capsys, tmp_path):
    outs = []
    for workers in ("1", "1", "2"):
        code, out, _ = run(capsys, "simulate", "--dgp", "dgp2", "--reps", "6", "--seed",
                           "4", "--format", "csv", "--workers", workers)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1] == outs[2]


def test_power_gnuplot(capsys, tmp_path):
    gp = tmp_path / "p.dat"
    code, out, _ = run(capsys, "power", "--dgp", "dgp1", "--grid", "0.5,1,1.5", "--reps",
                       "3", "--methods", "SJIVE", "--families", "W1star",
                       "--emit-gnuplot", str(gp))
    assert code == 0
    blocks = [b for b in gp.read_text().split("\n\n\n") if b.strip()]
    assert len(blocks) == 1
    data = [ln for ln in blocks[0].splitlines() if ln and not ln.startswith("#")]
    assert [float(ln.split()[0]) for ln in data] == [0.5, 1.0, 1.5]


def test_validate(capsys, dgp1_files):
    d = dgp1_files
    code, out, _ = run(capsys, "validate", "--data", str(d / "d.csv"), "--schema",
                       str(d / "s.json"))
    assert code == 0
    res = json.loads(out)
    assert res["valid"] and res["k"] == 15 and res["max_leverage"] < 0.99
    code, out, _ = run(capsys, "validate", "--table", "dgp1")
    assert code == 0 and len(json.loads(out)["designs"]) == 4


def test_module_entry_point(toy):
    proc = subprocess.run([sys.executable, "-m", "jive_infer.cli", "test", "--data",
                           str(toy), "--schema", TOY_SCHEMA, "--null", "3",
                           "--methods", "JIVE2"], capture_output=True, text=True)
    assert proc.returncode == 0 and "JIVE2" in proc.stdout
