import csv
import hashlib
import io
import json
import subprocess
import sys

import pytest

from crcbounds.cli import dumps, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_fit_has_eleven_rows(capsys):
    code, out, _ = run(capsys, "fit", "--input", "builtin:pwid", "--no-ci")
    assert code == 0
    doc = json.loads(out)
    assert len(doc["result"]["models"]) == 11
    assert doc["manifest"]["subcommand"] == "fit"


def test_fit_csv_columns(capsys):
    code, out, _ = run(capsys, "fit", "--input", "builtin:pwid", "--no-ci", "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 11
    assert list(rows[0])[:7] == ["model", "M_hat", "se", "ci_lo", "ci_hi", "aic", "bic"]


def test_bounds_saturated(capsys):
    code, out, _ = run(capsys, "bounds", "--input", "builtin:pwid", "--restriction",
                       '{"type":"highest_order","gamma":0}')
    res = json.loads(out)["result"]
    assert code == 0
    assert res["lo"] == pytest.approx(306 + 5197689 / 9048, rel=1e-12)
    assert res["hi"] == res["lo"]


def test_ci_pl_gamma(capsys):
    code, out, _ = run(capsys, "ci-pl", "--input", "builtin:pwid", "--restriction", "gamma=0.1", "--alpha", "0.05")
    res = json.loads(out)["result"]
    assert code == 0
    assert res["lo"] == pytest.approx(493, rel=0.02) and res["hi"] == pytest.approx(2057, rel=0.02)


def test_ci_tib_infinite_upper(capsys):
    code, out, _ = run(capsys, "ci-tib", "--input", "builtin:pwid", "--restriction", "gamma=0.7", "-B", "300")
    res = json.loads(out)["result"]
    assert code == 0 and res["infinite_upper"] and res["hi"] is None


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "nope")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "fit")[0] == 1
    assert run(capsys, "ci-pl", "--input", "builtin:pwid", "--restriction", "gamma=-1")[0] == 1
    assert run(capsys, "fit", "--input", str(tmp_path / "missing.json"))[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"k": 2, "cells": [{"history": "01", "count": -3}]}')
    assert run(capsys, "fit", "--input", str(bad))[0] == 2
    degenerate = tmp_path / "deg.json"
    cells = [{"history": format(i, "03b"), "count": c} for i, c in enumerate([0, 7, 0, 9, 5, 6, 4], 1)]
    degenerate.write_text(json.dumps({"k": 3, "cells": cells}))
    code, _, err = run(capsys, "ci-tib", "--input", str(degenerate), "--restriction", "gamma=0.1", "-B", "200")
    assert code == 3 and "numerical" in err


def test_out_file_and_manifest(tmp_path, capsys):
    out = tmp_path / "r.csv"
    code, _, _ = run(capsys, "bounds", "--input", "builtin:pwid", "--restriction", "positive=10",
                     "--format", "csv", "--out", str(out))
    assert code == 0
    assert out.read_text().startswith("lo,hi,feasible,empty")
    manifest = json.loads((tmp_path / "r.csv.manifest.json").read_text())
    assert manifest["subcommand"] == "bounds" and manifest["tool_version"]


def _hash(capsys, *argv):
    code, out, _ = run(capsys, *argv)
    assert code == 0
    return hashlib.sha256(out.encode()).hexdigest()


def test_byte_identical_outputs(capsys):
    argv = ("ci-tib", "--input", "builtin:pwid", "--restriction", "agnostic=3", "-B", "300", "--seed", "4",
            "--no-timing")
    assert _hash(capsys, *argv) == _hash(capsys, *argv)
    assert _hash(capsys, *argv, "--threads", "1") == _hash(capsys, *argv, "--threads", "2")


def test_simulate_thread_independent(capsys, tmp_path):
    base = ("simulate", "--replications", "3", "-B", "150", "--methods", "tib,pl", "--restriction",
            "g:gamma=0.2", "--m-min", "300", "--m-max", "900", "--no-timing")
    a = _hash(capsys, *base, "--threads", "1")
    b = _hash(capsys, *base, "--threads", "2", "--use-threads")
    assert a == b
    code, _, _ = run(capsys, *base, "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "coverage.csv").read_text().startswith("method,restriction_id,M,coverage")
    assert (tmp_path / "summary.csv").exists()


def test_dumps_float_format():
    text = dumps({"a": 0.1, "b": float("inf"), "c": 3.0, "d": [1, 2.5]})
    doc = json.loads(text)
    assert doc == {"a": 0.1, "b": None, "c": 3.0, "d": [1, 2.5]}
    assert "0.10000000000000001" in text


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "crcbounds.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "crcbounds" in proc.stdout
