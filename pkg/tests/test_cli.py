import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mdiqkd.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, discriminate_problem, main

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"
GOLDEN = Path(__file__).parent / "golden"


def sigma(p, n):
    return np.sqrt(p * (1 - p) / n)


def run(tmp_path, scenario, *extra, name="report.json"):
    out = tmp_path / name
    code = main(["run", "--scenario", str(scenario), "--out", str(out), *extra])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def shape(x):
    if isinstance(x, dict):
        return {k: shape(v) for k, v in sorted(x.items())}
    if isinstance(x, list):
        return "list"
    return type(x).__name__


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def test_bb84_honest(tmp_path):
    code, doc = run(tmp_path, SCEN / "bb84_honest.json")
    assert code == EXIT_OK
    rep = doc["report"]
    n = rep["rounds_total"]
    assert n == 100_000
    assert rep["qber"] == 0.0
    assert abs(rep["sift_fraction"] - 0.5) < 3 * sigma(0.5, n)
    assert doc["tool"] == "mdiqkd" and doc["scenario"]["protocol"]["seed"] == 20240501


def test_sixstate_honest(tmp_path):
    _, doc = run(tmp_path, SCEN / "sixstate_honest.json")
    rep = doc["report"]
    assert abs(rep["sift_fraction"] - 1 / 3) < 3 * sigma(1 / 3, rep["rounds_total"])


def test_pna_without_pnp(tmp_path):
    # two-probe outputs are linearly dependent, so the unambiguous measurement never concludes
    code, doc = run(tmp_path, SCEN / "bb84_pna_no_pnp.json")
    rep = doc["report"]
    assert code == EXIT_OK
    assert rep["qber"] == 0.0
    assert rep["eve_probes_returned"] == 2 * rep["rounds_total"]
    assert rep["eve_conclusive_rounds"] == 0
    assert rep["eve_conclusive_guess_rate"] is None


def test_toml_scenario(tmp_path):
    code, doc = run(tmp_path, SCEN / "bb84_pna_pnp.toml")
    assert code == EXIT_OK
    rep = doc["report"]
    assert rep["eve_probes_returned"] == 0
    assert rep["qber"] == 0.0
    assert doc["scenario"]["attack"]["method"] == "min_error"


def test_decoy_pns_scenario(tmp_path):
    _, doc = run(tmp_path, SCEN / "bb84_decoy_pns.json")
    check = doc["report"]["decoy"]["alice"]["check"]
    assert check["consistent"] is False
    assert check["y1_lower_bound"] == 0.0


def test_report_reproducible(tmp_path):
    _, a = run(tmp_path, SCEN / "sixstate_honest.json", "--threads", "2", name="a.json")
    _, b = run(tmp_path, SCEN / "sixstate_honest.json", name="b.json")
    a.pop("wall_clock_seconds")
    b.pop("wall_clock_seconds")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    _, c = run(tmp_path, SCEN / "sixstate_honest.json", "--seed", "7", name="c.json")
    assert c["scenario"]["protocol"]["seed"] == 7
    assert c["report"] != a["report"]


def test_report_structure_matches_golden(tmp_path):
    _, doc = run(tmp_path, SCEN / "bb84_honest.json")
    golden = json.loads((GOLDEN / "report_shape_bb84_honest.json").read_text())
    assert shape(doc) == golden


def test_trace_csv(tmp_path):
    scen = write_json(tmp_path / "s.json", {"protocol": {"kind": "BB84-4", "rounds": 500, "seed": 3}})
    trace = tmp_path / "t.csv"
    code, doc = run(tmp_path, scen, "--trace", str(trace))
    assert code == EXIT_OK
    rows = list(csv.DictReader(trace.open()))
    assert len(rows) == 500
    kept = [r for r in rows if r["sift_verdict"] in ("Keep", "ErrorSample")]
    assert all(r["alice_bit"] == r["bob_bit"] != "" for r in kept)
    assert sum(r["sift_verdict"] == "Keep" for r in rows) == doc["report"]["raw_key_bits"]


@pytest.mark.parametrize("doc,where", [
    ({"protocol": {"kind": "BB84-4", "rounds": 10, "seed": 1, "colour": 3}}, "protocol.colour"),
    ({"protocol": {"kind": "BB84-4", "rounds": 10}}, "protocol.seed"),
    ({"protocol": {"kind": "BB84-4", "rounds": 10, "seed": 1}, "attack": {}}, "attack.type"),
    ({"protocol": {"kind": "BB84-4", "rounds": 10, "seed": 1, "pnp": {"gate": 1}}}, "protocol.pnp.gate"),
    ({"channel": {}}, "protocol"),
])
def test_schema_errors_exit_2(tmp_path, capsys, doc, where):
    code, _ = run(tmp_path, write_json(tmp_path / "bad.json", doc))
    assert code == EXIT_CONFIG
    assert where in capsys.readouterr().err


def test_semantic_config_errors_exit_2(tmp_path):
    bad = [
        {"protocol": {"kind": "BB84-4", "rounds": 10, "seed": 1}, "attack": {"type": "pns"}},
        {"protocol": {"kind": "General-12", "rounds": 10, "seed": 1}},
        {"protocol": {"kind": "BB84-4", "rounds": 10, "seed": 1}, "attack": {"type": "pna", "probes": ["q"]}},
    ]
    for doc in bad:
        assert run(tmp_path, write_json(tmp_path / "bad.json", doc))[0] == EXIT_CONFIG
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_runtime_failure_exit_3(tmp_path, monkeypatch):
    import mdiqkd.cli as cli

    def boom(config):
        raise RuntimeError("engine fault")

    monkeypatch.setattr(cli, "run_session", boom)
    assert run(tmp_path, SCEN / "bb84_honest.json")[0] == EXIT_RUNTIME


def rows_for(capsys, *args):
    assert main(["dump-tables", *args]) == EXIT_OK
    return list(csv.DictReader(io.StringIO(capsys.readouterr().out)))


def test_dump_tables_sixstate_cell(capsys):
    rows = rows_for(capsys, "--kind", "SixState-24")
    kept = {r["operator"] for r in rows if (r["alice_basis"], r["measurement_basis"]) == ("Z", "Z")
            and r["verdict"] == "keep"}
    assert kept == {"I", "X", "Z", "XZ", "H2", "H2X", "H2Z", "H2XZ"}
    assert len(rows) == 2 * 24 * 3 * 3 // 2


def test_dump_tables_bb84_8(capsys):
    rows = rows_for(capsys, "--kind", "BB84-8")
    for a in ("Z", "X"):
        kept = {r["operator"] for r in rows if r["alice_basis"] == r["measurement_basis"] == a
                and r["verdict"] == "keep"}
        assert kept == {"I", "X", "Z", "XZ"}


def test_dump_tables_general_marks_invalid(capsys):
    rows = rows_for(capsys, "--kind", "General-12", "--theta", "0.5")
    invalid = {(r["alice_basis"], r["operator"]) for r in rows if r["verdict"] == "N"}
    assert invalid
    for a, op in invalid:
        assert all(r["verdict"] == "N" for r in rows if (r["alice_basis"], r["operator"]) == (a, op))
    assert main(["dump-tables", "--kind", "General-12"]) == EXIT_CONFIG


def test_discriminate_examples(tmp_path):
    out = tmp_path / "r.json"
    assert main(["discriminate", "--problem", str(SCEN / "problem_bb84.json"), "--out", str(out)]) == EXIT_OK
    res = json.loads(out.read_text())
    assert res["min_error"]["success"] == pytest.approx(0.5, abs=1e-4)
    assert res["unambiguous"]["feasible"] is False

    pair = discriminate_problem({"states": ["0", "+"]})
    assert pair["min_error"]["success"] == pytest.approx(0.853553, abs=1e-6)
    assert pair["helstrom"] == pytest.approx(0.5 * (1 + np.sqrt(0.5)), abs=1e-12)
    assert pair["unambiguous"]["feasible"] and pair["unambiguous"]["biorthogonality_residual"] < 1e-9

    ortho = discriminate_problem({"states": [[1, 0], [0, [0, 1]]]})
    assert ortho["min_error"]["success"] == pytest.approx(1.0, abs=1e-9)
    assert ortho["unambiguous"]["rate"] == pytest.approx(1.0, abs=1e-6)


def test_discriminate_errors(tmp_path):
    assert main(["discriminate", "--problem", str(write_json(tmp_path / "p.json", {"vectors": []}))]) == EXIT_CONFIG
    assert main(["discriminate", "--problem", str(write_json(tmp_path / "q.json", {"states": ["0", "z"]}))]) \
        == EXIT_CONFIG


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "mdiqkd", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
