import csv
import io
import json

import pytest

from gapcap import cli
from gapcap import poisson_core as pc
from gapcap import validation
from gapcap.distributions import Deterministic

H = 3600.0

BASE = {
    "name": "t",
    "analysis": "capacity",
    "headway": {"kind": "deterministic", "T_s": 7.0},
    "arrivals": {"q_veh_h": 600.0},
}


def run(tmp_path, doc, *extra):
    f = tmp_path / "s.json"
    f.write_text(json.dumps(doc))
    out = tmp_path / "out.csv"
    code = cli.main(["run", str(f), "--out", str(out), *extra])
    rows = list(csv.DictReader(io.StringIO(out.read_text()))) if out.exists() else None
    return code, rows


def test_single_point(tmp_path):
    code, rows = run(tmp_path, BASE)
    assert code == 0
    assert [r["behavior"] for r in rows] == ["B1", "B2", "B3"]
    assert list(rows[0])[:4] == ["sweep_value", "behavior", "quantity", "value"]
    assert rows[0]["sweep_value"] == ""
    assert rows[0]["quantity"] == "capacity_veh_h"
    assert float(rows[0]["value"]) == pc.capacity("B1", Deterministic(7.0), 600 / H) * H
    assert rows[0]["diag_flag"] == "ok"


def test_per_second_units(tmp_path):
    _, veh = run(tmp_path, BASE)
    _, sec = run(tmp_path, dict(BASE, units="per_s"))
    assert sec[0]["quantity"] == "capacity_per_s"
    assert float(veh[0]["value"]) == pytest.approx(3600 * float(sec[0]["value"]), rel=1e-15)


def test_sweep_rows_are_sorted(tmp_path):
    doc = dict(BASE, behaviors=["B3", "B1"], sweep={"parameter": "q_veh_h", "start": 100, "stop": 1000, "points": 4, "scale": "log"})
    code, rows = run(tmp_path, doc)
    assert code == 0
    keys = [(float(r["sweep_value"]), r["behavior"]) for r in rows]
    assert keys == sorted(keys)
    assert len(rows) == 8
    assert float(rows[-1]["sweep_value"]) == pytest.approx(1000)


def test_one_point_sweep(tmp_path):
    doc = dict(BASE, sweep={"parameter": "q_veh_h", "start": 300, "stop": 300, "points": 1})
    _, rows = run(tmp_path, doc)
    assert len(rows) == 3
    assert {r["sweep_value"] for r in rows} == {"300.0"}


def test_queue_rows_and_unstable_flag(tmp_path):
    doc = dict(BASE, analysis="queue", behaviors=["B1"], arrivals={"q_veh_h": 60.0},
               sweep={"parameter": "lambda_veh_h", "start": 100, "stop": 600, "points": 2})
    _, rows = run(tmp_path, doc)
    by = {(r["sweep_value"], r["quantity"]): r for r in rows}
    lo = by[("100.0", "mean_queue_length_veh")]
    want = pc.queue_metrics("B1", Deterministic(7.0), 60 / H, 100 / H).mean_queue_length
    assert float(lo["value"]) == pytest.approx(want, rel=1e-14)
    hi = by[("600.0", "mean_queue_length_veh")]
    assert hi["diag_flag"] == "unstable" and hi["value"] == "inf"


def test_mmpp_and_naive(tmp_path):
    arr = {"mmpp": {"rates_veh_h": [600, 2400], "transitions_per_s": [[0, 0.02], [0.1, 0]]}}
    hl = {"kind": "discrete", "atoms": [[56 / 9, 0.9], [14.0, 0.1]]}
    doc = {"scenarios": [
        {"name": "m", "analysis": "mmpp-capacity", "behaviors": ["B1"], "headway": hl, "arrivals": arr},
        {"name": "n", "analysis": "naive", "behaviors": ["B1"], "headway": hl, "arrivals": arr},
    ]}
    _, rows = run(tmp_path, doc)
    q = {r["quantity"]: r for r in rows}
    assert float(q["naive1_capacity_veh_h"]["value"]) == pytest.approx(229.91, abs=0.01)
    assert q["capacity_veh_h"]["diag_flag"] == "ok"
    assert float(q["capacity_veh_h"]["diag_qbar_veh_h"]) == pytest.approx(900)


def test_simulate_row(tmp_path):
    doc = dict(BASE, analysis="simulate", behaviors=["B2"], simulation={"replications": 3, "horizon": 2000})
    _, rows = run(tmp_path, doc)
    r = rows[0]
    assert r["quantity"] == "sim_capacity_veh_h"
    assert float(r["diag_ci_lo"]) < float(r["value"]) < float(r["diag_ci_hi"])


@pytest.mark.parametrize(
    "doc,path",
    [
        (dict(BASE, headway={"kind": "discrete", "atoms": [[7.0, 0.5], [9.0, "x"]]}), "headway/atoms/1/1"),
        (dict(BASE, analysis="nonsense"), "analysis"),
        (dict(BASE, headway={"kind": "discrete", "atoms": [[7.0, 0.5], [9.0, 0.4]]}), "headway"),
        (dict(BASE, analysis="mmpp-capacity"), "arrivals"),
        (dict(BASE, analysis="queue"), "lambda_veh_h"),
    ],
)
def test_scenario_errors_name_the_field(tmp_path, capsys, doc, path):
    code, _ = run(tmp_path, doc)
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith(f"error: {path}:")


def test_bad_json_and_missing_file(tmp_path, capsys):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    assert cli.main(["run", str(f)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["run", str(f), "--seed", "-1"]) == 2


def test_dump_config_round_trip(tmp_path):
    f = tmp_path / "s.json"
    f.write_text(json.dumps(BASE))
    a = tmp_path / "a.json"
    assert cli.main(["run", str(f), "--dump-config", "--out", str(a), "--seed", "5"]) == 0
    b = tmp_path / "b.json"
    assert cli.main(["run", str(a), "--dump-config", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["scenarios"][0]["simulation"]["seed"] == 5


def test_presets_resolve():
    for name in ("example1", "example2", "example3", "example4", "example5"):
        assert cli.load({"scenarios": cli.preset_scenarios(name)})


def test_naive_preset(tmp_path, capsys):
    out = tmp_path / "n.csv"
    assert cli.main(["preset", "example5", "--naive", "--out", str(out)]) == 0
    assert "[PASS]" in capsys.readouterr().err
    rows = list(csv.DictReader(out.open()))
    v1 = [float(r["value"]) for r in rows if r["quantity"] == "naive1_capacity_veh_h"]
    assert v1 == pytest.approx([229.91, 250.65, 194.89], abs=0.1)


def test_validate_fails_loudly(monkeypatch, tmp_path):
    bad = [validation.Check("always", False, "forced", 0.0, {})]
    monkeypatch.setattr(validation, "run_all", lambda quick=False: bad)
    out = tmp_path / "v.txt"
    assert cli.main(["preset", "validate", "--out", str(out)]) == 1
    assert out.read_text().startswith("[FAIL]")
    good = [validation.Check("always", True, "ok", 0.0, {})]
    monkeypatch.setattr(validation, "run_all", lambda quick=False: good)
    assert cli.main(["preset", "validate", "--out", str(out)]) == 0
