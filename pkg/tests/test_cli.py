import json

import pytest

from procwatch.cli import main
from procwatch.pipeline import scenario_path
from procwatch.xes import validate_xes


def _alerts(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cal")
    assert main(["simulate", "--scenario", "calibration", "--out", str(root / "run")]) == 0
    assert main(["calibrate", "--log", str(root / "run" / "log.jsonl"),
                 "--references", str(root / "run" / "references"), "--out", str(root / "snap.json")]) == 0
    return root / "snap.json"


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--scenario", "incident_mandrel", "--out", str(tmp_path / name)]) == 0
    for f in ("notifications.jsonl", "log.jsonl", "log.jsonl.idx.json", "log.xes", "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["seed"] == 21 and len(run["manifest_sha256"]) == 64
    xes = (tmp_path / "a" / "log.xes").read_text()
    assert run["manifest_sha256"] in xes and validate_xes(xes) == []


def test_empty_plan_no_anomalies_and_exit_zero(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["simulate", "--models", str(scenario_path("turm.pm")), "--root", "produce_turm",
                 "--faults", str(scenario_path("empty.faults.json")), "--seed", "3", "--out", str(out)]) == 0
    assert json.loads((out / "run.json").read_text())["anomalies"] == {}
    capsys.readouterr()
    assert main(["check", "--log", str(out / "log.jsonl")]) == 0
    assert _alerts(capsys.readouterr().out) == []


def test_zero_duration_incident(tmp_path, capsys):
    out = tmp_path / "z"
    main(["simulate", "--scenario", "incident_zero_duration", "--out", str(out)])
    capsys.readouterr()
    assert main(["check", "--log", str(out / "log.jsonl"), "--summary", str(tmp_path / "s.json")]) == 1
    alerts = _alerts(capsys.readouterr().out)
    assert [(a["kind"], a["task"]) for a in alerts] == [("TimeDuration", t) for t in ("a12", "a17", "a21")]
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["alerts"] == 3 and len(summary["input_sha256"]) == 64


def test_live_stream_equals_replay(tmp_path, capsys, calibrated):
    out = tmp_path / "b"
    main(["simulate", "--scenario", "batch_dilution", "--out", str(out)])
    common = ["--snapshot", str(calibrated), "--references", str(out / "references")]
    capsys.readouterr()
    assert main(["check", "--stream", str(out / "notifications.jsonl"), *common]) == 1
    live = _alerts(capsys.readouterr().out)
    assert main(["check", "--log", str(out / "log.jsonl"), *common]) == 1
    assert _alerts(capsys.readouterr().out) == live
    assert [(a["kind"], a["part"]) for a in live] == [("SensorData", live[0]["case"] + "#3")]


def test_malformed_lines_counted(tmp_path, capsys):
    out = tmp_path / "z"
    main(["simulate", "--scenario", "incident_zero_duration", "--out", str(out)])
    lines = (out / "notifications.jsonl").read_text().splitlines()
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join(lines[:5] + ["{not json", '{"kind": "Nope"}'] + lines[5:]) + "\n")
    capsys.readouterr()
    assert main(["check", "--stream", str(broken)]) == 1
    captured = capsys.readouterr()
    assert "skipped 2 malformed line(s)" in captured.err
    assert len(_alerts(captured.out)) == 3
    assert main(["check", "--stream", str(broken), "--strict"]) == 2


def test_flag_overrides(tmp_path, capsys):
    out = tmp_path / "z"
    main(["simulate", "--scenario", "incident_zero_duration", "--out", str(out)])
    capsys.readouterr()
    assert main(["check", "--log", str(out / "log.jsonl"), "--z-threshold", "50"]) == 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--out", "x"],
    ["simulate", "--scenario", "nope", "--out", "x"],
    ["simulate", "--models", "/no/such.pm", "--root", "r", "--out", "x"],
    ["check"],
    ["check", "--log", "/no/such/log.jsonl"],
    ["check", "--log", "a", "--stream", "b"],
])
def test_input_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_invalid_model_exit_2(tmp_path):
    bad = tmp_path / "bad.pm"
    bad.write_text("model m { seq { task a; task a } }")
    assert main(["simulate", "--models", str(bad), "--root", "m", "--out", str(tmp_path / "o")]) == 2
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"faults": [{"kind": "zero_duration", "task": "ghost"}]}))
    assert main(["simulate", "--models", str(scenario_path("turm.pm")), "--root", "produce_turm",
                 "--faults", str(plan), "--out", str(tmp_path / "o")]) == 2


def test_calibrate_needs_two_runs(tmp_path):
    out = tmp_path / "one"
    main(["simulate", "--scenario", "incident_mandrel", "--out", str(out)])
    assert main(["calibrate", "--log", str(out / "log.jsonl"), "--out", str(tmp_path / "s.json")]) == 2


def test_calibrate_identical_runs_floor(tmp_path):
    out = tmp_path / "same"
    main(["simulate", "--models", str(scenario_path("turm.pm")), "--root", "produce_turm",
          "--references", str(scenario_path("references")), "--runs", "3", "--out", str(out)])
    snap = tmp_path / "s.json"
    assert main(["calibrate", "--log", str(out / "log.jsonl"), "--references", str(out / "references"),
                 "--out", str(snap)]) == 0
    assert json.loads(snap.read_text())["config"]["dtw_threshold"]["diameter"] == 1e-6


def test_export_and_stats(tmp_path, capsys, calibrated):
    out = tmp_path / "b"
    main(["simulate", "--scenario", "batch_dilution", "--out", str(out)])
    assert main(["export-xes", "--log", str(out / "log.jsonl"), "--out", str(tmp_path / "x.xes")]) == 0
    assert (tmp_path / "x.xes").read_text() == (out / "log.xes").read_text()
    capsys.readouterr()
    assert main(["stats", "--log", str(out / "log.jsonl"), "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    (case,) = stats["cases"].values()
    assert case["parts"] == 5 and stats["durations"]["a12"]["n"] == 5
    assert main(["stats", "--snapshot", str(calibrated)]) == 0
    assert "duration" in capsys.readouterr().out
