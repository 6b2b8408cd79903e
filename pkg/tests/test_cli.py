"""Tests for the command line entry points."""
import json
import math

import pytest

from crossgap.__main__ import format_merged_line, main, parse_endpoint
from crossgap.const import State
from crossgap.detector import CrossingState, EventLog
from crossgap.errors import ConfigError
from crossgap.frame_io import write_pgm_dir
from crossgap.model import save_model
from crossgap.peer import MergedIndication, Role
from crossgap.simgen import GroundTruth, SceneScript, Vehicle, VehicleTruth, save_script

pytestmark = pytest.mark.usefixtures("restore_logging")


@pytest.fixture(name="no_config")
def fixture_no_config(tmp_path):
    return ["--config", str(tmp_path / "absent.yaml")]


@pytest.mark.parametrize(
    "value, role, expected",
    [
        ("9000", Role.LISTEN, ("0.0.0.0", 9000)),
        ("127.0.0.1:9001", Role.LISTEN, ("127.0.0.1", 9001)),
        ("peer.local:9002", Role.CONNECT, ("peer.local", 9002)),
        ("peer.local", Role.CONNECT, ("peer.local", 9440)),
    ],
)
def test_parse_endpoint(value, role, expected):
    assert parse_endpoint(value, role, 9440) == expected


def test_parse_endpoint_rejects_bad_port():
    with pytest.raises(ConfigError):
        parse_endpoint("peer.local:http", Role.CONNECT, 9440)


def test_format_merged_line():
    indication = MergedIndication(State.GAP, 0.25)
    assert format_merged_line(indication, 3.5) == "t=3.500 MERGED=GAP staleness=0.250"
    assert format_merged_line(MergedIndication(State.TRAFFIC, math.inf), None) == "t=- MERGED=TRAFFIC staleness=inf"


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["simulate", "--preset", "rush-hour", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--out", str(tmp_path)]) == 2


def test_version_exits_0():
    assert main(["--version"]) == 0


def test_bad_log_level_exits_2(tmp_path, no_config):
    args = ["eval", *no_config, "--log-level", "CHATTY", "--events", "e", "--truth", "t", "--out", str(tmp_path)]
    assert main(args) == 2


def test_bad_config_exits_2(tmp_path):
    config = tmp_path / "crossgap.yaml"
    config.write_text("detector:\n  sensitivity: 3\n")
    args = ["eval", "--config", str(config), "--events", "e", "--truth", "t", "--out", str(tmp_path)]
    assert main(args) == 2


def test_invalid_detector_flag_exits_2(no_config):
    assert main(["train", *no_config, "--pfa", "0.9"]) == 2


def test_missing_model_exits_3(tmp_path, no_config):
    assert main(["detect", *no_config, "--model", str(tmp_path / "model.json")]) == 3


def test_simulate_preset(tmp_path, capsys, no_config):
    out = tmp_path / "scene"
    args = [
        "simulate", *no_config, "--preset", "multi-car", "--duration", "12",
        "--width", "64", "--height", "48", "--y4m", "--raw8", "--out", str(out),
    ]
    assert main(args) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["frames: 96 (64x48 at 8 fps)", "vehicles: 1"]
    assert len(list((out / "frames").glob("*.pgm"))) == 96
    assert (out / "scene.raw").stat().st_size == 96 * 64 * 48
    assert (out / "scene.y4m").read_bytes().startswith(b"YUV4MPEG2 W64 H48")
    truth = GroundTruth.from_csv(out / "truth.csv")
    assert [item.arrival for item in truth.vehicles] == pytest.approx([22.0])
    scene = json.loads((out / "scene.json").read_text())
    assert scene["name"] == "multi-car"
    assert scene["entry"] == [32.0, 12.0]


def test_simulate_script(tmp_path, capsys, no_config):
    script_path = tmp_path / "scene.yaml"
    save_script(SceneScript(duration=1.0, width=64, height=48, vehicles=[Vehicle(0.0, 0.5)]), script_path)
    assert main(["simulate", *no_config, "--script", str(script_path), "--seed", "9", "--out", str(tmp_path / "out")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "frames: 8 (64x48 at 8 fps)"
    assert json.loads((tmp_path / "out" / "scene.json").read_text())["seed"] == 9


def test_simulate_invalid_script_exits_3(tmp_path, no_config):
    script_path = tmp_path / "scene.json"
    script_path.write_text(json.dumps({"duration": 1.0, "vehicles": [{"appear_time": 5.0, "speed": 0.1}]}))
    assert main(["simulate", *no_config, "--script", str(script_path), "--out", str(tmp_path / "out")]) == 3


def test_eval_command(tmp_path, capsys, no_config):
    events = tmp_path / "events.csv"
    with EventLog(events, 1.0) as log:
        for step in range(20):
            state = State.TRAFFIC if 6 <= step < 12 else State.GAP
            log.write(CrossingState(state, 0.0, float(step), 1.0))
    truth = tmp_path / "truth.csv"
    GroundTruth((VehicleTruth(0, 2.0, 10.0),)).to_csv(truth)
    out = tmp_path / "report"
    args = ["eval", *no_config, "--events", str(events), "--truth", str(truth), "--out", str(out), "--bin", "2"]
    assert main(args) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "detections: 1" in lines
    assert "warning_median: 4.0" in lines
    assert (out / "histogram.csv").read_text().splitlines()[1:] == ["0,2,0", "2,4,1"]


def test_eval_missing_events_exits_3(tmp_path, no_config):
    truth = tmp_path / "truth.csv"
    GroundTruth((VehicleTruth(0, 2.0, 10.0),)).to_csv(truth)
    args = ["eval", *no_config, "--events", str(tmp_path / "nope.csv"), "--truth", str(truth), "--out", str(tmp_path)]
    assert main(args) == 3


def test_detect_writes_events_to_out(tmp_path, capsys, no_config, frame_stream, model):
    frames = tmp_path / "frames"
    write_pgm_dir(frame_stream, str(frames))
    model_path = tmp_path / "model.json"
    save_model(model, model_path)
    events = tmp_path / "events.csv"
    log_file = tmp_path / "run.log"
    args = [
        "detect", *no_config, "--input", str(frames), "--model", str(model_path),
        "--out", str(events), "--log-file", str(log_file),
    ]
    assert main(args) == 0
    assert capsys.readouterr().out.splitlines() == ["t=0.125 STATE=TRAFFIC"]
    rows = events.read_text().splitlines()
    assert rows[0] == "timestamp,state,correlator,gamma,margin"
    assert len(rows) > 1
    assert " - INFO - NEW SESSION STARTED" in log_file.read_text()


def test_detect_accepts_events_alias(tmp_path, no_config, frame_stream, model):
    frames = tmp_path / "frames"
    write_pgm_dir(frame_stream, str(frames))
    model_path = tmp_path / "model.json"
    save_model(model, model_path)
    events = tmp_path / "events.csv"
    args = ["detect", *no_config, "--input", str(frames), "--model", str(model_path), "--events", str(events)]
    assert main(args) == 0
    assert events.read_text().startswith("timestamp,state")
