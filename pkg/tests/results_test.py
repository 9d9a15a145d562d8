import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json

import pandas as pd
import pytest
from src.comms.bus import DROPPED, LOG_COLUMNS
from src.scenario.results import ResultLog, StepRecord, emit_results, load_results_jsonl


@pytest.fixture
def log():
    comms = pd.DataFrame([
        [0, 0, "Heartbeat", "central", "upstream", 1],
        [1, DROPPED, "QTarget", "upstream", "central", 1],
        [1, 2, "SetpointCommand", "central", "edge:T1", 2],
    ], columns=LOG_COLUMNS)
    records = [
        StepRecord(step=0, voltages={"MV0": 1.01, "MV1": 0.99}, q_if=0.01, taps={"T0": 0},
                   modes={"central": "coordinated"}),
        StepRecord(step=1, voltages={"MV0": 1.02, "MV1": 1.0}, q_if=0.05, flex_min=-0.1, flex_max=0.2,
                   target=0.06, deviation=0.01, taps={"T0": 2}, modes={"central": "coordinated"}),
        StepRecord(step=2, voltages={"MV0": 1.03, "MV1": 0.97}, q_if=-0.02, target=0.0, deviation=0.02,
                   taps={"T0": 1}, modes={"central": "fallback"},
                   violations=[{"kind": "voltage", "element": "MV1", "magnitude": 0.003}]),
        StepRecord(step=3, taps={"T0": 1}, converged=False, error="did not converge"),
    ]
    events = [{"step": 2, "node": "edge:T1", "kind": "mode", "detail": "fallback"}]
    return ResultLog("demo", 7, 15.0, records, events, comms)


class TestStepRecord:
    def test_groups(self, log):
        rows = log.records[1].groups()
        interface = {r["key"]: r["value"] for r in rows if r["group"] == "interface"}
        assert interface == {"q_if": 0.05, "flex_min": -0.1, "flex_max": 0.2, "target": 0.06, "deviation": 0.01}
        assert {"step": 1, "group": "tap", "key": "T0", "value": 2} in rows
        assert rows[-1] == {"step": 1, "group": "status", "key": "converged", "value": 1}

    def test_missing_quantities_skipped(self, log):
        keys = {r["key"] for r in log.records[0].groups() if r["group"] == "interface"}
        assert keys == {"q_if", "deviation"}

    def test_dict_round_trip(self, log):
        record = log.records[2]
        assert StepRecord.from_dict(record.to_dict()) == record


class TestSummary:
    def test_values(self, log):
        summary = log.summary()
        assert summary["name"] == "demo"
        assert summary["steps"] == 4
        assert summary["violation_count"] == 1
        assert summary["failed_steps"] == 1
        assert summary["steps_with_target"] == 2
        assert summary["max_deviation"] == pytest.approx(0.02)
        assert summary["mean_deviation"] == pytest.approx(0.015)
        assert summary["flex_range"]["assessments"] == 1
        assert summary["flex_range"]["mean_width"] == pytest.approx(0.3)
        assert summary["v_min"] == 0.97
        assert summary["v_max"] == 1.03
        assert summary["fallback_steps"] == 1
        assert summary["messages"] == {"sent": 3, "dropped": 1}
        assert summary["events"] == 1

    def test_tap_moves(self, log):
        assert log.tap_moves() == 3

    def test_empty_log(self):
        summary = ResultLog().summary()
        assert summary["steps"] == 0
        assert summary["v_min"] is None
        assert summary["messages"] == {"sent": 0, "dropped": 0}

    def test_timeseries_frame(self, log):
        frame = log.timeseries_frame()
        assert list(frame.columns) == ["step", "group", "key", "value"]
        assert set(frame["step"]) == {0, 1, 2, 3}


class TestEmitResults:
    def test_csv(self, log, tmp_path):
        paths = emit_results(log, "csv", tmp_path / "out")
        assert sorted(paths) == ["comms", "events", "summary", "timeseries"]
        frame = pd.read_csv(paths["timeseries"])
        assert len(frame) == len(log.timeseries_frame())
        assert pd.read_csv(paths["events"])["detail"].tolist() == ["fallback"]
        with open(paths["summary"]) as f:
            assert json.load(f)["violation_count"] == 1

    def test_jsonl(self, log, tmp_path):
        paths = emit_results(log, "jsonl", tmp_path)
        assert paths["timeseries"].name == "timeseries.jsonl"
        assert load_results_jsonl(paths["timeseries"]) == log.records

    def test_unknown_format(self, log, tmp_path):
        with pytest.raises(ValueError, match="Unknown result format"):
            emit_results(log, "parquet", tmp_path)
