import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json
import math

import pytest
from src.coordination.messages import (
    Ack,
    FlexibilityReport,
    Heartbeat,
    MeasurementReport,
    Message,
    MessageKind,
    QTarget,
    SetpointCommand,
    decode_stream,
    encode_message,
    read_message_log,
    write_message_log,
)


@pytest.fixture
def messages():
    return [
        Message("central", "upstream", 4, FlexibilityReport("T0", -0.1, 0.2, True, 4), seq=1),
        Message("upstream", "central", 4, QTarget("T0", 0.05, 6), seq=1),
        Message("central", "edge:T1", 5, SetpointCommand("T1", 6, substation_q=-0.01), seq=2),
        Message("edge:T1", "central", 5, MeasurementReport(5, "T1", 0.02, -0.01, {"LV1_1": 1.01},
                                                           {"pv_lv1": 0.004}, {"T1": 1}), seq=3),
        Message("central", "edge:T1", 6, Heartbeat(), seq=4),
        Message("edge:T1", "central", 6, Ack(2), seq=5),
    ]


class TestMessage:
    def test_kind(self, messages):
        assert [m.kind for m in messages] == [
            MessageKind.FLEXIBILITY_REPORT, MessageKind.Q_TARGET, MessageKind.SETPOINT_COMMAND,
            MessageKind.MEASUREMENT_REPORT, MessageKind.HEARTBEAT, MessageKind.ACK,
        ]
        assert str(MessageKind.HEARTBEAT) == "Heartbeat"

    def test_to_dict(self, messages):
        data = messages[2].to_dict()
        assert data["kind"] == "SetpointCommand"
        assert data["payload"]["substation_q"] == -0.01
        assert data["payload"]["fallback"] is False

    def test_flexibility_report_order(self):
        with pytest.raises(ValueError):
            FlexibilityReport("T0", 0.3, 0.2)

    def test_infeasible_report_allows_nan(self):
        report = FlexibilityReport("T0", math.nan, math.nan, feasible=False)
        assert not report.feasible


class TestWireFormat:
    def test_length_prefix(self, messages):
        record = encode_message(messages[4])
        prefix, body, tail = record.split(b"\n")
        assert int(prefix) == len(body)
        assert tail == b""
        assert list(json.loads(body)) == sorted(json.loads(body))

    def test_stream(self, messages):
        data = b"".join(encode_message(m) for m in messages)
        assert decode_stream(data) == messages

    def test_truncated_record(self, messages):
        data = encode_message(messages[0])
        with pytest.raises(ValueError, match="Truncated record"):
            decode_stream(data[:-10])

    def test_malformed_prefix(self):
        with pytest.raises(ValueError, match="Malformed"):
            decode_stream(b"abc\n{}\n")

    def test_missing_newline(self):
        with pytest.raises(ValueError, match="Truncated length prefix"):
            decode_stream(b"12")

    def test_unknown_kind(self):
        body = json.dumps({"kind": "Gossip", "sender": "a", "receiver": "b", "sent_at": 0, "payload": {}})
        with pytest.raises(ValueError):
            decode_stream(f"{len(body)}\n{body}\n")

    def test_log_file(self, messages, tmp_path):
        path = write_message_log(messages, tmp_path / "run" / "messages.log")
        assert read_message_log(path) == messages
