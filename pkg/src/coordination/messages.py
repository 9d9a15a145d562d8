"""
Coordination messages and their wire form.

On the wire every message is one record: the byte length of its JSON body in decimal, a newline,
the body, a newline. Bodies use sorted keys so logs diff cleanly.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

logger = logging.getLogger(__name__)


class MessageKind(str, Enum):
    MEASUREMENT_REPORT = "MeasurementReport"
    FLEXIBILITY_REPORT = "FlexibilityReport"
    Q_TARGET = "QTarget"
    SETPOINT_COMMAND = "SetpointCommand"
    HEARTBEAT = "Heartbeat"
    ACK = "Ack"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class MeasurementReport:
    measured_at: int
    interface: str
    p_if: float
    q_if: float
    voltages: Dict[str, float] = field(default_factory=dict)
    asset_p: Dict[str, float] = field(default_factory=dict)
    taps: Dict[str, int] = field(default_factory=dict)
    # shortfall of the last local dispatch against its command
    deviation: float = 0.0


@dataclass(frozen=True)
class FlexibilityReport:
    interface: str
    q_min: float
    q_max: float
    feasible: bool = True
    assessed_at: int = 0

    def __post_init__(self):
        if self.feasible and self.q_min > self.q_max:
            raise ValueError(f"Flexibility report with q_min {self.q_min} > q_max {self.q_max}")


@dataclass(frozen=True)
class QTarget:
    interface: str
    q_target: float
    valid_until: int


@dataclass(frozen=True)
class SetpointCommand:
    """
    Slice of a setpoint bundle for one receiver.

    Asset endpoints read `q`, edge agents read `substation_q`, tap actuators read `taps`.
    `fallback` tells the receiver to drop coordinated operation and use its fallback behaviour.
    """

    target: str
    valid_until: int
    q: Optional[float] = None
    substation_q: Optional[float] = None
    taps: Dict[str, int] = field(default_factory=dict)
    fallback: bool = False


@dataclass(frozen=True)
class Heartbeat:
    pass


@dataclass(frozen=True)
class Ack:
    ack_seq: int


Payload = Union[MeasurementReport, FlexibilityReport, QTarget, SetpointCommand, Heartbeat, Ack]

_PAYLOAD_TYPES = {
    MessageKind.MEASUREMENT_REPORT: MeasurementReport,
    MessageKind.FLEXIBILITY_REPORT: FlexibilityReport,
    MessageKind.Q_TARGET: QTarget,
    MessageKind.SETPOINT_COMMAND: SetpointCommand,
    MessageKind.HEARTBEAT: Heartbeat,
    MessageKind.ACK: Ack,
}
_KINDS = {v: k for k, v in _PAYLOAD_TYPES.items()}


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    sent_at: int
    payload: Payload
    seq: int = 0

    @property
    def kind(self) -> MessageKind:
        return _KINDS[type(self.payload)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "sender": self.sender,
            "receiver": self.receiver,
            "sent_at": self.sent_at,
            "seq": self.seq,
            "payload": asdict(self.payload),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Message":
        kind = MessageKind(data["kind"])
        payload = _PAYLOAD_TYPES[kind](**data.get("payload", {}))
        return cls(data["sender"], data["receiver"], int(data["sent_at"]), payload, int(data.get("seq", 0)))


def encode_message(msg: Message) -> bytes:
    body = json.dumps(msg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return str(len(body)).encode("ascii") + b"\n" + body + b"\n"


def decode_stream(data: Union[bytes, str]) -> List[Message]:
    """
    Parse consecutive length-prefixed records.

    Raises:
        ValueError: On a truncated or malformed record
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    messages = []
    pos = 0
    while pos < len(data):
        newline = data.find(b"\n", pos)
        if newline < 0:
            raise ValueError(f"Truncated length prefix at byte {pos}")
        try:
            length = int(data[pos:newline])
        except ValueError:
            raise ValueError(f"Malformed length prefix at byte {pos}")
        start, end = newline + 1, newline + 1 + length
        if end > len(data):
            raise ValueError(f"Truncated record at byte {pos}")
        messages.append(Message.from_dict(json.loads(data[start:end])))
        pos = end + 1 if data[end:end + 1] == b"\n" else end
    return messages


def write_message_log(messages: List[Message], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for msg in messages:
            f.write(encode_message(msg))
    return path


def read_message_log(path: Union[str, Path]) -> List[Message]:
    with open(path, "rb") as f:
        return decode_stream(f.read())
