"""Line-delimited JSON envelope spoken between printer agents and the cloud gateway.

One UTF-8 JSON document per line: ``{kind, sequence, printer_id, body}``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from cloudcraft.errors import CloudCraftError

MAX_LINE_BYTES = 1 << 20


class MessageKind(str, Enum):
    REGISTER = "Register"
    HEARTBEAT = "Heartbeat"
    JOB_ASSIGN = "JobAssign"
    JOB_ACCEPT = "JobAccept"
    PHASE_STARTED = "PhaseStarted"
    PHASE_COMPLETED = "PhaseCompleted"
    METER_SAMPLE = "MeterSample"
    JOB_COMPLETE = "JobComplete"
    JOB_ERROR = "JobError"
    # Gateway-side refusal sent just before the connection is closed.
    REJECT = "Reject"


GATEWAY_TO_AGENT = frozenset({MessageKind.JOB_ASSIGN, MessageKind.REJECT})


class ProtocolError(CloudCraftError):
    pass


@dataclass(frozen=True)
class AgentMessage:
    kind: MessageKind
    sequence: int
    printer_id: str
    body: dict[str, Any] = field(default_factory=dict)

    def encode(self) -> bytes:
        doc = {"kind": self.kind.value, "sequence": self.sequence, "printer_id": self.printer_id, "body": self.body}
        return (json.dumps(doc, separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def decode(cls, line: bytes | str) -> AgentMessage:
        try:
            doc = json.loads(line)
            kind = MessageKind(doc["kind"])
            sequence = doc["sequence"]
            printer_id = doc["printer_id"]
            body = doc.get("body") or {}
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed agent message: {exc}") from None
        if isinstance(sequence, bool) or not isinstance(sequence, int):
            raise ProtocolError("sequence must be an integer")
        if not isinstance(printer_id, str) or not isinstance(body, dict):
            raise ProtocolError("printer_id must be text and body a document")
        return cls(kind, sequence, printer_id, body)
