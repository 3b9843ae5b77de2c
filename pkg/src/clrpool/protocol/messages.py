"""Typed protocol envelopes and their JSON-lines wire format.

One message per line::

    {"kind": ..., "seq": ..., "from": ..., "to": ..., "payload": {...}}

``PARTIAL_SUM`` residues travel as decimal strings so 64-bit values survive
any JSON implementation bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum


class Kind(str, Enum):
    ENUMERATE_REQ = "ENUMERATE_REQ"
    ENUMERATE_RESP = "ENUMERATE_RESP"
    PLAN = "PLAN"
    PLAN_ACK = "PLAN_ACK"
    AGG_REQUEST = "AGG_REQUEST"
    PARTIAL_SUM = "PARTIAL_SUM"
    POOLED_ROW = "POOLED_ROW"
    ERROR = "ERROR"


# payload keys allowed per kind; anything else is a schema violation
PAYLOAD_KEYS = {
    Kind.ENUMERATE_REQ: set(),
    Kind.ENUMERATE_RESP: {"n_sets", "m"},
    Kind.PLAN: {"rows"},
    Kind.PLAN_ACK: {"contributions"},
    Kind.AGG_REQUEST: {"round", "pool_id", "arm", "terms", "next"},
    Kind.PARTIAL_SUM: {"round", "pool_id", "arm", "residues"},
    Kind.POOLED_ROW: {"round", "pool_id", "arm", "values"},
    Kind.ERROR: {"code", "msg", "round"},
}


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    sender: str
    recipient: str
    payload: dict = field(default_factory=dict)
    seq: int = -1

    def to_wire(self) -> str:
        payload = dict(self.payload)
        if self.kind is Kind.PARTIAL_SUM:
            payload["residues"] = [str(int(r)) for r in payload["residues"]]
        return json.dumps({"kind": self.kind.value, "seq": self.seq, "from": self.sender,
                           "to": self.recipient, "payload": payload}, sort_keys=True)

    @classmethod
    def from_wire(cls, line: str) -> "ProtocolMessage":
        d = json.loads(line)
        kind = Kind(d["kind"])
        payload = d["payload"]
        if kind is Kind.PARTIAL_SUM:
            payload["residues"] = [int(r) for r in payload["residues"]]
        return cls(kind, d["from"], d["to"], payload, int(d["seq"]))
