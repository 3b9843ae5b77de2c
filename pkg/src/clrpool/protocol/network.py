"""In-process transport: one ordered, reliable channel per directed pair.

Every message is serialized to its wire form on send and parsed again on
delivery, so actors only ever see what a socket transport would carry.
Delivery order is global send order, which keeps runs deterministic.
"""
from __future__ import annotations

from collections import deque
from pathlib import Path

from .messages import Kind, ProtocolMessage


class Actor:
    actor_id: str
    online: bool = True

    def handle(self, msg: ProtocolMessage, net: "Network") -> None:
        raise NotImplementedError


class Network:
    def __init__(self, transcript_path=None):
        self.actors: dict[str, Actor] = {}
        self.channels: dict[tuple[str, str], deque] = {}
        self.transcript: list[str] = []
        self.undelivered: list[ProtocolMessage] = []
        self._seq = 0
        self._pending: deque = deque()
        self._fh = None
        if transcript_path is not None:
            self._fh = Path(transcript_path).open("a", encoding="utf-8")

    def register(self, actor: Actor) -> None:
        self.actors[actor.actor_id] = actor

    def send(self, kind: Kind, sender: str, recipient: str, payload=None) -> ProtocolMessage:
        self._seq += 1
        msg = ProtocolMessage(kind, sender, recipient, payload or {}, self._seq)
        line = msg.to_wire()
        self.transcript.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()
        self.channels.setdefault((sender, recipient), deque()).append(line)
        self._pending.append((sender, recipient))
        return msg

    def run(self, max_steps: int = 10_000_000) -> int:
        """Deliver messages until every channel is empty; return the count delivered."""
        steps = 0
        while self._pending:
            if steps >= max_steps:
                raise RuntimeError("message storm: delivery limit reached")
            key = self._pending.popleft()
            msg = ProtocolMessage.from_wire(self.channels[key].popleft())
            target = self.actors.get(msg.recipient)
            steps += 1
            if target is None or not target.online:
                self.undelivered.append(msg)
                continue
            target.handle(msg, self)
        return steps

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def messages(self) -> list[ProtocolMessage]:
        return [ProtocolMessage.from_wire(line) for line in self.transcript]
