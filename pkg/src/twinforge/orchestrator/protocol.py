"""Message envelope shared by the twin and the plant.

On the wire a message is a 4-byte big-endian length followed by a UTF-8
JSON object ``{seq, kind, episode, payload}``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

SCENE_UPDATE = "SceneUpdate"
COMMAND_BATCH = "CommandBatch"
FLAG_REPORT = "FlagReport"
RETRAIN_NOTICE = "RetrainNotice"
SESSION_END = "SessionEnd"
KINDS = (SCENE_UPDATE, COMMAND_BATCH, FLAG_REPORT, RETRAIN_NOTICE, SESSION_END)

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(RuntimeError):
    """Malformed frame, unknown kind, or out-of-order sequence number."""


class PlantUnreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class TwinMessage:
    seq: int
    kind: str
    episode: int | None = None
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "episode": self.episode, "payload": self.payload}

    @classmethod
    def from_dict(cls, doc: dict) -> "TwinMessage":
        try:
            return cls(int(doc["seq"]), doc["kind"], doc.get("episode"), doc.get("payload") or {})
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed message: {exc}") from exc


def encode_frame(msg: TwinMessage) -> bytes:
    body = json.dumps(msg.to_dict(), sort_keys=True).encode()
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> TwinMessage:
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise ProtocolError("frame body is not JSON") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("frame body is not an object")
    return TwinMessage.from_dict(doc)


class SequenceGuard:
    """Stamps outgoing messages and rejects incoming sequence regressions."""

    def __init__(self):
        self._next_out = 0
        self._last_in = -1

    def stamp(self, kind: str, episode: int | None = None, payload: dict | None = None) -> TwinMessage:
        msg = TwinMessage(self._next_out, kind, episode, payload or {})
        self._next_out += 1
        return msg

    def check(self, msg: TwinMessage) -> TwinMessage:
        if msg.seq <= self._last_in:
            raise ProtocolError(f"sequence regression: got {msg.seq} after {self._last_in}")
        self._last_in = msg.seq
        return msg
