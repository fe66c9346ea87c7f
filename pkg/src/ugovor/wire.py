"""Bootstrap headers and the framed control-plane messages.

A frame is a 4-byte big-endian length followed by one canonical compact
JSON object::

    {"body": {...}, "kind": "NOTIFY", "seq": 3, "session": "s0001", "v": 1}

Frames travel over an ordered, reliable byte stream (TCP in the harness).
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

from ugovor.contract import Contract, MalformedDocument, parse_contract
from ugovor.errors import ProtocolViolation, UgoVorError

PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024
_HEADER = struct.Struct(">I")

HEADER_PROPOSE = "X-UgoVor-Propose"
HEADER_CONTRACT = "X-UgoVor-Contract"
HEADER_AUDITOR = "X-UgoVor-Auditor"

KINDS = ("HELLO", "NOTIFY", "QUERY", "VERDICT", "SYNC", "TERMINATE", "RESET", "MISBEHAVIOR", "RECORD", "CLOSE")
VERDICTS = ("Confirm", "Dispute", "Deferred")
ROLES = ("client", "server", "auditor", "sniffer")
RESET_MODES = ("out-of-order", "rewind", "trim")


class WireError(UgoVorError):
    pass


class FrameTooLarge(WireError):
    pass


class MalformedFrame(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class InvalidMessage(WireError):
    """A message whose body does not match its kind."""


class MalformedHeader(UgoVorError):
    pass


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _str(v) -> bool:
    return isinstance(v, str)


def _opt_num(v) -> bool:
    return v is None or _num(v)


def _changes(v) -> bool:
    return isinstance(v, list) and all(
        isinstance(p, list) and len(p) == 2 and _num(p[0]) and _str(p[1]) for p in v
    )


def _byte_range(v) -> bool:
    return isinstance(v, list) and len(v) == 2 and all(_int(x) for x in v)


_EVENT_BODIES: dict[str, dict[str, Callable]] = {
    "Rebuffering": {"pts": _num, "duration": _opt_num},
    "ResolutionChange": {"pts": _num, "resolution": _str},
    "ContractViolation": {"pts": _num, "window": _int, "level": _int, "changes": _changes},
}

_BODIES: dict[str, dict[str, Callable]] = {
    "HELLO": {"role": lambda v: v in ROLES},
    "VERDICT": {"query_id": _int, "verdict": lambda v: v in VERDICTS, "evidence": lambda v: isinstance(v, dict)},
    "SYNC": {
        "event": lambda v: v in _EVENT_BODIES,
        "pts": _num,
        "window": _int,
        "level": _int,
        "exhausted": lambda v: isinstance(v, bool),
    },
    "TERMINATE": {"reason": _str},
    "RESET": {"origin": lambda v: v in ROLES, "mode": lambda v: v in RESET_MODES, "pts": _num},
    "MISBEHAVIOR": {
        "reason": _str,
        "ack_throughput_bps": _num,
        "chunk_bitrate_bps": _num,
        "chunks": _int,
    },
    "CLOSE": {"pts": _num},
}

_RECORD_BODIES = {
    "served-chunk": {"direction": _str, "byte_range": _byte_range, "t": _num},
    "client-ack": {"direction": _str, "chunk_id": _int, "t": _num},
}


def body_schema(kind: str, body: dict) -> dict[str, Callable]:
    """Field validators mandated for ``body`` under ``kind``."""
    if kind == "NOTIFY":
        schema = _EVENT_BODIES.get(body.get("event"))
        if schema is None:
            raise InvalidMessage(f"NOTIFY with unknown event {body.get('event')!r}")
        return {"event": _str, **schema}
    if kind == "QUERY":
        schema = _EVENT_BODIES.get(body.get("event"))
        if schema is None:
            raise InvalidMessage(f"QUERY with unknown event {body.get('event')!r}")
        return {"query_id": _int, "event": _str, **schema}
    if kind == "RECORD":
        schema = _RECORD_BODIES.get(body.get("direction"))
        if schema is None:
            raise InvalidMessage(f"RECORD with unknown direction {body.get('direction')!r}")
        return schema
    try:
        return _BODIES[kind]
    except KeyError:
        raise InvalidMessage(f"unknown message kind {kind!r}") from None


def validate(msg: "WireMessage") -> None:
    if msg.kind not in KINDS:
        raise InvalidMessage(f"unknown message kind {msg.kind!r}")
    if not _str(msg.session_id) or not _int(msg.seq) or msg.seq < 0:
        raise InvalidMessage("session must be a string and seq a non-negative integer")
    if not isinstance(msg.body, dict):
        raise InvalidMessage("body must be an object")
    schema = body_schema(msg.kind, msg.body)
    if set(msg.body) != set(schema):
        raise InvalidMessage(
            f"{msg.kind} body fields {sorted(msg.body)} differ from the mandated {sorted(schema)}"
        )
    for name, ok in schema.items():
        if not ok(msg.body[name]):
            raise InvalidMessage(f"{msg.kind}: bad value for {name}: {msg.body[name]!r}")


@dataclass(frozen=True)
class WireMessage:
    session_id: str
    seq: int
    kind: str
    body: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def to_obj(self) -> dict:
        return {"v": self.version, "session": self.session_id, "seq": self.seq, "kind": self.kind, "body": self.body}


def canonical(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False).encode("utf-8")


def encode(msg: WireMessage) -> bytes:
    validate(msg)
    payload = canonical(msg.to_obj())
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"{len(payload)} byte body exceeds {MAX_FRAME}")
    return _HEADER.pack(len(payload)) + payload


def _from_payload(payload: bytes) -> WireMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedFrame(f"frame body is not JSON: {exc}") from exc
    if not isinstance(obj, dict) or set(obj) != {"v", "session", "seq", "kind", "body"}:
        raise MalformedFrame("frame object must have exactly v, session, seq, kind, body")
    if obj["v"] != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"protocol version {obj['v']!r}")
    msg = WireMessage(obj["session"], obj["seq"], obj["kind"], obj["body"], obj["v"])
    try:
        validate(msg)
    except InvalidMessage as exc:
        raise MalformedFrame(str(exc)) from exc
    return msg


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one complete frame."""
    if len(frame) < _HEADER.size:
        raise MalformedFrame("truncated length prefix")
    (n,) = _HEADER.unpack_from(frame)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"declared length {n} exceeds {MAX_FRAME}")
    if len(frame) - _HEADER.size != n:
        raise MalformedFrame(f"declared length {n}, got {len(frame) - _HEADER.size} bytes")
    return _from_payload(frame[_HEADER.size :])


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= _HEADER.size:
            (n,) = _HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise FrameTooLarge(f"declared length {n} exceeds {MAX_FRAME}")
            if len(self._buf) < _HEADER.size + n:
                break
            payload = bytes(self._buf[_HEADER.size : _HEADER.size + n])
            del self._buf[: _HEADER.size + n]
            out.append(_from_payload(payload))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


class Sender:
    """Stamps outgoing messages with a per-session monotone sequence number."""

    def __init__(self):
        self._seq: dict[str, int] = {}

    def make(self, session_id: str, kind: str, body: dict) -> WireMessage:
        seq = self._seq.get(session_id, 0)
        self._seq[session_id] = seq + 1
        return WireMessage(session_id, seq, kind, body)


class SeqTracker:
    """Rejects messages whose seq does not strictly increase per (session, sender)."""

    def __init__(self):
        self._last: dict[tuple[str, str], int] = {}

    def check(self, msg: WireMessage, sender: str) -> None:
        key = (msg.session_id, sender)
        last = self._last.get(key)
        if last is not None and msg.seq <= last:
            raise ProtocolViolation(f"seq {msg.seq} from {sender} does not follow {last}")
        self._last[key] = msg.seq


async def read_message(reader: asyncio.StreamReader) -> WireMessage | None:
    """Next frame from ``reader``; ``None`` on a clean end of stream."""
    try:
        head = await reader.readexactly(_HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise MalformedFrame("stream ended inside a length prefix") from exc
        return None
    (n,) = _HEADER.unpack(head)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"declared length {n} exceeds {MAX_FRAME}")
    try:
        payload = await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise MalformedFrame("stream ended inside a frame") from exc
    return _from_payload(payload)


# -- bootstrap ---------------------------------------------------------------


def propose_headers() -> dict[str, str]:
    return {HEADER_PROPOSE: "1"}


def server_headers(contract: Contract, auditor: tuple[str, int]) -> dict[str, str]:
    text = contract.to_text().encode("utf-8")
    return {
        HEADER_CONTRACT: base64.b64encode(text).decode("ascii"),
        HEADER_AUDITOR: format_address(auditor),
    }


def format_address(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise MalformedHeader(f"auditor address {text!r} is not host:port")
    return host, int(port)


def _header(headers: dict, name: str) -> str | None:
    lowered = name.lower()
    for key, value in headers.items():
        if key.lower() == lowered:
            return value
    return None


def proposes(headers: dict) -> bool:
    return _header(headers, HEADER_PROPOSE) is not None


def bootstrap_client(headers: dict) -> tuple[Contract, tuple[str, int]] | None:
    """Contract and auditor address from the first response, if both are present.

    Raises ``InvalidContract``/``MalformedDocument`` for an unusable contract
    and ``MalformedHeader`` for an unusable address; callers disengage.
    """
    contract_text = _header(headers, HEADER_CONTRACT)
    auditor = _header(headers, HEADER_AUDITOR)
    if contract_text is None or auditor is None:
        return None
    try:
        raw = base64.b64decode(contract_text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedDocument(f"contract header is not base64: {exc}") from exc
    return parse_contract(raw), parse_address(auditor)
