"""Line-delimited trace format for replayable streaming sessions.

Every line is a JSON object with a ``type`` and a ``v`` (schema version)::

    {"type": "session", "v": 1, "session": "s0001", "group": "AS3", "start_time": 12.5,
     "startup": 4.0, "latency": {"down": [0.040, 0.004], "up": [0.035, 0.003]}}
    {"type": "chunk", "v": 1, "session": "s0001", "id": 0, "t_send": 0.0, "t_ack": 0.08,
     "size": 625000, "resolution": "720p", "pts": 0.0, "length": 2.0}
    {"type": "rebuffer", "v": 1, "session": "s0001", "pts": 24.0, "duration": 3.1}
    {"type": "health", "v": 1, "session": "s0001", "t": 10.0, "buffer_s": 8.2}

Times are seconds from the start of the session; ``startup`` is when the
player starts playback (chunks that arrive earlier are held); latencies are
``[base, jitter]`` pairs in seconds per direction.  A session line must come
before that session's other records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ugovor.errors import UgoVorError
from ugovor.virtual_buffer import ChunkInfo, ChunkMap

SCHEMA_VERSION = 1
_EPS = 1e-9


class SchemaError(UgoVorError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LatencyProfile:
    down_base: float = 0.001
    down_jitter: float = 0.0
    up_base: float = 0.001
    up_jitter: float = 0.0

    def to_obj(self) -> dict:
        return {"down": [self.down_base, self.down_jitter], "up": [self.up_base, self.up_jitter]}

    @classmethod
    def from_obj(cls, obj: dict) -> "LatencyProfile":
        (db, dj), (ub, uj) = obj["down"], obj["up"]
        return cls(float(db), float(dj), float(ub), float(uj))


@dataclass(frozen=True)
class TraceChunk:
    chunk_id: int
    t_send: float
    t_ack: float
    size: int
    resolution: str
    pts: float
    length: float

    @property
    def end_pts(self) -> float:
        return self.pts + self.length


@dataclass
class TraceSession:
    session_id: str
    chunks: list[TraceChunk] = field(default_factory=list)
    rebuffers: list[tuple[float, float]] = field(default_factory=list)
    health: list[tuple[float, float]] = field(default_factory=list)
    latency: LatencyProfile = field(default_factory=LatencyProfile)
    group: str = "AS0"
    start_time: float = 0.0
    startup: float = 0.0

    @property
    def duration(self) -> float:
        return self.chunks[-1].end_pts - self.chunks[0].pts if self.chunks else 0.0

    @property
    def payload_bytes(self) -> int:
        return sum(c.size for c in self.chunks)

    def byte_ranges(self) -> list[tuple[int, int]]:
        out, offset = [], 0
        for c in self.chunks:
            out.append((offset, offset + c.size))
            offset += c.size
        return out

    def chunk_map(self) -> ChunkMap:
        return ChunkMap.from_list(
            [[s, e, c.resolution, c.length, c.pts] for (s, e), c in zip(self.byte_ranges(), self.chunks)]
        )

    def resolution_switches(self) -> int:
        return sum(1 for a, b in zip(self.chunks, self.chunks[1:]) if a.resolution != b.resolution)

    def records(self) -> Iterable[dict]:
        sid = self.session_id
        yield {
            "type": "session",
            "v": SCHEMA_VERSION,
            "session": sid,
            "group": self.group,
            "start_time": self.start_time,
            "startup": self.startup,
            "latency": self.latency.to_obj(),
        }
        for c in self.chunks:
            yield {
                "type": "chunk",
                "v": SCHEMA_VERSION,
                "session": sid,
                "id": c.chunk_id,
                "t_send": c.t_send,
                "t_ack": c.t_ack,
                "size": c.size,
                "resolution": c.resolution,
                "pts": c.pts,
                "length": c.length,
            }
        for pts, duration in self.rebuffers:
            yield {"type": "rebuffer", "v": SCHEMA_VERSION, "session": sid, "pts": pts, "duration": duration}
        for t, level in self.health:
            yield {"type": "health", "v": SCHEMA_VERSION, "session": sid, "t": t, "buffer_s": level}


def dumps_trace(sessions: Iterable[TraceSession]) -> str:
    lines = []
    for s in sessions:
        lines.extend(json.dumps(r, separators=(",", ":")) for r in s.records())
    return "\n".join(lines) + "\n"


def write_trace(sessions: Iterable[TraceSession], path: str | Path) -> None:
    Path(path).write_text(dumps_trace(sessions))


def load_trace(path: str | Path) -> list[TraceSession]:
    with open(path) as fh:
        return parse_trace(fh)


_FIELDS = {
    "session": {"type", "v", "session", "group", "start_time", "startup", "latency"},
    "chunk": {"type", "v", "session", "id", "t_send", "t_ack", "size", "resolution", "pts", "length"},
    "rebuffer": {"type", "v", "session", "pts", "duration"},
    "health": {"type", "v", "session", "t", "buffer_s"},
}


def _number(rec: dict, key: str, line: int) -> float:
    v = rec[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise SchemaError(line, f"{key} must be a number")
    return float(v)


def parse_trace(lines: Iterable[str]) -> list[TraceSession]:
    sessions: dict[str, TraceSession] = {}
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except ValueError as exc:
            raise SchemaError(lineno, f"not JSON: {exc}") from None
        if not isinstance(rec, dict) or rec.get("type") not in _FIELDS:
            raise SchemaError(lineno, "record type must be one of session, chunk, rebuffer, health")
        if rec.get("v") != SCHEMA_VERSION:
            raise SchemaError(lineno, f"unsupported schema version {rec.get('v')!r}")
        kind = rec["type"]
        if set(rec) != _FIELDS[kind]:
            raise SchemaError(lineno, f"{kind} record fields must be {sorted(_FIELDS[kind])}")
        sid = rec["session"]
        if kind == "session":
            if sid in sessions:
                raise SchemaError(lineno, f"duplicate session {sid!r}")
            try:
                latency = LatencyProfile.from_obj(rec["latency"])
            except (KeyError, TypeError, ValueError):
                raise SchemaError(lineno, "latency must be {down: [base, jitter], up: [base, jitter]}") from None
            sessions[sid] = TraceSession(
                sid, latency=latency, group=str(rec["group"]), start_time=_number(rec, "start_time", lineno),
                startup=_number(rec, "startup", lineno),
            )
            continue
        sess = sessions.get(sid)
        if sess is None:
            raise SchemaError(lineno, f"{kind} record for undeclared session {sid!r}")
        if kind == "chunk":
            _add_chunk(sess, rec, lineno)
        elif kind == "rebuffer":
            pts, duration = _number(rec, "pts", lineno), _number(rec, "duration", lineno)
            if duration <= 0:
                raise SchemaError(lineno, "rebuffer duration must be positive")
            if not any(abs(c.end_pts - pts) <= _EPS for c in sess.chunks[:-1]):
                raise SchemaError(lineno, f"rebuffer pts {pts} is not an interior chunk boundary")
            sess.rebuffers.append((pts, duration))
        else:
            sess.health.append((_number(rec, "t", lineno), _number(rec, "buffer_s", lineno)))
    for sess in sessions.values():
        if not sess.chunks:
            raise SchemaError(0, f"session {sess.session_id!r} has no chunks")
    return list(sessions.values())


def _add_chunk(sess: TraceSession, rec: dict, line: int) -> None:
    if not isinstance(rec["id"], int) or rec["id"] != len(sess.chunks):
        raise SchemaError(line, f"chunk id must be {len(sess.chunks)}")
    if not isinstance(rec["size"], int) or rec["size"] <= 0:
        raise SchemaError(line, "size must be a positive integer")
    if not isinstance(rec["resolution"], str):
        raise SchemaError(line, "resolution must be a string")
    chunk = TraceChunk(
        rec["id"],
        _number(rec, "t_send", line),
        _number(rec, "t_ack", line),
        rec["size"],
        rec["resolution"],
        _number(rec, "pts", line),
        _number(rec, "length", line),
    )
    if chunk.length <= 0:
        raise SchemaError(line, "length must be positive")
    if chunk.t_ack < chunk.t_send:
        raise SchemaError(line, "t_ack precedes t_send")
    if sess.chunks:
        prev = sess.chunks[-1]
        if abs(chunk.pts - prev.end_pts) > _EPS:
            raise SchemaError(line, f"pts {chunk.pts} does not continue previous chunk ending at {prev.end_pts}")
        if chunk.t_send < prev.t_send:
            raise SchemaError(line, "t_send is not time-ordered")
        if chunk.t_ack < prev.t_ack:
            raise SchemaError(line, "t_ack is not time-ordered")
    sess.chunks.append(chunk)


def chunk_info(chunk: TraceChunk) -> ChunkInfo:
    return ChunkInfo(chunk.resolution, chunk.length, chunk.pts)
