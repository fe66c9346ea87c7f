"""The server monitor's conservative picture of the client's player buffer.

Entries are appended when the server starts sending a chunk and completed
when the client's acknowledgment for it arrives.  Two clock domains meet
here: ``t_send``/``t_ack`` are server clock readings while ``pts`` and
``length_s`` are video time.  They are only combined in
:func:`must_confirm_rebuffering` and :func:`rebuffering_upper_bound`.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from ugovor.errors import UgoVorError

#: Default delay for the client to place a received chunk in its player buffer.
DEFAULT_C = 0.015

_EPS = 1e-9


class UnknownByteRange(UgoVorError):
    """A served byte range is not in the chunk map."""


class OutOfOrderRange(UgoVorError):
    """A served chunk does not continue the buffered sequence."""

    def __init__(self, record: "ChunkInfo", expected_pts: float):
        super().__init__(f"chunk at pts {record.pts} does not follow buffered end {expected_pts}")
        self.info = record
        self.expected_pts = expected_pts


class UnknownChunk(UgoVorError):
    pass


class DuplicateAck(UgoVorError):
    pass


class NonMonotoneAck(UgoVorError):
    pass


class MissingAck(UgoVorError):
    """The successor chunk has not been acknowledged yet."""


class OutOfBuffer(UgoVorError):
    """A presentation timestamp is not covered by buffered chunks."""


@dataclass(frozen=True)
class ChunkInfo:
    resolution: str
    length_s: float
    pts: float


class ChunkMap:
    """Byte range of each hosted chunk -> resolution, duration and pts."""

    def __init__(self, entries: Iterable[tuple[tuple[int, int], ChunkInfo]] = ()):
        self._map: dict[tuple[int, int], ChunkInfo] = {}
        for byte_range, info in entries:
            self.add(byte_range, info)

    def add(self, byte_range: tuple[int, int], info: ChunkInfo) -> None:
        start, end = byte_range
        if not start < end:
            raise ValueError(f"empty byte range {byte_range}")
        if info.length_s <= 0:
            raise ValueError("chunk length must be positive")
        for s, e in self._map:
            if start < e and s < end:
                raise ValueError(f"byte range {byte_range} overlaps {(s, e)}")
        self._map[(start, end)] = info

    def lookup(self, byte_range) -> ChunkInfo:
        try:
            return self._map[tuple(byte_range)]
        except KeyError:
            raise UnknownByteRange(f"byte range {tuple(byte_range)} is not in the chunk map") from None

    def __len__(self) -> int:
        return len(self._map)

    def __iter__(self) -> Iterator[tuple[tuple[int, int], ChunkInfo]]:
        return iter(sorted(self._map.items()))

    def to_list(self) -> list[list]:
        return [[s, e, i.resolution, i.length_s, i.pts] for (s, e), i in self]

    @classmethod
    def from_list(cls, rows) -> "ChunkMap":
        cmap = cls()
        # disjointness is checked pairwise in add(); for large maps check once on sorted rows
        rows = sorted(rows)
        for (s, e, *_), (s2, *_rest) in zip(rows, rows[1:]):
            if s2 < e:
                raise ValueError(f"byte range {(s, e)} overlaps the next range")
        for s, e, res, length, pts in rows:
            if not s < e or length <= 0:
                raise ValueError(f"bad chunk map row {(s, e, res, length, pts)}")
            cmap._map[(s, e)] = ChunkInfo(res, float(length), float(pts))
        return cmap

    def dumps(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def loads(cls, text: str) -> "ChunkMap":
        return cls.from_list(json.loads(text))


@dataclass
class ChunkRecord:
    chunk_id: int
    byte_range: tuple[int, int]
    resolution: str
    pts: float
    length_s: float
    t_send: float
    t_ack: float | None = None
    #: resolution of the chunk played just before this one (None at session start)
    prev_resolution: str | None = None

    @property
    def end_pts(self) -> float:
        return self.pts + self.length_s

    @property
    def size(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


def must_confirm_rebuffering(a: ChunkRecord, b: ChunkRecord) -> bool:
    """True when the server must accept a stall between ``a`` and its successor ``b``.

    The virtual buffer assumes the client started playing ``a`` the moment the
    server started sending it; if ``b``'s acknowledgment had not arrived by the
    time ``a`` would have finished, the client may well have run dry.
    """
    if b.t_ack is None:
        raise MissingAck(f"chunk {b.chunk_id} has not been acknowledged")
    return a.t_send + a.length_s <= b.t_ack


def rebuffering_upper_bound(a: ChunkRecord, b: ChunkRecord, c: float = DEFAULT_C) -> float:
    """Longest stall after ``a`` that an honest client could have measured."""
    if b.t_ack is None:
        raise MissingAck(f"chunk {b.chunk_id} has not been acknowledged")
    return b.t_ack - a.t_send - a.length_s + c


class VirtualBuffer:
    def __init__(self, chunk_map: ChunkMap):
        self.chunk_map = chunk_map
        self.entries: list[ChunkRecord] = []
        self._pts: list[float] = []
        self._by_id: dict[int, ChunkRecord] = {}
        self._next_id = 0
        self._fresh = True
        #: chunk id of the first chunk of the current contract window
        self.window_start_chunk = 0
        #: ids below this value were wiped by a reset
        self.wiped_below = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def end_pts(self) -> float | None:
        return self.entries[-1].end_pts if self.entries else None

    @property
    def start_pts(self) -> float | None:
        return self.entries[0].pts if self.entries else None

    def on_chunk_sent(self, byte_range, t_send: float) -> ChunkRecord:
        info = self.chunk_map.lookup(byte_range)
        prev = self.entries[-1] if self.entries else None
        if prev is not None:
            if t_send < prev.t_send:
                raise ValueError(f"send time {t_send} precedes previous send {prev.t_send}")
            if not self._fresh and abs(info.pts - prev.end_pts) > _EPS:
                raise OutOfOrderRange(info, prev.end_pts)
        record = ChunkRecord(
            chunk_id=self._next_id,
            byte_range=(int(byte_range[0]), int(byte_range[1])),
            resolution=info.resolution,
            pts=info.pts,
            length_s=info.length_s,
            t_send=t_send,
            prev_resolution=None if (self._fresh or prev is None) else prev.resolution,
        )
        if self._fresh:
            self.window_start_chunk = record.chunk_id
        self._fresh = False
        self._next_id += 1
        self.entries.append(record)
        self._pts.append(record.pts)
        self._by_id[record.chunk_id] = record
        return record

    def on_ack(self, chunk_id: int, t_ack: float) -> ChunkRecord:
        record = self._by_id.get(chunk_id)
        if record is None:
            raise UnknownChunk(f"no buffered chunk with id {chunk_id}")
        if record.t_ack is not None:
            raise DuplicateAck(f"chunk {chunk_id} already acknowledged")
        if t_ack < record.t_send:
            raise ValueError(f"ack at {t_ack} precedes send at {record.t_send}")
        prev = self._by_id.get(chunk_id - 1)
        if prev is not None and prev.t_ack is None:
            raise NonMonotoneAck(f"ack for chunk {chunk_id} before ack for chunk {chunk_id - 1}")
        record.t_ack = t_ack
        return record

    def get(self, chunk_id: int) -> ChunkRecord | None:
        return self._by_id.get(chunk_id)

    def entry_at(self, pts: float) -> ChunkRecord:
        i = bisect.bisect_right(self._pts, pts + _EPS) - 1
        if i < 0 or pts >= self.entries[i].end_pts - _EPS:
            raise OutOfBuffer(f"pts {pts} is not covered by the buffer")
        return self.entries[i]

    def resolution_at(self, pts: float) -> str:
        return self.entry_at(pts).resolution

    def boundary(self, pts: float) -> tuple[ChunkRecord, ChunkRecord | None]:
        """The chunk ending at ``pts`` and its successor (if already sent)."""
        i = bisect.bisect_right(self._pts, pts + _EPS) - 1
        # the chunk ending at pts is the one before the chunk starting there
        for j in (i - 1, i):
            if 0 <= j < len(self.entries) and abs(self.entries[j].end_pts - pts) <= _EPS:
                nxt = self.entries[j + 1] if j + 1 < len(self.entries) else None
                return self.entries[j], nxt
        raise OutOfBuffer(f"no buffered chunk ends at pts {pts}")

    def chunks_from(self, pts: float) -> Iterator[ChunkRecord]:
        i = max(bisect.bisect_right(self._pts, pts + _EPS) - 1, 0)
        return iter(self.entries[i:])

    def reset(self) -> None:
        """Forget everything; the next sent chunk starts a fresh session."""
        self.entries.clear()
        self._pts.clear()
        self._by_id.clear()
        self._fresh = True
        self.wiped_below = self._next_id

    def trim_before(self, pts: float) -> int:
        """Drop chunks that end at or before ``pts``, keeping one predecessor.

        Unacknowledged chunks are never dropped.  Returns the number of
        dropped entries.
        """
        first = next((k for k, e in enumerate(self.entries) if e.end_pts > pts + _EPS), len(self.entries))
        cut = max(first - 1, 0)
        cut = next((k for k, e in enumerate(self.entries[:cut]) if e.t_ack is None), cut)
        if first < len(self.entries):
            self.window_start_chunk = self.entries[first].chunk_id
        for e in self.entries[:cut]:
            del self._by_id[e.chunk_id]
        del self.entries[:cut]
        del self._pts[:cut]
        return cut
