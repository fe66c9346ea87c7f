"""Client monitor: watches the player buffer and raises events of interest.

Playback is modelled analytically.  The player timeline is advanced to the
instant something happens (a chunk becomes playable, a periodic tick), and
underruns are timestamped at the exact moment the buffered content ran out
rather than at the moment the tick noticed it.

A received chunk becomes playable ``insertion_delay`` seconds after it
arrives; the stall it ends is measured up to that instant.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

from ugovor import events as ev
from ugovor.contract import (
    EPS,
    Contract,
    InvalidContract,
    MalformedDocument,
    SessionLedger,
    WindowFrame,
    change_list,
    record_playback,
    record_rebuffering,
    roll_window,
    settle,
)
from ugovor.errors import UgoVorError
from ugovor.events import EventKind, EventOfInterest

log = logging.getLogger(__name__)

DEFAULT_INSERTION_DELAY = 0.010


class OutOfOrderChunk(UgoVorError):
    """A received chunk does not continue the buffered sequence."""


class AuditorUnreachable(UgoVorError):
    pass


@dataclass
class ReceivedChunk:
    chunk_id: int
    pts: float
    length_s: float
    resolution: str
    byte_range: tuple[int, int] = (0, 1)
    t_recv: float = 0.0
    t_ready: float = 0.0

    @property
    def end_pts(self) -> float:
        return self.pts + self.length_s


class PlayerBuffer:
    """Emulated player: buffered chunks, playhead and stall state.

    ``clock`` is the player's own notion of time, in the same domain as the
    receive timestamps.  Startup fill (before the first chunk is playable) is
    never reported as rebuffering.
    """

    def __init__(self, insertion_delay: float = DEFAULT_INSERTION_DELAY):
        self.insertion_delay = insertion_delay
        self.chunks: list[ReceivedChunk] = []
        self.playhead_pts = 0.0
        self.clock: float | None = None
        self.started = False
        self.playing = False
        self.stall_start: float | None = None
        self.ended = False
        self.finished = False
        self.last_resolution: str | None = None
        # chunks whose playback completed since the last drain
        self.completed: deque[ReceivedChunk] = deque()
        self._play_idx: int | None = None

    @property
    def buffered_end(self) -> float | None:
        return self.chunks[-1].end_pts if self.chunks else None

    @property
    def stalled(self) -> bool:
        return self.stall_start is not None

    @property
    def buffer_level(self) -> float:
        end = self.buffered_end
        return 0.0 if end is None else max(end - self.playhead_pts, 0.0)

    def advance_playhead(self, wall_dt: float) -> list[EventOfInterest]:
        if wall_dt < 0:
            raise ValueError("wall_dt must be non-negative")
        if self.clock is None:
            return []
        events: list[EventOfInterest] = []
        remaining = wall_dt
        while remaining > 0 and self.playing:
            if self._play_idx is None:
                if self.ended:
                    self.playing = False
                    self.finished = True
                else:
                    self.playing = False
                    self.stall_start = self.clock
                    events.append(ev.rebuffering(self.playhead_pts))
                break
            cur = self.chunks[self._play_idx]
            step = min(cur.end_pts - self.playhead_pts, remaining)
            self.playhead_pts += step
            self.clock += step
            remaining -= step
            if self.playhead_pts >= cur.end_pts - EPS:
                self.playhead_pts = cur.end_pts
                self.completed.append(cur)
                nxt = self._play_idx + 1
                self._play_idx = nxt if nxt < len(self.chunks) else None
                self._trim()
        self.clock += remaining
        return events

    def advance_to(self, t: float) -> list[EventOfInterest]:
        if self.clock is None or t <= self.clock:
            return []
        return self.advance_playhead(t - self.clock)

    def next_deadline(self) -> float | None:
        """Player time of the next chunk completion or underrun."""
        if not self.playing or self.clock is None:
            return None
        if self._play_idx is None:
            return self.clock
        return self.clock + (self.chunks[self._play_idx].end_pts - self.playhead_pts)

    def on_chunk_received(self, chunk: ReceivedChunk, t_recv: float) -> list[EventOfInterest]:
        chunk.t_recv = t_recv
        chunk.t_ready = t_recv + self.insertion_delay
        events = self.advance_to(chunk.t_ready)
        end = self.buffered_end
        if end is not None and abs(chunk.pts - end) > EPS:
            raise OutOfOrderChunk(f"chunk at pts {chunk.pts} does not follow buffered end {end}")
        self.chunks.append(chunk)
        if not self.started:
            self.started = True
            self.playing = True
            self.playhead_pts = chunk.pts
            self.clock = chunk.t_ready
            self._play_idx = len(self.chunks) - 1
        elif self.stalled:
            events.append(ev.rebuffering(self.playhead_pts, chunk.t_ready - self.stall_start))
            self.stall_start = None
            self.playing = True
            self._play_idx = len(self.chunks) - 1
        elif self.playing and self._play_idx is None:
            self._play_idx = len(self.chunks) - 1
        # the first chunk (of the session or after a reset) is not a change
        if self.last_resolution is not None and chunk.resolution != self.last_resolution:
            events.append(ev.resolution_change(chunk.pts, chunk.resolution))
        self.last_resolution = chunk.resolution
        return events

    def end_of_stream(self) -> None:
        self.ended = True
        if self.playing and self._play_idx is None:
            self.playing = False
            self.finished = True

    def reset(self, pts: float, t: float | None) -> None:
        """Drop the buffer; the next chunk restarts playback at ``pts``."""
        self.chunks.clear()
        self.completed.clear()
        self._play_idx = None
        self.playhead_pts = pts
        self.started = False
        self.playing = False
        self.stall_start = None
        self.last_resolution = None
        self.clock = t

    def _trim(self) -> None:
        if self._play_idx is not None and self._play_idx > 64:
            cut = self._play_idx - 1
            del self.chunks[:cut]
            self._play_idx -= cut


class ClientMonitor:
    """Per-session client monitor.

    Outbound wire bodies accumulate in :attr:`outbox` as ``(kind, body)``
    pairs; the transport drains it.  Rebufferings are reported to the
    auditor once the stall has ended and its duration is known; the stall
    start is recorded locally as a provisional event.
    """

    def __init__(self, session_id: str, *, insertion_delay: float = DEFAULT_INSERTION_DELAY):
        self.session_id = session_id
        self.player = PlayerBuffer(insertion_delay)
        self.engaged = False
        self.contract: Contract | None = None
        self.auditor: tuple[str, int] | None = None
        self.frame: WindowFrame | None = None
        self.ledger = SessionLedger()
        self.window_ledgers: list[dict] = []
        self.outbox: list[tuple[str, dict]] = []
        self.event_log: list[dict] = []
        self.unsettled: deque[EventOfInterest] = deque()
        self.terminated: str | None = None
        self._recent: deque[tuple[float, float, str]] = deque()
        self._now = 0.0

    # -- bootstrap ---------------------------------------------------------

    def engage(self, contract: Contract, auditor: tuple[str, int] | None = None) -> None:
        self.engaged = True
        self.contract = contract
        self.auditor = auditor
        self.frame = WindowFrame(contract.window_s)
        self.ledger = SessionLedger(window_start_pts=0.0)

    def bootstrap(self, headers: dict) -> bool:
        from ugovor.wire import MalformedHeader, bootstrap_client

        try:
            result = bootstrap_client(headers)
        except (InvalidContract, MalformedDocument, MalformedHeader) as exc:
            log.warning("session %s: unusable contract header (%s); disengaging", self.session_id, exc)
            self._log("disengaged", reason=str(exc))
            return False
        if result is None:
            self._log("disengaged", reason="no UgoVor headers")
            return False
        contract, auditor = result
        self.engage(contract, auditor)
        return True

    # -- playback ----------------------------------------------------------

    def on_chunk_received(self, chunk: ReceivedChunk, t_recv: float) -> list[EventOfInterest]:
        self._now = t_recv
        try:
            events = self.player.on_chunk_received(chunk, t_recv)
        except OutOfOrderChunk:
            self._out_of_order_reset(chunk.pts)
            events = self.player.on_chunk_received(chunk, t_recv)
        self._drain(events)
        return events

    def advance_playhead(self, wall_dt: float) -> list[EventOfInterest]:
        events = self.player.advance_playhead(wall_dt)
        self._drain(events)
        return events

    def advance_to(self, now: float) -> list[EventOfInterest]:
        self._now = max(self._now, now)
        events = self.player.advance_to(now)
        self._drain(events)
        return events

    def end_of_stream(self) -> None:
        self.player.end_of_stream()

    def _drain(self, events: list[EventOfInterest]) -> None:
        # chunk completions precede any stall the same advance produced
        while self.player.completed:
            self.update_ledger_and_check(self.player.completed.popleft())
        for event in events:
            if event.kind is EventKind.REBUFFERING and event.duration is None:
                self._log("event", provisional=True, **event.to_body())
            elif event.kind is EventKind.REBUFFERING:
                self._on_rebuffering(event)
            else:
                self.report(event)

    def _on_rebuffering(self, event: EventOfInterest) -> None:
        if not self.engaged:
            self._log("event", reported=False, **event.to_body())
            return
        self.report(event)
        self.ledger = record_rebuffering(self.ledger)
        self._check(event.pts)

    # -- contract accounting -----------------------------------------------

    def update_ledger_and_check(self, chunk: ReceivedChunk) -> None:
        """Account a fully played chunk, splitting it across window edges."""
        if not self.engaged:
            return
        self._recent.append((chunk.pts, chunk.length_s, chunk.resolution))
        start, end = chunk.pts, chunk.end_pts
        while start < end - EPS:
            wend = self.frame.end_of(self.ledger.window_index)
            portion_end = min(end, wend)
            self.ledger = record_playback(
                self.ledger, chunk.resolution, portion_end - start, window_s=self.contract.window_s
            )
            self._check(portion_end)
            start = portion_end
            if start >= wend - EPS:
                self._roll(wend)

    def _check(self, pts: float) -> None:
        if self.ledger.exhausted:
            return
        before = self.ledger
        self.ledger, violated = settle(self.contract, self.ledger)
        if not violated:
            return
        ws = before.window_start_pts
        changes = change_list(self._recent, ws, pts)
        for level in violated:
            self.report(ev.contract_violation(pts, before.window_index, level, changes))

    def _roll(self, new_start: float) -> None:
        self.window_ledgers.append(self.ledger.snapshot())
        self.ledger = roll_window(
            self.ledger, self.contract, new_start, new_index=self.frame.index_of(new_start)
        )
        while self._recent and self._recent[0][0] + self._recent[0][1] <= new_start + EPS and len(self._recent) > 1:
            self._recent.popleft()

    # -- auditor interaction -----------------------------------------------

    def report(self, event: EventOfInterest) -> tuple[str, dict] | None:
        """Queue a NOTIFY for the auditor; returns the queued message."""
        if not self.engaged or self.terminated:
            self._log("event", reported=False, **event.to_body())
            return None
        message = ("NOTIFY", event.to_body())
        self.outbox.append(message)
        self.unsettled.append(event)
        self._log("event", reported=True, **event.to_body())
        return message

    def on_sync(self, body: dict) -> None:
        for i, pending in enumerate(self.unsettled):
            if pending.kind.value == body["event"] and abs(pending.pts - body["pts"]) <= EPS:
                del self.unsettled[i]
                break
        else:
            self._log("desync", detail="SYNC for an event this monitor did not report", **body)
            return
        self._log("sync", **body)

    def on_terminate(self, reason: str) -> None:
        self.terminated = reason
        self._log("terminate", reason=reason)

    def on_reset_notice(self, body: dict) -> None:
        self._log("reset_ack", **body)

    def request_window_restart(self, pts: float) -> None:
        """In-buffer rewind/forward: start a fresh contract window at ``pts``."""
        self._restart_window(pts)
        self.outbox.append(("RESET", {"origin": "client", "mode": "rewind", "pts": pts}))
        self._log("reset", mode="rewind", pts=pts)

    def _out_of_order_reset(self, pts: float) -> None:
        self.player.reset(pts, self.player.clock)
        self._restart_window(pts)
        if self.engaged:
            self.outbox.append(("RESET", {"origin": "client", "mode": "out-of-order", "pts": pts}))
        self._log("reset", mode="out-of-order", pts=pts)

    def _restart_window(self, pts: float) -> None:
        if not self.engaged:
            return
        self.frame = self.frame.restarted(pts)
        self.ledger = roll_window(
            self.ledger, self.contract, pts, commanded=True, new_index=self.frame.index_of(pts)
        )
        self._recent.clear()
        self.unsettled.clear()

    def close(self) -> tuple[str, dict]:
        body = {"pts": self.player.playhead_pts}
        self.outbox.append(("CLOSE", body))
        self._log("close", **body)
        return ("CLOSE", body)

    def completed_windows(self) -> list[dict]:
        return list(self.window_ledgers)

    def _log(self, kind: str, **fields) -> None:
        self.event_log.append({"t": self._now, "type": kind, **fields})
