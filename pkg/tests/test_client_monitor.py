from __future__ import annotations

import pytest

from ugovor import wire
from ugovor.client_monitor import ClientMonitor, PlayerBuffer, ReceivedChunk
from ugovor.events import EventKind


def chunk(i, res="720p", length=2.0):
    return ReceivedChunk(i, i * length, length, res, (i * 10, i * 10 + 10))


def engaged(contract, delay=0.010):
    mon = ClientMonitor("s", insertion_delay=delay)
    mon.engage(contract, ("127.0.0.1", 9))
    return mon


def notify_events(mon):
    return [b for k, b in mon.outbox if k == "NOTIFY"]


class TestPlayerBuffer:
    def test_advance_within_buffer(self):
        pb = PlayerBuffer(0.0)
        pb.on_chunk_received(chunk(0), 0.0)
        assert pb.advance_playhead(1.0) == []
        assert pb.playhead_pts == pytest.approx(1.0)

    def test_underrun(self):
        pb = PlayerBuffer(0.0)
        pb.on_chunk_received(chunk(0), 0.0)
        events = pb.advance_playhead(2.5)
        assert pb.playhead_pts == 2.0 and not pb.playing
        assert [(e.kind, e.pts, e.duration) for e in events] == [(EventKind.REBUFFERING, 2.0, None)]
        assert pb.stall_start == pytest.approx(2.0)

    def test_no_duplicate_while_stalled(self):
        pb = PlayerBuffer(0.0)
        pb.on_chunk_received(chunk(0), 0.0)
        pb.advance_playhead(2.5)
        assert pb.advance_playhead(1.0) == []

    def test_stall_end_measures_with_insertion_delay(self):
        pb = PlayerBuffer(0.015)
        pb.on_chunk_received(chunk(0), 0.0)
        pb.advance_playhead(3.0)  # dry at 2.015
        events = pb.on_chunk_received(chunk(1), pb.stall_start + 1.0)
        (ev,) = [e for e in events if e.kind is EventKind.REBUFFERING]
        assert ev.pts == 2.0 and ev.duration == pytest.approx(1.015)

    def test_startup_is_not_rebuffering(self):
        pb = PlayerBuffer(0.0)
        assert pb.advance_playhead(10.0) == []
        assert pb.on_chunk_received(chunk(0), 10.0) == []

    def test_resolution_change_events(self):
        pb = PlayerBuffer(0.0)
        assert pb.on_chunk_received(chunk(0), 0.0) == []
        assert pb.on_chunk_received(chunk(1), 0.1) == []
        events = pb.on_chunk_received(chunk(2, "1080p"), 0.2)
        assert [(e.kind, e.pts, e.resolution) for e in events] == [(EventKind.RESOLUTION_CHANGE, 4.0, "1080p")]


class TestLedger:
    def test_below_cap_no_violation(self, ladder):
        mon = engaged(ladder, 0.0)
        for i in range(16):
            mon.on_chunk_received(chunk(i), i * 0.01)
        mon.advance_to(31.0)
        assert not [b for b in notify_events(mon) if b["event"] == "ContractViolation"]
        assert mon.ledger.played_s["720p"] == pytest.approx(30.0)

    def test_720p_past_half_window_violates_once(self, ladder):
        mon = engaged(ladder, 0.0)
        for i in range(40):
            mon.on_chunk_received(chunk(i), i * 0.01)
        mon.advance_to(70.0)
        viol = [b for b in notify_events(mon) if b["event"] == "ContractViolation"]
        assert len(viol) == 1
        # caps are checked per played chunk: 62 s is the first chunk end over 60 s
        assert viol[0]["pts"] == pytest.approx(62.0) and viol[0]["level"] == 0 and viol[0]["window"] == 0
        assert viol[0]["changes"] == [[0.0, "720p"]]
        assert mon.ledger.level_index == 1

    def test_second_rebuffering_violates_level0(self, ladder):
        mon = engaged(ladder, 0.0)
        mon.on_chunk_received(chunk(0, "1080p"), 0.0)
        mon.advance_to(3.0)
        mon.on_chunk_received(chunk(1, "1080p"), 3.0)
        mon.advance_to(6.0)
        mon.on_chunk_received(chunk(2, "1080p"), 6.0)
        kinds = [b["event"] for b in notify_events(mon)]
        assert kinds == ["Rebuffering", "Rebuffering", "ContractViolation"]
        assert mon.ledger.rebuffer_count == 2 and mon.ledger.level_index == 1

    def test_window_roll(self, ladder):
        mon = engaged(ladder, 0.0)
        for i in range(62):
            mon.on_chunk_received(chunk(i, "1080p"), i * 0.01)
        mon.advance_to(124.0)
        assert len(mon.completed_windows()) == 1
        assert mon.completed_windows()[0]["played_s"] == {"1080p": 120.0}
        assert mon.ledger.window_index == 1 and mon.ledger.window_start_pts == 120.0


class TestReporting:
    def test_rebuffering_notify(self, ladder):
        mon = engaged(ladder, 0.015)
        mon.on_chunk_received(chunk(0), 0.0)
        mon.advance_to(3.0)
        mon.on_chunk_received(chunk(1), 2.015 + 1.0)
        (body,) = notify_events(mon)
        assert body == {"event": "Rebuffering", "pts": 2.0, "duration": pytest.approx(1.015)}
        wire.encode(wire.WireMessage("s", 0, "NOTIFY", body))

    def test_resolution_change_notify(self, ladder):
        mon = engaged(ladder)
        for i, res in enumerate(["720p", "720p", "1080p"]):
            mon.on_chunk_received(chunk(i, res), i * 0.1)
        assert notify_events(mon) == [{"event": "ResolutionChange", "pts": 4.0, "resolution": "1080p"}]

    def test_sync_settles(self, ladder):
        mon = engaged(ladder)
        for i, res in enumerate(["720p", "1080p"]):
            mon.on_chunk_received(chunk(i, res), i * 0.1)
        assert len(mon.unsettled) == 1
        mon.on_sync({"event": "ResolutionChange", "pts": 2.0, "window": 0, "level": 0, "exhausted": False})
        assert not mon.unsettled

    def test_disengaged_without_headers(self):
        mon = ClientMonitor("s")
        assert mon.bootstrap({}) is False
        mon.on_chunk_received(chunk(0), 0.0)
        mon.on_chunk_received(chunk(1, "1080p"), 0.1)
        assert mon.outbox == []

    def test_bootstrap_from_headers(self, ladder):
        mon = ClientMonitor("s")
        assert mon.bootstrap(wire.server_headers(ladder, ("10.0.0.5", 7400)))
        assert mon.contract == ladder and mon.auditor == ("10.0.0.5", 7400)

    def test_out_of_order_chunk_resets(self, ladder):
        mon = engaged(ladder)
        mon.on_chunk_received(chunk(0), 0.0)
        mon.on_chunk_received(chunk(5), 0.1)
        assert ("RESET", {"origin": "client", "mode": "out-of-order", "pts": 10.0}) in mon.outbox
        assert mon.ledger.window_start_pts == 10.0
