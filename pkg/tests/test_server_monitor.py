from __future__ import annotations

import pytest

from ugovor.server_monitor import (
    ACK,
    SERVED,
    MisbehaviorReport,
    ServerConfig,
    ServerMonitor,
    SnifferRecord,
    UnknownSession,
)
from ugovor.virtual_buffer import ChunkInfo, ChunkMap

MB = 1_000_000


def cmap(resolutions, size=4 * MB, length=2.0):
    return ChunkMap(
        [((i * size, (i + 1) * size), ChunkInfo(res, length, i * length)) for i, res in enumerate(resolutions)]
    )


def served(i, t, size=4 * MB, sid="s"):
    return SnifferRecord(sid, SERVED, t, byte_range=(i * size, (i + 1) * size))


def ack(i, t, sid="s"):
    return SnifferRecord(sid, ACK, t, ack_chunk_id=i)


@pytest.fixture
def monitor(ladder):
    return ServerMonitor(ladder, cmap(["720p", "720p", "1080p", "1080p"]), ServerConfig(c=0.015))


class TestIngest:
    def test_served_chunk_creates_session(self, monitor):
        monitor.ingest(served(0, 0.0))
        assert len(monitor.session("s").vb) == 1

    def test_ack_recorded(self, monitor):
        monitor.ingest(served(0, 0.0))
        monitor.ingest(ack(0, 0.4))
        assert monitor.session("s").vb.get(0).t_ack == 0.4

    def test_unknown_session(self, monitor):
        with pytest.raises(UnknownSession):
            monitor.session("nope")

    def test_record_shape_enforced(self):
        with pytest.raises(ValueError):
            SnifferRecord("s", SERVED, 0.0)


class TestRebufferingQuery:
    def test_confirm_with_bound(self, monitor):
        monitor.ingest(served(0, 0.0))
        monitor.ingest(ack(0, 0.4))
        monitor.ingest(served(1, 2.9))
        monitor.ingest(ack(1, 3.0))
        v = monitor.answer_query("s", {"event": "Rebuffering", "pts": 2.0, "duration": 0.9})
        assert v.kind == "Confirm" and v.evidence["bound"] == pytest.approx(1.015)

    def test_dispute_when_successor_acked_early(self, monitor):
        monitor.ingest(served(0, 0.0))
        monitor.ingest(ack(0, 0.4))
        monitor.ingest(served(1, 1.0))
        monitor.ingest(ack(1, 1.9))
        assert monitor.answer_query("s", {"event": "Rebuffering", "pts": 2.0, "duration": None}).kind == "Dispute"

    def test_dispute_when_duration_exceeds_bound(self, monitor):
        monitor.ingest(served(0, 0.0))
        monitor.ingest(ack(0, 0.4))
        monitor.ingest(served(1, 2.9))
        monitor.ingest(ack(1, 3.0))
        assert monitor.answer_query("s", {"event": "Rebuffering", "pts": 2.0, "duration": 1.2}).kind == "Dispute"

    def test_deferred_until_ack(self, monitor):
        monitor.ingest(served(0, 0.0))
        monitor.ingest(ack(0, 0.4))
        monitor.ingest(served(1, 2.9))
        body = {"query_id": 0, "event": "Rebuffering", "pts": 2.0, "duration": 0.9}
        assert monitor.on_message("s", "QUERY", body, 3.0) == []
        (out,) = monitor.ingest(ack(1, 3.0))
        assert out[1] == "VERDICT" and out[2]["verdict"] == "Confirm" and out[2]["query_id"] == 0

    def test_deferred_sent_after_grace(self, monitor):
        monitor.ingest(served(0, 0.0))
        body = {"query_id": 4, "event": "Rebuffering", "pts": 2.0, "duration": 0.9}
        monitor.on_message("s", "QUERY", body, 1.0)
        assert monitor.tick(2.0) == []
        (out,) = monitor.tick(3.6)
        assert out[2]["verdict"] == "Deferred"
        assert monitor.tick(10.0) == []

    def test_deterministic(self, monitor, ladder):
        records = [served(0, 0.0), ack(0, 0.4), served(1, 2.9), ack(1, 3.0)]
        other = ServerMonitor(ladder, cmap(["720p", "720p", "1080p", "1080p"]))
        for r in records:
            monitor.ingest(r)
            other.ingest(r)
        q = {"event": "Rebuffering", "pts": 2.0, "duration": 0.5}
        assert monitor.answer_query("s", q) == other.answer_query("s", q)


class TestResolutionQuery:
    def feed(self, monitor, n=4):
        for i in range(n):
            monitor.ingest(served(i, i * 0.5))

    def test_confirm_real_change(self, monitor):
        self.feed(monitor)
        v = monitor.answer_query("s", {"event": "ResolutionChange", "pts": 4.0, "resolution": "1080p"})
        assert v.kind == "Confirm" and v.evidence == {"resolution": "1080p", "previous": "720p"}

    def test_dispute_wrong_label(self, monitor):
        self.feed(monitor)
        assert monitor.answer_query("s", {"event": "ResolutionChange", "pts": 2.0, "resolution": "1080p"}).kind == "Dispute"

    def test_dispute_when_not_a_change(self, monitor):
        self.feed(monitor)
        assert monitor.answer_query("s", {"event": "ResolutionChange", "pts": 6.0, "resolution": "1080p"}).kind == "Dispute"

    def test_deferred_when_not_yet_sent(self, monitor):
        self.feed(monitor, 2)
        assert monitor.answer_query("s", {"event": "ResolutionChange", "pts": 4.0, "resolution": "1080p"}).kind == "Deferred"


class TestViolationQuery:
    def test_confirm_matching_change_list(self, ladder):
        mon = ServerMonitor(ladder, cmap(["720p"] * 40))
        for i in range(40):
            mon.ingest(served(i, i * 0.5))
        body = {"event": "ContractViolation", "pts": 62.0, "window": 0, "level": 0, "changes": [[0.0, "720p"]]}
        v = mon.answer_query("s", body)
        assert v.kind == "Confirm" and v.evidence["changes"] == [[0.0, "720p"]]

    def test_dispute_on_different_list(self, ladder):
        mon = ServerMonitor(ladder, cmap(["720p"] * 40))
        for i in range(40):
            mon.ingest(served(i, i * 0.5))
        body = {"event": "ContractViolation", "pts": 62.0, "window": 0, "level": 0, "changes": [[0.0, "1080p"]]}
        assert mon.answer_query("s", body).kind == "Dispute"

    def test_dispute_when_no_cap_exceeded(self, ladder):
        mon = ServerMonitor(ladder, cmap(["720p"] * 40))
        for i in range(40):
            mon.ingest(served(i, i * 0.5))
        body = {"event": "ContractViolation", "pts": 40.0, "window": 0, "level": 0, "changes": [[0.0, "720p"]]}
        assert mon.answer_query("s", body).kind == "Dispute"


class TestDelayedAcks:
    def run(self, ladder, size, ack_delay, n=12):
        mon = ServerMonitor(ladder, cmap(["1080p"] * n, size=size), ServerConfig(window_chunks=10, theta=2.0))
        out = []
        for i in range(n):
            out += mon.ingest(served(i, i * 2.0, size=size))
            out += mon.ingest(ack(i, i * 2.0 + ack_delay))
        return mon, out

    def test_slow_acks_on_high_bitrate(self, ladder):
        # 2 MB per 2 s chunk is 8 Mb/s; acks 16 s after sending imply 1 Mb/s
        mon, out = self.run(ladder, 2 * MB, 16.0)
        (msg,) = [o for o in out if o[1] == "MISBEHAVIOR"]
        assert msg[2]["chunk_bitrate_bps"] == pytest.approx(8e6)
        assert msg[2]["ack_throughput_bps"] == pytest.approx(1e6)

    def test_consistent_congestion(self, ladder):
        # 250 kB chunks at 1 Mb/s play out as fast as they arrive
        mon, out = self.run(ladder, 250_000, 1.9)
        assert not [o for o in out if o[1] == "MISBEHAVIOR"]

    def test_warm_up_guard(self, ladder):
        mon, out = self.run(ladder, 2 * MB, 16.0, n=9)
        assert mon.session("s").detect_delayed_acks() is None and not out

    def test_report_body(self):
        r = MisbehaviorReport("s", 1e6, 8e6, 10)
        assert r.to_body() == {"reason": "delayed-acks", "ack_throughput_bps": 1e6, "chunk_bitrate_bps": 8e6, "chunks": 10}


class TestOutOfOrder:
    def test_jump_resets_and_notifies(self, monitor):
        monitor.ingest(served(0, 0.0))
        out = monitor.ingest(served(2, 0.5))
        assert out == [("s", "RESET", {"origin": "server", "mode": "out-of-order", "pts": 4.0})]
        sess = monitor.session("s")
        assert [e.pts for e in sess.vb.entries] == [4.0] and sess.frame.anchor_pts == 4.0
