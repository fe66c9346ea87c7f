from __future__ import annotations

import json

import pytest

from ugovor.auditor import Auditor, AuditorConfig, SessionNotActive, SessionState
from ugovor.events import rebuffering


def notify(aud, body, now=0.0, sid="s"):
    return aud.on_message(sid, "client", "NOTIFY", body, now)


def verdict(aud, qid, kind="Confirm", evidence=None, now=0.1, sid="s"):
    body = {"query_id": qid, "verdict": kind, "evidence": evidence or {}}
    return aud.on_message(sid, "server", "VERDICT", body, now)


REBUF = {"event": "Rebuffering", "pts": 2.0, "duration": 1.0}


@pytest.fixture
def aud(ladder):
    return Auditor(ladder, AuditorConfig(reply_timeout=5.0, reset_grace=1.0))


class TestClientEvent:
    def test_rebuffering_becomes_query(self, aud):
        (out,) = notify(aud, REBUF)
        assert out == ("server", "s", "QUERY", {"query_id": 0, **REBUF})

    def test_violation_query_carries_change_list(self, aud):
        body = {"event": "ContractViolation", "pts": 62.0, "window": 0, "level": 0, "changes": [[0.0, "720p"]]}
        (out,) = notify(aud, body)
        assert out[2] == "QUERY" and out[3]["changes"] == [[0.0, "720p"]]

    def test_closed_session_rejects(self, aud):
        notify(aud, REBUF)
        verdict(aud, 0)
        aud.on_message("s", "client", "CLOSE", {"pts": 10.0}, 1.0)
        sess = aud.sessions["s"]
        assert sess.state is SessionState.CLOSED
        with pytest.raises(SessionNotActive):
            aud.on_client_event(sess, rebuffering(4.0, 1.0), 2.0)

    def test_events_queue_fifo(self, aud):
        notify(aud, REBUF)
        assert notify(aud, {"event": "ResolutionChange", "pts": 4.0, "resolution": "1080p"}) == []
        out = verdict(aud, 0)
        assert [o[2] for o in out] == ["SYNC", "SYNC", "QUERY"]
        assert out[2][3]["query_id"] == 1 and out[2][3]["event"] == "ResolutionChange"


class TestReconcile:
    def test_confirm_rebuffering(self, aud):
        notify(aud, REBUF)
        out = verdict(aud, 0, evidence={"bound": 1.015})
        assert [(o[0], o[2]) for o in out] == [("client", "SYNC"), ("server", "SYNC")]
        assert out[0][3] == {"event": "Rebuffering", "pts": 2.0, "window": 0, "level": 0, "exhausted": False}
        assert aud.sessions["s"].windows[0].rebuffer_count == 1

    def test_dispute_terminates(self, aud):
        notify(aud, REBUF)
        out = verdict(aud, 0, kind="Dispute")
        assert [(o[0], o[2], o[3]["reason"]) for o in out] == [("client", "TERMINATE", "Dispute"), ("server", "TERMINATE", "Dispute")]
        assert aud.sessions["s"].state is SessionState.TERMINATING

    def test_confirm_violation_downgrades(self, aud):
        notify(aud, {"event": "ContractViolation", "pts": 62.0, "window": 0, "level": 0, "changes": [[0.0, "720p"]]})
        out = verdict(aud, 0)
        assert out[0][3]["level"] == 1 and not out[0][3]["exhausted"]
        assert aud.sessions["s"].state is SessionState.ACTIVE

    def test_violation_at_last_level_exhausts(self, aud):
        for level in range(3):
            notify(aud, {"event": "ContractViolation", "pts": 62.0 + level, "window": 0, "level": level, "changes": [[0.0, "720p"]]})
            out = verdict(aud, level)
        assert out[0][3]["exhausted"] and aud.sessions["s"].state is SessionState.ACTIVE

    def test_unmatched_verdict_is_protocol_error(self, aud):
        notify(aud, REBUF)
        out = verdict(aud, 9)
        assert out[0][3]["reason"] == "ProtocolError"


class TestTimeout:
    def test_silent_server(self, aud):
        notify(aud, REBUF, now=0.0)
        assert aud.tick(4.9) == []
        out = aud.tick(5.0)
        assert out[0][3]["reason"] == "Timeout"

    def test_verdict_within_budget(self, aud):
        notify(aud, REBUF, now=0.0)
        out = verdict(aud, 0, now=4.9)
        assert out[0][2] == "SYNC"

    def test_deferred_restarts_timer_once(self, aud):
        notify(aud, REBUF, now=0.0)
        assert verdict(aud, 0, kind="Deferred", now=2.5) == []
        assert aud.tick(7.4) == []
        assert verdict(aud, 0, kind="Deferred", now=7.45) == []
        assert aud.tick(7.5)[0][3]["reason"] == "Timeout"


class TestReset:
    def test_both_sides_within_grace(self, aud):
        aud.on_message("s", "client", "RESET", {"origin": "client", "mode": "out-of-order", "pts": 40.0}, 10.0)
        aud.on_message("s", "server", "RESET", {"origin": "server", "mode": "out-of-order", "pts": 40.0}, 10.5)
        sess = aud.sessions["s"]
        assert sess.state is SessionState.ACTIVE and sess.frame.anchor_pts == 40.0

    def test_one_sided(self, aud):
        aud.on_message("s", "client", "RESET", {"origin": "client", "mode": "out-of-order", "pts": 40.0}, 10.0)
        out = aud.tick(11.1)
        assert out[0][3]["reason"] == "OneSidedReset"

    def test_rewind_tells_server_to_trim(self, aud):
        out = aud.on_message("s", "client", "RESET", {"origin": "client", "mode": "rewind", "pts": 30.0}, 5.0)
        assert out == [("server", "s", "RESET", {"origin": "auditor", "mode": "trim", "pts": 30.0})]


class TestExportLog:
    def test_event_and_window_records(self, aud, tmp_path):
        notify(aud, REBUF)
        verdict(aud, 0, evidence={"bound": 1.015})
        aud.on_message("s", "client", "CLOSE", {"pts": 100.0}, 1.0)
        log = aud.export_log("s")
        assert [r["type"] for r in log] == ["event", "window", "close"]
        assert log[1]["outcome"] == "Satisfied" and log[1]["rebuffer_count"] == 1
        index = aud.write_logs(tmp_path)
        row = json.loads(index.read_text())
        assert row["outcome"] == "Close" and row["events"] == 1
        assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 3

    def test_terminated_log_ends_with_reason(self, aud):
        notify(aud, REBUF)
        verdict(aud, 0, kind="Dispute")
        last = aud.export_log("s")[-1]
        assert (last["type"], last["reason"]) == ("terminate", "Dispute")

    def test_exhausted_window_record(self, aud):
        for level in range(3):
            notify(aud, {"event": "ContractViolation", "pts": 62.0 + level, "window": 0, "level": level, "changes": [[0.0, "720p"]]})
            verdict(aud, level)
        aud.on_message("s", "client", "CLOSE", {"pts": 100.0}, 1.0)
        (window,) = [r for r in aud.export_log("s") if r["type"] == "window"]
        assert window["outcome"] == "Exhausted" and window["violations"] == [0, 1, 2]
