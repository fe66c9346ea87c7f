from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ugovor.client_monitor import PlayerBuffer, ReceivedChunk
from ugovor.events import EventKind
from ugovor.virtual_buffer import (
    DEFAULT_C,
    ChunkInfo,
    ChunkMap,
    ChunkRecord,
    DuplicateAck,
    MissingAck,
    NonMonotoneAck,
    OutOfBuffer,
    UnknownByteRange,
    UnknownChunk,
    VirtualBuffer,
    must_confirm_rebuffering,
    rebuffering_upper_bound,
)

MB = 1_000_000


def rec(t_send, length=2.0, t_ack=None, pts=0.0, cid=0):
    return ChunkRecord(cid, (0, 1), "720p", pts, length, t_send, t_ack)


def two_chunk_map(res=("720p", "1080p")):
    return ChunkMap(
        [
            ((0, 4 * MB), ChunkInfo(res[0], 2.0, 0.0)),
            ((4 * MB, 8 * MB), ChunkInfo(res[1], 2.0, 2.0)),
            ((8 * MB, 12 * MB), ChunkInfo(res[1], 2.0, 4.0)),
        ]
    )


class TestChunkMap:
    def test_overlap_rejected(self):
        cmap = two_chunk_map()
        with pytest.raises(ValueError):
            cmap.add((1, 5), ChunkInfo("720p", 2.0, 6.0))

    def test_round_trip(self):
        cmap = two_chunk_map()
        assert ChunkMap.loads(cmap.dumps()).to_list() == cmap.to_list()


class TestOnChunkSent:
    def test_first_append(self):
        vb = VirtualBuffer(two_chunk_map())
        r = vb.on_chunk_sent((0, 4 * MB), 0.0)
        assert (r.pts, r.length_s, r.t_send, r.t_ack) == (0.0, 2.0, 0.0, None)

    def test_unknown_range(self):
        with pytest.raises(UnknownByteRange):
            VirtualBuffer(two_chunk_map()).on_chunk_sent((1, 2), 0.0)

    def test_consecutive_pts(self):
        vb = VirtualBuffer(two_chunk_map())
        vb.on_chunk_sent((0, 4 * MB), 0.0)
        assert vb.on_chunk_sent((4 * MB, 8 * MB), 0.5).pts == 2.0


class TestOnAck:
    def setup_method(self):
        self.vb = VirtualBuffer(two_chunk_map())
        self.vb.on_chunk_sent((0, 4 * MB), 0.0)
        self.vb.on_chunk_sent((4 * MB, 8 * MB), 0.1)

    def test_records_ack(self):
        assert self.vb.on_ack(0, 0.4).t_ack == 0.4

    def test_duplicate(self):
        self.vb.on_ack(0, 0.4)
        with pytest.raises(DuplicateAck):
            self.vb.on_ack(0, 0.5)

    def test_unknown(self):
        with pytest.raises(UnknownChunk):
            self.vb.on_ack(7, 0.4)

    def test_out_of_order(self):
        with pytest.raises(NonMonotoneAck):
            self.vb.on_ack(1, 0.4)


class TestConfirmRule:
    def test_late_ack_confirms(self):
        assert must_confirm_rebuffering(rec(0.0), rec(1.0, t_ack=2.5))

    def test_early_ack_does_not(self):
        assert not must_confirm_rebuffering(rec(0.0), rec(1.0, t_ack=1.9))

    def test_boundary_inclusive(self):
        assert must_confirm_rebuffering(rec(0.0), rec(1.0, t_ack=2.0))

    def test_missing_ack(self):
        with pytest.raises(MissingAck):
            must_confirm_rebuffering(rec(0.0), rec(1.0))


class TestUpperBound:
    def test_formula(self):
        assert rebuffering_upper_bound(rec(0.0), rec(1.0, t_ack=3.0), 0.015) == pytest.approx(1.015)

    def test_bound_equals_c_at_expected_end(self):
        assert rebuffering_upper_bound(rec(0.0), rec(1.0, t_ack=2.0), 0.015) == pytest.approx(0.015)

    def test_default_c(self):
        assert DEFAULT_C == 0.015


class TestResolutionAt:
    def setup_method(self):
        self.vb = VirtualBuffer(two_chunk_map())
        self.vb.on_chunk_sent((0, 4 * MB), 0.0)
        self.vb.on_chunk_sent((4 * MB, 8 * MB), 0.1)

    def test_inside(self):
        assert self.vb.resolution_at(1.0) == "720p"

    def test_half_open(self):
        assert self.vb.resolution_at(2.0) == "1080p"

    def test_outside(self):
        with pytest.raises(OutOfBuffer):
            self.vb.resolution_at(9.0)


class TestReset:
    def test_reset_empties(self):
        vb = VirtualBuffer(two_chunk_map())
        vb.on_chunk_sent((0, 4 * MB), 0.0)
        vb.reset()
        assert len(vb) == 0

    def test_fresh_session_after_reset(self):
        vb = VirtualBuffer(two_chunk_map())
        vb.on_chunk_sent((0, 4 * MB), 0.0)
        vb.reset()
        # a jump straight to pts 4 is accepted as the start of a new session
        r = vb.on_chunk_sent((8 * MB, 12 * MB), 1.0)
        assert r.pts == 4.0 and r.prev_resolution is None and vb.window_start_chunk == r.chunk_id

    def test_trim_keeps_one_predecessor(self):
        vb = VirtualBuffer(two_chunk_map())
        for i, rng in enumerate([(0, 4 * MB), (4 * MB, 8 * MB), (8 * MB, 12 * MB)]):
            vb.on_chunk_sent(rng, float(i))
            vb.on_ack(i, i + 0.5)
        dropped = vb.trim_before(4.0)
        assert dropped == 1
        assert [e.pts for e in vb.entries] == [2.0, 4.0]
        assert vb.window_start_chunk == 2

    def test_trim_never_drops_unacked(self):
        vb = VirtualBuffer(two_chunk_map())
        for i, rng in enumerate([(0, 4 * MB), (4 * MB, 8 * MB), (8 * MB, 12 * MB)]):
            vb.on_chunk_sent(rng, float(i))
        assert vb.trim_before(4.0) == 0


# -- conservativeness and duration soundness over random delay schedules ----------

delays = st.floats(0.0, 5.0, allow_nan=False)


@st.composite
def schedules(draw):
    n = draw(st.integers(2, 30))
    gaps = draw(st.lists(st.floats(0.0, 4.0), min_size=n, max_size=n))
    down = draw(st.lists(delays, min_size=n, max_size=n))
    up = draw(st.lists(st.floats(0.0, 0.5), min_size=n, max_size=n))
    return gaps, down, up


class TestConservativeness:
    @settings(max_examples=400, deadline=None)
    @given(schedules(), st.floats(0.0, 0.015))
    def test_every_underrun_is_confirmable_and_bounded(self, schedule, insertion):
        gaps, down, up = schedule
        t_send, recv, t_ack = [], [], []
        t = 0.0
        for g, d, u in zip(gaps, down, up):
            t += g
            t_send.append(t)
            # ordered transport: a chunk cannot finish arriving before its predecessor
            recv.append(max(recv[-1] if recv else 0.0, t + d))
            t_ack.append(max(t_ack[-1] if t_ack else 0.0, recv[-1] + u))
        records = [ChunkRecord(i, (i, i + 1), "720p", 2.0 * i, 2.0, t_send[i], t_ack[i]) for i in range(len(gaps))]
        pb = PlayerBuffer(insertion)
        stalls = []
        for i, r in enumerate(recv):
            events = pb.on_chunk_received(ReceivedChunk(i, 2.0 * i, 2.0, "720p"), r)
            stalls += [e for e in events if e.kind is EventKind.REBUFFERING and e.duration is not None]
        for e in stalls:
            k = int(round(e.pts / 2.0))
            a, b = records[k - 1], records[k]
            assert must_confirm_rebuffering(a, b)
            assert e.duration <= rebuffering_upper_bound(a, b, DEFAULT_C) + 1e-9

    def test_false_positive_direction_is_allowed(self):
        # a late ack without any stall still confirms; only the safe direction is asserted
        a, b = rec(0.0), rec(0.1, t_ack=2.5)
        assert must_confirm_rebuffering(a, b)
