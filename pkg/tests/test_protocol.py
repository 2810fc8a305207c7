from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenescout.errors import FramingError, ProtocolError
from scenescout.protocol import (
    ACK,
    CANDIDATE,
    FEEDBACK_ANNOTATION,
    FEEDBACK_UNINTERESTING,
    HELLO,
    PARAM_UPDATE,
    CandidateBuffer,
    CandidateFrame,
    LinkSim,
    Message,
    QueuedTransfer,
    StreamDecoder,
    SyncScheduler,
    ack_msg,
    candidate_msg,
    decode,
    encode,
    feedback_annotation_msg,
    feedback_uninteresting_msg,
    hello_msg,
    link_transfer,
    param_update_msg,
)

scores = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
frame_ids = st.text(
    alphabet=st.characters(whitelist_categories=("L", "N")), min_size=1, max_size=12
)


def sample_messages():
    return [
        hello_msg("robot"),
        candidate_msg("frame-7", 0.83, b"\x89PNG\x00\x01\x02"),
        candidate_msg("empty-blob", 0.5, b""),
        feedback_uninteresting_msg("frame-7"),
        feedback_annotation_msg(
            "frame-9",
            [{"class": "widget", "x_min": 1.0, "y_min": 2.0, "x_max": 3.0, "y_max": 4.5}],
        ),
        param_update_msg(3, b"header\n" + bytes(range(256))),
        ack_msg(PARAM_UPDATE, version=3),
    ]


class TestCodec:
    def test_roundtrip_every_kind(self):
        for msg in sample_messages():
            back = decode(encode(msg))
            assert back.kind == msg.kind
            assert back.header == msg.header
            assert back.blob == msg.blob

    @settings(max_examples=150, deadline=None)
    @given(frame_id=frame_ids, score=scores, blob=st.binary(max_size=512))
    def test_roundtrip_random_candidates(self, frame_id, score, blob):
        msg = candidate_msg(frame_id, score, blob)
        back = decode(encode(msg))
        assert back.header["frame_id"] == frame_id
        assert back.header["score"] == score
        assert back.blob == blob

    def test_truncated_frame_rejected(self):
        raw = encode(candidate_msg("f", 0.5, b"payload"))
        with pytest.raises(FramingError):
            decode(raw[:-3])
        with pytest.raises(FramingError):
            decode(raw[:2])

    def test_overlong_frame_rejected(self):
        raw = encode(hello_msg("robot"))
        with pytest.raises(FramingError):
            decode(raw + b"x")

    def test_zero_length_blob_valid(self):
        back = decode(encode(candidate_msg("f", 0.1, b"")))
        assert back.blob == b""

    def test_unknown_kind_is_protocol_error(self):
        body = json.dumps({"kind": "BOGUS", "blob_len": 0}).encode()
        raw = len(body).to_bytes(4, "big") + body
        with pytest.raises(ProtocolError):
            decode(raw)

    def test_invalid_candidate_header_rejected(self):
        with pytest.raises(ProtocolError):
            encode(Message(CANDIDATE, {"frame_id": "f", "score": 1.5}))
        with pytest.raises(ProtocolError):
            encode(Message(FEEDBACK_ANNOTATION, {"frame_id": "f", "boxes": []}))


class TestStreamDecoder:
    def test_reassembles_split_frames(self):
        stream = b"".join(encode(m) for m in sample_messages())
        dec = StreamDecoder()
        got = []
        for i in range(0, len(stream), 7):
            got.extend(dec.feed(stream[i : i + 7]))
        assert [m.kind for m in got] == [m.kind for m in sample_messages()]
        assert dec.pending_bytes == 0

    def test_unknown_kind_skipped_and_logged(self, caplog):
        body = json.dumps({"kind": "BOGUS", "blob_len": 0}).encode()
        bad = len(body).to_bytes(4, "big") + body
        good = encode(hello_msg("x"))
        dec = StreamDecoder()
        with caplog.at_level("WARNING"):
            got = dec.feed(bad + good)
        assert [m.kind for m in got] == [HELLO]
        assert any("skipping" in r.message for r in caplog.records)


class TestCandidateBuffer:
    def test_evicts_minimum_on_overflow(self):
        buf = CandidateBuffer(capacity=2)
        buf.push_candidate(CandidateFrame("a", 0.9))
        buf.push_candidate(CandidateFrame("b", 0.5))
        evicted = buf.push_candidate(CandidateFrame("c", 0.7))
        assert evicted is not None and evicted.frame_id == "b"
        assert {f.frame_id for f in buf.drain_highest(10)} == {"a", "c"}

    def test_no_eviction_below_capacity(self):
        buf = CandidateBuffer(capacity=3)
        assert buf.push_candidate(CandidateFrame("a", 0.9)) is None
        assert buf.push_candidate(CandidateFrame("b", 0.1)) is None

    def test_new_minimum_is_self_evicted(self):
        buf = CandidateBuffer(capacity=2)
        buf.push_candidate(CandidateFrame("a", 0.9))
        buf.push_candidate(CandidateFrame("b", 0.7))
        evicted = buf.push_candidate(CandidateFrame("c", 0.1))
        assert evicted is not None and evicted.frame_id == "c"

    def test_duplicate_id_keeps_higher_score_and_position(self):
        buf = CandidateBuffer(capacity=4)
        buf.push_candidate(CandidateFrame("a", 0.9, b"v1"))
        buf.push_candidate(CandidateFrame("b", 0.8))
        assert buf.push_candidate(CandidateFrame("a", 0.3, b"v2")) is None
        assert len(buf) == 2
        drained = buf.drain_highest(10)
        assert drained[0].frame_id == "a"
        assert drained[0].score == 0.9
        assert drained[0].payload == b"v2"

    def test_score_tie_evicts_older(self):
        buf = CandidateBuffer(capacity=2)
        buf.push_candidate(CandidateFrame("old", 0.5))
        buf.push_candidate(CandidateFrame("new", 0.5))
        evicted = buf.push_candidate(CandidateFrame("third", 0.9))
        assert evicted is not None and evicted.frame_id == "old"

    def test_drain_order(self):
        buf = CandidateBuffer(capacity=8)
        for fid, s in [("a", 0.9), ("b", 0.7), ("c", 0.3)]:
            buf.push_candidate(CandidateFrame(fid, s))
        assert [f.frame_id for f in buf.drain_highest(2)] == ["a", "b"]
        assert [f.frame_id for f in buf.drain_highest(5)] == ["c"]
        assert buf.drain_highest(1) == []

    def test_equal_scores_drain_older_first(self):
        buf = CandidateBuffer(capacity=4)
        buf.push_candidate(CandidateFrame("first", 0.5))
        buf.push_candidate(CandidateFrame("second", 0.5))
        assert [f.frame_id for f in buf.drain_highest(2)] == ["first", "second"]

    @settings(max_examples=100, deadline=None)
    @given(
        pushes=st.lists(
            st.tuples(st.integers(min_value=0, max_value=30), scores), max_size=40
        )
    )
    def test_capacity_and_min_monotonicity(self, pushes):
        buf = CandidateBuffer(capacity=4)
        last_full_min = None
        for i, (fid, score) in enumerate(pushes):
            was_full = len(buf) == buf.capacity
            known = f"f{fid}" in {e for e in buf._entries}
            buf.push_candidate(CandidateFrame(f"f{fid}", score))
            assert len(buf) <= buf.capacity
            if was_full and not known:
                m = buf.min_score()
                if last_full_min is not None:
                    assert m >= last_full_min - 1e-12
                last_full_min = m


class TestSyncScheduler:
    def test_no_new_version_never_due(self):
        s = SyncScheduler(period=10.0, initial_version=1)
        assert not s.sync_due(1000.0)

    def test_due_after_period_with_new_version(self):
        s = SyncScheduler(period=10.0, initial_version=1)
        s.note_version(2)
        s.mark_synced(0.0, 2)
        s.note_version(3)
        assert not s.sync_due(5.0)
        assert s.sync_due(10.0)

    def test_ack_clears_due(self):
        s = SyncScheduler(period=1.0, initial_version=1)
        s.note_version(5)
        assert s.sync_due(100.0)
        s.note_ack(5)
        assert not s.sync_due(200.0)


class TestLinkSim:
    def test_full_outage_delivers_nothing(self):
        sim = LinkSim(outages=[(0.0, 10.0)], bandwidth=1000.0)
        delivered, residual = link_transfer(sim, [b"hello"], 0.0, 10.0)
        assert delivered == []
        assert len(residual) == 1
        assert residual[0].remaining == 5

    def test_exact_bandwidth_delivery_time(self):
        sim = LinkSim(bandwidth=1000.0, latency=0.0)
        payload = bytes(1000)
        delivered, residual = link_transfer(sim, [payload], 5.0, 6.0)
        assert residual == []
        assert delivered == [(payload, 6.0)]

    def test_fifo_when_capacity_for_one(self):
        sim = LinkSim(bandwidth=1000.0)
        a, b = bytes(900), bytes(900)
        delivered, residual = link_transfer(sim, [a, b], 0.0, 1.0)
        assert [p for p, _ in delivered] == [a]
        assert len(residual) == 1 and residual[0].remaining < 900

    def test_latency_defers_delivery_across_windows(self):
        sim = LinkSim(bandwidth=1000.0, latency=0.5)
        payload = bytes(500)
        delivered, residual = link_transfer(sim, [payload], 0.0, 0.6)
        assert delivered == []
        assert residual[0].completed_at == pytest.approx(0.5)
        delivered, residual = link_transfer(sim, residual, 0.6, 2.0)
        assert delivered == [(payload, 1.0)]
        assert residual == []

    def test_resumes_after_outage(self):
        sim = LinkSim(outages=[(1.0, 3.0)], bandwidth=100.0)
        payload = bytes(150)
        delivered, residual = link_transfer(sim, [payload], 0.0, 4.0)
        # 100 bytes in [0,1), stalls through the outage, finishes at 3.5
        assert delivered == [(payload, 3.5)]
        assert residual == []

    def test_overlapping_outages_rejected(self):
        with pytest.raises(ValueError):
            LinkSim(outages=[(0.0, 5.0), (4.0, 6.0)])

    def test_deterministic(self):
        sim = LinkSim(outages=[(0.5, 0.9)], bandwidth=333.0, latency=0.1)
        msgs = [bytes(100), bytes(200), bytes(50)]
        a = link_transfer(sim, list(msgs), 0.0, 2.0)
        b = link_transfer(sim, list(msgs), 0.0, 2.0)
        assert a[0] == b[0]
        assert [(r.remaining, r.completed_at) for r in a[1]] == [
            (r.remaining, r.completed_at) for r in b[1]
        ]
