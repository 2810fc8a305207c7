"""Robot-station wire protocol and link machinery.

Frames are length-prefixed: a 4-byte big-endian total length, a UTF-8
JSON header (which carries the message kind and blob_len), then the raw
blob. Candidates waiting out a network interruption live in a bounded
score-ordered buffer that evicts the lowest-scored entry, and drain in
priority order once the link returns. A deterministic lossy-link
simulator drives the headless end-to-end tests.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

from .errors import FramingError, ProtocolError

logger = logging.getLogger(__name__)

HELLO = "HELLO"
CANDIDATE = "CANDIDATE"
FEEDBACK_UNINTERESTING = "FEEDBACK_UNINTERESTING"
FEEDBACK_ANNOTATION = "FEEDBACK_ANNOTATION"
PARAM_UPDATE = "PARAM_UPDATE"
ACK = "ACK"

MESSAGE_KINDS = frozenset(
    {HELLO, CANDIDATE, FEEDBACK_UNINTERESTING, FEEDBACK_ANNOTATION, PARAM_UPDATE, ACK}
)

_LEN = struct.Struct(">I")


@dataclass
class Message:
    kind: str
    header: dict
    blob: bytes = b""


def _validate(msg: Message) -> None:
    if msg.kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    h = msg.header
    if msg.kind == CANDIDATE:
        if "frame_id" not in h or "score" not in h:
            raise ProtocolError("CANDIDATE needs frame_id and score")
        if not (0.0 <= float(h["score"]) <= 1.0):
            raise ProtocolError("CANDIDATE score must lie in [0, 1]")
    elif msg.kind == FEEDBACK_UNINTERESTING:
        if "frame_id" not in h:
            raise ProtocolError("FEEDBACK_UNINTERESTING needs frame_id")
    elif msg.kind == FEEDBACK_ANNOTATION:
        boxes = h.get("boxes")
        if "frame_id" not in h or not boxes:
            raise ProtocolError("FEEDBACK_ANNOTATION needs frame_id and >=1 boxes")
        for b in boxes:
            if "class" not in b:
                raise ProtocolError("annotation box needs a class name")
    elif msg.kind == PARAM_UPDATE:
        if not msg.blob:
            raise ProtocolError("PARAM_UPDATE needs a delta blob")


def encode(msg: Message) -> bytes:
    """Serialize one frame; decode(encode(m)) == m."""
    _validate(msg)
    header = {"kind": msg.kind, "blob_len": len(msg.blob), **msg.header}
    hjson = json.dumps(header, ensure_ascii=True).encode("utf-8")
    total = len(hjson) + len(msg.blob)
    return _LEN.pack(total) + hjson + msg.blob


def decode(data: bytes) -> Message:
    """Parse exactly one frame from data; anything shorter or longer than
    the declared length is a framing error."""
    if len(data) < _LEN.size:
        raise FramingError("frame shorter than its length prefix")
    (total,) = _LEN.unpack_from(data)
    body = data[_LEN.size :]
    if len(body) != total:
        raise FramingError(f"declared length {total}, got {len(body)} bytes")
    return _decode_body(body)


def _decode_body(body: bytes) -> Message:
    # the header is ASCII JSON (ensure_ascii on encode); latin-1 maps bytes
    # to chars 1:1 so raw_decode can find the header end before the blob
    try:
        obj, end = json.JSONDecoder().raw_decode(body.decode("latin-1"))
    except json.JSONDecodeError as exc:
        raise FramingError(f"unparseable frame header: {exc}") from exc
    if not isinstance(obj, dict) or "kind" not in obj or "blob_len" not in obj:
        raise FramingError("frame header missing kind/blob_len")
    blob = body[end:]
    if len(blob) != obj["blob_len"]:
        raise FramingError(
            f"blob length {len(blob)} does not match declared {obj['blob_len']}"
        )
    kind = obj.pop("kind")
    obj.pop("blob_len")
    msg = Message(kind=kind, header=obj, blob=blob)
    _validate(msg)
    return msg


class StreamDecoder:
    """Incremental frame splitter for a reliable byte stream. Frames with
    unknown kinds are skipped (logged), not fatal."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out: list[Message] = []
        while True:
            if len(self._buf) < _LEN.size:
                break
            (total,) = _LEN.unpack_from(bytes(self._buf[: _LEN.size]))
            if len(self._buf) < _LEN.size + total:
                break
            body = bytes(self._buf[_LEN.size : _LEN.size + total])
            del self._buf[: _LEN.size + total]
            try:
                out.append(_decode_body(body))
            except ProtocolError as exc:
                logger.warning("skipping protocol-invalid frame: %s", exc)
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def hello_msg(node: str) -> Message:
    return Message(HELLO, {"node": node})


def candidate_msg(frame_id: str, score: float, image_bytes: bytes) -> Message:
    return Message(CANDIDATE, {"frame_id": frame_id, "score": score}, image_bytes)


def feedback_uninteresting_msg(frame_id: str) -> Message:
    return Message(FEEDBACK_UNINTERESTING, {"frame_id": frame_id})


def feedback_annotation_msg(frame_id: str, boxes: list[dict]) -> Message:
    return Message(FEEDBACK_ANNOTATION, {"frame_id": frame_id, "boxes": boxes})


def param_update_msg(version: int, delta_blob: bytes) -> Message:
    return Message(PARAM_UPDATE, {"version": version}, delta_blob)


def ack_msg(of_kind: str, **ids) -> Message:
    return Message(ACK, {"of": of_kind, **ids})


@dataclass
class CandidateFrame:
    frame_id: str
    score: float
    payload: bytes = b""


@dataclass
class _Entry:
    frame_id: str
    score: float
    payload: bytes
    seq: int


class CandidateBuffer:
    """Bounded max-priority candidate store.

    Pushing onto a full buffer evicts the minimum-score entry of the
    post-push union (score ties evict the older frame first), so the
    buffered minimum never decreases while full. Duplicate frame ids
    replace the payload in place and keep the higher score.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: dict[str, _Entry] = {}
        self._seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def min_score(self) -> float | None:
        if not self._entries:
            return None
        return min(e.score for e in self._entries.values())

    def push_candidate(self, frame: CandidateFrame) -> CandidateFrame | None:
        """Insert a frame; returns the evicted frame, if any."""
        if not (0.0 <= frame.score <= 1.0) or frame.score != frame.score:
            raise ValueError("candidate score must lie in [0, 1]")
        existing = self._entries.get(frame.frame_id)
        if existing is not None:
            existing.payload = frame.payload
            existing.score = max(existing.score, frame.score)
            return None
        self._entries[frame.frame_id] = _Entry(
            frame.frame_id, frame.score, frame.payload, self._seq
        )
        self._seq += 1
        if len(self._entries) <= self.capacity:
            return None
        victim = min(self._entries.values(), key=lambda e: (e.score, e.seq))
        del self._entries[victim.frame_id]
        return CandidateFrame(victim.frame_id, victim.score, victim.payload)

    def drain_highest(self, n: int) -> list[CandidateFrame]:
        """Remove and return up to n entries in non-increasing score order;
        equal scores drain older-first."""
        if n < 1:
            raise ValueError("n must be >= 1")
        ranked = sorted(self._entries.values(), key=lambda e: (-e.score, e.seq))[:n]
        out = []
        for e in ranked:
            del self._entries[e.frame_id]
            out.append(CandidateFrame(e.frame_id, e.score, e.payload))
        return out


class SyncScheduler:
    """Periodic parameter-sync gate: due when the period elapsed and a
    version newer than the last acknowledged one exists."""

    def __init__(self, period: float, initial_version: int = 0) -> None:
        if period <= 0:
            raise ValueError("period must be positive")
        self.period = period
        self.latest_version = initial_version
        self.last_acked = initial_version
        self.last_sync = float("-inf")

    def note_version(self, version: int) -> None:
        self.latest_version = max(self.latest_version, version)

    def note_ack(self, version: int) -> None:
        self.last_acked = max(self.last_acked, version)

    def sync_due(self, now: float) -> bool:
        if self.latest_version <= self.last_acked:
            return False
        return now - self.last_sync >= self.period

    def mark_synced(self, now: float, version: int) -> None:
        self.last_sync = now
        # the simulated transport is reliable, so sent counts as acked;
        # a live transport calls note_ack on the robot's ACK instead
        self.note_ack(version)


@dataclass
class QueuedTransfer:
    payload: bytes
    remaining: int
    completed_at: float | None = None


@dataclass
class LinkSim:
    """Deterministic lossy-link model: FIFO bytes at a bandwidth cap, no
    flow during scheduled outages, fixed post-transmission latency."""

    outages: list[tuple[float, float]] = field(default_factory=list)
    latency: float = 0.0
    bandwidth: float = float("inf")
    seed: int = 0

    def __post_init__(self) -> None:
        last_end = float("-inf")
        for start, end in self.outages:
            if start >= end or start < last_end:
                raise ValueError("outage intervals must be disjoint and ordered")
            last_end = end
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")

    def is_up(self, t: float) -> bool:
        return not any(start <= t < end for start, end in self.outages)

    def _up_intervals(self, t0: float, t1: float) -> list[tuple[float, float]]:
        out = []
        lo = t0
        for start, end in self.outages:
            a, b = max(lo, t0), min(start, t1)
            if a < b:
                out.append((a, b))
            lo = max(lo, end)
        a, b = max(lo, t0), t1
        if a < b:
            out.append((a, b))
        return out


def link_transfer(
    sim: LinkSim,
    queue: list[QueuedTransfer | bytes],
    t0: float,
    t1: float,
) -> tuple[list[tuple[bytes, float]], list[QueuedTransfer]]:
    """Advance the link over [t0, t1].

    Returns (delivered, residual): delivered carries (payload, time) pairs
    with time <= t1; residual keeps untransmitted bytes and transmitted
    messages still inside their latency window, in FIFO order.
    """
    if t0 >= t1:
        raise ValueError("need t0 < t1")
    entries = [
        q if isinstance(q, QueuedTransfer) else QueuedTransfer(q, len(q)) for q in queue
    ]
    pending = [e for e in entries if e.completed_at is None]
    latent = [e for e in entries if e.completed_at is not None]

    for a, b in sim._up_intervals(t0, t1):
        t = a
        while pending and t < b:
            head = pending[0]
            if sim.bandwidth == float("inf"):
                span = 0.0
            else:
                span = head.remaining / sim.bandwidth
            if t + span <= b:
                t += span
                head.remaining = 0
                head.completed_at = t
                latent.append(pending.pop(0))
            else:
                head.remaining -= int((b - t) * sim.bandwidth)
                t = b

    delivered: list[tuple[bytes, float]] = []
    still_latent: list[QueuedTransfer] = []
    for e in latent:
        assert e.completed_at is not None
        due = e.completed_at + sim.latency
        if due <= t1:
            delivered.append((e.payload, due))
        else:
            still_latent.append(e)
    delivered.sort(key=lambda pair: pair[1])
    return delivered, still_latent + pending
