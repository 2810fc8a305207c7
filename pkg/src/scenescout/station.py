"""Base-station service core.

Receives candidate frames, queues them FIFO for review, turns operator
decisions into write-backs or novel shots, runs bounded fine-tuning
cycles over the shot pool, and pushes versioned parameter deltas to the
robot. Every effect is appended to a JSONL event store that can be
replayed to reconstruct the head version and pool composition.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import CapacityError
from .features import BackboneConfig, Box, extract_features, roi_pool
from .head import (
    BACKGROUND,
    BaseShot,
    FineTuneConfig,
    HeadParams,
    NonFiniteLossError,
    NovelShot,
    SamplePool,
    encode_delta,
    fine_tune,
    register_novel_class,
    snapshot_delta,
)
from .jsonl import JsonlWriter, read_jsonl
from .protocol import (
    CANDIDATE,
    Message,
    SyncScheduler,
    feedback_annotation_msg,
    feedback_uninteresting_msg,
    param_update_msg,
)
from .synthetic import sample_background_boxes, Scene

logger = logging.getLogger(__name__)

PENDING = "pending"
INTERESTING = "interesting"
UNINTERESTING = "uninteresting"


@dataclass
class ReviewItem:
    frame_id: str
    image: bytes
    score: float
    received_at: float
    status: str = PENDING


@dataclass
class StationConfig:
    k_budget: int = 3
    r: int = 3
    batch_size: int = 16
    steps_per_cycle: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    sync_period: float = 30.0
    pool_grid: int = 4
    bg_per_frame: int = 2
    backbone: BackboneConfig = field(default_factory=BackboneConfig)


class StationCore:
    """Single-mission station state. Not thread-safe by itself; the HTTP
    layer serializes access with a lock."""

    def __init__(
        self,
        head: HeadParams,
        base_shots: list[BaseShot],
        cfg: StationConfig,
        store_path: str | None = None,
        train_seed: int = 0,
    ):
        self.cfg = cfg
        self.head = head
        self.pool = SamplePool(
            base_shots=list(base_shots), novel_shots=[], r=cfg.r, k=cfg.k_budget
        )
        self.items: dict[str, ReviewItem] = {}
        self.queue: list[str] = []  # pending frame ids, FIFO
        self.outbox: list[Message] = []
        self.scheduler = SyncScheduler(cfg.sync_period, initial_version=head.version)
        self.events: list[dict] = []
        self._writer = JsonlWriter(store_path) if store_path else None
        self._rng = np.random.default_rng(train_seed)
        self._pending_retrain = False
        self._listeners: list = []
        self.shots_per_class: dict[str, int] = {}
        self.n_feedback_uninteresting = 0

    # -- events -----------------------------------------------------------

    def persist(self, t: float, kind: str, **fields) -> dict:
        event = {"t": round(t, 6), "kind": kind, **fields}
        self.events.append(event)
        if self._writer:
            self._writer.append(event)  # I/O failure propagates: halt, no silent loss
        for listener in list(self._listeners):
            listener(event)
        return event

    def add_listener(self, fn) -> None:
        self._listeners.append(fn)

    def close(self) -> None:
        if self._writer:
            self._writer.close()
            self._writer = None

    # -- review queue -------------------------------------------------------

    def enqueue_candidate(self, t: float, msg: Message) -> ReviewItem:
        if msg.kind != CANDIDATE:
            raise ValueError(f"not a candidate message: {msg.kind}")
        frame_id = msg.header["frame_id"]
        score = float(msg.header["score"])
        existing = self.items.get(frame_id)
        if existing is not None and existing.status == PENDING:
            existing.image = msg.blob
            existing.score = score
            self.persist(t, "candidate_update", frame_id=frame_id, score=score)
            return existing
        if existing is not None:
            logger.info("candidate %s re-received after decision, ignored", frame_id)
            return existing
        item = ReviewItem(frame_id=frame_id, image=msg.blob, score=score, received_at=t)
        self.items[frame_id] = item
        self.queue.append(frame_id)
        self.persist(t, "candidate", frame_id=frame_id, score=score)
        return item

    def next_pending(self) -> ReviewItem | None:
        for frame_id in self.queue:
            item = self.items[frame_id]
            if item.status == PENDING:
                return item
        return None

    def pending_count(self) -> int:
        return sum(1 for fid in self.queue if self.items[fid].status == PENDING)

    # -- decisions ----------------------------------------------------------

    def operator_decision(
        self,
        t: float,
        frame_id: str,
        decision: str,
        boxes: list[tuple[Box, str]] | None = None,
    ) -> None:
        item = self.items.get(frame_id)
        if item is None:
            raise KeyError(f"unknown frame {frame_id!r}")
        if item.status != PENDING:
            raise ValueError(f"frame {frame_id!r} already decided: {item.status}")
        if decision == UNINTERESTING:
            item.status = UNINTERESTING
            self.outbox.append(feedback_uninteresting_msg(frame_id))
            self.n_feedback_uninteresting += 1
            self.persist(t, "decision", frame_id=frame_id, decision=UNINTERESTING)
            return
        if decision != INTERESTING:
            raise ValueError(f"unknown decision {decision!r}")
        if not boxes:
            raise ValueError("an interesting decision needs at least one box")
        item.status = INTERESTING
        self.persist(
            t, "decision", frame_id=frame_id, decision=INTERESTING, n_boxes=len(boxes)
        )
        self._ingest_shots(t, item, boxes)
        self.outbox.append(
            feedback_annotation_msg(
                frame_id,
                [
                    {
                        "class": name,
                        "x_min": b.x_min,
                        "y_min": b.y_min,
                        "x_max": b.x_max,
                        "y_max": b.y_max,
                    }
                    for b, name in boxes
                ],
            )
        )

    def _ingest_shots(
        self, t: float, item: ReviewItem, boxes: list[tuple[Box, str]]
    ) -> None:
        img = np.asarray(Image.open(io.BytesIO(item.image)).convert("RGB"))
        h, w = img.shape[:2]
        feats = extract_features(img, self.cfg.backbone)
        scene = Scene(frame_id=item.frame_id, image=img, boxes=list(boxes))
        bg_rng = np.random.default_rng(abs(hash(item.frame_id)) % (2**32))
        bg_vectors = [
            roi_pool(feats, b, (w, h), self.cfg.pool_grid).vector
            for b in sample_background_boxes(scene, bg_rng, self.cfg.bg_per_frame)
        ]
        for box, name in boxes:
            pooled = roi_pool(feats, box, (w, h), self.cfg.pool_grid)
            shot = NovelShot(
                class_id=-1,
                image_ref=item.frame_id,
                box=box,
                pooled=pooled,
                source_frame_id=item.frame_id,
                bg_vectors=list(bg_vectors),
            )
            if name not in self.head.class_names:
                try:
                    self.head, class_id = register_novel_class(self.head, name, shot)
                except CapacityError as exc:
                    logger.warning("%s", exc)
                    self.persist(
                        t, "capacity_error", frame_id=item.frame_id, class_name=name
                    )
                    continue
                self.scheduler.note_version(self.head.version)
                self.persist(t, "class_registered", class_name=name, class_id=class_id)
            else:
                class_id = self.head.class_names.index(name)
            shot.class_id = class_id
            self.pool.novel_shots.append(shot)
            self.shots_per_class[name] = self.shots_per_class.get(name, 0) + 1
            self._pending_retrain = True
            self.persist(
                t,
                "shot",
                frame_id=item.frame_id,
                class_name=name,
                class_id=class_id,
                pool_size=len(self.pool.novel_shots),
            )

    # -- scripted oracle ------------------------------------------------------

    def oracle_decision(
        self, item: ReviewItem, gt: dict[str, dict]
    ) -> tuple[str, list[tuple[Box, str]]]:
        """Ground-truth-driven stand-in for the human operator, honoring
        the per-class annotation budget."""
        row = gt.get(item.frame_id)
        if row is None:
            logger.warning("no ground truth for %s; treating as uninteresting", item.frame_id)
            return UNINTERESTING, []
        if not row["interesting"]:
            return UNINTERESTING, []
        eligible = [
            (box, name)
            for box, name in row["boxes"]
            if self.shots_per_class.get(name, 0) < self.cfg.k_budget
        ]
        if not eligible:
            return UNINTERESTING, []
        return INTERESTING, eligible

    def review_with_oracle(self, t: float, gt: dict[str, dict]) -> int:
        """Decide every pending item in FIFO order; returns decision count."""
        count = 0
        while True:
            item = self.next_pending()
            if item is None:
                return count
            decision, boxes = self.oracle_decision(item, gt)
            self.operator_decision(t, item.frame_id, decision, boxes or None)
            count += 1

    # -- training ------------------------------------------------------------

    def run_training_cycle(self, t: float) -> bool:
        """One bounded fine-tune cycle over a snapshot of the pool; returns
        True if parameters advanced."""
        if not self.pool.novel_shots:
            return False
        snapshot = SamplePool(
            base_shots=list(self.pool.base_shots),
            novel_shots=list(self.pool.novel_shots),
            r=self.pool.r,
            k=self.pool.k,
        )
        m = min(self.cfg.batch_size, snapshot.virtual_size)
        config = FineTuneConfig(
            lr=self.cfg.lr,
            momentum=self.cfg.momentum,
            batch_size=m,
            step_budget=self.cfg.steps_per_cycle,
        )
        before = self.head.version
        try:
            self.head = fine_tune(self.head, snapshot, config, self._rng)
        except NonFiniteLossError as exc:
            logger.error("training cycle aborted: %s", exc)
            self.persist(t, "cycle_aborted", reason=str(exc), version=before)
            return False
        self._pending_retrain = False
        self.scheduler.note_version(self.head.version)
        self.persist(
            t,
            "cycle",
            steps=self.cfg.steps_per_cycle,
            version=self.head.version,
            pool_size=len(snapshot.novel_shots),
        )
        return self.head.version != before

    def emit_delta_if_due(self, t: float, force: bool = False) -> bool:
        due = self.scheduler.sync_due(t)
        if not due and not (force and self.scheduler.latest_version > self.scheduler.last_acked):
            return False
        delta = snapshot_delta(self.head)
        self.outbox.append(param_update_msg(delta.version, encode_delta(delta)))
        self.scheduler.mark_synced(t, delta.version)
        self.persist(t, "delta", version=delta.version)
        return True

    def tick(self, t: float, gt: dict[str, dict] | None = None) -> None:
        """One scheduler beat: oracle reviews (if scripted), a training
        cycle when new shots arrived, a delta when the sync period allows."""
        if gt is not None:
            self.review_with_oracle(t, gt)
        if self._pending_retrain:
            self.run_training_cycle(t)
        self.emit_delta_if_due(t)

    def quiesce(self, t: float, gt: dict[str, dict] | None = None) -> None:
        """Finish outstanding work and force one final sync."""
        if gt is not None:
            self.review_with_oracle(t, gt)
        if self._pending_retrain:
            self.run_training_cycle(t)
        self.emit_delta_if_due(t, force=True)
        self.persist(t, "quiescent", version=self.head.version)

    # -- inbound --------------------------------------------------------------

    def on_message(self, t: float, msg: Message) -> None:
        if msg.kind == CANDIDATE:
            self.enqueue_candidate(t, msg)
        elif msg.kind == "ACK":
            if msg.header.get("of") == "PARAM_UPDATE":
                self.scheduler.note_ack(int(msg.header["version"]))
        elif msg.kind == "HELLO":
            self.persist(t, "hello", node=msg.header.get("node", "?"))
        else:
            logger.warning("station ignoring message kind %s", msg.kind)

    def status(self) -> dict:
        return {
            "pending": self.pending_count(),
            "reviewed": sum(
                1 for it in self.items.values() if it.status != PENDING
            ),
            "head_version": self.head.version,
            "classes": list(self.head.class_names),
            "novel_shots": len(self.pool.novel_shots),
            "shots_per_class": dict(self.shots_per_class),
        }


def replay_store(path: str) -> dict:
    """Fold the event store back into the final head version, pool
    composition, and counters. Recovers from a corrupt trailing line."""
    events = read_jsonl(path, recover=True)
    version = None
    pool_size = 0
    classes: list[str] = []
    shots_per_class: dict[str, int] = {}
    n_candidates = 0
    n_uninteresting = 0
    for e in events:
        kind = e["kind"]
        if kind == "candidate":
            n_candidates += 1
        elif kind == "decision" and e["decision"] == UNINTERESTING:
            n_uninteresting += 1
        elif kind == "class_registered":
            classes.append(e["class_name"])
        elif kind == "shot":
            pool_size = e["pool_size"]
            shots_per_class[e["class_name"]] = (
                shots_per_class.get(e["class_name"], 0) + 1
            )
        elif kind in ("cycle", "delta", "quiescent"):
            version = e["version"]
    return {
        "head_version": version,
        "pool_size": pool_size,
        "novel_classes": classes,
        "shots_per_class": shots_per_class,
        "candidates": n_candidates,
        "uninteresting_decisions": n_uninteresting,
        "events": len(events),
    }
