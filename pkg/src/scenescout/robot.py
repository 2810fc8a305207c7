"""Robot-side mission pipeline.

Streams dataset frames through the visual memory, buffers candidate
frames for the station, serves operator write-backs from a bounded frame
cache, applies pushed parameter updates, and keeps an append-only JSONL
mission log from which all reported metrics can be recomputed.
"""

from __future__ import annotations

import argparse
import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import SyncError
from .evalkit import InterestSequence, auc_op_report, bandwidth_ratio
from .features import (
    AnchorConfig,
    BackboneConfig,
    Box,
    FeatureTensor,
    ProposalFeature,
    extract_features,
    generate_proposals,
    roi_pool_batch,
)
from .head import HeadParams, apply_delta, decode_delta, detect
from .jsonl import JsonlWriter, read_jsonl
from .memory import load_memory, new_memory, process_frame, save_memory, write
from .protocol import (
    FEEDBACK_ANNOTATION,
    FEEDBACK_UNINTERESTING,
    PARAM_UPDATE,
    CandidateBuffer,
    CandidateFrame,
    Message,
    ack_msg,
    candidate_msg,
)

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class MissionConfig:
    dataset: str | None = None
    warmup_count: int = 40
    tau: float = 0.75
    n_cubes: int = 10
    gamma_w: float = 5.0
    gamma_v: float = 5.0
    memory_seed: int = 0
    buffer_capacity: int = 64
    cache_size: int = 256
    pool_grid: int = 4
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    frame_period: float = 0.2
    drain_per_tick: int = 4
    memory_snapshot: str | None = None
    log_path: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError("tau must lie in [0, 1]")
        if self.warmup_count < 0:
            raise ValueError("warmup count must be >= 0")


def load_dataset(path: str) -> list[tuple[str, np.ndarray, bytes]]:
    """Images in lexicographic filename order as (frame_id, array, bytes)."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory {path!r} does not exist")
    names = sorted(
        n for n in os.listdir(path) if n.lower().endswith(IMAGE_EXTENSIONS)
    )
    frames = []
    for name in names:
        full = os.path.join(path, name)
        with open(full, "rb") as f:
            raw = f.read()
        img = np.asarray(Image.open(full).convert("RGB"))
        frames.append((name, img, raw))
    return frames


def load_annotations(path: str) -> dict[str, dict]:
    """annotations.jsonl rows keyed by frame name; boxes become Box plus
    class name pairs."""
    out: dict[str, dict] = {}
    for row in read_jsonl(path):
        boxes = [
            (
                Box(b["x"], b["y"], b["x"] + b["w"], b["y"] + b["h"]),
                b["class"],
            )
            for b in row.get("boxes", [])
        ]
        out[row["frame"]] = {"interesting": bool(row["interesting"]), "boxes": boxes}
    return out


class RobotNode:
    """Single-pipeline robot state: visual memory, candidate buffer, frame
    cache, onboard head. Drive it frame by frame; collect outbound
    messages with poll_outbox and feed inbound ones to handle_message."""

    def __init__(self, cfg: MissionConfig, head: HeadParams):
        self.cfg = cfg
        self.head = head
        if cfg.memory_snapshot and os.path.exists(cfg.memory_snapshot):
            self.memory = load_memory(cfg.memory_snapshot)
        else:
            c = cfg.backbone.channels
            self.memory = new_memory(
                cfg.n_cubes,
                (c, cfg.backbone.grid_w, cfg.backbone.grid_h),
                cfg.gamma_w,
                cfg.gamma_v,
                cfg.memory_seed,
            )
        self.buffer = CandidateBuffer(cfg.buffer_capacity)
        self.cache: OrderedDict[str, FeatureTensor] = OrderedDict()
        self.events: list[dict] = []
        self._writer = JsonlWriter(cfg.log_path) if cfg.log_path else None
        self._outbox: list[Message] = []
        self.n_scored = 0
        self.n_sent = 0
        self._anchor_boxes: list | None = None

    def log(self, t: float, kind: str, **fields) -> None:
        event = {"t": round(t, 6), "kind": kind, **fields}
        self.events.append(event)
        if self._writer:
            self._writer.append(event)

    def close(self) -> None:
        if self._writer:
            self._writer.close()
            self._writer = None

    def warmup_frame(self, image: np.ndarray) -> None:
        feats = extract_features(image, self.cfg.backbone)
        self.memory = write(self.memory, feats)

    def _cache_frame(self, frame_id: str, feats: FeatureTensor) -> None:
        self.cache[frame_id] = feats
        self.cache.move_to_end(frame_id)
        while len(self.cache) > self.cfg.cache_size:
            dropped, _ = self.cache.popitem(last=False)
            logger.info("frame cache overflow, dropped %s", dropped)

    def _detect(self, t: float, frame_id: str, feats: FeatureTensor, dims) -> None:
        if self._anchor_boxes is None:
            self._anchor_boxes = generate_proposals(dims, self.cfg.anchors)
        vecs = roi_pool_batch(feats, self._anchor_boxes, dims, self.cfg.pool_grid)
        props = [
            ProposalFeature(b, v) for b, v in zip(self._anchor_boxes, vecs)
        ]
        dets = detect(self.head, props, self.cfg.score_thresh, self.cfg.nms_iou)
        if dets:
            self.log(
                t,
                "detections",
                frame_id=frame_id,
                boxes=[
                    [round(b.x_min, 1), round(b.y_min, 1), round(b.x_max, 1),
                     round(b.y_max, 1), self.head.class_names[c], round(s, 4)]
                    for b, c, s in dets[:10]
                ],
            )

    def process_mission_frame(
        self, t: float, frame_id: str, image: np.ndarray, png: bytes
    ) -> float:
        feats = extract_features(image, self.cfg.backbone)
        result, self.memory = process_frame(self.memory, feats)
        self.n_scored += 1
        is_candidate = result.score >= self.cfg.tau
        self.log(
            t, "frame", frame_id=frame_id, score=result.score, candidate=is_candidate
        )
        if is_candidate:
            self._cache_frame(frame_id, feats)
            evicted = self.buffer.push_candidate(
                CandidateFrame(frame_id, result.score, png)
            )
            if evicted is not None:
                self.log(t, "evicted", frame_id=evicted.frame_id, score=evicted.score)
        h, w = image.shape[:2]
        self._detect(t, frame_id, feats, (w, h))
        return result.score

    def pending_messages(self) -> int:
        return len(self._outbox)

    def poll_outbox(self, t: float, link_up: bool) -> list[Message]:
        out = list(self._outbox)
        self._outbox.clear()
        if link_up:
            for frame in self.buffer.drain_highest(self.cfg.drain_per_tick):
                out.append(candidate_msg(frame.frame_id, frame.score, frame.payload))
                self.n_sent += 1
                self.log(t, "sent", frame_id=frame.frame_id, score=frame.score)
        return out

    def handle_message(self, t: float, msg: Message) -> None:
        if msg.kind == FEEDBACK_UNINTERESTING:
            frame_id = msg.header["frame_id"]
            feats = self.cache.get(frame_id)
            if feats is None:
                logger.warning("write-back for uncached frame %s ignored", frame_id)
                self.log(t, "writeback_unknown", frame_id=frame_id)
                return
            self.memory = write(self.memory, feats)
            self.log(t, "writeback", frame_id=frame_id)
        elif msg.kind == PARAM_UPDATE:
            delta = decode_delta(msg.blob)
            try:
                updated = apply_delta(self.head, delta)
            except SyncError as exc:
                logger.warning("rejecting parameter update: %s", exc)
                self.log(t, "param_rejected", version=delta.version)
                return
            applied = updated.version != self.head.version
            self.head = updated
            self.log(
                t,
                "param_applied" if applied else "param_ignored",
                version=delta.version,
            )
            self._outbox.append(ack_msg(PARAM_UPDATE, version=delta.version))
        elif msg.kind == FEEDBACK_ANNOTATION:
            self.log(
                t,
                "annotation_noted",
                frame_id=msg.header["frame_id"],
                classes=sorted({b["class"] for b in msg.header["boxes"]}),
            )
        else:
            logger.warning("robot ignoring message kind %s", msg.kind)

    def finish(self, t: float) -> dict:
        ratio = bandwidth_ratio(self.n_sent, max(self.n_scored, 1))
        self.log(
            t,
            "mission_end",
            frames=self.n_scored,
            sent=self.n_sent,
            bandwidth_ratio=ratio,
        )
        if self.cfg.memory_snapshot:
            save_memory(self.memory, self.cfg.memory_snapshot)
        self.close()
        return {"frames": self.n_scored, "sent": self.n_sent, "bandwidth_ratio": ratio}


@dataclass
class MissionResult:
    events: list[dict]
    bandwidth_ratio: float
    n_frames: int
    n_sent: int


def run_mission(cfg: MissionConfig, head: HeadParams) -> MissionResult:
    """Standalone mission over a dataset directory: candidates drain to an
    always-up sink (no station). Useful for threshold studies and tests."""
    frames = load_dataset(cfg.dataset)
    if len(frames) < cfg.warmup_count:
        raise ValueError("dataset smaller than the warmup count")
    node = RobotNode(cfg, head)
    t = 0.0
    for name, img, _ in frames[: cfg.warmup_count]:
        node.warmup_frame(img)
        t += cfg.frame_period
    for name, img, png in frames[cfg.warmup_count :]:
        node.process_mission_frame(t, name, img, png)
        node.poll_outbox(t, link_up=True)
        t += cfg.frame_period
    while len(node.buffer):
        node.poll_outbox(t, link_up=True)
        t += cfg.frame_period
    summary = node.finish(t)
    return MissionResult(
        events=node.events,
        bandwidth_ratio=summary["bandwidth_ratio"],
        n_frames=summary["frames"],
        n_sent=summary["sent"],
    )


def replay_metrics(log_path: str, annotations: dict[str, dict] | None = None) -> dict:
    """Recompute mission metrics purely from the log file."""
    events = read_jsonl(log_path)
    scored = [e for e in events if e["kind"] == "frame"]
    sent = [e for e in events if e["kind"] == "sent"]
    out: dict = {
        "frames": len(scored),
        "sent": len(sent),
        "bandwidth_ratio": bandwidth_ratio(len(sent), max(len(scored), 1)),
    }
    ends = [e for e in events if e["kind"] == "mission_end"]
    if ends:
        out["reported"] = {
            "frames": ends[-1]["frames"],
            "sent": ends[-1]["sent"],
            "bandwidth_ratio": ends[-1]["bandwidth_ratio"],
        }
    if annotations is not None:
        entries = [
            (
                e["frame_id"],
                float(e["score"]),
                bool(annotations.get(e["frame_id"], {}).get("interesting", False)),
            )
            for e in scored
        ]
        seq = InterestSequence(entries=entries)
        if any(g for _, _, g in entries):
            out["auc_op"] = auc_op_report(seq)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scout-robot", description="Robot-side mission runner"
    )
    parser.add_argument("--dataset", required=True, help="image directory")
    parser.add_argument("--warmup", type=int, default=40)
    parser.add_argument("--tau", type=float, default=0.75)
    parser.add_argument("--endpoint", help="station address host:port (live mode)")
    parser.add_argument("--sim", help="link schedule JSON (simulated mission)")
    parser.add_argument("--oracle", help="annotations.jsonl for the scripted operator (sim)")
    parser.add_argument("--store", help="station event store path (sim)")
    parser.add_argument("--memory-snapshot", dest="memory_snapshot")
    parser.add_argument("--log", dest="log_path")
    parser.add_argument("--report", help="write the mission report JSON here (sim)")
    parser.add_argument("--buffer-capacity", type=int, default=64)
    parser.add_argument("--sync-period", type=float, default=30.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    cfg = MissionConfig(
        dataset=args.dataset,
        warmup_count=args.warmup,
        tau=args.tau,
        buffer_capacity=args.buffer_capacity,
        memory_snapshot=args.memory_snapshot,
        log_path=args.log_path,
    )
    if args.sim:
        from .sim import SimConfig, run_simulated_mission

        outcome = run_simulated_mission(
            SimConfig(
                mission=cfg,
                schedule_path=args.sim,
                oracle_annotations=args.oracle,
                store_path=args.store,
                report_path=args.report,
                sync_period=args.sync_period,
            )
        )
        print(f"mission {outcome.report['mission_id']} complete: "
              f"bandwidth_ratio={outcome.report['bandwidth_ratio']:.3f}")
        return 0
    if args.endpoint:
        from .transport import run_live_robot

        run_live_robot(cfg, args.endpoint)
        return 0
    head = _standalone_head(cfg)
    result = run_mission(cfg, head)
    print(f"standalone mission: {result.n_sent}/{result.n_frames} frames sent "
          f"(ratio {result.bandwidth_ratio:.3f})")
    return 0


def _standalone_head(cfg: MissionConfig) -> HeadParams:
    from .synthetic import bundled_head_and_pool

    head, _ = bundled_head_and_pool(cfg.backbone, cfg.pool_grid)
    return head


if __name__ == "__main__":
    raise SystemExit(main())
