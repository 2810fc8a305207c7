"""Headless end-to-end mission: robot + station + oracle over a simulated
link, advancing simulated time frame by frame in one process."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

from .evalkit import InterestSequence, auc_op_report, emit_report
from .features import Box
from .head import params_equal
from .jsonl import read_jsonl
from .protocol import LinkSim, QueuedTransfer, decode, encode, link_transfer
from .robot import MissionConfig, RobotNode, load_annotations, load_dataset
from .station import StationConfig, StationCore
from .synthetic import MissionData, bundled_head_and_pool, scene_png

logger = logging.getLogger(__name__)


@dataclass
class SimConfig:
    mission: MissionConfig
    schedule_path: str | None = None
    outages: list[tuple[float, float]] = field(default_factory=list)
    latency: float = 0.02
    bandwidth: float = 262144.0  # bytes per simulated second
    oracle_annotations: str | None = None
    store_path: str | None = None
    report_path: str | None = None
    sync_period: float = 10.0
    station_seed: int = 0
    max_quiesce_ticks: int = 5000


@dataclass
class MissionOutcome:
    robot: RobotNode
    station: StationCore
    report: dict
    annotations: dict
    params_in_sync: bool


def load_schedule(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _mission_inputs(cfg: SimConfig, mission_data: MissionData | None, gt: dict | None):
    if mission_data is not None:
        warm = [(s.frame_id, s.image, b"") for s in mission_data.warmup]
        frames = [(s.frame_id, s.image, scene_png(s)) for s in mission_data.frames]
        annotations = {
            s.frame_id: {"interesting": s.interesting, "boxes": list(s.boxes)}
            for s in mission_data.warmup + mission_data.frames
        }
        return warm, frames, annotations, mission_data.mission_id
    dataset = load_dataset(cfg.mission.dataset)
    n = cfg.mission.warmup_count
    if len(dataset) < n:
        raise ValueError("dataset smaller than the warmup count")
    annotations = gt or {}
    if cfg.oracle_annotations:
        annotations = load_annotations(cfg.oracle_annotations)
    elif os.path.exists(os.path.join(cfg.mission.dataset, "annotations.jsonl")):
        annotations = load_annotations(
            os.path.join(cfg.mission.dataset, "annotations.jsonl")
        )
    mission_id = os.path.basename(os.path.normpath(cfg.mission.dataset))
    return dataset[:n], dataset[n:], annotations, mission_id


def run_simulated_mission(
    cfg: SimConfig,
    mission_data: MissionData | None = None,
    gt: dict | None = None,
) -> MissionOutcome:
    if cfg.schedule_path:
        schedule = load_schedule(cfg.schedule_path)
        cfg.outages = [tuple(pair) for pair in schedule.get("outages", [])]
        cfg.latency = schedule.get("latency", cfg.latency)
        cfg.bandwidth = schedule.get("bandwidth", cfg.bandwidth)

    warm, frames, annotations, mission_id = _mission_inputs(cfg, mission_data, gt)

    head, base_shots = bundled_head_and_pool(
        cfg.mission.backbone, cfg.mission.pool_grid
    )
    robot = RobotNode(cfg.mission, head)
    station_cfg = StationConfig(
        sync_period=cfg.sync_period,
        pool_grid=cfg.mission.pool_grid,
        backbone=cfg.mission.backbone,
    )
    station = StationCore(
        head,
        base_shots,
        station_cfg,
        store_path=cfg.store_path,
        train_seed=cfg.station_seed,
    )
    uplink = LinkSim(outages=list(cfg.outages), latency=cfg.latency, bandwidth=cfg.bandwidth)
    downlink = LinkSim(outages=list(cfg.outages), latency=cfg.latency, bandwidth=cfg.bandwidth)
    up_queue: list[QueuedTransfer] = []
    down_queue: list[QueuedTransfer] = []

    dt = cfg.mission.frame_period
    t = 0.0

    def pump(t0: float, t1: float) -> None:
        nonlocal up_queue, down_queue
        for msg in robot.poll_outbox(t0, uplink.is_up(t0)):
            payload = encode(msg)
            up_queue.append(QueuedTransfer(payload, len(payload)))
        for msg in station.outbox:
            payload = encode(msg)
            down_queue.append(QueuedTransfer(payload, len(payload)))
        station.outbox.clear()
        delivered_up, up_queue = link_transfer(uplink, up_queue, t0, t1)
        for payload, at in delivered_up:
            station.on_message(at, decode(payload))
        delivered_down, down_queue = link_transfer(downlink, down_queue, t0, t1)
        for payload, at in delivered_down:
            robot.handle_message(at, decode(payload))

    for frame_id, image, _ in warm:
        robot.warmup_frame(image)
        t += dt
    for frame_id, image, png in frames:
        robot.process_mission_frame(t, frame_id, image, png)
        pump(t, t + dt)
        station.tick(t + dt, annotations)
        t += dt

    # quiescence: jump past any outage tail, then pump until nothing moves
    last_outage_end = max((end for _, end in cfg.outages), default=0.0)
    t = max(t, last_outage_end) + dt
    station.quiesce(t, annotations)
    ticks = 0
    while True:
        busy = (
            len(robot.buffer) > 0
            or up_queue
            or down_queue
            or station.outbox
            or robot.pending_messages() > 0
            or station.pending_count() > 0
        )
        if not busy:
            break
        pump(t, t + dt)
        station.tick(t + dt, annotations)
        t += dt
        ticks += 1
        if ticks > cfg.max_quiesce_ticks:
            raise RuntimeError("mission failed to quiesce")
    # a final sync may have become needed during the drain
    station.emit_delta_if_due(t, force=True)
    while station.outbox or down_queue or robot.pending_messages() > 0:
        pump(t, t + dt)
        t += dt
        ticks += 1
        if ticks > cfg.max_quiesce_ticks:
            raise RuntimeError("mission failed to quiesce after final sync")

    summary = robot.finish(t)
    in_sync = params_equal(robot.head, station.head)
    report = _build_report(mission_id, robot, station, annotations, summary)
    if cfg.report_path:
        emit_report(report, cfg.report_path)
    station.persist(t, "mission_complete", in_sync=in_sync)
    station.close()
    return MissionOutcome(
        robot=robot,
        station=station,
        report=report,
        annotations=annotations,
        params_in_sync=in_sync,
    )


def _build_report(mission_id, robot, station, annotations, summary) -> dict:
    entries = [
        (
            e["frame_id"],
            float(e["score"]),
            bool(annotations.get(e["frame_id"], {}).get("interesting", False)),
        )
        for e in robot.events
        if e["kind"] == "frame"
    ]
    report: dict = {
        "mission_id": mission_id,
        "bandwidth_ratio": summary["bandwidth_ratio"],
        "timings": {"frames": summary["frames"], "sent": summary["sent"]},
    }
    if any(g for _, _, g in entries):
        report["auc_op"] = auc_op_report(InterestSequence(entries=entries))
    return report
