from __future__ import annotations

import numpy as np
import pytest

from scenescout.features import BackboneConfig, extract_features
from scenescout.head import params_equal, snapshot_delta, encode_delta
from scenescout.jsonl import read_jsonl
from scenescout.protocol import (
    PARAM_UPDATE,
    feedback_uninteresting_msg,
    param_update_msg,
)
from scenescout.robot import (
    MissionConfig,
    MissionResult,
    RobotNode,
    load_annotations,
    replay_metrics,
    run_mission,
)
from scenescout.synthetic import (
    bundled_head_and_pool,
    make_mission,
    scene_png,
    write_mission_dir,
)


@pytest.fixture(scope="module")
def bundled_head():
    head, _ = bundled_head_and_pool(BackboneConfig(), 4)
    return head


@pytest.fixture(scope="module")
def small_mission_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("mission") / "data"
    mission = make_mission(seed=2, n_warmup=6, n_frames=30)
    write_mission_dir(mission, str(path))
    return str(path)


class TestMissionConfig:
    def test_tau_bounds(self):
        with pytest.raises(ValueError):
            MissionConfig(tau=1.5)
        with pytest.raises(ValueError):
            MissionConfig(tau=-0.1)
        MissionConfig(tau=0.0)
        MissionConfig(tau=1.0)

    def test_negative_warmup(self):
        with pytest.raises(ValueError):
            MissionConfig(warmup_count=-1)


class TestRunMission:
    def test_tau_one_sends_nothing(self, small_mission_dir, bundled_head):
        cfg = MissionConfig(dataset=small_mission_dir, warmup_count=6, tau=1.0)
        result = run_mission(cfg, bundled_head)
        assert result.n_sent == 0
        assert result.bandwidth_ratio == 0.0

    def test_tau_zero_sends_everything(self, small_mission_dir, bundled_head):
        cfg = MissionConfig(dataset=small_mission_dir, warmup_count=6, tau=0.0)
        result = run_mission(cfg, bundled_head)
        assert result.n_frames == 30
        assert result.n_sent == 30
        assert result.bandwidth_ratio == 1.0

    def test_default_tau_bounded_ratio(self, small_mission_dir, bundled_head):
        cfg = MissionConfig(dataset=small_mission_dir, warmup_count=6)
        result = run_mission(cfg, bundled_head)
        assert result.bandwidth_ratio <= 0.25

    def test_log_replay_matches(self, small_mission_dir, bundled_head, tmp_path):
        log = tmp_path / "mission.jsonl"
        cfg = MissionConfig(
            dataset=small_mission_dir, warmup_count=6, log_path=str(log)
        )
        result = run_mission(cfg, bundled_head)
        ann = load_annotations(small_mission_dir + "/annotations.jsonl")
        replay = replay_metrics(str(log), ann)
        assert replay["bandwidth_ratio"] == result.bandwidth_ratio
        assert replay["reported"]["bandwidth_ratio"] == result.bandwidth_ratio
        assert replay["frames"] == result.n_frames
        assert "auc_op" in replay

    def test_memory_snapshot_roundtrip(self, small_mission_dir, bundled_head, tmp_path):
        snap = tmp_path / "memory.bin"
        cfg = MissionConfig(
            dataset=small_mission_dir, warmup_count=6, memory_snapshot=str(snap)
        )
        run_mission(cfg, bundled_head)
        assert snap.exists()
        node = RobotNode(cfg, bundled_head)  # resumes from the snapshot
        assert node.memory.n_cubes == cfg.n_cubes


class TestHandleMessages:
    def _node(self, bundled_head):
        return RobotNode(MissionConfig(warmup_count=0), bundled_head)

    def test_writeback_suppresses_shifts(self, bundled_head):
        node = self._node(bundled_head)
        mission = make_mission(seed=3, n_warmup=12, n_frames=40)
        for s in mission.warmup:
            node.warmup_frame(s.image)
        novel = next(s for s in mission.frames if s.interesting)
        score = node.process_mission_frame(0.0, novel.frame_id, novel.image, b"png")
        assert score >= node.cfg.tau
        node.poll_outbox(0.1, link_up=True)  # mark as sent, keep cached
        node.handle_message(0.2, feedback_uninteresting_msg(novel.frame_id))
        # re-encounters of grid-aligned circular shifts drop fast
        scores = []
        for i, (dy, dx) in enumerate([(8, 16), (24, 8), (40, 48)]):
            shifted = np.roll(novel.image, (dy, dx), axis=(0, 1))
            scores.append(
                node.process_mission_frame(1.0 + i, f"shift-{i}", shifted, b"png")
            )
        assert min(scores) < node.cfg.tau
        assert scores[-1] < node.cfg.tau

    def test_writeback_unknown_frame_logged(self, bundled_head, caplog):
        node = self._node(bundled_head)
        with caplog.at_level("WARNING"):
            node.handle_message(0.0, feedback_uninteresting_msg("nope"))
        assert any(e["kind"] == "writeback_unknown" for e in node.events)

    def test_param_update_applied_and_acked(self, bundled_head):
        node = self._node(bundled_head)
        newer = snapshot_delta(bundled_head)
        newer.version = bundled_head.version + 3
        node.handle_message(0.0, param_update_msg(newer.version, encode_delta(newer)))
        assert node.head.version == newer.version
        acks = node.poll_outbox(0.1, link_up=False)
        assert len(acks) == 1 and acks[0].kind == "ACK"
        assert acks[0].header["version"] == newer.version

    def test_stale_param_update_ignored(self, bundled_head):
        node = self._node(bundled_head)
        stale = snapshot_delta(bundled_head)  # same version as local
        node.handle_message(0.0, param_update_msg(stale.version, encode_delta(stale)))
        assert node.head.version == bundled_head.version
        assert any(e["kind"] == "param_ignored" for e in node.events)

    def test_param_update_enables_new_class_detection(self, bundled_head):
        from scenescout.features import ProposalFeature, Box
        from scenescout.head import detect, register_novel_class, NovelShot

        node = self._node(bundled_head)
        rng = np.random.default_rng(0)
        vec = rng.normal(size=bundled_head.d)
        vec /= np.linalg.norm(vec)
        shot = NovelShot(
            class_id=-1,
            image_ref="x.png",
            box=Box(0, 0, 10, 10),
            pooled=ProposalFeature(Box(0, 0, 10, 10), vec),
            source_frame_id="x",
        )
        station_head, cid = register_novel_class(bundled_head, "widget", shot)
        delta = snapshot_delta(station_head)
        node.handle_message(0.0, param_update_msg(delta.version, encode_delta(delta)))
        assert "widget" in node.head.class_names
        dets = detect(node.head, [ProposalFeature(Box(5, 5, 40, 40), vec)])
        assert dets and dets[0][1] == cid

    def test_version_monotone_over_updates(self, bundled_head):
        node = self._node(bundled_head)
        versions = [5, 3, 8, 8, 2, 9]
        for v in versions:
            delta = snapshot_delta(bundled_head)
            delta.version = v
            node.handle_message(0.0, param_update_msg(v, encode_delta(delta)))
        applied = [e["version"] for e in node.events if e["kind"] == "param_applied"]
        assert applied == [5, 8, 9]
        assert node.head.version == 9


class TestLogFile:
    def test_events_written_incrementally(self, bundled_head, tmp_path):
        log = tmp_path / "log.jsonl"
        cfg = MissionConfig(warmup_count=0, log_path=str(log))
        node = RobotNode(cfg, bundled_head)
        mission = make_mission(seed=4, n_warmup=0, n_frames=3, novel_period=0, flare_period=0)
        for i, s in enumerate(mission.frames):
            node.process_mission_frame(float(i), s.frame_id, s.image, scene_png(s))
        node.finish(3.0)
        records = read_jsonl(str(log))
        assert records == node.events
        assert records[-1]["kind"] == "mission_end"
