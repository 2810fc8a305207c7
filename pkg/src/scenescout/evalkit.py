"""Mission metrics: IoU, average precision, online-precision AUC with a
false-positive tolerance, bandwidth ratio, and the JSON mission report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .features import Box

REPORT_SCHEMA_VERSION = 1
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    frame_id: str
    box: Box
    class_id: int
    score: float


@dataclass
class InterestSequence:
    """Mission-ordered (frame_id, predicted score, gt_interesting) triples."""

    entries: list[tuple[str, float, bool]]

    def __post_init__(self) -> None:
        ids = [e[0] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("frame ids must be unique")


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


GroundTruth = tuple[str, Box, int]  # (frame_id, box, class_id)


def _match_detections(
    dets: list[Detection],
    gts: list[GroundTruth],
    class_id: int,
    iou_thresh: float,
) -> tuple[np.ndarray, int]:
    """Greedy score-descending one-to-one matching. Returns the TP flag per
    ranked detection and the GT count for the class."""
    class_gts: dict[str, list[Box]] = {}
    for frame_id, box, cid in gts:
        if cid == class_id:
            class_gts.setdefault(frame_id, []).append(box)
    n_gt = sum(len(v) for v in class_gts.values())

    ranked = sorted(
        (d for d in dets if d.class_id == class_id),
        key=lambda d: -d.score,  # stable: ties keep mission order
    )
    matched: dict[str, list[bool]] = {
        fid: [False] * len(boxes) for fid, boxes in class_gts.items()
    }
    tp = np.zeros(len(ranked), dtype=bool)
    for i, det in enumerate(ranked):
        boxes = class_gts.get(det.frame_id, [])
        best_j, best_iou = -1, iou_thresh
        for j, gt_box in enumerate(boxes):
            if matched[det.frame_id][j]:
                continue
            v = iou(det.box, gt_box)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[det.frame_id][best_j] = True
            tp[i] = True
    return tp, n_gt


def average_precision(
    dets: list[Detection],
    gts: list[GroundTruth],
    class_id: int,
    iou_thresh: float = 0.5,
) -> float:
    """All-point-interpolated area under the precision-recall curve for one
    class at one IoU threshold. 0 when the class has no ground truth."""
    if not (0 < iou_thresh < 1):
        raise ValueError("iou threshold must lie in (0, 1)")
    tp, n_gt = _match_detections(dets, gts, class_id, iou_thresh)
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1)
    recall = cum_tp / n_gt
    precision = cum_tp / ranks

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def coco_map(
    dets: list[Detection],
    gts: list[GroundTruth],
    classes: list[int],
) -> tuple[dict[int, float], float]:
    """Per-class AP averaged over IoU thresholds 0.50:0.05:0.95, then the
    mean over classes that actually appear in the ground truth."""
    present = {cid for _, _, cid in gts}
    per_class: dict[int, float] = {}
    for cid in classes:
        if cid not in present:
            continue
        per_class[cid] = float(
            np.mean([average_precision(dets, gts, cid, t) for t in COCO_THRESHOLDS])
        )
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def auc_op(seq: InterestSequence, delta: float) -> float:
    """Online-precision AUC with false-positive tolerance delta >= 1.

    Frames are ranked by predicted score (ties in mission order); within a
    budget of ceil(delta * n_gt) top ranks, every ground-truth-interesting
    frame at rank j contributes precision-at-j; later ones contribute 0.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    n_gt = sum(1 for _, _, g in seq.entries if g)
    if n_gt == 0:
        raise UndefinedMetricError("no ground-truth-interesting frames")
    order = sorted(range(len(seq.entries)), key=lambda i: (-seq.entries[i][1], i))
    budget = math.ceil(delta * n_gt)
    hits = 0
    total = 0.0
    for rank, i in enumerate(order[:budget], start=1):
        if seq.entries[i][2]:
            hits += 1
            total += hits / rank
    return total / n_gt


def bandwidth_ratio(n_sent: int, n_total: int) -> float:
    """Fraction of mission frames transmitted to the station."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    if n_sent < 0 or n_sent > n_total:
        raise ValueError("n_sent must lie in [0, n_total]")
    return n_sent / n_total


_OPTIONAL_KEYS = ("per_class_ap", "map", "map50", "auc_op", "bandwidth_ratio", "timings")


def emit_report(metrics: dict, path: str) -> dict:
    """Write the versioned JSON mission report; optional metrics that are
    absent are omitted rather than serialized as null."""
    if "mission_id" not in metrics:
        raise ValueError("report needs a mission_id")
    report: dict = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mission_id": metrics["mission_id"],
    }
    for key in _OPTIONAL_KEYS:
        if key in metrics and metrics[key] is not None:
            report[key] = metrics[key]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def load_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        report = json.load(f)
    if report.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError("unsupported report schema version")
    return report


def auc_op_report(seq: InterestSequence, deltas: tuple[float, ...] = (1, 2, 4)) -> dict:
    """The report's AUC-OP block, keyed delta_1/delta_2/delta_4 style."""
    return {f"delta_{int(d)}": auc_op(seq, d) for d in deltas}
