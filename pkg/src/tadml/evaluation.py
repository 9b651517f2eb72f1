"""Average precision at temporal-IoU thresholds and the mean-AP report."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .segments import Detection, GroundTruthInstance, Segment, interval_iou, tiou

THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
ANET_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

__all__ = ["tiou", "match_detections", "average_precision", "mean_ap", "EvalReport",
           "THUMOS_THRESHOLDS", "ANET_THRESHOLDS", "read_ground_truth"]


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                     threshold: float) -> tuple[list[Detection], np.ndarray]:
    """Greedy matching in score order.

    Returns the detections in ranked order and a boolean true-positive flag
    for each.  A detection takes the unmatched ground truth (same video) with
    the highest tIoU; it is a true positive when that tIoU >= threshold.
    """
    ranked = sorted(dets, key=lambda d: (-d.score, d.start, d.end, d.video_id))
    by_video: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_video[g.video_id].append(j)
    used = np.zeros(len(gts), bool)
    tp = np.zeros(len(ranked), bool)
    for i, d in enumerate(ranked):
        best, best_j = -1.0, -1
        for j in by_video.get(d.video_id, ()):
            if used[j]:
                continue
            seg = gts[j].segment
            ov = interval_iou(d.start, d.end, seg.start, seg.end)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= threshold:
            used[best_j] = True
            tp[i] = True
    return ranked, tp


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp, dtype=np.int64)
    precision = tp_cum / np.arange(1, len(tp) + 1)
    recall = tp_cum / n_gt
    return precision, recall


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    if not len(tp):
        return 0.0
    precision, _ = precision_recall(tp, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # every true positive raises recall by exactly 1/n_gt
    return math.fsum(envelope[tp].tolist()) / n_gt


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                      threshold: float) -> float:
    """All-point interpolated AP for one class.

    Returns 0.0 and emits a warning when there is no ground truth.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if not gts:
        warnings.warn("average_precision: no ground truth for this class", RuntimeWarning)
        return 0.0
    _, tp = match_detections(dets, gts, threshold)
    return _ap_from_flags(tp, len(gts))


@dataclass
class EvalReport:
    thresholds: list[float]
    ap: dict[tuple[int, float], float]
    map_per_threshold: dict[float, float]
    average_map: float
    num_gts: int
    num_dets: int
    classes: list[int]
    pr_curves: dict[tuple[int, float], tuple[list[float], list[float]]] = field(
        default_factory=dict, repr=False)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "map": {f"{t:g}": v for t, v in self.map_per_threshold.items()},
            "average_map": self.average_map,
            "ap": {f"{c}@{t:g}": v for (c, t), v in sorted(self.ap.items())},
            "num_gts": self.num_gts,
            "num_dets": self.num_dets,
            "classes": self.classes,
            "notes": self.notes,
        }

    def table(self, label: str = "tadml") -> str:
        """One aligned row per run, columns per threshold plus the average (percent)."""
        head = ["Method"] + [f"{t:g}" for t in self.thresholds] + ["Avg"]
        row = [label] + [f"{100 * self.map_per_threshold[t]:.2f}" for t in self.thresholds] \
            + [f"{100 * self.average_map:.2f}"]
        w = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda cells: " | ".join(c.rjust(n) if i else c.ljust(n)
                                       for i, (c, n) in enumerate(zip(cells, w)))
        return "\n".join([fmt(head), "-+-".join("-" * n for n in w), fmt(row)])

    def csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "threshold", "ap"])
        for (c, t), v in sorted(self.ap.items()):
            wr.writerow([c, f"{t:g}", f"{v:.6f}"])
        for t in self.thresholds:
            wr.writerow(["mAP", f"{t:g}", f"{self.map_per_threshold[t]:.6f}"])
        wr.writerow(["mAP", "avg", f"{self.average_map:.6f}"])
        return buf.getvalue()


def mean_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
            thresholds: Sequence[float] = THUMOS_THRESHOLDS) -> EvalReport:
    """Per-class AP at each threshold; classes without ground truth are skipped."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("at least one threshold is required")
    gts_by_class: dict[int, list[GroundTruthInstance]] = defaultdict(list)
    for g in gts:
        gts_by_class[g.class_id].append(g)
    dets_by_class: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        dets_by_class[d.class_id].append(d)
    classes = sorted(gts_by_class)
    notes = []
    orphan = sorted(set(dets_by_class) - set(gts_by_class))
    if orphan:
        notes.append(f"detections for classes without ground truth ignored: {orphan}")
    ap, curves, per_t = {}, {}, {}
    for t in thresholds:
        vals = []
        for c in classes:
            _, tp = match_detections(dets_by_class[c], gts_by_class[c], t)
            n_gt = len(gts_by_class[c])
            ap[(c, t)] = _ap_from_flags(tp, n_gt)
            if len(tp):
                p, r = precision_recall(tp, n_gt)
                curves[(c, t)] = (r.tolist(), p.tolist())
            vals.append(ap[(c, t)])
        per_t[t] = math.fsum(vals) / len(vals) if vals else 0.0
    avg = math.fsum(per_t.values()) / len(per_t)
    return EvalReport(thresholds, ap, per_t, avg, len(gts), len(dets), classes, curves, notes)


def read_ground_truth(path) -> tuple[dict[str, list[GroundTruthInstance]], dict[str, float]]:
    """Parse ``{video_id: {"duration_frames": T, "annotations": [...]}}``."""
    payload = json.loads(Path(path).read_text())
    gts, durations = {}, {}
    for vid, entry in payload.items():
        durations[vid] = float(entry.get("duration_frames", 0))
        gts[vid] = [GroundTruthInstance(Segment(float(a["start"]), float(a["end"])),
                                        int(a["class"]), vid)
                    for a in entry.get("annotations", [])]
    return gts, durations


def write_ground_truth(path, gts: dict[str, list[GroundTruthInstance]],
                       durations: dict[str, float]) -> None:
    payload = {vid: {"duration_frames": durations[vid],
                     "annotations": [{"start": g.segment.start, "end": g.segment.end,
                                      "class": g.class_id} for g in items]}
               for vid, items in sorted(gts.items())}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
