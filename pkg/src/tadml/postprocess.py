"""Decoding head outputs into segments, Gaussian Soft-NMS, detection files."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .segments import Detection, interval_iou


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode(head_outputs, input_len: float, score_threshold: float = 0.001,
           pre_nms_topk: int = 200, valid_len: float | None = None,
           video_id: str = "") -> list[Detection]:
    """Turn every (location, class) pair into a candidate segment.

    Location ``i`` at stride ``s`` has centre ``c = (i + 0.5) s`` and decodes
    to ``[c - d_s s, c + d_e s]``, clipped to ``[0, input_len]``.  Padded
    locations (``i * s >= valid_len``) are skipped.  At most ``pre_nms_topk``
    candidates per class survive, highest score first.
    """
    limit = input_len if valid_len is None else min(input_len, valid_len)
    starts, ends, scores, classes = [], [], [], []
    for out in head_outputs:
        s = out.stride
        logits = np.asarray(out.class_logits.data, dtype=np.float64)
        dist = np.asarray(out.distances.data, dtype=np.float64)
        n, K = logits.shape
        idx = np.arange(n)
        keep_loc = idx * s < limit
        c = (idx + 0.5) * s
        st = np.maximum(c - dist[:, 0] * s, 0.0)
        en = np.minimum(c + dist[:, 1] * s, limit)
        prob = _sigmoid(logits)
        loc, cls = np.nonzero((prob >= score_threshold) & keep_loc[:, None] & (en > st)[:, None])
        starts.append(st[loc])
        ends.append(en[loc])
        scores.append(prob[loc, cls])
        classes.append(cls)
    if not starts:
        return []
    st, en, sc, cl = (np.concatenate(a) for a in (starts, ends, scores, classes))
    dets = []
    for k in np.unique(cl):
        sel = np.nonzero(cl == k)[0]
        # stable sort keeps level/location order among equal scores
        order = sel[np.argsort(-sc[sel], kind="stable")][:pre_nms_topk]
        dets.extend(Detection(float(st[i]), float(en[i]), int(k), float(sc[i]), video_id)
                    for i in order)
    return dets


def _rank_key(d: Detection):
    return (-d.score, d.start, d.class_id)


def soft_nms(dets: Sequence[Detection], sigma: float = 0.5,
             final_threshold: float = 0.001) -> list[Detection]:
    """Gaussian Soft-NMS applied independently per class.

    The top-scoring detection is kept and every remaining same-class
    detection is rescaled by ``exp(-tiou**2 / sigma)``; anything that falls
    below ``final_threshold`` is discarded.  Ties go to the earlier start,
    then the smaller class id.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    by_class: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        if d.score >= final_threshold:
            by_class[d.class_id].append(d)
    kept: list[Detection] = []
    for k in sorted(by_class):
        pool = sorted(by_class[k], key=_rank_key)
        while pool:
            best = pool.pop(0)
            kept.append(best)
            survivors = []
            for d in pool:
                ov = interval_iou(best.start, best.end, d.start, d.end)
                score = d.score * math.exp(-(ov * ov) / sigma)
                if score >= final_threshold:
                    survivors.append(d.with_score(score))
            pool = sorted(survivors, key=_rank_key)
    kept.sort(key=_rank_key)
    return kept


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------

def write_detections(path, results: Mapping[str, Iterable[Detection]], unit: str = "frames",
                     extra: dict | None = None) -> None:
    payload = {"unit": unit, **(extra or {}),
               "results": {vid: [d.to_json() for d in dets]
                           for vid, dets in sorted(results.items())}}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_detections(path) -> tuple[dict[str, list[Detection]], str]:
    payload = json.loads(Path(path).read_text())
    unit = payload.get("unit", "frames")
    results = payload.get("results", payload if "unit" not in payload else {})
    out = {}
    for vid, items in results.items():
        out[vid] = [Detection(float(r["start"]), float(r["end"]), int(r["class"]),
                              float(r["score"]), vid) for r in items]
    return out, unit
