"""Temporal segments, ground-truth instances and detections."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Segment:
    """Half-open interval ``[start, end)`` in input-frame units."""

    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class GroundTruthInstance:
    segment: Segment
    class_id: int
    video_id: str = ""

    def __post_init__(self):
        if not self.segment.start < self.segment.end:
            raise ValueError(f"empty ground-truth segment {self.segment}")


@dataclass(frozen=True)
class Detection:
    start: float
    end: float
    class_id: int
    score: float
    video_id: str = ""

    @property
    def segment(self) -> Segment:
        return Segment(self.start, self.end)

    def with_score(self, score: float) -> "Detection":
        return Detection(self.start, self.end, self.class_id, score, self.video_id)

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end, "class": self.class_id, "score": self.score}


def interval_iou(s1: float, e1: float, s2: float, e2: float) -> float:
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0:
        return 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def tiou(a: Segment, b: Segment) -> float:
    """Temporal intersection over union of two non-empty segments."""
    return interval_iou(a.start, a.end, b.start, b.end)
