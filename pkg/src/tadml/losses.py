"""Training objective: location targets, sigmoid focal loss, beta-GIoU, weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import NonFiniteError, Tensor, add_scalars, record, scale
from .segments import GroundTruthInstance, Segment

# Lower/upper bound on max(c - start, end - c), in input frames, per level.
DEFAULT_REGRESS_RANGES = ((0, 4), (4, 8), (8, 16), (16, 32), (32, 64), (64, math.inf))
MIN_PRED_LENGTH = 1e-6


@dataclass
class LevelTargets:
    stride: int
    labels: np.ndarray      # int, -1 for background
    offsets: np.ndarray     # [T_l, 2] stride-normalised (d_s, d_e); zero off positives
    positive: np.ndarray    # bool
    valid: np.ndarray       # bool, False on padding

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(len(self.labels)) + 0.5) * self.stride


@dataclass
class LocationTargets:
    levels: list[LevelTargets]

    @property
    def num_positive(self) -> int:
        return int(sum(lv.positive.sum() for lv in self.levels))

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


def level_ranges(num_levels: int, ranges=DEFAULT_REGRESS_RANGES) -> list[tuple[float, float]]:
    """Per-level ranges; the coarsest level in use is left open above."""
    if num_levels > len(ranges):
        raise ValueError(f"{num_levels} levels but only {len(ranges)} regression ranges")
    out = [tuple(r) for r in ranges[:num_levels]]
    out[-1] = (out[-1][0], math.inf)
    return out


def assign_targets(gts: Sequence[GroundTruthInstance], geometry: Sequence[tuple[int, int]],
                   valid_len: float | None = None,
                   ranges=DEFAULT_REGRESS_RANGES) -> LocationTargets:
    """Label each pyramid location from the ground truth.

    ``geometry`` is ``[(length, stride), ...]`` for the detection levels.  A
    location ``i`` at stride ``s`` sits at time ``c = (i + 0.5) * s``.  It is
    positive when ``c`` lies in ``[start, end)`` of some instance and
    ``max(c - start, end - c)`` falls inside the level's range; among several
    such instances the shortest wins (lowest index on equal length).
    Locations with ``i * s >= valid_len`` are padding.
    """
    bounds = level_ranges(len(geometry), ranges)
    if gts:
        starts = np.array([g.segment.start for g in gts], dtype=np.float64)
        ends = np.array([g.segment.end for g in gts], dtype=np.float64)
        classes = np.array([g.class_id for g in gts], dtype=np.int64)
        extent = ends - starts
    levels = []
    for (n, s), (lo, hi) in zip(geometry, bounds):
        idx = np.arange(n)
        c = (idx + 0.5) * s
        valid = idx * s < valid_len if valid_len is not None else np.ones(n, bool)
        labels = np.full(n, -1, dtype=np.int64)
        offsets = np.zeros((n, 2))
        positive = np.zeros(n, bool)
        if gts:
            left = c[:, None] - starts[None, :]
            right = ends[None, :] - c[:, None]
            inside = (left >= 0) & (right > 0)
            reach = np.maximum(left, right)
            ok = inside & (reach >= lo) & (reach < hi) & valid[:, None]
            cost = np.where(ok, extent[None, :], np.inf)
            best = np.argmin(cost, axis=1)
            positive = ok.any(axis=1)
            rows = idx[positive]
            labels[rows] = classes[best[rows]]
            offsets[rows, 0] = left[rows, best[rows]] / s
            offsets[rows, 1] = right[rows, best[rows]] / s
        levels.append(LevelTargets(s, labels, offsets, positive, valid))
    return LocationTargets(levels)


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_terms(logits: np.ndarray, onehot: np.ndarray, alpha: float, gamma: float):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits."""
    p = 1.0 / (1.0 + np.exp(-logits))
    q = 1.0 - p
    log_p = -_softplus(-logits)
    log_q = -_softplus(logits)
    pos_loss = -alpha * q ** gamma * log_p
    neg_loss = -(1 - alpha) * p ** gamma * log_q
    pos_grad = -alpha * (q ** (gamma + 1) - gamma * p * q ** gamma * log_p)
    neg_grad = -(1 - alpha) * (gamma * p ** gamma * q * log_q - p ** (gamma + 1))
    loss = np.where(onehot, pos_loss, neg_loss)
    grad = np.where(onehot, pos_grad, neg_grad)
    return loss, grad


def focal_loss(class_logits: Tensor, targets: LevelTargets, alpha: float = 0.25,
               gamma: float = 2.0, normalizer: float | None = None) -> Tensor:
    """Sum of per-class focal terms over valid locations, divided by ``normalizer``.

    ``normalizer`` defaults to the number of valid locations.
    """
    if not 0 < alpha < 1 or gamma < 0:
        raise ValueError("need 0 < alpha < 1 and gamma >= 0")
    x = class_logits.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("class logits are not finite")
    onehot = np.zeros(x.shape, bool)
    pos = targets.labels >= 0
    onehot[np.nonzero(pos)[0], targets.labels[pos]] = True
    valid = targets.valid[:, None]
    n = float(targets.valid.sum()) if normalizer is None else float(normalizer)
    if n <= 0:
        n = 1.0
    loss, grad = focal_terms(x.astype(np.float64), onehot, alpha, gamma)
    value = np.where(valid, loss, 0.0).sum() / n
    dtype = x.dtype

    def backward(g):
        return (np.where(valid, grad, 0.0).astype(dtype) * (g[0] / n),)

    return record("focal_loss", np.array([value], dtype=dtype), (class_logits,), backward)


# ---------------------------------------------------------------------------
# beta-GIoU
# ---------------------------------------------------------------------------

def _giou_core(a0, a1, b0, b1, beta):
    """beta-GIoU loss for interval pairs and its partials w.r.t. a0, a1."""
    i_lo = np.maximum(a0, b0)
    i_hi = np.minimum(a1, b1)
    overlap = i_hi > i_lo
    inter = np.where(overlap, i_hi - i_lo, 0.0)
    la, lb = a1 - a0, b1 - b0
    union = la + lb - inter
    iou = inter / union
    c_lo = np.minimum(a0, b0)
    c_hi = np.maximum(a1, b1)
    hull = c_hi - c_lo
    gap = np.maximum(hull - union, 0.0)
    ratio = gap / hull
    loss = 1.0 - iou + ratio ** beta

    dinter_a0 = np.where(overlap & (a0 > b0), -1.0, 0.0)
    dinter_a1 = np.where(overlap & (a1 < b1), 1.0, 0.0)
    dunion_a0 = -1.0 - dinter_a0
    dunion_a1 = 1.0 - dinter_a1
    dhull_a0 = np.where(a0 < b0, -1.0, 0.0)
    dhull_a1 = np.where(a1 > b1, 1.0, 0.0)
    dpow = beta * ratio ** (beta - 1) if beta != 1 else np.ones_like(ratio)
    out = []
    for di, du, dh in ((dinter_a0, dunion_a0, dhull_a0), (dinter_a1, dunion_a1, dhull_a1)):
        diou = (di * union - inter * du) / union ** 2
        dgap = np.where(hull - union > 0, dh - du, 0.0)
        dratio = (dgap * hull - gap * dh) / hull ** 2
        out.append(-diou + dpow * dratio)
    return loss, out[0], out[1]


def beta_giou_loss(pred: Segment, gt: Segment, beta: float = 3.0) -> float:
    """``1 - IoU + (|C minus (A u B)| / |C|) ** beta`` for two 1-D intervals."""
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if not gt.end > gt.start:
        raise ValueError("ground-truth segment is empty")
    end = pred.end if pred.end - pred.start >= MIN_PRED_LENGTH else pred.start + MIN_PRED_LENGTH
    loss, _, _ = _giou_core(np.float64(pred.start), np.float64(end),
                            np.float64(gt.start), np.float64(gt.end), beta)
    return float(loss)


@dataclass
class RegressionStats:
    clamped: int = 0


def giou_regression(distances: Tensor, targets: LevelTargets, beta: float,
                    stats: RegressionStats | None = None) -> Tensor:
    """Sum of beta-GIoU over positive locations, in stride units around each centre."""
    pos = np.nonzero(targets.positive)[0]
    d = distances.data
    ps = d[pos, 0].astype(np.float64)
    pe = d[pos, 1].astype(np.float64)
    ts, te = targets.offsets[pos, 0], targets.offsets[pos, 1]
    a0, a1 = -ps, pe
    short = (a1 - a0) < MIN_PRED_LENGTH
    a1 = np.where(short, a0 + MIN_PRED_LENGTH, a1)
    if stats is not None:
        stats.clamped += int(short.sum())
    loss, g0, g1 = _giou_core(a0, a1, -ts, te, beta)
    # d/dps: a0 = -ps (and a1 = a0 + min length when clamped); d/dpe: a1 = pe unless clamped
    g_ps = -g0 - np.where(short, g1, 0.0)
    g_pe = np.where(short, 0.0, g1)
    shape, dtype = d.shape, d.dtype

    def backward(g):
        gd = np.zeros(shape, dtype=np.float64)
        gd[pos, 0] = g_ps * g[0]
        gd[pos, 1] = g_pe * g[0]
        return (gd.astype(dtype),)

    return record("giou_regression", np.array([loss.sum()], dtype=dtype), (distances,), backward)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def total_loss(head_outputs, targets: LocationTargets, lambda_cls: float = 1.0,
               lambda_reg: float = 1.0, beta: float = 3.0, alpha: float = 0.25,
               gamma: float = 2.0, cls_norm: str = "locations") -> tuple[Tensor, dict]:
    """Weighted sum of per-level focal terms and the positive-averaged regression term.

    ``cls_norm="locations"`` divides each level's focal sum by its valid
    location count; ``"positives"`` divides by the total positive count.
    """
    if lambda_cls < 0 or lambda_reg < 0:
        raise ValueError("loss weights must be non-negative")
    if len(head_outputs) != len(targets):
        raise ValueError("one target level per head output required")
    n_pos = targets.num_positive
    stats = RegressionStats()
    cls_terms, reg_terms = [], []
    for out, tgt in zip(head_outputs, targets):
        norm = None if cls_norm == "locations" else max(n_pos, 1)
        cls_terms.append(focal_loss(out.class_logits, tgt, alpha, gamma, normalizer=norm))
        if n_pos and tgt.positive.any():
            reg_terms.append(giou_regression(out.distances, tgt, beta, stats))
    cls = scale(add_scalars(cls_terms), lambda_cls)
    if reg_terms:
        reg = scale(add_scalars(reg_terms), lambda_reg / n_pos)
        loss = cls + reg
        reg_val = reg.item()
    else:
        loss, reg_val = cls, 0.0
    breakdown = {"total": loss.item(), "cls": cls.item(), "reg": reg_val,
                 "num_positive": n_pos, "clamped": stats.clamped}
    return loss, breakdown
