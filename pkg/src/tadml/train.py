"""Adam with linear warm-up, the training loop, and full-sequence inference."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import NonFiniteError, Tape, Tensor
from .data import FeatureSequence, crop_or_pad, pad_to_multiple
from .losses import assign_targets, total_loss
from .network import ModelConfig, forward, init_params, save_checkpoint
from .postprocess import decode, soft_nms
from .segments import Detection, GroundTruthInstance

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class InferConfig:
    score_threshold: float = 0.001
    pre_nms_topk: int = 200
    nms_sigma: float = 0.5
    final_threshold: float = 0.001


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 4
    base_lr: float = 1e-5
    warmup_epochs: float = 5
    seed: int = 0
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    beta: float = 3.0
    max_len: int = 2304
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cls_norm: str = "locations"
    model: ModelConfig = field(default_factory=ModelConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1, base_lr > 0")
        if self.cls_norm not in ("locations", "positives"):
            raise ValueError(f"unknown cls_norm {self.cls_norm!r}")

    def flat(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("model", "infer")}
        d.update(asdict(self.model))
        d.update(asdict(self.infer))
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        """Build from one flat mapping holding train, model and inference keys."""
        groups = {name: {f.name for f in fields(kind)}
                  for name, kind in (("model", ModelConfig), ("infer", InferConfig))}
        own = {f.name for f in fields(cls)} - {"model", "infer"}
        unknown = set(d) - own - groups["model"] - groups["infer"]
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in own},
                   model=ModelConfig(**{k: v for k, v in d.items() if k in groups["model"]}),
                   infer=InferConfig(**{k: v for k, v in d.items() if k in groups["infer"]}))


def load_config(path) -> TrainConfig:
    """Read a flat TOML (``key = value``) or JSON config file."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        d = json.loads(text)
    else:
        d = tomllib.loads(text)
    return TrainConfig.from_flat(d)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One bias-corrected Adam update from ``p.grad``.

    Returns False (and changes nothing) when any gradient is non-finite.
    Parameters without a gradient are treated as having a zero gradient.
    """
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        log.warning("adam step rejected: non-finite gradients in %s", bad[:5])
        return False
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        if p.data.shape != state.m[k].shape:
            raise ValueError(f"optimizer state shape mismatch for {k}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return True


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over ``warmup_steps``, then constant."""
    if warmup_steps > total_steps:
        raise ValueError("warmup_steps must not exceed total_steps")
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

Example = tuple[FeatureSequence, Sequence[GroundTruthInstance]]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    config: TrainConfig


def loss_and_grads(params, cfg: TrainConfig, seq: FeatureSequence, gts, valid_len: int,
                   weight: float = 1.0) -> dict:
    """Forward + backward for one sequence; gradients accumulate into ``params``."""
    x = Tensor(seq.features.astype(params["project.W"].dtype, copy=False))
    with Tape() as tape:
        _, heads = forward(params, cfg.model, x)
        geometry = [(h.length, h.stride) for h in heads]
        targets = assign_targets(gts, geometry, valid_len=valid_len)
        loss, parts = total_loss(heads, targets, cfg.lambda_cls, cfg.lambda_reg, cfg.beta,
                                 cfg.focal_alpha, cfg.focal_gamma, cfg.cls_norm)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("loss is not finite")
    tape.backward(loss, seed=np.full(1, weight, dtype=loss.dtype))
    return parts


def train(cfg: TrainConfig, dataset: Sequence[Example], out_dir=None,
          on_epoch: Callable[[dict], None] | None = None,
          params: dict[str, Tensor] | None = None) -> TrainResult:
    """Seeded mini-batch training.

    All randomness (initialisation, shuffling, crops) comes from ``cfg.seed``.
    When ``out_dir`` is given, a checkpoint and a JSON log line are written
    after every epoch.  A non-finite loss aborts training and leaves the
    last epoch's checkpoint in place.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    init_seq, order_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = init_params(cfg.model, np.random.default_rng(init_seq))
    rng = np.random.default_rng(order_seq)
    for seq, _ in dataset:
        seq.check_dim(cfg.model.input_dim)
    L = max(cfg.max_len, cfg.model.min_length)

    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = min(int(round(cfg.warmup_epochs * steps_per_epoch)), total_steps)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = {"total": 0.0, "cls": 0.0, "reg": 0.0}
        rejected = 0
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            lr = lr_schedule(step, total_steps, warmup, cfg.base_lr)
            try:
                for i in batch:
                    seq, gts = dataset[i]
                    cropped, shifted, win = crop_or_pad(seq, L, gts, train=True, rng=rng)
                    parts = loss_and_grads(params, cfg, cropped, shifted, win.valid_len,
                                           weight=1.0 / len(batch))
                    for k in sums:
                        sums[k] += parts[k] / n
            except NonFiniteError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}; last good checkpoint kept") from exc
            if not adam_step(params, state, lr):
                rejected += 1
            step += 1
        entry = {"epoch": epoch, "loss": sums["total"], "cls": sums["cls"], "reg": sums["reg"],
                 "lr": lr, "seconds": round(time.perf_counter() - t0, 3), "rejected_steps": rejected}
        history.append(entry)
        log.info("epoch %d loss %.5f cls %.5f reg %.5f lr %.2e", epoch, entry["loss"],
                 entry["cls"], entry["reg"], lr)
        if out is not None:
            save_checkpoint(out / "checkpoint.tdck", cfg.model, params,
                            meta={"epoch": epoch, "train": cfg.flat()})
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
    return TrainResult(params, history, cfg)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict(params, model_cfg: ModelConfig, seq: FeatureSequence,
            infer_cfg: InferConfig | None = None) -> list[Detection]:
    """Full-sequence detection: pad to a multiple of 2**num_levels, decode, Soft-NMS."""
    infer_cfg = infer_cfg or InferConfig()
    seq.check_dim(model_cfg.input_dim)
    padded, win = pad_to_multiple(seq, model_cfg.min_length)
    x = Tensor(padded.features.astype(params["project.W"].dtype, copy=False))
    _, heads = forward(params, model_cfg, x)
    cands = decode(heads, input_len=seq.T, score_threshold=infer_cfg.score_threshold,
                   pre_nms_topk=infer_cfg.pre_nms_topk, valid_len=win.valid_len,
                   video_id=seq.video_id)
    return soft_nms(cands, infer_cfg.nms_sigma, infer_cfg.final_threshold)


def infer(params, model_cfg: ModelConfig, sequences: Sequence[FeatureSequence],
          infer_cfg: InferConfig | None = None) -> tuple[dict[str, list[Detection]], dict[str, float]]:
    """Detections and wall-clock seconds per video."""
    results, timing = {}, {}
    for seq in sequences:
        t0 = time.perf_counter()
        results[seq.video_id] = predict(params, model_cfg, seq, infer_cfg)
        timing[seq.video_id] = time.perf_counter() - t0
    return results, timing
