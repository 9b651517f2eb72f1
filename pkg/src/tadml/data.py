"""Feature files, crop/pad to a fixed length, and the synthetic dataset."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import DimensionError
from .segments import GroundTruthInstance, Segment

MAGIC = b"TDML"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FeatureFormatError(ValueError):
    pass


class FeatureLengthError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray          # [T, D]
    frames_per_feature: int = 1

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise FeatureLengthError(f"{self.video_id}: need features [T>=1, D], got {self.features.shape}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def check_dim(self, input_dim: int) -> None:
        if self.D != input_dim:
            raise DimensionError(f"{self.video_id}: feature dim {self.D} != model input_dim {input_dim}")


def save_features(path, seq: FeatureSequence) -> None:
    """Header ``TDML``, u32 version, T, D, frames_per_feature; then T*D little-endian f32."""
    data = np.ascontiguousarray(seq.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, seq.T, seq.D, seq.frames_per_feature))
        fh.write(data.tobytes())


def load_features(path, video_id: str | None = None) -> FeatureSequence:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the header")
    magic, version, T, D, fpf = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if T < 1 or D < 1:
        raise FeatureLengthError(f"{path}: empty feature sequence (T={T}, D={D})")
    need = _HEADER.size + 4 * T * D
    if len(buf) < need:
        raise FeatureLengthError(f"{path}: payload truncated ({len(buf)} < {need} bytes)")
    arr = np.frombuffer(buf, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    return FeatureSequence(video_id or Path(path).stem, arr.astype(np.float32), fpf)


def load_features_csv(path, video_id: str | None = None, frames_per_feature: int = 1,
                      delimiter: str = ",") -> FeatureSequence:
    """One row per time step, one column per channel."""
    arr = np.loadtxt(path, delimiter=delimiter, dtype=np.float32, ndmin=2)
    return FeatureSequence(video_id or Path(path).stem, arr, frames_per_feature)


def read_manifest(path) -> list[dict]:
    """JSON list of ``{"video_id", "feature_path"}``; relative paths resolve against the manifest."""
    root = Path(path).parent
    entries = json.loads(Path(path).read_text())
    out = []
    for e in entries:
        fp = Path(e["feature_path"])
        out.append({"video_id": e["video_id"], "feature_path": fp if fp.is_absolute() else root / fp})
    return out


def write_manifest(path, entries: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps([{"video_id": e["video_id"], "feature_path": str(e["feature_path"])}
                                      for e in entries], indent=1) + "\n")


# ---------------------------------------------------------------------------
# crop / pad
# ---------------------------------------------------------------------------

@dataclass
class Window:
    offset: int       # input frame that maps to output frame 0
    valid_len: int    # number of real (unpadded) frames in the output


def shift_instances(gts: Sequence[GroundTruthInstance], offset: int,
                    length: int) -> list[GroundTruthInstance]:
    """Move instances into a window ``[offset, offset + length)``, clipping and dropping."""
    out = []
    for g in gts:
        s = max(g.segment.start - offset, 0)
        e = min(g.segment.end - offset, length)
        if e > s:
            out.append(GroundTruthInstance(Segment(s, e), g.class_id, g.video_id))
    return out


def crop_or_pad(x: FeatureSequence, L: int, gts: Sequence[GroundTruthInstance] = (),
                train: bool = False, rng: np.random.Generator | None = None):
    """Fit a sequence to exactly ``L`` frames.

    Longer inputs are cropped (random offset when ``train``, centred
    otherwise); shorter ones are zero-padded at the end.  Returns the new
    sequence, the shifted ground truth and the :class:`Window`.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    T = x.T
    if T > L:
        if train:
            offset = int((rng or np.random.default_rng()).integers(0, T - L + 1))
        else:
            offset = (T - L) // 2
        feats = x.features[offset:offset + L]
        win = Window(offset, L)
    elif T < L:
        feats = np.zeros((L, x.D), dtype=x.features.dtype)
        feats[:T] = x.features
        win = Window(0, T)
    else:
        feats, win = x.features, Window(0, T)
    seq = replace(x, features=feats)
    return seq, shift_instances(gts, win.offset, win.valid_len), win


def pad_to_multiple(x: FeatureSequence, multiple: int) -> tuple[FeatureSequence, Window]:
    L = max(multiple, -(-x.T // multiple) * multiple)
    seq, _, win = crop_or_pad(x, L)
    return seq, win


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_videos: int = 8
    T: int = 128
    D: int = 32
    num_classes: int = 3
    min_actions: int = 1
    max_actions: int = 3
    min_length: int = 8
    max_length: int = 40
    noise: float = 1.0          # std of the N(0, 1) background; 0 gives noiseless data
    signal: float = 4.0         # per-channel scale of the class signatures
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.min_length < 1 or self.max_length < self.min_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.min_actions < 0 or self.max_actions < self.min_actions:
            raise ValueError("need 0 <= min_actions <= max_actions")
        if self.num_videos < 1 or self.T < 1 or self.D < 1 or self.num_classes < 1:
            raise ValueError("num_videos, T, D and num_classes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def class_signatures(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    sig = rng.standard_normal((cfg.num_classes, cfg.D))
    return cfg.signal * sig / np.linalg.norm(sig, axis=1, keepdims=True) * np.sqrt(cfg.D)


def _place(rng, cfg: SynthConfig, n: int) -> list[tuple[int, int]]:
    placed: list[tuple[int, int]] = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
            if length > cfg.T:
                continue
            s = int(rng.integers(0, cfg.T - length + 1))
            e = s + length
            if all(e <= ps or s >= pe for ps, pe in placed):
                placed.append((s, e))
                break
        else:
            raise GenerationError(f"could not place {n} non-overlapping actions in T={cfg.T} "
                                  f"after {cfg.max_retries} retries")
    return sorted(placed)


def synth_dataset(cfg: SynthConfig) -> list[tuple[FeatureSequence, list[GroundTruthInstance]]]:
    """Gaussian background plus a fixed per-class signature added over each action."""
    sig = class_signatures(cfg)
    out = []
    for v in range(cfg.num_videos):
        rng = np.random.default_rng([cfg.seed, 1, v])
        vid = f"video_{v:04d}"
        feats = cfg.noise * rng.standard_normal((cfg.T, cfg.D))
        n = int(rng.integers(cfg.min_actions, cfg.max_actions + 1))
        gts = []
        for s, e in _place(rng, cfg, n):
            k = int(rng.integers(0, cfg.num_classes))
            feats[s:e] += sig[k]
            gts.append(GroundTruthInstance(Segment(float(s), float(e)), k, vid))
        out.append((FeatureSequence(vid, feats.astype(np.float32)), gts))
    return out


def write_dataset(out_dir, dataset) -> tuple[Path, Path]:
    """Write feature files, ``manifest.json`` and ``annotations.json`` into ``out_dir``."""
    from .evaluation import write_ground_truth

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries, gts, durations = [], {}, {}
    for seq, items in dataset:
        rel = Path("features") / f"{seq.video_id}.tdml"
        save_features(out / rel, seq)
        entries.append({"video_id": seq.video_id, "feature_path": rel})
        gts[seq.video_id] = list(items)
        durations[seq.video_id] = seq.T
    write_manifest(out / "manifest.json", entries)
    write_ground_truth(out / "annotations.json", gts, durations)
    return out / "manifest.json", out / "annotations.json"


def load_dataset(manifest, annotations=None):
    """Inverse of :func:`write_dataset`; missing annotations give empty ground truth."""
    from .evaluation import read_ground_truth

    gts = {}
    if annotations is not None and Path(annotations).exists():
        gts, _ = read_ground_truth(annotations)
    return [(load_features(e["feature_path"], e["video_id"]), gts.get(e["video_id"], []))
            for e in read_manifest(manifest)]
