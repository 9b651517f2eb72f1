"""Detector assembly: projection, mechanics backbone, top-down neck, heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autograd import (DimensionError, Tensor, avgpool2, add, concat_rows, fc,
                       layer_norm, linear_upsample2, relu, rows, softplus)
from .mechanics import MechanicsParams, glorot, mechanics_unit


class ConfigurationError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 1024
    width: int = 512
    num_levels: int = 6
    neck_stages: int = 6
    num_classes: int = 20
    residual: bool = False
    eq1_literal: bool = False
    reg_activation: str = "relu"
    hidden_ratio: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_levels < 1:
            raise ConfigurationError("num_levels must be >= 1")
        if not 1 <= self.neck_stages <= self.num_levels + 1:
            raise ConfigurationError(
                f"neck_stages must lie in [1, {self.num_levels + 1}], got {self.neck_stages}")
        if self.num_classes < 1 or self.width < 1 or self.input_dim < 1:
            raise ConfigurationError("num_classes, width and input_dim must be positive")
        if self.reg_activation not in ("relu", "softplus"):
            raise ConfigurationError(f"unknown reg_activation {self.reg_activation!r}")

    @property
    def min_length(self) -> int:
        return 2 ** self.num_levels

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PyramidLevel:
    features: Tensor
    stride: int
    level_index: int

    def __post_init__(self):
        if self.stride != 2 ** self.level_index:
            raise ValueError(f"stride {self.stride} != 2**{self.level_index}")

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class HeadOutput:
    class_logits: Tensor
    distances: Tensor
    stride: int

    @property
    def length(self) -> int:
        return self.class_logits.shape[0]


def level_lengths(T: int, num_levels: int) -> list[int]:
    """Lengths of levels 1..num_levels under ceil halving."""
    out = []
    for _ in range(num_levels):
        T = -(-T // 2)
        out.append(T)
    return out


def level_geometry(T: int, num_levels: int) -> list[tuple[int, int]]:
    """``(length, stride)`` per detection level."""
    return [(n, 2 ** (i + 1)) for i, n in enumerate(level_lengths(T, num_levels))]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

HEAD_BRANCHES = ("cls", "reg")


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0,
                dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform FC weights, zero biases, unit LN gains, theta = pi/2."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C = cfg.width
    p: dict[str, Tensor] = {
        "project.W": Tensor(glorot(rng, cfg.input_dim, C, dtype)),
        "project.b": Tensor(np.zeros(C, dtype)),
        "project.ln.gamma": Tensor(np.ones(C, dtype)),
        "project.ln.beta": Tensor(np.zeros(C, dtype)),
    }
    for lvl in range(1, cfg.num_levels + 1):
        p.update(MechanicsParams.init(C, rng, cfg.hidden_ratio, dtype).named(f"msm.{lvl}"))
    for branch, out_dim in (("cls", cfg.num_classes), ("reg", 2)):
        for i, (fi, fo) in enumerate([(C, C), (C, C), (C, out_dim)], start=1):
            p[f"heads.{branch}.fc{i}.W"] = Tensor(glorot(rng, fi, fo, dtype))
            p[f"heads.{branch}.fc{i}.b"] = Tensor(np.zeros(fo, dtype))
        for i in (1, 2):
            p[f"heads.{branch}.ln{i}.gamma"] = Tensor(np.ones(C, dtype))
            p[f"heads.{branch}.ln{i}.beta"] = Tensor(np.zeros(C, dtype))
    for name, t in p.items():
        t.name = name
        t.requires_grad = True
    return p


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def project(x: Tensor, params, cfg: ModelConfig) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"expected features [T, {cfg.input_dim}], got {x.shape}")
    h = fc(x, params["project.W"], params["project.b"])
    return layer_norm(h, params["project.ln.gamma"], params["project.ln.beta"], cfg.ln_eps)


def msm_forward(x: Tensor, params, cfg: ModelConfig) -> list[PyramidLevel]:
    """Multilayer semantic module: ``num_levels`` pool-then-mechanics stages."""
    T = x.shape[0]
    if T < cfg.min_length:
        raise ConfigurationError(
            f"sequence length {T} is shorter than the minimum {cfg.min_length} "
            f"for {cfg.num_levels} levels")
    levels = []
    h = x
    for lvl in range(1, cfg.num_levels + 1):
        mp = MechanicsParams.from_named(params, f"msm.{lvl}")
        h = mechanics_unit(avgpool2(h), mp, cfg.residual, cfg.eq1_literal, cfg.ln_eps)
        levels.append(PyramidLevel(h, 2 ** lvl, lvl))
    return levels


def tfpn_fuse(levels: list[PyramidLevel], neck_stages: int) -> list[PyramidLevel]:
    """Top-down fusion: upsample the running coarse map and add it to the next finer level.

    ``neck_stages - 1`` fusion steps are taken starting from the coarsest
    (last) level; untouched levels are returned unchanged.
    """
    if neck_stages < 1:
        raise ConfigurationError("neck_stages must be >= 1")
    out = list(levels)
    steps = min(neck_stages - 1, len(levels) - 1)
    top = out[-1].features
    for k in range(1, steps + 1):
        i = len(out) - 1 - k
        fine = out[i]
        top = add(fine.features, linear_upsample2(top, fine.length))
        out[i] = PyramidLevel(top, fine.stride, fine.level_index)
    return out


def _branch(x: Tensor, params, branch: str, eps: float) -> Tensor:
    pre = f"heads.{branch}"
    for i in (1, 2):
        x = fc(x, params[f"{pre}.fc{i}.W"], params[f"{pre}.fc{i}.b"])
        x = relu(layer_norm(x, params[f"{pre}.ln{i}.gamma"], params[f"{pre}.ln{i}.beta"], eps))
    return fc(x, params[f"{pre}.fc3.W"], params[f"{pre}.fc3.b"])


def heads_forward(levels: list[PyramidLevel], params, cfg: ModelConfig) -> list[HeadOutput]:
    """Shared classification/regression branches applied to every level."""
    feats = concat_rows([lv.features for lv in levels]) if len(levels) > 1 else levels[0].features
    logits = _branch(feats, params, "cls", cfg.ln_eps)
    act = relu if cfg.reg_activation == "relu" else softplus
    dists = act(_branch(feats, params, "reg", cfg.ln_eps))
    outs, start = [], 0
    for lv in levels:
        stop = start + lv.length
        if len(levels) > 1:
            outs.append(HeadOutput(rows(logits, start, stop), rows(dists, start, stop), lv.stride))
        else:
            outs.append(HeadOutput(logits, dists, lv.stride))
        start = stop
    return outs


def forward(params, cfg: ModelConfig, x: Tensor) -> tuple[list[PyramidLevel], list[HeadOutput]]:
    """Full detector forward.  Returns the fused detection levels and head outputs."""
    base = project(x, params, cfg)
    levels = msm_forward(base, params, cfg)
    fused = tfpn_fuse([PyramidLevel(base, 1, 0)] + levels, cfg.neck_stages)
    det_levels = fused[1:]
    return det_levels, heads_forward(det_levels, params, cfg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TDCK"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params, meta: dict | None = None) -> None:
    """Flat little-endian container.

    Layout: magic ``TDCK``, u32 version, u32 length + UTF-8 JSON header
    (model config and free-form metadata), u32 entry count, then per entry
    u32 name length, UTF-8 name, u32 ndim, u32 dims, float32 payload.
    """
    header = json.dumps({"model": asdict(cfg), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        bname = name.encode()
        chunks.append(struct.pack("<I", len(bname)) + bname)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(buf[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    cfg = ModelConfig.from_dict(header["model"])
    expected = init_params(cfg, 0)
    missing = set(expected) - set(params)
    bad = [k for k in expected if k in params and expected[k].shape != params[k].shape]
    if missing or bad:
        raise CheckpointError(f"{path}: parameters do not match config "
                              f"(missing={sorted(missing)}, mismatched={bad})")
    return cfg, params, header.get("meta", {})
