"""Mechanics token mixing and the mechanics unit.

Two FC projections of each token are treated as forces ``F_a`` and ``F_b``
acting at a learnable per-channel angle ``theta``; the block outputs the
magnitude of their resultant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autograd import Tensor, fc, layer_norm, record, relu, add

SQRT_FLOOR = 1e-12


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def resultant(fa: Tensor, fb: Tensor, theta: Tensor, literal: bool = False) -> Tensor:
    """Elementwise ``sqrt(max(Fa^2 + Fb^2 + 2 Fa Fb cos(theta), 1e-12))``.

    With ``literal=True`` the squares are dropped, giving
    ``sqrt(max(Fa + Fb + 2 Fa Fb cos(theta), 1e-12))``.
    """
    a, b, th = fa.data, fb.data, theta.data
    c = np.cos(th)
    if literal:
        u = a + b + 2 * a * b * c
    else:
        u = a * a + b * b + 2 * a * b * c
    active = u > SQRT_FLOOR
    y = np.sqrt(np.where(active, u, SQRT_FLOOR))

    def backward(g):
        gu = np.where(active, 0.5 * g / y, 0.0)
        if literal:
            ga = gu * (1 + 2 * b * c)
            gb = gu * (1 + 2 * a * c)
        else:
            ga = gu * (2 * a + 2 * b * c)
            gb = gu * (2 * b + 2 * a * c)
        gth = (gu * (-2 * a * b)).sum(axis=0) * np.sin(th)
        return ga, gb, gth

    return record("resultant", y.astype(a.dtype, copy=False), (fa, fb, theta), backward)


@dataclass
class MechanicsParams:
    W_a: Tensor
    b_a: Tensor
    W_b: Tensor
    b_b: Tensor
    theta: Tensor
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    W_c1: Tensor
    b_c1: Tensor
    W_c2: Tensor
    b_c2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, hidden_ratio: int = 2,
             dtype=np.float64) -> "MechanicsParams":
        hidden = hidden_ratio * dim
        z = lambda *s: Tensor(np.zeros(s, dtype=dtype))
        o = lambda *s: Tensor(np.ones(s, dtype=dtype))
        return cls(
            W_a=Tensor(glorot(rng, dim, dim, dtype)), b_a=z(dim),
            W_b=Tensor(glorot(rng, dim, dim, dtype)), b_b=z(dim),
            theta=Tensor(np.full(dim, math.pi / 2, dtype=dtype)),
            norm1_gamma=o(dim), norm1_beta=z(dim),
            norm2_gamma=o(dim), norm2_beta=z(dim),
            W_c1=Tensor(glorot(rng, dim, hidden, dtype)), b_c1=z(hidden),
            W_c2=Tensor(glorot(rng, hidden, dim, dtype)), b_c2=z(dim),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, params, prefix: str) -> "MechanicsParams":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


def mechanics_mix(x: Tensor, p: MechanicsParams, literal: bool = False) -> Tensor:
    fa = fc(x, p.W_a, p.b_a)
    fb = fc(x, p.W_b, p.b_b)
    return resultant(fa, fb, p.theta, literal)


def channel_fc(x: Tensor, p: MechanicsParams) -> Tensor:
    return fc(relu(fc(x, p.W_c1, p.b_c1)), p.W_c2, p.b_c2)


def mechanics_unit(x: Tensor, p: MechanicsParams, residual: bool = False,
                   eq1_literal: bool = False, eps: float = 1e-5) -> Tensor:
    """norm -> mechanics mix -> norm -> channel MLP, optional residuals."""
    z = mechanics_mix(layer_norm(x, p.norm1_gamma, p.norm1_beta, eps), p, eq1_literal)
    if residual:
        z = add(z, x)
    out = channel_fc(layer_norm(z, p.norm2_gamma, p.norm2_beta, eps), p)
    if residual:
        out = add(out, z)
    return out
