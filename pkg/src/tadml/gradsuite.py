"""Finite-difference checks over every differentiable piece, in float64."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .autograd import (GradCheckReport, Tensor, avgpool2, fc, grad_check, layer_norm,
                       linear_upsample2, record, relu, softplus)
from .losses import LevelTargets, assign_targets, focal_loss, giou_regression, total_loss
from .mechanics import MechanicsParams, mechanics_mix, mechanics_unit, resultant
from .network import ModelConfig, forward, init_params, level_geometry
from .segments import GroundTruthInstance, Segment

MODULES = ("autograd", "mechanics", "network", "losses")

# toy detector for the whole-model check
TOY = dict(input_dim=8, width=8, num_levels=2, neck_stages=2, num_classes=2)
TOY_T = 32

Check = tuple[str, Callable, dict]


def probe(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(w * y)`` so every output element carries its own weight."""
    return record("probe", np.array([(w * y.data).sum()]), (y,), lambda g: (g[0] * w,))


def _probed(op, w):
    return lambda p: probe(op(p), w)


def _autograd(rng) -> Iterator[Check]:
    n = rng.standard_normal
    yield "fc", _probed(lambda p: fc(p["x"], p["W"], p["b"]), n((5, 3))), \
        {"x": Tensor(n((5, 4))), "W": Tensor(n((4, 3))), "b": Tensor(n(3))}
    yield "layer_norm", _probed(lambda p: layer_norm(p["x"], p["g"], p["b"]), n((5, 4))), \
        {"x": Tensor(n((5, 4))), "g": Tensor(n(4)), "b": Tensor(n(4))}
    xr = n((5, 4))
    xr[np.abs(xr) < 1e-2] = 0.3  # away from the kink
    yield "relu", _probed(lambda p: relu(p["x"]), n((5, 4))), {"x": Tensor(xr)}
    yield "softplus", _probed(lambda p: softplus(p["x"]), n((5, 4))), {"x": Tensor(n((5, 4)))}
    yield "avgpool2", _probed(lambda p: avgpool2(p["x"]), n((3, 4))), {"x": Tensor(n((5, 4)))}
    yield "linear_upsample2", _probed(lambda p: linear_upsample2(p["x"], 7), n((7, 2))), \
        {"x": Tensor(n((3, 2)))}


def _mechanics(rng) -> Iterator[Check]:
    u = rng.uniform
    yield "resultant", _probed(lambda p: resultant(p["a"], p["b"], p["t"]), rng.standard_normal((5, 4))), \
        {"a": Tensor(u(0.3, 2, (5, 4))), "b": Tensor(u(0.3, 2, (5, 4))), "t": Tensor(u(0.2, 2.9, 4))}
    mp = MechanicsParams.init(8, rng, dtype=np.float64)
    mp.theta.data[:] = u(0.2, 2.9, 8)
    named = mp.named("m")
    named["x"] = Tensor(rng.standard_normal((4, 8)))
    w = rng.standard_normal((4, 8))
    yield "mechanics_mix", _probed(
        lambda p: mechanics_mix(p["x"], MechanicsParams.from_named(p, "m")), w), named
    for residual in (False, True):
        yield f"mechanics_unit(residual={residual})", _probed(
            lambda p, r=residual: mechanics_unit(p["x"], MechanicsParams.from_named(p, "m"), r), w), named


def _network(rng) -> Iterator[Check]:
    cfg = ModelConfig(**TOY)
    params = init_params(cfg, rng, np.float64)
    x = Tensor(rng.standard_normal((TOY_T, TOY["input_dim"])))
    gts = [GroundTruthInstance(Segment(3, 9), 0), GroundTruthInstance(Segment(14, 30), 1)]
    targets = assign_targets(gts, level_geometry(TOY_T, cfg.num_levels))

    def whole(p):
        _, heads = forward(p, cfg, x)
        return total_loss(heads, targets)[0]

    yield "toy detector total loss (T=32, D=8, C=8, K=2, 2 levels)", whole, params


def _losses(rng) -> Iterator[Check]:
    lv = LevelTargets(2, np.array([0, -1, 1, -1, 1]), rng.uniform(0.3, 3, (5, 2)),
                      np.array([1, 0, 1, 0, 1], bool), np.array([1, 1, 1, 1, 0], bool))
    yield "focal_loss", lambda p: focal_loss(p["x"], lv), {"x": Tensor(rng.standard_normal((5, 2)))}
    for beta in (1.0, 3.0):
        yield f"beta_giou(beta={beta:g})", lambda p, b=beta: giou_regression(p["d"], lv, b), \
            {"d": Tensor(rng.uniform(0.2, 3, (5, 2)))}


GROUPS = {"autograd": _autograd, "mechanics": _mechanics, "network": _network, "losses": _losses}


def run_suite(module: str = "all", tol: float = 1e-4, seed: int = 0,
              on_result: Callable[[str, GradCheckReport], None] | None = None
              ) -> list[tuple[str, GradCheckReport]]:
    """Run the checks for ``module`` (``all`` or one of :data:`MODULES`)."""
    if module != "all" and module not in GROUPS:
        raise ValueError(f"unknown module {module!r}; choose from all, {', '.join(MODULES)}")
    rng = np.random.default_rng(seed)
    results = []
    for name in MODULES:
        if module not in ("all", name):
            continue
        for label, f, params in GROUPS[name](rng):
            rep = grad_check(f, params, tol=tol)
            results.append((f"{name}: {label}", rep))
            if on_result is not None:
                on_result(f"{name}: {label}", rep)
    return results
