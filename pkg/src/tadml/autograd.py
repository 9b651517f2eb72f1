"""Dense 2-D tensors with a recording tape for reverse-mode gradients.

Only the primitives the detector needs are provided.  Each primitive computes
its forward value with numpy and, when any input requires a gradient and a
:class:`Tape` is active, records a closure that maps the output gradient to
input gradients.  Other modules add their own primitives through
:func:`record`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A numpy array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Records primitive applications while active (``with Tape() as tape``)."""

    records: list[_Record] = field(default_factory=list)
    _consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate d(loss) back through the recorded primitives, newest first."""
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        self._consumed = True
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss.accumulate(np.asarray(seed, dtype=loss.dtype))
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is not None and inp.requires_grad:
                    inp.accumulate(ig)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a primitive's forward value and register its backward rule.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    _check_finite(out_data, op)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data for t in tensors))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def fc(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"fc expects x[T,Din], W[Din,Dout], b[Dout]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"fc shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def backward(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return record("fc", xd @ Wd + b.data, (x, W, b), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit (biased) variance, then scale and shift."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-D input, got {x.shape}")
    D = x.shape[1]
    if D < 1 or gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm params must have shape ({D},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        # d/dx of xhat for biased variance
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return record("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, strictly positive and smooth."""
    xd = x.data

    def backward(g):
        return (g / (1.0 + np.exp(-xd)),)

    return record("softplus", np.logaddexp(0.0, xd).astype(x.dtype, copy=False), (x,), backward)


def avgpool2(x: Tensor) -> Tensor:
    """Average adjacent frame pairs; an odd final frame is pooled with itself."""
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"avgpool2 expects [T>=1, D], got {x.shape}")
    T = x.shape[0]
    xd = x.data
    if T % 2:
        xd = np.concatenate([xd, xd[-1:]], axis=0)
    out = 0.5 * (xd[0::2] + xd[1::2])

    def backward(g):
        gx = np.repeat(0.5 * g, 2, axis=0)
        if T % 2:
            gx[T - 1] += gx[T]
            gx = gx[:T]
        return (gx,)

    return record("avgpool2", out, (x,), backward)


def upsample_coords(src_len: int, target_len: int):
    """Indices and weights for half-pixel-centre linear resampling."""
    k = np.arange(target_len, dtype=np.float64)
    pos = (k + 0.5) * src_len / target_len - 0.5
    pos = np.clip(pos, 0.0, src_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    return lo, hi, pos - lo


def linear_upsample2(x: Tensor, target_len: int) -> Tensor:
    """Linearly resample along time to ``target_len`` rows (edge-clamped)."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear_upsample2 expects [T, D], got {x.shape}")
    T = x.shape[0]
    if target_len < T:
        raise DimensionError(f"target_len {target_len} < input length {T}")
    lo, hi, w = upsample_coords(T, target_len)
    w = w.astype(x.dtype)[:, None]
    xd = x.data
    out = (1 - w) * xd[lo] + w * xd[hi]

    def backward(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, lo, (1 - w) * g)
        np.add.at(gx, hi, w * g)
        return (gx,)

    return record("linear_upsample2", out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 1-element tensor."""
    shape = x.shape
    return record("sum", np.array([x.data.sum()]), (x,),
                  lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return Tensor(np.zeros(1))
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows needs equal widths, got {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return record("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, backward)


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]``."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return record("rows", x.data[start:stop].copy(), (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'FAIL' if not e < self.tol else 'ok  '} {name:<40s} {e:.3e}"
                for name, e in self.errors.items()]


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
               tol: float = 1e-6, max_elems: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    The step for element x is ``1e-5 * (1 + |x|)``.  The reported error for a
    parameter is ``max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf)``
    over the checked elements, i.e. relative to that parameter's gradient
    scale.  ``max_elems`` subsamples large parameters.
    """
    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        out = f(params)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f is not finite at the check point")
    tape.backward(out)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def evaluate() -> float:
        val = float(f(params).data.reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError("f became non-finite during finite differencing")
        return val

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elems, replace=False)
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            x0 = flat[i]
            h = 1e-5 * (1.0 + abs(x0))
            flat[i] = x0 + h
            fp = evaluate()
            flat[i] = x0 - h
            fm = evaluate()
            flat[i] = x0
            num[j] = (fp - fm) / (2 * h)
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        diff = np.abs(a - num).max(initial=0.0)
        errors[name] = 0.0 if diff == 0 else diff / max(denom, 1e-300)
    return GradCheckReport(errors, tol)
