"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs include a tensor with ``requires_grad`` records an
:class:`Op` holding its inputs, the arrays its backward rule needs, and the rule
itself.  :func:`backward` collects the ops reachable from a scalar loss into a
:class:`Tape` (topological order) and replays it in reverse.

Only two broadcast forms exist for elementwise ops: a size-1 operand (scalar)
and a 1-D bias matching the trailing extent of a 2-D operand.  Anything else
raises :class:`DimensionError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass(eq=False)
class Op:
    name: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: tuple = ()

    def retained_scalars(self) -> int:
        return int(sum(a.size for a in self.saved))


class Tensor:
    """A row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "name", "is_param")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 is_param: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: Op | None = None
        self.name = name
        self.is_param = is_param

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def op(self) -> Op | None:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape))


def _record(name: str, out_data: np.ndarray, inputs: tuple, backward_fn, saved=()) -> Tensor:
    out = Tensor(out_data)
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = Op(name, inputs, out, backward_fn, tuple(saved))
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    # with two size-1 operands, the lower-rank one is the scalar
    if b.size == 1 and b.ndim <= 2 and (a.size > 1 or b.ndim <= a.ndim):
        return "scalar_b"
    if a.size == 1 and a.ndim <= 2:
        return "scalar_a"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "bias_b"
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return "bias_a"
    raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.full(shape, g.sum())
    # trailing-dim bias
    return g.sum(axis=0).reshape(shape)


def _combine(a_data, b_data, fn):
    kind = _broadcast_kind(a_data, b_data)
    if kind == "scalar_b":
        return fn(a_data, b_data.reshape(()))
    if kind == "scalar_a":
        return fn(a_data.reshape(()), b_data)
    return fn(a_data, b_data)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _combine(a.data, b.data, np.add)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_reduce_to(g, sa) if a.requires_grad else None,
                _reduce_to(g, sb) if b.requires_grad else None)

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _combine(a.data, b.data, np.subtract)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_reduce_to(g, sa) if a.requires_grad else None,
                _reduce_to(-g, sb) if b.requires_grad else None)

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _combine(a.data, b.data, np.multiply)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(_combine(g, bd, np.multiply), sa) if a.requires_grad else None
        gb = _reduce_to(_combine(g, ad, np.multiply), sb) if b.requires_grad else None
        return ga, gb

    saved = []
    if a.requires_grad and b.size > 1:
        saved.append(bd)
    if b.requires_grad and a.size > 1:
        saved.append(ad)
    return _record("mul", out, (a, b), bw, saved)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # exact 0.5 at 0; the split form avoids overflow for large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bw, (out,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _record("gelu", out, (a,), bw, (x,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": mul,
    "bias": add,
}

_UNARY = {"sigmoid": sigmoid, "gelu": gelu}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch a pointwise op by name: add, sub, mul, scale, bias, sigmoid, gelu."""
    if op_kind in _UNARY:
        if b is not None:
            raise ContractError(f"{op_kind} takes a single operand")
        return _UNARY[op_kind](a)
    if op_kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise ContractError(f"{op_kind} needs two operands")
    if op_kind == "bias":
        bt = as_tensor(b)
        if bt.ndim != 1:
            raise DimensionError(f"bias must be 1-D, got shape {bt.shape}")
    return _ELEMENTWISE[op_kind](a, b)


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    saved = []
    if a.requires_grad:
        saved.append(bd)
    if b.requires_grad:
        saved.append(ad)
    return _record("matmul", out, (a, b), bw, saved)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"bad column slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("col_slice", a.data[:, start:stop].copy(), (a,), bw)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f"bad row slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("row_slice", a.data[start:stop].copy(), (a,), bw)


def _concat(parts: Sequence[Tensor], axis: int, name: str) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError(f"{name} needs at least one tensor")
    other = 1 - axis
    widths = {p.shape[other] for p in parts if p.ndim == 2}
    if any(p.ndim != 2 for p in parts) or len(widths) != 1:
        raise DimensionError(f"{name} shape mismatch: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if not p.requires_grad:
                grads.append(None)
            elif axis == 0:
                grads.append(g[lo:hi])
            else:
                grads.append(g[:, lo:hi])
        return grads

    return _record(name, out, tuple(parts), bw)


def vcat(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along rows."""
    return _concat(parts, 0, "vcat")


def hcat(parts: Sequence[Tensor]) -> Tensor:
    """Join 2-D tensors along columns."""
    return _concat(parts, 1, "hcat")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# row-wise normalizations
# ---------------------------------------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} received non-finite input")


def row_softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise DimensionError(f"row_softmax needs a 2-D tensor, got {logits.shape}")
    x = logits.data
    _check_finite(x, "row_softmax")
    if x.shape[1] == 0:
        raise DimensionError("row_softmax over zero columns")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("row_softmax", p, (logits,), bw, (p,))


def row_logsumexp(logits: Tensor) -> Tensor:
    """log(sum(exp(row))) per row, as an m x 1 column."""
    if logits.ndim != 2:
        raise DimensionError(f"row_logsumexp needs a 2-D tensor, got {logits.shape}")
    x = logits.data
    _check_finite(x, "row_logsumexp")
    if x.shape[1] == 0:
        raise DimensionError("row_logsumexp over zero columns")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    p = e / s

    def bw(g):
        return (g * p,)

    return _record("row_logsumexp", out, (logits,), bw, (p,))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    if x.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm shapes {x.shape}, {scale.shape}, {shift.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    w = scale.data
    out = xhat * w + shift.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gs = (g * xhat).sum(axis=0) if scale.requires_grad else None
        gb = g.sum(axis=0) if shift.requires_grad else None
        return gx, gs, gb

    return _record("layer_norm", out, (x, scale, shift), bw, (xhat, inv))


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Ops reachable from one output, inputs always before their consumers."""

    ops: list[Op] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Op] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            op = t._op
            if op is None:
                continue
            if expanded:
                order.append(op)
                continue
            if id(op) in seen:
                continue
            seen.add(id(op))
            stack.append((t, True))
            for inp in reversed(op.inputs):
                if isinstance(inp, Tensor) and inp._op is not None and id(inp._op) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.ops)

    def retained_scalars(self) -> int:
        """Scalars held by the recorded ops for their backward rules."""
        seen: set[int] = set()
        total = 0
        for op in self.ops:
            for arr in op.saved:
                if id(arr) not in seen:
                    seen.add(id(arr))
                    total += arr.size
        return total

    def is_topological(self) -> bool:
        position = {id(op): i for i, op in enumerate(self.ops)}
        for i, op in enumerate(self.ops):
            for inp in op.inputs:
                if isinstance(inp, Tensor) and inp._op is not None:
                    if position.get(id(inp._op), len(self.ops)) >= i:
                        return False
        return True


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad ancestor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward_fn(g)):
            if gi is None or not _needs(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
            touched[key] = inp
    for key, g in grads.items():
        t = touched[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    return tape


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractError("step h must be positive")
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = out.reshape(-1)

    def value(arr):
        y = f(Tensor(arr))
        return y.item() if isinstance(y, Tensor) else float(y)

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        flat[i] = (value(plus) - value(minus)) / (2.0 * h)
    return out


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray,
                      floor: float = 1e-6) -> tuple[float, float]:
    """(max relative error where |analytic| > floor, max absolute error elsewhere)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    big = np.abs(analytic) > floor
    diff = np.abs(analytic - numeric)
    rel = float((diff[big] / np.abs(analytic[big])).max()) if big.any() else 0.0
    ab = float(diff[~big].max()) if (~big).any() else 0.0
    return rel, ab
