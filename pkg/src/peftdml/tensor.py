"""Minimal float64 tensors with reverse-mode differentiation.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
build a graph of closures; :func:`backward` walks it in reverse topological
order. Broadcasting is limited to scalar-with-tensor and row-vector bias
addition (``(n, k) + (k,)``); anything else must go through an explicit op
such as :func:`mul_rows`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    AvailabilityError,
    ConstructionError,
    ContractError,
    DegenerateEmbeddingError,
    NumericDomainError,
    ShapeError,
)

_GRAD_ENABLED = True

DEGENERATE_NORM = 1e-12


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and a flat list of values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ConstructionError(f"shape entries must be positive, got {shape}")
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.ndim != 1 or arr.size != math.prod(shape):
        raise ConstructionError(f"{arr.size} values do not fill shape {shape}")
    if not np.all(np.isfinite(arr)):
        raise ConstructionError("tensor values must be finite")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, allow_bias: bool) -> None:
    if a.shape == b.shape or _is_scalar(b) or _is_scalar(a):
        return
    if allow_bias and a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1 and grad.ndim == 2:
        return grad.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, allow_bias=True)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, allow_bias=True)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, allow_bias=False)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, allow_bias=False)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericDomainError("division by zero")
    out = ad / bd
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g / bd, sa), _reduce_to(-g * out / bd, sb)

    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product of a 2-D tensor with a 2-D tensor or a vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, bd) if bd.ndim == 1 else g @ bd.T
        if b.requires_grad:
            gb = ad.T @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise NumericDomainError("sqrt gradient undefined at zero")
        return (g * 0.5 / out,)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a non-negative base and scalar exponent."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise NumericDomainError("power of a negative base")
    if p == 0:
        return _make(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))
    if p < 1 and np.any(x == 0):
        raise NumericDomainError("power gradient undefined at zero for exponent < 1")
    out = x**p
    return _make(out, (a,), lambda g: (g * p * x ** (p - 1),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "square": square, "sqrt": sqrt, "log": log, "exp": exp, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "minimum": minimum, "maximum": maximum}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](operands[0])
    if kind in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{kind} takes two operands")
        a, b = as_tensor(operands[0]), as_tensor(operands[1])
        if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
            raise ShapeError(f"{kind}: operand shapes differ {a.shape} vs {b.shape}")
        return _BINARY[kind](a, b)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- reductions / indexing


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def take_rows(a, idx) -> Tensor:
    """Gather rows (or entries of a vector); repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def scatter_rows(a, idx, n: int) -> Tensor:
    """Place rows of ``a`` at positions ``idx`` of an ``n``-row zero tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("scatter_rows indices must be unique")
    out = np.zeros((n,) + a.shape[1:])
    out[idx] = a.data
    return _make(out, (a,), lambda g: (g[idx],))


def column(a, j: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("column expects a 2-D tensor")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _make(a.data[:, j].copy(), (a,), bw)


def pick(a, idx) -> Tensor:
    """Per-row entry selection ``a[i, idx[i]]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def stack_cols(cols: Sequence) -> Tensor:
    """Stack equal-length vectors as the columns of a matrix."""
    cols = [as_tensor(c) for c in cols]
    if any(c.ndim != 1 or c.shape != cols[0].shape for c in cols):
        raise ShapeError("stack_cols expects equal-length vectors")

    def bw(g):
        return tuple(g[:, j].copy() for j in range(len(cols)))

    return _make(np.stack([c.data for c in cols], axis=1), tuple(cols), bw)


def mul_rows(a, s) -> Tensor:
    """Scale row ``i`` of a matrix by ``s[i]``."""
    a, s = as_tensor(a), as_tensor(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"mul_rows shape mismatch {a.shape} vs {s.shape}")
    ad, sd = a.data, s.data

    def bw(g):
        return g * sd[:, None], (g * ad).sum(axis=1)

    return _make(ad * sd[:, None], (a, s), bw)


def div_rows(a, s) -> Tensor:
    """Divide row ``i`` of a matrix by ``s[i]``."""
    s = as_tensor(s)
    if np.any(s.data == 0):
        raise NumericDomainError("division by zero")
    return mul_rows(a, power_neg1(s))


def power_neg1(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise NumericDomainError("reciprocal of zero")
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


# ---------------------------------------------------------------- composite primitives


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the entries where ``mask`` is true; masked entries are exactly 0.

    Works on a vector or row-wise on a matrix. Every row needs at least one
    surviving entry.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"mask shape {mask.shape} != scores shape {scores.shape}")
    if not np.all(mask.any(axis=-1)):
        raise AvailabilityError("masked_softmax needs at least one surviving entry")
    x = np.where(mask, scores.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (scores,), bw)


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax (or over a single vector)."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericDomainError("log_softmax of non-finite logits")
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def normalize_rows(a) -> Tensor:
    """L2-normalize a vector or each row of a matrix.

    Raises :class:`DegenerateEmbeddingError` when a norm is below 1e-12 instead of
    adding an epsilon.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < DEGENERATE_NORM):
        raise DegenerateEmbeddingError("cannot normalize a near-zero vector")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- fused layers
# Hot-path layer ops with hand-written gradients; each is grad-checked against
# the composition of primitives it replaces.


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for a row batch ``x`` of shape ``(n, in)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear shape mismatch x{x.shape} W{weight.shape} b{bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    out += bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


def lora_linear(x, weight, bias, lora_a, lora_b, scale: float, relu: bool = False) -> Tensor:
    """``x @ W.T + b + scale * (x @ A.T) @ B.T`` in one node, optionally followed by a ReLU."""
    x, weight, bias, lora_a, lora_b = (as_tensor(t) for t in (x, weight, bias, lora_a, lora_b))
    if x.ndim != 2 or x.shape[1] != weight.shape[1] or lora_a.shape[1] != x.shape[1]:
        raise ShapeError(f"lora_linear shape mismatch x{x.shape} W{weight.shape} A{lora_a.shape}")
    if lora_b.shape != (weight.shape[0], lora_a.shape[0]):
        raise ShapeError(f"lora_linear B shape {lora_b.shape} does not match W{weight.shape} A{lora_a.shape}")
    xd, wd, ad, bd = x.data, weight.data, lora_a.data, lora_b.data
    u = xd @ ad.T
    out = xd @ wd.T
    out += bias.data
    out += (scale * u) @ bd.T
    if relu:
        np.maximum(out, 0.0, out=out)

    def bw(g):
        if relu:
            g = g * (out > 0)
        gu = scale * (g @ bd)
        gx = g @ wd + gu @ ad if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        ga = gu.T @ xd if lora_a.requires_grad else None
        gB = scale * (g.T @ u) if lora_b.requires_grad else None
        return gx, gw, gb, ga, gB

    return _make(out, (x, weight, bias, lora_a, lora_b), bw)


def adapter(x, down_w, down_b, up_w, up_b) -> Tensor:
    """Residual bottleneck ``x + relu(x @ D.T + d) @ U.T + u``."""
    x, down_w, down_b, up_w, up_b = (as_tensor(t) for t in (x, down_w, down_b, up_w, up_b))
    if x.ndim != 2 or down_w.shape[1] != x.shape[1] or up_w.shape != (x.shape[1], down_w.shape[0]):
        raise ShapeError(f"adapter shape mismatch x{x.shape} D{down_w.shape} U{up_w.shape}")
    xd, dw, uw = x.data, down_w.data, up_w.data
    pre = xd @ dw.T + down_b.data
    act = np.maximum(pre, 0.0)
    out = act @ uw.T
    out += up_b.data
    out += xd

    def bw(g):
        gact = (g @ uw) * (pre > 0)
        gx = g + gact @ dw if x.requires_grad else None
        return (
            gx,
            gact.T @ xd if down_w.requires_grad else None,
            gact.sum(axis=0) if down_b.requires_grad else None,
            g.T @ act if up_w.requires_grad else None,
            g.sum(axis=0) if up_b.requires_grad else None,
        )

    return _make(out, (x, down_w, down_b, up_w, up_b), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the grad-requiring subgraph: every node after its parents."""
    order: list[Tensor] = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(objective: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(objective)/d(leaf) to every leaf tensor with ``requires_grad``.

    Gradients accumulate into ``leaf.grad``; the returned map holds the
    contribution of this call only.
    """
    if objective.data.size != 1:
        raise ContractError(f"backward needs a scalar objective, got shape {objective.shape}")
    if not objective.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(objective): np.ones_like(objective.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(objective)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves
