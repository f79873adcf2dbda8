"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a NumPy buffer (float32 by default, float64 in the shadow mode
used by gradient checks).  Every differentiable op records its parents and a
closure mapping the output gradient to input gradients; :func:`backward`
replays those closures in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_node_ids = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float value, optionally a node in a gradient graph.

    ``data`` is never mutated by ops; only ``grad`` (for leaves) and explicit
    optimizer updates write to a tensor after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self, full=True), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, like: Tensor, full: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if full:
        return Tensor(np.full(like.shape, value, dtype=like.dtype))
    return Tensor(np.asarray(value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    ok = b.ndim <= a.ndim and all(
        nb in (na, 1) for na, nb in zip(a.shape[a.ndim - b.ndim :], b.shape)
    )
    if not ok:
        raise ShapeError(f"cannot broadcast shape {b.shape} onto {a.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Per-element ``a <kind> b``; ``b`` may broadcast along trailing axes of ``a``."""
    _check_broadcast(a, b)
    if kind == "add":
        return _make(a.data + b.data, (a, b), "add",
                     lambda g: (g, _unbroadcast(g, b.shape)))
    if kind == "sub":
        return _make(a.data - b.data, (a, b), "sub",
                     lambda g: (g, -_unbroadcast(g, b.shape)))
    if kind == "mul":
        return _make(a.data * b.data, (a, b), "mul",
                     lambda g: (g * b.data, _unbroadcast(g * a.data, b.shape)))
    if kind == "div":
        out = a.data / b.data
        return _make(out, (a, b), "div",
                     lambda g: (g / b.data, _unbroadcast(-g * out / b.data, b.shape)))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), "scale", lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.dtype.type(c), (x,), "add_scalar", lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat of shapes {[x.shape for x in xs]}: {exc}") from None
    return _make(out, tuple(xs), "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather ``x`` along ``axis`` at integer ``indices``; backward scatter-adds."""
    indices = np.asarray(indices)
    axis = axis % x.ndim

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (gx,)

    return _make(np.take(x.data, indices, axis=axis), (x,), "take", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _einsum_backward_spec(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own):
            raise ValueError(f"repeated index in einsum operand {own!r}")
        if any(c not in other and c not in out for c in own):
            raise ValueError(f"einsum {spec!r}: operand-only summed index is unsupported")
    return sa, sb, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without diagonals or operand-private reductions."""
    sa, sb, so = _einsum_backward_spec(spec)
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{so},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _make(out, (a, b), "einsum", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y.reshape(out_shape), parents, "linear", backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax_last(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_last needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), "softmax", backward)


def log_softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), "log_softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then ``gamma*x + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), "layer_norm", backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    cdf = cdf.astype(x.dtype, copy=False)

    def backward(g):
        pdf = (_INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)).astype(x.dtype, copy=False)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), "gelu", backward)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.node_id)


def grad_graph(root: Tensor) -> list[GraphRecord]:
    """Executed ops reachable from ``root``, in topological (creation) order."""
    return [
        GraphRecord(t.op, tuple(p.node_id for p in t._parents), t.node_id)
        for t in _reachable(root)
        if not t.is_leaf
    ]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_reachable(loss)):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
