"""Dense float64 tensors with reverse-mode differentiation.

Every model in the package is written against the small set of primitives in
this module. A primitive computes its forward value with numpy and, when any
input requires a gradient, records a node holding the inputs and a closure
that maps the output adjoint to input adjoints. :func:`backward` replays the
recorded nodes in reverse topological order.

Batch dimensions are supported by leading axes: a "matrix" is the trailing
two axes of an array, so a stack of per-position masked inputs has shape
``(B, d, I)`` and the column-wise softmax runs over axis ``-2``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "DegenerateMaskError",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "exp",
    "log",
    "softplus",
    "square",
    "clip",
    "sum",
    "mean",
    "masked_softmax_columns",
    "log_softmax",
    "layer_norm",
    "concat",
    "take",
    "select_columns",
    "backward",
    "build_graph",
    "finite_difference_gradients",
    "gradient_relative_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class DegenerateMaskError(ValueError):
    """Raised when a softmax column has every entry masked out."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array, optionally tracked for differentiation.

    Leaves created with ``requires_grad=True`` receive ``.grad`` (same shape as
    ``.data``) after :func:`backward`. Non-leaf tensors keep a reference to
    their parents and a backward closure; their adjoints are transient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make as FloatingPointError
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), overflow-safe."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = np.exp(-np.logaddexp(0.0, -ad))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def clip(a: Tensor, bound: float) -> Tensor:
    """Entrywise clamp to ``[-bound, bound]``; gradient 1 on the closed interval."""
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    ad = a.data
    inside = np.abs(ad) <= bound
    return _make(np.clip(ad, -bound, bound), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), _bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least two axes")
        return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (rows of the trailing matrix by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, _bw, "concat")


def _scatter_add(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    # sorted segment sums: deterministic and much faster than np.add.at
    if idx.size == 0:
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    uniq, starts = np.unique(sidx, return_index=True)
    target[uniq] += np.add.reduceat(values[order], starts, axis=0)


def take(a: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather slices of ``a`` along ``axis``; indices may be any integer array.

    Embedding lookup is ``take(beta, tokens, axis=1)`` for ``beta`` of shape
    ``(K, D)``; the backward pass scatter-adds into the gathered columns.
    """
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    out = np.take(a.data, idx, axis=ax)
    shape = a.shape

    def _bw(g):
        grad = np.zeros(shape)
        # move the gathered axis block to the front to scatter-add
        g_moved = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        g_flat = g_moved.reshape((idx.size,) + g_moved.shape[idx.ndim:])
        grad_moved = np.moveaxis(grad, ax, 0)
        _scatter_add(grad_moved, idx.reshape(-1), g_flat)
        return (grad,)

    return _make(out, (a,), _bw, "take")


def select_columns(a: Tensor, cols) -> Tensor:
    """Pick column ``cols[b]`` of matrix ``a[b]``: ``(B, d, I) -> (B, d)``."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 3 or cols.shape != (a.shape[0],):
        raise ShapeError(f"select_columns: expected (B,d,I) and (B,), got {a.shape} and {cols.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, :, cols]
    shape = a.shape

    def _bw(g):
        grad = np.zeros(shape)
        grad[rows, :, cols] = g
        return (grad,)

    return _make(out, (a,), _bw, "select_columns")


# ---------------------------------------------------------------------------
# normalisations


def masked_softmax_columns(x: Tensor, mask=None) -> Tensor:
    """Softmax over axis -2 (down each column) of ``x + mask``.

    ``mask`` holds 0 for visible and ``-inf`` for hidden entries and must
    broadcast against ``x``. Hidden entries come out as exact zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        bad = ~((mask == 0.0) | np.isneginf(mask))
        if bad.any():
            raise ValueError("mask entries must be 0 or -inf")
        z = z + mask
    colmax = z.max(axis=-2, keepdims=True)
    if np.isneginf(colmax).any():
        raise DegenerateMaskError("softmax column is fully masked")
    e = np.exp(z - colmax)
    s = e / e.sum(axis=-2, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=-2, keepdims=True)),)

    return _make(s, (x,), _bw, "masked_softmax_columns")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), _bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -2, eps: float = 1e-5) -> Tensor:
    """Normalise each column over the feature axis, then apply gain and bias.

    ``gain`` and ``bias`` have shape ``(d, 1)`` so they broadcast over columns.
    """
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[axis]
    out = xhat * gd + bias.data

    def _bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=axis, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), _bw, "layer_norm")


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Topologically ordered record of the nodes reachable from a root.

    ``nodes[k]`` is ``(op, input_ids, tensor)`` and every input id is smaller
    than ``k``; inputs that are constants get id ``-1``.
    """

    def __init__(self, order: list[Tensor]):
        index = {id(t): k for k, t in enumerate(order)}
        self.tensors = order
        self.nodes = [(t.op, tuple(index.get(id(p), -1) for p in t._parents), t) for t in order]

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.tensors if t.is_leaf and t.requires_grad]


def build_graph(root: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or build_graph(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = adj.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        grads = t._backward(g)
        for p, gp in zip(t._parents, grads):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + gp
            else:
                adj[key] = gp


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_gradients(f: Callable[[], Tensor | float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every entry of ``x``.

    ``f`` takes no arguments and reads ``x`` by closure; ``x.data`` is
    perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.asarray(_value(f())))
            flat[i] = orig - h
            fm = float(np.asarray(_value(f())))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def _value(v):
    return v.data if isinstance(v, Tensor) else v


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||)``; absolute error when both norms are below ``floor``."""
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if denom < floor:
        return diff
    return diff / denom
