"""Reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` wraps one array value plus the local backward rule that
scatters an incoming cotangent onto its parents. Graphs are built per
training step, backpropagated once, and discarded; nodes are never mutated
after construction except for gradient accumulation.

Each op's backward rule is checked against central finite differences in the
test suite, so the rules here are written for correctness first and rely on
numpy for speed (einsum contractions dominate the runtime and dispatch to
BLAS where the contraction allows).
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, GraphError, ShapeError

_PATH_CACHE: dict[tuple, list] = {}


def _einsum(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """einsum with the contraction path cached per (spec, shapes); path
    planning otherwise dominates on the small graphs used by gradient checks."""
    key = (spec, a.shape, b.shape)
    path = _PATH_CACHE.get(key)
    if path is None:
        path = np.einsum_path(spec, a, b, optimize="optimal")[0]
        _PATH_CACHE[key] = path
    return np.einsum(spec, a, b, optimize=path)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted cotangent back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the differentiation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "trainable")

    def __init__(self, value, *, parents=(), backward_fn=None, trainable=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.trainable = trainable
        # trainable leaves always expose a buffer; intermediates allocate lazily
        self.grad = np.zeros_like(self.value) if trainable else None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, trainable={self.trainable})"


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def parameter(x) -> Node:
    return Node(x, trainable=True)


def _topo_order(root: Node) -> list[Node]:
    """Reverse-topological schedule via iterative DFS; each node appears once."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Fill ``grad`` on every ancestor of a scalar-valued root."""
    if root.value.size != 1:
        raise GraphError(f"backward root must be scalar-valued, got shape {root.value.shape}")
    order = _topo_order(root)
    root._accumulate(np.ones_like(root.value))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# -- elementwise arithmetic (numpy broadcasting with summed-back gradients) --

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = Node(a.value + b.value, parents=(a, b))
    out.backward_fn = lambda g: (
        a._accumulate(_unbroadcast(g, a.value.shape)),
        b._accumulate(_unbroadcast(g, b.value.shape)),
    )
    return out


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = Node(a.value - b.value, parents=(a, b))
    out.backward_fn = lambda g: (
        a._accumulate(_unbroadcast(g, a.value.shape)),
        b._accumulate(_unbroadcast(-g, b.value.shape)),
    )
    return out


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = Node(a.value * b.value, parents=(a, b))
    out.backward_fn = lambda g: (
        a._accumulate(_unbroadcast(g * b.value, a.value.shape)),
        b._accumulate(_unbroadcast(g * a.value, b.value.shape)),
    )
    return out


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    out = Node(a.value / b.value, parents=(a, b))
    out.backward_fn = lambda g: (
        a._accumulate(_unbroadcast(g / b.value, a.value.shape)),
        b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
    )
    return out


def neg(a) -> Node:
    a = lift(a)
    out = Node(-a.value, parents=(a,))
    out.backward_fn = lambda g: a._accumulate(-g)
    return out


def exp(a) -> Node:
    a = lift(a)
    with np.errstate(over="ignore"):  # inf propagates; finite checks live downstream
        v = np.exp(a.value)
    out = Node(v, parents=(a,))
    out.backward_fn = lambda g: a._accumulate(g * v)
    return out


def log(a) -> Node:
    a = lift(a)
    out = Node(np.log(a.value), parents=(a,))
    out.backward_fn = lambda g: a._accumulate(g / a.value)
    return out


def sqrt(a) -> Node:
    a = lift(a)
    v = np.sqrt(a.value)
    out = Node(v, parents=(a,))
    out.backward_fn = lambda g: a._accumulate(g * 0.5 / v)
    return out


def softplus(a) -> Node:
    a = lift(a)
    x = a.value
    v = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    out = Node(v, parents=(a,))

    def bw(g):
        # d softplus / dx = sigmoid(x), computed overflow-safe
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        a._accumulate(g * sig)

    out.backward_fn = bw
    return out


def clamp_min(a, floor: float) -> Node:
    a = lift(a)
    out = Node(np.maximum(a.value, floor), parents=(a,))
    mask = a.value > floor
    out.backward_fn = lambda g: a._accumulate(g * mask)
    return out


# -- reductions and structure ------------------------------------------------

def sum_axis(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = lift(a)
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    out.backward_fn = bw
    return out


def mean_axis(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_axis(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Node:
    a = lift(a)
    out = Node(a.value.reshape(shape), parents=(a,))
    out.backward_fn = lambda g: a._accumulate(g.reshape(a.value.shape))
    return out


def transpose2d(a) -> Node:
    a = lift(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.value.shape}")
    out = Node(a.value.T.copy(), parents=(a,))
    out.backward_fn = lambda g: a._accumulate(g.T)
    return out


def diagonal2d(a) -> Node:
    """(B, B) -> (B,) main diagonal."""
    a = lift(a)
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeError(f"diagonal2d expects a square matrix, got shape {a.value.shape}")
    b = a.value.shape[0]
    idx = np.arange(b)
    out = Node(a.value[idx, idx].copy(), parents=(a,))

    def bw(g):
        buf = np.zeros_like(a.value)
        buf[idx, idx] = g
        a._accumulate(buf)

    out.backward_fn = bw
    return out


def matched_rows(a) -> Node:
    """(B, B, D) -> (B, D): row i is a[i, i, :] (the matched-pair slice)."""
    a = lift(a)
    if a.value.ndim != 3 or a.value.shape[0] != a.value.shape[1]:
        raise ShapeError(f"matched_rows expects (B, B, D), got shape {a.value.shape}")
    b = a.value.shape[0]
    idx = np.arange(b)
    out = Node(a.value[idx, idx, :].copy(), parents=(a,))

    def bw(g):
        buf = np.zeros_like(a.value)
        buf[idx, idx, :] = g
        a._accumulate(buf)

    out.backward_fn = bw
    return out


def gather_along(a, indices: np.ndarray, axis: int) -> Node:
    """take_along_axis with a scatter-add backward; indices are constants."""
    a = lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != a.value.ndim:
        raise ShapeError(
            f"gather_along: index rank {idx.ndim} must match tensor rank {a.value.ndim}"
        )
    out = Node(np.take_along_axis(a.value, idx, axis=axis), parents=(a,))

    def bw(g):
        buf = np.zeros_like(a.value)
        grids = np.ogrid[tuple(slice(s) for s in idx.shape)]
        fancy = list(grids)
        fancy[axis] = idx
        np.add.at(buf, tuple(fancy), g)
        a._accumulate(buf)

    out.backward_fn = bw
    return out


# -- contractions -------------------------------------------------------------

def einsum2(spec: str, a, b) -> Node:
    """Two-operand einsum with the generic exchange-rule backward.

    Restricted to specs where each operand's indices are a subset of the
    output indices plus the other operand's (no internal diagonals or
    single-operand sums), which makes the backward an einsum with the
    cotangent swapped in.
    """
    a, b = lift(a), lift(b)
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for name, sub_ in (("lhs", sa), ("rhs", sb), ("out", out_sub)):
        if len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum2 {spec!r}: repeated index in {name}")
    if not set(sa) <= set(sb) | set(out_sub):
        raise ShapeError(f"einsum2 {spec!r}: lhs index not recoverable in backward")
    if not set(sb) <= set(sa) | set(out_sub):
        raise ShapeError(f"einsum2 {spec!r}: rhs index not recoverable in backward")
    out = Node(_einsum(spec, a.value, b.value), parents=(a, b))

    def bw(g):
        a._accumulate(_einsum(f"{out_sub},{sb}->{sa}", g, b.value))
        b._accumulate(_einsum(f"{sa},{out_sub}->{sb}", a.value, g))

    out.backward_fn = bw
    return out


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects two matrices, got {a.value.shape} and {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.value.shape} x {b.value.shape}")
    return einsum2("ij,jk->ik", a, b)


# -- fused numerically-careful ops --------------------------------------------

def softmax_last(a, mask: np.ndarray | None = None) -> Node:
    """Softmax over the last axis, max-subtracted; optional boolean keep-mask.

    Masked-out entries get probability exactly 0 and propagate no gradient.
    Every row must keep at least one entry.
    """
    a = lift(a)
    x = a.value
    with np.errstate(invalid="ignore"):  # inf inputs surface as nan for the loss guard
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
            if not mask.any(axis=-1).all():
                raise DomainError("softmax_last: a row has no unmasked entries")
            neg = np.where(mask, x, -np.inf)
            m = neg.max(axis=-1, keepdims=True)
            e = np.where(mask, np.exp(x - m), 0.0)
        else:
            m = x.max(axis=-1, keepdims=True)
            e = np.exp(x - m)
        y = e / e.sum(axis=-1, keepdims=True)
    out = Node(y, parents=(a,))

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        a._accumulate(y * (g - inner))

    out.backward_fn = bw
    return out


def logsumexp_last(a) -> Node:
    """log(sum(exp(x))) over the last axis, max-subtracted; drops that axis."""
    a = lift(a)
    x = a.value
    with np.errstate(invalid="ignore"):
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = e.sum(axis=-1, keepdims=True)
    out = Node((m + np.log(s)).squeeze(-1), parents=(a,))
    soft = e / s

    def bw(g):
        a._accumulate(soft * np.expand_dims(g, -1))

    out.backward_fn = bw
    return out


def unit_last(a, floor: float = 1e-12) -> Node:
    """L2-normalize along the last axis with a norm floor (zero stays zero)."""
    a = lift(a)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    m = np.maximum(norm, floor)
    y = x / m
    out = Node(y, parents=(a,))
    live = norm > floor

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        a._accumulate(np.where(live, (g - y * inner) / m, g / m))

    out.backward_fn = bw
    return out
