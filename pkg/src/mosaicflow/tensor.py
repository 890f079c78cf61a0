"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are plain ``numpy`` arrays wrapped in :class:`Node`.  Every op returns a
new node that remembers its parents and a vector-Jacobian product; calling
:func:`backward` on a scalar node replays that record in reverse topological
order and returns a gradient map ``{leaf node: ndarray}``.

There is no global state: independent graphs can be built and differentiated
on different threads.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class Node:
    """A tracked tensor value.

    ``parents`` and ``vjp`` are only kept when at least one parent requires a
    gradient, so graphs built purely from constants cost nothing extra.
    """

    __slots__ = ("value", "requires_grad", "op", "parents", "vjp")

    def __init__(
        self,
        value: np.ndarray,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Node", ...] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.value = value
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)


def tensor(data, requires_grad: bool = False, check_finite: bool = True) -> Node:
    """Wrap ``data`` as a float64 leaf node."""
    value = np.array(data, dtype=DTYPE, copy=True)
    if check_finite and not np.all(np.isfinite(value)):
        raise ValueError("tensor contains NaN or Inf")
    return Node(value, requires_grad=requires_grad)


def constant(data) -> Node:
    """Wrap an array without copying; never tracked."""
    if isinstance(data, Node):
        return data
    return Node(np.asarray(data, dtype=DTYPE))


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def _make(value, op, parents, vjp) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, True, op, tuple(parents), vjp)
    return Node(value, False, op)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if len(a) != len(b):
        if len(a) == 0 or len(b) == 0:
            return a or b
        raise ShapeError(f"{op}: shapes {a} and {b} differ in rank")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, s: float) -> Node:
    a = _as_node(a)
    s = float(s)
    return _make(a.value * s, "scale", (a,), lambda g: (g * s,))


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(av * av, "square", (a,), lambda g: (2.0 * av * g,))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = _as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis: int = -1) -> Node:
    a = _as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def sum_squares(a) -> Node:
    """Squared L2 norm over all entries."""
    a = _as_node(a)
    av = a.value
    return _make(np.asarray(np.vdot(av, av)), "sum_squares", (a,), lambda g: (2.0 * g * av,))


def l1_norm(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(np.asarray(np.abs(av).sum()), "l1_norm", (a,), lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# spatial ops on (..., H, W)


def _conv_cols(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (N, C, H+2p, W+2p) -> (C*k*k, N*H*W)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def conv2d(x, weight, bias=None) -> Node:
    """Stride-1 cross-correlation with zero padding that keeps H and W.

    ``x`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, k, k) with odd k and
    ``bias`` is (Cout,).
    """
    x, weight = _as_node(x), _as_node(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    p = k // 2
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.value
    wmat = weight.value.reshape(o, c * k * k)
    out = (wmat @ _conv_cols(xp, k, h, w)).reshape(o, n, h, w)
    parents = [x, weight]
    if bias is not None:
        bias = _as_node(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
        out += bias.value[:, None, None, None]
        parents.append(bias)
    out = out.transpose(1, 0, 2, 3)
    needs_x, needs_w = x.requires_grad, weight.requires_grad

    def vjp(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * h * w)
        gx = gw = None
        if needs_w:
            gw = (gm @ _conv_cols(xp, k, h, w).T).reshape(weight.shape)
        if needs_x:
            gcols = (wmat.T @ gm).reshape(c, k, k, n, h, w)
            gxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
            for dy in range(k):
                for dx in range(k):
                    gxp[:, :, dy:dy + h, dx:dx + w] += gcols[:, dy, dx]
            gx = gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return _make(np.ascontiguousarray(out), "conv2d", parents, vjp)


def avg_pool2(a) -> Node:
    """Non-overlapping 2x2 mean over the last two axes."""
    a = _as_node(a)
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: extents {a.shape} are not divisible by 2")
    lead = a.shape[:-2]
    out = a.value.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _make(out, "avg_pool2", (a,), vjp)


def upsample2(a) -> Node:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    a = _as_node(a)
    h, w = a.shape[-2:]
    lead = a.shape[:-2]
    out = np.repeat(np.repeat(a.value, 2, axis=-2), 2, axis=-1)

    def vjp(g):
        return (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),)

    return _make(out, "upsample2", (a,), vjp)


def concat(nodes: Iterable, axis: int = 1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    ref = nodes[0].shape
    ax = axis % len(ref)
    for nd in nodes[1:]:
        s = nd.shape
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {s} differ off axis {axis}")
    sizes = np.cumsum([nd.shape[ax] for nd in nodes])[:-1]
    out = np.concatenate([nd.value for nd in nodes], axis=ax)
    return _make(out, "concat", nodes, lambda g: np.split(g, sizes, axis=ax))


def band_weighted_sum(x, weights) -> Node:
    """Per-pixel weighted sum over the band axis (a 1x1 convolution).

    ``x`` is (..., C, H, W) and ``weights`` is (C,); the band axis is kept with
    extent 1.
    """
    x, weights = _as_node(x), _as_node(weights)
    c = x.shape[-3]
    if weights.shape != (c,):
        raise ShapeError(f"band_weighted_sum: cube {x.shape} and weights {weights.shape}")
    xv, wv = x.value, weights.value
    out = np.tensordot(wv, xv, axes=([0], [xv.ndim - 3]))
    out = np.expand_dims(out, -3)

    def vjp(g):
        gx = g * wv[:, None, None]
        gw = (xv * g).sum(axis=tuple(i for i in range(xv.ndim) if i != xv.ndim - 3))
        return gx, gw

    return _make(out, "band_weighted_sum", (x, weights), vjp)


def separable_map(x, left: np.ndarray, right: np.ndarray) -> Node:
    """Fixed per-band separable linear map of a plane into a cube.

    ``x`` is (..., 1, h, w); ``left`` is (B, H, h) and ``right`` (B, W, w).
    Output band b is ``left[b] @ x @ right[b].T``.
    """
    x = _as_node(x)
    if x.shape[-3] != 1 or left.shape[2] != x.shape[-2] or right.shape[2] != x.shape[-1]:
        raise ShapeError(f"separable_map: plane {x.shape} vs maps {left.shape}, {right.shape}")
    plane = x.value[..., 0, :, :]
    out = np.einsum("bIi,...ij,bJj->...bIJ", left, plane, right, optimize=True)

    def vjp(g):
        gp = np.einsum("bIi,...bIJ,bJj->...ij", left, g, right, optimize=True)
        return (np.expand_dims(gp, -3),)

    return _make(out, "separable_map", (x,), vjp)


_TRANSFORMS = {
    "identity": (lambda v: v, lambda v: v),
    "flip_h": (lambda v: v[..., :, ::-1], lambda v: v[..., :, ::-1]),
    "flip_v": (lambda v: v[..., ::-1, :], lambda v: v[..., ::-1, :]),
    "rot90": (lambda v: np.rot90(v, 1, axes=(-2, -1)), lambda v: np.rot90(v, -1, axes=(-2, -1))),
    "rot180": (lambda v: np.rot90(v, 2, axes=(-2, -1)), lambda v: np.rot90(v, 2, axes=(-2, -1))),
    "rot270": (lambda v: np.rot90(v, 3, axes=(-2, -1)), lambda v: np.rot90(v, 1, axes=(-2, -1))),
}


def spatial_transform(a, kind: str) -> Node:
    """Flip or rotate the last two axes."""
    a = _as_node(a)
    fwd, inv = _TRANSFORMS[kind]
    return _make(np.ascontiguousarray(fwd(a.value)), f"transform:{kind}", (a,),
                 lambda g: (np.ascontiguousarray(inv(g)),))


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Topologically ordered record of the ops that produced ``root``."""

    def __init__(self, root: Node):
        self.root = root
        self.nodes: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def backward(self) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(loss: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf nodes.

    With ``wrt`` given, every listed leaf gets an entry, zeros when the loss
    does not depend on it.  Otherwise every reachable trainable leaf is
    returned.
    """
    if loss.value.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape(loss)
    raw = tape.backward() if loss.requires_grad else {}
    if wrt is None:
        leaves = [n for n in tape.nodes if n.is_leaf]
    else:
        leaves = list(wrt)
    out = {}
    for leaf in leaves:
        g = raw.get(id(leaf))
        out[leaf] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
    return out
