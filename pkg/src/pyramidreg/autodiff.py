"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Every op returns a :class:`Node`.  A node keeps its parents and a backward
rule mapping the output adjoint to one adjoint per parent.  Nodes that do
not depend on any trainable leaf are folded into constants, so images and
other fixed inputs cost nothing during :func:`backward`.

Broadcasting is deliberately narrow: binary elementwise ops accept operands
of identical shape, or a 0-d scalar.  Anything else must go through
:func:`expand` explicitly.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import Grid3D, apply_along_axis, interp_matrix, lerp_along_axis

__all__ = [
    "Node", "ParamStore", "as_node", "constant", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "square", "sqrt",
    "clamp_min", "leaky_relu", "sigmoid", "exp", "elementwise",
    "sum", "mean", "astype", "reshape", "transpose", "expand", "concat", "concat_channels",
    "take", "pad", "crop", "matmul", "softmax", "softmax_lastdim", "layer_norm",
    "conv3d", "resize", "avg_pool", "add_many",
]


class Node:
    """Value plus adjoint in the recorded graph."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name", "_grad", "_consumed")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Grid3D):
        return Node(x.data)
    return Node(np.asarray(x))


constant = as_node


def _make(value, parents: Sequence[Node], backward_fn) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True)
    return Node(value)


def backward(loss: Node) -> None:
    """Populate adjoints of every node reachable from the scalar ``loss``.

    Leaf adjoints accumulate across calls on different graphs; call
    :meth:`ParamStore.zero_grad` between steps.  Running backward twice on
    the same graph raises.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it or reset adjoints")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if node.parents:
            node._grad = None
    loss._grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is None or node._grad is None:
            continue
        grads = node.backward_fn(node._grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g, dtype=p.value.dtype)
            if g.shape != p.value.shape:
                raise AssertionError(f"adjoint shape {g.shape} != value shape {p.value.shape}")
            p._grad = g.copy() if p._grad is None else p._grad + g


class ParamStore:
    """Named trainable leaves in deterministic insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Node] = OrderedDict()

    def add(self, path: str, value: np.ndarray) -> Node:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        node = Node(np.array(value), requires_grad=True, name=path)
        self._params[path] = node
        return node

    def __getitem__(self, path: str) -> Node:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for node in self._params.values():
            node.zero_grad()

    def num_values(self) -> int:
        return int(np.sum([n.value.size for n in self._params.values()]))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for path, node in self._params.items():
            out.add(path, node.value.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for path, node in self._params.items():
            out.add(path, node.value.copy())
        return out

    def with_node(self, path: str, node: Node) -> "ParamStore":
        """Shallow copy in which ``path`` is backed by ``node``."""
        if path not in self._params:
            raise KeyError(path)
        out = ParamStore()
        out._params = OrderedDict(self._params)
        out._params[path] = node
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {p: n.value for p, n in self._params.items()}


# --- elementwise -----------------------------------------------------------

def _pair(a, b) -> tuple[Node, Node]:
    """Nodes for a binary op; bare Python numbers adopt the other operand's dtype."""
    if isinstance(a, (int, float)) and not isinstance(b, (int, float)):
        b = as_node(b)
        return Node(np.asarray(a, dtype=b.dtype)), b
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_node(a)
        return a, Node(np.asarray(b, dtype=a.dtype))
    return as_node(a), as_node(b)


def _binary_shapes(a: Node, b: Node):
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}; use expand() to broadcast")


def _unbroadcast(g: np.ndarray, node: Node) -> np.ndarray:
    if node.value.ndim == 0 and g.ndim:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes(a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def add_many(xs: Iterable) -> Node:
    xs = [as_node(x) for x in xs]
    for x in xs[1:]:
        _binary_shapes(xs[0], x)
    value = xs[0].value
    for x in xs[1:]:
        value = value + x.value
    return _make(value, xs, lambda g: tuple(_unbroadcast(g, x) for x in xs))


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes(a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes(a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a), _unbroadcast(g * a.value, b)))


def div(a, b) -> Node:
    a, b = _pair(a, b)
    _binary_shapes(a, b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a), _unbroadcast(-g * out / b.value, b)))


def neg(x) -> Node:
    x = as_node(x)
    return _make(-x.value, (x,), lambda g: (-g,))


def scale(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value * c, (x,), lambda g: (g * c,))


def add_scalar(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value + c, (x,), lambda g: (g,))


def square(x) -> Node:
    x = as_node(x)
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sqrt(x) -> Node:
    x = as_node(x)
    out = np.sqrt(x.value)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def clamp_min(x, floor: float) -> Node:
    x = as_node(x)
    keep = x.value >= floor
    return _make(np.where(keep, x.value, floor).astype(x.dtype), (x,), lambda g: (g * keep,))


def leaky_relu(x, alpha: float = 0.2) -> Node:
    x = as_node(x)
    slope = np.where(x.value > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.value * slope, (x,), lambda g: (g * slope,))


def sigmoid(x) -> Node:
    x = as_node(x)
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,))


def elementwise(op: str, *inputs, **kw) -> Node:
    """Dispatch by name: add, mul, leaky_relu, sigmoid, scale."""
    table: dict[str, Callable] = {
        "add": add, "mul": mul, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "scale": scale,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs, **kw)


# --- reductions and shape ----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    x = as_node(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis, keepdims), 1.0 / count)


def astype(x, dtype) -> Node:
    """Cast the value; the adjoint is cast back to the input dtype."""
    x = as_node(x)
    if x.dtype == np.dtype(dtype):
        return x
    return _make(x.value.astype(dtype), (x,), lambda g: (g.astype(x.dtype),))


def reshape(x, shape) -> Node:
    x = as_node(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Node:
    x = as_node(x)
    axes = tuple(reversed(range(x.value.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def expand(x, shape) -> Node:
    """Explicit broadcast (numpy rules); backward sums over broadcast axes."""
    x = as_node(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.value, shape)
    lead = len(shape) - x.value.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (x,), bw)


def concat(xs: Sequence, axis: int = 0) -> Node:
    xs = [as_node(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ValueError(f"cannot concatenate shapes {xs[0].shape} and {x.shape} on axis {axis}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.value for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(xs: Sequence) -> Node:
    """Concatenate (C, D, H, W) volumes along channels, order preserved."""
    return concat(xs, axis=0)


def take(x, index, axis: int = 0) -> Node:
    """Slice ``x`` with a slice object or integer list along ``axis``."""
    x = as_node(x)
    sl = [slice(None)] * x.value.ndim
    sl[axis] = index
    sl = tuple(sl)

    def bw(g):
        out = np.zeros_like(x.value)
        if isinstance(index, slice):
            out[sl] = g
        else:
            np.add.at(out, sl, g)
        return (out,)

    return _make(x.value[sl], (x,), bw)


def pad(x, widths) -> Node:
    x = as_node(x)
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(np.pad(x.value, widths), (x,), lambda g: (g[sl],))


def crop(x, shape) -> Node:
    """Keep the leading corner of ``x`` with the given shape."""
    x = as_node(x)
    sl = tuple(slice(0, n) for n in shape)

    def bw(g):
        out = np.zeros_like(x.value)
        out[sl] = g
        return (out,)

    return _make(x.value[sl], (x,), bw)


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fold(g, like):
        # a 2-D operand broadcast against a batch gets the batch-summed adjoint
        return g.reshape((-1,) + like.shape).sum(axis=0) if g.ndim > like.ndim else g

    return _make(a.value @ b.value, (a, b),
                 lambda g: (fold(g @ np.swapaxes(b.value, -1, -2), a.value),
                            fold(np.swapaxes(a.value, -1, -2) @ g, b.value)))


def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    if x.value.ndim == 0 or x.shape[axis] < 1:
        raise ValueError("softmax needs a non-empty axis")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_lastdim(x) -> Node:
    return softmax(x, axis=-1)


def layer_norm(x, gain, offset, eps: float = 1e-5) -> Node:
    """Normalize each token over its last axis, then apply gain and offset."""
    x, gain, offset = as_node(x), as_node(gain), as_node(offset)
    c = x.shape[-1]
    if gain.shape != (c,) or offset.shape != (c,):
        raise ValueError(f"gain/offset must have shape ({c},)")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + offset.value
    red = tuple(range(x.value.ndim - 1))

    def bw(g):
        dxhat = g * gain.value
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, offset), bw)


def conv3d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Node:
    """Zero-padded 3D cross-correlation of a (Cin, D, H, W) volume."""
    x, kernel = as_node(x), as_node(kernel)
    parents = [x, kernel] + ([as_node(bias)] if bias is not None else [])
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.value.ndim != 5 or kernel.shape[2:] != (k, k, k):
        raise ValueError(f"kernel must be (Cout, Cin, k, k, k), got {kernel.shape}")
    if x.value.ndim != 4 or x.shape[0] != cin:
        raise ValueError(f"input has shape {x.shape}, kernel expects {cin} channels")
    if bias is not None and parents[2].shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")
    dims = x.shape[1:]
    odims = tuple((n + 2 * pad - k) // stride + 1 for n in dims)
    if min(odims) < 1:
        raise ValueError(f"non-positive output dims {odims}")
    w2 = kernel.value.reshape(cout, -1)

    if k == 1 and stride == 1 and pad == 0:
        cols = x.value.reshape(cin, -1)
    else:
        xp = np.pad(x.value, ((0, 0),) + ((pad, pad),) * 3) if pad else x.value
        win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
        win = win[:, ::stride, ::stride, ::stride][:, :odims[0], :odims[1], :odims[2]]
        cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, -1)
    out = w2 @ cols
    if bias is not None:
        out += parents[2].value[:, None]
    out = out.reshape((cout,) + odims)

    def bw(g):
        g2 = g.reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=1) if bias is not None else None
        dx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if k == 1 and stride == 1 and pad == 0:
                dx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape((cin, k, k, k) + odims)
                pdims = tuple(n + 2 * pad for n in dims)
                dxp = np.zeros((cin,) + pdims, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            dxp[:, i:i + stride * odims[0]:stride,
                                j:j + stride * odims[1]:stride,
                                l:l + stride * odims[2]:stride] += dcols[:, i, j, l]
                dx = dxp[:, pad:pad + dims[0], pad:pad + dims[1], pad:pad + dims[2]]
        return (dx, dw, db) if bias is not None else (dx, dw)

    return _make(out, parents, bw)


# --- resolution changes ------------------------------------------------------

def resize(x, target) -> Node:
    """Align-corners trilinear resize of a (C, D, H, W) node."""
    x = as_node(x)
    target = tuple(int(t) for t in target)
    if target == x.shape[1:]:
        return x
    mats = [None if s == d else interp_matrix(s, d, x.dtype) for s, d in zip(x.shape[1:], target)]
    out = x.value
    for axis, d in enumerate(target):
        out = lerp_along_axis(out, d, axis + 1)

    def bw(g):
        for axis, m in enumerate(mats):
            if m is not None:
                g = apply_along_axis(m.T, g, axis + 1)
        return (g,)

    return _make(out, (x,), bw)


def avg_pool(x, target) -> Node:
    """Mean over non-overlapping blocks so the spatial dims become ``target``."""
    x = as_node(x)
    target = tuple(int(t) for t in target)
    dims = x.shape[1:]
    if any(s % t for s, t in zip(dims, target)):
        raise ValueError(f"cannot pool {dims} to {target}: dims not divisible")
    if target == dims:
        return x
    c = x.shape[0]
    f = [s // t for s, t in zip(dims, target)]
    blocks = x.value.reshape(c, target[0], f[0], target[1], f[1], target[2], f[2])
    out = blocks.mean(axis=(2, 4, 6))
    n = f[0] * f[1] * f[2]

    def bw(g):
        g = g[:, :, None, :, None, :, None] / n
        return (np.broadcast_to(g, blocks.shape).reshape(x.shape),)

    return _make(out, (x,), bw)


# --- verification -------------------------------------------------------------

def grad_check(f: Callable[[Node], Node], x, eps=1e-6, dtype=np.float64,
               coords: Sequence[tuple] | None = None, relative_to: str = "entry") -> float:
    """Largest relative disagreement between backward and central differences.

    ``f`` maps a leaf node to a scalar node and must accept either float32
    or float64 inputs.  The adjoint is computed at ``dtype``; the finite
    differences are always taken in float64 so their own rounding does not
    swamp a 32-bit comparison.  ``coords`` restricts the check to a subset
    of coordinates (default: all of them).

    ``eps`` may be a sequence of steps; each coordinate then keeps the step
    that agrees best.  Piecewise-linear operations (trilinear sampling,
    leaky ReLU) make a loss smooth only between kinks, and a ladder of
    steps finds one that stays inside the current piece without drowning
    in rounding.  ``relative_to="entry"`` divides each error by
    ``|g_ad| + |g_fd|`` of that entry; ``"max"`` divides by the largest
    such sum over the checked coordinates, which is the meaningful scale
    when many entries are orders of magnitude below the rest.
    """
    steps = [float(e) for e in np.atleast_1d(eps)]
    if not steps or not all(1e-8 <= e <= 1e-2 for e in steps):
        raise ValueError("eps must lie in [1e-8, 1e-2]")
    if relative_to not in ("entry", "max"):
        raise ValueError(f"relative_to must be 'entry' or 'max', got {relative_to!r}")
    base = np.asarray(x.data if isinstance(x, Grid3D) else x, dtype=np.float64)
    leaf = Node(base.astype(dtype), requires_grad=True)
    out = f(leaf)
    backward(out)
    g_ad = leaf.grad.astype(np.float64)

    if coords is None:
        coords = list(np.ndindex(base.shape))
    diffs, mags = [], []
    for idx in coords:
        idx = tuple(idx)
        best = None
        for e in steps:
            xp = base.copy()
            xp[idx] += e
            fp = float(f(Node(xp)).value)
            xp[idx] -= 2 * e
            fm = float(f(Node(xp)).value)
            g_fd = (fp - fm) / (2 * e)
            cand = (abs(g_ad[idx] - g_fd), abs(g_ad[idx]) + abs(g_fd))
            if best is None or cand[0] < best[0]:
                best = cand
        diffs.append(best[0])
        mags.append(best[1])
    diffs, mags = np.asarray(diffs), np.asarray(mags)
    if diffs.size == 0:
        return 0.0
    if relative_to == "max":
        return float(diffs.max() / max(1e-8, mags.max()))
    return float(np.max(diffs / np.maximum(1e-8, mags)))
