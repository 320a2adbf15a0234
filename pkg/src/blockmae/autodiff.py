"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every operation records its parents and a backward closure on the output
tensor; `backward()` walks the graph once in reverse topological order.
The primitive set is exactly what a pre-norm ViT with masked-token decoders
needs: matmul, elementwise arithmetic, softmax, parameter-free layer norm,
GELU, shape ops, batched token gather/scatter, reductions, stop_gradient.

Values are float32 by default; reductions accumulate in float64 before
casting back. Graphs are built functionally, so they are DAGs by
construction; the traversal still guards against cycles.
"""

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Tensor:
    """A dense real tensor plus the graph node that produced it.

    `_parents` holds references only to inputs on a requires-grad path,
    `_backward` is the closure holding whatever activations the backward
    rule needs. Leaf tensors created with requires_grad=True start with a
    zero gradient so untouched parameters read as exactly zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op="leaf"):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif _op == "leaf" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if (requires_grad and _op == "leaf") else None
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Populate dSelf/dAncestor for every requires-grad ancestor.

        Rejects non-scalar roots; each node's closure runs exactly once.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constants of the same dtype
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root):
    """Iterative reverse-topological DFS with a cycle guard."""
    order, state = [], {}  # id -> 1 while on stack, 2 when done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            s = state.get(id(p))
            if s == 1:
                raise RuntimeError("cycle detected in computation graph")
            if s is None:
                state[id(p)] = 1
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
    return order


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, op):
    needing = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(needing), dtype=data.dtype, _parents=needing, _op=op)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))
        out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, b.shape))
        out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _node(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / bd, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * ad / (bd * bd), b.shape))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes.

    Both operands must be at least 2-D.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    out = _node(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            if a.requires_grad:
                ga = np.matmul(g, bd.swapaxes(-1, -2))
                _accum(a, _unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(ad.swapaxes(-1, -2), g)
                _accum(b, _unbroadcast(gb, b.shape))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (x,), "softmax")
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - dot))
        out._backward = bwd
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = _node((xd * phi).astype(xd.dtype, copy=False), (x,), "gelu")
    if out.requires_grad:
        def bwd(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
            _accum(x, g * (phi + xd * pdf))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer norm over the last axis; affine scaling composes on top."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xc * inv).astype(xd.dtype, copy=False)
    out = _node(y, (x,), "layer_norm")
    if out.requires_grad:
        def bwd(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            _accum(x, inv * (g - gm - y * gym))
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = _node(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accum(x, g.reshape(old))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _node(x.data.transpose(axes), (x,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: _accum(x, g.transpose(inv))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    _accum(t, piece)
        out._backward = bwd
    return out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched token selection: x is (B, N, D), idx is (B, M) -> (B, M, D)."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather_rows: got x {x.shape}, idx {idx.shape}")
    binds = np.arange(x.shape[0])[:, None]
    out = _node(x.data[binds, idx], (x,), "gather_rows")
    if out.requires_grad:
        shape = x.shape
        def bwd(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.add.at(gx, (binds, idx), g)
            _accum(x, gx)
        out._backward = bwd
    return out


def scatter_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Write values (B, M, D) into a copy of base (B, N, D) at rows idx (B, M).

    Rows of `base` at idx positions are replaced, so their gradient is cut
    there; everything else flows through unchanged.
    """
    idx = np.asarray(idx)
    if base.ndim != 3 or values.ndim != 3 or idx.shape != values.shape[:2]:
        raise ValueError(
            f"scatter_rows: got base {base.shape}, idx {idx.shape}, values {values.shape}")
    binds = np.arange(base.shape[0])[:, None]
    data = base.data.copy()
    data[binds, idx] = values.data
    out = _node(data, (base, values), "scatter_rows")
    if out.requires_grad:
        def bwd(g):
            if base.requires_grad:
                gb = g.copy()
                gb[binds, idx] = 0.0
                _accum(base, gb)
            if values.requires_grad:
                _accum(values, g[binds, idx])
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions (accumulated in float64)
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    val = x.data.sum(axis=axes, dtype=np.float64).astype(x.dtype)
    out = _node(val, (x,), "sum")
    if out.requires_grad:
        shape = x.shape
        keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
        def bwd(g):
            _accum(x, np.broadcast_to(g.reshape(keep), shape))
        out._backward = bwd
    return out


def tmean(x: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    val = (x.data.sum(axis=axes, dtype=np.float64) / count).astype(x.dtype)
    out = _node(val, (x,), "mean")
    if out.requires_grad:
        shape = x.shape
        keep = tuple(1 if i in axes else s for i, s in enumerate(shape))
        def bwd(g):
            _accum(x, np.broadcast_to(g.reshape(keep), shape) / count)
        out._backward = bwd
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity (the very same array), zero contribution backward."""
    return Tensor(x.data, dtype=x.dtype, _op="stop_gradient")
