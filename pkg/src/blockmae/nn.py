"""Transformer building blocks on top of the autodiff engine.

Modules auto-register parameters and submodules in attribute-assignment
order; `named_parameters` walks that registry depth-first, which fixes the
serialization order used by checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __setattr__(self, name, value):
        entries = self.__dict__.setdefault("_entries", {})
        if isinstance(value, Tensor) and value.requires_grad:
            entries[name] = "param"
        elif isinstance(value, Module):
            entries[name] = "module"
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, kind in self.__dict__.get("_entries", {}).items():
            obj = getattr(self, name)
            path = f"{prefix}{name}"
            if kind == "param":
                yield path, obj
            else:
                yield from obj.named_parameters(prefix=path + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def trunc_normal(shape, std, rng):
    """Normal(0, std) resampled until within +-2 std (ViT init convention)."""
    arr = rng.standard_normal(size=shape)
    bad = np.abs(arr) > 2.0
    while bad.any():
        arr[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(arr) > 2.0
    return (arr * std).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, init_std=0.02):
        self.W = Tensor(trunc_normal((d_in, d_out), init_std, rng),
                        requires_grad=True)
        if bias:
            self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
        else:
            self.b = None

    def forward(self, x):
        y = ad.matmul(x, self.W)
        return ad.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    """Affine layer norm; the normalization itself is the parameter-free primitive."""

    def __init__(self, dim, eps=1e-6):
        self.eps = eps
        self.g = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return ad.add(ad.mul(ad.layer_norm(x, eps=self.eps), self.g), self.b)


class MultiHeadAttention(Module):
    def __init__(self, dim, n_heads, rng):
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x, B, N):
        x = ad.reshape(x, (B, N, self.n_heads, self.head_dim))
        return ad.transpose(x, (0, 2, 1, 3))  # (B, heads, N, head_dim)

    def forward(self, x):
        B, N, D = x.shape
        q = self._split(self.q(x), B, N)
        k = self._split(self.k(x), B, N)
        v = self._split(self.v(x), B, N)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        scores = ad.mul(scores, ad.Tensor(np.float32(1.0 / math.sqrt(self.head_dim))))
        attn = ad.softmax(scores)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, N, D))
        return self.o(out)


class MLP(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm ViT layer: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim, n_heads, rng, mlp_ratio=4.0):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def forward(self, x):
        x = ad.add(x, self.attn(self.ln1(x)))
        x = ad.add(x, self.mlp(self.ln2(x)))
        return x


def _sincos_1d(positions, dim):
    assert dim % 2 == 0
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * omega[None, :]
    enc = np.empty((len(positions), dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles)
    return enc


def sincos_pos_encoding_3d(grid, dim):
    """Fixed factorized sinusoidal encodings for a (t, h, w) token grid.

    The channel budget is split [d_t | d_h | d_w] with d_h = d_w = 2*(dim//6)
    and the remainder on the temporal axis; rows follow the flat (t, h, w)
    row-major token order.
    """
    if dim % 2 != 0 or dim < 6:
        raise ValueError(f"positional encoding dim must be even and >= 6, got {dim}")
    d_h = d_w = 2 * (dim // 6)
    d_t = dim - d_h - d_w
    enc_t = _sincos_1d(np.arange(grid.t_tokens), d_t)
    enc_h = _sincos_1d(np.arange(grid.h_tokens), d_h)
    enc_w = _sincos_1d(np.arange(grid.w_tokens), d_w)
    rows = np.zeros((grid.total_tokens, dim), dtype=np.float64)
    i = 0
    for t in range(grid.t_tokens):
        for h in range(grid.h_tokens):
            for w in range(grid.w_tokens):
                rows[i] = np.concatenate([enc_t[t], enc_h[h], enc_w[w]])
                i += 1
    return rows.astype(np.float32)
