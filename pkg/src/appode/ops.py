"""Image-shaped differentiable kernels on single C x H x W tensors (no batch axis)."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, matmul, reshape, softmax, transpose


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give bit-identical draws."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _offsets(k: int):
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def conv2d_circular(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with wrap-around padding.

    ``out[c, y, x] = b[c] + sum_i,dy,dx x[i, (y+dy) % H, (x+dx) % W] * w[c, i, dy+r, dx+r]``
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d_circular expects C x H x W input and 4-d kernel, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, kin, k, k2 = w.shape
    if kin != cin:
        raise ValueError(f"kernel expects {kin} input channels, input has {cin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if h < 1 or wd < 1:
        raise ValueError("empty spatial extent")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")

    xd = x.data
    offs = _offsets(k)
    if k == 1:
        cols = xd[:, None]
    else:
        cols = np.stack([np.roll(xd, (-dy, -dx), axis=(1, 2)) for dy, dx in offs], axis=1)
    if stride > 1:
        cols = cols[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    cols2 = cols.reshape(cin * k * k, ho * wo)
    w2 = w.data.reshape(cout, cin * k * k)
    out = w2 @ cols2
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(cout, ho, wo)

    def bw(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gb = g2.sum(axis=1) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, k * k, ho, wo)
            if stride > 1:
                full = np.zeros((cin, k * k, h, wd), dtype=gcols.dtype)
                full[:, :, ::stride, ::stride] = gcols
                gcols = full
            if k == 1:
                gx = gcols[:, 0]
            else:
                gx = np.zeros_like(xd)
                for j, (dy, dx) in enumerate(offs):
                    gx += np.roll(gcols[:, j], (dy, dx), axis=(1, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, bw)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Standardize each group of channels to zero mean / unit variance."""
    x = as_tensor(x)
    c = x.shape[0]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    shape = x.shape
    xg = x.data.reshape(groups, -1)
    n = xg.shape[1]
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv

    def bw(g):
        gg = g.reshape(groups, -1)
        gx = inv / n * (n * gg - gg.sum(axis=1, keepdims=True) - xhat * (gg * xhat).sum(axis=1, keepdims=True))
        return (gx.reshape(shape).astype(x.dtype),)

    return Tensor._make(xhat.reshape(shape).astype(x.dtype), (x,), bw)


def self_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int,
    head_dim: int,
) -> Tensor:
    """Multi-head dot-product attention over spatial sites, plus residual.

    Projection shapes: ``wq, wk, wv`` are ``C x heads*head_dim``; ``wo`` is
    ``heads*head_dim x C``; ``bo`` is ``C``.  No positional encoding, so the
    result is equivariant to any permutation of the H*W sites.
    """
    c, h, w = x.shape
    inner = heads * head_dim
    for name, p, want in (("wq", wq, (c, inner)), ("wk", wk, (c, inner)), ("wv", wv, (c, inner)), ("wo", wo, (inner, c))):
        if p.shape != want:
            raise ValueError(f"{name} has shape {p.shape}, expected {want}")
    n = h * w
    tokens = transpose(reshape(x, (c, n)), (1, 0))  # n x c

    def split(t):
        return transpose(reshape(t, (n, heads, head_dim)), (1, 0, 2))  # heads x n x d

    q = split(matmul(tokens, wq))
    k = split(matmul(tokens, wk))
    v = split(matmul(tokens, wv))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(attn, v), (1, 0, 2)), (n, inner))
    out = matmul(mixed, wo) + bo
    return x + reshape(transpose(out, (1, 0)), (c, h, w))


def downsample2x(x: Tensor) -> Tensor:
    """Halve H and W by averaging 2x2 blocks (bilinear sampling at half-pixel centres)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x needs even spatial size, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return Tensor._make(out.astype(x.dtype), (x,), bw)


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    prev = np.roll(a, 1, axis=axis)
    nxt = np.roll(a, -1, axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return out.reshape(shape)


def _up_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] //= 2
    shape.insert(axis + 1, 2)
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    return 0.75 * (ge + go) + 0.25 * np.roll(ge, -1, axis=axis) + 0.25 * np.roll(go, 1, axis=axis)


def upsample2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation and wrap-around borders."""
    out = _up_axis(_up_axis(x.data, 1), 2)

    def bw(g):
        return (_up_axis_T(_up_axis_T(g, 2), 1).astype(x.dtype),)

    return Tensor._make(out.astype(x.dtype), (x,), bw)
