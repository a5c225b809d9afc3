"""Correlation, position attention and the local/global attention block."""
from __future__ import annotations

import itertools

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore
from ..grid import apply_along_axis
from .layers import (add_conv, add_linear, add_norm, add_resblock, conv, from_tokens, linear,
                     norm, resblock, to_tokens)


def _shift_matrix(n: int, offset: int, dtype) -> np.ndarray:
    """Row i selects index clip(i + offset) -- a clamp-to-edge shift."""
    mat = np.zeros((n, n), dtype=dtype)
    mat[np.arange(n), np.clip(np.arange(n) + offset, 0, n - 1)] = 1.0
    return mat


def correlation(F, M, radius: int = 1) -> Node:
    """Channel-averaged inner products of ``F(x)`` with ``M(x + o)`` for o in [-r, r]^3.

    Output channel order is row-major over (oz, oy, ox).
    """
    F, M = ad.as_node(F), ad.as_node(M)
    if F.shape != M.shape or F.value.ndim != 4:
        raise ValueError(f"correlation needs equal (C, D, H, W) shapes, got {F.shape} vs {M.shape}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    C, dims = F.shape[0], F.shape[1:]
    offsets = list(itertools.product(range(-radius, radius + 1), repeat=3))
    idx = [[np.clip(np.arange(n) + o, 0, n - 1) for n, o in zip(dims, off)] for off in offsets]

    def shifted(v, ix):
        return v[:, ix[0]][:, :, ix[1]][:, :, :, ix[2]]

    shifts = [shifted(M.value, ix) for ix in idx]
    out = np.stack([(F.value * s).sum(axis=0) for s in shifts]) / C

    def bw(g):
        dF = dM = None
        if F.requires_grad:
            dF = sum(g[j] * s for j, s in enumerate(shifts)) / C
        if M.requires_grad:
            dM = np.zeros_like(M.value)
            for j, off in enumerate(offsets):
                t = g[j] * F.value / C
                for axis, (n, o) in enumerate(zip(dims, off)):
                    if o:
                        t = apply_along_axis(_shift_matrix(n, o, t.dtype).T, t, axis + 1)
                dM += t
        return dF, dM

    return ad._make(out, (F, M), bw)


# --- position attention -------------------------------------------------------

def build_pam(store: ParamStore, rng, path: str, c: int, dtype=np.float32):
    for name in ("q", "k", "v"):
        add_conv(store, rng, f"{path}.{name}", c, c, 1, dtype=dtype)
    add_resblock(store, rng, f"{path}.res", c, dtype=dtype)


def pam_attention(p: ParamStore, path: str, x: Node) -> Node:
    """The (C, C) attention matrix over flattened spatial descriptors."""
    c = x.shape[0]
    q = ad.reshape(conv(p, f"{path}.q", x), (c, -1))
    k = ad.reshape(conv(p, f"{path}.k", x), (c, -1))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    return ad.softmax(scores)


def pam(p: ParamStore, path: str, x) -> Node:
    x = ad.as_node(x)
    c, dims = x.shape[0], x.shape[1:]
    v = ad.reshape(conv(p, f"{path}.v", x), (c, -1))
    attended = ad.reshape(ad.matmul(pam_attention(p, path, x), v), (c,) + dims)
    return resblock(p, f"{path}.res", attended)


# --- token attention ------------------------------------------------------------

def build_attention(store: ParamStore, rng, path: str, c: int, dtype=np.float32):
    for name in ("q", "k", "v"):
        add_linear(store, rng, f"{path}.{name}", c, c, dtype=dtype)


def attention_weights(p: ParamStore, path: str, tokens: Node) -> Node:
    q = linear(p, f"{path}.q", tokens)
    k = linear(p, f"{path}.k", tokens)
    nd = k.value.ndim
    scores = ad.matmul(q, ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2)))
    return ad.softmax(ad.scale(scores, 1.0 / np.sqrt(k.shape[-1])))


def _attend(p: ParamStore, path: str, tokens: Node) -> Node:
    v = linear(p, f"{path}.v", tokens)
    return ad.add(tokens, ad.matmul(attention_weights(p, path, tokens), v))


def global_attention(p: ParamStore, path: str, tokens) -> Node:
    """Single-head self-attention over (N, C) tokens with a residual connection."""
    tokens = ad.as_node(tokens)
    if tokens.value.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"expected (N, C) tokens, got {tokens.shape}")
    return _attend(p, path, tokens)


def local_attention(p: ParamStore, path: str, x, window=(2, 2, 2)) -> Node:
    """Self-attention restricted to non-overlapping ``window`` volumes of a (C, D, H, W) grid."""
    x = ad.as_node(x)
    c, dims = x.shape[0], x.shape[1:]
    # a window larger than the grid shrinks to the grid instead of attending to padding
    win = tuple(min(int(w), n) for w, n in zip(window, dims))
    padded = tuple(-(-n // w) * w for n, w in zip(dims, win))
    if padded != dims:
        x = ad.pad(x, [(0, 0)] + [(0, P - n) for P, n in zip(padded, dims)])
    nb = [P // w for P, w in zip(padded, win)]
    blocks = ad.reshape(x, (c, nb[0], win[0], nb[1], win[1], nb[2], win[2]))
    blocks = ad.transpose(blocks, (1, 3, 5, 2, 4, 6, 0))
    blocks = ad.reshape(blocks, (nb[0] * nb[1] * nb[2], win[0] * win[1] * win[2], c))
    out = _attend(p, path, blocks)
    out = ad.reshape(out, (nb[0], nb[1], nb[2], win[0], win[1], win[2], c))
    out = ad.transpose(out, (6, 0, 3, 1, 4, 2, 5))
    out = ad.reshape(out, (c,) + padded)
    if padded != dims:
        out = ad.crop(out, (c,) + dims)
    return out


# --- the level-4 block -------------------------------------------------------------

def build_lgam(store: ParamStore, rng, c_feat: int, c_fused: int, radius: int,
               mlp_ratio: int = 2, dtype=np.float32):
    c = c_feat + c_fused + (2 * radius + 1) ** 3
    build_pam(store, rng, "lgam.pam", c, dtype=dtype)
    add_norm(store, "lgam.norm1", c, dtype=dtype)
    build_attention(store, rng, "lgam.ga", c, dtype=dtype)
    add_norm(store, "lgam.norm2", c, dtype=dtype)
    add_linear(store, rng, "lgam.mlp.fc1", c, mlp_ratio * c, dtype=dtype)
    add_linear(store, rng, "lgam.mlp.fc2", mlp_ratio * c, c, dtype=dtype)
    build_attention(store, rng, "lgam.la", c, dtype=dtype)
    add_conv(store, rng, "lgam.flow", c, 3, 3, zero=True, dtype=dtype)


def lgam(p: ParamStore, F4, M4, C4, radius: int = 1, window=(2, 2, 2), eps: float = 1e-5) -> Node:
    """Raw (pre-integration) displacement field at the coarsest level."""
    F4, M4, C4 = ad.as_node(F4), ad.as_node(M4), ad.as_node(C4)
    dims = F4.shape[1:]
    x = ad.concat_channels([F4, C4, correlation(F4, M4, radius)])
    x = pam(p, "lgam.pam", x)
    t = norm(p, "lgam.norm1", to_tokens(x), eps)
    g = global_attention(p, "lgam.ga", t)
    h = ad.leaky_relu(linear(p, "lgam.mlp.fc1", norm(p, "lgam.norm2", g, eps)))
    t = ad.add(t, linear(p, "lgam.mlp.fc2", h))
    x = local_attention(p, "lgam.la", from_tokens(t, dims), window)
    return conv(p, "lgam.flow", x)
