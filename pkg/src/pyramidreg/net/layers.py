"""Parameter creation and the small building blocks shared by the network parts."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore


def add_conv(store: ParamStore, rng: np.random.Generator, path: str, cin: int, cout: int,
             k: int = 3, zero: bool = False, dtype=np.float32):
    shape = (cout, cin, k, k, k)
    if zero:
        w = np.zeros(shape)
        b = np.zeros(cout)
    else:
        bound = 1.0 / np.sqrt(cin * k ** 3)
        w = rng.uniform(-bound, bound, shape)
        b = rng.uniform(-bound, bound, cout)
    store.add(f"{path}.weight", w.astype(dtype))
    store.add(f"{path}.bias", b.astype(dtype))


def add_linear(store: ParamStore, rng: np.random.Generator, path: str, cin: int, cout: int,
               dtype=np.float32):
    bound = 1.0 / np.sqrt(cin)
    store.add(f"{path}.weight", rng.uniform(-bound, bound, (cin, cout)).astype(dtype))
    store.add(f"{path}.bias", rng.uniform(-bound, bound, cout).astype(dtype))


def add_norm(store: ParamStore, path: str, c: int, dtype=np.float32):
    store.add(f"{path}.gain", np.ones(c, dtype=dtype))
    store.add(f"{path}.offset", np.zeros(c, dtype=dtype))


def add_resblock(store: ParamStore, rng, path: str, c: int, dtype=np.float32):
    add_conv(store, rng, f"{path}.conv1", c, c, 3, dtype=dtype)
    add_conv(store, rng, f"{path}.conv2", c, c, 3, dtype=dtype)


def conv(p: ParamStore, path: str, x, stride: int = 1) -> Node:
    w = p[f"{path}.weight"]
    k = w.shape[2]
    return ad.conv3d(x, w, p[f"{path}.bias"], stride=stride, pad=k // 2)


def linear(p: ParamStore, path: str, x: Node) -> Node:
    """Affine map on the last axis of a (..., C) token array."""
    y = ad.matmul(x, p[f"{path}.weight"])
    return ad.add(y, ad.expand(p[f"{path}.bias"], y.shape))


def norm(p: ParamStore, path: str, tokens: Node, eps: float = 1e-5) -> Node:
    return ad.layer_norm(tokens, p[f"{path}.gain"], p[f"{path}.offset"], eps)


def resblock(p: ParamStore, path: str, x: Node) -> Node:
    h = ad.leaky_relu(conv(p, f"{path}.conv1", x))
    return ad.add(x, conv(p, f"{path}.conv2", h))


def to_tokens(x: Node) -> Node:
    """(C, D, H, W) -> (N, C)."""
    c = x.shape[0]
    return ad.transpose(ad.reshape(x, (c, -1)))


def from_tokens(t: Node, dims) -> Node:
    """(N, C) -> (C, D, H, W)."""
    return ad.reshape(ad.transpose(t), (t.shape[1],) + tuple(dims))
