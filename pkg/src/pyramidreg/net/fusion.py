"""Multi-scale fusion: every pyramid level of both streams, rescaled and multiplied together."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore
from .layers import add_conv, conv


def build(store: ParamStore, rng, channels=(8, 16, 32, 64), width: int = 8, dtype=np.float32):
    for i in range(1, len(channels) + 1):
        for k, c in enumerate(channels, start=1):
            add_conv(store, rng, f"msfm.L{i}.reduce_f{k}", c, width, 1, dtype=dtype)
            add_conv(store, rng, f"msfm.L{i}.reduce_m{k}", c, width, 1, dtype=dtype)
        add_conv(store, rng, f"msfm.L{i}.fuse", width, width, 3, dtype=dtype)


def rescale(x: Node, target) -> Node:
    """Interpolate up when smaller than ``target``, pool down when larger."""
    dims = x.shape[1:]
    if dims == tuple(target):
        return x
    if all(d <= t for d, t in zip(dims, target)):
        return ad.resize(x, target)
    return ad.avg_pool(x, target)


def msfm(p: ParamStore, F: list[Node], M: list[Node], level: int) -> Node:
    """Fused features ``C_level`` with the dims of ``F[level - 1]``."""
    target = F[level - 1].shape[1:]
    maps = []
    for prefix, feats in (("f", F), ("m", M)):
        for k, feat in enumerate(feats, start=1):
            maps.append(rescale(conv(p, f"msfm.L{level}.reduce_{prefix}{k}", feat), target))
    prod = maps[0]
    for m in maps[1:]:
        prod = ad.mul(prod, m)
    return conv(p, f"msfm.L{level}.fuse", prod)
