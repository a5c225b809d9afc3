"""Shared-weight pyramid encoder: four stride-2 blocks, channels doubling per level."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore
from .layers import add_conv, conv


def build(store: ParamStore, rng, channels=(8, 16, 32, 64), in_channels: int = 1, dtype=np.float32):
    cin = in_channels
    for i, c in enumerate(channels, start=1):
        add_conv(store, rng, f"encoder.block{i}.down", cin, c, 3, dtype=dtype)
        add_conv(store, rng, f"encoder.block{i}.conv", c, c, 3, dtype=dtype)
        cin = c


def encode(p: ParamStore, img, levels: int = 4) -> list[Node]:
    """Return ``[F1, F2, F3, F4]``; F1 sits at half the input resolution."""
    x = ad.as_node(img)
    if x.value.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if any(n % 2 ** levels for n in x.shape[1:]):
        raise ValueError(f"input dims {x.shape[1:]} must be divisible by {2 ** levels}")
    feats = []
    for i in range(1, levels + 1):
        x = ad.leaky_relu(conv(p, f"encoder.block{i}.down", x, stride=2))
        x = ad.leaky_relu(conv(p, f"encoder.block{i}.conv", x))
        feats.append(x)
    return feats
