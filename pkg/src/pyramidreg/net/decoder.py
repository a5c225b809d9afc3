"""Per-level decoder: image decomposition, channel-wise attention and field refinement."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node, ParamStore
from ..warp import _integrate, _refine, _upsample, _warp
from .attention import correlation
from .layers import add_conv, add_linear, add_resblock, conv, linear, resblock


def build_idm(store: ParamStore, rng, path: str, cin: int, hidden: int, cout: int | None = None,
              dtype=np.float32):
    add_conv(store, rng, f"{path}.trunk", cin, hidden, 3, dtype=dtype)
    add_conv(store, rng, f"{path}.field", hidden, 3, 3, zero=True, dtype=dtype)
    add_conv(store, rng, f"{path}.feature", hidden, cin if cout is None else cout, 3, dtype=dtype)


def idm(p: ParamStore, path: str, x) -> tuple[Node, Node]:
    """Split a feature volume into a displacement sub-field and a feature map."""
    trunk = ad.leaky_relu(conv(p, f"{path}.trunk", x))
    return conv(p, f"{path}.field", trunk), conv(p, f"{path}.feature", trunk)


def build_cwam(store: ParamStore, rng, path: str, c_feat: int, c_fused: int, c_warp: int,
               width: int, se_ratio: int = 4, dtype=np.float32):
    add_conv(store, rng, f"{path}.align_c", c_fused, width, 1, dtype=dtype)
    add_conv(store, rng, f"{path}.align_w", c_warp, width, 1, dtype=dtype)
    add_conv(store, rng, f"{path}.align_f", c_feat, width, 1, dtype=dtype)
    add_conv(store, rng, f"{path}.mca", 3 * width, 3, 3, dtype=dtype)
    squeeze = max(1, (3 * width) // se_ratio)
    add_linear(store, rng, f"{path}.se.fc1", 3 * width, squeeze, dtype=dtype)
    add_linear(store, rng, f"{path}.se.fc2", squeeze, 3 * width, dtype=dtype)
    add_resblock(store, rng, f"{path}.res", 3 * width, dtype=dtype)
    add_conv(store, rng, f"{path}.flow", 3 * width, 3, 3, zero=True, dtype=dtype)


def importance(p: ParamStore, path: str, aligned: list[Node]) -> Node:
    """Per-voxel softmax weights (3, D, H, W) for the fused, warped and fixed inputs."""
    return ad.softmax(conv(p, f"{path}.mca", ad.concat_channels(aligned)), axis=0)


def cwam(p: ParamStore, path: str, F, C, W) -> Node:
    """Raw displacement field from fixed features, fused features and warped evidence."""
    F, C, W = ad.as_node(F), ad.as_node(C), ad.as_node(W)
    if not F.shape[1:] == C.shape[1:] == W.shape[1:]:
        raise ValueError(f"cwam inputs differ in dims: {F.shape}, {C.shape}, {W.shape}")
    aligned = [conv(p, f"{path}.align_c", C), conv(p, f"{path}.align_w", W),
               conv(p, f"{path}.align_f", F)]
    w = importance(p, path, aligned)
    weighted = [ad.mul(a, ad.expand(ad.take(w, slice(k, k + 1), 0), a.shape))
                for k, a in enumerate(aligned)]
    x = ad.concat_channels(weighted)

    c = x.shape[0]
    squeezed = ad.reshape(ad.mean(x, axis=(1, 2, 3)), (1, c))
    gate = ad.sigmoid(linear(p, f"{path}.se.fc2",
                             ad.leaky_relu(linear(p, f"{path}.se.fc1", squeezed))))
    x = ad.mul(x, ad.expand(ad.reshape(gate, (c, 1, 1, 1)), x.shape))
    x = resblock(p, f"{path}.res", x)
    return conv(p, f"{path}.flow", x)


def build_fifm(store: ParamStore, rng, level: int, c_feat: int, c_fused: int, radius: int,
               idm_hidden: int, width: int, se_ratio: int = 4, dtype=np.float32):
    c_corr = (2 * radius + 1) ** 3
    path = f"fifm.L{level}"
    build_idm(store, rng, f"{path}.idm_w", c_corr, idm_hidden, dtype=dtype)
    # the feature branch is widened to the correlation width so the three maps can be summed
    build_idm(store, rng, f"{path}.idm_f", c_feat, idm_hidden, c_corr, dtype=dtype)
    build_cwam(store, rng, f"{path}.cwam", c_feat, c_fused, c_corr, width, se_ratio, dtype=dtype)


def fifm(p: ParamStore, level: int, F, M, C, phi_coarse, radius: int = 1, steps: int = 7,
         alpha: float = 2.0) -> Node:
    """Refined field at ``level`` given the refined field one level coarser."""
    F, M, C, phi_coarse = (ad.as_node(v) for v in (F, M, C, phi_coarse))
    if F.shape != M.shape or F.shape[1:] != C.shape[1:]:
        raise ValueError(f"level {level} shapes disagree: {F.shape}, {M.shape}, {C.shape}")
    path = f"fifm.L{level}"
    corr = correlation(F, M, radius)
    W = _warp(corr, _upsample(phi_coarse, alpha, F.shape[1:]))
    phi_1, W1 = idm(p, f"{path}.idm_w", W)
    phi_2, W2 = idm(p, f"{path}.idm_f", F)
    Wi1 = _warp(W1, phi_2)
    Wi2 = _warp(W2, phi_1)
    raw = cwam(p, f"{path}.cwam", F, C, ad.add_many([W, Wi1, Wi2]))
    phi = _integrate(raw, steps)
    phi = ad.add_many([phi, _warp(phi_1, phi), _warp(phi_2, phi)])
    return _refine(phi_coarse, phi, alpha)
