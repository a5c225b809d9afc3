"""Training objective: local NCC similarity plus a gradient-smoothness penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node
from .grid import apply_along_axis
from .warp import warp_by_field

__all__ = ["LossConfig", "box_sum", "local_ncc", "sim_loss", "grad_penalty", "total_loss", "LossTerms"]


@dataclass(frozen=True)
class LossConfig:
    window: int = 9
    lam: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be a positive odd integer, got {self.window}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _band(n: int, radius: int, dtype) -> np.ndarray:
    i = np.arange(n)
    return (np.abs(i[:, None] - i[None, :]) <= radius).astype(dtype)


def box_sum(x, window: int) -> Node:
    """Zero-padded sums over the ``window``^3 neighbourhood of every voxel."""
    x = as_node(x)
    r = window // 2
    mats = [_band(n, r, x.dtype) for n in x.shape[1:]]

    def apply(v):
        for axis, m in enumerate(mats):
            v = apply_along_axis(m, v, axis + 1)
        return v

    # the band matrices are symmetric, so the adjoint is the same filter
    return ad._make(apply(x.value), (x,), lambda g: (apply(g),))


def _ncc_map(fixed: Node, warped: Node, window: int, eps: float) -> Node:
    if fixed.shape != warped.shape:
        raise ValueError(f"image shapes differ: {fixed.shape} vs {warped.shape}")
    if fixed.value.ndim != 4 or fixed.shape[0] != 1:
        raise ValueError(f"NCC expects single-channel volumes, got {fixed.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"NCC window must be a positive odd integer, got {window}")
    dtype = np.result_type(fixed.dtype, warped.dtype)
    count = box_sum(np.ones(fixed.shape, dtype=dtype), window).value
    inv_n = 1.0 / count

    mu_f = ad.mul(box_sum(fixed, window), inv_n)
    mu_w = ad.mul(box_sum(warped, window), inv_n)
    e_ff = ad.mul(box_sum(ad.square(fixed), window), inv_n)
    e_ww = ad.mul(box_sum(ad.square(warped), window), inv_n)
    e_fw = ad.mul(box_sum(ad.mul(fixed, warped), window), inv_n)

    cov = ad.sub(e_fw, ad.mul(mu_f, mu_w))
    var_f = ad.clamp_min(ad.sub(e_ff, ad.square(mu_f)), 0.0)
    var_w = ad.clamp_min(ad.sub(e_ww, ad.square(mu_w)), 0.0)
    denom = ad.sqrt(ad.clamp_min(ad.mul(var_f, var_w), eps * eps))
    return ad.div(cov, denom)


def local_ncc(fixed, warped, window: int = 9, eps: float = 1e-5):
    """Mean over voxel-centred windows of the local correlation coefficient.

    Border windows are truncated (true element counts).  ``sigma_f * sigma_w``
    is floored at ``eps`` so flat windows cannot blow up.
    """
    out = ad.mean(_ncc_map(as_node(fixed), as_node(warped), window, eps))
    return out if isinstance(fixed, Node) or isinstance(warped, Node) else float(out.value)


def sim_loss(fixed, warped, window: int = 9, eps: float = 1e-5):
    ncc = local_ncc(as_node(fixed), as_node(warped), window, eps)
    out = ad.sub(1.0, ncc)
    return out if isinstance(fixed, Node) or isinstance(warped, Node) else float(out.value)


def grad_penalty(phi):
    """Sum over axes of the mean squared forward difference (zero past the far edge)."""
    node = as_node(phi)
    if node.value.ndim != 4:
        raise ValueError(f"expected a (C, D, H, W) field, got {node.shape}")
    total = None
    for axis in range(1, 4):
        n = node.shape[axis]
        if n < 2:
            continue
        hi = ad.take(node, slice(1, n), axis)
        lo = ad.take(node, slice(0, n - 1), axis)
        term = ad.scale(ad.sum(ad.square(ad.sub(hi, lo))), 1.0 / node.value.size)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.Node(np.zeros((), dtype=node.dtype))
    return total if isinstance(phi, Node) else float(total.value)


@dataclass
class LossTerms:
    total: Node
    sim: Node
    reg: Node


def total_loss(fixed, moving, phi, cfg: LossConfig | None = None) -> LossTerms:
    """Similarity of the warped moving image to ``fixed`` plus ``lam`` times the smoothness penalty.

    Both terms are accumulated in float64.  At a perfect match the NCC
    gradient is zero, and float32 roundoff in its place would be magnified
    by Adam's per-coordinate normalisation into full-size steps.
    """
    cfg = cfg or LossConfig()
    fixed, moving, phi = as_node(fixed), as_node(moving), as_node(phi)
    warped = ad.astype(warp_by_field(moving, phi), np.float64)
    fixed = ad.astype(fixed, np.float64)
    phi = ad.astype(phi, np.float64)
    sim = sim_loss(fixed, warped, cfg.window, cfg.eps)
    reg = grad_penalty(phi)
    return LossTerms(ad.add(sim, ad.scale(reg, cfg.lam)), sim, reg)
