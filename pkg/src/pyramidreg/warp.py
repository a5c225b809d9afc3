"""Warping, field resampling and scaling-and-squaring integration.

All functions accept :class:`~pyramidreg.grid.Grid3D`, raw ``(C, D, H, W)``
arrays or autodiff :class:`~pyramidreg.autodiff.Node` objects and return the
same kind they were given (the first argument decides).  Node inputs are
differentiated with respect to both the sampled values and the field.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node
from .grid import Grid3D

__all__ = [
    "sample",
    "identity_coords",
    "warp_by_field",
    "resample_field",
    "upsample_field",
    "integrate_velocity",
    "refine",
    "compose",
]

DEFAULT_STEPS = 7


def _like(out: Node, ref, spacing=None):
    if isinstance(ref, Node):
        return out
    if isinstance(ref, Grid3D):
        return Grid3D(out.value, ref.spacing if spacing is None else spacing)
    return out.value


def _check_field(phi: Node):
    if phi.value.ndim != 4 or phi.shape[0] != 3:
        raise ValueError(f"displacement field must be (3, D, H, W), got {phi.shape}")


def identity_coords(dims, dtype=np.float32) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=dtype) for n in dims], indexing="ij"))


def _axis_weights(c: np.ndarray, n: int):
    """Lower index, fractional offset and a mask of where d/dc is non-zero."""
    if n == 1:
        zero = np.zeros(c.shape, dtype=np.intp)
        return zero, np.zeros_like(c), np.zeros(c.shape, dtype=bool)
    live = (c >= 0) & (c <= n - 1)
    cc = np.clip(c, 0, n - 1)
    i0 = np.minimum(np.floor(cc).astype(np.intp), n - 2)
    return i0, cc - i0, live


def sample(values, coords) -> Node:
    """Trilinear sampling of ``values`` (C, D, H, W) at ``coords`` (3, ...).

    Coordinates are voxel indices; points outside the volume are clamped
    to the nearest edge, which also zeroes their coordinate derivative.
    """
    values, coords = as_node(values), as_node(coords)
    if values.value.ndim != 4 or coords.shape[0] != 3:
        raise ValueError(f"bad sample shapes {values.shape} / {coords.shape}")
    v = values.value
    C = v.shape[0]
    dims = v.shape[1:]
    out_shape = coords.shape[1:]
    pts = coords.value.reshape(3, -1)
    if not np.all(np.isfinite(pts)):
        raise FloatingPointError("non-finite sample coordinates (the field has overflowed)")

    axes = [_axis_weights(pts[a], dims[a]) for a in range(3)]
    strides = (dims[1] * dims[2], dims[2], 1)
    flat = v.reshape(C, -1)
    corners = []
    for bits in np.ndindex(2, 2, 2):
        lin = np.zeros(pts.shape[1], dtype=np.intp)
        ws = []
        for a, bit in enumerate(bits):
            i0, f, _ = axes[a]
            idx = np.minimum(i0 + bit, dims[a] - 1)
            lin += idx * strides[a]
            ws.append(f if bit else 1.0 - f)
        corners.append((bits, lin, ws))

    # nested two-sided lerps, innermost axis first: exact at both end points
    # and wherever the corners agree, so constants and lattice points survive
    dtype = np.result_type(v.dtype, pts.dtype)
    vals = [flat[:, lin].astype(dtype, copy=False) for _, lin, _ in corners]
    for a in (2, 1, 0):
        f = axes[a][1].astype(dtype, copy=False)
        upper = f >= 0.5
        vals = [np.where(upper, hi - (1 - f) * (hi - lo), lo + f * (hi - lo))
                for lo, hi in zip(vals[0::2], vals[1::2])]
    out = vals[0]

    def bw(g):
        g = g.reshape(C, -1)
        dv = dc = None
        if values.requires_grad:
            n_vox = flat.shape[1]
            acc = np.zeros(C * n_vox, dtype=np.float64)
            offs = (np.arange(C) * n_vox)[:, None]
            for _, lin, ws in corners:
                w = ws[0] * ws[1] * ws[2]
                acc += np.bincount((offs + lin).ravel(), weights=(g * w).ravel(), minlength=C * n_vox)
            dv = acc.reshape(v.shape)
        if coords.requires_grad:
            dc = np.zeros_like(pts)
            for bits, lin, ws in corners:
                gv = (g * flat[:, lin]).sum(axis=0)
                for a in range(3):
                    others = ws[(a + 1) % 3] * ws[(a + 2) % 3]
                    sign = 1.0 if bits[a] else -1.0
                    dc[a] += sign * others * gv
            for a in range(3):
                dc[a] *= axes[a][2]
            dc = dc.reshape(coords.shape)
        return dv, dc

    return ad._make(out.reshape((C,) + out_shape), (values, coords), bw)


def _warp(g: Node, phi: Node) -> Node:
    _check_field(phi)
    if g.shape[1:] != phi.shape[1:]:
        raise ValueError(f"grid dims {g.shape[1:]} differ from field dims {phi.shape[1:]}")
    base = identity_coords(phi.shape[1:], phi.dtype)
    return sample(g, ad.add(phi, base))


def warp_by_field(g, phi):
    """``out(x) = g(x + phi(x))`` per channel."""
    return _like(_warp(as_node(g), as_node(phi)), g)


def resample_field(a, b):
    """``a(x + b(x))`` channel-wise.  Pure resampling: callers add ``b`` if they need composition."""
    na = as_node(a)
    _check_field(na)
    return _like(_warp(na, as_node(b)), a)


def compose(a, b):
    """Displacement of the map ``x -> x + b(x) + a(x + b(x))``."""
    nb = as_node(b)
    return _like(ad.add(_warp(as_node(a), nb), nb), a)


def _upsample(phi: Node, alpha: float, target=None) -> Node:
    _check_field(phi)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if target is None:
        target = tuple(2 * n for n in phi.shape[1:])
    return ad.scale(ad.resize(phi, target), alpha)


def upsample_field(phi, alpha: float = 2.0, target=None):
    """Double the spatial dims (or resize to ``target``) and scale displacements by ``alpha``."""
    out = _upsample(as_node(phi), alpha, target)
    spacing = None
    if isinstance(phi, Grid3D):
        spacing = tuple(np.asarray(phi.spacing) * np.asarray(phi.dims) / np.asarray(out.shape[1:]))
    return _like(out, phi, spacing)


def _integrate(v: Node, steps: int) -> Node:
    _check_field(v)
    if steps < 0:
        raise ValueError("steps must be >= 0")
    u = ad.scale(v, 1.0 / 2 ** steps)
    for _ in range(steps):
        u = ad.add(u, _warp(u, u))
    return u


def integrate_velocity(v, steps: int = DEFAULT_STEPS):
    """Scaling and squaring: halve ``steps`` times, then self-compose ``steps`` times."""
    return _like(_integrate(as_node(v), steps), v)


def _refine(coarse: Node, fine: Node, alpha: float = 2.0) -> Node:
    _check_field(coarse)
    _check_field(fine)
    want = tuple(int(round(alpha * n)) for n in coarse.shape[1:])
    if fine.shape[1:] != want:
        raise ValueError(f"fine field dims {fine.shape[1:]} are not {alpha}x coarse dims {coarse.shape[1:]}")
    up = _upsample(coarse, alpha, want)
    return ad.add(_warp(up, fine), fine)


def refine(coarse, fine, alpha: float = 2.0):
    """Coarse-to-fine update: upsampled coarse field resampled by ``fine``, plus ``fine``."""
    return _like(_refine(as_node(coarse), as_node(fine), alpha), fine)
