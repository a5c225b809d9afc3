"""Volumetric array types and the resampling primitives everything else uses.

Arrays are stored channel-first as ``(C, D, H, W)``.  Displacements are in
voxel units of the grid they live on, with channel ``k`` holding the
displacement along spatial axis ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Grid3D",
    "LabelMap",
    "LandmarkSet",
    "displacement_field",
    "trilinear_sample",
    "resize_trilinear",
    "avg_pool_to",
    "interp_matrix",
    "apply_along_axis",
]

Dims = tuple[int, int, int]


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in np.broadcast_to(np.asarray(spacing, float), (3,)))
    if not all(s > 0 for s in sp):
        raise ValueError(f"spacing must be strictly positive, got {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Grid3D:
    """Multi-channel volume with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"expected (C, D, H, W) data, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape[1:])  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Grid3D":
        return Grid3D(data, self.spacing)

    def astype(self, dtype) -> "Grid3D":
        return Grid3D(self.data.astype(dtype), self.spacing)

    def __repr__(self):
        return f"Grid3D(channels={self.channels}, dims={self.dims}, dtype={self.data.dtype})"


def displacement_field(data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Grid3D:
    """Build a 3-channel Grid3D, checking the channel count."""
    g = Grid3D(data, spacing)
    if g.channels != 3:
        raise ValueError(f"displacement field needs 3 channels, got {g.channels}")
    return g


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    labels: tuple[int, ...] | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label maps are 3D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(data == np.round(data)):
                raise ValueError("label values must be integers")
        data = data.astype(np.int32)
        if data.size and data.min() < 0:
            raise ValueError("label values must be non-negative")
        present = tuple(int(v) for v in np.unique(data))
        labels = present if self.labels is None else tuple(sorted({0, *map(int, self.labels)}))
        if not set(present) <= set(labels):
            raise ValueError(f"labels {sorted(set(present) - set(labels))} outside declared set")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> Dims:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def structures(self) -> tuple[int, ...]:
        return tuple(v for v in self.labels if v != 0)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: Dims | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        if self.dims is not None:
            hi = np.asarray(self.dims) - 1
            if np.any(pts < 0) or np.any(pts > hi):
                raise ValueError("landmark outside the volume")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    def __len__(self):
        return len(self.points)


def trilinear_sample(g: Grid3D, p: Sequence[float]) -> np.ndarray:
    """Per-channel trilinear interpolation at ``p = (z, y, x)``, clamped to the edge."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"expected a finite (z, y, x) point, got {p!r}")
    out = np.zeros(g.channels, dtype=np.float64)
    idx, wts = [], []
    for axis in range(3):
        n = g.dims[axis]
        c = min(max(p[axis], 0.0), n - 1.0)
        i0 = min(int(np.floor(c)), max(n - 2, 0))
        f = c - i0
        idx.append((i0, min(i0 + 1, n - 1)))
        wts.append((1.0 - f, f))
    for a in range(2):
        for b in range(2):
            for c in range(2):
                w = wts[0][a] * wts[1][b] * wts[2][c]
                if w:
                    out += w * g.data[:, idx[0][a], idx[1][b], idx[2][c]]
    return out


def interp_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (dst, src)."""
    mat = np.zeros((dst, src), dtype=dtype)
    if src == 1 or dst == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    f = pos - i0
    rows = np.arange(dst)
    mat[rows, i0] += 1.0 - f
    mat[rows, i0 + 1] += f
    return mat


def lerp_along_axis(x: np.ndarray, dst: int, axis: int) -> np.ndarray:
    """Align-corners linear resampling of ``x`` to ``dst`` samples along ``axis``.

    Same map as :func:`interp_matrix`, evaluated as two-sided lerps so that
    constants and lattice points come through bit-exact.
    """
    src = x.shape[axis]
    if src == dst:
        return x
    if src == 1 or dst == 1:
        return np.repeat(np.take(x, [0], axis=axis), dst, axis=axis)
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(np.floor(pos).astype(int), src - 2)
    shape = [1] * x.ndim
    shape[axis] = dst
    f = (pos - i0).astype(x.dtype).reshape(shape)
    lo, hi = np.take(x, i0, axis=axis), np.take(x, i0 + 1, axis=axis)
    return np.where(f >= 0.5, hi - (1 - f) * (hi - lo), lo + f * (hi - lo))


def apply_along_axis(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``mat`` (new, old) against ``x`` along ``axis``."""
    out = np.tensordot(mat, x, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def _check_target(target) -> Dims:
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target}")
    return target  # type: ignore[return-value]


def resize_trilinear(g: Grid3D, target) -> Grid3D:
    target = _check_target(target)
    if target == g.dims:
        return g.with_data(g.data.copy())
    out = g.data
    for axis, d in enumerate(target):
        out = lerp_along_axis(out, d, axis + 1)
    scale = np.asarray(g.dims) / np.asarray(target)
    return Grid3D(out.astype(g.data.dtype), tuple(np.asarray(g.spacing) * scale))


def avg_pool_to(g: Grid3D, target) -> Grid3D:
    target = _check_target(target)
    if any(s % t for s, t in zip(g.dims, target)):
        raise ValueError(f"cannot pool {g.dims} to {target}: dims not divisible")
    c = g.channels
    f = [s // t for s, t in zip(g.dims, target)]
    blocks = g.data.reshape(c, target[0], f[0], target[1], f[1], target[2], f[2])
    out = blocks.mean(axis=(2, 4, 6), dtype=np.float64).astype(g.data.dtype)
    return Grid3D(out, tuple(np.asarray(g.spacing) * f))
