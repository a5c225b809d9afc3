"""Registration quality metrics: overlap, surface distance, landmarks, folding."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .grid import Grid3D, LabelMap, LandmarkSet, trilinear_sample

__all__ = [
    "dice",
    "boundary_voxels",
    "hd95",
    "tre",
    "precision_recall",
    "PrecisionRecall",
    "jacobian_determinant",
    "njd",
    "warp_labels",
    "MetricReport",
    "CSV_COLUMNS",
    "map_landmarks",
]

CSV_COLUMNS = ("label", "dsc", "hd95_mm", "precision", "recall")


def _mask(x, label: int) -> np.ndarray:
    data = x.data if isinstance(x, LabelMap) else np.asarray(x)
    return data == label


def _same_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"label maps differ in shape: {a.shape} vs {b.shape}")


def dice(x, y, label: int = 1) -> float:
    """2|X∩Y| / (|X| + |Y|) for voxels carrying ``label``; 1.0 when both are empty."""
    mx, my = _mask(x, label), _mask(y, label)
    _same_dims(mx, my)
    denom = int(mx.sum()) + int(my.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(mx, my).sum()) / denom


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices of mask voxels with a face neighbour outside the mask or the volume."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def hd95(x, y, label: int = 1, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled surface distances in both directions (mm)."""
    mx, my = _mask(x, label), _mask(y, label)
    _same_dims(mx, my)
    if not mx.any() or not my.any():
        raise ValueError(f"label {label} is empty in at least one mask")
    sp = np.asarray(spacing, dtype=np.float64)
    bx = boundary_voxels(mx) * sp
    by = boundary_voxels(my) * sp
    d_xy, _ = cKDTree(by).query(bx)
    d_yx, _ = cKDTree(bx).query(by)
    return float(np.percentile(np.concatenate([d_xy, d_yx]), 95))


def tre(a, b, spacing=None) -> tuple[np.ndarray, float]:
    """Per-landmark Euclidean distances in mm and their mean."""
    pa = a.points if isinstance(a, LandmarkSet) else np.asarray(a, float).reshape(-1, 3)
    pb = b.points if isinstance(b, LandmarkSet) else np.asarray(b, float).reshape(-1, 3)
    if len(pa) != len(pb):
        raise ValueError(f"landmark counts differ: {len(pa)} vs {len(pb)}")
    if spacing is None:
        spacing = a.spacing if isinstance(a, LandmarkSet) else (1.0, 1.0, 1.0)
    d = np.linalg.norm((pa - pb) * np.asarray(spacing, float), axis=1)
    return d, float(d.mean()) if len(d) else 0.0


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    degenerate: bool


def precision_recall(x, y, label: int = 1) -> PrecisionRecall:
    """Voxel-wise precision and recall of ``x`` against reference ``y``."""
    mx, my = _mask(x, label), _mask(y, label)
    _same_dims(mx, my)
    tp = int(np.logical_and(mx, my).sum())
    fp = int(np.logical_and(mx, ~my).sum())
    fn = int(np.logical_and(~mx, my).sum())
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return PrecisionRecall(precision, recall, degenerate)


def _field_array(phi) -> np.ndarray:
    data = phi.data if isinstance(phi, Grid3D) else np.asarray(phi)
    if data.ndim != 4 or data.shape[0] != 3:
        raise ValueError(f"expected a (3, D, H, W) field, got {data.shape}")
    return data.astype(np.float64)


def jacobian_determinant(phi) -> np.ndarray:
    """det(I + grad u) from forward differences, over the (D-1, H-1, W-1) interior."""
    u = _field_array(phi)
    d, h, w = u.shape[1:]
    if min(d, h, w) < 2:
        raise ValueError("each spatial dim must be >= 2")
    core = u[:, :-1, :-1, :-1]
    grads = [
        u[:, 1:, :-1, :-1] - core,
        u[:, :-1, 1:, :-1] - core,
        u[:, :-1, :-1, 1:] - core,
    ]
    # J[k, a] = delta_ka + d u_k / d x_a
    J = np.stack(grads, axis=1)
    J = np.moveaxis(J, (0, 1), (-2, -1)) + np.eye(3)
    return np.linalg.det(J)


def njd(phi) -> float:
    """Fraction of interior voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinant(phi)
    return float(np.count_nonzero(det <= 0) / det.size)


def warp_labels(labels, phi):
    """Nearest-neighbour label lookup at ``x + phi(x)`` with edge clamping."""
    data = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    u = _field_array(phi)
    if u.shape[1:] != data.shape:
        raise ValueError(f"field dims {u.shape[1:]} differ from label dims {data.shape}")
    idx = []
    for axis, n in enumerate(data.shape):
        base = np.arange(n).reshape([-1 if a == axis else 1 for a in range(3)])
        idx.append(np.clip(np.floor(base + u[axis] + 0.5), 0, n - 1).astype(np.intp))
    out = data[tuple(idx)]
    if isinstance(labels, LabelMap):
        return LabelMap(out, labels.labels, labels.spacing)
    return out


def map_landmarks(points, phi) -> np.ndarray:
    """Push voxel points through ``p -> p + phi(p)`` using trilinear field sampling."""
    g = phi if isinstance(phi, Grid3D) else Grid3D(np.asarray(phi))
    pts = np.asarray(points.points if isinstance(points, LandmarkSet) else points, float).reshape(-1, 3)
    return np.array([p + trilinear_sample(g, p) for p in pts]).reshape(-1, 3)


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return None if math.isnan(v) else v


@dataclass
class MetricReport:
    """Per-structure overlap/distance metrics plus global TRE and NJD."""

    per_label: dict[int, dict[str, float | None]] = field(default_factory=dict)
    tre_mm: float | None = None
    tre_per_landmark: list[float] = field(default_factory=list)
    njd: float | None = None

    @classmethod
    def compute(cls, warped: LabelMap, fixed: LabelMap, phi=None, spacing=None,
                landmarks_fixed=None, landmarks_moving=None) -> "MetricReport":
        spacing = fixed.spacing if spacing is None else spacing
        report = cls()
        structures = sorted(set(fixed.structures) | set(warped.structures))
        for lab in structures:
            pr = precision_recall(warped, fixed, lab)
            try:
                hd = hd95(warped, fixed, lab, spacing)
            except ValueError:
                hd = None
            report.per_label[lab] = {
                "dsc": dice(warped, fixed, lab),
                "hd95_mm": hd,
                "precision": pr.precision,
                "recall": pr.recall,
            }
        if phi is not None:
            report.njd = njd(phi)
        if landmarks_fixed is not None and landmarks_moving is not None and phi is not None:
            mapped = map_landmarks(landmarks_fixed, phi)
            d, m = tre(mapped, landmarks_moving, spacing)
            report.tre_per_landmark = [float(v) for v in d]
            report.tre_mm = m
        return report

    def mean(self, key: str) -> float | None:
        vals = [v[key] for v in self.per_label.values() if v[key] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dsc(self) -> float | None:
        return self.mean("dsc")

    def to_dict(self) -> dict:
        out: dict = {}
        for lab, vals in self.per_label.items():
            for key, v in vals.items():
                out[f"{key}_{lab}"] = _clean(v)
        for key in CSV_COLUMNS[1:]:
            out[f"{key}_mean"] = _clean(self.mean(key))
        out["tre_mm"] = _clean(self.tre_mm)
        out["njd"] = _clean(self.njd)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_csv(self) -> str:
        """Structure rows, a ``mean`` row, then ``tre_mm`` and ``njd`` rows with the value in column two."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)

        def fmt(v):
            v = _clean(v)
            return "" if v is None else repr(v)

        for lab, vals in self.per_label.items():
            w.writerow([lab] + [fmt(vals[k]) for k in CSV_COLUMNS[1:]])
        w.writerow(["mean"] + [fmt(self.mean(k)) for k in CSV_COLUMNS[1:]])
        w.writerow(["tre_mm", fmt(self.tre_mm), "", "", ""])
        w.writerow(["njd", fmt(self.njd), "", "", ""])
        return buf.getvalue()
