"""Synthetic blob phantoms with a known smooth deformation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..grid import Grid3D, LabelMap, LandmarkSet
from ..metrics import dice, map_landmarks, njd
from ..warp import warp_by_field, identity_coords


@dataclass
class SynthPair:
    fixed: Grid3D
    moving: Grid3D
    labels_fixed: LabelMap
    labels_moving: LabelMap
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    phi_true: Grid3D
    initial_dice: float
    attempts: int = 1


def _blobs(coords: np.ndarray, centers, sigmas, amps) -> tuple[np.ndarray, np.ndarray]:
    """Sum of Gaussian bumps and the label map thresholding each bump at half height."""
    img = np.zeros(coords.shape[1:])
    labels = np.zeros(coords.shape[1:], dtype=np.int32)
    for lab, (c, s, a) in enumerate(zip(centers, sigmas, amps), start=1):
        r2 = sum((coords[k] - c[k]) ** 2 for k in range(3))
        bump = np.exp(-r2 / (2.0 * s * s))
        img += a * bump
        labels[bump >= 0.5] = lab
    return img, labels


def _smooth_field(rng, dims, sigma: float, max_disp: float) -> np.ndarray:
    raw = rng.standard_normal((3,) + tuple(dims))
    u = np.stack([gaussian_filter(raw[k], sigma, mode="wrap") for k in range(3)])
    peak = np.abs(u).max()
    return u * (max_disp / peak) if peak > 0 and max_disp > 0 else np.zeros_like(u)


def invert_field(phi: np.ndarray, iters: int = 60) -> np.ndarray:
    """Fixed-point inverse: psi(y) = -phi(y + psi(y))."""
    psi = -phi.copy()
    for _ in range(iters):
        psi = -warp_by_field(phi, psi)
    return psi


def synth_pair(seed: int = 0, dims=(32, 32, 32), deform_sigma: float = 8.0, deform_max: float = 6.0,
               noise: float = 0.02, n_blobs: tuple[int, int] = (2, 4), dice_range=(0.4, 0.7),
               max_attempts: int = 200, dtype=np.float32) -> SynthPair:
    """Fixed/moving phantoms related by a known field.

    ``phi_true`` is the registration-direction ground truth: the moving image
    sampled at ``x + phi_true(x)`` reproduces the fixed image, and a fixed
    landmark ``p`` sits at ``p + phi_true(p)`` in the moving image.  When
    ``deform_max > 0`` pairs are redrawn until the identity overlap (mean
    Dice over blobs) lies in ``dice_range`` and the field does not fold.
    """
    dims = tuple(int(d) for d in dims)
    if any(d % 16 for d in dims):
        raise ValueError(f"dims {dims} must be divisible by 16")
    rng = np.random.default_rng(seed)
    coords = identity_coords(dims, np.float64)
    margin = np.asarray(dims) * 0.22

    for attempt in range(1, max_attempts + 1):
        k = int(rng.integers(n_blobs[0], n_blobs[1] + 1))
        centers, sigmas = [], []
        while len(centers) < k:
            c = rng.uniform(margin, np.asarray(dims) - 1 - margin)
            s = rng.uniform(3.5, 4.5) * min(dims) / 32
            if all(np.linalg.norm(c - c2) > 1.6 * (s + s2) for c2, s2 in zip(centers, sigmas)):
                centers.append(c)
                sigmas.append(s)
        amps = rng.uniform(0.6, 1.0, k)
        texture = gaussian_filter(rng.standard_normal(dims), 1.0)
        texture *= noise / max(texture.std(), 1e-12)

        phi = _smooth_field(rng, dims, deform_sigma, deform_max)
        if deform_max > 0 and njd(phi) > 0:
            continue
        psi = invert_field(phi) if deform_max > 0 else np.zeros_like(phi)

        img_f, lab_f = _blobs(coords, centers, sigmas, amps)
        img_m, lab_m = _blobs(coords + psi, centers, sigmas, amps)
        img_f = img_f + texture
        img_m = img_m + warp_by_field(texture[None], psi)[0]

        labels_f = LabelMap(lab_f, tuple(range(k + 1)))
        labels_m = LabelMap(lab_m, tuple(range(k + 1)))
        initial = float(np.mean([dice(labels_m, labels_f, lab) for lab in range(1, k + 1)]))
        if deform_max > 0 and dice_range is not None and not dice_range[0] <= initial <= dice_range[1]:
            continue

        phi_grid = Grid3D(phi.astype(dtype))
        pts_f = np.asarray(centers)
        pts_m = np.clip(map_landmarks(pts_f, phi_grid), 0, np.asarray(dims) - 1)
        return SynthPair(
            fixed=Grid3D(img_f[None].astype(dtype)),
            moving=Grid3D(img_m[None].astype(dtype)),
            labels_fixed=labels_f,
            labels_moving=labels_m,
            landmarks_fixed=LandmarkSet(pts_f, dims=dims),
            landmarks_moving=LandmarkSet(pts_m, dims=dims),
            phi_true=phi_grid,
            initial_dice=initial,
            attempts=attempt,
        )
    raise RuntimeError(f"no pair satisfied the constraints in {max_attempts} attempts")
