"""Shared generators for the test suite."""
import numpy as np
from scipy.ndimage import gaussian_filter


def smooth_field(seed, dims=(16, 16, 16), sigma=3.0, amp=0.1, channels=3):
    """Gaussian-smoothed random field rescaled so that max |component| == amp."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((channels,) + tuple(dims))
    u = np.stack([gaussian_filter(raw[k], sigma, mode="nearest") for k in range(channels)])
    return u * (amp / np.abs(u).max())


def sequential_flow(v, steps=7):
    """Brute-force flow: 2**steps small steps of v / 2**steps applied one after another."""
    from pyramidreg.warp import warp_by_field
    s = v / 2 ** steps
    d = s.copy()
    for _ in range(2 ** steps - 1):
        d = s + warp_by_field(d, s)
    return d
