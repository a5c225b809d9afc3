"""Brute-force oracles shared by the loss, metric and acceptance tests."""
import numpy as np


def ncc_oracle(f, w, window=9, eps=1e-5):
    """Explicit per-voxel windows, truncated at the border."""
    f, w = f[0], w[0]
    r = window // 2
    D, H, W = f.shape
    vals = []
    for z in range(D):
        for y in range(H):
            for x in range(W):
                sl = (slice(max(z - r, 0), z + r + 1), slice(max(y - r, 0), y + r + 1),
                      slice(max(x - r, 0), x + r + 1))
                a, b = f[sl].ravel(), w[sl].ravel()
                cov = np.mean(a * b) - a.mean() * b.mean()
                va = max(np.mean(a * a) - a.mean() ** 2, 0.0)
                vb = max(np.mean(b * b) - b.mean() ** 2, 0.0)
                vals.append(cov / np.sqrt(max(va * vb, eps * eps)))
    return float(np.mean(vals))


def surface_oracle(mask):
    """Mask voxels with any of the six face neighbours outside the mask or the volume (explicit loops)."""
    pts = []
    for p in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                if not 0 <= q[axis] < mask.shape[axis] or not mask[tuple(q)]:
                    pts.append(p)
                    break
            else:
                continue
            break
    return np.array(pts, float)


def hd95_oracle(a, b, spacing):
    sa, sb = surface_oracle(a) * spacing, surface_oracle(b) * spacing
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95))
