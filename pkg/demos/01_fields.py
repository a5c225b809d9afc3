"""
Warping, integrating and checking displacement fields
=====================================================

A smooth random velocity is integrated by scaling and squaring, checked for
folding, and composed with the integral of its negation.
"""
import numpy as np
from scipy.ndimage import gaussian_filter

from pyramidreg.metrics import jacobian_determinant, njd
from pyramidreg.warp import compose, integrate_velocity, refine, warp_by_field

rng = np.random.default_rng(0)
dims = (24, 24, 24)

# a smooth velocity, at most half a voxel per component
raw = rng.standard_normal((3,) + dims)
v = np.stack([gaussian_filter(c, 3.0) for c in raw])
v *= 0.5 / np.abs(v).max()

phi = integrate_velocity(v, steps=7)
print("max |phi|      ", np.abs(phi).max())
print("min det J      ", jacobian_determinant(phi).min())
print("folded fraction", njd(phi))

# integrating -v gives an approximate inverse
psi = integrate_velocity(-v, steps=7)
print("inverse residual", np.abs(compose(psi, phi)).max())

# a constant velocity integrates to itself exactly
c = np.broadcast_to(np.float32([0.3, -1.2, 2.0])[:, None, None, None], (3,) + dims).copy()
print("constant exact  ", np.array_equal(integrate_velocity(c), c))

# warping an image: out(x) = img(x + phi(x))
img = gaussian_filter(rng.standard_normal(dims), 2.0)[None]
warped = warp_by_field(img, phi)
print("image change    ", np.abs(warped - img).max())

# coarse-to-fine: a coarse field is doubled in size and magnitude, then resampled by the fine one
coarse = phi[:, ::2, ::2, ::2] / 2
fine = np.zeros_like(phi)
print("refine(coarse, 0) shape", refine(coarse, fine).shape)
