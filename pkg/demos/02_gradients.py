"""
Checking gradients of the tape autodiff engine
==============================================

Every differentiable op is compared against float64 central differences.
Pass ``--all`` to run the whole suite (about half a minute).
"""
import sys

import numpy as np

from pyramidreg import autodiff as ad
from pyramidreg import verify

# a tiny graph: y = sum(softmax(x @ w) * t)
rng = np.random.default_rng(0)
w = rng.standard_normal((4, 3))
t = rng.standard_normal((5, 3))


def f(x):
    return ad.sum(ad.mul(ad.softmax(ad.matmul(x, w)), t))


x = rng.standard_normal((5, 4))
print("hand-built graph, rel err", ad.grad_check(f, x))

# reverse mode by hand
leaf = ad.Node(x, requires_grad=True)
ad.backward(f(leaf))
print("adjoint shape", leaf.grad.shape)

names = None if "--all" in sys.argv else {"conv3d_input", "sample_coords", "local_ncc", "integrate_velocity"}
for r in verify.run_suite((np.float64, np.float32), names):
    print(f"{'PASS' if r.ok else 'FAIL'} {r.name:20s} {r.dtype:8s} {r.error:.2e} (tol {r.tol:g})")
