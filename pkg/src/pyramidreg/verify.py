"""Gradient verification suite shared by the tests and the ``gradcheck`` subcommand.

Each case wraps one differentiable operation as ``f(leaf) -> scalar`` and
compares the recorded adjoint against central differences.  Outputs are
contracted against a fixed random weight so every adjoint entry is
exercised, and inputs are drawn away from the kinks of piecewise-linear
operations (integer sample coordinates, ReLU zero, clamp floors).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import warp
from .autodiff import Node
from .loss import LossConfig, box_sum, grad_penalty, local_ncc, total_loss
from .net import NetConfig, attention, init_params, forward

# the end-to-end loss has kinks wherever a sample point crosses a voxel plane
NETWORK_STEPS = (1e-4, 1e-5, 1e-6)

TOLERANCE = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[Node], Node], np.ndarray]]
    eps: float | tuple[float, ...] = 1e-4
    coords: int | None = None  # check a random subset of this many entries
    relative_to: str = "entry"


@dataclass(frozen=True)
class CheckResult:
    name: str
    dtype: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _contract(out: Node, w: np.ndarray) -> Node:
    """``sum(out * w)`` with ``w`` cast to the output dtype."""
    return ad.sum(ad.mul(out, w.astype(out.dtype)))


def _unary(op, shape, low=-1.0, high=1.0, avoid=None):
    def build(rng):
        x = rng.uniform(low, high, shape)
        if avoid is not None:
            near = np.abs(x - avoid) < 0.05
            x[near] += 0.1
        w = rng.standard_normal(op(Node(x)).shape)
        return (lambda leaf: _contract(op(leaf), w)), x
    return build


def _with_const(op, shape, other_shape=None, low=-1.0, high=1.0):
    """Binary op differentiated in its first argument; the second is a fixed constant."""
    def build(rng):
        x = rng.uniform(low, high, shape)
        y = rng.uniform(0.5, 1.5, other_shape or shape)
        w = rng.standard_normal(op(Node(x), Node(y)).shape)
        return (lambda leaf: _contract(op(leaf, Node(y.astype(leaf.dtype))), w)), x
    return build


def _diamond(rng):
    x = rng.uniform(-1, 1, (3, 4))

    def f(leaf):
        a = ad.square(leaf)
        b = ad.exp(ad.scale(leaf, 0.5))
        return ad.sum(ad.mul(ad.add(a, b), a))
    return f, x


def _conv_case(stride):
    def build(rng):
        x = rng.standard_normal((2, 4, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
        b = rng.standard_normal(3)

        def f(leaf):
            out = ad.conv3d(leaf, Node(k.astype(leaf.dtype)), Node(b.astype(leaf.dtype)), stride, 1)
            return _contract(out, w)
        w = rng.standard_normal(ad.conv3d(Node(x), Node(k), Node(b), stride, 1).shape)
        return f, x
    return build


def _conv_kernel(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
    w = rng.standard_normal((3, 4, 4, 4))
    return (lambda leaf: _contract(ad.conv3d(Node(x.astype(leaf.dtype)), leaf, None, 1, 1), w)), k


def _smooth(rng, shape, amp):
    """Low-frequency random field: a few separable cosines."""
    c, dims = shape[0], shape[1:]
    grids = np.meshgrid(*[np.linspace(0, np.pi, n) for n in dims], indexing="ij")
    out = np.zeros(shape)
    for ch in range(c):
        for _ in range(3):
            f = rng.uniform(0.5, 1.5, 3)
            ph = rng.uniform(0, 2 * np.pi, 3)
            out[ch] += np.prod([np.cos(f[a] * grids[a] + ph[a]) for a in range(3)], axis=0)
    return out * (amp / max(np.abs(out).max(), 1e-12))


def _sample_values(rng):
    v = rng.standard_normal((2, 4, 4, 4))
    c = rng.uniform(0.1, 2.9, (3, 3, 3, 3)) + 0.0
    c = np.where(np.abs(c - np.round(c)) < 0.05, c + 0.1, c)
    w = rng.standard_normal((2, 3, 3, 3))
    return (lambda leaf: _contract(warp.sample(leaf, Node(c.astype(leaf.dtype))), w)), v


def _sample_coords(rng):
    v = rng.standard_normal((2, 4, 4, 4))
    c = rng.uniform(0.1, 2.9, (3, 3, 3, 3))
    c = np.where(np.abs(c - np.round(c)) < 0.05, c + 0.1, c)
    w = rng.standard_normal((2, 3, 3, 3))
    return (lambda leaf: _contract(warp.sample(Node(v.astype(leaf.dtype)), leaf), w)), c


def _warp_field(rng):
    g = rng.standard_normal((1, 4, 4, 4))
    phi = _smooth(rng, (3, 4, 4, 4), 0.6) + 0.3
    w = rng.standard_normal((1, 4, 4, 4))
    return (lambda leaf: _contract(warp.warp_by_field(Node(g.astype(leaf.dtype)), leaf), w)), phi


def _field_case(fn, dims=(4, 4, 4), amp=0.4):
    def build(rng):
        v = _smooth(rng, (3,) + dims, amp) + 0.13
        w = rng.standard_normal(fn(Node(v)).shape)
        return (lambda leaf: _contract(fn(leaf), w)), v
    return build


def _refine_fine(rng):
    coarse = _smooth(rng, (3, 2, 2, 2), 0.3) + 0.11
    fine = _smooth(rng, (3, 4, 4, 4), 0.4) + 0.13
    w = rng.standard_normal((3, 4, 4, 4))
    return (lambda leaf: _contract(warp.refine(Node(coarse.astype(leaf.dtype)), leaf), w)), fine


def _correlation(rng):
    F = rng.standard_normal((3, 3, 3, 3))
    M = rng.standard_normal((3, 3, 3, 3))
    w = rng.standard_normal((27, 3, 3, 3))

    def f(leaf):
        return _contract(attention.correlation(leaf, ad.scale(leaf, 0.5) + Node(M.astype(leaf.dtype)), 1), w)
    return f, F


def _attention_case(local: bool):
    def build(rng):
        store = ad.ParamStore()
        attention.build_attention(store, rng, "att", 4, dtype=np.float64)
        x = rng.standard_normal((4, 2, 4, 2) if local else (6, 4))
        w = rng.standard_normal(x.shape)

        def f(leaf):
            p = store if leaf.dtype == np.float64 else store.astype(leaf.dtype)
            out = attention.local_attention(p, "att", leaf, (2, 2, 2)) if local \
                else attention.global_attention(p, "att", leaf)
            return _contract(out, w)
        return f, x
    return build


def _layer_norm(rng):
    x = rng.standard_normal((5, 6))
    gain = rng.uniform(0.5, 1.5, 6)
    off = rng.standard_normal(6)
    w = rng.standard_normal((5, 6))
    return (lambda leaf: _contract(ad.layer_norm(leaf, Node(gain.astype(leaf.dtype)),
                                                 Node(off.astype(leaf.dtype))), w)), x


def _ncc(rng):
    fixed = rng.standard_normal((1, 8, 8, 8))
    warped = rng.standard_normal((1, 8, 8, 8))
    return (lambda leaf: local_ncc(Node(fixed.astype(leaf.dtype)), leaf, 3)), warped


def _total_loss_case(rng):
    fixed = _smooth(rng, (1, 8, 8, 8), 1.0)
    moving = _smooth(rng, (1, 8, 8, 8), 1.0)
    phi = _smooth(rng, (3, 8, 8, 8), 0.8) + 0.21

    def f(leaf):
        cast = leaf.dtype
        return total_loss(Node(fixed.astype(cast)), Node(moving.astype(cast)), leaf,
                          LossConfig(window=3, lam=0.5)).total
    return f, phi


def _perturbed_params(seed: int, dtype):
    """Seeded parameters with the zero-initialised heads given small random values."""
    from .net import flow_heads
    p = init_params(NetConfig(), seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for path in flow_heads(p):
        node = p[path]
        node.value = rng.standard_normal(node.shape) * 0.05
    return p.astype(dtype) if np.dtype(dtype) != np.float64 else p


def _network_case(target: str):
    """End-to-end loss on a 16^3 pair, differentiated w.r.t. the moving image or one weight tensor."""
    def build(rng):
        fixed = _smooth(rng, (1, 16, 16, 16), 1.0)
        moving = _smooth(rng, (1, 16, 16, 16), 1.0)
        cfg = LossConfig(window=5, lam=1.0)
        params64 = _perturbed_params(0, np.float64)

        def f(leaf):
            params = params64 if leaf.dtype == np.float64 else params64.astype(leaf.dtype)
            fx = Node(fixed.astype(leaf.dtype))
            if target == "moving":
                mv = leaf
            else:
                mv = Node(moving.astype(leaf.dtype))
                params = params.with_node(target, leaf)
            phi = forward(params, fx, mv).phi
            return total_loss(fx, mv, phi, cfg).total
        x = moving if target == "moving" else params64[target].value
        return f, x
    return build


CASES: list[Case] = [
    Case("add", _with_const(ad.add, (3, 4))),
    Case("sub", _with_const(ad.sub, (3, 4))),
    Case("mul", _with_const(ad.mul, (3, 4))),
    Case("div", _with_const(ad.div, (3, 4))),
    Case("scale", _unary(lambda x: ad.scale(x, 1.7), (3, 4))),
    Case("add_scalar", _unary(lambda x: ad.add_scalar(x, 0.3), (3, 4))),
    Case("square", _unary(ad.square, (3, 4))),
    Case("sqrt", _unary(ad.sqrt, (3, 4), 0.5, 2.0)),
    Case("clamp_min", _unary(lambda x: ad.clamp_min(x, 0.0), (3, 4), avoid=0.0)),
    Case("leaky_relu", _unary(ad.leaky_relu, (3, 4), avoid=0.0)),
    Case("sigmoid", _unary(ad.sigmoid, (3, 4), -3, 3)),
    Case("exp", _unary(ad.exp, (3, 4))),
    Case("sum_axis", _unary(lambda x: ad.sum(x, axis=1), (3, 4))),
    Case("mean_axis", _unary(lambda x: ad.mean(x, axis=0, keepdims=True), (3, 4))),
    Case("astype", _unary(lambda x: ad.astype(ad.square(x), np.float64), (3, 4))),
    Case("reshape", _unary(lambda x: ad.reshape(x, (4, 3)), (3, 4))),
    Case("transpose", _unary(lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4))),
    Case("expand", _unary(lambda x: ad.expand(x, (5, 3, 4)), (3, 4))),
    Case("concat", _unary(lambda x: ad.concat([x, ad.square(x)], axis=1), (3, 4))),
    Case("take", _unary(lambda x: ad.take(x, [0, 2, 2], axis=1), (3, 4))),
    Case("pad_crop", _unary(lambda x: ad.crop(ad.pad(x, [(1, 1), (0, 2)]), (3, 4)), (3, 4))),
    Case("matmul", _with_const(ad.matmul, (2, 3, 4), (4, 5))),
    Case("softmax", _unary(lambda x: ad.softmax(x, axis=0), (3, 4))),
    Case("layer_norm", _layer_norm),
    Case("diamond_graph", _diamond),
    Case("conv3d_input", _conv_case(1)),
    Case("conv3d_stride2", _conv_case(2)),
    Case("conv3d_kernel", _conv_kernel),
    Case("resize", _unary(lambda x: ad.resize(x, (3, 5, 4)), (2, 2, 3, 2))),
    Case("avg_pool", _unary(lambda x: ad.avg_pool(x, (2, 1, 2)), (2, 4, 2, 4))),
    Case("sample_values", _sample_values),
    Case("sample_coords", _sample_coords),
    Case("warp_field", _warp_field),
    Case("upsample_field", _field_case(lambda v: warp.upsample_field(v), (2, 2, 2))),
    Case("integrate_velocity", _field_case(lambda v: warp.integrate_velocity(v, 3))),
    Case("refine_fine", _refine_fine),
    Case("correlation", _correlation),
    Case("global_attention", _attention_case(False)),
    Case("local_attention", _attention_case(True)),
    Case("box_sum", _unary(lambda x: box_sum(x, 3), (1, 4, 4, 4))),
    Case("local_ncc", _ncc, coords=64),
    Case("grad_penalty", _unary(grad_penalty, (3, 4, 4, 4))),
    Case("total_loss", _total_loss_case, coords=48),
    Case("network_moving_image", _network_case("moving"), eps=NETWORK_STEPS, coords=24,
         relative_to="max"),
    Case("network_lgam_flow", _network_case("lgam.flow.weight"), eps=NETWORK_STEPS, coords=24,
         relative_to="max"),
    Case("network_encoder_conv", _network_case("encoder.block1.conv.weight"), eps=NETWORK_STEPS, coords=24,
         relative_to="max"),
]


def run_case(case: Case, dtype=np.float64, seed: int = 0) -> CheckResult:
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    f, x = case.build(rng)
    coords = None
    if case.coords is not None and case.coords < x.size:
        flat = rng.choice(x.size, case.coords, replace=False)
        coords = [np.unravel_index(i, x.shape) for i in np.sort(flat)]
    err = ad.grad_check(f, x, eps=case.eps, dtype=dtype, coords=coords, relative_to=case.relative_to)
    return CheckResult(case.name, dtype.name, float(err), TOLERANCE[dtype])


def run_suite(dtypes=(np.float64, np.float32), names=None, seed: int = 0) -> list[CheckResult]:
    chosen = [c for c in CASES if names is None or c.name in names]
    return [run_case(c, dt, seed) for dt in dtypes for c in chosen]
