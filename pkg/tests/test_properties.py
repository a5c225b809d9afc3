"""Property-based checks of the structural invariants."""
import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pyramidreg import autodiff as ad
from pyramidreg.grid import Grid3D, LabelMap, avg_pool_to, resize_trilinear, trilinear_sample
from pyramidreg.harness import io
from pyramidreg.harness.optim import lr_schedule
from pyramidreg.loss import grad_penalty, local_ncc
from pyramidreg.metrics import dice, hd95, njd, precision_recall
from pyramidreg.net.attention import attention_weights, build_attention, build_pam, pam_attention
from pyramidreg.warp import integrate_velocity, refine, warp_by_field

from helpers import smooth_field

seeds = st.integers(0, 2**31 - 1)
small_dims = st.tuples(*[st.integers(2, 6)] * 3)
finite = st.floats(-5, 5, allow_nan=False, width=32)
# halving a subnormal float is inexact, so exactness claims use normal floats
normal = finite.filter(lambda x: x == 0 or abs(x) > 1e-30)


def masks(seed, dims, p):
    return np.random.default_rng(seed).random(dims) < p


@given(seeds, small_dims, st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_dice_symmetric(seed, dims, p, q):
    a, b = masks(seed, dims, p), masks(seed + 1, dims, q)
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


@given(seeds, small_dims, st.floats(0.1, 0.9))
def test_dice_one_only_for_equal_masks(seed, dims, p):
    a = masks(seed, dims, p)
    b = a.copy()
    b.flat[seed % b.size] ^= True
    assert dice(a, a) == 1.0 or not a.any()
    assert dice(a, b) < 1.0 or not (a.any() or b.any())


@given(seeds, small_dims, st.floats(0.1, 0.9), st.floats(0.1, 0.9))
def test_precision_recall_swap(seed, dims, p, q):
    a, b = masks(seed, dims, p), masks(seed + 1, dims, q)
    ab, ba = precision_recall(a, b), precision_recall(b, a)
    assert ab.precision == ba.recall and ab.recall == ba.precision


@given(seeds, st.floats(0.2, 0.8), st.floats(0.2, 0.8))
def test_hd95_symmetric(seed, p, q):
    a, b = masks(seed, (6, 6, 6), p), masks(seed + 1, (6, 6, 6), q)
    if a.any() and b.any():
        assert hd95(a, b, spacing=(1.0, 2.0, 0.5)) == hd95(b, a, spacing=(1.0, 2.0, 0.5))


@given(seeds, st.floats(0.1, 10.0), st.floats(-3.0, 3.0))
def test_ncc_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 6, 6, 6))
    assert abs(local_ncc(x, a * y + b, 3) - local_ncc(x, y, 3)) < 1e-4


@given(seeds)
def test_ncc_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 6, 6, 6))
    assert local_ncc(x, y, 3) == local_ncc(y, x, 3)
    assert -1 - 1e-4 <= local_ncc(x, y, 3) <= 1 + 1e-4


@given(st.tuples(normal, normal, normal), st.integers(0, 7))
def test_integrate_constant_is_exact(c, steps):
    v = np.broadcast_to(np.asarray(c, np.float32)[:, None, None, None], (3, 4, 5, 6)).copy()
    np.testing.assert_array_equal(integrate_velocity(v, steps), v)


@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite))
def test_refine_of_constants(c, f):
    coarse = np.broadcast_to(np.asarray(c, np.float64)[:, None, None, None], (3, 3, 3, 3))
    fine = np.broadcast_to(np.asarray(f, np.float64)[:, None, None, None], (3, 6, 6, 6))
    out = refine(coarse, fine)
    expect = 2 * np.asarray(c) + np.asarray(f)
    np.testing.assert_array_equal(out, np.broadcast_to(expect[:, None, None, None], out.shape))


@given(finite, st.tuples(*[st.integers(1, 9)] * 3), st.tuples(*[st.integers(1, 9)] * 3))
def test_resize_keeps_constants_exact(c, src, dst):
    x = np.full((2,) + src, c, np.float32)
    np.testing.assert_array_equal(resize_trilinear(Grid3D(x), dst).data, np.full((2,) + dst, c, np.float32))


@given(seeds, small_dims)
def test_zero_field_warp_is_identity(seed, dims):
    x = np.random.default_rng(seed).standard_normal((2,) + dims).astype(np.float32)
    np.testing.assert_array_equal(warp_by_field(x, np.zeros((3,) + dims, np.float32)), x)


@given(seeds, st.floats(0.05, 0.5))
def test_integrated_small_velocity_has_no_folds(seed, amp):
    v = smooth_field(seed, (12, 12, 12), sigma=3.0, amp=amp)
    assert njd(integrate_velocity(v)) == 0.0


@given(seeds, finite)
def test_grad_penalty_zero_on_constants(seed, c):
    assert grad_penalty(np.full((3, 4, 4, 4), c)) == 0.0


@given(seeds, small_dims, st.tuples(*[st.floats(0.0, 1.0)] * 3))
def test_sampling_linear_in_values(seed, dims, frac):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2) + dims)
    p = [f * (n - 1) for f, n in zip(frac, dims)]
    lhs = trilinear_sample(Grid3D(2.0 * a - 3.0 * b), p)
    rhs = 2.0 * trilinear_sample(Grid3D(a), p) - 3.0 * trilinear_sample(Grid3D(b), p)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


@given(seeds)
def test_avg_pool_keeps_mean(seed):
    x = np.random.default_rng(seed).standard_normal((1, 8, 8, 8))
    assert np.isclose(avg_pool_to(Grid3D(x), (2, 4, 8)).data.mean(), x.mean(), rtol=0, atol=1e-12)


@given(seeds, st.integers(1, 12), st.integers(2, 8))
def test_attention_rows_sum_to_one(seed, n, c):
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    build_attention(store, rng, "ga", c, dtype=np.float64)
    build_pam(store, rng, "pam", c, dtype=np.float64)
    tokens = ad.Node(rng.standard_normal((n, c)) * 3)
    np.testing.assert_allclose(attention_weights(store, "ga", tokens).value.sum(-1), 1.0, atol=1e-12)
    grid = ad.Node(rng.standard_normal((c, 2, 2, 2)))
    np.testing.assert_allclose(pam_attention(store, "pam", grid).value.sum(-1), 1.0, atol=1e-12)


@given(st.floats(1e-6, 1e-3), st.integers(1, 250))
def test_lr_schedule_monotone_and_continuous(lr0, start):
    lr_final = lr0 / 100
    values = [lr_schedule(e, lr0, lr_final, start, 300) for e in range(300)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[start - 1] == values[start] == lr0
    assert values[-1] == lr_final


def test_lr_schedule_default_boundary():
    assert lr_schedule(199) == lr_schedule(200) == 1e-4


@given(arrays(np.float32, (2, 3, 2, 4), elements=finite))
def test_bundle_roundtrip_bitwise(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("b")
    g = Grid3D(data, (0.5, 1.0, 2.0))
    first = io.save_bundle(d / "a", g)
    loaded = io.load_bundle(first)
    assert np.array_equal(loaded.data, data) and loaded.spacing == g.spacing
    second = io.save_bundle(d / "b", loaded.grid())
    assert (d / "a.raw").read_bytes() == (d / "b.raw").read_bytes()
    assert first.read_text().replace("a.raw", "b.raw") == second.read_text()


@given(st.lists(st.integers(0, 3), min_size=27, max_size=27))
def test_label_bundle_roundtrip(tmp_path_factory, values):
    d = tmp_path_factory.mktemp("l")
    lm = LabelMap(np.asarray(values).reshape(3, 3, 3), [0, 1, 2, 3])
    back = io.load_bundle(io.save_bundle(d / "l", lm)).labelmap()
    assert np.array_equal(back.data, lm.data) and tuple(back.labels) == tuple(lm.labels)
