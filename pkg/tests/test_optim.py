import numpy as np
import pytest

from pyramidreg.autodiff import ParamStore
from pyramidreg.harness.optim import AdamState, adam_step, lr_schedule


def store(value):
    p = ParamStore()
    p.add("w", np.asarray(value, dtype=np.float64))
    return p


def test_zero_gradient_leaves_params():
    p = store([1.0, -2.0])
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 1e-3)
    np.testing.assert_array_equal(p["w"].value, [1, -2])


def test_first_step_magnitude_is_lr():
    p = store(0.0)
    state = adam_step(p, {"w": np.array(1.0)}, AdamState(), 1e-4)
    # bias-corrected m = 1, v = 1, so the step is lr / (1 + eps)
    assert -p["w"].value == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_matches_textbook_adam(rng):
    x = rng.standard_normal(4)
    p = store(x)
    state = AdamState()
    m = v = np.zeros(4)
    b1, b2, lr, eps = 0.9, 0.999, 1e-2, 1e-8
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(p, {"w": g}, state, lr, (b1, b2), eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p["w"].value, x, rtol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        adam_step(store([1.0, 2.0]), {"w": np.zeros(3)}, AdamState(), 1e-3)


def test_keeps_float32():
    p = ParamStore()
    p.add("w", np.ones(3, np.float32))
    state = adam_step(p, {"w": np.ones(3, np.float32)}, AdamState(), 1e-3)
    assert p["w"].dtype == np.float32 and state.m["w"].dtype == np.float32


def test_deterministic_ten_steps(rng):
    grads = [rng.standard_normal(5) for _ in range(10)]
    outs = []
    for _ in range(2):
        p, s = store(np.linspace(0, 1, 5)), AdamState()
        for g in grads:
            adam_step(p, {"w": g}, s, 1e-3)
        outs.append(p["w"].value.copy())
    assert np.array_equal(*outs)


def test_schedule_endpoints():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(199) == 1e-4
    assert lr_schedule(200) == 1e-4
    assert lr_schedule(299) == pytest.approx(1e-6)


def test_schedule_midpoint():
    # linear from epoch 200 to the final epoch 299; 5.05e-5 sits halfway between epochs 249 and 250
    assert lr_schedule(250) == pytest.approx(1e-4 + (1e-6 - 1e-4) * 50 / 99)
    assert (lr_schedule(249) + lr_schedule(250)) / 2 == pytest.approx(5.05e-5)


def test_schedule_monotone_and_bounded():
    lrs = [lr_schedule(e) for e in range(300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) == pytest.approx(1e-6) and max(lrs) == 1e-4


def test_schedule_range():
    with pytest.raises(ValueError):
        lr_schedule(300)
    with pytest.raises(ValueError):
        lr_schedule(-1)
