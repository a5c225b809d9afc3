import numpy as np
import pytest

from pyramidreg.harness.synth import invert_field, synth_pair
from pyramidreg.metrics import dice, map_landmarks, njd, warp_labels
from pyramidreg.warp import compose, warp_by_field

from helpers import smooth_field


@pytest.fixture(scope="module")
def pair():
    return synth_pair(seed=0)


def test_default_pair_contract(pair):
    assert 0.4 <= pair.initial_dice <= 0.7
    assert njd(pair.phi_true) == 0.0
    assert pair.fixed.dims == (32, 32, 32) and pair.fixed.data.dtype == np.float32
    assert 2 <= len(pair.labels_fixed.structures) <= 4
    assert pair.labels_fixed.labels == pair.labels_moving.labels


def test_ground_truth_field_aligns_images(pair):
    warped = warp_by_field(pair.moving, pair.phi_true)
    before = np.abs(pair.moving.data - pair.fixed.data).mean()
    after = np.abs(warped.data - pair.fixed.data).mean()
    assert after < 0.2 * before


def test_ground_truth_field_aligns_labels(pair):
    warped = warp_labels(pair.labels_moving, pair.phi_true)
    d = np.mean([dice(warped, pair.labels_fixed, s) for s in pair.labels_fixed.structures])
    assert d > 0.85 > pair.initial_dice


def test_landmarks_follow_field(pair):
    np.testing.assert_allclose(map_landmarks(pair.landmarks_fixed, pair.phi_true), pair.landmarks_moving.points)


def test_no_deformation_gives_identical_pair():
    p = synth_pair(seed=3, dims=(16, 16, 16), deform_max=0.0)
    assert np.array_equal(p.fixed.data, p.moving.data)
    assert np.array_equal(p.labels_fixed.data, p.labels_moving.data)
    assert p.initial_dice == 1.0


def test_seeded():
    kw = dict(seed=5, dims=(16, 16, 16), dice_range=None)
    a, b = synth_pair(**kw), synth_pair(**kw)
    assert np.array_equal(a.moving.data, b.moving.data) and np.array_equal(a.phi_true.data, b.phi_true.data)


def test_dims_must_divide_by_16():
    with pytest.raises(ValueError):
        synth_pair(dims=(24, 32, 32))


def test_invert_field_residual():
    phi = smooth_field(0, (16, 16, 16), sigma=3.0, amp=2.0)
    psi = invert_field(phi)
    assert np.abs(compose(phi, psi)).max() < 0.05
