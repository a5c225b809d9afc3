import json

import numpy as np
import pytest

from pyramidreg.grid import Grid3D, LabelMap, LandmarkSet
from pyramidreg.metrics import (CSV_COLUMNS, MetricReport, boundary_voxels, dice, hd95, jacobian_determinant,
                                map_landmarks, njd, precision_recall, tre, warp_labels)
from pyramidreg.warp import identity_coords

from helpers import smooth_field
from oracles import hd95_oracle, surface_oracle


def test_dice_direct_count():
    x = np.zeros((1, 1, 3), int)
    y = np.zeros((1, 1, 3), int)
    x[0, 0, :2] = 1
    y[0, 0, 1:] = 1
    assert dice(x, y) == 0.5


def test_dice_empty_pair_is_one():
    z = np.zeros((2, 2, 2), int)
    assert dice(z, z) == 1.0


def test_dice_brute_force(rng):
    a = rng.integers(0, 3, (5, 6, 7))
    b = rng.integers(0, 3, (5, 6, 7))
    for lab in (1, 2):
        inter = sum(1 for v, w in zip(a.ravel(), b.ravel()) if v == lab and w == lab)
        want = 2 * inter / (np.sum(a == lab) + np.sum(b == lab))
        assert dice(a, b, lab) == pytest.approx(want)


def test_hd95_single_voxels():
    a = np.zeros((1, 1, 5), int)
    b = np.zeros((1, 1, 5), int)
    a[0, 0, 0] = 1
    b[0, 0, 3] = 1
    assert hd95(a, b) == 3.0


def test_hd95_shifted_cube_matches_brute_force():
    a = np.zeros((8, 8, 8), int)
    b = np.zeros((8, 8, 8), int)
    a[2:5, 2:5, 2:5] = 1
    b[3:6, 2:5, 2:5] = 1
    assert hd95(a, b) == pytest.approx(hd95_oracle(a, b, np.ones(3)))


@pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (2.0, 1.0, 0.5)])
def test_hd95_random_masks_match_brute_force(rng, spacing):
    a = rng.random((7, 8, 6)) < 0.3
    b = rng.random((7, 8, 6)) < 0.3
    assert hd95(a.astype(int), b.astype(int), 1, spacing) == pytest.approx(hd95_oracle(a, b, np.asarray(spacing)))


def test_hd95_empty_raises():
    with pytest.raises(ValueError):
        hd95(np.zeros((2, 2, 2), int), np.ones((2, 2, 2), int))


def test_boundary_matches_oracle(rng):
    m = rng.random((6, 6, 6)) < 0.6
    got = {tuple(p) for p in boundary_voxels(m)}
    want = {tuple(int(v) for v in p) for p in surface_oracle(m)}
    assert got == want


def test_tre_examples():
    d, m = tre([[0, 0, 0]], [[0, 3, 4]], (1, 1, 1))
    assert m == 5.0
    d, m = tre([[1, 0, 0]], [[0, 0, 0]], (2, 1, 1))
    assert m == 2.0
    assert tre(LandmarkSet([[0, 0, 1]], spacing=(1, 1, 3)), [[0, 0, 0]])[1] == 3.0


def test_precision_recall_counts():
    pred = np.array([[[1, 1, 0]]])
    ref = np.array([[[1, 0, 0]]])
    assert precision_recall(pred, ref)[:2] == (0.5, 1.0)
    pred = np.array([[[1, 0, 0]]])
    ref = np.array([[[1, 1, 0]]])
    assert precision_recall(pred, ref)[:2] == (1.0, 0.5)


def test_precision_recall_swap(rng):
    a = rng.integers(0, 2, (4, 4, 4))
    b = rng.integers(0, 2, (4, 4, 4))
    p, r, _ = precision_recall(a, b)
    assert precision_recall(b, a)[:2] == (r, p)


def test_precision_recall_degenerate_flag():
    z = np.zeros((2, 2, 2), int)
    assert precision_recall(z, np.ones_like(z)).degenerate


def test_njd_folding_linear_field():
    z = identity_coords((5, 5, 5), np.float64)[0]
    phi = np.stack([-2 * z, np.zeros_like(z), np.zeros_like(z)])
    np.testing.assert_allclose(jacobian_determinant(phi), -1.0)
    assert njd(phi) == 1.0


def test_jacobian_analytic_linear_fields(rng):
    x = identity_coords((4, 5, 6), np.float64)
    for _ in range(5):
        A = rng.uniform(-0.8, 0.8, (3, 3))
        u = np.einsum("ka,a...->k...", A, x)
        np.testing.assert_allclose(jacobian_determinant(u), np.linalg.det(np.eye(3) + A), rtol=1e-10)


def test_njd_small_smooth_field_is_zero():
    for seed in range(3):
        assert njd(smooth_field(seed, (12, 12, 12), sigma=2.0, amp=0.2)) == 0.0


def test_njd_counts_interior_only():
    phi = np.zeros((3, 3, 3, 3))
    assert jacobian_determinant(phi).shape == (2, 2, 2)
    phi[0, 1, 0, 0] = -1.5  # one negative forward difference along z at (0,0,0)
    assert njd(phi) == pytest.approx(1 / 8)


def test_warp_labels_integer_shift_with_clamp():
    lab = np.arange(4).reshape(1, 1, 4)
    phi = np.zeros((3, 1, 1, 4))
    phi[2] = 1
    np.testing.assert_array_equal(warp_labels(lab, phi).ravel(), [1, 2, 3, 3])
    phi[2] = -2
    np.testing.assert_array_equal(warp_labels(lab, phi).ravel(), [0, 0, 0, 1])


def test_warp_labels_keeps_declared_set():
    lm = LabelMap(np.zeros((2, 2, 2), int), labels=(1, 4))
    assert warp_labels(lm, np.zeros((3, 2, 2, 2))).labels == (0, 1, 4)


def test_map_landmarks_constant_field():
    phi = Grid3D(np.broadcast_to(np.array([0.5, -1, 2.0]).reshape(3, 1, 1, 1), (3, 4, 4, 4)))
    np.testing.assert_allclose(map_landmarks([[1, 2, 1]], phi), [[1.5, 1, 3]])


def _report():
    lab = np.zeros((6, 6, 6), int)
    lab[1:3, 1:3, 1:3] = 1
    lab[3:5, 3:5, 3:5] = 2
    fixed = LabelMap(lab)
    return MetricReport.compute(fixed, fixed, np.zeros((3, 6, 6, 6)), landmarks_fixed=[[1, 1, 1]],
                                landmarks_moving=[[1, 1, 1]])


def test_identity_report():
    rep = _report()
    assert rep.mean_dsc == 1.0 and rep.mean("hd95_mm") == 0.0
    assert rep.njd == 0.0 and rep.tre_mm == 0.0


def test_report_csv_schema():
    rows = _report().to_csv().strip().split("\n")
    assert rows[0].split(",") == list(CSV_COLUMNS)
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "mean", "tre_mm", "njd"]
    assert all(len(r.split(",")) == 5 for r in rows)


def test_report_json_flat():
    obj = json.loads(_report().to_json())
    assert obj["dsc_1"] == 1.0 and obj["tre_mm"] == 0.0
    assert all(not isinstance(v, (dict, list)) for v in obj.values())
