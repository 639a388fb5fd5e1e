import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from miniseg.metrics import (
    ConfusionCounts,
    boundary,
    compute_metrics,
    confusion,
    hausdorff,
    lesion_count,
    slice_analysis,
    write_metrics_csv,
)

from oracles import boundary_pixels, confusion_loops, flood_fill_count, hausdorff_all_pairs, metrics_from_counts


def fixture_pair():
    gt = np.zeros((10, 10), np.uint8)
    pred = np.zeros((10, 10), np.uint8)
    gt.flat[:10] = 1
    pred.flat[2:12] = 1
    return pred, gt


masks = st.integers(1, 16).flatmap(
    lambda h: st.integers(1, 16).flatmap(lambda w: st.tuples(arrays(bool, (h, w)), arrays(bool, (h, w))))
)


def test_fixture_counts_and_metrics():
    pred, gt = fixture_pair()
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (8, 2, 2, 88)
    m = compute_metrics(c)
    assert m["DSC"] == pytest.approx(0.80)
    assert m["SEN"] == pytest.approx(0.80)
    assert m["SPC"] == pytest.approx(0.9778, abs=1e-4)
    assert m["mIoU"] == pytest.approx(0.8116, abs=1e-4)


def test_identity_and_complement():
    _, gt = fixture_pair()
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0
    assert all(v == 1 for k, v in compute_metrics(c).items() if k in ("mIoU", "SEN", "SPC", "DSC"))
    c = confusion(1 - gt, gt)
    assert c.tp == c.tn == 0


def test_empty_conventions():
    z = np.zeros((4, 4), np.uint8)
    m = compute_metrics(confusion(z, z))
    assert m["SEN"] == 1 and m["DSC"] == 1
    one = z.copy()
    one[1, 1] = 1
    assert compute_metrics(confusion(one, z))["DSC"] == 0
    assert compute_metrics(confusion(z, one))["DSC"] == 0


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 3)), np.zeros((2, 2)))


@settings(max_examples=200, deadline=None)
@given(masks)
def test_metrics_match_per_pixel_oracle(pair):
    pred, gt = pair
    c = confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == confusion_loops(pred, gt)
    got = compute_metrics(c)
    for k, v in metrics_from_counts(*confusion_loops(pred, gt)).items():
        assert got[k] == v
        assert 0 <= got[k] <= 1


@settings(max_examples=200, deadline=None)
@given(masks)
def test_dsc_iou_identity(pair):
    m = compute_metrics(confusion(*pair))
    assert m["DSC"] == pytest.approx(2 * m["IoU_fg"] / (1 + m["IoU_fg"]), abs=1e-12)


def test_hausdorff_examples():
    _, gt = fixture_pair()
    assert hausdorff(gt, gt) == 0
    a = np.zeros((6, 6), np.uint8)
    b = np.zeros((6, 6), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(a, b) == 5.0


def test_hausdorff_empty_conventions():
    z = np.zeros((3, 4), np.uint8)
    one = z.copy()
    one[0, 0] = 1
    assert hausdorff(z, z) == 0.0
    assert hausdorff(one, z) == hausdorff(z, one) == 5.0


@settings(max_examples=200, deadline=None)
@given(masks)
def test_hausdorff_matches_all_pairs_and_is_symmetric(pair):
    pred, gt = pair
    h = hausdorff(pred, gt)
    assert h == hausdorff_all_pairs(pred, gt)
    assert h == hausdorff(gt, pred)
    assert h >= 0


@settings(max_examples=100, deadline=None)
@given(masks)
def test_boundary_matches_oracle(pair):
    m = pair[0]
    got = np.argwhere(boundary(m)).astype(float)
    np.testing.assert_array_equal(got, boundary_pixels(m))


def test_lesion_count_examples():
    gt = np.zeros((8, 8), np.uint8)
    gt[0:2, 0:2] = 1
    gt[5:7, 5:7] = 1
    assert lesion_count(gt) == 2
    diag = np.eye(4, dtype=np.uint8)
    assert lesion_count(diag) == 1
    assert lesion_count(np.zeros((4, 4))) == 0


@settings(max_examples=200, deadline=None)
@given(masks)
def test_lesion_count_matches_flood_fill(pair):
    assert lesion_count(pair[0]) == flood_fill_count(pair[0])


def test_slice_analysis():
    pred, gt = fixture_pair()
    r = slice_analysis(pred, gt)
    assert r.DSC == pytest.approx(0.8)
    assert r.infected_area == pytest.approx(0.1)
    assert r.lesion_count == 1
    r0 = slice_analysis(np.zeros((4, 4)), np.zeros((4, 4)))
    assert r0.infected_area == 0 and r0.lesion_count == 0 and r0.HD == 0


def test_metrics_csv(tmp_path):
    pred, gt = fixture_pair()
    r = slice_analysis(pred, gt)
    perfect = slice_analysis(gt, gt)
    rows = [("a", 0, r), ("b", 0, perfect), ("c", 1, perfect)]
    write_metrics_csv(tmp_path / "m.csv", rows)
    table = list(csv.reader(open(tmp_path / "m.csv")))
    assert table[0] == ["slice_id", "fold", "mIoU", "SEN", "SPC", "DSC", "HD", "infected_area", "lesion_count"]
    labels = [row[0] for row in table[1:]]
    assert labels == ["a", "b", "c", "fold0_mean", "fold1_mean", "all_folds_mean", "all_folds_std"]
    fold0_dsc = float(table[4][5])
    assert fold0_dsc == pytest.approx(0.9)
    assert float(table[6][5]) == pytest.approx(0.95)
    assert float(table[7][5]) == pytest.approx(0.05)


def test_confusion_counts_total():
    assert ConfusionCounts(1, 2, 3, 4).total == 10
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts(0, 0, 0, 0))
