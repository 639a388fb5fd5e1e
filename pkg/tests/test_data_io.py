import os

import numpy as np
import pytest
from PIL import Image

from miniseg.data_io import (
    OVERLAY_COLORS,
    DatasetError,
    Sample,
    binarize_prediction,
    load_dataset,
    normalize_intensity,
    preprocess,
    render_overlay,
    synthetic_blobs,
    unpad,
    write_overlay,
    write_sample,
)


def make_dataset(root, n=10, size=32):
    for s in synthetic_blobs(n, size=size, seed=1):
        write_sample(root, s)
    return root


def test_load_sorted_ids(tmp_path):
    make_dataset(tmp_path, 10)
    idx = load_dataset(tmp_path)
    assert len(idx) == 10
    assert idx.ids == sorted(idx.ids)
    s = idx.load(idx.ids[0])
    assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}


def test_load_order_independent_of_creation_order(tmp_path):
    samples = synthetic_blobs(5, size=16, seed=2)
    a, b = tmp_path / "a", tmp_path / "b"
    for s in samples:
        write_sample(a, s)
    for s in reversed(samples):
        write_sample(b, s)
    assert load_dataset(a).ids == load_dataset(b).ids


def test_missing_mask_named(tmp_path):
    make_dataset(tmp_path, 3)
    victim = sorted(os.listdir(tmp_path / "masks"))[1]
    (tmp_path / "masks" / victim).unlink()
    with pytest.raises(DatasetError, match=victim[:-4]):
        load_dataset(tmp_path)


def test_empty_dataset(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(DatasetError, match="empty"):
        load_dataset(tmp_path)


def test_gray_mask_rejected(tmp_path):
    make_dataset(tmp_path, 2)
    sid = load_dataset(tmp_path).ids[0]
    m = np.zeros((32, 32), np.uint8)
    m[:4, :4] = 128
    Image.fromarray(m).save(tmp_path / "masks" / f"{sid}.png")
    with pytest.raises(DatasetError, match="non-binary"):
        load_dataset(tmp_path)


@pytest.mark.parametrize("fg", [1, 255])
def test_mask_encodings(tmp_path, fg):
    make_dataset(tmp_path, 1)
    sid = load_dataset(tmp_path).ids[0]
    m = np.zeros((32, 32), np.uint8)
    m[5:9, 5:9] = fg
    Image.fromarray(m).save(tmp_path / "masks" / f"{sid}.png")
    mask = load_dataset(tmp_path).load(sid).mask
    assert mask.sum() == 16 and mask.max() == 1


def test_sixteen_bit_images(tmp_path):
    make_dataset(tmp_path, 1)
    sid = load_dataset(tmp_path).ids[0]
    img = np.full((32, 32), 65535, np.uint16)
    img[0, 0] = 0
    Image.fromarray(img).save(tmp_path / "images" / f"{sid}.png")
    loaded = load_dataset(tmp_path).load(sid).image
    assert loaded[0, 0] == 0 and loaded[1, 1] == pytest.approx(1.0)


def test_folds_file(tmp_path):
    make_dataset(tmp_path, 4)
    ids = load_dataset(tmp_path).ids
    (tmp_path / "folds.csv").write_text("id,fold\n" + "".join(f"{s},{i % 2}\n" for i, s in enumerate(ids)))
    assert load_dataset(tmp_path).folds == {s: i % 2 for i, s in enumerate(ids)}


def test_degenerate_image_rejected():
    with pytest.raises(DatasetError):
        normalize_intensity(np.zeros((0, 5), np.uint8))


# -- preprocess -------------------------------------------------------------------------

def test_preprocess_no_padding_at_512():
    x, pad = preprocess(np.zeros((512, 512), np.uint8))
    assert x.shape == (1, 3, 512, 512)
    assert pad.bottom == pad.right == 0


def test_preprocess_pads_500_and_unpads():
    img = np.random.default_rng(0).integers(0, 256, (500, 500)).astype(np.uint8)
    x, pad = preprocess(img)
    assert x.shape == (1, 3, 512, 512)
    np.testing.assert_array_equal(unpad(x.data[0, 0], pad), img / np.float32(255.0))
    # reflect padding: row 500 mirrors row 498
    np.testing.assert_array_equal(x.data[0, 0, 500], x.data[0, 0, 498])


def test_constant_image_three_identical_channels():
    x, _ = preprocess(np.full((16, 16), 77, np.uint8))
    assert np.all(x.data[0, 0] == x.data[0, 1]) and np.all(x.data[0, 1] == x.data[0, 2])


def test_tiny_image_pads_without_error():
    x, pad = preprocess(np.ones((3, 5), np.float32))
    assert x.shape == (1, 3, 16, 16)
    assert unpad(x.data, pad).shape == (1, 3, 3, 5)


# -- binarize -----------------------------------------------------------------------------

def test_binarize_rules():
    p = np.stack([np.full((4, 4), 0.4), np.full((4, 4), 0.6)])
    assert binarize_prediction(p).all()
    tie = np.full((2, 4, 4), 0.5)
    assert not binarize_prediction(tie).any()
    rng = np.random.default_rng(0)
    q = rng.random((2, 8, 8))
    np.testing.assert_array_equal(binarize_prediction(q), binarize_prediction(q * 3.7))


# -- overlay --------------------------------------------------------------------------------

def overlay_fixture():
    img = np.full((8, 8), 0.5, np.float32)
    gt = np.zeros((8, 8), np.uint8)
    gt[2:5, 2:5] = 1
    return img, gt


def colored(rgb, img):
    base = np.round(img * 255)
    return ~np.all(rgb == base[..., None], axis=2)


def test_overlay_perfect_is_red_only():
    img, gt = overlay_fixture()
    rgb = render_overlay(img, gt, gt)
    sel = colored(rgb, img)
    assert sel.sum() == gt.sum()
    expected = np.round(0.5 * 128 + 0.5 * np.array(OVERLAY_COLORS["tp"]))
    np.testing.assert_array_equal(rgb[sel], np.broadcast_to(expected, (sel.sum(), 3)))


def test_overlay_empty_pred_is_green_only():
    img, gt = overlay_fixture()
    rgb = render_overlay(img, np.zeros_like(gt), gt)
    sel = colored(rgb, img)
    assert sel.sum() == gt.sum()
    assert np.all(rgb[sel][:, 1] > rgb[sel][:, 0]) and np.all(rgb[sel][:, 1] > rgb[sel][:, 2])


def test_overlay_false_positive_is_blue():
    img, gt = overlay_fixture()
    rgb = render_overlay(img, gt, np.zeros_like(gt))
    sel = colored(rgb, img)
    assert np.all(rgb[sel][:, 2] > rgb[sel][:, 0])


def test_overlay_bytes_deterministic(tmp_path):
    img, gt = overlay_fixture()
    pred = np.roll(gt, 1, axis=1)
    write_overlay(img, pred, gt, tmp_path / "a.png")
    write_overlay(img, pred, gt, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert np.asarray(Image.open(tmp_path / "a.png")).shape == (8, 8, 3)


def test_overlay_unwritable_path(tmp_path):
    img, gt = overlay_fixture()
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        write_overlay(img, gt, gt, blocker / "o.png")


def test_sample_extent_mismatch():
    with pytest.raises(DatasetError):
        Sample("x", np.zeros((4, 4), np.float32), np.zeros((4, 5), np.uint8))
