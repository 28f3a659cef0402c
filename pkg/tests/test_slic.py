import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from scipy import ndimage

from reidbow.errors import DataError
from reidbow.slic import enforce_connectivity, mark_foreground, save_label_png, segment


def _check_partition(seg, shape):
    H, W = shape
    n = seg.n_superpixels
    assert seg.labels.shape == (H, W)
    assert set(np.unique(seg.labels)) == set(range(n))
    assert seg.sizes.sum() == H * W
    assert np.array_equal(seg.sizes, np.bincount(seg.labels.ravel(), minlength=n))


def _check_connected(labels):
    for k in np.unique(labels):
        _, ncomp = ndimage.label(labels == k)  # 4-connectivity by default
        assert ncomp == 1, f"superpixel {k} has {ncomp} pieces"


def _nearest_seed_oracle(H, W, seeds, n_iter=10):
    """Lloyd iterations on pixel coordinates only: SLIC on a constant image."""
    rr, cc = np.indices((H, W))
    pts = np.stack([rr.ravel(), cc.ravel()], 1).astype(float)
    centers = np.array(seeds, float)
    for _ in range(n_iter):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        centers = np.array([pts[lab == k].mean(0) for k in range(len(centers))])
    return lab.reshape(H, W)


def test_single_superpixel_covers_image():
    seg = segment(np.full((12, 7, 3), 90, np.uint8), 1)
    assert seg.n_superpixels == 1
    assert np.allclose(seg.centroids[0], [5.5, 3.0])


def test_uniform_image_gives_two_by_two_grid():
    seg = segment(np.full((20, 20, 3), 128, np.uint8), 4, 20.0)
    oracle = _nearest_seed_oracle(20, 20, [(4.5, 4.5), (4.5, 14.5), (14.5, 4.5), (14.5, 14.5)])
    assert seg.n_superpixels == 4
    assert np.array_equal(np.sort(seg.sizes), [100] * 4)
    # same partition up to renaming
    pairs = set(zip(seg.labels.ravel(), oracle.ravel()))
    assert len(pairs) == 4


def test_pedestrian_sized_image_count(tiny_dataset):
    from reidbow.imgio import CameraShift, synthesize_dataset

    im = synthesize_dataset(2, 1, CameraShift(), seed=0, size=(128, 48))[0]
    seg = segment(im, 500, 20.0)
    assert 350 <= seg.n_superpixels <= 650
    _check_partition(seg, (128, 48))
    _check_connected(seg.labels)


def test_determinism(tiny_dataset):
    a = segment(tiny_dataset[0], 60)
    b = segment(tiny_dataset[0], 60)
    assert np.array_equal(a.labels, b.labels)


@given(arrays(np.uint8, st.tuples(st.integers(6, 24), st.integers(6, 24), st.just(3))),
       st.integers(1, 30), st.floats(1.0, 40.0))
def test_partition_and_connectivity(pixels, k, m):
    k = min(k, pixels.shape[0] * pixels.shape[1])
    seg = segment(pixels, k, m)
    _check_partition(seg, pixels.shape[:2])
    _check_connected(seg.labels)


def test_enforce_connectivity_splits_and_merges():
    labels = np.zeros((6, 6), np.int64)
    labels[:, 3:] = 1
    labels[0, 0] = 1          # 1-pixel orphan of label 1, merged back into 0
    labels[3:, :3] = 2
    labels[:, 5] = 0          # a 6-pixel disconnected piece of label 0
    out = enforce_connectivity(labels, 2.0)
    _check_connected(out)
    assert out[0, 0] == out[1, 0]
    assert len(np.unique(out)) == 4


def test_errors():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(DataError):
        segment(img, 17)
    with pytest.raises(DataError):
        segment(img, 0)
    with pytest.raises(DataError):
        segment(img, 2, compactness=0)


def test_mark_foreground_thresholds():
    seg = segment(np.full((10, 10, 3), 50, np.uint8), 1)
    mask = np.zeros((10, 10), bool)
    mask[:6] = True  # 60% foreground
    assert mark_foreground(seg, mask, 0.5).foreground_flags.all()
    assert not mark_foreground(seg, mask, 0.7).foreground_flags.any()
    assert mark_foreground(seg, np.ones((10, 10), bool)).foreground_flags.all()
    assert not mark_foreground(seg, np.zeros((10, 10), bool)).foreground_flags.any()
    assert mark_foreground(seg, None).foreground_flags.all()
    with pytest.raises(DataError):
        mark_foreground(seg, np.ones((9, 10), bool))


def test_label_png_roundtrip(tmp_path, tiny_dataset):
    seg = segment(tiny_dataset[0], 40)
    save_label_png(seg, tmp_path / "l.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "l.png")), seg.labels)
