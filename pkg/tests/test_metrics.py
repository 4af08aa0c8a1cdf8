import numpy as np
import pytest
from skimage.metrics import structural_similarity

from splatlab.metrics import (
    PSNR_CAP,
    MetricError,
    depth_metrics,
    diode_crop_protocol,
    map_pairs,
    ordinal_accuracy,
    pad_and_resize,
    pairs_from_json,
    pairs_to_json,
    psnr,
    square_crops,
    ssim,
)


def reference_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, channel_axis=-1)


def checker(n=32, period=4):
    i, j = np.indices((n, n))
    c = ((i // period + j // period) % 2).astype(float)
    return np.repeat(c[..., None], 3, axis=-1)


def test_psnr_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.01)) == pytest.approx(40.0, abs=1e-9)
    with pytest.raises(MetricError):
        psnr(a, a[:4])


def test_ssim_identical_and_inverted():
    a = checker()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    s = ssim(a, 1 - a)
    assert s < 0
    assert s == pytest.approx(reference_ssim(a, 1 - a), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 20, 3))
    b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-6)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_depth_metric_examples(rng):
    gt = rng.uniform(1, 10, size=(6, 6))
    r = depth_metrics(gt, gt)
    assert (r.abs_rel, r.delta1, r.pixel_count) == (0.0, 1.0, 36)
    r = depth_metrics(2 * gt, gt)
    assert r.abs_rel == pytest.approx(1.0) and r.delta1 == 0.0
    r = depth_metrics(2 * gt, gt, median_scaling=True)
    assert r.abs_rel == pytest.approx(0.0, abs=1e-15) and r.delta1 == 1.0


def test_depth_metrics_hand_case():
    gt = np.array([1.0, 2.0, 4.0, 5.0])
    pred = np.array([1.1, 2.0, 3.0, 6.5])
    r = depth_metrics(pred, gt)
    assert r.abs_rel == pytest.approx((0.1 + 0 + 0.25 + 0.3) / 4)
    assert r.delta1 == 0.5  # ratios 4/3 and 1.3 exceed 1.25


def test_delta1_boundary_is_excluded():
    gt = np.array([4.0, 4.0])
    pred = np.array([5.0, 4.0])  # ratio exactly 1.25 is not counted
    assert depth_metrics(pred, gt).delta1 == 0.5


def test_median_scaling_invariance(rng):
    gt = rng.uniform(1, 10, size=(8, 8))
    pred = gt * rng.uniform(0.7, 1.4, size=gt.shape)
    base = depth_metrics(pred, gt, median_scaling=True)
    for s in (0.5, 2.0, 8.0):  # powers of two keep the arithmetic exact
        r = depth_metrics(s * pred, gt, median_scaling=True)
        assert (r.abs_rel, r.delta1) == (base.abs_rel, base.delta1)


def test_depth_metrics_mask_and_errors(rng):
    gt = rng.uniform(1, 10, size=(4, 4))
    pred = gt.copy()
    pred[0, 0] = 100.0
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    assert depth_metrics(pred, gt, mask).abs_rel == 0.0
    with pytest.raises(MetricError):
        depth_metrics(pred, gt, np.zeros((4, 4), dtype=bool))


def test_ordinal_examples(rng):
    gt = rng.uniform(1, 10, size=(10, 12))
    pairs = []
    for _ in range(50):
        a = (int(rng.integers(12)), int(rng.integers(10)))
        b = (int(rng.integers(12)), int(rng.integers(10)))
        if gt[a[1], a[0]] != gt[b[1], b[0]]:
            pairs.append((a, b, "a" if gt[a[1], a[0]] < gt[b[1], b[0]] else "b"))
    assert ordinal_accuracy(gt, pairs) == 1.0
    assert ordinal_accuracy(-gt, pairs) == 0.0
    pred = rng.uniform(1, 10, size=(10, 12))
    expected = np.mean([(pred[a[1], a[0]] < pred[b[1], b[0]]) if c == "a" else (pred[b[1], b[0]] < pred[a[1], a[0]])
                        for a, b, c in pairs])
    assert ordinal_accuracy(pred, pairs) == expected
    assert pairs_from_json(pairs_to_json(pairs)) == pairs


def test_ordinal_ties_and_errors():
    flat = np.ones((3, 3))
    assert ordinal_accuracy(flat, [((0, 0), (1, 1), "a")]) == 0.0
    with pytest.raises(MetricError):
        ordinal_accuracy(flat, [])
    with pytest.raises(MetricError):
        ordinal_accuracy(flat, [((0, 0), (3, 1), "a")])


def test_crop_protocol(rng):
    assert square_crops(256, 512) == [(0, 256, 0, 256), (0, 256, 256, 512)]
    img = rng.uniform(size=(16, 16, 3))
    depth = rng.uniform(1, 5, size=(16, 16))
    mask = rng.uniform(size=(16, 16)) > 0.5
    (i0, d0, m0), (i1, d1, m1) = diode_crop_protocol(img, depth, mask, size=16)
    assert np.allclose(i0, img) and np.allclose(i1, img) and np.allclose(d0, depth)
    assert np.array_equal(m0, mask)
    out = diode_crop_protocol(rng.uniform(size=(8, 20, 3)), rng.uniform(1, 5, (8, 20)), rng.uniform(size=(8, 20)) > 0.5,
                              size=32)
    assert all(m.dtype == bool and set(np.unique(m)) <= {False, True} for _, _, m in out)
    assert all(i.shape == (32, 32, 3) for i, _, _ in out)


def test_pad_and_resize_maps_pixels():
    img = np.zeros((4, 8))
    img[1, 6] = 1.0
    out, scale = pad_and_resize(img, size=16)
    assert out.shape == (16, 16) and scale == 2.0
    ((x, y), _, _), = map_pairs([((6, 1), (0, 0), "a")], scale, 16)
    assert (x, y) == (13, 3)
    assert out[y, x] == out.max()
