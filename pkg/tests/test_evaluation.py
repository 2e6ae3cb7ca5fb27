import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from ventrigen import evaluation as ev
from ventrigen import nn


def _brute_overlap(p, g, cls):
    inter = union = np_ = ng = 0
    for a, b in zip(p.ravel(), g.ravel()):
        pa, gb = a == cls, b == cls
        inter += pa and gb
        union += pa or gb
        np_ += pa
        ng += gb
    d = 1.0 if np_ + ng == 0 else 2 * inter / (np_ + ng)
    j = 1.0 if union == 0 else inter / union
    return d, j


# -- overlap metrics ---------------------------------------------------------------------

def test_dice_iou_examples():
    m = np.zeros((4, 4), int)
    m[0, :2] = 2
    assert ev.dice(m, m) == 1.0 and ev.iou(m, m) == 1.0
    other = np.zeros((4, 4), int)
    other[3, :2] = 2
    assert ev.dice(m, other) == 0.0
    gt = np.zeros((4, 4), int)
    gt[0, :4] = 2
    assert ev.dice(m, gt) == pytest.approx(4 / 6, abs=1e-15)
    assert ev.iou(m, gt) == 0.5


def test_empty_masks_score_one():
    z = np.zeros((3, 3), int)
    assert ev.dice(z, z) == 1.0 and ev.iou(z, z) == 1.0


def test_dice_iou_identity_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p, g = rng.integers(0, 3, (2, 8, 8))
        d, j = ev.dice(p, g), ev.iou(p, g)
        assert abs(d - 2 * j / (1 + j)) <= 1e-12


def test_brute_force_equivalence_8x8():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p, g = rng.integers(0, 3, (2, 8, 8))
        for cls in (0, 1, 2):
            d, j = _brute_overlap(p, g, cls)
            assert abs(ev.dice(p, g, cls) - d) <= 1e-12
            assert abs(ev.iou(p, g, cls) - j) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric(seed):
    p, g = np.random.default_rng(seed).integers(0, 3, (2, 6, 6))
    assert ev.dice(p, g) == ev.dice(g, p)


def test_overlap_shape_mismatch():
    with pytest.raises(ValueError):
        ev.dice(np.zeros((2, 2)), np.zeros((3, 3)))


def test_volume_errors_examples():
    v = ev.volume_errors([10, 20], [12, 16])
    assert v.mae == 3.0 and v.mse == 10.0
    same = ev.volume_errors([5, 7], [5, 7])
    assert same.mae == 0.0 and same.mse == 0.0
    assert ev.volume_errors([90], [100]).percent[0] == pytest.approx(-10.0)


def test_volume_errors_zero_ground_truth_flagged():
    v = ev.volume_errors([3, 5], [0, 5])
    assert v.excluded == [0]
    assert np.isnan(v.percent[0]) and v.percent[1] == 0.0


# -- SSIM family ----------------------------------------------------------------------------

def test_ssim_identical_is_one():
    x = np.random.default_rng(0).uniform(size=(32, 32))
    assert ev.ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1 = 0.01**2
    assert ev.ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-12)


def test_ssim_tiny_noise():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(32, 32))
    assert ev.ssim(x, x + rng.normal(0, 1e-4, x.shape)) > 0.99


def test_ssim_matches_skimage():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.uniform(size=(2, 40, 48))
        ref = structural_similarity(a, b, win_size=7, data_range=1.0)
        assert ev.ssim(a, b) == pytest.approx(ref, abs=1e-10)
        assert ev.ssim(a, b) == pytest.approx(ev.ssim(b, a), abs=1e-14)


def test_ssim_rejects_small_image():
    with pytest.raises(ValueError):
        ev.ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_ms_ssim_properties():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(64, 64))
    assert ev.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    for _ in range(10):
        a, b = rng.uniform(size=(2, 64, 64))
        assert ev.ms_ssim(a, b) <= 1.0


def test_ms_ssim_fine_scale_difference():
    # 4x4 checkerboard detail that averages out after two 2x poolings
    base = np.kron(np.random.default_rng(4).uniform(0.3, 0.7, (16, 16)), np.ones((4, 4)))
    detail = 0.2 * np.kron(np.ones((16, 16)), np.array([[1, -1, 1, -1], [-1, 1, -1, 1]] * 2))
    a, b = base, base + detail
    pool = lambda x: x.reshape(16, 4, 16, 4).mean(axis=(1, 3))
    np.testing.assert_allclose(pool(a), pool(b), atol=1e-12)
    assert ev.ms_ssim(a, b) < 1.0


def test_ms_ssim_rejects_indivisible():
    with pytest.raises(ValueError):
        ev.ms_ssim(np.zeros((30, 30)), np.zeros((30, 30)))


# -- Frechet distance ---------------------------------------------------------------------

def test_frechet_self_distance():
    x = np.random.default_rng(5).normal(size=(200, 8))
    assert ev.frechet_distance(x, x) <= 1e-8


def test_frechet_mean_offset_closed_form():
    x = np.random.default_rng(6).normal(size=(300, 4))
    d = np.array([1.0, -2.0, 0.5, 0.0])
    assert ev.frechet_distance(x, x + d) == pytest.approx((d**2).sum(), abs=1e-8)


def test_frechet_gaussian_closed_form():
    rng = np.random.default_rng(7)
    s1, s2 = np.diag([1.0, 4.0]), np.array([[2.0, 0.5], [0.5, 1.0]])
    m1, m2 = np.zeros(2), np.array([1.0, 1.0])
    a = rng.multivariate_normal(m1, s1, 10_000)
    b = rng.multivariate_normal(m2, s2, 10_000)
    # closed form via an independent route: scipy's general matrix square root
    from scipy.linalg import sqrtm

    expected = ((m1 - m2) ** 2).sum() + np.trace(s1 + s2 - 2 * np.real(sqrtm(s1 @ s2)))
    assert ev.frechet_distance(a, b) == pytest.approx(expected, rel=0.05)
    assert ev.frechet_distance(a, b) == pytest.approx(ev.frechet_distance(b, a), rel=1e-9)


def test_frechet_rejects_small_or_bad_sets():
    with pytest.raises(ValueError):
        ev.frechet_distance(np.zeros((3, 4)), np.zeros((10, 4)))
    bad = np.random.default_rng(0).normal(size=(10, 2))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        ev.frechet_distance(bad, bad)


def test_random_features_fixed_and_32d():
    imgs = np.random.default_rng(8).uniform(size=(5, 1, 64, 64))
    f1, f2 = ev.RandomFeatures(3)(imgs), ev.RandomFeatures(3)(imgs)
    assert f1.shape == (5, 32) and np.array_equal(f1, f2)


# -- pairwise diversity ------------------------------------------------------------------------

def test_pairs_are_distinct_and_unordered():
    idx = ev.sample_pairs(40, 500, seed=1)
    assert len(idx) == 500 and np.all(idx[:, 0] < idx[:, 1])
    assert len({tuple(p) for p in idx}) == 500
    assert np.array_equal(idx, ev.sample_pairs(40, 500, seed=1))
    assert len(ev.sample_pairs(5, 500, seed=0)) == 10


def test_diversity_identical_images():
    x = np.random.default_rng(9).uniform(size=(1, 1, 32, 32))
    s, m = ev.pairwise_diversity(np.repeat(x, 6, axis=0), pairs=10)
    assert s == pytest.approx(1.0, abs=1e-12) and m == pytest.approx(1.0, abs=1e-12)


def test_diversity_noise_images_near_zero():
    imgs = np.random.default_rng(10).uniform(size=(30, 64, 64))
    s, _ = ev.pairwise_diversity(imgs, pairs=50, seed=2)
    assert abs(s) < 0.05
    assert (s, _) == ev.pairwise_diversity(imgs, pairs=50, seed=2)


# -- segmenter and reports -----------------------------------------------------------------------

def test_segmenter_deterministic_and_background_only():
    rng = np.random.default_rng(11)
    images = rng.uniform(size=(8, 1, 16, 16))
    labels = np.zeros((8, 16, 16), int)
    m1, _ = ev.train_segmenter(images, labels, epochs=15, seed=4, batch_size=4, width=4)
    m2, _ = ev.train_segmenter(images, labels, epochs=15, seed=4, batch_size=4, width=4)
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        assert np.array_equal(a.data, b.data)
    assert np.all(m1.predict(images) == 0)


def test_segmenter_rejects_empty_and_diverging():
    with pytest.raises(ValueError):
        ev.train_segmenter(np.zeros((0, 1, 8, 8)), np.zeros((0, 8, 8), int), epochs=1)
    images = np.zeros((4, 1, 8, 8))
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(nn.DivergenceError):
        ev.train_segmenter(images, np.zeros((4, 8, 8), int), epochs=1, width=4)


def test_segmentation_loss_gradient():
    from gradcheck import check

    target = np.random.default_rng(12).integers(0, 3, (2, 4, 4))
    logits = np.random.default_rng(13).normal(size=(2, 3, 4, 4))
    check(lambda t: ev.segmentation_loss(t, target), [logits])


def test_evaluate_perfect_model_and_row_counts(tmp_path):
    gt = np.random.default_rng(14).integers(0, 3, (6, 8, 8))
    report = ev.evaluate_predictions({"real": gt.copy(), "syn": np.zeros_like(gt), "aug": gt.copy()}, gt)
    assert report.summary["real"]["dice_mean"] == 1.0
    assert report.summary["real"]["volume_abs_error_mean"] == 0.0
    assert len(report.per_sample) == 6 * 3
    vols = [r["gt_volume"] for r in report.per_sample if r["model"] == "real"]
    assert vols == sorted(vols)
    report.write(tmp_path / "m.csv", tmp_path / "m.json")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "model,metric,mean,std" and len(lines) == 1 + 3 * 4
