import numpy as np
import pytest
from scipy import ndimage

from mixsa.errors import AdapterError, DimensionMismatchError
from mixsa.images import ImageBuffer
from mixsa.metrics import (
    PSNR_CAP_DB,
    evaluate_pairs,
    extract_feature_set,
    fid,
    fid_with_notes,
    identity_layer_extractor,
    kid,
    lpips,
    mock_feature_extractor,
    psnr,
    ssim,
)

# SSIM of a smooth seeded field against its negative, frozen from the first
# oracle run of this implementation.
PINNED_NEGATIVE_SSIM = -0.7990525107


def _img(arr):
    return ImageBuffer(np.asarray(arr, dtype=np.uint8))


# --- psnr ------------------------------------------------------------------------


def test_psnr_identical_capped():
    img = _img(np.random.default_rng(0).integers(0, 256, (16, 16)))
    assert psnr(img, img) == PSNR_CAP_DB


def test_psnr_black_vs_white_is_zero_db():
    assert psnr(_img(np.zeros((8, 8))), _img(np.full((8, 8), 255))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_single_differing_pixel_formula():
    n = 16 * 16
    a = np.zeros((16, 16))
    b = a.copy()
    b[3, 4] = 255
    assert psnr(_img(a), _img(b)) == pytest.approx(10 * np.log10(n), abs=1e-12)


def test_psnr_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr(_img(np.zeros((4, 4))), _img(np.zeros((4, 5))))


def test_psnr_symmetric():
    rng = np.random.default_rng(1)
    a, b = _img(rng.integers(0, 256, (8, 8))), _img(rng.integers(0, 256, (8, 8)))
    assert psnr(a, b) == psnr(b, a)


# --- ssim ------------------------------------------------------------------------


def test_ssim_identical_is_exactly_one():
    img = _img(np.random.default_rng(2).integers(0, 256, (32, 32)))
    assert ssim(img, img) == 1.0


def test_ssim_negative_for_inverted_structure():
    rng = np.random.default_rng(42)
    base = np.clip(ndimage.gaussian_filter(rng.uniform(0, 255, (32, 32)), 1.0), 0, 255).astype(np.uint8)
    value = ssim(_img(base), _img(255 - base))
    assert value < 0
    assert value == pytest.approx(PINNED_NEGATIVE_SSIM, abs=1e-8)


def test_ssim_constant_pair_reduces_to_luminance_term():
    mu_a, mu_b = 80.0, 160.0
    c1 = (0.01 * 255) ** 2
    expected = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    got = ssim(_img(np.full((16, 16), 80)), _img(np.full((16, 16), 160)))
    assert got == pytest.approx(expected, abs=1e-12)


def test_ssim_symmetric_and_scale_sane():
    rng = np.random.default_rng(3)
    a, b = _img(rng.integers(0, 256, (24, 24))), _img(rng.integers(0, 256, (24, 24)))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    small = _img(rng.integers(0, 256, (12, 12)))
    assert ssim(small, small) == 1.0


# --- fid -------------------------------------------------------------------------


def test_fid_self_is_zero():
    feats = np.random.default_rng(4).standard_normal((64, 6))
    assert abs(fid(feats, feats)) <= 1e-6


def test_fid_closed_form_mean_shift():
    feats = np.random.default_rng(5).standard_normal((64, 6))
    delta = np.zeros(6)
    delta[0] = 1.5
    assert fid(feats, feats + delta) == pytest.approx(1.5**2, abs=1e-4)


def test_fid_symmetric():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((40, 5)), rng.standard_normal((40, 5))
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)


def test_fid_singular_covariance_jittered_with_note():
    # rank-deficient features: one dimension is constant
    rng = np.random.default_rng(7)
    a = rng.standard_normal((20, 4))
    a[:, 3] = 0.0
    b = rng.standard_normal((20, 4))
    b[:, 3] = 0.0
    value, notes = fid_with_notes(a, b)
    assert np.isfinite(value) and value >= 0.0


def test_fid_requires_enough_vectors():
    with pytest.raises(DimensionMismatchError):
        fid(np.zeros((1, 4)), np.zeros((5, 4)))


# --- kid -------------------------------------------------------------------------


def test_kid_self_near_zero():
    feats = np.random.default_rng(8).standard_normal((100, 8)) * 0.05
    assert abs(kid(feats, feats)) <= 1e-3


def test_kid_separation_monotone():
    feats = np.random.default_rng(9).standard_normal((50, 8)) * 0.2
    values = [kid(feats, feats + sep) for sep in (0.5, 1.0, 2.0)]
    assert values[0] > 0
    assert values[0] < values[1] < values[2]


def test_kid_dimension_checks():
    with pytest.raises(DimensionMismatchError):
        kid(np.zeros((10, 4)), np.zeros((10, 5)))
    with pytest.raises(DimensionMismatchError):
        kid(np.zeros((1, 4)), np.zeros((10, 4)))


# --- lpips -----------------------------------------------------------------------


def test_lpips_identical_is_zero():
    img = _img(np.random.default_rng(10).integers(0, 256, (16, 16, 3)))
    assert lpips(img, img, identity_layer_extractor) == 0.0


def test_lpips_missing_adapter():
    img = _img(np.zeros((4, 4)))
    with pytest.raises(AdapterError):
        lpips(img, img, None)


def test_lpips_hand_computation_on_4dim_features():
    # single spatial location, 4 channels taken from the first row of pixels
    def four_dim(img):
        return [img.pixels.reshape(-1)[:4].astype(np.float64).reshape(4, 1, 1) / 255.0]

    a = _img(np.array([[255, 0, 0, 0]]))
    b = _img(np.array([[255, 255, 0, 0]]))
    # unit vectors (1,0,0,0) and (1,1,0,0)/sqrt(2): squared distance 2 - sqrt(2)
    assert lpips(a, b, four_dim) == pytest.approx(2.0 - np.sqrt(2.0), abs=1e-12)


# --- extractors & report -----------------------------------------------------------


def test_mock_extractor_deterministic_and_sized():
    img = _img(np.random.default_rng(11).integers(0, 256, (32, 32)))
    f1, f2 = mock_feature_extractor(img), mock_feature_extractor(img)
    assert f1.shape == (16,)
    assert np.array_equal(f1, f2)


def test_evaluate_pairs_report():
    rng = np.random.default_rng(12)
    pairs = [
        (_img(rng.integers(0, 256, (16, 16))), _img(rng.integers(0, 256, (16, 16))))
        for _ in range(3)
    ]
    report = evaluate_pairs(
        pairs,
        which=("psnr", "ssim", "lpips", "fid", "kid"),
        feature_extractor=mock_feature_extractor,
        lpips_extractor=identity_layer_extractor,
        extractor_id="mock-pooled-v1",
    )
    assert report.item_count == 3
    assert {"psnr", "ssim", "lpips"} <= set(report.per_item[0])
    assert "fid" in report.aggregate and "kid" in report.aggregate
    assert report.extractor_id == "mock-pooled-v1"
    table = report.to_table()
    assert "aggregate" in table and "psnr" in table


def test_evaluate_pairs_notes_missing_adapters():
    img = _img(np.zeros((8, 8)))
    report = evaluate_pairs([(img, img)], which=("lpips", "fid"))
    assert any("lpips" in n for n in report.notes)
    assert any("fid" in n for n in report.notes)
    assert "lpips" not in report.per_item[0]


def test_grayscale_replicated_for_features():
    gray = _img(np.random.default_rng(13).integers(0, 256, (16, 16)))
    layers = identity_layer_extractor(gray)
    assert layers[0].shape == (3, 16, 16)
    feats = extract_feature_set([gray, gray], mock_feature_extractor)
    assert feats.shape == (2, 16)
