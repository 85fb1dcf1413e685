import numpy as np
import pytest

from fovmet.geometry import PoolingConfig, RegionInfo, RegionMask, PoolingMasks, build_pooling_masks
from fovmet.iqa import (
    MS_WEIGHTS,
    export_region_scores,
    iw_ssim,
    ms_ssim,
    pooled_iw_ssim,
    pooled_ms_ssim,
    pooled_score,
    ssim_map,
)

LUMA = np.array([0.299, 0.587, 0.114])


def naive_ssim_map(a, b, window_size=11, sigma=1.5, dynamic_range=1.0):
    """Windowed double-loop SSIM oracle with symmetric boundary padding."""
    half = window_size // 2
    x = np.arange(window_size) - (window_size - 1) / 2.0
    k1 = np.exp(-(x**2) / (2 * sigma**2))
    k1 /= k1.sum()
    kernel = np.outer(k1, k1)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    ap = np.pad(a.astype(np.float64), half, mode="symmetric")
    bp = np.pad(b.astype(np.float64), half, mode="symmetric")
    out = np.zeros_like(a, dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = ap[i : i + window_size, j : j + window_size]
            wb = bp[i : i + window_size, j : j + window_size]
            mu_a = (kernel * wa).sum()
            mu_b = (kernel * wb).sum()
            va = (kernel * wa * wa).sum() - mu_a**2
            vb = (kernel * wb * wb).sum() - mu_b**2
            cov = (kernel * wa * wb).sum() - mu_a * mu_b
            out[i, j] = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
            )
    return out


@pytest.fixture(scope="module")
def banks128():
    return build_pooling_masks(PoolingConfig(scale=0.5, image_size=128, min_region_area=10))


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a = rng.random((16, 16))
        b = np.clip(a + rng.normal(0, 0.2, size=(16, 16)), 0, 1)
        got = ssim_map(a, b)
        want = naive_ssim_map(a, b)
        worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-6, f"worst oracle deviation {worst}"


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(5)
    a = rng.random((32, 32))
    b = rng.random((32, 32))
    assert np.allclose(ssim_map(a, a), 1.0, atol=1e-12)
    assert np.array_equal(ssim_map(a, b), ssim_map(b, a))


def test_ssim_bounded():
    rng = np.random.default_rng(6)
    a = rng.random((24, 24))
    b = 1.0 - a
    m = ssim_map(a, b)
    assert m.min() >= -1.0 - 1e-12
    assert m.max() <= 1.0 + 1e-12


def test_ssim_color_uses_luma():
    rng = np.random.default_rng(7)
    a = rng.random((3, 20, 20))
    b = rng.random((3, 20, 20))
    direct = ssim_map(a, b)
    via_luma = ssim_map(np.tensordot(LUMA, a, axes=1), np.tensordot(LUMA, b, axes=1))
    assert np.array_equal(direct, via_luma)


def test_ssim_window_configurable():
    rng = np.random.default_rng(8)
    a = rng.random((24, 24))
    b = np.clip(a + rng.normal(0, 0.1, (24, 24)), 0, 1)
    assert not np.allclose(ssim_map(a, b), ssim_map(a, b, window_size=7, sigma=1.0))


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        ssim_map(np.zeros((8, 8)), np.zeros((9, 9)))


def test_ssim_same_size_as_input():
    a = np.random.default_rng(0).random((17, 23))
    assert ssim_map(a, a).shape == (17, 23)


# --- pooled scores ----------------------------------------------------------


def test_pooled_unit_map(banks128):
    scores = pooled_score(np.ones((128, 128)), banks128)
    assert not scores.absent.any()
    assert np.allclose(scores.region_scores, 1.0, atol=1e-12)
    for ring, val in scores.ring_curve():
        assert val == pytest.approx(1.0)


def test_pooled_single_full_mask_is_global_mean():
    cfg = PoolingConfig(scale=0.5, image_size=32, min_region_area=1)
    full = RegionMask(
        RegionInfo(ring=0, wedge=0, is_fovea=False, z_degrees=1.0, center_eccentricity=1.0),
        (0, 32, 0, 32),
        np.ones((32, 32), dtype=np.float32),
    )
    bank = PoolingMasks(config=cfg, resolution=32, regions=(full,))
    rng = np.random.default_rng(3)
    m = rng.random((32, 32))
    scores = pooled_score(m, bank)
    assert scores.region_scores[0] == pytest.approx(m.mean(), abs=1e-9)


def test_pooled_indicator_map_localizes(banks128):
    probe = banks128.regions[0]
    scores = pooled_score(probe.dense(128), banks128)
    assert scores.region_scores[0] > 0.5
    # windows that do not touch the probe window score zero
    probe_area = probe.dense(128) > 0
    for i, region in enumerate(banks128.regions[:-1]):
        if i == 0:
            continue
        overlap = np.logical_and(region.dense(128) > 0, probe_area).sum()
        if overlap == 0:
            assert scores.region_scores[i] == pytest.approx(0.0, abs=1e-12)


def test_pooled_empty_region_flagged_absent():
    cfg = PoolingConfig(scale=0.5, image_size=32, min_region_area=1)
    live = RegionMask(
        RegionInfo(ring=0, wedge=0, is_fovea=False, z_degrees=1.0, center_eccentricity=1.0),
        (0, 32, 0, 32),
        np.ones((32, 32), dtype=np.float32),
    )
    dead = RegionMask(
        RegionInfo(ring=0, wedge=1, is_fovea=False, z_degrees=1.0, center_eccentricity=1.0),
        (0, 4, 0, 4),
        np.zeros((4, 4), dtype=np.float32),
    )
    bank = PoolingMasks(config=cfg, resolution=32, regions=(live, dead))
    scores = pooled_score(np.full((32, 32), 0.5), bank)
    assert scores.absent[1]
    assert np.isnan(scores.region_scores[1])
    assert scores.ring_scores[0] == pytest.approx(0.5)


def test_pooled_region_order_invariance(banks128):
    m = np.random.default_rng(9).random((128, 128))
    forward = pooled_score(m, banks128)
    reversed_bank = PoolingMasks(
        config=banks128.config,
        resolution=banks128.resolution,
        regions=tuple(reversed(banks128.regions)),
    )
    backward = pooled_score(m, reversed_bank)
    assert np.allclose(forward.region_scores, backward.region_scores[::-1], equal_nan=True)
    assert forward.ring_scores == pytest.approx(backward.ring_scores)


def test_pooled_resolution_mismatch(banks128):
    with pytest.raises(ValueError, match="resolution"):
        pooled_score(np.ones((64, 64)), banks128)


# --- multi-scale metrics ----------------------------------------------------


def test_multiscale_identity_symmetry_bounded():
    rng = np.random.default_rng(12)
    a = rng.random((192, 192))
    b = np.clip(a + rng.normal(0, 0.15, a.shape), 0, 1)
    for metric in (ms_ssim, iw_ssim):
        assert metric(a, a).value == pytest.approx(1.0, abs=1e-9)
        assert metric(a, b).value == pytest.approx(metric(b, a).value, abs=1e-12)
        assert 0.0 <= metric(a, b).value <= 1.0


def test_multiscale_minimum_size_named():
    small = np.zeros((64, 64))
    with pytest.raises(ValueError, match="176"):
        ms_ssim(small, small)
    with pytest.raises(ValueError, match="176"):
        iw_ssim(small, small)


def test_multiscale_weights_sum_to_one():
    assert sum(MS_WEIGHTS) == pytest.approx(1.0, abs=1e-4)


def test_ms_ssim_decreases_with_distortion():
    rng = np.random.default_rng(13)
    a = rng.random((192, 192))
    mild = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    harsh = np.clip(a + rng.normal(0, 0.4, a.shape), 0, 1)
    assert ms_ssim(a, mild).value > ms_ssim(a, harsh).value


def test_pooled_iw_asymptotes_to_pooled_ms():
    # Over a window small relative to the image, the information weighting
    # is nearly constant, so the two pooled scores approach each other.
    rng = np.random.default_rng(14)
    masks = build_pooling_masks(
        PoolingConfig(scale=0.5, image_size=512, min_region_area=100)
    )
    yy, xx = np.mgrid[0:512, 0:512] / 512.0
    a = 0.5 + 0.3 * np.sin(14 * np.pi * xx) * np.cos(10 * np.pi * yy)
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    iw = pooled_iw_ssim(a, b, masks)
    ms = pooled_ms_ssim(a, b, masks)
    live = ~iw.absent & ~ms.absent
    gaps = np.abs(iw.region_scores[live] - ms.region_scores[live])
    assert np.median(gaps) < 0.05
    global_gap = abs(iw_ssim(a, b).value - ms_ssim(a, b).value)
    assert np.median(gaps) <= global_gap + 0.05


def test_export_region_scores(tmp_path, banks128):
    scores = pooled_score(np.ones((128, 128)), banks128)
    path = tmp_path / "scores.tsv"
    export_region_scores(scores, banks128, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0].split("\t") == ["region", "ring", "wedge", "z_degrees", "score"]
    assert len(lines) == len(banks128) + 1
