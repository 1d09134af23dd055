# test_stereo_data.py
import numpy as np
import pytest

from metrics import bmp
from stereo_data import (ConfidenceKind, CostKind, CostVolume, StereoSample, SynthConfig, bilinear_warp,
                         census_transform, compute_raw_cost, crop_sample, ground_truth_confidence, hamming,
                         planar_scene, raw_cost_pipeline, sgm_aggregate, synth_dataset, synth_scene,
                         to_luma_chroma, wta_disparity)


# --- census -------------------------------------------------------------------

def test_census_constant_image_is_zero():
    assert not census_transform(np.full((5, 6), 0.4), 3).any()


def test_census_center_code():
    patch = np.arange(1, 10, dtype=np.float64).reshape(3, 3) / 9.0
    assert census_transform(patch, 3)[1, 1] == 0b11110000


def test_census_shift_invariant(rng):
    img = rng.uniform(0, 0.5, (8, 9))
    np.testing.assert_array_equal(census_transform(img, 5), census_transform(img + 0.25, 5))


def test_census_even_window():
    with pytest.raises(ValueError):
        census_transform(np.zeros((4, 4)), 4)


@pytest.mark.parametrize("remap", [np.sqrt, np.log1p, lambda x: 0.2 + 3.0 * x ** 3])
def test_census_invariant_under_increasing_remap(rng, remap):
    img = rng.uniform(0, 1, (9, 10))
    for window in (3, 5, 7):
        np.testing.assert_array_equal(census_transform(remap(img), window), census_transform(img, window))


def test_hamming_popcount():
    assert hamming(np.uint64(0b1010), np.uint64(0b0110)) == 2


# --- raw cost -----------------------------------------------------------------

def test_identical_images_zero_cost_at_d0(rng):
    img = rng.uniform(0, 1, (10, 12, 3))
    sample = StereoSample(img, img.copy(), np.zeros((10, 12)), np.ones((10, 12), bool), d_max=3)
    cost = compute_raw_cost(sample, 5)
    assert cost.kind is CostKind.RAW
    assert cost.d_max == 3
    np.testing.assert_array_equal(cost.data[..., 0], 0.0)
    assert cost.data.min() >= 0.0 and cost.data.max() <= 1.0


@pytest.mark.parametrize("channels", [None, 3])
def test_raw_cost_stays_in_unit_interval(rng, channels):
    shape = (9, 11) if channels is None else (9, 11, channels)
    sample = StereoSample(rng.uniform(size=shape), rng.uniform(size=shape), np.zeros((9, 11)),
                          np.ones((9, 11), bool), d_max=6)
    for window in (3, 5, 7):
        cost = compute_raw_cost(sample, window).data
        assert cost.shape == (9, 11, 6)
        assert cost.min() >= 0.0 and cost.max() <= 1.0


def test_shifted_plane_argmin_recovers_shift():
    sample = planar_scene(seed=2, h=64, w=64, d_max=8, disparity=2)
    d = wta_disparity(compute_raw_cost(sample, 5))
    interior = d[4:-4, 12:-4]
    assert np.mean(interior == 2) >= 0.95


def test_raw_cost_requires_two_candidates():
    img = np.zeros((4, 4, 3))
    sample = StereoSample(img, img, np.zeros((4, 4)), np.ones((4, 4), bool), d_max=1)
    with pytest.raises(ValueError):
        compute_raw_cost(sample, 3)


# --- SGM ------------------------------------------------------------------------

def test_sgm_hand_oracle():
    cost = CostVolume(np.array([[[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]]))
    out = sgm_aggregate(cost, p1=0.5, p2=1.0, paths=1)
    np.testing.assert_array_equal(out.data[0], [[0.0, 1.0], [1.0, 0.5], [0.5, 1.0]])


def _brute_force_path(costs, p1, p2):
    """Scalar reference for one left-to-right path over a single row."""
    w, dn = costs.shape
    out = np.zeros_like(costs)
    out[0] = costs[0]
    for x in range(1, w):
        prev_min = min(out[x - 1])
        for d in range(dn):
            candidates = [out[x - 1][d], prev_min + p2]
            if d > 0:
                candidates.append(out[x - 1][d - 1] + p1)
            if d < dn - 1:
                candidates.append(out[x - 1][d + 1] + p1)
            out[x][d] = costs[x][d] + min(candidates) - prev_min
    return out


def test_sgm_matches_brute_force_dp(rng):
    for _ in range(20):
        row = rng.uniform(0, 1, (8, 4))
        out = sgm_aggregate(CostVolume(row[None]), p1=0.1, p2=0.4, paths=1)
        np.testing.assert_allclose(out.data[0], _brute_force_path(row, 0.1, 0.4), atol=1e-12)


def test_four_paths_average_four_single_path_runs(rng):
    vol = rng.uniform(0, 1, (6, 6, 4))
    p1, p2 = 0.1, 0.4

    def sweep(lines):
        return np.stack([_brute_force_path(line, p1, p2) for line in lines])

    left_right = sweep(vol)
    right_left = sweep(vol[:, ::-1])[:, ::-1]
    top_bottom = sweep(vol.transpose(1, 0, 2)).transpose(1, 0, 2)
    bottom_top = sweep(vol[::-1].transpose(1, 0, 2)).transpose(1, 0, 2)[::-1]
    expected = (left_right + right_left + top_bottom + bottom_top) / 4.0
    out = sgm_aggregate(CostVolume(vol), p1, p2, paths=4)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    two = sgm_aggregate(CostVolume(vol), p1, p2, paths=2)
    np.testing.assert_allclose(two.data, (left_right + right_left) / 2.0, atol=1e-12)


def test_sgm_zero_cost_stays_zero():
    out = sgm_aggregate(CostVolume(np.zeros((4, 5, 3))), p1=0.3, p2=0.9, paths=4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_sgm_rejects_p1_above_p2():
    with pytest.raises(ValueError):
        sgm_aggregate(CostVolume(np.zeros((2, 2, 2))), p1=0.5, p2=0.1)


def test_raw_cost_pipeline_uses_cached_volume(plane, cost_cfg):
    cached = CostVolume(np.full(plane.shape + (plane.d_max,), 0.5))
    plane.raw_cost = cached
    assert raw_cost_pipeline(plane, cost_cfg) is cached


# --- WTA / ground-truth confidence -----------------------------------------------

def test_wta_one_hot_and_ties(rng):
    one_hot = np.ones((1, 1, 6))
    one_hot[0, 0, 3] = 0.0
    assert wta_disparity(CostVolume(one_hot))[0, 0] == 3
    assert wta_disparity(CostVolume(np.ones((2, 2, 4)))).max() == 0
    vol = rng.uniform(size=(4, 4, 5))
    expected = [[min(range(5), key=lambda d: vol[y, x, d]) for x in range(4)] for y in range(4)]
    np.testing.assert_array_equal(wta_disparity(CostVolume(vol)), expected)


def test_ground_truth_confidence_threshold():
    gt = np.full((2, 2), 3.0)
    est = gt + np.array([[0.2, 1.5], [0.9, 0.89]])
    q = ground_truth_confidence(est, gt, np.ones((2, 2), bool), rho=0.9)
    assert q.kind is ConfidenceKind.GROUND_TRUTH
    np.testing.assert_array_equal(q.data, [[1, 0], [0, 1]])


def test_ground_truth_confidence_invalid_pixels_are_zero_and_flagged():
    valid = np.array([[True, False]])
    q = ground_truth_confidence(np.zeros((1, 2)), np.zeros((1, 2)), valid)
    np.testing.assert_array_equal(q.data, [[1, 0]])
    np.testing.assert_array_equal(q.valid, valid)


def test_ground_truth_confidence_is_a_projection_and_grows_with_rho(rng):
    gt = rng.uniform(0, 7, (8, 8))
    est = gt + rng.normal(0, 1.5, (8, 8))
    valid = rng.uniform(size=(8, 8)) < 0.8
    previous = np.zeros((8, 8))
    for rho in (0.25, 0.5, 0.9, 1.5, 3.0):
        q = ground_truth_confidence(est, gt, valid, rho).data
        assert np.all(q >= previous)
        again = ground_truth_confidence(q, np.ones((8, 8)), valid, 0.5).data
        np.testing.assert_array_equal(again, q)
        previous = q


def test_ground_truth_confidence_shape_mismatch():
    with pytest.raises(ValueError):
        ground_truth_confidence(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), bool))


# --- warping --------------------------------------------------------------------

def test_warp_zero_disparity_is_identity(rng):
    img = rng.uniform(size=(3, 5, 3))
    np.testing.assert_array_equal(bilinear_warp(img, np.zeros((3, 5))), img)


def test_warp_left_clamp_and_interpolation():
    row = np.array([[10.0, 20.0, 30.0]])
    np.testing.assert_allclose(bilinear_warp(row, np.ones((1, 3))), [[10.0, 10.0, 20.0]])
    half = bilinear_warp(row, np.array([[0.0, 0.5, 0.0]]))
    assert half[0, 1] == pytest.approx(15.0)


def test_warp_rejects_non_finite_disparity():
    with pytest.raises(ValueError):
        bilinear_warp(np.zeros((1, 3)), np.array([[0.0, np.nan, 0.0]]))


# --- synthetic scenes ------------------------------------------------------------

def test_synth_scene_is_deterministic():
    a = synth_scene(9, 32, 32, 8, 3)
    b = synth_scene(9, 32, 32, 8, 3)
    for field in ("left", "right", "gt_disparity", "gt_valid"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def test_synth_scene_without_layers_is_a_single_plane():
    s = synth_scene(4, 32, 32, 8, 0)
    assert np.unique(s.gt_disparity).size == 1


def test_synth_scene_left_matches_right_on_valid_pixels():
    s = synth_scene(12, 32, 32, 8, 3)
    ys, xs = np.nonzero(s.gt_valid)
    xr = xs - s.gt_disparity[ys, xs].astype(int)
    np.testing.assert_array_equal(s.left[ys, xs], s.right[ys, xr])


def test_synth_census_wta_quality():
    s = synth_scene(1, 64, 64, 8, 3)
    d = wta_disparity(compute_raw_cost(s, 5))
    assert bmp(d, s.gt_disparity, s.gt_valid, 1.0) < 25.0


def test_synth_dataset_independent_of_workers():
    serial = synth_dataset(SynthConfig(count=3, height=16, width=16, d_max=4, n_layers=1, workers=1), seed=2)
    pooled = synth_dataset(SynthConfig(count=3, height=16, width=16, d_max=4, n_layers=1, workers=3), seed=2)
    assert [s.name for s in serial] == ["scene_0000", "scene_0001", "scene_0002"]
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.left, b.left)
        assert a.seed == b.seed


def test_sample_rejects_out_of_range_ground_truth():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        StereoSample(img, img, np.full((4, 4), 5.0), np.ones((4, 4), bool), d_max=4)


# --- helpers ---------------------------------------------------------------------

def test_luma_chroma_of_grey():
    ycc = to_luma_chroma(np.full((2, 2, 3), 0.3))
    np.testing.assert_allclose(ycc[..., 0], 0.3)
    np.testing.assert_allclose(ycc[..., 1:], 0.5)


def test_crop_sample_crops_cached_cost(plane, cost_cfg):
    plane.raw_cost = raw_cost_pipeline(plane, cost_cfg)
    crop = crop_sample(plane, 4, 8, 8)
    assert crop.shape == (8, 8)
    np.testing.assert_array_equal(crop.raw_cost.data, plane.raw_cost.data[4:12, 8:16])
    np.testing.assert_array_equal(crop.left, plane.left[4:12, 8:16])
