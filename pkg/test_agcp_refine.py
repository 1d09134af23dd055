# test_agcp_refine.py
import numpy as np
import pytest
from scipy import sparse

from agcp_refine import EPS_REG, AgcpConfig, build_system, cg_solve, energy, refine
from metrics import bmp
from stereo_data import synth_scene

# huge spatial bandwidth and a flat image make every kernel exactly 1
UNIT = dict(sigma_color=1.0, sigma_space=1e9)


def _two_pixel_system():
    d = np.array([[5.0, 0.0]])
    q = np.array([[0.9, 0.1]])
    img = np.full((1, 2, 3), 0.5)
    return build_system(d, q, img, AgcpConfig(tau=0.7, gamma=1.0, radius_m=0, **UNIT))


def test_two_pixel_hand_assembly():
    system = _two_pixel_system()
    np.testing.assert_allclose(system.A.toarray(), [[2 + EPS_REG, -1.0], [-1.0, 1 + EPS_REG]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(system.b, [5.0, 0.0])
    np.testing.assert_array_equal(system.gcp, [[True, False]])


def test_two_pixel_hand_solve():
    system = _two_pixel_system()
    result = cg_solve(system.A, system.b, tol=1e-12)
    assert result.converged
    np.testing.assert_allclose(result.x, [5.0, 5.0], atol=1e-6)


def test_no_gcps_leaves_only_regulariser():
    system = build_system(np.ones((3, 3)), np.zeros((3, 3)), np.zeros((3, 3, 3)), AgcpConfig())
    np.testing.assert_array_equal(system.b, 0.0)
    np.testing.assert_array_equal(system.data_diag, 0.0)
    # Laplacian rows sum to zero, so each row of A sums to the regulariser
    np.testing.assert_allclose(np.asarray(system.A.sum(axis=1)).ravel(), EPS_REG, rtol=1e-6)


def test_cg_identity_returns_rhs(rng):
    b = rng.standard_normal(10)
    result = cg_solve(sparse.identity(10, format="csr"), b)
    np.testing.assert_allclose(result.x, b, atol=1e-10)


def test_cg_matches_dense_solve(rng):
    for n in (5, 50, 100):
        m = rng.standard_normal((n, n))
        a = m @ m.T + n * np.eye(n)
        b = rng.standard_normal(n)
        result = cg_solve(sparse.csr_matrix(a), b, tol=1e-12, max_iter=10 * n)
        np.testing.assert_allclose(result.x, np.linalg.solve(a, b), atol=1e-6)


def test_cg_non_convergence_returns_best_iterate(rng):
    n = 60
    a = np.diag(np.logspace(0, 6, n))
    b = rng.standard_normal(n)
    result = cg_solve(sparse.csr_matrix(a), b, tol=1e-14, max_iter=3)
    assert not result.converged
    assert result.iterations == 3
    assert np.linalg.norm(a @ result.x - b) == pytest.approx(result.residual_norm, rel=1e-6)
    assert result.residual_norm <= np.linalg.norm(b)


def test_all_gcps_without_smoothing_reproduce_input(rng):
    d = rng.uniform(0, 7, (5, 6))
    cfg = AgcpConfig(tau=0.5, gamma=1e-12, radius_m=0, cg_tol=1e-14)
    out = refine(d, np.ones((5, 6)), rng.uniform(size=(5, 6, 3)), cfg)
    np.testing.assert_allclose(out.disparity, d, atol=1e-6)


def test_constant_scene_stays_constant(rng):
    d = np.full((8, 8), 3.0)
    q = np.zeros((8, 8))
    q[::3, ::3] = 1.0
    noisy = d + rng.normal(0, 1, (8, 8)) * (q == 0)
    out = refine(noisy, q, np.full((8, 8, 3), 0.4), AgcpConfig(tau=0.7, cg_tol=1e-14, cg_max_iter=5000))
    np.testing.assert_allclose(out.disparity, 3.0, atol=1e-6)


def test_unanchored_component_falls_back_to_input():
    # two flat regions with a colour jump so sharp that the edge weights underflow to 0
    img = np.zeros((2, 4, 3))
    img[:, 2:] = 1.0
    d = np.array([[1.0, 1.0, 6.0, 7.0], [1.0, 1.0, 5.0, 4.0]])
    q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
    cfg = AgcpConfig(tau=0.5, radius_m=1, sigma_color=0.01, cg_tol=1e-14)
    out = refine(d, q, img, cfg)
    np.testing.assert_allclose(out.disparity[:, :2], 1.0, atol=1e-6)
    np.testing.assert_array_equal(out.disparity[:, 2:], d[:, 2:])


def test_refinement_does_not_increase_energy(rng):
    for seed in range(50):
        s = synth_scene(seed, 16, 16, 4, 2)
        d = s.gt_disparity + rng.normal(0, 0.8, s.shape)
        q = rng.uniform(size=s.shape)
        cfg = AgcpConfig(radius_m=1, cg_tol=1e-12)
        out = refine(d, q, s.left, cfg)
        assert energy(out.disparity, out.system) <= energy(d, out.system) + 1e-9


def test_refinement_with_true_confidence_reduces_bad_pixels():
    rng = np.random.default_rng(0)
    improved = 0
    for seed in range(10):
        s = synth_scene(100 + seed, 32, 32, 8, 3)
        d = s.gt_disparity.copy()
        wrong = rng.uniform(size=s.shape) < 0.3
        d[wrong] += rng.choice([-3.0, 3.0], size=int(wrong.sum()))
        q = (~wrong).astype(float)
        out = refine(d, q, s.left, AgcpConfig(tau=0.5, radius_m=2, cg_tol=1e-10))
        if bmp(out.disparity, s.gt_disparity, s.gt_valid, 1.0) < bmp(d, s.gt_disparity, s.gt_valid, 1.0):
            improved += 1
    assert improved >= 9


def test_shape_mismatch():
    with pytest.raises(ValueError):
        build_system(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2, 3)), AgcpConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        AgcpConfig(gamma=0.0)
    with pytest.raises(ValueError):
        AgcpConfig(radius_m=-1)


@pytest.mark.parametrize("seed, sigma_color", [(0, 0.1), (1, 0.5), (2, 0.5), (3, 2.0)])
def test_refined_values_stay_within_gcp_range(seed, sigma_color):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 7, (10, 10))
    q = rng.uniform(size=(10, 10))
    cfg = AgcpConfig(tau=0.7, radius_m=0, sigma_color=sigma_color, cg_tol=1e-13, cg_max_iter=5000)
    out = refine(d, q, rng.uniform(size=(10, 10, 3)), cfg)
    lo, hi = d[q > 0.7].min(), d[q > 0.7].max()
    moved = out.disparity != d
    assert np.all(out.disparity[moved] >= lo - 1e-6)
    assert np.all(out.disparity[moved] <= hi + 1e-6)


def test_weakly_coupled_pole_keeps_its_disparity():
    img = np.full((16, 16, 3), 0.5)
    img[4:12, 8] = 1.0
    d = np.full((16, 16), 3.0)
    q = np.ones((16, 16))
    q[4:12, 8] = 0.0
    out = refine(d, q, img, AgcpConfig())
    np.testing.assert_allclose(out.disparity, 3.0, atol=1e-6)


def test_refinement_is_linear_in_disparity(rng):
    s = synth_scene(9, 16, 16, 4, 2)
    d = rng.uniform(0, 3, s.shape)
    q = rng.uniform(size=s.shape)
    cfg = AgcpConfig(radius_m=1, cg_tol=1e-13, cg_max_iter=5000)
    base = refine(d, q, s.left, cfg).disparity
    np.testing.assert_allclose(refine(2.5 * d, q, s.left, cfg).disparity, 2.5 * base, atol=1e-6)
    np.testing.assert_allclose(refine(d + 4.0, q, s.left, cfg).disparity, base + 4.0, atol=1e-6)
