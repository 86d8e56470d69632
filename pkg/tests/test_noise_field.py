import numpy as np
import pytest

from flowdistill.errors import ConfigurationError, DomainError
from flowdistill.noise_field import (
    Camera,
    CameraSampler,
    WorldMapNoise,
    constant_noise_query,
    marginal_stats_probe,
    overlap_alignment_probe,
    r_plus,
    window_indices,
    window_match_radius,
    world_map_query,
)
from flowdistill.prng import RandomStream

FOV40 = np.deg2rad(40.0)


def make_field(seed=0, beta=1.0, theta_extent=np.pi / 2, channels=1):
    return WorldMapNoise.create(RandomStream(seed, 3), channels=channels,
                                patch_hw=(8, 8), theta_extent=theta_extent,
                                beta=beta)


def cam(theta=np.pi / 2, phi=np.pi, r=2.5, fov=FOV40):
    return Camera(fov=fov, r_cam=r, theta=theta, phi=phi)


def test_camera_validation():
    with pytest.raises(ConfigurationError):
        Camera(fov=0.0, r_cam=1.0, theta=0.5, phi=0.0)
    with pytest.raises(ConfigurationError):
        Camera(fov=1.0, r_cam=-1.0, theta=0.5, phi=0.0)
    with pytest.raises(ConfigurationError):
        Camera(fov=1.0, r_cam=1.0, theta=4.0, phi=0.0)
    with pytest.raises(ConfigurationError):
        Camera(fov=1.0, r_cam=1.0, theta=0.5, phi=7.0)


def test_map_dimensions_from_angular_extent():
    f = make_field()
    assert f.map_hw == (16, 32)
    assert f.patch_hw == (8, 8)
    f2 = make_field(theta_extent=np.pi / 16)
    assert f2.map_hw == (128, 256)


def test_window_center_arithmetic():
    # patch 8x8, Theta=pi/2 (map 16x32); theta=pi/2, phi=pi lands on the
    # window rows 4..11, cols 12..19
    f = make_field()
    rows, cols = window_indices(f, cam())
    assert np.array_equal(rows, np.arange(4, 12))
    assert np.array_equal(cols, np.arange(12, 20))
    q = world_map_query(f, cam(), np.ones((1, 8, 8)))
    assert np.array_equal(q, f.eps_panorama[:, 4:12, 12:20])


def test_masked_background_branch():
    f = make_field()
    q = world_map_query(f, cam(), np.zeros((1, 8, 8)))
    assert np.array_equal(q, f.eps_background)
    # mixed mask picks per-pixel
    m = np.zeros((1, 8, 8))
    m[0, :4] = 1.0
    q2 = world_map_query(f, cam(), m)
    assert np.array_equal(q2[:, :4], f.eps_panorama[:, 4:8, 12:20])
    assert np.array_equal(q2[:, 4:], f.eps_background[:, 4:])


def test_beta_zero_is_fresh_noise():
    f = make_field(beta=0.0)
    rng = RandomStream(1, 4)
    a = world_map_query(f, cam(), np.ones((1, 8, 8)), rng)
    b = world_map_query(f, cam(), np.ones((1, 8, 8)), rng)
    assert not np.array_equal(a, b)
    with pytest.raises(ConfigurationError):
        world_map_query(f, cam(), np.ones((1, 8, 8)))  # needs rng


def test_beta_one_is_pure_function():
    f1 = make_field(seed=7)
    f2 = make_field(seed=7)
    m = np.ones((1, 8, 8))
    assert np.array_equal(world_map_query(f1, cam(), m),
                          world_map_query(f2, cam(), m))


def test_unit_variance_mixing():
    # conditional on the deterministic part: mean sqrt(beta)*det, var 1-beta
    f = make_field(seed=2, beta=0.5)
    det = world_map_query(make_field(seed=2, beta=1.0), cam(), np.ones((1, 8, 8)))
    rng = RandomStream(3, 4)
    qs = np.stack([world_map_query(f, cam(), np.ones((1, 8, 8)), rng)
                   for _ in range(4000)])
    assert np.max(np.abs(qs.mean(axis=0) - np.sqrt(0.5) * det)) <= 0.06
    assert np.max(np.abs(qs.var(axis=0) - 0.5)) <= 0.06


def test_constant_noise_query():
    eps = RandomStream(4, 1).normal((3, 8, 8))
    a = constant_noise_query(eps, cam(phi=0.1))
    b = constant_noise_query(eps, cam(phi=3.0), mask=np.ones((1, 8, 8)))
    assert np.array_equal(a, b)
    assert np.array_equal(a, eps)
    flat = a.ravel()
    assert abs(np.corrcoef(flat, flat)[0, 1] - 1.0) <= 1e-12


def test_field_validation():
    with pytest.raises(ConfigurationError):
        make_field(theta_extent=0.0)
    with pytest.raises(ConfigurationError):
        WorldMapNoise(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.pi, 1.5)
    f = make_field()
    with pytest.raises(ConfigurationError):
        world_map_query(f, cam(), np.ones((1, 4, 4)))


def test_r_plus_special_cases():
    # 2 tan(fov/2) == Theta makes the ratio exactly 1/2
    fov_eq = 2.0 * np.arctan(np.pi / 4.0)
    rt, rp = r_plus(Camera(fov_eq, 1.0, np.pi / 2, 0.0), np.pi / 2)
    assert np.isclose(rt, 0.5)
    assert np.isclose(rp, rt)  # sin(theta)=1 on the equator
    rt2, _ = r_plus(Camera(FOV40, 1.0, np.pi / 2, 0.0), np.pi / 2)
    assert np.isclose(rt2, 0.3167, atol=5e-4)


def test_r_plus_off_equator():
    c = Camera(FOV40, 2.0, np.pi / 3, 0.0)
    rt, rp = r_plus(c, np.pi / 2)
    g = 2.0 * np.tan(FOV40 / 2)
    assert np.isclose(rp, g / (g + (np.pi / 2) * np.sin(np.pi / 3)) * 2.0)
    assert rp > rt  # smaller effective window speed in azimuth


def test_window_match_radius_agrees_with_formula():
    c = Camera(FOV40, 2.5, np.pi / 2, 0.0)
    for ext in (np.pi / 3, np.pi):
        rt, rp = r_plus(c, ext)
        assert abs(window_match_radius(c, ext, (8, 8), "phi") - rp) / rp <= 0.10
        assert abs(window_match_radius(c, ext, (8, 8), "theta") - rt) / rt <= 0.10
    with pytest.raises(ConfigurationError):
        window_match_radius(c, np.pi, (8, 8), "roll")


def test_overlap_probe_identical_and_disjoint():
    f = make_field(seed=5)
    a = cam(phi=1.0)
    assert overlap_alignment_probe(f, a, a) == (1.0, 1.0)
    b = cam(phi=1.0 + np.pi / 2)  # a full patch width away
    overlap, rho = overlap_alignment_probe(f, a, b)
    assert overlap == 0.0 and rho == 0.0


def test_overlap_probe_half_window():
    # dphi = Theta/2 shifts the window by half its width
    overlaps, rhos = [], []
    for seed in range(20):
        f = make_field(seed=seed)
        a = cam(phi=1.0)
        b = cam(phi=1.0 + np.pi / 4)
        overlap, rho = overlap_alignment_probe(f, a, b)
        overlaps.append(overlap)
        rhos.append(rho)
    assert all(o == 0.5 for o in overlaps)
    assert abs(np.mean(rhos) - 0.5) <= 0.1  # empirical, unit-variance texels


def test_correlation_decay_monotone():
    f = make_field(seed=6)
    base = cam(phi=0.0)
    overlaps = []
    for dphi in np.linspace(0.0, np.pi / 2, 16):
        other = cam(phi=float(dphi))
        overlap, _ = overlap_alignment_probe(f, base, other)
        overlaps.append(overlap)
    assert all(overlaps[i + 1] <= overlaps[i] + 1e-12 for i in range(15))
    # beyond half a window the shared fraction is below one half
    past_half = [o for d, o in zip(np.linspace(0.0, np.pi / 2, 16), overlaps)
                 if d > np.pi / 4]
    assert all(o < 0.5 for o in past_half)


def test_marginal_stats_probe_bounds():
    f = make_field(seed=1, theta_extent=np.pi / 16, channels=3)
    stats = marginal_stats_probe(f, CameraSampler(), 2000, RandomStream(1, 2))
    assert stats["max_abs_mean"] <= 0.12
    assert 0.85 <= stats["var_min"] and stats["var_max"] <= 1.15
    assert abs(stats["adjacent_corr_horizontal"]) <= 0.05
    assert abs(stats["adjacent_corr_vertical"]) <= 0.05
    with pytest.raises(DomainError):
        marginal_stats_probe(f, CameraSampler(), 50, RandomStream(1, 2))
