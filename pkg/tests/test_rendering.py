import numpy as np
import pytest

from roomsdf import autodiff as ad
from roomsdf import fields, rendering
from roomsdf.cli import near_miss_profile


def test_aabb_near_far_inside_box():
    o = np.array([[0.0, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    near, far = rendering.aabb_near_far(o, d)
    assert near[0] == pytest.approx(1e-3)
    assert far[0] == pytest.approx(1.0)


def test_stratified_bins_without_importance():
    near = np.array([0.0, 1.0])
    far = np.array([1.0, 3.0])
    rng = np.random.default_rng(0)
    t, ok = rendering.sample_points(near, far, 8, 0, rng)
    assert ok.all()
    assert t.shape == (2, 8)
    # one sample per bin
    for r in range(2):
        edges = np.linspace(near[r], far[r], 9)
        counts, _ = np.histogram(t[r], bins=edges)
        assert np.all(counts == 1)
    assert np.all(np.diff(t, axis=1) > 0)


def test_sampling_deterministic_under_seed():
    near = np.zeros(3)
    far = np.ones(3)

    def weights(t):
        return np.ones_like(t)

    t1, _ = rendering.sample_points(near, far, 8, 4,
                                    np.random.default_rng(42), weights)
    t2, _ = rendering.sample_points(near, far, 8, 4,
                                    np.random.default_rng(42), weights)
    np.testing.assert_array_equal(t1, t2)


def test_importance_concentrates_on_heavy_segment():
    near = np.zeros(1)
    far = np.ones(1)

    def weights(t):
        # all proposal mass inside [0.4, 0.5]
        return ((t > 0.4) & (t < 0.5)).astype(float)

    rng = np.random.default_rng(1)
    t, _ = rendering.sample_points(near, far, 16, 64, rng, weights)
    extra = t[0][16:]  # merged array is sorted; just count over the support
    inside = ((t[0] >= 0.30) & (t[0] <= 0.60)).sum()
    assert inside >= 0.8 * 64


def test_degenerate_interval_yields_empty_set():
    near = np.array([0.5])
    far = np.array([0.5 + 1e-9])
    t, ok = rendering.sample_points(near, far, 4, 0, np.random.default_rng(0))
    assert not ok[0]
    assert t.shape[1] == 0


# -- densities ----------------------------------------------------------------

def test_laplace_density_boundary_and_asymptotes():
    beta = 0.05
    assert rendering.laplace_density(np.array([0.0]), beta)[0] == \
        pytest.approx(1.0 / (2 * beta))
    assert rendering.laplace_density(np.array([50.0]), beta)[0] == \
        pytest.approx(0.0, abs=1e-12)
    assert rendering.laplace_density(np.array([-50.0]), beta)[0] == \
        pytest.approx(1.0 / beta)


def test_laplace_density_direct_value():
    sigma = rendering.laplace_density(np.array([0.05]), 0.1)
    assert sigma[0] == pytest.approx(5.0 * np.exp(-0.5), rel=1e-12)


def test_laplace_density_continuous_at_zero():
    eps = 1e-12
    lo = rendering.laplace_density(np.array([-eps]), 0.1)[0]
    hi = rendering.laplace_density(np.array([eps]), 0.1)[0]
    assert abs(lo - hi) < 1e-9


def test_unbiased_density_identities():
    s = np.linspace(-0.2, 0.2, 41)
    beta = 0.03
    np.testing.assert_allclose(
        rendering.unbiased_density(s, np.ones_like(s), beta),
        rendering.laplace_density(s, beta), rtol=0, atol=0)
    np.testing.assert_allclose(
        rendering.unbiased_density(s, np.full_like(s, 0.5), beta),
        rendering.laplace_density(2.0 * s, beta), rtol=1e-12)


def test_guided_density_endpoints_and_midpoint():
    s = np.linspace(-0.1, 0.1, 21)
    f = np.full_like(s, 0.2)
    beta = 0.02
    zero = rendering.guided_density(s, f, beta, np.zeros_like(s))
    np.testing.assert_array_equal(zero, rendering.laplace_density(s, beta))
    one = rendering.guided_density(s, f, beta, np.ones_like(s))
    np.testing.assert_array_equal(one,
                                  rendering.unbiased_density(s, f, beta))
    half = rendering.guided_density(s, f, beta, np.full_like(s, 0.5))
    np.testing.assert_allclose(half, rendering.laplace_density(s / 0.6, beta),
                               rtol=1e-12)


# -- compositing ---------------------------------------------------------------

def test_opaque_single_sample():
    t = np.array([[0.8]])
    sigma = np.array([[1e9]])
    res = rendering.composite_ray(t, np.array([0.1]), sigma)
    assert res.opacity[0] == pytest.approx(1.0)
    assert res.weights[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(res.depth, [0.8])


def test_vacuum_is_transparent():
    t = np.tile(np.linspace(0.1, 1.0, 16), (2, 1))
    sigma = np.zeros((2, 16))
    color = np.full((2, 16, 3), 0.7)
    res = rendering.composite_ray(t, np.zeros(2), sigma, color=color)
    np.testing.assert_array_equal(res.opacity, 0.0)
    np.testing.assert_array_equal(res.color, 0.0)


def test_empty_samples_transparent_result():
    res = rendering.composite_ray(np.zeros((3, 0)), np.zeros(3),
                                  np.zeros((3, 0)))
    np.testing.assert_array_equal(res.opacity, 0.0)
    np.testing.assert_array_equal(res.transmittance_end, 1.0)


def test_weight_sum_equals_one_minus_final_transmittance():
    rng = np.random.default_rng(2)
    t = np.sort(rng.uniform(0.1, 2.0, (5, 32)), axis=1)
    sigma = rng.uniform(0.0, 20.0, (5, 32))
    res = rendering.composite_ray(t, np.full(5, 0.05), sigma)
    np.testing.assert_allclose(res.opacity,
                               1.0 - res.transmittance_end, atol=1e-12)
    assert np.all(res.opacity <= 1.0 + 1e-9)
    assert np.all(res.weights >= 0.0)


def test_transmittance_nonincreasing_and_alpha_bounded():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0.1, 2.0, (4, 64)), axis=1)
    sigma = rng.uniform(0.0, 50.0, (4, 64))
    t0 = np.concatenate([np.full((4, 1), 0.05), t[:, :-1]], axis=1)
    tau = sigma * (t - t0)
    trans = np.exp(-np.cumsum(np.concatenate(
        [np.zeros((4, 1)), tau[:, :-1]], axis=1), axis=1))
    assert np.all(np.diff(trans, axis=1) <= 1e-15)


def wall_oracle_depth(t_star, beta, n_samples, t_max=1.4):
    """Dense integration of a plane crossing the ray at t_star."""
    t = np.linspace(1e-4, t_max, n_samples)[None]
    sdf = t_star - t  # signed distance along the ray: positive before wall
    sigma = rendering.laplace_density(sdf, beta)
    return rendering.composite_ray(t, np.zeros(1), sigma)


def test_wall_depth_matches_analytic_plane():
    n = 256
    res = wall_oracle_depth(0.7, 0.01, n)
    delta = 1.4 / n
    assert abs(res.depth[0] - 0.7) <= 2 * delta


def test_depth_shifts_with_translated_wall():
    n = 512
    a = wall_oracle_depth(0.6, 0.01, n, t_max=1.4)
    b = wall_oracle_depth(0.75, 0.01, n, t_max=1.4)
    delta = 1.4 / n
    assert abs((b.depth[0] - a.depth[0]) - 0.15) <= 2 * delta


def test_composite_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    t = np.sort(rng.uniform(0.2, 1.2, (2, 6)), axis=1)
    store = ad.ParameterStore({"sdfs": rng.uniform(-0.2, 0.4, (2, 6)),
                               "beta_raw": np.array([-2.0])})

    def program(tape, leaves):
        beta = ad.softplus(leaves["beta_raw"]) + 1e-4
        sigma = rendering.laplace_density(leaves["sdfs"], beta)
        res = rendering.composite_ray(t, np.full(2, 0.1), sigma)
        return res.depth.sum() + res.opacity.sum()

    assert ad.finite_diff_check(program, store, 1e-5) < 1e-6


# -- near-miss unbiasing oracle -------------------------------------------------

def test_near_miss_weight_mass_moves_to_true_surface():
    prof = near_miss_profile(offset=0.02, beta=0.01, cyl_radius=0.05,
                             floor_t=1.0, n_samples=4096)
    before = prof["t"] < prof["floor_t"] - 0.1
    mass_plain = prof["weight_plain"][before].sum()
    mass_unbiased = prof["weight_unbiased"][before].sum()
    assert mass_plain >= 0.05
    assert mass_unbiased <= mass_plain / 10.0
    argmax_t = prof["t"][np.argmax(prof["weight_unbiased"])]
    assert abs(argmax_t - prof["floor_t"]) < 0.01


def test_near_miss_density_drop_at_closest_approach():
    prof = near_miss_profile(offset=0.02, beta=0.01)
    # closest approach: smallest sdf before the floor region
    before = prof["t"] < 0.8
    idx = np.argmin(prof["sdf"][before])
    assert prof["sigma_plain"][idx] >= 10.0 * prof["sigma_unbiased"][idx]


# -- deflection angle -----------------------------------------------------------

def test_deflection_angle_identity_is_zero():
    n = np.array([[0.0, 0.0, 1.0]])
    ang, transparent = rendering.deflection_angle(n, n)
    assert not transparent[0]
    assert ad.value_of(ang)[0] < 1e-3  # arccos clamp keeps it near zero


def test_deflection_angle_90_degrees():
    n = np.array([[0.0, 0.0, 1.0]])
    q = fields.quat_compose(np.array([[1.0, 0.0, 0.0]]),
                            np.array([[np.pi / 4]]))
    d = ad.value_of(fields.quat_rotate(q, n))
    ang, _ = rendering.deflection_angle(n, d)
    assert ad.value_of(ang)[0] == pytest.approx(np.pi / 2, abs=1e-9)


def test_deflection_angle_matches_rotation_angle_for_perp_axis():
    rng = np.random.default_rng(5)
    n = rng.standard_normal((100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    raw = rng.standard_normal((100, 3))
    axis = np.cross(n, raw)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    theta = rng.uniform(0.05, np.pi - 0.05, (100, 1))
    q = fields.quat_compose(axis, theta / 2.0)
    d = ad.value_of(fields.quat_rotate(q, n))
    ang, _ = rendering.deflection_angle(n, d)
    np.testing.assert_allclose(ad.value_of(ang), theta[:, 0], atol=1e-9)


def test_deflection_angle_transparent_ray_flagged():
    zero = np.zeros((1, 3))
    other = np.array([[1.0, 0.0, 0.0]])
    ang, transparent = rendering.deflection_angle(zero, other)
    assert transparent[0]
    assert ad.value_of(ang)[0] == 0.0
