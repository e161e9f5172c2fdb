import numpy as np
import pytest

from roomsdf import autodiff as ad
from roomsdf import encoding


def small_config(**kw):
    defaults = dict(levels=4, base_resolution=4, max_resolution=32,
                    features_per_level=2, log2_table_size=8, active_init=2,
                    activation_interval=100)
    defaults.update(kw)
    return encoding.HashGridConfig(**defaults)


def test_resolutions_form_geometric_progression():
    cfg = small_config()
    res = cfg.resolutions()
    assert res[0] == 4 and res[-1] == 32
    ratios = res[1:] / res[:-1]
    assert np.all(ratios > 1.0)


def test_zero_table_gives_zero_grid_features():
    cfg = small_config()
    table = np.zeros((cfg.table_rows, cfg.features_per_level))
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (10, 3))
    out = encoding.grid_encode(table, x, cfg, use_numba=False)
    assert np.all(out == 0.0)


def test_vertex_exact_lookup():
    cfg = small_config(levels=1, base_resolution=8, max_resolution=8,
                       active_init=1)
    rng = np.random.default_rng(1)
    table = rng.standard_normal((cfg.table_rows, 2))
    # a point exactly on a grid vertex of the single level
    iv = np.array([3, 5, 2])
    x = (iv / 8) * 2.0 - 1.0
    out = encoding.grid_encode(table, x[None], cfg, use_numba=False)
    h = ((iv[0] * 2654435761) ^ (iv[1] * 805459861)
         ^ (iv[2] * 3674653429)) & (cfg.table_size - 1)
    np.testing.assert_allclose(out[0], table[h], atol=1e-12)


def test_inactive_levels_are_exact_zeros():
    cfg = small_config()
    rng = np.random.default_rng(2)
    table = rng.standard_normal((cfg.table_rows, 2))
    x = rng.uniform(-1, 1, (7, 3))
    out = encoding.grid_encode(table, x, cfg, active_levels=2, use_numba=False)
    f = cfg.features_per_level
    assert np.all(out[:, 2 * f:] == 0.0)
    assert np.any(out[:, :2 * f] != 0.0)


def test_numba_and_numpy_paths_agree():
    pytest.importorskip("numba")
    cfg = small_config(levels=3)
    rng = np.random.default_rng(3)
    table = rng.standard_normal((cfg.table_rows, 2))
    x = rng.uniform(-1, 1, (50, 3))
    a = encoding.grid_encode(table, x, cfg, use_numba=True)
    b = encoding.grid_encode(table, x, cfg, use_numba=False)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    # backward agreement
    g = rng.standard_normal(a.shape)
    res = cfg.resolutions()
    off = cfg.level_offsets()
    da = encoding._backward_impl(x, res, off, cfg.table_size - 1, g,
                                 table.shape, True)
    db = encoding._backward_impl(x, res, off, cfg.table_size - 1, g,
                                 table.shape, False)
    np.testing.assert_allclose(da, db, rtol=0, atol=1e-12)


def test_active_level_schedule():
    cfg = encoding.HashGridConfig()
    assert encoding.set_active_levels(0, cfg) == 8
    assert encoding.set_active_levels(1999, cfg) == 8
    assert encoding.set_active_levels(2000, cfg) == 9
    assert encoding.set_active_levels(10 ** 6, cfg) == 16


def test_active_levels_never_shrink():
    cfg = encoding.HashGridConfig()
    steps = np.arange(0, 50000, 311)
    values = [encoding.set_active_levels(int(s), cfg) for s in steps]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_grid_feature_gradient_matches_finite_differences():
    cfg = small_config(levels=2, log2_table_size=4)
    rng = np.random.default_rng(4)
    store = ad.ParameterStore(
        {"grid.table": rng.standard_normal((cfg.table_rows, 2)) * 0.5})
    x = rng.uniform(-0.9, 0.9, (5, 3))
    coeff = rng.standard_normal((5, cfg.levels * 2))

    def program(tape, leaves):
        feats = encoding.grid_encode(leaves["grid.table"], x, cfg,
                                     use_numba=False)
        return (feats * coeff).sum()

    err = ad.finite_diff_check(program, store, step=1e-5)
    assert err < 1e-7


def test_encode_position_flags_out_of_domain():
    cfg = small_config()
    table = np.zeros((cfg.table_rows, 2))
    x = np.array([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]])
    enc = encoding.encode_position(x, cfg, table, pe_bands=2, use_numba=False)
    assert enc.clamped.tolist() == [False, True]
    assert np.all(np.abs(enc.position) <= 1.0)
    assert ad.value_of(enc.features).shape == (2, 3 + 12 + cfg.levels * 2)


# -- stencil derivatives -----------------------------------------------------

def test_numerical_gradient_exact_on_linear_field():
    a = np.array([0.3, -1.2, 0.7])

    def field(x):
        return x @ a

    x = np.random.default_rng(5).uniform(-0.5, 0.5, (20, 3))
    g = encoding.numerical_gradient(field, x, eps=1e-3)
    np.testing.assert_allclose(g, np.tile(a, (20, 1)), atol=1e-10)


def test_numerical_gradient_on_sphere_sdf():
    def sphere(x):
        return np.linalg.norm(x, axis=1) - 0.3

    g = encoding.numerical_gradient(sphere, np.array([[0.5, 0.0, 0.0]]),
                                    eps=1e-3)
    np.testing.assert_allclose(g[0], [1.0, 0.0, 0.0], atol=1e-6)


def test_numerical_gradient_error_shrinks_quadratically():
    def smooth(x):
        return np.sin(x[:, 0]) * np.cos(x[:, 1]) + x[:, 2] ** 3

    def true_grad(x):
        return np.stack([np.cos(x[:, 0]) * np.cos(x[:, 1]),
                         -np.sin(x[:, 0]) * np.sin(x[:, 1]),
                         3.0 * x[:, 2] ** 2], axis=1)

    x = np.random.default_rng(6).uniform(-0.5, 0.5, (30, 3))
    err1 = np.abs(encoding.numerical_gradient(smooth, x, 1e-2)
                  - true_grad(x)).max()
    err2 = np.abs(encoding.numerical_gradient(smooth, x, 5e-3)
                  - true_grad(x)).max()
    ratio = err1 / err2
    assert 3.0 < ratio < 5.0  # O(eps^2): halving eps quarters the error


def test_unit_sphere_gradient_norm_property():
    def sphere(x):
        return np.linalg.norm(x, axis=1) - 1.0

    rng = np.random.default_rng(7)
    d = rng.standard_normal((1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * rng.uniform(0.2, 0.9, (1000, 1))
    g = encoding.numerical_gradient(sphere, x, eps=1e-4)
    norms = np.linalg.norm(g, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-6


def test_laplacian_zero_on_linear_field():
    a = np.array([0.3, -1.2, 0.7])

    def field(x):
        return x @ a + 2.0

    x = np.random.default_rng(8).uniform(-0.5, 0.5, (10, 3))
    lap = encoding.numerical_laplacian(field, x, eps=1e-3)
    # zero up to cancellation noise of the second difference
    np.testing.assert_allclose(lap, 0.0, atol=1e-8)


def test_laplacian_of_squared_norm_is_six():
    def field(x):
        return (x ** 2).sum(axis=1)

    x = np.random.default_rng(9).uniform(-0.5, 0.5, (10, 3))
    lap = encoding.numerical_laplacian(field, x, eps=1e-3)
    np.testing.assert_allclose(lap, 6.0, atol=1e-9)


def test_laplacian_of_distance_field():
    def field(x):
        return np.linalg.norm(x, axis=1) - 0.2

    rng = np.random.default_rng(10)
    d = rng.standard_normal((20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * rng.uniform(0.4, 0.9, (20, 1))
    eps = 1e-3
    lap = encoding.numerical_laplacian(field, x, eps=eps)
    expected = 2.0 / np.linalg.norm(x, axis=1)
    assert np.max(np.abs(lap - expected)) < 10.0 * eps ** 2 / 0.4 ** 3


def test_gradient_and_laplacian_match_standalone():
    def field(x):
        return np.sin(x[:, 0]) + (x ** 2).sum(axis=1)

    x = np.random.default_rng(11).uniform(-0.5, 0.5, (12, 3))
    center = field(x)
    g1, l1 = encoding.gradient_and_laplacian(field, x, 1e-3, center)
    g2 = encoding.numerical_gradient(field, x, 1e-3)
    l2 = encoding.numerical_laplacian(field, x, 1e-3)
    np.testing.assert_array_equal(g1, g2)
    np.testing.assert_array_equal(l1, l2)


def test_stencil_eps_tracks_active_resolution():
    cfg = encoding.HashGridConfig()
    res = cfg.resolutions()
    assert encoding.stencil_eps_for(cfg, 8) == 1.0 / res[7]
    assert encoding.stencil_eps_for(cfg, 16) == 1.0 / res[15]


def test_eps_validation():
    with pytest.raises(ValueError):
        encoding.numerical_gradient(lambda x: x[:, 0], np.zeros((1, 3)), 0.0)
    with pytest.raises(ValueError):
        encoding.numerical_laplacian(lambda x: x[:, 0], np.zeros((1, 3)), -1.0)
