import numpy as np
import pytest

from roomsdf import autodiff as ad
from roomsdf import encoding, fields


def geometry_store(rng, in_dim=3, hidden=256, feat_width=256, radius=0.5):
    return ad.ParameterStore(fields.init_geometry_net(
        rng, in_dim, hidden, feat_width, radius))


def eval_sdf(store, x):
    return ad.value_of(fields.geometry_sdf(store.arrays(), x))


def test_geometric_init_sign_pattern():
    rng = np.random.default_rng(0)
    store = geometry_store(rng)
    center = eval_sdf(store, np.zeros((1, 3)))
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                        for sz in (-1, 1)], dtype=float)
    corner_vals = eval_sdf(store, corners)
    assert center[0] < 0.0
    assert np.all(corner_vals > 0.0)


def test_geometric_init_gradient_norm_near_surface():
    rng = np.random.default_rng(1)
    store = geometry_store(rng)
    d = rng.standard_normal((200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = d * rng.uniform(0.45, 0.55, (200, 1))

    def field(pts):
        return eval_sdf(store, pts)

    g = encoding.numerical_gradient(field, x, eps=1e-4)
    norms = np.linalg.norm(g, axis=1)
    assert abs(np.mean(norms) - 1.0) < 0.1


def test_feature_vector_width_is_256_by_default():
    rng = np.random.default_rng(2)
    store = geometry_store(rng)
    _, z = fields.geometry_forward(store.arrays(), rng.uniform(-1, 1, (4, 3)))
    assert ad.value_of(z).shape == (4, 256)


def test_sdf_head_matches_full_forward():
    rng = np.random.default_rng(3)
    store = geometry_store(rng, hidden=32, feat_width=16)
    x = rng.uniform(-1, 1, (9, 3))
    sdf_full, _ = fields.geometry_forward(store.arrays(), x)
    sdf_only = fields.geometry_sdf(store.arrays(), x)
    # gemv vs gemm summation order may differ by an ulp
    np.testing.assert_allclose(ad.value_of(sdf_full), ad.value_of(sdf_only),
                               rtol=0, atol=1e-12)


def test_color_output_in_unit_interval():
    rng = np.random.default_rng(4)
    z_dim = 8
    store = ad.ParameterStore(fields.init_color_net(rng, 9 + z_dim, 16))
    n = 1000
    x = rng.uniform(-1, 1, (n, 3))
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    nrm = rng.standard_normal((n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    z = rng.standard_normal((n, z_dim))
    rgb = ad.value_of(fields.color_forward(store.arrays(), x, v, nrm, z))
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0


def test_color_depends_on_view_direction():
    rng = np.random.default_rng(5)
    z_dim = 8
    params = {k: rng.standard_normal(v.shape)
              for k, v in fields.init_color_net(rng, 9 + z_dim, 16).items()}
    x = np.zeros((1, 3))
    nrm = np.array([[0.0, 0.0, 1.0]])
    z = rng.standard_normal((1, z_dim))
    v1 = np.array([[1.0, 0.0, 0.0]])
    v2 = np.array([[0.0, 1.0, 0.0]])
    c1 = ad.value_of(fields.color_forward(params, x, v1, nrm, z))
    c2 = ad.value_of(fields.color_forward(params, x, v2, nrm, z))
    assert np.abs(c1 - c2).max() > 1e-6


def test_color_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    z_dim = 4
    store = ad.ParameterStore(fields.init_color_net(rng, 9 + z_dim, 8))
    x = rng.uniform(-1, 1, (3, 3))
    v = rng.standard_normal((3, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    nrm = rng.standard_normal((3, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    z = rng.standard_normal((3, z_dim))

    def program(tape, leaves):
        return fields.color_forward(leaves, x, v, nrm, z).sum()

    assert ad.finite_diff_check(program, store, 1e-5) < 1e-6


def test_deflection_initialized_along_x_axis():
    rng = np.random.default_rng(7)
    z_dim = 8
    store = ad.ParameterStore(fields.init_deflection_net(rng, 9 + z_dim, 32))
    n = 50
    x = rng.uniform(-1, 1, (n, 3))
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    nrm = rng.standard_normal((n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    z = rng.standard_normal((n, z_dim))
    q, fallbacks = fields.deflection_forward(store.arrays(), x, v, nrm, z)
    q = ad.value_of(q)
    assert fallbacks == 0
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
    axis, half = fields.quat_decompose(q)
    np.testing.assert_allclose(ad.value_of(half)[:, 0], np.pi / 2, atol=1e-2)
    np.testing.assert_allclose(ad.value_of(axis), [[1.0, 0.0, 0.0]] * n,
                               atol=1e-2)


def test_deflection_zero_raw_output_falls_back_to_identity():
    params = {
        "defl.w1": np.zeros((5, 4)), "defl.b1": np.zeros(4),
        "defl.w2": np.zeros((4, 4)), "defl.b2": np.zeros(4),
    }
    x = np.zeros((3, 1))
    q, fallbacks = fields.deflection_forward(
        params, x, np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 2)))
    assert fallbacks == 3
    np.testing.assert_array_equal(ad.value_of(q), fields.quat_identity(3))


# -- quaternion algebra -------------------------------------------------------

def random_unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_unit_vecs(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_identity_rotation_leaves_vectors_unchanged():
    v = np.array([[0.3, -0.5, 0.8]])
    out = fields.quat_rotate(fields.quat_identity(1), v)
    np.testing.assert_allclose(ad.value_of(out), v, atol=1e-15)


def test_canonical_90_degree_rotation():
    half = np.array([[np.pi / 4]])
    axis = np.array([[0.0, 0.0, 1.0]])
    q = fields.quat_compose(axis, half)
    out = fields.quat_rotate(q, np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(ad.value_of(out), [[0.0, 1.0, 0.0]],
                               atol=1e-12)


def test_rotation_preserves_norm():
    rng = np.random.default_rng(8)
    q = random_unit_quats(rng, 1000)
    v = rng.standard_normal((1000, 3)) * 3.0
    out = ad.value_of(fields.quat_rotate(q, v))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                               np.linalg.norm(v, axis=1), atol=1e-12)


def test_decompose_direct_construction():
    half = np.radians(30.0)
    q = np.array([[np.cos(half), 0.0, 0.0, np.sin(half)]])
    axis, got_half = fields.quat_decompose(q)
    np.testing.assert_allclose(ad.value_of(axis), [[0.0, 0.0, 1.0]],
                               atol=1e-12)
    np.testing.assert_allclose(ad.value_of(got_half), [[half]], atol=1e-12)


def test_decompose_identity_uses_fallback():
    axis, half = fields.quat_decompose(fields.quat_identity(2))
    np.testing.assert_array_equal(ad.value_of(axis), [[0, 0, 1], [0, 0, 1]])
    np.testing.assert_array_equal(ad.value_of(half), [[0.0], [0.0]])


def test_decompose_recompose_round_trip():
    rng = np.random.default_rng(9)
    q = random_unit_quats(rng, 500)
    q[:, 0] = np.abs(q[:, 0])  # half-angle in [0, pi/2): canonical form
    axis, half = fields.quat_decompose(q)
    back = ad.value_of(fields.quat_compose(axis, half))
    np.testing.assert_allclose(back, q, atol=1e-9)


def test_rotation_composition_rule():
    rng = np.random.default_rng(10)
    q1 = random_unit_quats(rng, 200)
    q2 = random_unit_quats(rng, 200)
    v = random_unit_vecs(rng, 200)
    seq = fields.quat_rotate(q2, fields.quat_rotate(q1, v))
    combined = fields.quat_rotate(fields.quat_mul(q2, q1), v)
    np.testing.assert_allclose(ad.value_of(seq), ad.value_of(combined),
                               atol=1e-10)


def test_anneal_at_zero_progress_is_exact_identity():
    rng = np.random.default_rng(11)
    q = random_unit_quats(rng, 30)
    n = random_unit_vecs(rng, 30)
    out = ad.value_of(fields.quat_anneal(q, n, 0.0))
    np.testing.assert_array_equal(out, fields.quat_identity(30))


def test_anneal_at_full_progress_returns_original():
    rng = np.random.default_rng(12)
    q = random_unit_quats(rng, 200)
    q[:, 0] = np.abs(q[:, 0])
    n = random_unit_vecs(rng, 200)
    out = ad.value_of(fields.quat_anneal(q, n, 1.0))
    np.testing.assert_allclose(out, q, atol=1e-9)


def test_anneal_midpoint_blend():
    # 60 degrees about x annealed halfway against normal (0,0,1)
    q = fields.quat_compose(np.array([[1.0, 0.0, 0.0]]),
                            np.array([[np.radians(30.0)]]))
    n = np.array([[0.0, 0.0, 1.0]])
    out = ad.value_of(fields.quat_anneal(q, n, 0.5))
    expect_half = np.radians(15.0)
    expect_axis = np.array([0.5, 0.0, 0.5])
    expect_axis = expect_axis / np.linalg.norm(expect_axis)
    expected = np.concatenate([[np.cos(expect_half)],
                               np.sin(expect_half) * expect_axis])
    np.testing.assert_allclose(out[0], expected, atol=1e-12)


def test_anneal_continuity_in_progress():
    rng = np.random.default_rng(13)
    q = random_unit_quats(rng, 50)
    q[:, 0] = np.abs(q[:, 0])
    n = random_unit_vecs(rng, 50)
    probe = np.linspace(0.0, 1.0, 401)
    prev = ad.value_of(fields.quat_anneal(q, n, float(probe[0])))
    for p in probe[1:]:
        cur = ad.value_of(fields.quat_anneal(q, n, float(p)))
        assert np.abs(cur - prev).max() < 0.05
        prev = cur


def test_deflection_gradient_flows_through_composited_loss():
    rng = np.random.default_rng(14)
    z_dim = 4
    segs = fields.init_deflection_net(rng, 9 + z_dim, 8)
    # break the symmetric init so finite differences see curvature
    segs = {k: v + rng.normal(0, 0.05, v.shape) for k, v in segs.items()}
    store = ad.ParameterStore(segs)
    n_pts = 6
    x = rng.uniform(-1, 1, (n_pts, 3))
    v = random_unit_vecs(rng, n_pts)
    nrm = random_unit_vecs(rng, n_pts)
    z = rng.standard_normal((n_pts, z_dim))
    weights = rng.random((2, 3))
    weights /= weights.sum(axis=1, keepdims=True)
    prior = random_unit_vecs(rng, 2)
    base_normal = random_unit_vecs(rng, 2)

    def program(tape, leaves):
        q, _ = fields.deflection_forward(leaves, x, v, nrm, z)
        q_ray = (q.reshape((2, 3, 4)) * weights[:, :, None]).sum(axis=1)
        q_unit, _ = fields.quat_normalize_safe(q_ray)
        q_iter = fields.quat_anneal(q_unit, base_normal, 0.7)
        deflected = fields.quat_rotate(q_iter, base_normal)
        diff = ad.absval(deflected - prior).sum()
        cosine = ad.absval(1.0 - ad.dot_rows(deflected, prior)).sum()
        return diff + cosine

    value, grad = ad.evaluate_with_gradients(program, store)
    assert np.any(np.abs(grad) > 1e-8)
    assert ad.finite_diff_check(program, store, 1e-5) < 1e-6


def test_warmup_schedule_clamps():
    sched = fields.WarmupSchedule(anneal_quat_end=0.2)
    assert sched.prog_q(0, 1000) == 0.0
    assert sched.prog_q(100, 1000) == 0.5
    assert sched.prog_q(200, 1000) == 1.0
    assert sched.prog_q(900, 1000) == 1.0
    assert fields.WarmupSchedule(0.0).prog_q(0, 1000) == 1.0
