import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bgklab.geometry import (
    KINDS,
    axis_angle_to_quat,
    euler_zyz_to_matrix,
    manifold,
    matrix_to_euler_zyz,
    matrix_to_quat,
    periodic_delta,
    product_distance,
    quat_to_matrix,
    rotation_between,
)


@pytest.fixture(params=KINDS)
def mfd(request):
    return manifold(request.param)


def test_sphere_north_pole_embedding():
    s = manifold("sphere2")
    np.testing.assert_array_equal(s.embed(np.array([0.0, 0.0, 1.0])), [0, 0, 1])


def test_rotation_identity_embedding_has_unit_norm():
    r = manifold("rotations3")
    e = r.embed(np.array([1.0, 0, 0, 0]))
    # oracle: half-trace inner product gives |I|^2 = 3/2, rescaled by sqrt(2/3)
    half_trace_norm = np.sqrt(0.5 * np.trace(np.eye(3).T @ np.eye(3)))
    assert half_trace_norm * np.sqrt(2.0 / 3.0) == pytest.approx(1.0, abs=1e-15)
    assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-15)


def test_embedding_norm_bounded(mfd):
    rng = np.random.default_rng(1)
    m = mfd.sample_uniform(rng, 5000)
    assert np.all(np.linalg.norm(mfd.embed(m), axis=-1) <= 1 + 1e-12)


def test_distance_examples():
    c, s, r = manifold("circle"), manifold("sphere2"), manifold("rotations3")
    assert c.distance(0.0, np.pi / 2) == pytest.approx(np.pi / 2)
    assert c.distance(0.1, 2 * np.pi - 0.1) == pytest.approx(0.2)
    assert s.distance(np.array([0, 0, 1.0]), np.array([0, 0, -1.0])) == pytest.approx(np.pi)
    rng = np.random.default_rng(2)
    q1 = r.sample_uniform(rng, 1000)
    q2 = r.sample_uniform(rng, 1000)
    oracle = 2 * np.arccos(np.clip(np.abs(np.sum(q1 * q2, axis=-1)), 0, 1))
    np.testing.assert_allclose(r.distance(q1, q2), np.sqrt(2 / 3) * oracle, atol=1e-7)
    # identity vs rotation by phi
    for phi in (0.3, 1.0, 3.0):
        q = axis_angle_to_quat(np.array([0, 1.0, 0]), phi)
        assert r.distance(np.array([1.0, 0, 0, 0]), q) == pytest.approx(np.sqrt(2 / 3) * phi, abs=1e-12)


def test_quaternion_double_cover_identified():
    r = manifold("rotations3")
    rng = np.random.default_rng(3)
    q = r.sample_uniform(rng, 100)
    assert np.all(r.distance(q, -q) < 1e-12)
    np.testing.assert_allclose(r.embed(q), r.embed(-q))


def test_product_distance_examples():
    s = manifold("sphere2")
    n = np.array([0, 0, 1.0])
    x = np.zeros(2)
    assert product_distance(x, n, x, n, s) == 0
    assert product_distance(x, n, np.array([1.0, 0]), n, s) == pytest.approx(1.0)
    assert product_distance(x, n, x, -n, s) == pytest.approx(np.pi)
    # wrap-around on a torus of side 8
    assert product_distance(np.array([0.5, 0]), n, np.array([7.5, 0]), n, s, box=8.0) == pytest.approx(1.0)
    np.testing.assert_allclose(periodic_delta([0.5], [7.5], 8.0), [1.0])


def test_metric_axioms_on_triples(mfd):
    rng = np.random.default_rng(4)
    a, b, c = (mfd.sample_uniform(rng, 10_000) for _ in range(3))
    dab, dbc, dac = mfd.distance(a, b), mfd.distance(b, c), mfd.distance(a, c)
    assert np.all(dac <= dab + dbc + 1e-10)
    np.testing.assert_allclose(dab, mfd.distance(b, a), atol=1e-12)
    assert np.all(mfd.distance(a, a) < 1e-7)
    assert np.all(dab <= mfd.diameter + 1e-10)


def test_chordal_below_geodesic(mfd):
    assert mfd.check_embedding(np.random.default_rng(5), 10_000)


@pytest.mark.parametrize("kind,orders", [("circle", (8, 64, 512)), ("sphere2", (4, 24, 40)), ("rotations3", (2, 6, 8))])
def test_quadrature_weights(kind, orders):
    for order in orders:
        nodes, w = manifold(kind).quadrature(order)
        assert np.all(w > 0)
        assert abs(w.sum() - 1) < 1e-12


def test_quadrature_moments(mfd):
    e = mfd.node_embeddings
    w = mfd.weights
    assert np.abs(w @ e).max() < 1e-12
    second = (w[:, None] * e).T @ e
    np.testing.assert_allclose(second, np.eye(mfd.embed_dim) / mfd.embed_dim, atol=1e-12)


def test_sphere_quadrature_exponential_oracle():
    s = manifold("sphere2")
    val = s.weights @ np.exp(s.node_embeddings[:, 2])
    # oracle: (1/2) int_{-1}^{1} e^u du
    assert val == pytest.approx(np.sinh(1.0), rel=1e-12)
    assert round(val, 5) == 1.17520


def test_uniform_sample_flux_band(mfd):
    n = 100_000
    m = mfd.sample_uniform(np.random.default_rng(6), n)
    flux = np.linalg.norm(mfd.embed(m).mean(axis=0))
    assert flux < 4 / np.sqrt(n * mfd.embed_dim) * np.sqrt(mfd.embed_dim)
    assert flux < 0.02


def test_uniform_sample_seeded(mfd):
    a = mfd.sample_uniform(np.random.default_rng(7), 50)
    b = mfd.sample_uniform(np.random.default_rng(7), 50)
    np.testing.assert_array_equal(a, b)


def test_velocity_examples():
    s, r = manifold("sphere2"), manifold("rotations3")
    np.testing.assert_array_equal(s.velocity(np.array([0, 0, 1.0])), [0, 0, 1])
    np.testing.assert_allclose(r.velocity(np.array([1.0, 0, 0, 0])), [1, 0, 0])


def test_velocity_lipschitz_and_speed(mfd):
    lam, beta = mfd.velocity_bounds
    rng = np.random.default_rng(8)
    a, b = mfd.sample_uniform(rng, 20_000), mfd.sample_uniform(rng, 20_000)
    va, vb = mfd.velocity(a), mfd.velocity(b)
    assert np.all(np.linalg.norm(va, axis=-1) <= beta + 1e-12)
    assert np.all(np.linalg.norm(va - vb, axis=-1) <= lam * mfd.distance(a, b) + 1e-12)


def test_rotation_lipschitz_close_to_analytic():
    # |A e1 - B e1| <= 2 sin(phi/2) <= phi = sqrt(3/2) d
    lam, _ = manifold("rotations3").velocity_bounds
    assert np.sqrt(1.5) <= lam <= 1.02 * np.sqrt(1.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_quaternion_matrix_round_trip(v):
    r = manifold("rotations3")
    q = r.canonical(np.array(v))
    back = matrix_to_quat(quat_to_matrix(q))
    assert r.distance(q, back) < 1e-7
    mat = quat_to_matrix(q)
    np.testing.assert_allclose(mat @ mat.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(euler_zyz_to_matrix(*matrix_to_euler_zyz(mat)), mat, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_rotation_between(v):
    a, b = np.array(v[:3]), np.array(v[3:])
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    R = rotation_between(a, b)
    np.testing.assert_allclose(R @ a, b, atol=1e-9)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(rotation_between(a, -a) @ a, -a, atol=1e-12)


def test_manifold_pickles_and_orders():
    import pickle

    s = manifold("sphere2", quadrature_order=8)
    t = pickle.loads(pickle.dumps(s))
    assert t == s and len(t.weights) == 8 * 16
    with pytest.raises(ValueError):
        manifold("torus")
