from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bgklab.geometry import KINDS, manifold, quat_to_matrix
from bgklab.interaction import (
    RegularityConstants,
    VonMisesLaw,
    flux_of_atoms,
    matrix_to_flux,
    mean_flux,
    node_densities,
    normalizer,
    regularity_check,
    so3_frame,
    transport_map,
    two_sided_translation,
)


def bessel_i0_series(k, terms=60):
    return sum((k / 2) ** (2 * j) / factorial(j) ** 2 for j in range(terms))


def random_flux(rng, mfd, norm):
    v = rng.standard_normal(mfd.embed_dim)
    return norm * v / np.linalg.norm(v)


@pytest.fixture(params=KINDS)
def mfd(request):
    return manifold(request.param)


def test_normalizer_uniform(mfd):
    assert normalizer(np.zeros(mfd.embed_dim), mfd) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("kappa", [0.5, 1.0, 2.0, 5.0])
def test_normalizer_oracles(kappa):
    s, c = manifold("sphere2"), manifold("circle")
    J = random_flux(np.random.default_rng(0), s, kappa)
    assert normalizer(J, s) == pytest.approx(np.sinh(kappa) / kappa, rel=1e-6)
    assert normalizer([0.0, kappa], c) == pytest.approx(bessel_i0_series(kappa), rel=1e-6)


def test_frozen_normalizer_values():
    assert round(normalizer([0, 0, 1.0], manifold("sphere2")), 5) == 1.17520
    assert round(normalizer([1.0, 0], manifold("circle")), 5) == 1.26607


def test_normalizer_bounds(mfd):
    rng = np.random.default_rng(1)
    for kappa in (0.1, 1.0, 3.0, 6.0):
        J = random_flux(rng, mfd, kappa)
        z = normalizer(J, mfd)
        assert np.exp(-kappa) <= z <= np.exp(kappa)


def test_density_integrates_and_bounded(mfd):
    rng = np.random.default_rng(2)
    J = random_flux(rng, mfd, 1.7)
    law = VonMisesLaw(J, mfd)
    dens = node_densities(J, mfd)
    assert mfd.weights @ dens == pytest.approx(1.0, abs=1e-8)
    m = mfd.sample_uniform(rng, 1000)
    assert np.all(law.density(m) <= np.exp(2 * law.kappa))
    zero = VonMisesLaw(np.zeros(mfd.embed_dim), mfd)
    np.testing.assert_allclose(zero.density(m), 1.0)


def test_regularity_constants_formulas():
    c = RegularityConstants(1.0)
    assert c.alpha == pytest.approx(np.e**2)
    assert round(c.alpha, 3) == 7.389
    assert c.lip_L == pytest.approx(np.e**2)
    assert c.theta == pytest.approx(np.e**2 + np.e**4)
    a = np.linspace(0.1, 3, 20)
    for f in ("alpha", "lip_L", "theta"):
        vals = [getattr(RegularityConstants(x), f) for x in a]
        assert np.all(np.diff(vals) > 0)


def test_regularity_check_reports(mfd):
    rep = regularity_check(2.0, 10_000, np.random.default_rng(3), mfd)
    assert sum(rep["violations"].values()) == 0
    assert all(0 < v <= 1 for v in rep["max_ratio"].values())
    with pytest.raises(ValueError):
        regularity_check(0.0, 10, np.random.default_rng(0), mfd)


def test_sphere_sampler_resultant():
    s = manifold("sphere2")
    J = random_flux(np.random.default_rng(4), s, 2.0)
    x = VonMisesLaw(J, s).sample(np.random.default_rng(5), 100_000)
    assert x.shape == (100_000, 3)
    res = x.mean(axis=0)
    R = np.linalg.norm(res)
    # oracle: mean of u under exp(2u) on [-1, 1]
    oracle = 1 / np.tanh(2) - 0.5
    assert round(oracle, 5) == 0.53731
    se = np.std(x @ (J / 2)) / np.sqrt(len(x))
    assert abs(R - oracle) < 3 * se
    assert res @ J / (2 * R) > 0.99


def test_sampler_matches_mean_flux(mfd):
    rng = np.random.default_rng(6)
    J = random_flux(rng, mfd, 1.5)
    law = VonMisesLaw(J, mfd)
    e = mfd.embed(law.sample(rng, 40_000))
    se = e.std(axis=0) / np.sqrt(len(e))
    assert np.all(np.abs(e.mean(axis=0) - law.mean_flux()) < 4.5 * se + 1e-12)


def test_zero_flux_sampler_is_uniform(mfd):
    rng = np.random.default_rng(7)
    a = mfd.embed(VonMisesLaw(np.zeros(mfd.embed_dim), mfd).sample(rng, 20_000)).reshape(20_000, -1)
    b = mfd.embed(mfd.sample_uniform(rng, 20_000)).reshape(20_000, -1)
    for k in range(min(3, a.shape[1])):
        assert stats.ks_2samp(a[:, k], b[:, k]).pvalue > 1e-3


def test_sampler_seeded(mfd):
    law = VonMisesLaw(random_flux(np.random.default_rng(0), mfd, 1.0), mfd)
    np.testing.assert_array_equal(law.sample(np.random.default_rng(9), 10), law.sample(np.random.default_rng(9), 10))
    assert law.sample(np.random.default_rng(9)).shape == mfd.coord_shape


def test_rotation_rejection_acceptance_rate():
    r = manifold("rotations3")
    law = VonMisesLaw(random_flux(np.random.default_rng(10), r, 2.0), r)
    # acceptance probability of the envelope exp(J.m - |J|) is Z e^{-|J|}
    rate = law.normalizer * np.exp(-law.kappa)
    assert rate >= np.exp(-2 * law.kappa)
    q = r.sample_uniform(np.random.default_rng(11), 200_000)
    emp = np.mean(np.random.default_rng(12).random(len(q)) < np.exp(r.embed(q) @ law.J - law.kappa))
    assert abs(emp - rate) < 5 * np.sqrt(rate / len(q))


def test_flux_of_atoms():
    s = manifold("sphere2")
    m = np.array([[0, 0, 1.0], [0, 0, -1.0]])
    np.testing.assert_allclose(flux_of_atoms(s, m), 0)
    np.testing.assert_allclose(flux_of_atoms(s, m[:1], [1.0]), [0, 0, 1])
    u = s.sample_uniform(np.random.default_rng(13), 100_000)
    assert np.linalg.norm(flux_of_atoms(s, u)) < 0.02
    with pytest.raises(ValueError):
        flux_of_atoms(s, m, [-1, 2])


def test_mean_flux_oracles():
    s = manifold("sphere2")
    J = random_flux(np.random.default_rng(14), s, 1.0)
    mf = mean_flux(J, s)
    assert np.linalg.norm(mf) == pytest.approx(1 / np.tanh(1) - 1, rel=1e-10)
    assert round(np.linalg.norm(mf), 5) == 0.31304
    assert abs(mf @ J) == pytest.approx(np.linalg.norm(mf))  # collinear
    np.testing.assert_allclose(mean_flux(np.zeros(3), s), 0, atol=1e-15)


def test_rotation_mean_flux_stable_across_orders():
    J = random_flux(np.random.default_rng(15), manifold("rotations3"), 1.0)
    a = mean_flux(J, manifold("rotations3", 6))
    b = mean_flux(J, manifold("rotations3", 9))
    assert np.abs(a - b).max() < 1e-6


def test_mean_flux_monotone_and_below_one(mfd):
    rng = np.random.default_rng(16)
    direction = random_flux(rng, mfd, 1.0)
    kap = np.linspace(0.05, 10, 60)
    mags = np.array([np.linalg.norm(mean_flux(k * direction, mfd)) for k in kap])
    assert np.all(np.diff(mags) > 0)
    assert np.all(mags < 1)


# --- transport maps ----------------------------------------------------------------


def test_transport_identity(mfd):
    rng = np.random.default_rng(17)
    law = VonMisesLaw(random_flux(rng, mfd, 1.3), mfd)
    m = law.sample(rng, 50)
    np.testing.assert_array_equal(transport_map(law, law, m), m)


def test_transport_round_trip(mfd):
    rng = np.random.default_rng(18)
    src = VonMisesLaw(random_flux(rng, mfd, 1.3), mfd)
    dst = VonMisesLaw(random_flux(rng, mfd, 0.6), mfd)
    m = src.sample(rng, 200)
    back = transport_map(dst, src, transport_map(src, dst, m))
    assert mfd.distance(back, m).max() < 1e-6


def test_sphere_transport_chi2_against_direct():
    s = manifold("sphere2")
    rng = np.random.default_rng(19)
    src = VonMisesLaw(random_flux(rng, s, 1.0), s)
    dst = VonMisesLaw(random_flux(rng, s, 3.0), s)
    x = src.sample(rng, 20_000)
    pushed = transport_map(src, dst, x)
    direct = dst.sample(rng, 20_000)
    mu = dst.mean_direction
    edges = np.linspace(0, np.pi, 21)
    h1 = np.histogram(np.arccos(np.clip(pushed @ mu, -1, 1)), edges)[0]
    h2 = np.histogram(np.arccos(np.clip(direct @ mu, -1, 1)), edges)[0]
    keep = (h1 + h2) > 0
    assert stats.chi2_contingency(np.stack([h1[keep], h2[keep]])).pvalue > 1e-3


def test_sphere_transport_monotone_rearrangement():
    s = manifold("sphere2")
    rng = np.random.default_rng(20)
    src = VonMisesLaw(random_flux(rng, s, 1.0), s)
    dst = VonMisesLaw(random_flux(rng, s, 3.0), s)
    x = src.sample(rng, 2000)
    y = transport_map(src, dst, x)
    rho = stats.spearmanr(x @ src.mean_direction, y @ dst.mean_direction).statistic
    assert rho == pytest.approx(1.0, abs=1e-12)


def test_transport_pushforward_moments(mfd):
    rng = np.random.default_rng(21)
    src = VonMisesLaw(random_flux(rng, mfd, 0.8), mfd)
    dst = VonMisesLaw(random_flux(rng, mfd, 1.6), mfd)
    n = 4000 if mfd.kind == "rotations3" else 40_000
    x = src.sample(rng, n)
    e = mfd.embed(transport_map(src, dst, x)).reshape(n, -1)
    se = e.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(e.mean(axis=0) - dst.mean_flux()) < 4.5 * se)


def test_transport_from_uniform(mfd):
    rng = np.random.default_rng(22)
    src = VonMisesLaw(np.zeros(mfd.embed_dim), mfd)
    dst = VonMisesLaw(random_flux(rng, mfd, 1.0), mfd)
    n = 3000 if mfd.kind == "rotations3" else 30_000
    e = mfd.embed(transport_map(src, dst, mfd.sample_uniform(rng, n))).reshape(n, -1)
    se = e.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(e.mean(axis=0) - dst.mean_flux()) < 4.5 * se)


def _rotation_law(lam, kappa):
    return VonMisesLaw(matrix_to_flux(kappa * lam), manifold("rotations3"))


def test_two_sided_translation_pushforward():
    r = manifold("rotations3")
    rng = np.random.default_rng(23)
    L1, L2 = quat_to_matrix(r.sample_uniform(rng, 2))
    src, dst = _rotation_law(L1, 1.5), _rotation_law(L2, 1.5)
    x = src.sample(rng, 5000)
    pushed = quat_to_matrix(two_sided_translation(L1, L2, x))
    direct = quat_to_matrix(dst.sample(rng, 5000))
    tr_p = np.trace(L2.T @ pushed, axis1=-2, axis2=-1)
    tr_d = np.trace(L2.T @ direct, axis1=-2, axis2=-1)
    assert stats.ks_2samp(tr_p, tr_d).pvalue > 1e-3


def test_isotropic_rotation_transport_is_group_translation():
    r = manifold("rotations3")
    rng = np.random.default_rng(24)
    L1, L2 = quat_to_matrix(r.sample_uniform(rng, 2))
    src, dst = _rotation_law(L1, 1.2), _rotation_law(L2, 1.2)
    x = src.sample(rng, 100)
    expected = L2 @ L1.T @ quat_to_matrix(x)
    got = quat_to_matrix(transport_map(src, dst, x))
    np.testing.assert_allclose(got, expected, atol=1e-9)


def test_so3_frame_is_proper():
    rng = np.random.default_rng(25)
    J = rng.standard_normal(9)
    U, s, V, iso = so3_frame(J)
    assert not iso
    assert np.linalg.det(U) == pytest.approx(1) and np.linalg.det(V) == pytest.approx(1)
    np.testing.assert_allclose(U @ np.diag(s) @ V.T, J.reshape(3, 3) / np.sqrt(3), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 4.0), st.floats(0.0, 4.0), st.floats(0, 2 * np.pi))
def test_circle_transport_monotone(k1, k2, shift):
    c = manifold("circle")
    src = VonMisesLaw([k1, 0.0], c)
    dst = VonMisesLaw([k2 * np.cos(shift), k2 * np.sin(shift)], c)
    theta = np.linspace(-np.pi + 1e-6, np.pi - 1e-6, 400)
    out = transport_map(src, dst, theta)
    unwrapped = np.unwrap(out)
    assert np.all(np.diff(unwrapped) >= -1e-12)
