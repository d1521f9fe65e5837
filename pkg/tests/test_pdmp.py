import numpy as np
import pytest
from scipy import stats

from bgklab.bgk import DensityGrid, solve
from bgklab.geometry import manifold
from bgklab.interaction import node_densities
from bgklab.observation import KernelSpec, grid_flux_field, interpolate_periodic
from bgklab.pdmp import (
    FluxHistory,
    mckean_jump_law,
    replica_streams,
    simulate_coupled,
    simulate_homogeneous,
    simulate_ibm,
)


@pytest.fixture(scope="module")
def circle():
    return manifold("circle")


@pytest.fixture(scope="module")
def small_solution(circle):
    f0 = DensityGrid.product(circle, 8, 2, 4.0, orientation=node_densities(np.array([1.0, 0.0]), circle))
    kernel = KernelSpec(1.0, 2)
    return kernel, solve(f0, 1.0, 0.05, kernel)


def test_streams_are_reproducible_and_keyed():
    a = replica_streams(7, 1, 100, 3)
    b = replica_streams(7, 1, 100, 3)
    c = replica_streams(7, 1, 100, 4)
    assert a.clock.random() == b.clock.random()
    assert a.draws.random() != c.draws.random()
    s = replica_streams(7, 0)
    assert len({s.clock.random(), s.index.random(), s.draws.random()}) == 3


def test_jump_counts_are_poisson(circle):
    n, T = 20, 2.0
    counts = []
    for r in range(300):
        m0 = np.zeros(n)
        traj = simulate_homogeneous(m0, circle, T, replica_streams(1, r), [T])
        counts.append(len(traj.log))
    counts = np.array(counts)
    # mean and variance of Poisson(N T)
    assert abs(counts.mean() - n * T) < 4 * np.sqrt(n * T / len(counts))
    assert 0.75 < counts.var(ddof=1) / (n * T) < 1.3


def test_holding_times_are_exponential(circle):
    n = 10
    traj = simulate_homogeneous(np.zeros(n), circle, 200.0, replica_streams(2, 0), [200.0])
    waits = np.diff(np.concatenate([[0.0], traj.log.times]))
    assert stats.kstest(waits, "expon", args=(0, 1.0 / n)).pvalue > 1e-3
    # each agent jumps at rate one
    per_agent = np.bincount(traj.log.index, minlength=n) / 200.0
    assert np.all(np.abs(per_agent - 1.0) < 0.35)


def test_single_agent_redraw_law(circle):
    # with N = 1 the flux is the agent's own embedding, so the first redraw is von Mises(kappa=1) around m0
    m0 = 1.0
    draws = []
    for r in range(2000):
        traj = simulate_homogeneous(np.array([m0]), circle, 5.0, replica_streams(3, r), [5.0])
        if len(traj.log):
            draws.append(traj.log.new[0])
    draws = np.array(draws)
    edges = np.linspace(0, 2 * np.pi, 13)
    observed, _ = np.histogram(np.mod(draws, 2 * np.pi), edges)
    law = stats.vonmises(1.0, loc=m0)
    # bin probabilities on [0, 2pi) from the law wrapped onto (-pi, pi]
    cdf = lambda a: law.cdf(a) if a <= m0 + np.pi else 1.0 + law.cdf(a - 2 * np.pi)
    probs = np.diff([cdf(e) - cdf(0.0) for e in edges])
    assert stats.chisquare(observed, probs * len(draws)).pvalue > 1e-3


def test_isolated_agents_do_not_interact(circle):
    # two agents farther apart than the kernel support: each sees only itself
    kernel = KernelSpec(0.3, 2)
    x0 = np.array([[0.5, 0.5], [2.5, 2.5]])
    draws = []
    for r in range(1500):
        tr = simulate_ibm(x0, np.array([0.0, np.pi]), kernel, circle, 0.5, replica_streams(4, r), [0.5], box=4.0)
        if tr.n_jumps:
            draws.append(tr.orientations[-1][0])
    # agent 0 only ever redraws around its own heading: a mixture of von Mises laws centred at 0
    centred = np.angle(np.exp(1j * np.array(draws)))
    assert abs(np.mean(np.sin(centred))) < 4 / np.sqrt(len(draws))
    assert np.mean(np.cos(centred)) > 0.1


def test_free_flight_between_jumps(circle):
    kernel = KernelSpec(0.3, 2)
    x0 = np.array([[1.0, 1.0]])
    m0 = np.array([0.7])
    streams = replica_streams(5, 0)
    first = streams.clock.exponential(1.0)
    times = [first * 0.25, first * 0.5, first * 0.9]
    tr = simulate_ibm(x0, m0, kernel, circle, first * 0.95, replica_streams(5, 0), times, box=4.0)
    assert tr.n_jumps == 0
    expected = np.mod(x0 + np.array(times)[:, None, None] * circle.velocity(m0), 4.0)
    assert np.allclose(tr.positions, expected)


def test_ibm_rejects_bad_input(circle):
    with pytest.raises(ValueError):
        simulate_ibm(np.zeros((2, 3)), np.zeros(2), KernelSpec(0.3, 3), circle, 1.0, replica_streams(0, 0), [1.0])
    with pytest.raises(ValueError):
        simulate_ibm(np.zeros((2, 2)), np.zeros(2), KernelSpec(0.3, 2), circle, 1.0, replica_streams(0, 0), [2.0])


def test_homogeneous_replay_matches_snapshots(circle):
    ts = [0.3, 0.7, 1.0]
    traj = simulate_homogeneous(np.linspace(0, 6, 15), circle, 1.0, replica_streams(6, 0), ts)
    for t, snap in zip(ts, traj.orientations):
        assert np.array_equal(traj.replay(t), snap)


def test_flux_history_matches_snapshots(small_solution):
    kernel, sol = small_solution
    hist = FluxHistory(sol, kernel)
    x = np.array([[0.3, 1.7], [3.9, 0.1]])
    for k in (0, 5, len(sol.times) - 1):
        ref = interpolate_periodic(grid_flux_field(kernel, sol.snapshots[k]), 4.0, x)
        assert np.allclose(hist(sol.times[k], x), ref)
    mid = 0.5 * (sol.times[2] + sol.times[3])
    assert np.allclose(hist(mid, x), 0.5 * (hist(sol.times[2], x) + hist(sol.times[3], x)))
    with pytest.raises(ValueError):
        hist(1.5, x)


def test_mckean_jump_law_is_solver_flux(small_solution, circle):
    kernel, sol = small_solution
    law = mckean_jump_law(sol.snapshots[0], kernel, np.array([1.0, 1.0]))
    # uniform spatial density 1/L^2 times the mean flux of the initial orientation law
    expected = (circle.weights * node_densities(np.array([1.0, 0.0]), circle)) @ circle.node_embeddings / 16.0
    assert np.allclose(law.J, expected, atol=1e-10)


def test_coupled_bookkeeping(small_solution, circle):
    kernel, sol = small_solution
    rng = np.random.default_rng(0)
    n = 40
    x0 = rng.random((n, 2)) * 4.0
    m0 = rng.vonmises(0.0, 1.0, n)
    res = simulate_coupled(x0, m0, kernel, circle, sol, 1.0, replica_streams(8, 0), [0.0, 0.5, 1.0], 4.0)
    assert res.Y[0] == 0.0
    assert np.allclose(res.Y, res.Y_recomputed, atol=1e-9)
    assert np.all(res.Y >= 0)
    assert res.n_jumps == len(res.error_values) > 0
    assert np.all(res.error_values >= 0)
    assert res.first_jump_error == res.error_values[0]
    with pytest.raises(ValueError):
        simulate_coupled(x0, m0, kernel, circle, sol, 2.0, replica_streams(8, 0), [1.0], 4.0)
    with pytest.raises(ValueError):
        simulate_coupled(x0, m0, kernel, circle, sol, 1.0, replica_streams(8, 0), [1.0], 5.0)


def test_coupled_twins_share_clock(small_solution, circle):
    kernel, sol = small_solution
    rng = np.random.default_rng(1)
    x0 = rng.random((10, 2)) * 4.0
    m0 = rng.vonmises(0.0, 1.0, 10)
    a = simulate_coupled(x0, m0, kernel, circle, sol, 1.0, replica_streams(9, 0), [1.0], 4.0)
    b = simulate_coupled(x0, m0, kernel, circle, sol, 1.0, replica_streams(9, 0), [1.0], 4.0)
    assert np.array_equal(a.Y, b.Y)
    assert a.n_jumps == b.n_jumps


def test_sphere_particles_follow_flux_ode():
    from bgklab.bgk import flux_ode
    from bgklab.interaction import VonMisesLaw, mean_flux

    s2 = manifold("sphere2")
    J0 = np.array([0.0, 0.0, 3.0])
    _, J = flux_ode(mean_flux(J0, s2), 0.5, 0.01, s2)
    vals = []
    for r in range(10):
        st = replica_streams(11, r)
        traj = simulate_homogeneous(VonMisesLaw(J0, s2).sample(st.draws, 1000), s2, 0.5, st, [0.5])
        vals.append(traj.orientations[-1].mean(axis=0)[2])
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - J[-1, 2]) < 4 * se
