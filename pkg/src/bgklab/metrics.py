"""Distances between measures and the statistics built on replica ensembles."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import position_distance
from .interaction import node_densities

ASSIGNMENT_BUDGET = 2048


@dataclass
class AssignmentResult:
    cost: float
    matching: np.ndarray

    def w1(self):
        return self.cost / len(self.matching)


def cost_matrix(a_m, b_m, mfd, a_x=None, b_x=None, box=None):
    """Pairwise product distances |x - y| + d(m, m') (orientation only if positions are None)."""
    a_m = np.asarray(a_m, dtype=float)
    b_m = np.asarray(b_m, dtype=float)
    na, nb = len(a_m), len(b_m)
    shape = mfd.coord_shape
    am = a_m.reshape(na, 1, *shape)
    bm = b_m.reshape(1, nb, *shape)
    cost = mfd.distance(am, bm)
    if a_x is not None:
        cost = cost + position_distance(np.asarray(a_x)[:, None, :], np.asarray(b_x)[None, :, :], box)
    return cost


def w1_empirical(a_m, b_m, mfd, a_x=None, b_x=None, box=None):
    """Exact W1 between two uniform empirical measures of equal size by optimal assignment."""
    if len(a_m) != len(b_m):
        raise ValueError("empirical measures must have the same number of atoms")
    if (a_x is None) != (b_x is None):
        raise ValueError("give positions for both measures or for neither")
    n = len(a_m)
    if n > ASSIGNMENT_BUDGET:
        raise ValueError(f"{n} atoms exceed the assignment budget of {ASSIGNMENT_BUDGET}")
    cost = cost_matrix(a_m, b_m, mfd, a_x, b_x, box)
    rows, cols = linear_sum_assignment(cost)
    return AssignmentResult(float(cost[rows, cols].sum()), cols)


def w1_bruteforce(cost):
    """Minimum assignment cost by enumerating permutations (small N only)."""
    n = len(cost)
    if n > 8:
        raise ValueError("brute force is limited to 8 atoms")
    best = np.inf
    idx = np.arange(n)
    for perm in itertools.permutations(range(n)):
        best = min(best, cost[idx, list(perm)].sum())
    return float(best)


def w1_vs_density(a_x, a_m, f, resamples, rng, box=None):
    """Mean and standard error of W1(a, fresh N-sample of f) over resamples."""
    n = len(a_m)
    vals = []
    for _ in range(resamples):
        bx, bm = f.sample_atoms(rng, n)
        vals.append(w1_empirical(a_m, bm, f.manifold, a_x, bx, f.L if box is None else box).w1())
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.nan
    return float(vals.mean()), float(se)


def w1_vs_node_masses(a_m, nu, resamples, rng):
    """Orientation-only W1 between atoms and N-samples of a measure on quadrature nodes."""
    n = len(a_m)
    mfd = nu.manifold
    p = np.clip(nu.masses, 0.0, None)
    p = p / p.sum()
    vals = []
    for _ in range(resamples):
        bm = mfd.nodes[rng.choice(len(p), size=n, p=p)]
        vals.append(w1_empirical(a_m, bm, mfd).w1())
    vals = np.array(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.nan
    return float(vals.mean()), float(se)


def l1_grid(f, g):
    """Discrete L1 distance sum h^d w_q |f - g|."""
    return f.l1(g)


# --- chaoticity ---------------------------------------------------------------------


def _pair_covariance(v1, v2):
    r, n = v1.shape
    s1, s2 = v1.sum(axis=1), v2.sum(axis=1)
    pairs = (s1 * s2 - np.sum(v1 * v2, axis=1)) / (n * (n - 1))
    m1, m2 = v1.mean(axis=1), v2.mean(axis=1)
    cross = (m1.sum() * m2.sum() - np.sum(m1 * m2)) / (r * (r - 1))
    return pairs.mean() - cross


def chaoticity_covariance(v1, v2):
    """Cov(phi1(Z^1), phi2(Z^2)) from per-replica values of shape (replicas, agents).

    Uses every ordered pair of distinct agents (the agents are
    exchangeable); the product of means is a cross-replica U-statistic so
    the estimator is unbiased.  The standard error is the delete-one-replica
    jackknife.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape or v1.ndim != 2:
        raise ValueError("values must be (replicas, agents) arrays of equal shape")
    r, n = v1.shape
    if n < 2 or r < 3:
        raise ValueError("need at least two agents and three replicas")
    # covariance is shift invariant; centring makes constant observables exact zeros
    v1 = v1 - v1.mean()
    v2 = v2 - v2.mean()
    est = _pair_covariance(v1, v2)
    jack = np.array([_pair_covariance(np.delete(v1, k, axis=0), np.delete(v2, k, axis=0)) for k in range(r)])
    se = np.sqrt((r - 1) / r * np.sum((jack - jack.mean()) ** 2))
    return float(est), float(se)


# --- martingales of the homogeneous process -----------------------------------------


def observable_dictionary(mfd):
    """Default observables on the manifold: embedding coordinates and three smooth bumps."""
    funcs = {}
    dim = mfd.embed_dim
    for k in range(dim):
        funcs[f"e{k}"] = lambda m, k=k: mfd.embed(m)[..., k]
    rng = np.random.default_rng(12345)
    for j, c in enumerate(mfd.sample_uniform(rng, 3)):
        ec = mfd.embed(c)
        funcs[f"bump{j}"] = lambda m, ec=ec: np.exp(2.0 * (mfd.embed(m) @ ec - 1.0))
    return funcs


@dataclass
class MartingalePath:
    times: np.ndarray
    M: np.ndarray
    compensator: np.ndarray
    sup_M2: np.ndarray
    replica: int = 0


def martingale_path(traj, phi, mfd, replica=0):
    """Reconstruct M_t and its quadratic compensator from a homogeneous jump log.

    nu is constant between jumps, so the time integrals are exact sums; the
    moments of M_nu use the manifold quadrature.  ``phi`` is evaluated on
    orientation coordinates and acts linearly on measures.
    """
    n = len(traj.initial)
    log = traj.log
    if len(log.old) != len(log.times) or len(log.new) != len(log.times):
        raise ValueError("jump log is incomplete")
    nodes_phi = phi(mfd.nodes)
    w = mfd.weights
    vals = phi(traj.initial).astype(float)
    emb_sum = mfd.embed(traj.initial).reshape(n, -1).sum(axis=0)
    s1, s2 = vals.sum(), np.sum(vals**2)

    def rates():
        dens = w * node_densities(emb_sum / n, mfd)
        mphi, mphi2 = dens @ nodes_phi, dens @ nodes_phi**2
        nu1, nu2 = s1 / n, s2 / n
        return mphi - nu1, (mphi2 - 2 * mphi * nu1 + nu2) / n

    phi0 = s1 / n
    t_prev = 0.0
    integral = 0.0
    comp = 0.0
    sup2 = 0.0
    drift, qv = rates()
    times = np.asarray(traj.times)
    out_M, out_C, out_S = [], [], []
    k = 0
    old_phi = phi(log.old) if len(log) else np.zeros(0)
    new_phi = phi(log.new) if len(log) else np.zeros(0)
    old_emb = mfd.embed(log.old).reshape(len(log), -1) if len(log) else None
    new_emb = mfd.embed(log.new).reshape(len(log), -1) if len(log) else None

    def M_at(t):
        return s1 / n - phi0 - (integral + drift * (t - t_prev))

    for j in range(len(log) + 1):
        t_jump = log.times[j] if j < len(log) else np.inf
        while k < len(times) and times[k] < t_jump:
            mt = M_at(times[k])
            sup2 = max(sup2, mt * mt)
            out_M.append(mt)
            out_C.append(comp + qv * (times[k] - t_prev))
            out_S.append(sup2)
            k += 1
        if j == len(log):
            break
        # M just before the jump, then jump
        mt = M_at(t_jump)
        sup2 = max(sup2, mt * mt)
        integral += drift * (t_jump - t_prev)
        comp += qv * (t_jump - t_prev)
        t_prev = t_jump
        s1 += new_phi[j] - old_phi[j]
        s2 += new_phi[j] ** 2 - old_phi[j] ** 2
        emb_sum += new_emb[j] - old_emb[j]
        mt = M_at(t_jump)
        sup2 = max(sup2, mt * mt)
        drift, qv = rates()
    return MartingalePath(times, np.array(out_M), np.array(out_C), np.array(out_S), replica)


def phi_sup_norm(phi, mfd):
    """||phi||_inf estimated as twice the maximum over quadrature nodes."""
    return 2.0 * float(np.max(np.abs(phi(mfd.nodes))))


def martingale_stats(paths, phi, mfd, n_agents):
    """Replica aggregates: mean M with stderr, M^2 minus compensator, sup bound check."""
    M = np.array([p.M for p in paths])
    C = np.array([p.compensator for p in paths])
    S = np.array([p.sup_M2 for p in paths])
    r = len(paths)
    times = paths[0].times
    diff = M**2 - C
    norm = phi_sup_norm(phi, mfd)
    bound = 16 * norm**2 * times / n_agents
    return {
        "times": times,
        "mean_M": M.mean(axis=0),
        "se_M": M.std(axis=0, ddof=1) / np.sqrt(r),
        "mean_M2_minus_comp": diff.mean(axis=0),
        "se_M2_minus_comp": diff.std(axis=0, ddof=1) / np.sqrt(r),
        "mean_sup_M2": S.mean(axis=0),
        "sup_bound": bound,
        "phi_sup": norm,
        "replicas": r,
    }


# --- convergence rates ----------------------------------------------------------------


def loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.any(x <= 0) or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def coupling_envelope_log(n, t, kernel, lam):
    """log of the N-dependent coupling envelope (up to its constant).

    theta(b) sqrt(b/N) e^{(2 lam + s/N) t} exp(N t (e^{s/N} - 1)) / (N (e^{s/N} - 1))
    with b = |K|_inf and s = 2 theta(b) |K|_Lip; evaluated in log space.
    """
    b = kernel.sup_norm
    log_theta = float(np.logaddexp(2 * b, 4 * b))
    s = 2.0 * np.exp(log_theta) * kernel.lip_norm
    g = np.expm1(s / n)
    return float(log_theta + 0.5 * np.log(b / n) + (2 * lam + s / n) * t - np.log(n * g) + n * t * g)
