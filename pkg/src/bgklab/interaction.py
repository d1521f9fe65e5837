"""Von Mises interaction laws M_J(m) = exp(J.m) / Z on a compact manifold.

Normalizers and flux moments always go through the manifold's quadrature;
closed forms are left to the tests.  Sampling is exact: numpy's von Mises
sampler on the circle, inverse CDF of the polar coordinate on S^2 and
rejection against Haar measure on SO(3).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .geometry import (
    axis_angle_to_matrix,
    euler_zyz_to_matrix,
    matrix_axis_angle,
    matrix_to_euler_zyz,
    matrix_to_quat,
    quat_to_matrix,
    rotation_between,
)

ZERO_FLUX = 1e-12


# --- batched helpers used by the solvers --------------------------------------------


def log_normalizers(J, mfd):
    """log Z(J) for a batch of fluxes ``J`` of shape (..., embed_dim)."""
    logits = np.asarray(J, dtype=float) @ mfd.node_embeddings.T
    return logsumexp(logits, axis=-1, b=mfd.weights)


def node_densities(J, mfd):
    """M_J evaluated at the quadrature nodes; shape (..., n_nodes).

    By construction ``node_densities(J) @ weights == 1`` up to rounding.
    """
    logits = np.asarray(J, dtype=float) @ mfd.node_embeddings.T
    logz = logsumexp(logits, axis=-1, b=mfd.weights, keepdims=True)
    return np.exp(logits - logz)


def flux_of_atoms(mfd, m, weights=None):
    """J = sum_i w_i embed(m_i); uniform weights 1/N when ``weights`` is None."""
    emb = mfd.embed(m)
    emb = emb.reshape(-1, mfd.embed_dim)
    if weights is None:
        return emb.mean(axis=0)
    weights = np.asarray(weights, dtype=float).ravel()
    if np.any(weights < 0):
        raise ValueError("atom weights must be nonnegative")
    return weights @ emb


# --- regularity constants -----------------------------------------------------------


@dataclass(frozen=True)
class RegularityConstants:
    a: float

    @property
    def alpha(self):
        return float(np.exp(2 * self.a))

    @property
    def lip_L(self):
        return float(self.a * np.exp(2 * self.a))

    @property
    def theta(self):
        return float(np.exp(2 * self.a) + np.exp(4 * self.a))

    def collision_lipschitz(self):
        """alpha(a) + a theta(a): Lipschitz constant of f -> rho_f M_f."""
        return self.alpha + self.a * self.theta


def alpha(a):
    return RegularityConstants(a).alpha


def theta(a):
    return RegularityConstants(a).theta


# --- the law itself ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VonMisesLaw:
    J: np.ndarray
    manifold: object = field(repr=False)

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float).reshape(-1)
        if J.shape != (self.manifold.embed_dim,):
            raise ValueError(f"flux has shape {J.shape}, expected ({self.manifold.embed_dim},)")
        if not np.all(np.isfinite(J)):
            raise ValueError("flux must be finite")
        object.__setattr__(self, "J", J)

    @property
    def kappa(self):
        return float(np.linalg.norm(self.J))

    @property
    def is_uniform(self):
        return self.kappa < ZERO_FLUX

    @property
    def mean_direction(self):
        return self.J / self.kappa if not self.is_uniform else None

    @cached_property
    def log_normalizer(self):
        return float(log_normalizers(self.J, self.manifold))

    @property
    def normalizer(self):
        return float(np.exp(self.log_normalizer))

    def density(self, m):
        return np.exp(self.manifold.embed(m) @ self.J - self.log_normalizer)

    def mean_flux(self):
        mfd = self.manifold
        dens = node_densities(self.J, mfd)
        return (mfd.weights * dens) @ mfd.node_embeddings

    def sample(self, rng, size=None):
        return _SAMPLERS[self.manifold.kind](self, rng, size)


def normalizer(J, mfd):
    return VonMisesLaw(J, mfd).normalizer


def mean_flux(J, mfd):
    return VonMisesLaw(J, mfd).mean_flux()


# --- samplers ----------------------------------------------------------------------


def _sample_circle(law, rng, size):
    if law.is_uniform:
        return law.manifold.sample_uniform(rng, size)
    mu = np.arctan2(law.J[1], law.J[0])
    return np.mod(rng.vonmises(mu, law.kappa, size), 2 * np.pi)


def sphere_polar_inverse_cdf(p, kappa):
    """Inverse CDF of u = m.mu under density ~ exp(kappa u) on [-1, 1]."""
    p = np.asarray(p, dtype=float)
    if kappa < ZERO_FLUX:
        return 2.0 * p - 1.0
    return np.clip(1.0 + np.log(p + (1.0 - p) * np.exp(-2.0 * kappa)) / kappa, -1.0, 1.0)


def sphere_polar_cdf(u, kappa):
    u = np.asarray(u, dtype=float)
    if kappa < ZERO_FLUX:
        return 0.5 * (u + 1.0)
    return np.exp(kappa * (u - 1.0)) * (-np.expm1(-kappa * (u + 1.0))) / (-np.expm1(-2.0 * kappa))


def _sample_sphere(law, rng, size):
    n = 1 if size is None else int(np.prod(size))
    p = 1.0 - rng.random(n)  # (0, 1]
    phi = rng.uniform(0.0, 2 * np.pi, n)
    u = sphere_polar_inverse_cdf(p, law.kappa)
    s = np.sqrt(np.clip(1.0 - u * u, 0.0, None))
    local = np.stack([s * np.cos(phi), s * np.sin(phi), u], axis=-1)
    if law.is_uniform:
        out = local
    else:
        out = local @ rotation_between(np.array([0.0, 0.0, 1.0]), law.mean_direction).T
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out[0] if size is None else out.reshape(*np.atleast_1d(size), 3)


def _sample_rotations(law, rng, size):
    mfd = law.manifold
    n = 1 if size is None else int(np.prod(size))
    if law.is_uniform:
        out = mfd.sample_uniform(rng, n)
    else:
        kappa = law.kappa
        chunks = []
        have = 0
        # Haar proposals, accept with exp(J.m - |J|) <= 1
        while have < n:
            batch = max(64, int(1.5 * (n - have) * np.exp(kappa - law.log_normalizer)) + 16)
            q = mfd.sample_uniform(rng, batch)
            accept = rng.random(batch) < np.exp(mfd.embed(q) @ law.J - kappa)
            chunks.append(q[accept])
            have += int(accept.sum())
        out = np.concatenate(chunks)[:n]
    return out[0] if size is None else out.reshape(*np.atleast_1d(size), 4)


_SAMPLERS = {"circle": _sample_circle, "sphere2": _sample_sphere, "rotations3": _sample_rotations}


# --- regularity check (inequalities for alpha, L, theta) ---------------------------


def _random_fluxes(rng, n, dim, a):
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = a * rng.random(n) ** (1.0 / dim)
    # a quarter of the draws sit on the boundary |J| = a
    radius[: n // 4] = a
    return direction * radius[:, None]


def regularity_check(a, trials, rng, mfd, chunk=2000):
    """Check the L-infinity, Lipschitz and flux-Lipschitz bounds on random draws.

    Returns the largest observed ratio of each inequality (<= 1 means the
    bound holds).  Raises ``AssertionError`` on any violation.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    const = RegularityConstants(a)
    emb_nodes = mfd.node_embeddings
    worst = {"sup": 0.0, "lipschitz": 0.0, "flux_lipschitz": 0.0}
    violations = {k: 0 for k in worst}
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        J = _random_fluxes(rng, n, mfd.embed_dim, a)
        Jp = _random_fluxes(rng, n, mfd.embed_dim, a)
        # half of the J' sit close to J to probe the Lipschitz regime
        near = J + 1e-2 * a * rng.standard_normal(J.shape)
        norms = np.linalg.norm(near, axis=1, keepdims=True)
        near = np.where(norms > a, near * (a / norms), near)
        Jp[: n // 2] = near[: n // 2]

        m1 = mfd.sample_uniform(rng, n)
        m2 = mfd.sample_uniform(rng, n)
        if mfd.kind == "circle":
            m2[: n // 2] = m1[: n // 2] + 1e-3 * rng.standard_normal(n // 2)
        elif mfd.kind == "sphere2":
            m2[: n // 2] = mfd.canonical(m1[: n // 2] + 1e-3 * rng.standard_normal((n // 2, 3)))
        else:
            m2[: n // 2] = mfd.canonical(m1[: n // 2] + 1e-3 * rng.standard_normal((n // 2, 4)))
        e1, e2 = mfd.embed(m1), mfd.embed(m2)

        logz = log_normalizers(J, mfd)
        logzp = log_normalizers(Jp, mfd)
        d1 = np.exp(np.sum(J * e1, axis=1) - logz)
        d2 = np.exp(np.sum(J * e2, axis=1) - logz)
        nodes = np.exp(J @ emb_nodes.T - logz[:, None])
        nodes_p = np.exp(Jp @ emb_nodes.T - logzp[:, None])
        d1p = np.exp(np.sum(Jp * e1, axis=1) - logzp)
        d2p = np.exp(np.sum(Jp * e2, axis=1) - logzp)

        sup = np.maximum(nodes.max(axis=1), np.maximum(d1, d2))
        r_sup = sup / const.alpha
        dist = mfd.distance(m1, m2)
        r_lip = np.abs(d1 - d2) / (const.lip_L * np.maximum(dist, 1e-300))
        gap = np.maximum(np.abs(nodes - nodes_p).max(axis=1), np.maximum(np.abs(d1 - d1p), np.abs(d2 - d2p)))
        dJ = np.linalg.norm(J - Jp, axis=1)
        r_flux = np.where(dJ > 0, gap / (const.theta * np.maximum(dJ, 1e-300)), 0.0)

        for key, r in (("sup", r_sup), ("lipschitz", r_lip), ("flux_lipschitz", r_flux)):
            worst[key] = max(worst[key], float(r.max()))
            violations[key] += int(np.sum(r > 1.0 + 1e-12))
        done += n
    report = {
        "a": a,
        "alpha": const.alpha,
        "L": const.lip_L,
        "theta": const.theta,
        "trials": trials,
        "max_ratio": worst,
        "violations": violations,
    }
    if any(violations.values()):
        raise AssertionError(f"regularity bound violated: {report}")
    return report


# --- transport maps between two von Mises laws -------------------------------------


class _TabulatedCDF:
    """Piecewise-linear CDF of an unnormalized log-density on a uniform grid.

    Forward and inverse evaluations use the same table, so the round trip
    is exact up to rounding.
    """

    def __init__(self, lo, hi, log_density, n=4097):
        self.x = np.linspace(lo, hi, n)
        logp = log_density(self.x)
        p = np.exp(logp - logp.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]))])
        self.cdf = cdf / cdf[-1]

    def __call__(self, x):
        return np.interp(x, self.x, self.cdf)

    def inverse(self, p):
        return np.interp(p, self.cdf, self.x)


def _circle_cdf(kappa):
    return _TabulatedCDF(-np.pi, np.pi, lambda d: kappa * np.cos(d))


def _transport_circle(src, dst, m):
    mu_dst = np.arctan2(dst.J[1], dst.J[0]) if not dst.is_uniform else 0.0
    mu_src = np.arctan2(src.J[1], src.J[0]) if not src.is_uniform else mu_dst
    delta = np.mod(np.asarray(m, dtype=float) - mu_src + np.pi, 2 * np.pi) - np.pi
    new = _circle_cdf(dst.kappa).inverse(_circle_cdf(src.kappa)(delta))
    return np.mod(mu_dst + new, 2 * np.pi)


def _transport_sphere(src, dst, m):
    m = np.asarray(m, dtype=float)
    mu_dst = dst.mean_direction if not dst.is_uniform else np.array([0.0, 0.0, 1.0])
    mu_src = src.mean_direction if not src.is_uniform else mu_dst
    rotated = m @ rotation_between(mu_src, mu_dst).T
    u = np.clip(rotated @ mu_dst, -1.0, 1.0)
    u_new = sphere_polar_inverse_cdf(sphere_polar_cdf(u, src.kappa), dst.kappa)
    tangent = rotated - u[..., None] * mu_dst
    tnorm = np.linalg.norm(tangent, axis=-1, keepdims=True)
    # points exactly at a pole have no azimuth; any tangent direction will do
    fallback = np.cross(mu_dst, [1.0, 0.0, 0.0] if abs(mu_dst[0]) < 0.9 else [0.0, 1.0, 0.0])
    fallback /= np.linalg.norm(fallback)
    tangent = np.where(tnorm > 1e-14, tangent / np.where(tnorm > 1e-14, tnorm, 1.0), fallback)
    out = u_new[..., None] * mu_dst + np.sqrt(np.clip(1.0 - u_new**2, 0.0, None))[..., None] * tangent
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def flux_to_matrix(J):
    """F with J.embed(A) = Tr(F^T A) for the scaled SO(3) embedding."""
    return np.asarray(J, dtype=float).reshape(3, 3) / np.sqrt(3.0)


def matrix_to_flux(F):
    return np.asarray(F, dtype=float).reshape(9) * np.sqrt(3.0)


def so3_frame(J, tol=1e-10):
    """Proper SVD F = U diag(s) V^T with U, V in SO(3).

    When the singular values coincide the frame is canonicalized to
    ``U = Lambda, V = I`` with ``F = s * Lambda``.
    """
    F = flux_to_matrix(J)
    U, s, Vt = np.linalg.svd(F)
    if np.linalg.det(U) < 0:
        U[:, 2] *= -1
        s[2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[2, :] *= -1
        s[2] *= -1
    isotropic = np.ptp(s) <= tol * max(1.0, np.abs(s).max())
    if isotropic:
        U = U @ Vt
        Vt = np.eye(3)
        s = np.full(3, s.mean())
    return U, s, Vt.T, isotropic


def _so3_angle_cdf(s):
    # Haar angle density (1 - cos phi)/pi times exp(s Tr B) with Tr B = 1 + 2 cos phi
    return _TabulatedCDF(
        0.0, np.pi, lambda phi: np.log(np.maximum(1.0 - np.cos(phi), 1e-300)) + 2.0 * s * np.cos(phi)
    )


class _DiagonalRotationLaw:
    """Knothe-Rosenblatt coordinates for exp(sum_i s_i B_ii) on SO(3).

    Euler ZYZ angles are mapped to the unit cube in the order beta,
    alpha | beta, gamma | alpha, beta, with every conditional CDF tabulated
    on a fixed grid.
    """

    n_beta = 513
    n_alpha = 257
    n_gamma = 257
    n_inner = 24

    def __init__(self, s):
        self.s = np.asarray(s, dtype=float)
        self.beta = np.linspace(0.0, np.pi, self.n_beta)
        inner = 2 * np.pi * np.arange(self.n_inner) / self.n_inner
        la = self._logf(inner[:, None, None], self.beta[None, :, None], inner[None, None, :])
        shift = la.max()
        p = np.exp(la - shift).mean(axis=(0, 2)) * np.sin(self.beta)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]))])
        self.beta_cdf = cdf / cdf[-1]
        self.alpha_grid = np.linspace(0.0, 2 * np.pi, self.n_alpha)
        self.gamma_grid = np.linspace(0.0, 2 * np.pi, self.n_gamma)
        self._inner = inner

    def _logf(self, al, be, ga):
        s1, s2, s3 = self.s
        ca, sa = np.cos(al), np.sin(al)
        cb = np.cos(be)
        cg, sg = np.cos(ga), np.sin(ga)
        r11 = ca * cb * cg - sa * sg
        r22 = -sa * cb * sg + ca * cg
        return s1 * r11 + s2 * r22 + s3 * cb

    def _alpha_cdf(self, beta):
        la = self._logf(self.alpha_grid[None, :, None], beta[:, None, None], self._inner[None, None, :])
        p = np.exp(la - la.max(axis=(1, 2), keepdims=True)).mean(axis=2)
        return _row_cdf(p)

    def _gamma_cdf(self, alpha, beta):
        la = self._logf(alpha[:, None], beta[:, None], self.gamma_grid[None, :])
        p = np.exp(la - la.max(axis=1, keepdims=True))
        return _row_cdf(p)

    def to_cube(self, alpha, beta, gamma):
        u1 = np.interp(beta, self.beta, self.beta_cdf)
        u2 = _row_interp(alpha, self.alpha_grid, self._alpha_cdf(beta))
        u3 = _row_interp(gamma, self.gamma_grid, self._gamma_cdf(alpha, beta))
        return u1, u2, u3

    def from_cube(self, u1, u2, u3):
        beta = np.interp(u1, self.beta_cdf, self.beta)
        alpha = _row_inverse(u2, self.alpha_grid, self._alpha_cdf(beta))
        gamma = _row_inverse(u3, self.gamma_grid, self._gamma_cdf(alpha, beta))
        return alpha, beta, gamma


def _row_cdf(p):
    cdf = np.concatenate([np.zeros((p.shape[0], 1)), np.cumsum(0.5 * (p[:, 1:] + p[:, :-1]), axis=1)], axis=1)
    return cdf / cdf[:, -1:]


def _row_interp(x, grid, cdf):
    """Row-wise np.interp(x[i], grid, cdf[i]) for a uniform grid."""
    dx = grid[1] - grid[0]
    pos = np.clip((x - grid[0]) / dx, 0.0, len(grid) - 1 - 1e-12)
    k = np.floor(pos).astype(int)
    t = pos - k
    rows = np.arange(len(x))
    return (1 - t) * cdf[rows, k] + t * cdf[rows, k + 1]


def _row_inverse(p, grid, cdf):
    k = np.clip(np.sum(cdf < p[:, None], axis=1) - 1, 0, len(grid) - 2)
    rows = np.arange(len(p))
    lo, hi = cdf[rows, k], cdf[rows, k + 1]
    t = np.where(hi > lo, (p - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    return grid[k] + t * (grid[k + 1] - grid[k])


def _transport_rotations(src, dst, q):
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    A = quat_to_matrix(q.reshape(-1, 4))
    U1, s1, V1, iso1 = so3_frame(src.J)
    U2, s2, V2, iso2 = so3_frame(dst.J)
    B = U1.T @ A @ V1
    if iso1 and iso2:
        if np.allclose(s1, s2, rtol=0, atol=1e-14):
            Bn = B
        else:
            axis, angle = matrix_axis_angle(B)
            angle_new = _so3_angle_cdf(s2[0]).inverse(_so3_angle_cdf(s1[0])(angle))
            Bn = axis_angle_to_matrix(axis, angle_new)
    else:
        al, be, ga = matrix_to_euler_zyz(B)
        u = _DiagonalRotationLaw(s1).to_cube(al, be, ga)
        Bn = euler_zyz_to_matrix(*_DiagonalRotationLaw(s2).from_cube(*u))
    out = matrix_to_quat(U2 @ Bn @ V2.T)
    return out[0] if single else out.reshape(q.shape)


def transport_map(src, dst, m):
    """Push points ``m`` (distributed as ``src``) to points distributed as ``dst``.

    Rotates the mean direction of ``src`` onto that of ``dst`` and then
    rearranges the radial coordinate monotonically (polar angle on S^2,
    signed angle on S^1, rotation angle on SO(3)).  SO(3) laws whose flux
    matrix is not a multiple of a rotation use Knothe-Rosenblatt
    coordinates in the principal frames instead.  Identity when
    ``src`` and ``dst`` carry the same flux.
    """
    if src.manifold.kind != dst.manifold.kind:
        raise ValueError("laws live on different manifolds")
    if np.array_equal(src.J, dst.J):
        return np.array(m, dtype=float, copy=True)
    return _TRANSPORTS[src.manifold.kind](src, dst, m)


_TRANSPORTS = {"circle": _transport_circle, "sphere2": _transport_sphere, "rotations3": _transport_rotations}


def two_sided_translation(lam1, lam2, q):
    """A -> lam1^T A lam2 on unit quaternions (matrices ``lam1``, ``lam2``).

    Pushes the law with density ~ exp(kappa Tr(lam1^T A)) onto the one with
    parameter lam2 for equal concentrations.
    """
    A = quat_to_matrix(q)
    return matrix_to_quat(np.asarray(lam1).T @ A @ np.asarray(lam2))
