"""Compact orientation manifolds: the circle, the 2-sphere and SO(3).

Points are stored as plain numpy arrays, batched along leading axes:

* circle     -- angle in radians, coordinate shape ``()``
* sphere2    -- unit 3-vector, coordinate shape ``(3,)``
* rotations3 -- unit quaternion ``(w, x, y, z)`` with ``q ~ -q``, shape ``(4,)``

Every manifold carries an isometric embedding into a Euclidean space E with
``|embed(m)| <= 1``, a geodesic distance, a normalized product quadrature
and a velocity map into R^d.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

KINDS = ("circle", "sphere2", "rotations3")

# constant relating the SO(3) rotation angle to the geodesic distance of the
# scaled embedding vec(A)/sqrt(3): chordal = sqrt(8/3) sin(phi/2) <= sqrt(2/3) phi
SO3_GEODESIC_SCALE = np.sqrt(2.0 / 3.0)


def periodic_delta(x1, x2, box=None):
    """Displacement x1 - x2, wrapped to the minimum image when ``box`` is set."""
    dx = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
    if box is not None:
        dx = dx - box * np.round(dx / box)
    return dx


def position_distance(x1, x2, box=None):
    return np.linalg.norm(periodic_delta(x1, x2, box), axis=-1)


class Manifold:
    """Base class; use :func:`manifold` to build one."""

    kind: str
    intrinsic_dim: int
    embed_dim: int
    coord_shape: tuple
    velocity_dim: int
    geodesic_scale = 1.0
    min_order = 1
    default_order = 1

    def __init__(self, quadrature_order=None):
        order = self.default_order if quadrature_order is None else int(quadrature_order)
        if order < self.min_order:
            raise ValueError(f"{self.kind}: quadrature order {order} < minimum {self.min_order}")
        self.quadrature_order = order

    def __repr__(self):
        return f"{type(self).__name__}(quadrature_order={self.quadrature_order})"

    def __eq__(self, other):
        return type(self) is type(other) and self.quadrature_order == other.quadrature_order

    def __hash__(self):
        return hash((self.kind, self.quadrature_order))

    def __getstate__(self):
        # cached quadrature arrays are rebuilt on demand
        return {"quadrature_order": self.quadrature_order}

    def __setstate__(self, state):
        self.quadrature_order = state["quadrature_order"]

    def with_order(self, order):
        return type(self)(order)

    def batch_shape(self, m):
        m = np.asarray(m)
        k = len(self.coord_shape)
        return m.shape[: m.ndim - k] if k else m.shape

    # subclasses implement: embed, distance, sample_uniform, velocity, _build_quadrature

    @cached_property
    def _quadrature(self):
        nodes, weights = self._build_quadrature(self.quadrature_order)
        return nodes, weights, self.embed(nodes)

    @property
    def nodes(self):
        return self._quadrature[0]

    @property
    def weights(self):
        return self._quadrature[1]

    @property
    def node_embeddings(self):
        return self._quadrature[2]

    def quadrature(self, order=None):
        """Return ``(nodes, weights)``; weights are positive and sum to one."""
        if order is None or order == self.quadrature_order:
            return self.nodes, self.weights
        if order < self.min_order:
            raise ValueError(f"{self.kind}: quadrature order {order} < minimum {self.min_order}")
        return self._build_quadrature(int(order))

    def chordal_distance(self, m1, m2):
        return np.linalg.norm(self.embed(m1) - self.embed(m2), axis=-1)

    @cached_property
    def velocity_bounds(self):
        """``(lipschitz, speed)`` bounds of the velocity map w.r.t. the geodesic distance."""
        return self._velocity_bounds()

    def _velocity_bounds(self):
        return 1.0, 1.0

    def check_embedding(self, rng, n=10_000):
        """Assert |embed| <= 1 and chordal <= geodesic on random pairs."""
        a = self.sample_uniform(rng, n)
        b = self.sample_uniform(rng, n)
        norms = np.linalg.norm(self.embed(a), axis=-1)
        chord = self.chordal_distance(a, b)
        geo = self.distance(a, b)
        if norms.max() > 1 + 1e-12:
            raise AssertionError(f"{self.kind}: embedded norm {norms.max()} exceeds 1")
        if np.any(chord > geo + 1e-12):
            raise AssertionError(f"{self.kind}: chordal distance exceeds geodesic distance")
        return float(norms.max()), float(np.max(chord - geo))


class Circle(Manifold):
    kind = "circle"
    intrinsic_dim = 1
    embed_dim = 2
    coord_shape = ()
    velocity_dim = 2
    min_order = 4
    default_order = 64

    def canonical(self, m):
        return np.mod(np.asarray(m, dtype=float), 2 * np.pi)

    def embed(self, m):
        m = np.asarray(m, dtype=float)
        return np.stack([np.cos(m), np.sin(m)], axis=-1)

    def from_embedding(self, v):
        v = np.asarray(v, dtype=float)
        return np.mod(np.arctan2(v[..., 1], v[..., 0]), 2 * np.pi)

    def distance(self, m1, m2):
        diff = np.abs(np.mod(np.asarray(m1, dtype=float) - np.asarray(m2, dtype=float), 2 * np.pi))
        return np.minimum(diff, 2 * np.pi - diff)

    @property
    def diameter(self):
        return np.pi

    def sample_uniform(self, rng, size=None):
        return rng.uniform(0.0, 2 * np.pi, size)

    def velocity(self, m):
        return self.embed(m)

    def _build_quadrature(self, order):
        nodes = 2 * np.pi * np.arange(order) / order
        return nodes, np.full(order, 1.0 / order)


class Sphere2(Manifold):
    kind = "sphere2"
    intrinsic_dim = 2
    embed_dim = 3
    coord_shape = (3,)
    velocity_dim = 3
    min_order = 2
    default_order = 24

    def canonical(self, m):
        m = np.asarray(m, dtype=float)
        return m / np.linalg.norm(m, axis=-1, keepdims=True)

    def embed(self, m):
        # a copy, so callers may keep embeddings next to the orientations they mutate
        return np.array(m, dtype=float)

    def from_embedding(self, v):
        return self.canonical(v)

    def distance(self, m1, m2):
        m1 = np.asarray(m1, dtype=float)
        m2 = np.asarray(m2, dtype=float)
        # atan2 form stays accurate near 0 and pi
        cross = np.linalg.norm(np.cross(m1, m2), axis=-1)
        dot = np.sum(m1 * m2, axis=-1)
        return np.arctan2(cross, dot)

    @property
    def diameter(self):
        return np.pi

    def sample_uniform(self, rng, size=None):
        shape = (3,) if size is None else (*np.atleast_1d(size), 3)
        g = rng.standard_normal(shape)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def velocity(self, m):
        return np.asarray(m, dtype=float)

    def _build_quadrature(self, order):
        # Gauss-Legendre in cos(theta) x uniform azimuth
        u, wu = np.polynomial.legendre.leggauss(order)
        n_phi = 2 * order
        phi = 2 * np.pi * np.arange(n_phi) / n_phi
        uu, pp = np.meshgrid(u, phi, indexing="ij")
        s = np.sqrt(1.0 - uu**2)
        nodes = np.stack([s * np.cos(pp), s * np.sin(pp), uu], axis=-1).reshape(-1, 3)
        weights = np.repeat(wu / 2.0, n_phi) / n_phi
        return nodes, weights


class Rotations3(Manifold):
    """SO(3) with the embedding A -> vec(A)/sqrt(3).

    Under A.B = Tr(A^T B)/2 rescaled by sqrt(2/3), the Euclidean norm of
    vec(A)/sqrt(3) equals one for every rotation.
    """

    kind = "rotations3"
    intrinsic_dim = 3
    embed_dim = 9
    coord_shape = (4,)
    velocity_dim = 3
    geodesic_scale = SO3_GEODESIC_SCALE
    min_order = 2
    default_order = 6

    def canonical(self, q):
        q = np.asarray(q, dtype=float)
        q = q / np.linalg.norm(q, axis=-1, keepdims=True)
        sign = np.where(q[..., :1] < 0, -1.0, 1.0)
        return q * sign

    def embed(self, q):
        mat = quat_to_matrix(q)
        return mat.reshape(*mat.shape[:-2], 9) / np.sqrt(3.0)

    def from_embedding(self, v):
        v = np.asarray(v, dtype=float)
        return matrix_to_quat(v.reshape(*v.shape[:-1], 3, 3) * np.sqrt(3.0))

    def rotation_angle(self, q1, q2):
        dot = np.abs(np.sum(np.asarray(q1, dtype=float) * np.asarray(q2, dtype=float), axis=-1))
        return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))

    def distance(self, q1, q2):
        q1 = np.asarray(q1, dtype=float)
        q2 = np.asarray(q2, dtype=float)
        # 2*atan2(|q1 - q2| part, |dot|) is stable where arccos is not
        dot = np.sum(q1 * q2, axis=-1)
        sign = np.where(dot < 0, -1.0, 1.0)[..., None]
        q2s = q2 * sign
        diff = np.linalg.norm(q1 - q2s, axis=-1)
        summ = np.linalg.norm(q1 + q2s, axis=-1)
        return self.geodesic_scale * 4.0 * np.arctan2(diff, summ)

    @property
    def diameter(self):
        return self.geodesic_scale * np.pi

    def sample_uniform(self, rng, size=None):
        shape = (4,) if size is None else (*np.atleast_1d(size), 4)
        return self.canonical(rng.standard_normal(shape))

    def velocity(self, q):
        return quat_to_matrix(q)[..., :, 0]

    def _velocity_bounds(self):
        # sampled maximization of |A e1 - B e1| / d(A, B) over near pairs
        rng = np.random.default_rng(20240601)
        a = self.sample_uniform(rng, 20_000)
        axis = rng.standard_normal((20_000, 3))
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        angle = 10.0 ** rng.uniform(-4, 0, 20_000)
        b = self.canonical(quat_multiply(a, axis_angle_to_quat(axis, angle)))
        ratio = np.linalg.norm(self.velocity(a) - self.velocity(b), axis=-1) / self.distance(a, b)
        # 1% margin over the sampled supremum
        return float(1.01 * ratio.max()), 1.0

    def _build_quadrature(self, order):
        # ZYZ Euler angles: Haar = sin(beta) d alpha d beta d gamma / (8 pi^2)
        u, wu = np.polynomial.legendre.leggauss(order)
        n_ang = 2 * order
        ang = 2 * np.pi * np.arange(n_ang) / n_ang
        al, be, ga = np.meshgrid(ang, np.arccos(u), ang, indexing="ij")
        w = np.broadcast_to((wu / 2.0)[None, :, None], al.shape) / n_ang**2
        nodes = euler_zyz_to_quat(al.ravel(), be.ravel(), ga.ravel())
        return self.canonical(nodes), np.ascontiguousarray(w).ravel()


_CLASSES = {"circle": Circle, "sphere2": Sphere2, "rotations3": Rotations3}


def manifold(kind, quadrature_order=None):
    try:
        cls = _CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown manifold kind {kind!r}; expected one of {KINDS}") from None
    return cls(quadrature_order)


def product_distance(x1, m1, x2, m2, mfd, box=None):
    """|x1 - x2| (periodic when ``box`` is given) + d(m1, m2)."""
    return position_distance(x1, x2, box) + mfd.distance(m1, m2)


# --- quaternion / rotation helpers -------------------------------------------------


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(mat):
    """Rotation matrices to canonical unit quaternions (w >= 0)."""
    mat = np.asarray(mat, dtype=float)
    batch = mat.shape[:-2]
    m = mat.reshape(-1, 3, 3)
    tr = np.trace(m, axis1=1, axis2=2)
    # Shepperd's method: pick the largest of 4 candidates per matrix
    cand = np.stack(
        [tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1
    )
    k = np.argmax(cand, axis=1)
    q = np.empty((m.shape[0], 4))
    for idx in range(4):
        sel = k == idx
        if not np.any(sel):
            continue
        a = m[sel]
        if idx == 0:
            s = np.sqrt(1.0 + tr[sel]) * 2
            q[sel] = np.stack(
                [0.25 * s, (a[:, 2, 1] - a[:, 1, 2]) / s, (a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 1, 0] - a[:, 0, 1]) / s],
                axis=1,
            )
        elif idx == 1:
            s = np.sqrt(1.0 + a[:, 0, 0] - a[:, 1, 1] - a[:, 2, 2]) * 2
            q[sel] = np.stack(
                [(a[:, 2, 1] - a[:, 1, 2]) / s, 0.25 * s, (a[:, 0, 1] + a[:, 1, 0]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s],
                axis=1,
            )
        elif idx == 2:
            s = np.sqrt(1.0 + a[:, 1, 1] - a[:, 0, 0] - a[:, 2, 2]) * 2
            q[sel] = np.stack(
                [(a[:, 0, 2] - a[:, 2, 0]) / s, (a[:, 0, 1] + a[:, 1, 0]) / s, 0.25 * s, (a[:, 1, 2] + a[:, 2, 1]) / s],
                axis=1,
            )
        else:
            s = np.sqrt(1.0 + a[:, 2, 2] - a[:, 0, 0] - a[:, 1, 1]) * 2
            q[sel] = np.stack(
                [(a[:, 1, 0] - a[:, 0, 1]) / s, (a[:, 0, 2] + a[:, 2, 0]) / s, (a[:, 1, 2] + a[:, 2, 1]) / s, 0.25 * s],
                axis=1,
            )
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(*batch, 4)


def quat_multiply(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * angle
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def euler_zyz_to_quat(alpha, beta, gamma):
    """Quaternion of Rz(alpha) Ry(beta) Rz(gamma)."""
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, float), np.asarray(beta, float), np.asarray(gamma, float)
    )
    ez = np.array([0.0, 0.0, 1.0])
    ey = np.array([0.0, 1.0, 0.0])
    qa = axis_angle_to_quat(np.broadcast_to(ez, alpha.shape + (3,)), alpha)
    qb = axis_angle_to_quat(np.broadcast_to(ey, beta.shape + (3,)), beta)
    qg = axis_angle_to_quat(np.broadcast_to(ez, gamma.shape + (3,)), gamma)
    return quat_multiply(quat_multiply(qa, qb), qg)


def matrix_to_euler_zyz(mat):
    mat = np.asarray(mat, dtype=float)
    beta = np.arccos(np.clip(mat[..., 2, 2], -1.0, 1.0))
    alpha = np.mod(np.arctan2(mat[..., 1, 2], mat[..., 0, 2]), 2 * np.pi)
    gamma = np.mod(np.arctan2(mat[..., 2, 1], -mat[..., 2, 0]), 2 * np.pi)
    # gimbal lock: fold everything into alpha
    lock = np.sin(beta) < 1e-12
    if np.any(lock):
        full = np.mod(np.arctan2(-mat[..., 0, 1], mat[..., 1, 1]), 2 * np.pi)
        alpha = np.where(lock, full, alpha)
        gamma = np.where(lock, 0.0, gamma)
    return alpha, beta, gamma


def euler_zyz_to_matrix(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    ca, sa, cb, sb, cg, sg = np.broadcast_arrays(ca, sa, cb, sb, cg, sg)
    out = np.empty(ca.shape + (3, 3))
    out[..., 0, 0] = ca * cb * cg - sa * sg
    out[..., 0, 1] = -ca * cb * sg - sa * cg
    out[..., 0, 2] = ca * sb
    out[..., 1, 0] = sa * cb * cg + ca * sg
    out[..., 1, 1] = -sa * cb * sg + ca * cg
    out[..., 1, 2] = sa * sb
    out[..., 2, 0] = -sb * cg
    out[..., 2, 1] = sb * sg
    out[..., 2, 2] = cb
    return out


def matrix_axis_angle(mat):
    """Axis (unit) and angle in [0, pi] of rotation matrices."""
    mat = np.asarray(mat, dtype=float)
    q = matrix_to_quat(mat)
    vec = q[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    axis = np.where(s[..., None] > 1e-15, vec / np.where(s > 1e-15, s, 1.0)[..., None], np.array([0.0, 0.0, 1.0]))
    return axis, angle


def axis_angle_to_matrix(axis, angle):
    return quat_to_matrix(axis_angle_to_quat(axis, angle))


def rotation_between(a, b):
    """Minimal rotation matrix taking unit vector ``a`` to unit vector ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = np.linalg.norm(v)
    if s < 1e-14:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate by pi about any axis orthogonal to a
        perp = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        perp = perp - np.dot(perp, a) * a
        perp /= np.linalg.norm(perp)
        return 2.0 * np.outer(perp, perp) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx * ((1 - c) / s**2)
