"""Deterministic BGK solvers on a periodic torus times a manifold quadrature.

The kinetic equation is solved in mild form,

    f(t + dt) = e^{-dt} T_dt f(t) + int_0^dt e^{-(dt - s)} T_{dt - s} G(f(t + s)) ds,

with ``T`` the free transport along the velocity map and
``G(f) = rho_f M_{J(x)}`` the collision gain.  ``J`` is the kernel-smoothed
flux (kernel mode) or the local flux of ``f`` (local mode, ``kernel=None``).
The s-integral uses the trapezoid rule on ``G`` with the exponential factor
integrated exactly, and the implicit endpoint is resolved by Picard
iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .interaction import RegularityConstants, mean_flux, node_densities
from .observation import grid_flux_field, local_flux_field

log = logging.getLogger(__name__)

LOCAL = None


class SolverError(RuntimeError):
    """Raised when a solver precondition or invariant fails."""


# --- density containers -------------------------------------------------------------


@dataclass
class DensityGrid:
    """Density values f(x_cell, m_node), array of shape (n, ..., n, n_nodes)."""

    values: np.ndarray
    L: float
    manifold: object
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != len(self.manifold.weights):
            raise ValueError("last axis must match the manifold quadrature")
        if len(set(self.values.shape[:-1])) != 1:
            raise ValueError("spatial lattice must be cubic")

    @property
    def d(self):
        return self.values.ndim - 1

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def h(self):
        return self.L / self.n

    @property
    def cell_volume(self):
        return self.h**self.d

    def rho(self):
        return self.values @ self.manifold.weights

    def mass(self):
        return float(self.cell_volume * self.rho().sum())

    def sup_norm(self):
        return float(np.abs(self.values).max())

    def local_flux(self):
        return local_flux_field(self.values, self.manifold)

    def cell_centres(self):
        c = (np.arange(self.n) + 0.5) * self.h
        return np.stack(np.meshgrid(*([c] * self.d), indexing="ij"), axis=-1)

    def replace(self, values, t=None):
        return DensityGrid(values, self.L, self.manifold, self.t if t is None else t)

    def copy(self):
        return self.replace(self.values.copy())

    def l1(self, other):
        self._check_same_grid(other)
        return float(self.cell_volume * (np.abs(self.values - other.values) @ self.manifold.weights).sum())

    def _check_same_grid(self, other):
        if self.values.shape != other.values.shape or self.L != other.L or self.manifold != other.manifold:
            raise ValueError("density grids differ in lattice, side length or quadrature")

    @classmethod
    def uniform(cls, mfd, n, d, L):
        return cls(np.full((n,) * d + (len(mfd.weights),), 1.0 / L**d), L, mfd)

    @classmethod
    def product(cls, mfd, n, d, L, spatial=None, orientation=None):
        """Normalized product density rho(x) g(m).

        ``spatial`` maps cell centres (..., d) to nonnegative values and
        ``orientation`` gives the orientation density at the quadrature
        nodes (with respect to the normalized volume); both default to
        uniform.
        """
        grid = cls.uniform(mfd, n, d, L)
        x = grid.cell_centres()
        rho = np.ones(x.shape[:-1]) if spatial is None else np.asarray(spatial(x), dtype=float)
        g = np.ones(len(mfd.weights)) if orientation is None else np.asarray(orientation, dtype=float)
        values = rho[..., None] * g
        if np.any(values < 0):
            raise ValueError("density must be nonnegative")
        grid.values = values
        return grid.normalized()

    def normalized(self):
        return self.replace(self.values / self.mass())

    def sample_atoms(self, rng, size):
        """Draw positions and node indices: categorical over (cell, node), uniform jitter in the cell."""
        p = (self.values * self.manifold.weights).ravel()
        p = np.clip(p, 0.0, None)
        p /= p.sum()
        flat = rng.choice(p.size, size=size, p=p)
        cell, node = np.divmod(flat, len(self.manifold.weights))
        idx = np.stack(np.unravel_index(cell, (self.n,) * self.d), axis=-1)
        x = (idx + rng.random((size, self.d))) * self.h
        return x, self.manifold.nodes[node]


@dataclass
class HomogeneousDensity:
    """A probability measure on the manifold as masses at the quadrature nodes."""

    masses: np.ndarray
    manifold: object

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if abs(self.masses.sum() - 1.0) > 1e-10:
            raise ValueError("node masses must sum to 1")

    def flux(self):
        return self.masses @ self.manifold.node_embeddings

    @classmethod
    def from_density(cls, values, mfd):
        m = np.asarray(values, dtype=float) * mfd.weights
        return cls(m / m.sum(), mfd)

    @classmethod
    def uniform(cls, mfd):
        return cls(mfd.weights.copy(), mfd)


# --- operators ------------------------------------------------------------------------


def _node_velocities(f):
    v = f.manifold.velocity(f.manifold.nodes)
    if v.shape[-1] != f.d:
        raise ValueError(f"velocity map of {f.manifold.kind} lives in R^{v.shape[-1]}, grid is {f.d}-dimensional")
    return v


def _shift_nodes(values, shifts):
    """out[..., q] = values(x - shifts[q] h) by periodic linear interpolation."""
    out = values
    n = values.shape[0]
    d = values.ndim - 1
    idx = np.arange(n)
    for axis in range(d):
        s = shifts[:, axis]
        k = np.floor(s).astype(int)
        theta = s - k
        shape = [1] * (d + 1)
        shape[axis] = n
        i = idx.reshape(shape)
        lo = np.mod(i - k, n)
        hi = np.mod(i - k - 1, n)
        out = (1.0 - theta) * np.take_along_axis(out, lo, axis=axis) + theta * np.take_along_axis(out, hi, axis=axis)
    return out


def free_transport(f, dt):
    """Semi-Lagrangian back-trace f(x - dt Phi(m), m) with periodic linear interpolation."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return f.copy()
    shifts = dt * _node_velocities(f) / f.h
    return f.replace(_shift_nodes(f.values, shifts), t=f.t + dt)


def flux_field(f, kernel):
    return f.local_flux() if kernel is LOCAL else grid_flux_field(kernel, f)


def collision_term(f, kernel=LOCAL):
    """Gain G(x, m) = rho_f(x) M_{J(x)}(m)."""
    J = flux_field(f, kernel)
    return f.replace(f.rho()[..., None] * node_densities(J, f.manifold))


def contraction_bound(f, kernel=LOCAL, a=None):
    """alpha(b) + b theta(b) with b the kernel sup-norm or the local a-bound."""
    b = kernel.sup_norm if kernel is not LOCAL else (a if a is not None else f.sup_norm())
    return RegularityConstants(b).collision_lipschitz()


def _weights(dt):
    # int_0^dt e^{-(dt-s)} g(s) ds with g linear between its endpoint values
    e = np.exp(-dt)
    w1 = (dt - 1.0 + e) / dt
    return e, (1.0 - e) - w1, w1


@dataclass
class StepInfo:
    iterations: int
    residuals: list
    renormalization: float
    clamp: float


def picard_map(f, g, dt, kernel=LOCAL, _fixed=None):
    """One application of the discrete Duhamel fixed-point map to a guess ``g`` of f(t + dt)."""
    e, w0, w1 = _weights(dt)
    if _fixed is None:
        _fixed = e * free_transport(f, dt).values + w0 * free_transport(collision_term(f, kernel), dt).values
    return f.replace(_fixed + w1 * collision_term(g, kernel).values, t=f.t + dt)


def duhamel_step(f, dt, kernel=LOCAL, picard_tol=1e-8, max_iters=50):
    """Advance one step of the mild formulation; returns (new grid, StepInfo)."""
    e, w0, _ = _weights(dt)
    transported = free_transport(f, dt)
    fixed = e * transported.values + w0 * free_transport(collision_term(f, kernel), dt).values
    g = transported
    residuals = []
    for it in range(1, max_iters + 1):
        new = picard_map(f, g, dt, kernel, _fixed=fixed)
        res = new.l1(g)
        residuals.append(res)
        g = new
        if res < picard_tol:
            break
    else:
        raise SolverError(
            f"Picard iteration did not contract in {max_iters} iterations (last residual {residuals[-1]:.3e}); reduce dt"
        )
    neg = float(max(0.0, -g.values.min()))
    if neg > 0:
        g.values = np.clip(g.values, 0.0, None)
    mass = g.mass()
    g.values /= mass
    return g, StepInfo(it, residuals, mass, neg)


# --- horizon for the local equation ---------------------------------------------------


def local_horizon(sup0, a):
    """Existence horizon of the local equation for ||f0||_inf = sup0 < a.

    T(a) = log((a alpha(a) - sup0) / (a alpha(a) - a)).
    """
    if not 0 <= sup0 < a:
        return 0.0
    aa = a * RegularityConstants(a).alpha
    return float(np.log((aa - sup0) / (aa - a)))


def best_local_horizon(sup0):
    """Choose a > sup0 maximizing the local horizon; returns (a, T)."""
    if sup0 <= 0:
        raise ValueError("sup-norm must be positive")
    res = minimize_scalar(lambda a: -local_horizon(sup0, a), bounds=(sup0 * (1 + 1e-9), sup0 + 10.0), method="bounded")
    return float(res.x), float(-res.fun)


# --- full solver ----------------------------------------------------------------------


@dataclass
class SolveResult:
    times: np.ndarray
    snapshots: list
    renormalizations: list = field(default_factory=list)
    clamps: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    a: float | None = None
    horizon: float | None = None

    @property
    def cumulative_drift(self):
        return float(abs(np.prod(self.renormalizations) - 1.0)) if self.renormalizations else 0.0

    @property
    def max_step_drift(self):
        return float(max((abs(r - 1.0) for r in self.renormalizations), default=0.0))


def solve(f0, t_end, dt, kernel=LOCAL, a=None, picard_tol=1e-8, max_iters=50, save_every=1, mass_tol=1e-3):
    """Run duhamel_step to ``t_end``; snapshots every ``save_every`` steps."""
    if t_end <= 0 or dt <= 0:
        raise ValueError("t_end and dt must be positive")
    steps = int(round(t_end / dt))
    if abs(steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt")
    if abs(f0.mass() - 1.0) > mass_tol:
        raise SolverError(f"initial mass {f0.mass():.6f} is not 1")
    horizon = None
    if kernel is LOCAL:
        sup0 = f0.sup_norm()
        if a is None:
            a, horizon = best_local_horizon(sup0)
        else:
            horizon = local_horizon(sup0, a)
        if t_end > horizon:
            raise SolverError(
                f"t_end={t_end} exceeds the local existence horizon {horizon:.4g} (a={a:.4g}, ||f0||_inf={sup0:.4g})"
            )
    f = f0.copy()
    out = SolveResult(np.array([f0.t]), [f0.copy()], a=a, horizon=horizon)
    times = [f0.t]
    for k in range(1, steps + 1):
        f, info = duhamel_step(f, dt, kernel, picard_tol, max_iters)
        f.t = f0.t + k * dt
        out.renormalizations.append(info.renormalization)
        out.clamps.append(info.clamp)
        out.iterations.append(info.iterations)
        if kernel is LOCAL and f.sup_norm() > a:
            raise SolverError(f"sup-norm {f.sup_norm():.4g} left the a-ball (a={a:.4g}) at t={f.t:.4g}")
        if k % save_every == 0 or k == steps:
            out.snapshots.append(f.copy())
            times.append(f.t)
    out.times = np.array(times)
    if out.cumulative_drift > mass_tol:
        log.warning("cumulative mass renormalization %.3e exceeds tolerance %.1e", out.cumulative_drift, mass_tol)
    return out


# --- homogeneous equation -------------------------------------------------------------


def _rk4(rhs, y0, t_end, dt):
    steps = int(round(t_end / dt))
    if abs(steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of dt")
    ys = [np.array(y0, dtype=float)]
    y = ys[0]
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys.append(y)
    return np.arange(steps + 1) * dt, np.array(ys)


def homogeneous_rhs(masses, mfd):
    J = masses @ mfd.node_embeddings
    return mfd.weights * node_densities(J, mfd) - masses


def homogeneous_solve(nu0, t_end, dt):
    """RK4 for d nu / dt = M_{J_nu} - nu on node masses; returns (times, masses)."""
    mfd = nu0.manifold
    return _rk4(lambda p: homogeneous_rhs(p, mfd), nu0.masses, t_end, dt)


def flux_ode(J0, t_end, dt, mfd):
    """RK4 for dJ/dt = mean_flux(M_J) - J; returns (times, fluxes)."""
    return _rk4(lambda J: mean_flux(J, mfd) - J, J0, t_end, dt)


# --- translation, tightness and equicontinuity diagnostics ----------------------------


def _roll_cells(values, shift):
    return np.roll(values, shift=tuple(int(s) for s in shift), axis=tuple(range(len(shift))))


def stability_diagnostics(series, shifts=(), radius=None, beta=None, centre=None):
    """Report translation stability, tightness and time-equicontinuity of a solver series.

    ``shifts`` are integer cell offsets.  Tightness compares the mass
    outside ``radius`` at the final time with the mass outside
    ``radius - beta T`` initially (balls centred at ``centre``).
    """
    f0 = series[0]
    report = {"translation": [], "tightness": None, "equicontinuity": []}
    for h in shifts:
        h = np.asarray(h, dtype=int)
        base = f0.l1(f0.replace(_roll_cells(f0.values, h)))
        if base == 0:
            continue
        ratios = [f.l1(f.replace(_roll_cells(f.values, h))) / base for f in series]
        report["translation"].append({"shift": h.tolist(), "sup_ratio": float(max(ratios))})
    if radius is not None:
        fT = series[-1]
        T = fT.t - f0.t
        beta = beta if beta is not None else float(np.max(np.linalg.norm(f0.manifold.velocity(f0.manifold.nodes), axis=-1)))
        c = np.full(f0.d, f0.L / 2) if centre is None else np.asarray(centre)
        r = np.linalg.norm(f0.cell_centres() - c, axis=-1)

        def outside(f, R):
            return float(f.cell_volume * f.rho()[r >= R].sum())

        report["tightness"] = {
            "radius": radius,
            "T": T,
            "outside_final": outside(fT, radius),
            "outside_initial": outside(f0, radius - beta * T),
        }
    times = np.array([f.t for f in series])
    for lag in range(1, max(1, len(series) // 2) + 1):
        gaps = [series[k + lag].l1(series[k]) for k in range(len(series) - lag)]
        report["equicontinuity"].append({"h": float(times[lag] - times[0]), "max_l1": float(max(gaps))})
    return report
