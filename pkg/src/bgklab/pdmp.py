"""Event-driven simulation of the N-agent jump processes.

All engines share one clock: holding times are exponential with rate N and
the jumping agent is uniform in {0, ..., N-1}.  Between jumps positions
move along the velocity map exactly.  Each replica owns three independent
generators (clock, index, orientation draws) derived from one root seed,
so the coupled engine can drive both of its systems with the same clock
and index streams.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import periodic_delta
from .interaction import VonMisesLaw, transport_map
from .observation import empirical_flux, grid_flux_field, interpolate_periodic


@dataclass
class Streams:
    clock: np.random.Generator
    index: np.random.Generator
    draws: np.random.Generator


def replica_streams(seed, *key):
    """Independent clock/index/draw generators for the replica labelled ``key``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    clock, index, draws = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))
    return Streams(clock, index, draws)


class _Clock:
    """Merged exponential clock of rate N with uniform indices, drawn in blocks."""

    def __init__(self, streams, n, block=4096):
        self.s = streams
        self.n = n
        self.block = block
        self._refill()

    def _refill(self):
        self.waits = self.s.clock.exponential(1.0 / self.n, self.block)
        self.idx = self.s.index.integers(0, self.n, self.block)
        self.k = 0

    def next(self):
        if self.k == self.block:
            self._refill()
        w, i = self.waits[self.k], self.idx[self.k]
        self.k += 1
        return float(w), int(i)


def _wrap(x, box):
    return x if box is None else np.mod(x, box)


def _check_times(sample_times, t_end):
    ts = np.asarray(sorted(sample_times), dtype=float)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if ts.size and (ts[0] < 0 or ts[-1] > t_end):
        raise ValueError("sample times must lie in [0, t_end]")
    return ts


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray | None
    orientations: np.ndarray
    n_jumps: int
    jump_times: np.ndarray


def simulate_ibm(x0, m0, kernel, mfd, t_end, streams, sample_times, box=None):
    """The N-agent piecewise-deterministic process with kernel-weighted alignment.

    At each jump the chosen agent draws from M_J with J the kernel flux of
    all agents (itself included) at its position at the jump time.
    """
    x = _wrap(np.array(x0, dtype=float), box)
    m = np.array(m0, dtype=float)
    n = len(x)
    if n < 1:
        raise ValueError("need at least one agent")
    emb = mfd.embed(m).reshape(n, -1)
    vel = mfd.velocity(m)
    if vel.shape[-1] != x.shape[-1]:
        raise ValueError("velocity map and position dimension differ")
    ts = _check_times(sample_times, t_end)
    clock = _Clock(streams, n)
    snaps_x, snaps_m, jumps = [], [], []
    t, k = 0.0, 0
    while True:
        wait, i = clock.next()
        t_next = t + wait
        while k < len(ts) and ts[k] < t_next:
            snaps_x.append(_wrap(x + (ts[k] - t) * vel, box))
            snaps_m.append(m.copy())
            k += 1
        if t_next > t_end:
            break
        x = _wrap(x + wait * vel, box)
        t = t_next
        J = empirical_flux(kernel, x, emb, x[i], box)
        m[i] = VonMisesLaw(J, mfd).sample(streams.draws)
        emb[i] = mfd.embed(m[i]).ravel()
        vel[i] = mfd.velocity(m[i])
        jumps.append(t)
    return Trajectory(ts, np.array(snaps_x), np.array(snaps_m), len(jumps), np.array(jumps))


@dataclass
class JumpLog:
    times: np.ndarray
    index: np.ndarray
    old: np.ndarray
    new: np.ndarray

    def __len__(self):
        return len(self.times)


@dataclass
class HomogeneousTrajectory:
    times: np.ndarray
    orientations: np.ndarray
    initial: np.ndarray
    log: JumpLog
    t_end: float

    def replay(self, t):
        """Orientations at time t reconstructed from the initial state and the log."""
        m = self.initial.copy()
        for tj, i, new in zip(self.log.times, self.log.index, self.log.new):
            if tj > t:
                break
            m[i] = new
        return m


def simulate_homogeneous(m0, mfd, t_end, streams, sample_times):
    """N orientations; the chosen one redraws from M_J with J the flux of all N."""
    m = np.array(m0, dtype=float)
    n = len(m)
    if n < 1:
        raise ValueError("need at least one particle")
    initial = m.copy()
    emb = mfd.embed(m).reshape(n, -1)
    total = emb.sum(axis=0)
    ts = _check_times(sample_times, t_end)
    clock = _Clock(streams, n)
    snaps, lt, li, lo, ln = [], [], [], [], []
    t, k = 0.0, 0
    while True:
        wait, i = clock.next()
        t_next = t + wait
        while k < len(ts) and ts[k] < t_next:
            snaps.append(m.copy())
            k += 1
        if t_next > t_end:
            break
        t = t_next
        new = VonMisesLaw(total / n, mfd).sample(streams.draws)
        lt.append(t)
        li.append(i)
        lo.append(m[i].copy())
        ln.append(new)
        e_new = mfd.embed(new).ravel()
        total += e_new - emb[i]
        emb[i] = e_new
        m[i] = new
        if len(lt) % 1024 == 0:
            total = emb.sum(axis=0)
    coord = mfd.coord_shape
    log = JumpLog(
        np.array(lt),
        np.array(li, dtype=int),
        np.array(lo).reshape(-1, *coord),
        np.array(ln).reshape(-1, *coord),
    )
    return HomogeneousTrajectory(ts, np.array(snaps), initial, log, t_end)


# --- McKean process and the coupled pair --------------------------------------------


class FluxHistory:
    """Kernel flux fields of a solver series, linearly interpolated in time."""

    def __init__(self, solution, kernel):
        self.times = np.asarray(solution.times, dtype=float)
        self.snapshots = solution.snapshots
        self.kernel = kernel
        self.L = self.snapshots[0].L
        self._fields = {}

    @property
    def t_end(self):
        return float(self.times[-1])

    def field(self, k):
        if k not in self._fields:
            self._fields[k] = grid_flux_field(self.kernel, self.snapshots[k])
        return self._fields[k]

    def __call__(self, t, x):
        if t > self.t_end + 1e-12 or t < self.times[0] - 1e-12:
            raise ValueError(f"time {t} outside the solver horizon [{self.times[0]}, {self.t_end}]")
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1))
        v0 = interpolate_periodic(self.field(k), self.L, x)
        if k + 1 >= len(self.times):
            return v0
        lam = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        if lam <= 0:
            return v0
        return (1 - lam) * v0 + lam * interpolate_periodic(self.field(k + 1), self.L, x)


def mckean_jump_law(f, kernel, x):
    """Von Mises law with parameter J_{K*f} interpolated at position x."""
    J = interpolate_periodic(grid_flux_field(kernel, f), f.L, np.atleast_2d(x))[0]
    return VonMisesLaw(J, f.manifold)


@dataclass
class CoupledResult:
    times: np.ndarray
    Y: np.ndarray
    Y_recomputed: np.ndarray
    particles: tuple
    mckeans: tuple
    error_times: np.ndarray
    error_values: np.ndarray
    n_jumps: int
    first_jump_error: float | None = None
    jump_Y: list = field(default_factory=list)


def simulate_coupled(x0, m0, kernel, mfd, solution, t_end, streams, sample_times, box):
    """Particle system and McKean twins driven by the same clock and indices.

    At a jump of agent i, the twin draws mbar from M_{K*f}(Xbar_i) and the
    particle takes transport_map(M_{K*f}(Xbar_i), M_{K*mu}(X_i), mbar).
    Logged per jump: e = |J_{K*mubar}(Xbar_i) - J_{K*f}(Xbar_i)| with mubar
    the twins' empirical measure.  Y = sum_i |X_i - Xbar_i| + d(m_i, mbar_i).
    """
    history = FluxHistory(solution, kernel)
    if history.t_end < t_end - 1e-9:
        raise ValueError(f"solver series ends at {history.t_end}, before t_end={t_end}")
    if abs(history.L - box) > 1e-12:
        raise ValueError("solver torus and particle torus differ")
    x = _wrap(np.array(x0, dtype=float), box)
    m = np.array(m0, dtype=float)
    xb, mb = x.copy(), m.copy()
    n = len(x)
    emb, embb = mfd.embed(m).reshape(n, -1), mfd.embed(mb).reshape(n, -1)
    vel, velb = mfd.velocity(m), mfd.velocity(mb)
    dm = mfd.distance(m, mb)
    orient_sum = float(dm.sum())
    ts = _check_times(sample_times, t_end)
    clock = _Clock(streams, n)
    Y, Yr, px, pm, qx, qm = [], [], [], [], [], []
    et, ev, jump_Y = [], [], []
    t, k = 0.0, 0

    def record(xs, xbs):
        pos = float(np.linalg.norm(periodic_delta(xs, xbs, box), axis=-1).sum())
        Y.append(pos + orient_sum)
        Yr.append(pos + float(mfd.distance(m, mb).sum()))
        px.append(xs)
        pm.append(m.copy())
        qx.append(xbs)
        qm.append(mb.copy())

    while True:
        wait, i = clock.next()
        t_next = t + wait
        while k < len(ts) and ts[k] < t_next:
            record(_wrap(x + (ts[k] - t) * vel, box), _wrap(xb + (ts[k] - t) * velb, box))
            k += 1
        if t_next > t_end:
            break
        x = _wrap(x + wait * vel, box)
        xb = _wrap(xb + wait * velb, box)
        t = t_next
        Jf = history(t, xb[i : i + 1])[0]
        Jbar_emp = empirical_flux(kernel, xb, embb, xb[i], box)
        ev.append(float(np.linalg.norm(Jbar_emp - Jf)))
        et.append(t)
        Jp = empirical_flux(kernel, x, emb, x[i], box)
        law_b = VonMisesLaw(Jf, mfd)
        new_b = law_b.sample(streams.draws)
        new_p = transport_map(law_b, VonMisesLaw(Jp, mfd), new_b)
        mb[i], m[i] = new_b, new_p
        embb[i], emb[i] = mfd.embed(new_b).ravel(), mfd.embed(new_p).ravel()
        velb[i], vel[i] = mfd.velocity(new_b), mfd.velocity(new_p)
        d_new = float(mfd.distance(new_p, new_b))
        orient_sum += d_new - dm[i]
        dm[i] = d_new
        jump_Y.append(float(np.linalg.norm(periodic_delta(x, xb, box), axis=-1).sum()) + orient_sum)
    return CoupledResult(
        ts,
        np.array(Y),
        np.array(Yr),
        (np.array(px), np.array(pm)),
        (np.array(qx), np.array(qm)),
        np.array(et),
        np.array(ev),
        len(et),
        ev[0] if ev else None,
        jump_Y,
    )
