"""Radial observation kernels and the kernel-weighted flux fields they induce.

A kernel is ``K(x) = c p(|x|/eps) / eps^d`` with ``p`` supported in
``[0, r)`` and ``c`` fixed by ``int K = 1``.  Flux fields are evaluated
either from atoms (direct sum, minimum-image on a torus) or from a density
grid (circular convolution by FFT with the discrete kernel stencil).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy import fft, integrate
from scipy.ndimage import map_coordinates
from scipy.special import gamma

from .geometry import periodic_delta

PROFILES = ("smooth_bump", "truncated_gaussian")


def _profile(name, rho, r):
    rho = np.asarray(rho, dtype=float)
    inside = rho < r
    out = np.zeros_like(rho)
    if name == "smooth_bump":
        s = (rho[inside] / r) ** 2
        out[inside] = np.exp(1.0 / (s - 1.0))
    elif name == "truncated_gaussian":
        sigma = r / 3.0
        out[inside] = np.exp(-rho[inside] ** 2 / (2 * sigma**2)) - np.exp(-(r**2) / (2 * sigma**2))
    else:
        raise ValueError(f"unknown kernel profile {name!r}; expected one of {PROFILES}")
    return out


def sphere_area(d):
    """Surface area of the unit sphere in R^d."""
    return 2 * np.pi ** (d / 2) / gamma(d / 2)


@dataclass(frozen=True)
class KernelSpec:
    radius: float
    dim: int = 2
    profile: str = "smooth_bump"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.radius <= 0 or self.epsilon <= 0:
            raise ValueError("kernel radius and epsilon must be positive")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown kernel profile {self.profile!r}")
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")

    @classmethod
    def with_unit_sup(cls, dim=2, profile="smooth_bump"):
        """Kernel whose radius is chosen so that sup K = 1 at epsilon = 1."""
        probe = cls(1.0, dim, profile)
        return cls(float(probe.sup_norm ** (1.0 / dim)), dim, profile)

    @cached_property
    def _base(self):
        r, d = self.radius, self.dim
        radial, _ = integrate.quad(
            lambda rho: _profile(self.profile, np.array([rho]), r)[0] * rho ** (d - 1), 0.0, r, epsabs=0, epsrel=1e-13, limit=200
        )
        const = 1.0 / (sphere_area(d) * radial)
        rho = np.linspace(0.0, r, 200_001)
        p = _profile(self.profile, rho, r)
        lip = np.max(np.abs(np.diff(p))) / (rho[1] - rho[0])
        return const, const * _profile(self.profile, np.array([0.0]), r)[0], const * lip

    @property
    def normalization(self):
        return self._base[0]

    @property
    def support(self):
        return self.radius * self.epsilon

    @property
    def sup_norm(self):
        return self._base[1] * self.epsilon ** (-self.dim)

    @property
    def lip_norm(self):
        return self._base[2] * self.epsilon ** (-(self.dim + 1))

    def rescale(self, eps):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        if eps == 1:
            return self
        return replace(self, epsilon=self.epsilon * eps)

    def radial(self, rho):
        return self.normalization * _profile(self.profile, np.asarray(rho) / self.epsilon, self.radius) * self.epsilon ** (
            -self.dim
        )

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"positions have dimension {x.shape[-1]}, kernel has {self.dim}")
        return self.radial(np.linalg.norm(x, axis=-1))

    def __call__(self, x):
        return self.eval(x)

    def stencil(self, n, L):
        """Periodic kernel weights on an n^d cell grid of side L, summing to 1.

        Entry ``[i_1, ..., i_d]`` is the weight for the offset ``i h``
        taken at its minimum image.
        """
        if self.support > L / 2:
            raise ValueError(f"kernel support {self.support:g} exceeds half the torus side {L / 2:g}")
        h = L / n
        offs = np.arange(n) * h
        offs = offs - L * np.round(offs / L)
        grids = np.meshgrid(*([offs] * self.dim), indexing="ij")
        w = self.radial(np.sqrt(sum(g * g for g in grids))) * h**self.dim
        total = w.sum()
        if total <= 0:
            raise ValueError("kernel support is below the grid resolution")
        return w / total


def empirical_flux(kernel, positions, embeddings, x, box=None):
    """(1/N) sum_j K(x - x_j) embed(m_j) for query points ``x`` of shape (..., d)."""
    positions = np.asarray(positions, dtype=float)
    embeddings = np.asarray(embeddings, dtype=float).reshape(len(positions), -1)
    x = np.asarray(x, dtype=float)
    dx = periodic_delta(x[..., None, :], positions, box)
    weights = kernel.eval(dx)
    return weights @ embeddings / len(positions)


def local_flux_field(values, mfd):
    """Per-cell flux density sum_q w_q embed(m_q) f(x, m_q); values are (*cells, Q)."""
    return (values * mfd.weights) @ mfd.node_embeddings


def convolve_periodic(stencil, field):
    """Circular convolution of a stencil (*cells) with a field (*cells, k)."""
    axes = tuple(range(stencil.ndim))
    shape = stencil.shape
    sk = fft.rfftn(stencil, s=shape, axes=axes)
    fk = fft.rfftn(field, s=shape, axes=axes)
    return fft.irfftn(fk * sk[..., None], s=shape, axes=axes)


def convolve_periodic_direct(stencil, field):
    """Reference implementation of :func:`convolve_periodic` by direct summation."""
    out = np.zeros_like(field, dtype=float)
    for idx in zip(*np.nonzero(stencil)):
        out += stencil[idx] * np.roll(field, shift=idx, axis=tuple(range(stencil.ndim)))
    return out


def grid_flux_field(kernel, f):
    """Kernel-convolved flux J_{K*f} on the spatial grid of a density grid ``f``."""
    if kernel.dim != f.d:
        raise ValueError("kernel and grid dimensions differ")
    stencil = kernel.stencil(f.n, f.L)
    return convolve_periodic(stencil, local_flux_field(f.values, f.manifold))


def interpolate_periodic(field, L, x):
    """Multilinear periodic interpolation of a cell-centred field at positions x.

    ``field`` has shape (*cells, k); ``x`` has shape (..., d).  Returns (..., k).
    """
    field = np.asarray(field, dtype=float)
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    n = field.shape[0]
    h = L / n
    coords = (x.reshape(-1, d) / h - 0.5).T
    out = np.stack(
        [map_coordinates(field[..., k], coords, order=1, mode="grid-wrap") for k in range(field.shape[-1])], axis=-1
    )
    return out.reshape(*x.shape[:-1], field.shape[-1])
