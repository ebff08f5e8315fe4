"""Space-time torus grids, field storage and transform pairs.

The torus is ``[0, T) x [0, 1)^d`` sampled on ``Nt x Nx^d`` points.  The
forward transform carries the factor ``1 / (Nt * Nx**d)`` so that the
coefficient at frequency zero is the mean of the field.

Frequencies are integers in the centred convention.  The Nyquist entry
(``-N/2``) of every axis is addressable as a mode, but the frequency
tables handed to symbols report it as zero so that derivative symbols
stay odd-symmetric.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np
import scipy.fft


class GridError(ValueError):
    """Invalid grid parameters or mismatched field shapes."""


class AliasingError(ValueError):
    """A rescaled mode would leave the representable frequency band."""


def fft_workers():
    """Number of FFT workers, read from ``AFREE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("AFREE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class TorusGrid:
    d: int
    Nt: int
    Nx: int
    T: float = 1.0
    k: int = 1

    def __post_init__(self):
        if self.d not in (2, 3):
            raise GridError(f"spatial dimension must be 2 or 3, got {self.d}")
        for name in ("Nt", "Nx"):
            n = getattr(self, name)
            if int(n) != n or n < 4 or n % 2:
                raise GridError(f"{name} must be an even integer >= 4, got {n}")
        if not self.T > 0:
            raise GridError("period T must be positive")
        if self.k < 1:
            raise GridError("half-order k must be >= 1")

    @property
    def shape(self):
        """Shape of one scalar channel, ``(Nt, Nx, ..., Nx)``."""
        return (self.Nt,) + (self.Nx,) * self.d

    @property
    def spatial_shape(self):
        return (self.Nx,) * self.d

    @property
    def n_modes(self):
        return self.Nt * self.Nx ** self.d

    @property
    def dt(self):
        return self.T / self.Nt

    @cached_property
    def int_freqs_t(self):
        """Integer temporal frequencies in FFT order."""
        return np.fft.fftfreq(self.Nt, 1.0 / self.Nt).astype(int)

    @cached_property
    def int_freqs_x(self):
        """Integer spatial frequencies in FFT order."""
        return np.fft.fftfreq(self.Nx, 1.0 / self.Nx).astype(int)

    @cached_property
    def xi_t(self):
        """Effective temporal frequencies ``xi_t / T`` with Nyquist zeroed."""
        f = self.int_freqs_t.astype(float)
        f[self.Nt // 2] = 0.0
        return f / self.T

    @cached_property
    def xi_x(self):
        """Effective spatial frequencies with Nyquist zeroed."""
        f = self.int_freqs_x.astype(float)
        f[self.Nx // 2] = 0.0
        return f

    @cached_property
    def spatial_lattice(self):
        """Array ``(Nx, ..., Nx, d)`` of effective spatial frequencies."""
        axes = np.meshgrid(*([self.xi_x] * self.d), indexing="ij")
        return np.stack(axes, axis=-1)

    @cached_property
    def lattice(self):
        """Array ``(Nt, Nx, ..., Nx, d+1)`` of effective space-time frequencies."""
        axes = np.meshgrid(self.xi_t, *([self.xi_x] * self.d), indexing="ij")
        return np.stack(axes, axis=-1)

    @cached_property
    def nyquist_mask(self):
        """Boolean array over the lattice, true where any axis sits at Nyquist."""
        mask = np.zeros(self.shape, dtype=bool)
        idx = [slice(None)] * (self.d + 1)
        for ax, n in enumerate(self.shape):
            sl = list(idx)
            sl[ax] = n // 2
            mask[tuple(sl)] = True
        return mask

    def band_mask(self, cutoff):
        """Modes with ``max(|xi_t|, |xi_x|_inf) <= cutoff`` and no Nyquist entry."""
        ft = np.abs(self.int_freqs_t)
        fx = np.abs(self.int_freqs_x)
        grids = np.meshgrid(ft, *([fx] * self.d), indexing="ij")
        sup = np.max(np.stack(grids), axis=0)
        return (sup <= cutoff) & ~self.nyquist_mask

    def points(self):
        """Physical coordinates ``(t, x_1, ..., x_d)`` as broadcastable arrays."""
        t = np.arange(self.Nt) * self.T / self.Nt
        x = np.arange(self.Nx) / self.Nx
        return np.meshgrid(t, *([x] * self.d), indexing="ij")

    def spatial_points(self):
        x = np.arange(self.Nx) / self.Nx
        return np.meshgrid(*([x] * self.d), indexing="ij")

    def header(self, m, space="physical"):
        return {"d": self.d, "Nt": self.Nt, "Nx": self.Nx, "m": int(m),
                "layout": "component-major", "space": space,
                "T": self.T, "k": self.k}


def make_grid(d, Nt, Nx, T=1.0, k=1):
    """Build a :class:`TorusGrid`, validating the resolution."""
    return TorusGrid(int(d), int(Nt), int(Nx), float(T), int(k))


@dataclass
class SpaceTimeField:
    """Multi-channel field on a torus grid.

    ``values`` has shape ``(m, Nt, Nx, ..., Nx)`` and is stored in physical
    space.  ``real`` marks fields whose spectrum is conjugate symmetric.
    """

    grid: TorusGrid
    values: np.ndarray
    real: bool = True
    _spectrum: np.ndarray | None = dc_field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == self.grid.d + 1:
            v = v[None]
        if v.shape[1:] != self.grid.shape:
            raise GridError(f"field shape {v.shape[1:]} does not match grid {self.grid.shape}")
        if self.real:
            if np.iscomplexobj(v):
                v = v.real
            v = np.ascontiguousarray(v, dtype=float)
        else:
            v = np.ascontiguousarray(v, dtype=complex)
        self.values = v

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def spectrum(self):
        """Frequency-space view (cached, read-only)."""
        if self._spectrum is None:
            s = forward(self.values, self.grid)
            s.setflags(write=False)
            self._spectrum = s
        return self._spectrum

    @classmethod
    def from_spectrum(cls, grid, spectrum, real=True):
        v = backward(spectrum, grid)
        if real:
            v = v.real
        out = cls(grid, v, real=real)
        if not real:
            s = np.array(spectrum, dtype=complex)
            s.setflags(write=False)
            out._spectrum = s
        return out

    def copy(self):
        return SpaceTimeField(self.grid, self.values.copy(), self.real)

    def __add__(self, other):
        return SpaceTimeField(self.grid, self.values + other.values, self.real and other.real)

    def __sub__(self, other):
        return SpaceTimeField(self.grid, self.values - other.values, self.real and other.real)

    def __mul__(self, c):
        return SpaceTimeField(self.grid, self.values * c, self.real and np.isrealobj(c))

    __rmul__ = __mul__

    def norm(self):
        """L2 norm with respect to the normalised measure on the torus."""
        return float(np.sqrt(np.mean(np.sum(np.abs(self.values) ** 2, axis=0))))


def forward(values, grid):
    """Normalised forward DFT over the trailing ``d+1`` axes."""
    axes = tuple(range(values.ndim - grid.d - 1, values.ndim))
    return scipy.fft.fftn(values, axes=axes, norm="forward", workers=fft_workers())


def backward(spectrum, grid):
    axes = tuple(range(spectrum.ndim - grid.d - 1, spectrum.ndim))
    return scipy.fft.ifftn(spectrum, axes=axes, norm="forward", workers=fft_workers())


def spatial_forward(values, d):
    """Normalised forward DFT over the trailing ``d`` spatial axes."""
    axes = tuple(range(values.ndim - d, values.ndim))
    return scipy.fft.fftn(values, axes=axes, norm="forward", workers=fft_workers())


def spatial_backward(spectrum, d):
    axes = tuple(range(spectrum.ndim - d, spectrum.ndim))
    return scipy.fft.ifftn(spectrum, axes=axes, norm="forward", workers=fft_workers())


def transform(field):
    """Return the spectrum of ``field`` as a complex array."""
    return field.spectrum.copy()


def inverse_transform(grid, spectrum, real=True):
    """Rebuild a :class:`SpaceTimeField` from spectral coefficients."""
    return SpaceTimeField.from_spectrum(grid, spectrum, real=real)


def mean(field):
    """Coefficient at frequency zero, i.e. the space-time average per channel."""
    idx = (slice(None),) + (0,) * (field.grid.d + 1)
    return np.array(field.spectrum[idx])


def parabolic_rescale(field, lam):
    """Map mode ``(xi_t, xi_x)`` to ``(lam**(2k) xi_t, lam xi_x)``.

    Physically this is ``v(lam**(2k) t, lam x)``.  Raises
    :class:`AliasingError` if a nonzero coefficient would land on or beyond
    the Nyquist frequency of any axis.
    """
    lam = int(lam)
    if lam < 1:
        raise ValueError("scaling factor must be a positive integer")
    g = field.grid
    if lam == 1:
        return field.copy()
    st = lam ** (2 * g.k)
    spec = field.spectrum
    out = np.zeros_like(spec)
    nz = np.argwhere(np.any(np.abs(spec) > 1e-14 * max(1.0, np.abs(spec).max()), axis=0))
    ft, fx = g.int_freqs_t, g.int_freqs_x
    for idx in nz:
        new_t = st * ft[idx[0]]
        new_x = [lam * fx[i] for i in idx[1:]]
        if abs(new_t) >= g.Nt // 2 or any(abs(f) >= g.Nx // 2 for f in new_x):
            raise AliasingError(
                f"mode {(int(ft[idx[0]]),) + tuple(int(fx[i]) for i in idx[1:])} "
                f"scaled by {lam} leaves the lattice")
        target = (new_t % g.Nt,) + tuple(f % g.Nx for f in new_x)
        out[(slice(None),) + target] = spec[(slice(None),) + tuple(idx)]
    return SpaceTimeField.from_spectrum(g, out, real=field.real)


def random_field(grid, m, rng, cutoff=None, zero_mean=False, scale=1.0):
    """Band-limited real Gaussian field with Nyquist modes removed."""
    v = rng.standard_normal((m,) + grid.shape) * scale
    spec = forward(v, grid)
    cutoff = min(grid.Nt, grid.Nx) // 2 - 1 if cutoff is None else cutoff
    spec *= grid.band_mask(cutoff)
    if zero_mean:
        spec[(slice(None),) + (0,) * (grid.d + 1)] = 0.0
    return SpaceTimeField.from_spectrum(grid, spec)
