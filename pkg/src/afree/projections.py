"""Spectral projections onto kernels of spatial and parabolic operators.

Fields ``w = (eps, sigma)`` are :class:`SpaceTimeField` objects with
``2m`` channels, strain-like part first.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import SpaceTimeField, backward, forward
from .multipliers import (minimal_decomposition, per_mode, splitter_weight,
                          tensor_symbol, TWO_PI_I)
from .symbols import (constant_rank_check, divergence, eval_symbol, kernel_basis,
                      moore_penrose, SymbolError)


class SpectralPair:
    """Per-mode symbol tables of a parabolic pair on a fixed grid."""

    def __init__(self, pair, grid):
        if pair.d != grid.d:
            raise SymbolError(f"operator acts in d={pair.d}, grid has d={grid.d}")
        self.pair, self.grid = pair, grid
        self.m = pair.m

    @cached_property
    def M(self):
        return self.pair.M(self.grid.spatial_lattice)[None]

    @cached_property
    def M_pinv(self):
        return moore_penrose(self.M[0])[None]

    @cached_property
    def ann(self):
        return self.pair.annihilator_symbol(self.grid.spatial_lattice)[None]

    @cached_property
    def Pi(self):
        """Orthogonal projection onto ``ker P*[xi_x]``; identity at ``xi_x = 0``."""
        a = self.ann[0]
        return (np.eye(self.m) - moore_penrose(a) @ a)[None]

    @cached_property
    def a(self):
        return (TWO_PI_I * self.grid.xi_t).reshape((-1,) + (1,) * self.grid.d)

    @cached_property
    def dt_inv(self):
        a = self.a
        return np.where(a != 0, 1.0 / np.where(a != 0, a, 1.0), 0.0)

    @cached_property
    def g(self):
        return tensor_symbol(self.grid, self.pair.k)

    def split(self, spec):
        return spec[: self.m], spec[self.m:]

    def residual_spectrum(self, spec):
        """``A w`` in frequency space: ``(d_t eps - M sigma, P* eps)``."""
        e, s = self.split(spec)
        top = self.a * e - per_mode(s, self.M)
        bottom = per_mode(e, self.ann)
        return top, bottom


_CACHE = {}


def spectral_pair(pair, grid):
    key = (id(pair), grid)
    hit = _CACHE.get(key)
    if hit is None or hit.pair is not pair:
        if len(_CACHE) > 32:
            _CACHE.clear()
        hit = _CACHE[key] = SpectralPair(pair, grid)
    return hit


def _check_channels(pair, w):
    if w.m != 2 * pair.m:
        raise ValueError(f"expected {2 * pair.m} channels (eps, sigma), got {w.m}")


def apply_A(pair, w):
    """The parabolic operator applied to ``w``; returns ``(m + l)``-channel field."""
    _check_channels(pair, w)
    sp = spectral_pair(pair, w.grid)
    top, bottom = sp.residual_spectrum(w.spectrum)
    return SpaceTimeField.from_spectrum(w.grid, np.concatenate([top, bottom]), w.real)


def A_residual_norm(pair, w):
    """L2 norm of ``A w`` (Parseval)."""
    sp = spectral_pair(pair, w.grid)
    top, bottom = sp.residual_spectrum(w.spectrum)
    return float(np.sqrt(np.sum(np.abs(top) ** 2) + np.sum(np.abs(bottom) ** 2)))


def chi_of(pair, w):
    """Time-space part ``d_t eps - M sigma`` of ``A w`` as an ``m``-channel field."""
    sp = spectral_pair(pair, w.grid)
    top, _ = sp.residual_spectrum(w.spectrum)
    return SpaceTimeField.from_spectrum(w.grid, top, w.real)


def operator_residual_norm(pair, w, p=2.0, q=2.0):
    """Surrogate negative norm of ``A w``: decomposition norm of the first block
    plus the ``W^{0,-k'}`` norm of the annihilator block."""
    from .multipliers import neg_norm, sobolev_weight
    sp = spectral_pair(pair, w.grid)
    top, bottom = sp.residual_spectrum(w.spectrum)
    chi = SpaceTimeField.from_spectrum(w.grid, top, w.real)
    kp = pair.annihilator.order
    wt = sobolev_weight(w.grid, 0.0, -kp)
    return neg_norm(chi, p, q, pair.k) + float(np.sqrt(np.sum(np.abs(bottom * wt) ** 2)))


# -- spatial projections -------------------------------------------------------

_RANK_OK = {}


def project_kernel_isotropic(field, op, check_rank=True):
    """Orthogonal projection onto ``ker op[xi_x]`` at every spatial frequency.

    Works on space-time fields and acts the same at every time.  The
    projection is the identity at ``xi_x = 0``.
    """
    if op.n_in != field.m:
        raise ValueError(f"operator takes {op.n_in} channels, field has {field.m}")
    if check_rank:
        key = id(op)
        if key not in _RANK_OK:
            rep = constant_rank_check(op)
            if not rep.passed:
                raise SymbolError(f"operator fails the constant-rank check at xi={rep.witness}")
            _RANK_OK[key] = True
    s = eval_symbol(op, field.grid.spatial_lattice)
    proj = np.eye(op.n_in) - moore_penrose(s) @ s
    out = per_mode(field.spectrum, proj[None])
    return SpaceTimeField.from_spectrum(field.grid, out, field.real)


def leray_symbol(d, lattice):
    """``Id - xi xi^T / |xi|^2``, identity at ``xi = 0``."""
    xx2 = np.sum(lattice ** 2, axis=-1)
    outer = lattice[..., :, None] * lattice[..., None, :]
    safe = np.where(xx2 > 0, xx2, 1.0)
    return np.eye(d) - np.where(xx2[..., None, None] > 0, outer / safe[..., None, None], 0.0)


def leray_project(field):
    """Projection onto divergence-free vector fields."""
    return project_kernel_isotropic(field, divergence(field.grid.d))


# -- parabolic projections -----------------------------------------------------

def _assemble(grid, e, s, real):
    return SpaceTimeField.from_spectrum(grid, np.concatenate([e, s]), real)


def project_parabolic_linear(pair, w):
    """Linear projection onto ``ker A`` built from the space-time splitter.

    The time-dominated part of ``chi = d_t eps - M sigma`` is removed from
    ``eps`` through ``d_t^{-1}``; the space-dominated part is removed from
    ``sigma`` through the pseudo-inverse of ``M``.  At modes with
    ``xi_t = 0`` the whole of ``chi`` goes to the spatial branch, since
    ``d_t^{-1}`` vanishes there.
    """
    _check_channels(pair, w)
    g = w.grid
    sp = spectral_pair(pair, g)
    e, s = sp.split(w.spectrum)
    chi, _ = sp.residual_spectrum(w.spectrum)
    wt = splitter_weight(g, 2 * pair.k) * (sp.a != 0)
    e_new = per_mode(e - sp.dt_inv * (wt * chi), sp.Pi)
    s_new = s + per_mode(per_mode((1.0 - wt) * chi, sp.M_pinv), sp.Pi)
    return _assemble(g, e_new, s_new, w.real)


@dataclass
class NonlinearProjection:
    field: SpaceTimeField
    decomposition: object


def project_parabolic_nonlinear(pair, w, p=2.0, q=2.0, return_info=False, tol=1e-6):
    """Projection onto ``ker A`` driven by the least-norm decomposition of ``chi``.

    ``chi = d_t eps_c + (grad^{2k})^* sigma_c`` with ``(eps_c, sigma_c)``
    minimising ``(||eps_c||_p^2 + ||sigma_c||_q^2)^(1/2)``.  Then
    ``eps -> Pi(eps - d_t^{-1} d_t eps_c)`` and
    ``sigma -> sigma + Pi M^+ (grad^{2k})^* sigma_c``.
    """
    _check_channels(pair, w)
    if not (1 < p < np.inf and 1 < q < np.inf):
        raise ValueError("exponents must lie in (1, inf)")
    g = w.grid
    sp = spectral_pair(pair, g)
    e, s = sp.split(w.spectrum)
    chi_hat, _ = sp.residual_spectrum(w.spectrum)
    chi = SpaceTimeField.from_spectrum(g, chi_hat, w.real)
    wnorm = float(np.sqrt(np.sum(np.abs(w.spectrum) ** 2)))
    chinorm = float(np.sqrt(np.sum(np.abs(chi_hat) ** 2)))
    # Residuals at roundoff level: the correction is below 1e-12 |w| for any
    # exponent pair, so the closed-form splitting is used.
    if chinorm <= 1e-12 * max(wnorm, 1e-300):
        dec = minimal_decomposition(chi, 2.0, 2.0, pair.k)
    else:
        dec = minimal_decomposition(chi, p, q, pair.k, tol=tol)
    ec = dec.eps.spectrum
    sc = dec.sigma.spectrum.reshape((sp.g.shape[0], pair.m) + g.shape)
    g_sigma = np.sum(sp.g[:, None, None] * sc, axis=0)
    e_new = per_mode(e - (sp.a != 0) * ec, sp.Pi)
    s_new = s + per_mode(per_mode(g_sigma, sp.M_pinv), sp.Pi)
    out = _assemble(g, e_new, s_new, w.real)
    return NonlinearProjection(out, dec) if return_info else out


class KernelProjector:
    """Orthogonal projection onto zero-mean, band-limited A-free fields."""

    def __init__(self, pair, grid, cutoff=None):
        cutoff = min(grid.Nt, grid.Nx) // 2 - 1 if cutoff is None else cutoff
        self.grid = grid
        self.m = pair.m
        mask = grid.band_mask(cutoff)
        mask[(0,) * (grid.d + 1)] = False
        self.mask = mask
        basis = kernel_basis(pair, grid.lattice[mask])
        self.P = basis @ np.swapaxes(basis.conj(), -1, -2)

    def field(self, w):
        """Project a :class:`SpaceTimeField` with ``2m`` channels."""
        return SpaceTimeField(w.grid, self(w.values))

    def __call__(self, v):
        spec = forward(v, self.grid)
        out = np.zeros_like(spec)
        vec = np.moveaxis(spec[:, self.mask], 0, -1)[..., None]
        out[:, self.mask] = np.moveaxis((self.P @ vec)[..., 0], -1, 0)
        return backward(out, self.grid).real
