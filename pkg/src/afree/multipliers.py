"""Fourier multipliers, anisotropic norms, space-time splitting and
minimal decompositions of right-hand sides of parabolic equations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.optimize import minimize

from .grid import SpaceTimeField, backward, fft_workers, forward

TWO_PI_I = 2j * np.pi


class DecompositionError(RuntimeError):
    """Iterative minimal decomposition did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def per_mode(spec, mats):
    """Multiply channel vectors ``(m, *shape)`` by per-mode matrices ``(*shape, n, m)``."""
    v = np.moveaxis(spec, 0, -1)[..., None]
    return np.moveaxis((mats @ v)[..., 0], -1, 0)


def apply_multiplier(field, symbol_fn, at_zero=None, real=None):
    """Apply a per-frequency multiplier.

    ``symbol_fn`` receives the effective frequency lattice of shape
    ``(Nt, Nx, ..., Nx, d+1)`` and returns either scalars over the lattice
    or matrices ``(..., n_out, n_in)``.  The value at ``xi = 0`` is replaced
    by ``at_zero`` (default: zero).
    """
    g = field.grid
    sym = np.asarray(symbol_fn(g.lattice))
    spec = field.spectrum
    zero = (0,) * (g.d + 1)
    if sym.ndim == g.d + 1:
        sym = sym.astype(complex, copy=True)
        sym[zero] = 0.0 if at_zero is None else at_zero
        out = spec * sym
    else:
        if sym.shape[-1] != field.m:
            raise ValueError(f"multiplier expects {sym.shape[-1]} channels, field has {field.m}")
        sym = np.array(np.broadcast_to(sym, g.shape + sym.shape[-2:]), dtype=complex)
        sym[zero] = 0.0 if at_zero is None else at_zero
        out = per_mode(spec, sym)
    return SpaceTimeField.from_spectrum(g, out, real=field.real if real is None else real)


def sobolev_weight(grid, alpha, beta):
    xt = grid.xi_t.reshape((-1,) + (1,) * grid.d)
    xx2 = np.sum(grid.spatial_lattice ** 2, axis=-1)[None]
    return (1 + xt ** 2) ** (alpha / 2) * (1 + xx2) ** (beta / 2)


def sobolev_norm(field, alpha=0.0, beta=0.0):
    """Anisotropic ``W^{alpha,beta}`` norm at integrability 2, via Parseval."""
    w = sobolev_weight(field.grid, alpha, beta)
    return float(np.sqrt(np.sum(np.abs(field.spectrum * w) ** 2)))


@dataclass(frozen=True)
class CutoffProfile:
    """Smooth step from 0 on ``(0, lo]`` to 1 on ``[hi, inf)``, quintic in between."""

    lo: float = 1.0 / 3.0
    hi: float = 2.0 / 3.0

    def __call__(self, x):
        s = np.clip((np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def splitter_weight(grid, gamma, profile=CutoffProfile()):
    """Temporal share ``phi(ratio)`` over the lattice, zero at ``xi = 0``."""
    xt = grid.xi_t.reshape((-1,) + (1,) * grid.d)
    xx2 = np.sum(grid.spatial_lattice ** 2, axis=-1)[None]
    ratio = np.sqrt(1 + xt ** 2) / (1 + xx2) ** (gamma / 2)
    w = profile(ratio)
    w[(0,) * (grid.d + 1)] = 0.0
    return w


@dataclass
class SplitResult:
    temporal: SpaceTimeField
    spatial: SpaceTimeField
    mean: np.ndarray


def split_spacetime(field, gamma):
    """Split into a time-dominated part, a space-dominated part and the mean."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    g = field.grid
    spec = field.spectrum
    w = splitter_weight(g, gamma)
    zero = (slice(None),) + (0,) * (g.d + 1)
    mean = np.array(spec[zero])
    temporal = spec * w
    spatial = spec - temporal
    spatial[zero] = 0.0
    return SplitResult(SpaceTimeField.from_spectrum(g, temporal, field.real),
                       SpaceTimeField.from_spectrum(g, spatial, field.real), mean)


# -- minimal decomposition ---------------------------------------------------

def tensor_symbol(grid, k):
    """Vector ``g_I = (2 pi i)^{2k} xi^I`` over multi-indices ``I`` in ``[d]^{2k}``.

    Returns shape ``(d**(2k), Nx, ..., Nx)`` on the spatial lattice.
    """
    xx = np.moveaxis(grid.spatial_lattice, -1, 0)
    idx = list(itertools.product(range(grid.d), repeat=2 * k))
    g = np.array([np.prod([xx[i] for i in I], axis=0) for I in idx])
    return TWO_PI_I ** (2 * k) * g


@dataclass
class Decomposition:
    """``chi = d_t eps + (grad^{2k})^* sigma`` with ``sigma`` in tensor channels.

    ``sigma`` has ``d**(2k) * m`` channels ordered multi-index major.
    """

    eps: SpaceTimeField
    sigma: SpaceTimeField
    norm: float
    p: float
    q: float
    residual: float
    iterations: int = 0
    history: list = field(default_factory=list)


class _Constraint:
    """Per-mode affine constraint ``a eps + sum_I g_I sigma_I = chi``."""

    def __init__(self, grid, m, k, half=False):
        self.grid, self.m, self.k = grid, m, k
        self.a = (TWO_PI_I * grid.xi_t).reshape((-1,) + (1,) * grid.d)
        self.g = tensor_symbol(grid, k)[:, None, None]
        if half:
            self.g = self.g[..., : grid.Nx // 2 + 1]
        self.nI = self.g.shape[0]
        self.den = np.abs(self.a) ** 2 + np.sum(np.abs(self.g[:, 0]) ** 2, axis=0)
        self.reach = self.den > 0
        self.inv_den = np.where(self.reach, 1.0 / np.where(self.reach, self.den, 1.0), 0.0)

    def split(self, z):
        m = self.m
        return z[:m], z[m:].reshape((self.nI, m) + z.shape[1:])

    def K(self, z_hat):
        e, s = self.split(z_hat)
        return self.a * e + np.sum(self.g * s, axis=0)

    def K_adj(self, c):
        e = np.conj(self.a) * c
        s = np.conj(self.g) * c
        return np.concatenate([e, s.reshape((-1,) + c.shape[1:])])

    def min_norm(self, chi_hat):
        return self.K_adj(chi_hat * self.inv_den)

    def null_project(self, z_hat):
        return z_hat - self.K_adj(self.K(z_hat) * self.inv_den)


def _rfwd(v, grid):
    axes = tuple(range(v.ndim - grid.d - 1, v.ndim))
    return scipy.fft.rfftn(v, axes=axes, norm="forward", workers=fft_workers())


def _rbwd(s, grid):
    axes = tuple(range(s.ndim - grid.d - 1, s.ndim))
    return scipy.fft.irfftn(s, s=grid.shape, axes=axes, norm="forward", workers=fft_workers())


def _lp(v, p):
    """``(mean |v|^p)^(1/p)`` with ``|.|`` the pointwise Euclidean norm over channels."""
    mag = np.sqrt(np.sum(v * v, axis=0))
    return float(np.mean(mag ** p) ** (1.0 / p)), mag


def surrogate_norm(eps, sigma, p, q):
    """``(||eps||_p^2 + ||sigma||_q^2)^(1/2)`` with normalised measure."""
    return float(np.sqrt(_lp(eps, p)[0] ** 2 + _lp(sigma, q)[0] ** 2))


def _norm_sq_grad(v, p):
    """Value and gradient (w.r.t. grid values) of ``||v||_p^2``."""
    nrm, mag = _lp(v, p)
    if nrm == 0.0:
        return 0.0, np.zeros_like(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(mag > 0, mag ** (p - 2), 0.0)
    grad = 2.0 * nrm ** (2 - p) * w * v / mag.size
    return nrm ** 2, grad


def minimal_decomposition(chi, p=2.0, q=2.0, k=1, tol=1e-6, max_iter=2000):
    """Least-norm splitting of ``chi`` into ``d_t eps' + (grad^{2k})^* sigma'``.

    At ``p = q = 2`` the problem is solved mode by mode in closed form.
    Otherwise the ``p = q = 2`` solution is refined by L-BFGS over the
    null space of the constraint, which keeps the reconstruction exact.
    """
    g = chi.grid
    m = chi.m
    con = _Constraint(g, m, k)
    spec = chi.spectrum
    zero = (slice(None),) + (0,) * (g.d + 1)
    target = np.array(spec)
    target[zero] = 0.0
    scale = max(float(np.sqrt(np.sum(np.abs(target) ** 2))), 1e-300)
    lost = float(np.sqrt(np.sum(np.abs(target[:, ~con.reach]) ** 2)))
    if lost > 1e-12 * scale:
        raise DecompositionError("chi has content at modes where both symbols vanish", lost / scale)
    z_hat = con.min_norm(target)
    z = backward(z_hat, g).real

    def residual_of(zz):
        r = con.K(forward(zz, g)) - target
        return float(np.sqrt(np.sum(np.abs(r) ** 2)) / scale)

    def pack(zz, iters=0, hist=()):
        e, s = zz[:m], zz[m:]
        res = residual_of(zz) if scale > 1e-300 else 0.0
        return Decomposition(SpaceTimeField(g, e), SpaceTimeField(g, s),
                             surrogate_norm(e, s, p, q), p, q, res, iters, list(hist))

    if scale <= 1e-300 or (p == 2 and q == 2):
        out = pack(z if scale > 1e-300 else np.zeros_like(z))
        if out.residual > 1e-8:
            raise DecompositionError("closed-form decomposition failed to reconstruct", out.residual)
        return out

    shape = z.shape
    half = _Constraint(g, m, k, half=True)
    j0 = surrogate_norm(z[:m], z[m:], p, q) ** 2
    last = {}

    def objective(y):
        y = y.reshape(shape)
        zz = z + _rbwd(half.null_project(_rfwd(y, g)), g)
        fe, ge = _norm_sq_grad(zz[:m], p)
        fs, gs = _norm_sq_grad(zz[m:], q)
        grad = _rbwd(half.null_project(_rfwd(np.concatenate([ge, gs]), g)), g)
        last["f"] = fe + fs
        return (fe + fs) / j0, grad.ravel() / j0

    history = []
    res = minimize(objective, np.zeros(z.size), jac=True, method="L-BFGS-B",
                   callback=lambda _: history.append(last["f"]),
                   options={"maxiter": max_iter, "ftol": 1e-13, "gtol": 1e-12, "maxcor": 5})
    zz = z + _rbwd(half.null_project(_rfwd(res.x.reshape(shape), g)), g)
    out = pack(zz, res.nit, history)
    if out.residual > max(tol, 1e-8) or res.nit >= max_iter:
        raise DecompositionError(f"minimal decomposition did not converge: {res.message}", out.residual)
    return out


def neg_norm(chi, p=2.0, q=2.0, k=1):
    """Surrogate negative norm: minimal decomposition norm plus the size of the mean."""
    g = chi.grid
    mean = chi.spectrum[(slice(None),) + (0,) * (g.d + 1)]
    zm = SpaceTimeField.from_spectrum(g, _drop_mean(chi.spectrum, g), chi.real)
    return minimal_decomposition(zm, p, q, k).norm + float(np.linalg.norm(mean))


def _drop_mean(spec, grid):
    s = np.array(spec)
    s[(slice(None),) + (0,) * (grid.d + 1)] = 0.0
    return s
