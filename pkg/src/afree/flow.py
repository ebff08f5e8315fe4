"""Incompressible non-Newtonian flow on the periodic torus in strain/stress form.

Time is discretised on ``Nt`` steps of size ``dt = T / Nt``: the velocity
has ``Nt + 1`` slices ``u^0 .. u^Nt`` and strain, stress and pressure live
on the ``Nt`` step ends.  A pair ``(eps, sigma)`` is admissible when

    eps^n = eps^{n-1} + dt (M sigma^n - Theta(u^{n-1} x u^{n-1})),  eps^0 = eps(u_0),

with ``M = Q* Pi Q`` (``Q`` the divergence of symmetric trace-free
matrices, ``Pi`` the Leray projection) and ``u^n`` the divergence-free
velocity with ``eps(u^n) = eps^n`` and the mean of ``u_0``.  This is the
backward-Euler scheme with explicit convection, so the discrete energy
identity carries only first-order defects.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft

from .grid import fft_workers
from .integrands import (ConstitutiveLaw, D2W_apply, DW_eval, W_eval, constitutive_integrand,
                         regularize)
from .symbols import moore_penrose, sym0_basis

log = logging.getLogger(__name__)

TWO_PI_I = 2j * np.pi
VARIATIONAL_MAX = 64


class FlowError(RuntimeError):
    """A time step or an outer iteration failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# -- spatial spectral operators --------------------------------------------------

class SpatialOps:
    """Spectral operators on ``[0, 1)^d`` sampled on ``Nx^d`` points.

    Arrays carry components on axis ``-d-1`` and space on the trailing
    ``d`` axes.  Symbols use the effective frequencies (Nyquist set to 0).
    """

    def __init__(self, d, Nx):
        self.d, self.Nx = d, Nx
        f = np.fft.fftfreq(Nx, 1.0 / Nx)
        f[Nx // 2] = 0.0
        self.xi = np.stack(np.meshgrid(*([f] * d), indexing="ij"), axis=-1)
        self.basis = sym0_basis(d)
        self.m = len(self.basis)
        self.axes = tuple(range(-d, 0))
        nyq = np.zeros((Nx,) * d, dtype=bool)
        for ax in range(d):
            sl = [slice(None)] * d
            sl[ax] = Nx // 2
            nyq[tuple(sl)] = True
        self.nyquist = nyq

    # transforms
    def fwd(self, v):
        return scipy.fft.fftn(v, axes=self.axes, norm="forward", workers=fft_workers())

    def bwd(self, s):
        return scipy.fft.ifftn(s, axes=self.axes, norm="forward", workers=fft_workers()).real

    @staticmethod
    def apply(mats, vec_hat, d):
        """Per-mode ``mats (*space, n, k)`` times ``vec_hat (..., k, *space)``."""
        v = np.moveaxis(vec_hat, -d - 1, -1)[..., None]
        return np.moveaxis((mats @ v)[..., 0], -1, -d - 1)

    def _ap(self, mats, vec_hat):
        return self.apply(mats, vec_hat, self.d)

    @cached_property
    def D(self):
        """``2 pi i xi`` with shape ``(*space, d)``."""
        return TWO_PI_I * self.xi

    @cached_property
    def k2(self):
        return np.sum(self.xi ** 2, axis=-1)

    @cached_property
    def Q(self):
        """Divergence of trace-free symmetric matrices: ``(*space, d, m)``."""
        # (Q s)_j = sum_i D_i S_ij with S = sum_a s_a B_a
        return np.einsum("...i,aij->...ja", self.D, self.basis)

    @cached_property
    def Qstar(self):
        """Trace-free symmetric gradient: ``(*space, m, d)``."""
        return np.swapaxes(self.Q, -1, -2)

    @cached_property
    def leray(self):
        x = self.xi
        safe = np.where(self.k2 > 0, self.k2, 1.0)[..., None, None]
        outer = x[..., :, None] * x[..., None, :]
        return np.eye(self.d) - np.where(self.k2[..., None, None] > 0, outer / safe, 0.0)

    @cached_property
    def M(self):
        return self.Qstar @ self.leray @ self.Q

    @cached_property
    def Qstar_pinv(self):
        return moore_penrose(self.Qstar)

    # differential operators on spectra
    def strain_hat(self, u_hat):
        return self._ap(self.Qstar, u_hat)

    def div_hat(self, s_hat):
        return self._ap(self.Q, s_hat)

    def leray_hat(self, v_hat):
        return self._ap(self.leray, v_hat)

    def velocity_hat(self, e_hat, mean):
        u = self._ap(self.Qstar_pinv, e_hat)
        zero = (Ellipsis, slice(None)) + (0,) * self.d
        u[zero] = np.asarray(mean)
        return u

    def clean(self, s_hat):
        """Remove Nyquist content."""
        return np.where(self.nyquist, 0.0, s_hat)

    # products
    def padded_product(self, u_hat):
        """Spectrum of ``u_i u_j`` computed without aliasing (3/2 padding), Nyquist removed.

        Returns ``(..., d, d, *space)``.
        """
        d, N = self.d, self.Nx
        P = 3 * N // 2 + (3 * N // 2) % 2
        lead = u_hat.shape[:-d - 1]
        big = np.zeros(lead + (d,) + (P,) * d, dtype=complex)
        idx = np.concatenate([np.arange(N // 2), np.arange(P - N // 2, P)])
        src = np.concatenate([np.arange(N // 2), np.arange(N - N // 2, N)])
        sel_big = np.ix_(*([idx] * d))
        sel_src = np.ix_(*([src] * d))
        big[(Ellipsis, slice(None)) + sel_big] = self.clean(u_hat)[(Ellipsis, slice(None)) + sel_src]
        ax = tuple(range(-d, 0))
        ub = scipy.fft.ifftn(big, axes=ax, norm="forward", workers=fft_workers()).real
        prod = np.expand_dims(ub, -d - 1) * np.expand_dims(ub, -d - 2)
        ph = scipy.fft.fftn(prod, axes=ax, norm="forward", workers=fft_workers())
        out = np.zeros(lead + (d, d) + (N,) * d, dtype=complex)
        out[(Ellipsis, slice(None), slice(None)) + sel_src] = ph[(Ellipsis, slice(None), slice(None)) + sel_big]
        return self.clean(out)

    def sym0_coords_hat(self, mat_hat):
        """Trace-free coordinates of a matrix spectrum ``(..., d, d, *space)``."""
        return np.einsum("aij,...ij" + "xyz"[: self.d] + "->...a" + "xyz"[: self.d],
                         self.basis, mat_hat)

    def convection_hat(self, u_hat):
        """``Pi div(u x u)`` as a velocity spectrum."""
        uu = self.sym0_coords_hat(self.padded_product(u_hat))
        return self.leray_hat(self.div_hat(uu))

    def pressure_hat(self, s_hat, u_prev_hat):
        """Zero-mean ``pi`` with ``Lap pi = div^2 (sigma - u x u)``."""
        S = np.einsum("aij,...a" + "xyz"[: self.d] + "->...ij" + "xyz"[: self.d], self.basis, s_hat)
        S = S - self.padded_product(u_prev_hat)
        X = np.moveaxis(self.xi, -1, 0)
        num = np.sum(S * X[:, None] * X[None, :], axis=(-self.d - 2, -self.d - 1))
        safe = np.where(self.k2 > 0, self.k2, 1.0)
        return np.where(self.k2 > 0, num / safe, 0.0)


_OPS = {}


def spatial_ops(d, Nx):
    key = (d, Nx)
    if key not in _OPS:
        _OPS[key] = SpatialOps(d, Nx)
    return _OPS[key]


def nonlinearity(u):
    """``Theta(u x u) = Q* Pi Q (u x u)`` for a velocity ``(..., d, *space)``.

    Returns trace-free coordinates in physical space.
    """
    u = np.asarray(u, dtype=float)
    d = _dim_of(u)
    ops = spatial_ops(d, u.shape[-1])
    th = ops.strain_hat(ops.convection_hat(ops.fwd(u)))
    return ops.bwd(th)


def _dim_of(u):
    for d in (3, 2):
        if u.ndim >= d + 1 and u.shape[-d - 1] == d and all(s == u.shape[-1] for s in u.shape[-d:]):
            return d
    raise ValueError(f"cannot infer spatial dimension from shape {u.shape}")


# -- configuration and state ---------------------------------------------------------

def default_r_prime(p):
    """Regularisation exponent above ``max(p, 2)``."""
    return float(math.floor(max(p, 2.0)) + 1)


@dataclass
class SolveConfig:
    newton_tol: float = 1e-11
    newton_max: int = 60
    cg_max: int = 200
    hessian_floor: float = 1e-14
    admm_rho: float = 1.0
    admm_tol: float = 1e-7
    admm_max: int = 20000
    admm_relax: float = 1.6
    outer_tol: float = 1e-10
    outer_max: int = 40
    picard_damping: float = 1.0
    eta_schedule: tuple = (1e-1, 3e-2, 1e-2)
    r_prime: float | None = None
    C_E: float = 4.0
    C0: float | None = None
    eqn_tol: float = 1e-8
    reference_eta: float = 1e-2
    x5_bisection: int = 40

    def __post_init__(self):
        for name in ("newton_tol", "admm_rho", "admm_tol", "outer_tol", "eqn_tol", "C_E"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.C_E < 2:
            raise ValueError("C_E must be at least 2")
        if any(e <= 0 for e in self.eta_schedule):
            raise ValueError("eta schedule must be positive")


@dataclass
class FlowState:
    """Discrete flow: ``u (Nt+1, d, *space)``, ``eps``/``sigma`` ``(Nt, m, *space)``, ``pi (Nt, *space)``."""

    grid: object
    eps: np.ndarray
    sigma: np.ndarray
    u: np.ndarray
    pi: np.ndarray
    u0: np.ndarray
    p: float
    q: float
    info: dict = field(default_factory=dict)

    @property
    def dt(self):
        return self.grid.T / self.grid.Nt

    @property
    def r0(self):
        d = self.grid.d
        return min(self.q, self.p / 2 * (d + 2) / d)

    @property
    def times(self):
        return np.arange(self.grid.Nt + 1) * self.dt

    def kinetic(self):
        """``1/2 ||u(t_n)||^2`` for ``n = 0 .. Nt``."""
        return 0.5 * np.mean(np.sum(self.u ** 2, axis=1).reshape(self.u.shape[0], -1), axis=1)

    def dissipation_rate(self):
        """``int eps . sigma dx`` per step."""
        return np.mean(np.sum(self.eps * self.sigma, axis=1).reshape(self.eps.shape[0], -1), axis=1)


def taylor_green(grid, amplitude=1.0):
    """``u = A (sin 2pi x cos 2pi y, -cos 2pi x sin 2pi y)`` (extended by 0 in 3D)."""
    xs = grid.spatial_points()
    x, y = xs[0], xs[1]
    u = np.zeros((grid.d,) + grid.spatial_shape)
    u[0] = amplitude * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
    u[1] = -amplitude * np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return u


def taylor_green_amplitude(u):
    """Coefficient ``A`` of the Taylor-Green mode in ``u`` (least squares)."""
    d = u.shape[0]
    N = u.shape[-1]
    from .grid import make_grid
    ref = taylor_green(make_grid(d, 4, N), 1.0)
    return float(np.sum(u * ref) / np.sum(ref * ref))


# -- state assembly --------------------------------------------------------------------

def _check_u0(u0, grid):
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (grid.d,) + grid.spatial_shape:
        raise ValueError(f"u0 must have shape {(grid.d,) + grid.spatial_shape}, got {u0.shape}")
    ops = spatial_ops(grid.d, grid.Nx)
    h = ops.fwd(u0)
    div = np.sum(np.moveaxis(ops.D, -1, 0) * h, axis=0)
    if np.sqrt(np.sum(np.abs(div) ** 2)) > 1e-9 * max(1.0, np.sqrt(np.sum(np.abs(h) ** 2))):
        raise ValueError("u0 is not divergence free")
    return u0, ops


def recover_u_pi(eps, sigma, u0, grid):
    """Velocity ``u^1..u^Nt`` and pressure from strain and stress.

    ``u^n = (Q*)^+ eps^n + mean(u0)``; ``pi^n`` solves
    ``Lap pi = div^2 (sigma^n - u^{n-1} x u^{n-1})`` with zero mean.
    Returns ``(u, pi)`` with ``u`` including ``u^0 = u0``.
    """
    eps = np.asarray(eps, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u0, ops = _check_u0(u0, grid)
    e_hat = ops.fwd(eps)
    zero = (slice(None), slice(None)) + (0,) * grid.d
    if np.max(np.abs(e_hat[zero])) > 1e-12 * max(1.0, np.max(np.abs(e_hat))):
        raise ValueError("strain must have zero spatial mean at every time")
    mean = u0.reshape(grid.d, -1).mean(axis=1)
    u_hat = np.concatenate([ops.fwd(u0)[None], ops.velocity_hat(e_hat, mean)])
    u = ops.bwd(u_hat)
    u[0] = u0
    pi = ops.bwd(ops.pressure_hat(ops.fwd(sigma), u_hat[:-1]))
    return u, pi


def forward_recursion(sigma, u0, grid):
    """The unique admissible strain for a given stress sequence.

    Returns ``(eps, u_hat)`` with ``u_hat`` spectra of ``u^0..u^Nt``.
    """
    u0, ops = _check_u0(u0, grid)
    dt = grid.T / grid.Nt
    s_hat = ops.fwd(np.asarray(sigma, dtype=float))
    u_hat = np.zeros((grid.Nt + 1, grid.d) + grid.spatial_shape, dtype=complex)
    u_hat[0] = ops.clean(ops.fwd(u0))
    for n in range(1, grid.Nt + 1):
        inc = ops.leray_hat(ops.div_hat(s_hat[n - 1])) - ops.convection_hat(u_hat[n - 1])
        u_hat[n] = ops.clean(u_hat[n - 1] + dt * inc)
    eps = ops.bwd(ops.strain_hat(u_hat[1:]))
    return eps, u_hat


def assemble_state(sigma, u0, grid, p, q, info=None):
    """Admissible state from a stress sequence (strain by forward recursion)."""
    eps, u_hat = forward_recursion(sigma, u0, grid)
    ops = spatial_ops(grid.d, grid.Nx)
    u = ops.bwd(u_hat)
    u[0] = u0
    pi = ops.bwd(ops.pressure_hat(ops.fwd(sigma), u_hat[:-1]))
    return FlowState(grid, eps, np.asarray(sigma, dtype=float), u, pi, np.asarray(u0, float), p, q,
                     dict(info or {}))


# -- residuals and energy ----------------------------------------------------------------

def _test_functions(d, Nx, n=4):
    """Divergence-free low modes used to pair against the velocity."""
    from .grid import make_grid
    xs = make_grid(d, 4, Nx).spatial_points()
    out = []
    for kx, ky in [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1)][:n]:
        ph = 2 * np.pi * (kx * xs[0] + ky * xs[1])
        for fn in (np.sin, np.cos):
            phi = np.zeros((d,) + xs[0].shape)
            # (ky, -kx) f(k.x) is divergence free
            phi[0] = ky * fn(ph)
            phi[1] = -kx * fn(ph)
            out.append(phi)
    return out


def residual_X(state, cfg=None):
    """Admissibility audit of a discrete state.

    ``eqn``: step residual ``(eps^n - eps^{n-1})/dt - M sigma^n + Theta^{n-1}``
    in a spatial ``W^{-2}``-type norm, relative to ``||M sigma|| + ||Theta||``;
    ``annihilator``: distance of ``eps^n`` from symmetric gradients of
    divergence-free fields; ``X3``: kinetic-energy bound margin with ``C_E``;
    ``X4``: ``u^0 = u0`` and the weak-continuity identity against smooth
    divergence-free test functions.
    """
    cfg = cfg or SolveConfig()
    g = state.grid
    ops = spatial_ops(g.d, g.Nx)
    dt = state.dt
    e_hat = ops.fwd(state.eps)
    s_hat = ops.fwd(state.sigma)
    u_hat = ops.fwd(state.u)
    e0 = ops.strain_hat(ops.fwd(state.u0))
    prev = np.concatenate([e0[None], e_hat[:-1]])
    th = ops.strain_hat(ops.convection_hat(u_hat[:-1]))
    ms = ops._ap(ops.M, s_hat)
    res = (e_hat - prev) / dt - ms + th
    weight = 1.0 / (1.0 + ops.k2)
    num = np.sqrt(np.sum(np.abs(res * weight) ** 2))
    den = np.sqrt(np.sum(np.abs(ms * weight) ** 2)) + np.sqrt(np.sum(np.abs(th * weight) ** 2))
    eqn = float(num / max(den, 1e-300)) if den > 0 else float(num)

    # eps^n must equal the strain of its own velocity recovery
    recon = ops.strain_hat(ops.velocity_hat(e_hat, np.zeros(g.d)))
    ann = float(np.sqrt(np.sum(np.abs((e_hat - recon) * weight) ** 2)) /
                max(np.sqrt(np.sum(np.abs(e_hat * weight) ** 2)), 1e-300))
    strain_u = ops.bwd(ops.strain_hat(u_hat[1:]))
    strain_gap = float(np.max(np.abs(strain_u - state.eps))) if state.eps.size else 0.0
    div = np.sum(np.moveaxis(ops.D, -1, 0)[None] * u_hat, axis=1)
    div_u = float(np.max(np.abs(div)))

    ep = float(dt * np.sum(np.mean(np.sqrt(np.sum(state.eps ** 2, axis=1)) ** state.p, axis=tuple(range(1, g.d + 1)))))
    sq = float(dt * np.sum(np.mean(np.sqrt(np.sum(state.sigma ** 2, axis=1)) ** state.q, axis=tuple(range(1, g.d + 1)))))
    u0n = float(np.mean(np.sum(state.u0 ** 2, axis=0)))
    sup = float(np.max(2 * state.kinetic()))
    x3 = cfg.C_E * (u0n + ep + sq + 1.0) - sup

    init_gap = float(np.max(np.abs(state.u[0] - state.u0)))
    weak = 0.0
    uu = ops.bwd(ops.padded_product(u_hat[:-1]))
    S = np.tensordot(state.sigma, ops.basis, axes=([1], [0]))
    S = np.moveaxis(np.moveaxis(S, -2, 1), -1, 2) - uu
    for phi in _test_functions(g.d, g.Nx):
        gphi = ops.bwd(np.moveaxis(ops.D, -1, 0)[:, None] * ops.fwd(phi)[None])  # d_i phi_j
        lhs = np.sum((state.u[1:] - state.u[0]) * phi, axis=tuple(range(1, g.d + 2))) / phi[0].size
        rhs = -dt * np.cumsum(np.sum(S * gphi, axis=tuple(range(1, g.d + 3))) / phi[0].size)
        scale = 1.0 + np.max(np.abs(lhs))
        weak = max(weak, float(np.max(np.abs(lhs - rhs)) / scale))
    tol = cfg.eqn_tol
    flags = {
        "X1": bool(np.all(np.isfinite(state.eps)) and np.all(np.isfinite(state.sigma))),
        "X2": bool(eqn <= tol and ann <= 1e-9 and div_u <= 1e-9 and strain_gap <= 1e-9),
        "X3": bool(x3 >= 0),
        "X4": bool(init_gap <= 1e-12 and weak <= max(tol, 1e-9)),
    }
    return {"eqn": eqn, "annihilator": ann, "div_u": div_u, "strain_gap": strain_gap,
            "X3_margin": x3, "initial_gap": init_gap, "weak_continuity": weak, "flags": flags,
            "in_X": all(flags.values())}


@dataclass
class EnergyTrace:
    t: np.ndarray
    kinetic: np.ndarray
    dissipation: np.ndarray
    balance_residual: np.ndarray
    regime: str = "equality"
    X3_margin: float | None = None
    X5_margin: float | None = None

    def __len__(self):
        return len(self.t)

    def rows(self):
        return [(float(a), float(b), float(c), float(d)) for a, b, c, d in
                zip(self.t, self.kinetic, self.dissipation, self.balance_residual)]


def energy_report(state, cfg=None, integrand=None, C0=None):
    """Kinetic energy, cumulative dissipation and balance residual per stored time.

    ``balance_residual(t_n) = K(t_n) - K(0) + sum_{j<=n} dt int eps^j . sigma^j``.
    For ``p >= (3d+2)/(d+2)`` the residual measures the equality defect;
    below it the negated residual is the energy-inequality margin.
    """
    g = state.grid
    K = state.kinetic()
    diss = np.concatenate([[0.0], np.cumsum(state.dt * state.dissipation_rate())])
    res = K - K[0] + diss
    regime = "equality" if state.p >= (3 * g.d + 2) / (g.d + 2) else "inequality"
    x3 = residual_X(state, cfg)["X3_margin"] if state.eps.size else None
    x5 = None
    if integrand is not None and C0 is not None:
        x5 = x5_margin(state, integrand, C0)
    return EnergyTrace(state.times, K, diss, res, regime, x3, x5)


# -- functionals ------------------------------------------------------------------------

def _as_points(v):
    return np.moveaxis(v, 1, -1)


def I_value(state, integrand):
    """``int_0^T int f(eps, sigma)`` (time integral as the step sum)."""
    if state.eps.size == 0:
        return 0.0
    vals = integrand(_as_points(state.eps), _as_points(state.sigma))
    return float(state.dt * np.sum(np.mean(vals.reshape(vals.shape[0], -1), axis=1)))


def x5_margin(state, integrand, C0):
    """Left minus right side of the restricted energy bound.

    With ``f >= C2 (|e|^p + |s|^q) - C_const - C_dot e.s`` the bound reads
    ``C0 + C_const T + C_dot/2 |u0|^2 >= C_dot/4 sup|u|^2 + C2/2 (||e||_p^p + ||s||_q^q)``.
    """
    if integrand.coercivity is None:
        raise ValueError("integrand has no coercivity constants")
    C2, c_const, c_dot = integrand.coercivity
    g = state.grid
    dt = state.dt
    ax = tuple(range(1, g.d + 1))
    ep = dt * np.sum(np.mean(np.sqrt(np.sum(state.eps ** 2, axis=1)) ** integrand.p, axis=ax))
    sq = dt * np.sum(np.mean(np.sqrt(np.sum(state.sigma ** 2, axis=1)) ** integrand.q, axis=ax))
    u0n = np.mean(np.sum(state.u0 ** 2, axis=0))
    sup = np.max(2 * state.kinetic())
    lhs = C0 + c_const * g.T + c_dot / 2 * u0n
    rhs = c_dot / 4 * sup + C2 / 2 * (ep + sq)
    return float(lhs - rhs)


# -- time stepping -------------------------------------------------------------------------

class _StepProblem:
    """Convex energy ``1/2 |u - b|^2 + dt int W(eps(u))`` over divergence-free ``u``."""

    def __init__(self, ops, law, dt, b, cfg):
        self.ops, self.law, self.dt, self.b, self.cfg = ops, law, dt, b, cfg
        self.d = ops.d

    def strain(self, u):
        return self.ops.bwd(self.ops.strain_hat(self.ops.fwd(u)))

    def energy(self, u):
        e = self.strain(u)
        return 0.5 * np.mean(np.sum((u - self.b) ** 2, axis=0)) + self.dt * np.mean(W_eval(self.law, _pt(e)))

    def gradient(self, u):
        e = self.strain(u)
        s = _un(DW_eval(self.law, _pt(e)))
        ops = self.ops
        force = ops.bwd(ops.clean(ops.leray_hat(ops.div_hat(ops.fwd(s)))))
        return u - self.b - self.dt * force, e

    def hessian(self, e, v):
        ops = self.ops
        ev = self.strain(v)
        floor = self.cfg.hessian_floor * max(1.0, float(np.max(np.abs(e))))
        hv = _un(D2W_apply(self.law, _pt(e), _pt(ev), floor if self.law.p < 2 else 0.0))
        return v - self.dt * ops.bwd(ops.clean(ops.leray_hat(ops.div_hat(ops.fwd(hv)))))

    def precondition(self, r, mu):
        ops = self.ops
        fac = 1.0 / (1.0 + self.dt * mu * 2 * np.pi ** 2 * ops.k2)
        return ops.bwd(ops.fwd(r) * fac)


def _pt(v):
    return np.moveaxis(v, 0, -1)


def _un(v):
    return np.moveaxis(v, -1, 0)


def _dot(a, b):
    return float(np.mean(np.sum(a * b, axis=0)))


def _newton_step(prob, u, cfg, scale):
    """Newton-CG with Armijo backtracking on the step energy."""
    law = prob.law
    target = cfg.newton_tol * max(scale, 1e-300)
    for it in range(cfg.newton_max):
        G, e = prob.gradient(u)
        gn = math.sqrt(max(_dot(G, G), 0.0))
        if gn <= target:
            return u, it, gn
        s = np.sqrt(np.sum(e ** 2, axis=0))
        mu = float(np.mean(law.viscosity(np.maximum(s, prob.cfg.hessian_floor))))
        mu = max(mu, 0.0)
        # preconditioned CG on H x = -G with forcing term
        x = np.zeros_like(u)
        r = -G
        z = prob.precondition(r, mu)
        pdir = z.copy()
        rz = _dot(r, z)
        forcing = min(0.5, math.sqrt(gn / max(scale, 1e-300))) * gn
        for _ in range(cfg.cg_max):
            Hp = prob.hessian(e, pdir)
            curv = _dot(pdir, Hp)
            if curv <= 0:
                break
            a = rz / curv
            x += a * pdir
            r -= a * Hp
            if math.sqrt(max(_dot(r, r), 0.0)) <= max(forcing, 0.1 * target):
                break
            z = prob.precondition(r, mu)
            rz_new = _dot(r, z)
            pdir = z + (rz_new / rz) * pdir
            rz = rz_new
        if not np.any(x):
            x = -G
        E0 = prob.energy(u)
        slope = _dot(G, x)
        step = 1.0
        while step > 1e-12:
            cand = u + step * x
            E1 = prob.energy(cand)
            if E1 <= E0 + 1e-4 * step * slope:
                break
            # energy differences at roundoff: fall back to gradient decrease
            if abs(E1 - E0) <= 1e-13 * abs(E0):
                Gc, _ = prob.gradient(cand)
                if _dot(Gc, Gc) < gn * gn:
                    break
            step *= 0.5
        else:
            raise FlowError("line search failed", {"iteration": it, "gradient": gn})
        u = cand
    G, _ = prob.gradient(u)
    gn = math.sqrt(max(_dot(G, G), 0.0))
    if gn <= 10 * target:
        return u, cfg.newton_max, gn
    raise FlowError(f"time step did not converge (|grad| = {gn:.3e})", {"gradient": gn})


def solve_regularized(law, eta, u0, grid, cfg=None):
    """March ``u^n = u^{n-1} + dt (Pi div DW_eta(eps(u^n)) - Pi div(u^{n-1} x u^{n-1}))``.

    Each step minimises a convex energy by Newton-CG, so the implicit
    stress is resolved to ``cfg.newton_tol``.  Returns a state with
    ``sigma = DW_eta(eps)``, which is admissible by construction.
    """
    cfg = cfg or SolveConfig()
    if eta < 0:
        raise ValueError("eta must be non-negative")
    u0, ops = _check_u0(u0, grid)
    law_eta = regularize(law, eta, cfg.r_prime or default_r_prime(law.p)) if eta > 0 else law
    dt = grid.T / grid.Nt
    u = np.zeros((grid.Nt + 1, grid.d) + grid.spatial_shape)
    u[0] = ops.bwd(ops.clean(ops.fwd(u0)))
    iters = []
    for n in range(1, grid.Nt + 1):
        prev_hat = ops.fwd(u[n - 1])
        b = u[n - 1] - dt * ops.bwd(ops.convection_hat(prev_hat))
        prob = _StepProblem(ops, law_eta, dt, b, cfg)
        scale = max(math.sqrt(_dot(b, b)), 1e-12)
        try:
            un, it, gn = _newton_step(prob, u[n - 1].copy(), cfg, scale)
        except FlowError as exc:
            exc.diagnostics["step"] = n
            raise
        # exact projection keeps the iterate divergence free to roundoff
        u[n] = ops.bwd(ops.clean(ops.leray_hat(ops.fwd(un))))
        iters.append(it)
    u[0] = u0
    u_hat = ops.fwd(u)
    eps = ops.bwd(ops.strain_hat(u_hat[1:]))
    sigma = np.moveaxis(DW_eval(law_eta, np.moveaxis(eps, 1, -1)), -1, 1)
    pi = ops.bwd(ops.pressure_hat(ops.fwd(sigma), u_hat[:-1]))
    return FlowState(grid, eps, sigma, u, pi, u0, law.p, law.q,
                     {"law": law_eta.describe(), "eta": eta, "newton_iterations": iters})


@dataclass
class ContinuationResult:
    states: list
    etas: list
    I_values: list
    energy_margins: list
    monotone: bool
    final: FlowState


def leray_hopf_continuation(law, u0, grid, eta_schedule=None, cfg=None):
    """Regularised solves along a decreasing ``eta`` schedule.

    ``I`` is evaluated with the unregularised constitutive gap at
    ``(eps_eta, DW_eta(eps_eta))``, the admissible pair produced by each
    solve.  The energy-inequality margin is
    ``min_t K(0) - K(t) - int_0^t int DW(eps) . eps``.
    """
    cfg = cfg or SolveConfig()
    d = grid.d
    if not law.p > 2 * d / (d + 2):
        raise ValueError("continuation needs p > 2d/(d+2)")
    etas = list(eta_schedule or cfg.eta_schedule)
    if any(b >= a for a, b in zip(etas, etas[1:])):
        raise ValueError("eta schedule must be strictly decreasing")
    f = constitutive_integrand(law)
    states, Is, margins = [], [], []
    for eta in etas:
        st = solve_regularized(law, eta, u0, grid, cfg)
        states.append(st)
        Is.append(I_value(st, f))
        sig_plain = np.moveaxis(DW_eval(law, np.moveaxis(st.eps, 1, -1)), -1, 1)
        diss = np.concatenate([[0.0], np.cumsum(st.dt * np.mean(
            np.sum(st.eps * sig_plain, axis=1).reshape(grid.Nt, -1), axis=1))])
        K = st.kinetic()
        margins.append(float(np.min(K[0] - K - diss)))
    monotone = all(b < a for a, b in zip(Is, Is[1:]))
    if not monotone:
        log.warning("I values along the eta schedule are not decreasing: %s", Is)
    return ContinuationResult(states, etas, Is, margins, monotone, states[-1])


# -- variational solvers -----------------------------------------------------------------------

class _AffineStep:
    """Per-mode minimiser of ``c_q e.s + rho/2 |(e, s) - v|^2`` over ``e = L s + c``.

    ``L = dt * lower-triangular-ones (x) M_k`` couples the time slices of
    spatial mode ``k``.
    """

    def __init__(self, ops, Nt, dt, c_q):
        self.ops, self.Nt, self.dt, self.c_q = ops, Nt, dt, c_q
        m = ops.m
        tri = np.tril(np.ones((Nt, Nt)))
        Mk = ops.M.real.reshape(-1, m, m)
        self.L = dt * np.einsum("nj,kab->knajb", tri, Mk).reshape(len(Mk), Nt * m, Nt * m)
        self.n = Nt * m
        self.rho = None

    def set_rho(self, rho):
        if rho == self.rho:
            return
        L = self.L
        Lt = np.swapaxes(L, 1, 2)
        H = rho * (np.eye(self.n) + Lt @ L) + self.c_q * (L + Lt)
        self.Hinv = np.linalg.inv(H)
        self.rho = rho

    def _flat(self, v_hat):
        # (Nt, m, *space) -> (K, Nt*m)
        Nt, m = v_hat.shape[:2]
        return np.moveaxis(v_hat.reshape(Nt, m, -1), 2, 0).reshape(-1, Nt * m)

    def _unflat(self, flat, shape):
        Nt, m = shape[:2]
        return np.moveaxis(flat.reshape(-1, Nt, m), 0, 2).reshape(shape)

    def solve(self, ve_hat, vs_hat, c_hat):
        rho = self.rho
        L = self.L
        ve, vs, c = self._flat(ve_hat), self._flat(vs_hat), self._flat(c_hat)
        rhs = -self.c_q * c + rho * np.einsum("kji,kj->ki", L, ve - c) + rho * vs
        s = np.einsum("kij,kj->ki", self.Hinv, rhs)
        e = np.einsum("kij,kj->ki", L, s) + c
        shape = ve_hat.shape
        return self._unflat(e, shape), self._unflat(s, shape)


def _offset(theta_hat, e0_hat, dt):
    """``c^n = eps^0 - dt sum_{j<=n} Theta^{j-1}``."""
    return e0_hat[None] - dt * np.cumsum(theta_hat, axis=0)


def _theta_sequence(ops, u_hat_prev):
    return ops.strain_hat(ops.convection_hat(u_hat_prev))


def _prox(integrand, a, b, rho):
    e, s = integrand.prox(np.moveaxis(a, 1, -1), np.moveaxis(b, 1, -1), rho)
    return np.moveaxis(e, -1, 1), np.moveaxis(s, -1, 1)


@dataclass
class VariationalResult:
    state: FlowState
    value: float
    iterations: int
    outer_iterations: int
    residuals: dict
    history: list = field(default_factory=list)
    C0: float | None = None
    theta: float | None = None
    X5_margin: float | None = None


def _admm(integrand, u0, grid, cfg, start, log_every=0):
    """ADMM on ``(eps, sigma)`` with outer Picard updates of the convection."""
    if integrand.prox is None:
        raise ValueError("integrand has no proximal map")
    if grid.Nt > VARIATIONAL_MAX or grid.Nx > VARIATIONAL_MAX:
        raise ValueError(f"variational solvers are limited to Nt, Nx <= {VARIATIONAL_MAX}")
    ops = spatial_ops(grid.d, grid.Nx)
    dt = grid.T / grid.Nt
    Nt = grid.Nt
    e0_hat = ops.strain_hat(ops.clean(ops.fwd(u0)))
    step = _AffineStep(ops, Nt, dt, integrand.bilinear)
    rho = cfg.admm_rho
    step.set_rho(rho)
    ze, zs = start.eps.copy(), start.sigma.copy()
    xe, xs = ze.copy(), zs.copy()
    ye, ys = np.zeros_like(ze), np.zeros_like(zs)
    u_hat = ops.fwd(start.u)
    theta = _theta_sequence(ops, u_hat[:-1])
    total, history = 0, []
    alpha = cfg.admm_relax
    for outer in range(cfg.outer_max):
        c_hat = _offset(theta, e0_hat, dt)
        for it in range(cfg.admm_max):
            xe, xs = _prox(integrand, ze - ye, zs - ys, rho)
            he = alpha * xe + (1 - alpha) * ze
            hs = alpha * xs + (1 - alpha) * zs
            pe, ps = ze, zs
            e_hat, s_hat = step.solve(ops.fwd(he + ye), ops.fwd(hs + ys), c_hat)
            ze, zs = ops.bwd(e_hat), ops.bwd(s_hat)
            ye += he - ze
            ys += hs - zs
            total += 1
            r = math.sqrt(np.sum((xe - ze) ** 2) + np.sum((xs - zs) ** 2))
            sdual = rho * math.sqrt(np.sum((ze - pe) ** 2) + np.sum((zs - ps) ** 2))
            scale = max(math.sqrt(np.sum(ze ** 2) + np.sum(zs ** 2)), 1e-12)
            yscale = rho * max(math.sqrt(np.sum(ye ** 2) + np.sum(ys ** 2)), 1e-12)
            if log_every and it % log_every == 0:
                log.info("admm %d/%d r=%.2e s=%.2e rho=%.2e", outer, it, r, sdual, rho)
            if r <= cfg.admm_tol * scale and sdual <= cfg.admm_tol * max(yscale, scale):
                break
            if it % 20 == 19:
                if r / scale > 10 * sdual / max(yscale, scale):
                    rho *= 2.0
                    ye /= 2.0
                    ys /= 2.0
                    step.set_rho(rho)
                elif sdual / max(yscale, scale) > 10 * r / scale:
                    rho /= 2.0
                    ye *= 2.0
                    ys *= 2.0
                    step.set_rho(rho)
        history.append((outer, it + 1, r / scale))
        # refresh the convection from the admissible state generated by the stress
        _, u_hat_new = forward_recursion(zs, u0, grid)
        theta_new = _theta_sequence(ops, u_hat_new[:-1])
        # relative to the whole right-hand side: the convection alone may vanish
        ref = max(np.sqrt(np.sum(np.abs(theta_new) ** 2)),
                  np.sqrt(np.sum(np.abs(ops._ap(ops.M, ops.fwd(zs))) ** 2)), 1e-12)
        change = float(np.sqrt(np.sum(np.abs(theta_new - theta) ** 2)) / ref)
        w = cfg.picard_damping
        theta = w * theta_new + (1 - w) * theta
        history[-1] = history[-1] + (change,)
        if change <= cfg.outer_tol:
            break
    else:
        raise FlowError("outer Picard iteration on the convection did not converge",
                        {"history": history})
    return zs, total, outer + 1, history, {"primal": r / scale, "dual": sdual / max(yscale, scale)}


def minimize_I(integrand, u0, grid, cfg=None, start=None, log_every=0):
    """Minimise ``I`` over admissible pairs.

    ADMM alternates the pointwise proximal map of ``f`` (its separable
    part) with an exact per-mode projection onto the admissible affine set
    for frozen convection; an outer Picard loop refreshes the convection.
    Starts from a Newtonian solve unless ``start`` is given.  The returned
    state is rebuilt from the final stress by forward recursion, so it is
    admissible to roundoff.
    """
    cfg = cfg or SolveConfig()
    d = grid.d
    if integrand.p < (3 * d + 2) / (d + 2) and start is None:
        log.warning("p below (3d+2)/(d+2): minimisers need not exist without the energy restriction")
    u0, _ = _check_u0(u0, grid)
    if start is None:
        mu0 = integrand.law.mu0 if integrand.law is not None else 1.0
        start = solve_regularized(ConstitutiveLaw(2.0, mu0=mu0), 0.0, u0, grid, cfg)
    sigma, total, outer, hist, res = _admm(integrand, u0, grid, cfg, start, log_every)
    state = assemble_state(sigma, u0, grid, integrand.p, integrand.q, {"method": "admm"})
    val = I_value(state, integrand)
    res.update(residual_X(state, cfg))
    return VariationalResult(state, val, total, outer, res, hist)


def power_law_reference(p, u0, grid, cfg=None, mu0=1.0):
    """Admissible power-law state and ``C0 = I`` at it.

    The state solves the ``eta``-regularised equation (``cfg.reference_eta``),
    so ``sigma = DW_eta(eps)`` keeps it admissible; ``I`` is measured with
    the plain power-law gap.
    """
    cfg = cfg or SolveConfig()
    law = ConstitutiveLaw(p, mu0=mu0)
    st = solve_regularized(law, cfg.reference_eta, u0, grid, cfg)
    return st, I_value(st, constitutive_integrand(law))


def minimize_J(integrand, u0, grid, cfg=None, reference=None, log_every=0):
    """Minimise ``I`` over admissible pairs that also satisfy the restricted energy bound.

    The bound uses ``C0`` from the power-law reference (or ``cfg.C0``).  The
    unconstrained ADMM minimiser is pulled back towards the reference,
    ``sigma_t = sigma_ref + t (sigma - sigma_ref)``, with ``t`` the largest
    value found by bisection for which the rebuilt state satisfies the bound
    and ``I <= C0``; ``t = 0`` (the reference itself) is always feasible.
    """
    cfg = cfg or SolveConfig()
    d = grid.d
    if not integrand.p > 2 * d / (d + 2):
        raise ValueError("restricted problem needs p > 2d/(d+2)")
    u0, _ = _check_u0(u0, grid)
    if reference is None:
        reference = power_law_reference(integrand.p, u0, grid, cfg)
    ref_state, C0_ref = reference
    C0 = cfg.C0 if cfg.C0 is not None else C0_ref
    ref = assemble_state(ref_state.sigma, u0, grid, integrand.p, integrand.q)
    if x5_margin(ref, integrand, C0) < 0:
        raise FlowError("power-law reference violates the restricted energy bound",
                        {"margin": x5_margin(ref, integrand, C0)})
    sigma, total, outer, hist, res = _admm(integrand, u0, grid, cfg, ref, log_every)

    def build(t):
        st = assemble_state(ref.sigma + t * (sigma - ref.sigma), u0, grid, integrand.p, integrand.q)
        return st, I_value(st, integrand), x5_margin(st, integrand, C0)

    def ok(I, margin):
        return margin >= 0 and I <= C0

    st, val, margin = build(1.0)
    t = 1.0
    if not ok(val, margin):
        lo, best = 0.0, (ref, I_value(ref, integrand), x5_margin(ref, integrand, C0), 0.0)
        hi = 1.0
        for _ in range(cfg.x5_bisection):
            mid = 0.5 * (lo + hi)
            cand = build(mid)
            if ok(cand[1], cand[2]):
                lo, best = mid, cand + (mid,)
            else:
                hi = mid
        st, val, margin, t = best
    res.update(residual_X(st, cfg))
    st.info.update({"method": "admm+x5", "theta": t})
    return VariationalResult(st, val, total, outer, res, hist, C0, t, margin)
