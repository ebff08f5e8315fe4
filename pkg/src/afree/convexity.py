"""Sampling audits of convexity notions along the kernel of a parabolic pair.

All tests are falsification tools: a violation is a certificate, the
absence of violations is only evidence.  Integrands are callables on
channel-last ``(eps, sig)`` arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .grid import SpaceTimeField, make_grid, random_field
from .projections import KernelProjector, project_parabolic_linear
from .symbols import cone_sample


@dataclass
class Violation:
    test: str
    base: np.ndarray
    gap: float
    direction: np.ndarray | None = None
    label: str = ""
    h: float = 0.0
    step: float = 0.0
    xi: np.ndarray | None = None


@dataclass
class ConvexityReport:
    test: str
    n_checked: int
    violations: list = field(default_factory=list)
    worst_gap: float = 0.0
    note: str = ""

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {"test": self.test, "passed": self.passed, "n_checked": self.n_checked,
                "n_violations": len(self.violations), "worst_gap": self.worst_gap,
                "note": self.note,
                "examples": [{"label": v.label, "gap": v.gap,
                              "base": v.base.tolist(),
                              "direction": None if v.direction is None else v.direction.tolist()}
                             for v in self.violations[:5]]}


def _split(z, m):
    return z[..., :m], z[..., m:]


def _eval(f, z, m):
    e, s = _split(np.asarray(z, dtype=float), m)
    return np.asarray(f(e, s), dtype=float)


def _tol(value):
    return 1e-7 * (1.0 + np.abs(value))


# -- Jensen ---------------------------------------------------------------------

def jensen_test(f, pair, base, n_fields=20, grid=None, seed=0, amplitudes=(0.1, 1.0, 3.0),
                extra_fields=()):
    """Check ``f(z) <= mean f(z + w)`` for random zero-mean A-free ``w``.

    Fields are Gaussian, band-limited and orthogonally projected onto the
    kernel at every mode; each is tried at several amplitudes.
    ``extra_fields`` are added verbatim (arrays ``(2m, *grid.shape)``).
    """
    grid = grid or make_grid(pair.d, 8, 8)
    m = pair.m
    z = np.asarray(base, dtype=float)
    f0 = float(_eval(f, z, m))
    proj = KernelProjector(pair, grid)
    rng = np.random.default_rng(seed)
    report = ConvexityReport("jensen", 0, note="no violation is evidence, not proof")
    scale = 1.0 + np.linalg.norm(z)
    fields = []
    for _ in range(n_fields):
        w = proj(random_field(grid, 2 * m, rng).values)
        peak = np.max(np.sqrt(np.sum(w ** 2, axis=0)))
        fields.extend(w * (a * scale / peak) for a in amplitudes)
    fields.extend(np.asarray(x, dtype=float) for x in extra_fields)
    for w in fields:
        vals = _eval(f, np.moveaxis(w, 0, -1) + z, m)
        avg = float(np.mean(vals))
        gap = f0 - avg
        report.n_checked += 1
        report.worst_gap = max(report.worst_gap, gap)
        if gap > _tol(avg):
            report.violations.append(Violation("jensen", z, gap, w))
    return report


# -- cone directions ------------------------------------------------------------

def _lattice_directions(d):
    """Nonzero spatial directions with entries in {-1, 0, 1}, one per +/- pair."""
    out = []
    for v in itertools.product((-1, 0, 1), repeat=d):
        if any(v) and tuple(-x for x in v) not in out:
            out.append(v)
    return [np.array(v, dtype=float) for v in out]


def cone_directions(pair, n_dirs, rng, lattice=False):
    """Real cone elements ``w`` in ``Lambda1 u Lambda2`` as ``(label, xi, w)``.

    With ``lattice=True`` spatial frequencies are restricted to directions
    in ``{-1, 0, 1}^d`` so that every direction has an exact laminate on a
    grid with ``Nx`` divisible by 4.
    """
    out = []
    lat = _lattice_directions(pair.d)
    for i in range(n_dirs):
        if i % 2:
            s = cone_sample(pair, "Lambda2", rng, xi=np.concatenate([[1.0], np.zeros(pair.d)]))
        else:
            xi = None
            if lattice:
                xi = np.concatenate([[0.0], lat[rng.integers(len(lat))]])
            s = cone_sample(pair, "Lambda1", rng, xi=xi)
        w = np.concatenate([s.w1, s.w2])
        n = np.linalg.norm(w)
        if n > 0:
            out.append((s.label, s.xi, w / n))
    return out


def cone_convexity_test(f, pair, n_dirs=50, n_base=20, seed=0, extent=2.0, n_steps=21,
                        lattice=False, bases=None):
    """Midpoint convexity of ``h -> f(z + h w)`` along cone directions.

    Second differences on a uniform grid of ``h`` in ``[-extent, extent]``
    (scaled by ``1 + |z|``) must be non-negative up to tolerance.
    """
    rng = np.random.default_rng(seed)
    m = pair.m
    dirs = cone_directions(pair, n_dirs, rng, lattice)
    if bases is None:
        bases = rng.standard_normal((n_base, 2 * m))
    report = ConvexityReport("cone", 0)
    for z in np.atleast_2d(bases):
        span = extent * (1.0 + np.linalg.norm(z))
        hs = np.linspace(-span, span, n_steps)
        step = hs[1] - hs[0]
        for label, xi, w in dirs:
            vals = _eval(f, z[None] + hs[:, None] * w[None], m)
            second = vals[:-2] + vals[2:] - 2 * vals[1:-1]
            gap = -second / 2
            report.n_checked += len(second)
            i = int(np.argmax(gap))
            report.worst_gap = max(report.worst_gap, float(gap[i]))
            if gap[i] > _tol(vals[i + 1]):
                report.violations.append(Violation("cone", z, float(gap[i]), w, label,
                                                   float(hs[i + 1]), float(step), xi))
    return report


# -- subharmonicity -------------------------------------------------------------

def subharmonicity_test(f, pair, n_samples=100, radii=(0.1, 1.0, 10.0), seed=0, n_angles=256,
                        bases=None):
    """``f(z) <= mean_theta f(eps + R sin(2 pi theta) w1, sig + R cos(2 pi theta) w2)``.

    ``(w1, i w2)`` are samples of the mixed cone; the circle mean uses the
    trapezoid rule on ``n_angles`` equispaced angles.
    """
    if any(r <= 0 for r in radii):
        raise ValueError("radii must be positive")
    rng = np.random.default_rng(seed)
    m = pair.m
    theta = np.arange(n_angles) / n_angles
    sn, cs = np.sin(2 * np.pi * theta), np.cos(2 * np.pi * theta)
    if bases is None:
        bases = rng.standard_normal((n_samples, 2 * m))
    report = ConvexityReport("subharmonic", 0)
    for z in np.atleast_2d(bases):
        s = cone_sample(pair, "Lambda3", rng)
        n = np.hypot(np.linalg.norm(s.w1), np.linalg.norm(s.w2))
        w1, w2 = s.w1 / n, s.w2 / n
        f0 = float(_eval(f, z, m))
        for R in radii:
            circle = np.concatenate([z[:m] + R * sn[:, None] * w1, z[m:] + R * cs[:, None] * w2], axis=1)
            avg = float(np.mean(_eval(f, circle, m)))
            gap = f0 - avg
            report.n_checked += 1
            report.worst_gap = max(report.worst_gap, gap)
            if gap > _tol(avg):
                report.violations.append(Violation("subharmonic", z, gap,
                                                   np.concatenate([w1, w2]), "Lambda3", R))
    return report


def circle_deviation(f, pair, base, w1, w2, R, n_angles=256):
    """Signed ``mean_theta f(circle) - f(z)``; zero for quasiaffine ``f``."""
    m = pair.m
    z = np.asarray(base, dtype=float)
    theta = np.arange(n_angles) / n_angles
    circle = np.concatenate([z[:m] + R * np.sin(2 * np.pi * theta)[:, None] * w1,
                             z[m:] + R * np.cos(2 * np.pi * theta)[:, None] * w2], axis=1)
    return float(np.mean(_eval(f, circle, m)) - _eval(f, z, m))


# -- quasiaffinity ----------------------------------------------------------------

def quasiaffine_integral_test(pair, grid, n_fields=100, seed=0, bases=None):
    """Max of ``|mean (e0 + eps).(s0 + sig) - e0.s0|`` over projected A-free fields.

    Deviations are relative to ``1 + |e0||s0| + ||eps|| ||sig||``.
    """
    rng = np.random.default_rng(seed)
    m = pair.m
    worst = 0.0
    for i in range(n_fields):
        w = project_parabolic_linear(pair, random_field(grid, 2 * m, rng, zero_mean=True))
        v = w.values - w.values.reshape(2 * m, -1).mean(axis=1).reshape((2 * m,) + (1,) * (grid.d + 1))
        z = rng.standard_normal(2 * m) if bases is None else np.asarray(bases[i % len(bases)])
        e0, s0 = z[:m], z[m:]
        e = v[:m] + e0.reshape((m,) + (1,) * (grid.d + 1))
        s = v[m:] + s0.reshape((m,) + (1,) * (grid.d + 1))
        lhs = float(np.mean(np.sum(e * s, axis=0)))
        scale = 1.0 + abs(e0 @ s0) + np.sqrt(np.mean(np.sum(v[:m] ** 2, axis=0)) *
                                             np.mean(np.sum(v[m:] ** 2, axis=0)))
        worst = max(worst, abs(lhs - e0 @ s0) / scale)
    return worst


# -- implication chain --------------------------------------------------------------

@dataclass
class PolyconvexCertificate:
    """``f(eps, sig) = h(eps, sig, eps . sig)`` with ``h`` convex."""

    h: object
    description: str = ""

    def check(self, f, m, n_samples=2000, seed=0, tol=1e-9):
        """Sampled consistency with ``f`` and midpoint convexity of ``h``."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n_samples, 2 * m)) * rng.uniform(0.1, 3.0, (n_samples, 1))
        e, s = z[:, :m], z[:, m:]
        t = np.sum(e * s, axis=1)
        fv = _eval(f, z, m)
        if np.max(np.abs(self.h(e, s, t) - fv) / (1 + np.abs(fv))) > tol:
            return False
        y = np.concatenate([z, t[:, None]], axis=1)
        y2 = y[rng.permutation(n_samples)]
        mid = 0.5 * (y + y2)

        def hv(v):
            return self.h(v[:, :m], v[:, m:2 * m], v[:, -1])

        lhs = hv(mid)
        rhs = 0.5 * (hv(y) + hv(y2))
        return bool(np.all(lhs <= rhs + 1e-9 * (1 + np.abs(rhs))))


def constitutive_certificate(law):
    from .integrands import W_eval, conjugate_eval
    return PolyconvexCertificate(
        lambda e, s, t: np.maximum(W_eval(law, e) + conjugate_eval(law, s) - t, 0.0),
        "max(W(eps) + W*(sig) - t, 0)")


def laminate_field(pair, grid, xi, w):
    """Two-valued A-free field ``w * sq(nu . (t, x))`` with values ``+-w`` on halves of the grid.

    ``xi`` must be a cone frequency with integer entries in {-1, 0, 1}; the
    field oscillates at ``nu = (Nt/4, Nx/4) * xi`` with period-4 pattern
    ``(1, 1, -1, -1)``, which has no content beyond ``+-nu``.
    """
    if grid.Nt % 4 or grid.Nx % 4:
        raise ValueError("laminates need Nt and Nx divisible by 4")
    idx = np.meshgrid(*[np.arange(n) for n in grid.shape], indexing="ij")
    # nu_j i_j / N_j counted in quarter periods is just xi_j i_j
    quarter = sum(int(round(x)) * i for x, i in zip(xi, idx)) % 4
    sq = np.where(quarter < 2, 1.0, -1.0)
    return np.asarray(w, dtype=float).reshape((-1,) + (1,) * (grid.d + 1)) * sq[None]


@dataclass
class AuditReport:
    poly: bool | None
    jensen_violations: int
    cone_violations: int
    consistent: bool
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"poly": self.poly, "jensen_violations": self.jensen_violations,
                "cone_violations": self.cone_violations, "chain_consistent": self.consistent,
                "notes": list(self.notes)}


def implication_audit(f, pair, certificate=None, seed=0, n_fields=20, n_dirs=40, n_base=10,
                      grid=None):
    """Evidence for the chain polyconvex => quasiconvex => cone convex.

    Cone directions are drawn on lattice frequencies so that each cone
    violation can be replayed as a two-valued laminate in the Jensen test;
    a cone violation that no laminate reproduces flags an inconsistency.
    """
    grid = grid or make_grid(pair.d, 8, 8)
    m = pair.m
    rng = np.random.default_rng(seed)
    notes = []
    poly = None
    if certificate is not None:
        poly = certificate.check(f, m, seed=seed)
        if not poly:
            notes.append("certificate rejected: h does not reproduce f or is not convex")
    cone = cone_convexity_test(f, pair, n_dirs, n_base, seed, lattice=True)
    bases = rng.standard_normal((max(n_base // 2, 1), 2 * m))
    jensen_viol = 0
    for z in bases:
        jensen_viol += len(jensen_test(f, pair, z, n_fields, grid, seed).violations)
    consistent = True
    if cone.violations:
        replayed = 0
        for v in cone.violations[:10]:
            lam = laminate_field(pair, grid, v.xi, v.step * v.direction)
            rep = jensen_test(f, pair, v.base + v.h * v.direction, 0, grid, seed, extra_fields=[lam])
            replayed += bool(rep.violations)
            jensen_viol += len(rep.violations)
        if replayed == 0:
            consistent = False
            notes.append("cone violation not reproduced by any laminate: implementation bug")
        else:
            notes.append(f"{replayed} cone violations replayed as Jensen laminates")
    elif jensen_viol:
        notes.append("Jensen violations without cone violations (cone convexity is only necessary)")
    if poly and (jensen_viol or cone.violations):
        consistent = False
        notes.append("certified polyconvex integrand shows violations: implementation bug")
    return AuditReport(poly, jensen_viol, len(cone.violations), consistent, notes)
