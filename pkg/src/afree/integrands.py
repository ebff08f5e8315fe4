"""Pointwise integrands measuring deviation from a constitutive relation.

Arrays of strain/stress values are channel-last: ``eps`` and ``sig`` have
shape ``(..., m)`` in the orthonormal trace-free coordinate basis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial import cKDTree

from .projections import KernelProjector


class ConvergenceError(RuntimeError):
    """A scalar inversion or inner solve failed to converge."""


# -- radial root finding -------------------------------------------------------

def radial_inverse(fun, dfun, target, guess=None, max_iter=200):
    """Solve ``fun(s) = target`` for increasing ``fun`` with ``fun(0) = 0``.

    Vectorised safeguarded Newton iteration on a bracket.
    """
    target = np.asarray(target, dtype=float)
    out = np.zeros_like(target)
    act = target > 0
    if not np.any(act):
        return out
    t = target[act]
    lo = np.zeros_like(t)
    hi = np.maximum(guess[act] if guess is not None else t, 1e-300) * 2.0 + 1e-300
    for _ in range(2000):
        short = fun(hi) < t
        if not np.any(short):
            break
        hi = np.where(short, hi * 4.0, hi)
    else:
        raise ConvergenceError("could not bracket radial inverse")
    x = np.clip(guess[act], lo, hi) if guess is not None else 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = fun(x) - t
        lo = np.where(fx < 0, x, lo)
        hi = np.where(fx > 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - fx / dfun(x)
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        x_new = np.where(bad, 0.5 * (lo + hi), step)
        hit = np.abs(fx) <= 1e-15 * t
        done = hit | (np.abs(x_new - x) <= 1e-15 * np.maximum(x_new, 1e-300)) | (hi - lo <= 4e-16 * hi)
        x = np.where(hit, x, x_new)
        if np.all(done):
            break
    else:
        raise ConvergenceError("radial inverse did not converge")
    out[act] = x
    return out


# -- constitutive laws ---------------------------------------------------------

FAMILIES = ("power-law", "carreau-like")


@dataclass(frozen=True)
class ConstitutiveLaw:
    """Radial law ``sigma = mu(|eps|) eps``.

    ``power-law``: ``mu(s) = mu0 (kappa + s)^(p-2)``.
    ``carreau-like``: ``mu(s) = mu0 (kappa + s^2)^((p-2)/2)``.
    A positive ``eta`` adds ``eta^r' |eps|^r' / r'`` to the potential.
    """

    p: float
    mu0: float = 1.0
    kappa: float = 0.0
    family: str = "power-law"
    eta: float = 0.0
    r_prime: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown law family {self.family!r}")
        if not self.p > 1:
            raise ValueError("p must exceed 1")
        if self.mu0 <= 0 or self.kappa < 0:
            raise ValueError("need mu0 > 0 and kappa >= 0")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.eta > 0 and (self.r_prime is None or self.r_prime <= max(self.p, 2.0)):
            raise ValueError("regularisation needs r' > max(p, 2)")

    @property
    def q(self):
        return self.p / (self.p - 1.0)

    @property
    def pure(self):
        return self.family == "power-law" and self.kappa == 0 and self.eta == 0

    # radial profile: potential, stress magnitude and its derivative
    def potential(self, s):
        p, mu, k = self.p, self.mu0, self.kappa
        s = np.asarray(s, dtype=float)
        if self.family == "power-law":
            if k == 0:
                w = mu * s ** p / p
            else:
                w = mu * (((k + s) ** p - k ** p) / p - k * ((k + s) ** (p - 1) - k ** (p - 1)) / (p - 1))
        else:
            w = mu * ((k + s * s) ** (p / 2) - k ** (p / 2)) / p
        if self.eta > 0:
            w = w + self.eta ** self.r_prime * s ** self.r_prime / self.r_prime
        return w

    def stress(self, s):
        p, mu, k = self.p, self.mu0, self.kappa
        s = np.asarray(s, dtype=float)
        if self.family == "power-law":
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(s > 0, mu * (k + s) ** (p - 2) * s, 0.0)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(s > 0, mu * (k + s * s) ** ((p - 2) / 2) * s, 0.0)
        if self.eta > 0:
            t = t + self.eta ** self.r_prime * s ** (self.r_prime - 1)
        return t

    def dstress(self, s):
        p, mu, k = self.p, self.mu0, self.kappa
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.family == "power-law":
                t = mu * (k + s) ** (p - 3) * (k + (p - 1) * s)
            else:
                t = mu * (k + s * s) ** ((p - 4) / 2) * (k + (p - 1) * s * s)
        if self.eta > 0:
            t = t + (self.r_prime - 1) * self.eta ** self.r_prime * s ** (self.r_prime - 2)
        return t

    def viscosity(self, s):
        """``mu(s) = stress(s) / s`` with the limit at 0 where finite."""
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, self.stress(s) / np.where(s > 0, s, 1.0), self.dstress(np.zeros_like(s)))

    def invert_stress(self, t, guess=None):
        """Magnitude ``s`` with ``stress(s) = t``."""
        t = np.asarray(t, dtype=float)
        power = (t / self.mu0) ** (1.0 / (self.p - 1.0))
        if self.pure:
            return power
        if guess is None:
            guess = power
        return radial_inverse(self.stress, self.dstress, t, guess)

    def describe(self):
        s = f"{self.family}:p={self.p:g},mu={self.mu0:g},kappa={self.kappa:g}"
        if self.eta > 0:
            s += f",eta={self.eta:g},r={self.r_prime:g}"
        return s


def parse_law(text):
    """Parse ``power:p=3,mu=1,kappa=0`` (or ``carreau:...``)."""
    fam, _, rest = text.partition(":")
    family = {"power": "power-law", "power-law": "power-law",
              "carreau": "carreau-like", "carreau-like": "carreau-like"}.get(fam.strip())
    if family is None:
        raise ValueError(f"unknown law family {fam!r}")
    kw = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        key = {"mu": "mu0", "mu0": "mu0", "p": "p", "kappa": "kappa", "eta": "eta",
               "r": "r_prime", "r_prime": "r_prime"}.get(key.strip())
        if key is None:
            raise ValueError(f"unknown law parameter in {item!r}")
        kw[key] = float(val)
    if "p" not in kw:
        raise ValueError("law needs p")
    return ConstitutiveLaw(family=family, **kw)


def _norm(v):
    return np.sqrt(np.sum(np.asarray(v, dtype=float) ** 2, axis=-1))


def W_eval(law, eps):
    return law.potential(_norm(eps))


def DW_eval(law, eps):
    return _scaled(law.stress, np.asarray(eps, dtype=float))


def _scaled(radial, v):
    """``radial(|v|) v / |v|`` with value 0 at ``v = 0``."""
    n = _norm(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(n > 0, radial(n) / np.where(n > 0, n, 1.0), 0.0)
    return fac[..., None] * v


def D2W_apply(law, eps, h, floor=0.0):
    """Hessian of ``W`` at ``eps`` applied to ``h``.

    ``floor`` bounds ``|eps|`` from below to tame singular laws (``p < 2``).
    """
    s = np.maximum(_norm(eps), floor)
    mu = law.viscosity(s)
    ds = law.dstress(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_hat = np.where(s[..., None] > 0, eps / np.where(s > 0, s, 1.0)[..., None], 0.0)
    proj = np.sum(e_hat * h, axis=-1)
    return mu[..., None] * h + ((ds - mu) * proj)[..., None] * e_hat


def conjugate_radial(law, t):
    """``W*`` as a function of ``|sigma|``."""
    t = np.asarray(t, dtype=float)
    if law.pure:
        return law.mu0 ** (1.0 - law.q) * t ** law.q / law.q
    s = law.invert_stress(t)
    return s * t - law.potential(s)


def conjugate_eval(law, sig):
    return conjugate_radial(law, _norm(sig))


def conjugate_gradient(law, sig):
    """``DW*(sigma)``, the inverse of ``DW``."""
    return _scaled(law.invert_stress, sig)


def conjugate_infconv(law, sig):
    """Regularised conjugate as an inf-convolution of ``W*`` with ``eta^-r |.|^r / r``.

    Used as an independent route to the radial conjugate of a regularised law.
    """
    base = replace(law, eta=0.0, r_prime=None)
    if law.eta == 0:
        return conjugate_eval(base, sig)
    r = law.r_prime / (law.r_prime - 1.0)
    out = []
    for t in np.atleast_1d(_norm(sig)).ravel():
        res = minimize_scalar(
            lambda u: float(conjugate_radial(base, u)) + law.eta ** (-r) * abs(t - u) ** r / r,
            bounds=(0.0, t), method="bounded", options={"xatol": 1e-13 * max(t, 1.0)})
        out.append(min(res.fun, float(conjugate_radial(base, 0.0)) + law.eta ** (-r) * t ** r / r,
                       float(conjugate_radial(base, t))))
    return np.array(out).reshape(np.shape(_norm(sig)))


def f_constitutive(law, eps, sig):
    """Fenchel-Young gap ``W(eps) + W*(sig) - eps . sig``, clipped at zero against roundoff."""
    eps = np.asarray(eps, dtype=float)
    sig = np.asarray(sig, dtype=float)
    val = W_eval(law, eps) + conjugate_eval(law, sig) - np.sum(eps * sig, axis=-1)
    return np.maximum(val, 0.0)


def regularize(law, eta, r_prime):
    """Law with potential ``W + eta^r' |eps|^r' / r'``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return replace(law, eta=float(eta), r_prime=float(r_prime))


# -- proximal maps (used by the variational solver) ----------------------------

def prox_potential(law, a, rho):
    """``argmin_e W(e) + rho/2 |e - a|^2``."""
    a = np.asarray(a, dtype=float)
    n = _norm(a)
    s = radial_inverse(lambda x: law.stress(x) + rho * x,
                       lambda x: law.dstress(x) + rho, rho * n, guess=n)
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(n > 0, s / np.where(n > 0, n, 1.0), 0.0)
    return fac[..., None] * a


def prox_conjugate(law, b, rho):
    """``argmin_s W*(s) + rho/2 |s - b|^2`` via the Moreau identity."""
    b = np.asarray(b, dtype=float)
    return b - prox_potential(law, rho * b, 1.0 / rho) / rho


# -- data sets -------------------------------------------------------------------

@dataclass
class DataSet:
    """Finite set of strain/stress pairs with a k-d tree over the joint points."""

    eps: np.ndarray
    sig: np.ndarray
    p: float = 2.0
    q: float | None = None
    _tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=float))
        self.sig = np.atleast_2d(np.asarray(self.sig, dtype=float))
        if self.eps.shape != self.sig.shape or len(self.eps) == 0:
            raise ValueError("data set needs matching, non-empty strain and stress arrays")
        if not np.all(np.isfinite(self.eps)) or not np.all(np.isfinite(self.sig)):
            raise ValueError("data set contains non-finite values")
        if self.q is None:
            self.q = self.p / (self.p - 1.0)
        self._tree = cKDTree(self.points)

    @property
    def m(self):
        return self.eps.shape[1]

    @property
    def points(self):
        return np.hstack([self.eps, self.sig])

    @property
    def tree(self):
        return self._tree

    def __len__(self):
        return len(self.eps)

    @classmethod
    def from_law(cls, law, eps):
        eps = np.asarray(eps, dtype=float)
        return cls(eps, DW_eval(law, eps), law.p, law.q)

    @classmethod
    def from_csv(cls, path, p, q=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: no data rows")
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
        if data.shape[1] % 2:
            raise ValueError(f"{path}: expected an even number of columns")
        m = data.shape[1] // 2
        return cls(data[:, :m], data[:, m:], p, q)

    def to_csv(self, path):
        m = self.m
        header = [f"eps{i}" for i in range(m)] + [f"sig{i}" for i in range(m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in self.points:
                w.writerow([repr(float(x)) for x in row])


def _dd_values(ds, eps, sig, idx):
    de = _norm(eps[:, None, :] - ds.eps[idx])
    dsg = _norm(sig[:, None, :] - ds.sig[idx])
    return de ** ds.p + dsg ** ds.q


def f_datadriven_scan(ds, eps, sig):
    """Reference implementation: linear scan over all data points."""
    eps = np.atleast_2d(eps)
    sig = np.atleast_2d(sig)
    vals = _norm(eps[:, None, :] - ds.eps[None]) ** ds.p + _norm(sig[:, None, :] - ds.sig[None]) ** ds.q
    return vals.min(axis=1), vals.argmin(axis=1)


def _exact_search(ds, z, cost, radius_of):
    """Minimise ``cost(rows, idx)`` over all data points with a growing k-d tree search.

    ``radius_of(best)`` must bound the joint distance of any point that could
    beat ``best``; rows whose k-th neighbour lies beyond that radius are settled.
    Returns ``(best, winning index)`` per row.
    """
    n = len(z)
    best = np.full(n, np.inf)
    arg = np.zeros(n, dtype=int)
    rows = np.arange(n)
    k = min(8, len(ds))
    while rows.size:
        if k >= len(ds):
            for chunk in np.array_split(rows, max(1, rows.size * len(ds) // 2_000_000)):
                idx = np.broadcast_to(np.arange(len(ds)), (chunk.size, len(ds)))
                vals = cost(chunk, idx)
                j = vals.argmin(axis=1)
                best[chunk] = vals[np.arange(chunk.size), j]
                arg[chunk] = j
            break
        dist, idx = ds.tree.query(z[rows], k=k)
        dist, idx = dist.reshape(rows.size, k), idx.reshape(rows.size, k)
        vals = cost(rows, idx)
        j = vals.argmin(axis=1)
        best[rows] = vals[np.arange(rows.size), j]
        arg[rows] = idx[np.arange(rows.size), j]
        open_ = dist[:, -1] <= radius_of(best[rows])
        rows = rows[open_]
        k = min(4 * k, len(ds))
    return best, arg


def datadriven_nearest(ds, eps, sig):
    """Exact minimiser index and value of ``|eps - eps_i|^p + |sig - sig_i|^q``.

    Any point beating a value ``f0`` lies within joint distance
    ``(f0^(2/p) + f0^(2/q))^(1/2)``, which bounds the neighbour search.
    """
    shape = np.shape(eps)[:-1]
    eps = np.asarray(eps, dtype=float).reshape(-1, ds.m)
    sig = np.asarray(sig, dtype=float).reshape(-1, ds.m)
    z = np.hstack([eps, sig])
    best, arg = _exact_search(
        ds, z, lambda r, idx: _dd_values(ds, eps[r], sig[r], idx),
        lambda f0: np.sqrt(f0 ** (2 / ds.p) + f0 ** (2 / ds.q)) * (1 + 1e-12))
    return best.reshape(shape), arg.reshape(shape)


def f_datadriven(ds, eps, sig):
    return datadriven_nearest(ds, eps, sig)[0]


def _prox_power(v, c, e, rho):
    """``argmin_x c |x|^e + rho/2 |x - v|^2`` (radial)."""
    n = _norm(v)
    s = radial_inverse(lambda x: c * e * x ** (e - 1) + rho * x,
                       lambda x: c * e * (e - 1) * x ** (e - 2) + rho, rho * n, guess=n)
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(n > 0, s / np.where(n > 0, n, 1.0), 0.0)
    return fac[..., None] * v


def prox_datadriven(ds, a, b, rho):
    """``argmin f_data(e, s) + rho/2 (|e - a|^2 + |s - b|^2)``, exact over all data points.

    Candidates are pruned with the k-d tree: a point at joint distance ``D``
    costs at least ``min(rho D^2 / 8, (D / (2 sqrt 2))^p, (D / (2 sqrt 2))^q)``.
    """
    shape = np.shape(a)
    a = np.asarray(a, dtype=float).reshape(-1, ds.m)
    b = np.asarray(b, dtype=float).reshape(-1, ds.m)
    z = np.hstack([a, b])

    def evaluate(rows, cand):
        ea = a[rows, None, :] - ds.eps[cand]
        sb = b[rows, None, :] - ds.sig[cand]
        pe = _prox_power(ea, 1.0, ds.p, rho)
        ps = _prox_power(sb, 1.0, ds.q, rho)
        val = (_norm(pe) ** ds.p + _norm(ps) ** ds.q
               + 0.5 * rho * (_norm(pe - ea) ** 2 + _norm(ps - sb) ** 2))
        return val, ds.eps[cand] + pe, ds.sig[cand] + ps

    c = 2 * np.sqrt(2)
    _, arg = _exact_search(
        ds, z, lambda r, idx: evaluate(r, idx)[0],
        lambda f0: np.maximum.reduce([np.sqrt(8 * f0 / rho), c * f0 ** (1 / ds.p),
                                      c * f0 ** (1 / ds.q)]) * (1 + 1e-12))
    rows = np.arange(len(z))
    _, pe, ps = evaluate(rows, arg[:, None])
    e_out, s_out = pe[:, 0], ps[:, 0]
    return e_out.reshape(shape), s_out.reshape(shape)


# -- integrand objects -----------------------------------------------------------

@dataclass
class Integrand:
    """Non-negative pointwise integrand with optional structure for solvers.

    ``fn`` and ``grad`` take channel-last ``(eps, sig)``.  ``prox`` (when
    present) is the proximal map of ``fn + bilinear * eps . sig``'s
    separable part, with ``bilinear`` the coefficient of the remaining
    ``eps . sig`` term (-1 for constitutive gaps, 0 otherwise).
    """

    fn: Callable
    m: int | None = None
    p: float = 2.0
    q: float = 2.0
    grad: Callable | None = None
    prox: Callable | None = None
    bilinear: float = 0.0
    C1: float | None = None
    coercivity: tuple | None = None
    provenance: str = "custom"
    law: ConstitutiveLaw | None = None
    data: DataSet | None = None
    name: str = ""

    def __call__(self, eps, sig):
        return self.fn(np.asarray(eps, dtype=float), np.asarray(sig, dtype=float))


def constitutive_integrand(law, m=None):
    def grad(eps, sig):
        return DW_eval(law, eps) - sig, conjugate_gradient(law, sig) - eps

    def prox(a, b, rho):
        return prox_potential(law, a, rho), prox_conjugate(law, b, rho)

    coerc = None
    c1 = None
    if law.pure:
        a, b = law.mu0 / law.p, law.mu0 ** (1 - law.q) / law.q
        coerc = (min(a, b) / 2.0, 0.0, 1.0)
        c1 = max(a + 1 / law.p, b + 1 / law.q)
    return Integrand(lambda e, s: f_constitutive(law, e, s), m, law.p, law.q, grad, prox, -1.0,
                     c1, coerc, "constitutive", law=law, name=law.describe())


def datadriven_integrand(ds):
    def grad(eps, sig):
        _, i = datadriven_nearest(ds, eps, sig)
        de = eps - ds.eps[i]
        dsg = sig - ds.sig[i]
        ne, ns = _norm(de), _norm(dsg)
        with np.errstate(divide="ignore", invalid="ignore"):
            ge = np.where(ne[..., None] > 0, ds.p * ne[..., None] ** (ds.p - 2) * de, 0.0)
            gs = np.where(ns[..., None] > 0, ds.q * ns[..., None] ** (ds.q - 2) * dsg, 0.0)
        return ge, gs

    e0 = np.linalg.norm(ds.eps[0]) ** ds.p + np.linalg.norm(ds.sig[0]) ** ds.q
    c1 = max(2 ** (ds.p - 1), 2 ** (ds.q - 1)) * (1 + e0)
    return Integrand(lambda e, s: f_datadriven(ds, e, s), ds.m, ds.p, ds.q, grad,
                     lambda a, b, rho: prox_datadriven(ds, a, b, rho), 0.0, c1, None,
                     "data-driven", data=ds, name=f"data[{len(ds)}]")


# -- coercivity ----------------------------------------------------------------

@dataclass
class Certificate:
    passed: bool
    constants: dict
    witness: tuple | None = None
    margin: float = 0.0


def coercivity_audit(ds=None, integrand=None, C_A=None, C_B=None, constants=None,
                     radius=10.0, n_samples=10_000, seed=0, m=2):
    """Check (or search) coercivity constants.

    Data case: every point must satisfy ``C_A eps.sig + C_B > |eps|^p + |sig|^q``;
    with ``C_B=None`` the smallest admissible ``C_B`` is returned for each
    ``C_A`` in the given list.  Integrand case: samples the ball of radius
    ``radius`` and checks ``f >= C2 (|eps|^p + |sig|^q) - C3 - C4 eps.sig``.
    """
    if ds is not None:
        growth = _norm(ds.eps) ** ds.p + _norm(ds.sig) ** ds.q
        dot = np.sum(ds.eps * ds.sig, axis=1)
        if C_B is None:
            grid = np.atleast_1d(C_A if C_A is not None else np.linspace(0.5, 4.0, 8))
            best = {float(ca): float(np.max(growth - ca * dot)) for ca in grid}
            return Certificate(True, {"C_B_min": best})
        slack = C_A * dot + C_B - growth
        i = int(np.argmin(slack))
        ok = bool(slack[i] > 0)
        return Certificate(ok, {"C_A": C_A, "C_B": C_B}, None if ok else (ds.eps[i], ds.sig[i]),
                           float(slack[i]))
    if integrand is None:
        raise ValueError("need a data set or an integrand")
    C2, C3, C4 = constants if constants is not None else integrand.coercivity
    rng = np.random.default_rng(seed)
    m = integrand.m or m
    dirs = rng.standard_normal((n_samples, 2 * m))
    dirs /= _norm(dirs)[:, None]
    pts = dirs * radius * rng.uniform(0, 1, n_samples)[:, None] ** (1 / (2 * m))
    e, s = pts[:, :m], pts[:, m:]
    lhs = integrand(e, s)
    rhs = C2 * (_norm(e) ** integrand.p + _norm(s) ** integrand.q) - C3 - C4 * np.sum(e * s, axis=1)
    slack = lhs - rhs
    i = int(np.argmin(slack))
    ok = bool(slack[i] >= -1e-12 * (1 + abs(lhs[i])))
    return Certificate(ok, {"C2": C2, "C3": C3, "C4": C4}, None if ok else (e[i], s[i]),
                       float(slack[i]))


# -- envelope -------------------------------------------------------------------

@dataclass
class EnvelopeResult:
    value: float
    base_value: float
    converged: bool
    evaluations: int
    best: np.ndarray | None = None
    history: list = field(default_factory=list)


def envelope_estimate(f, pair, eps_hat, sig_hat, grid, R=np.inf, budget=400, seed=0,
                      cutoff=None, starts=2, penalty=1e3, init=None, laminates=True):
    """Upper bound for the A-quasiconvex envelope of ``f`` at ``(eps_hat, sig_hat)``.

    Minimises the mean of ``f(z + w)`` over zero-mean A-free ``w`` supported
    on modes with ``|xi|_inf <= cutoff``, with a quadratic hinge penalising
    ``|w| > R``.  A plane-wave (laminate) search seeds a full-space L-BFGS
    refinement, with extra random starts; the best value found is returned,
    so the result never exceeds ``f(z)``.  Integrands without a gradient
    only get the laminate stage (derivative-free).
    """
    m = pair.m
    eps_hat = np.asarray(eps_hat, dtype=float)
    sig_hat = np.asarray(sig_hat, dtype=float)
    z = np.concatenate([eps_hat, sig_hat])
    base = float(f(eps_hat, sig_hat))
    cutoff = min(grid.Nt, grid.Nx) // 2 - 1 if cutoff is None else cutoff
    proj = KernelProjector(pair, grid, cutoff)
    shape = (2 * m,) + grid.shape
    scale = 1.0 + abs(base)
    grad_fn = f.grad if isinstance(f, Integrand) else None

    def objective(vflat, project=True):
        w = proj(vflat.reshape(shape)) if project else vflat.reshape(shape)
        pts = np.moveaxis(w, 0, -1) + z
        e, s = pts[..., :m], pts[..., m:]
        vals = f(e, s)
        mag = _norm(np.moveaxis(w, 0, -1))
        over = np.maximum(mag - R, 0.0) if np.isfinite(R) else np.zeros_like(mag)
        obj = float(np.mean(vals) + penalty * scale * np.mean(over ** 2))
        if grad_fn is None:
            return obj, None
        ge, gs = grad_fn(e, s)
        g = np.moveaxis(np.concatenate([ge, gs], axis=-1), -1, 0) / vals.size
        with np.errstate(divide="ignore", invalid="ignore"):
            hinge = np.where(mag > 0, 2 * penalty * scale * over / np.where(mag > 0, mag, 1.0), 0.0)
        g = g + hinge * w / vals.size
        return obj, (proj(g) if project else g).ravel()

    rng = np.random.default_rng(seed)
    best_val, best_w, history, evals, converged = base, np.zeros(shape), [base], 0, True

    def consider(val, w):
        nonlocal best_val, best_w
        history.append(val)
        if val < best_val:
            best_val, best_w = val, w

    if init is not None:
        w0 = proj(np.asarray(init, dtype=float).reshape(shape))
        consider(objective(w0.ravel())[0], w0)
    if laminates:
        val, w, n = _laminate_search(objective, pair, grid, proj.mask, shape, z, R, rng,
                                     budget, grad_fn is not None)
        evals += n
        consider(val, w)
    if grad_fn is None:
        return EnvelopeResult(best_val, base, converged, evals, best_w, history)

    amp = 0.5 * (1.0 + np.linalg.norm(z))
    if np.isfinite(R):
        amp = min(amp, R)
    inits = [best_w]
    for _ in range(max(starts - 1, 0)):
        w = proj(rng.standard_normal(shape))
        nrm = np.max(_norm(np.moveaxis(w, 0, -1)))
        inits.append(w * (amp / nrm if nrm > 0 else 0.0))
    per_start = max(budget // len(inits), 10)
    for v0 in inits:
        res = minimize(objective, v0.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxfun": per_start, "maxiter": per_start, "ftol": 1e-15, "gtol": 1e-13})
        evals += int(res.nfev)
        converged &= bool(res.success) or res.nit == 0
        consider(float(res.fun), proj(res.x.reshape(shape)))
    return EnvelopeResult(best_val, base, converged, evals, best_w, history)


def _laminate_search(objective, pair, grid, mask, shape, z, R, rng, budget, smooth, keep=4):
    """Best single-mode (plane wave) A-free oscillation.

    For each lattice frequency in the band, optimises the complex amplitude
    of ``Re(B c exp(2 pi i xi . x))`` with ``B`` a kernel basis of the
    symbol; the ``keep`` best modes are refined further.
    """
    from .symbols import kernel_basis
    idx = np.argwhere(mask)
    ft, fx = grid.int_freqs_t, grid.int_freqs_x
    # one representative per +/- pair
    seen, reps = set(), []
    for i in idx:
        key = (int(ft[i[0]]),) + tuple(int(fx[j]) for j in i[1:])
        if tuple(-k for k in key) in seen:
            continue
        seen.add(key)
        reps.append(i)
    reps = np.array(reps)
    xi = grid.lattice[tuple(reps.T)]
    basis = kernel_basis(pair, xi)
    pts = grid.points()
    n_modes = len(reps)
    m2 = shape[0]
    amp = 0.5 * (1.0 + np.linalg.norm(z))
    if np.isfinite(R):
        amp = min(amp, R)
    evals = 0

    def generators(j):
        key = [ft[reps[j][0]] / grid.T] + [fx[k] for k in reps[j][1:]]
        phase = np.exp(2j * np.pi * sum(kk * pp for kk, pp in zip(key, pts)))
        bw = basis[j][:, :, None] * phase.ravel()[None, None]
        gens = np.concatenate([bw.real, -bw.imag], axis=1)
        return np.moveaxis(gens, 1, 0).reshape((-1,) + shape)

    def fit(gens, c0, maxfun):
        nonlocal evals
        flat = gens.reshape(len(gens), -1)

        def obj(c):
            # generators lie in the kernel already, so no projection is needed
            val, g = objective(c @ flat, project=False)
            return (val, flat @ g) if smooth else val

        if smooth:
            res = minimize(obj, c0, jac=True, method="L-BFGS-B",
                           options={"maxfun": maxfun, "ftol": 1e-15, "gtol": 1e-13})
        else:
            res = minimize(obj, c0, method="Powell", options={"maxfev": maxfun})
        evals += int(res.nfev)
        return float(res.fun), res.x

    scored = []
    for j in range(n_modes):
        gens = generators(j)
        peak = np.max(np.abs(gens.reshape(len(gens), m2, -1)).sum(axis=0))
        best = (np.inf, None)
        for _ in range(2):
            c0 = rng.standard_normal(len(gens)) * amp / max(peak, 1e-300)
            best = min(best, fit(gens, c0, 60), key=lambda t: t[0])
        scored.append((best[0], j, best[1]))
    scored.sort(key=lambda t: t[0])
    top_val, top_w = np.inf, np.zeros(shape)
    for val, j, c in scored[:keep]:
        gens = generators(j)
        val, c = fit(gens, c, max(budget // keep, 50))
        if val < top_val:
            top_val, top_w = val, np.tensordot(c, gens, axes=1)
    return top_val, top_w, evals


def envelope_scan(f, pair, eps_hat, sig_hat, grid, radii, **kw):
    """Envelope estimates for increasing ``R``, each warm-started from the previous optimum."""
    out, init = [], None
    for R in sorted(radii):
        res = envelope_estimate(f, pair, eps_hat, sig_hat, grid, R=R, init=init, **kw)
        if out and res.value > out[-1].value:
            res = replace(res, value=out[-1].value, best=out[-1].best)
        out.append(res)
        init = res.best
    return out
