"""Fourier symbols of constant-rank operators and the parabolic operator.

A differential operator ``sum_alpha Q_alpha d^alpha`` has symbol
``sum_alpha (2 pi i)^|alpha| Q_alpha xi^alpha``.  Adjoints are formal
adjoints without sign change, so the adjoint symbol is the plain transpose.

Symmetric trace-free matrices are stored in an orthonormal coordinate
basis (see :func:`sym0_basis`), so ``m = 2`` for ``d = 2`` and ``m = 5``
for ``d = 3``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

TWO_PI_I = 2j * np.pi
RANK_TOL = 1e-8

KINDS = ("spatial-homogeneous", "parabolic", "pseudo")


class SymbolError(ValueError):
    """Bad operator specification or dimension mismatch."""


class KernelDimensionError(RuntimeError):
    """The symbol kernel does not have the expected dimension."""


# -- symmetric matrices ------------------------------------------------------

def sym0_basis(d):
    """Orthonormal basis of symmetric trace-free ``d x d`` matrices."""
    mats = []
    for i in range(d - 1):
        # Gram-Schmidt-free diagonal family: e_0..e_i minus (i+1) e_{i+1}
        diag = np.zeros(d)
        diag[: i + 1] = 1.0
        diag[i + 1] = -(i + 1)
        mats.append(np.diag(diag / np.linalg.norm(diag)))
    for i, j in itertools.combinations(range(d), 2):
        e = np.zeros((d, d))
        e[i, j] = e[j, i] = 1.0 / np.sqrt(2.0)
        mats.append(e)
    return np.array(mats)


def sym_basis(d):
    """Orthonormal basis of all symmetric matrices: trace-free part plus identity."""
    return np.concatenate([sym0_basis(d), np.eye(d)[None] / np.sqrt(d)])


def embed(coords, d, basis=None):
    """Coordinates ``(m, ...)`` to matrices ``(d, d, ...)``."""
    basis = sym0_basis(d) if basis is None else basis
    return np.einsum("aij,a...->ij...", basis, coords)


def extract(mats, d, basis=None):
    """Matrices ``(d, d, ...)`` to coordinates ``(m, ...)`` via the Frobenius product."""
    basis = sym0_basis(d) if basis is None else basis
    return np.einsum("aij,ij...->a...", basis, mats)


def curl_pairs(d):
    return list(itertools.combinations(range(d), 2))


# -- operator specs ----------------------------------------------------------

@dataclass
class OperatorSpec:
    """Constant-coefficient (pseudo-)differential operator.

    ``coeffs`` maps multi-indices to real ``(n_out, n_in)`` matrices.  For
    the pseudo kind, ``symbol_fn`` maps ``xi`` of shape ``(..., dim)`` to
    ``(..., n_out, n_in)`` and ``coeffs`` is empty.
    """

    kind: str
    order: int
    channels: tuple
    coeffs: dict = field(default_factory=dict)
    symbol_fn: Callable | None = None
    dim: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SymbolError(f"unknown operator kind {self.kind!r}")
        self.channels = tuple(int(c) for c in self.channels)
        n_in, n_out = self.channels
        clean = {}
        for alpha, mat in self.coeffs.items():
            alpha = tuple(int(a) for a in alpha)
            mat = np.asarray(mat, dtype=float).reshape(n_out, n_in)
            if self.dim is None:
                self.dim = len(alpha)
            if len(alpha) != self.dim:
                raise SymbolError("multi-indices of different lengths")
            if self.kind == "spatial-homogeneous" and sum(alpha) != self.order:
                raise SymbolError(f"|alpha|={sum(alpha)} differs from order {self.order}")
            clean[alpha] = clean.get(alpha, 0.0) + mat
        self.coeffs = clean
        if self.kind == "pseudo" and self.symbol_fn is None:
            raise SymbolError("pseudo operators need a symbol function")
        if self.kind != "pseudo" and not self.coeffs:
            raise SymbolError("differential operators need coefficients")

    @property
    def n_in(self):
        return self.channels[0]

    @property
    def n_out(self):
        return self.channels[1]

    def adjoint(self):
        """Formal adjoint: coefficients transposed, no sign change."""
        if self.kind == "pseudo":
            fn = self.symbol_fn
            return OperatorSpec("pseudo", self.order, self.channels[::-1],
                                symbol_fn=lambda xi: np.swapaxes(fn(xi), -1, -2),
                                dim=self.dim, name=f"{self.name}*")
        return OperatorSpec(self.kind, self.order, self.channels[::-1],
                            {a: m.T for a, m in self.coeffs.items()},
                            dim=self.dim, name=f"{self.name}*")

    def to_json(self):
        if self.kind == "pseudo":
            raise SymbolError("pseudo operators have no coefficient form")
        return {"kind": self.kind, "order": self.order, "channels": list(self.channels),
                "coeffs": [{"alpha": list(a), "matrix": m.tolist()}
                           for a, m in sorted(self.coeffs.items())]}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        try:
            coeffs = {tuple(c["alpha"]): c["matrix"] for c in obj["coeffs"]}
            return cls(obj["kind"], int(obj["order"]), tuple(obj["channels"]), coeffs)
        except (KeyError, TypeError) as exc:
            raise SymbolError(f"malformed operator JSON: {exc}") from exc


def compose(a, b):
    """Coefficients of ``a o b`` for differential operators."""
    if a.n_in != b.n_out:
        raise SymbolError("channel mismatch in composition")
    coeffs = {}
    for (al, ma), (be, mb) in itertools.product(a.coeffs.items(), b.coeffs.items()):
        g = tuple(x + y for x, y in zip(al, be))
        coeffs[g] = coeffs.get(g, 0.0) + ma @ mb
    kind = "spatial-homogeneous" if a.kind == b.kind == "spatial-homogeneous" else "parabolic"
    return OperatorSpec(kind, a.order + b.order, (b.n_in, a.n_out), coeffs)


def add(a, b, scale_b=1.0):
    if a.channels != b.channels:
        raise SymbolError("channel mismatch in sum")
    coeffs = {k: v.copy() for k, v in a.coeffs.items()}
    for k, v in b.coeffs.items():
        coeffs[k] = coeffs.get(k, 0.0) + scale_b * v
    return OperatorSpec(a.kind, a.order, a.channels, coeffs)


def eval_symbol(op, xi):
    """Symbol of ``op`` at ``xi`` of shape ``(..., dim)``; returns ``(..., n_out, n_in)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != op.dim:
        raise SymbolError(f"frequency has {xi.shape[-1]} components, operator expects {op.dim}")
    if op.kind == "pseudo":
        return np.asarray(op.symbol_fn(xi), dtype=complex)
    out = np.zeros(xi.shape[:-1] + (op.n_out, op.n_in), dtype=complex)
    for alpha, mat in op.coeffs.items():
        mono = np.prod(xi ** np.array(alpha), axis=-1)
        out += np.asarray(TWO_PI_I ** sum(alpha) * mono)[..., None, None] * mat
    return out


# -- linear algebra ----------------------------------------------------------

def moore_penrose(matrix, tol=1e-10):
    """Pseudo-inverse, batched over leading axes.

    Singular values below ``tol`` times the largest one are treated as
    zero; an all-zero matrix maps to the zero matrix.
    """
    a = np.asarray(matrix)
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    smax = s[..., :1] if s.shape[-1] else s
    keep = (s > tol * smax) & (s > 0)
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.einsum("...ji,...j,...kj->...ik", vh.conj(), inv, u.conj())


def numerical_rank(matrix, tol=RANK_TOL):
    s = np.linalg.svd(np.asarray(matrix), compute_uv=False)
    if s.shape[-1] == 0:
        return np.zeros(s.shape[:-1], dtype=int)
    return np.sum(s > tol * np.maximum(s[..., :1], np.finfo(float).tiny), axis=-1)


def null_space(matrix, dim=None, tol=RANK_TOL):
    """Orthonormal null-space basis ``(..., n, r)``; batched when ``dim`` is given."""
    a = np.asarray(matrix)
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    n = a.shape[-1]
    if dim is None:
        rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
        dim = n - rank
    return np.swapaxes(vh[..., n - dim:, :], -1, -2).conj()


def image_space(matrix, tol=RANK_TOL):
    u, s, _ = np.linalg.svd(np.asarray(matrix), full_matrices=True)
    rank = int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
    return u[:, :rank]


def subspace_distance(basis_a, basis_b):
    """Spectral norm of the difference of orthogonal projectors."""
    pa = basis_a @ basis_a.conj().T
    pb = basis_b @ basis_b.conj().T
    return float(np.linalg.norm(pa - pb, 2)) if pa.size else 0.0


def sample_directions(dim, n_samples, seed=0):
    """Unit vectors: random ones plus all coordinate axes and diagonals."""
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((n_samples, dim))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    extra = [np.eye(dim)]
    for signs in itertools.product((1.0, -1.0), repeat=dim - 1):
        v = np.concatenate([[1.0], signs])
        extra.append((v / np.linalg.norm(v))[None])
    for i, j in itertools.combinations(range(dim), 2):
        for s in (1.0, -1.0):
            v = np.zeros(dim)
            v[i], v[j] = 1.0, s
            extra.append((v / np.sqrt(2))[None])
    return np.concatenate([rand] + extra)


@dataclass
class RankReport:
    rank: int
    passed: bool
    witness: np.ndarray | None = None
    n_samples: int = 0


def constant_rank_check(op, n_samples=256, seed=0):
    """Sampled test that the symbol rank is the same for every ``xi != 0``."""
    xis = sample_directions(op.dim, n_samples, seed)
    ranks = numerical_rank(eval_symbol(op, xis))
    r = int(np.bincount(ranks).argmax())
    bad = np.flatnonzero(ranks != r)
    return RankReport(r, bad.size == 0, xis[bad[0]] if bad.size else None, len(xis))


@dataclass
class PotentialReport:
    passed: bool
    max_distance: float
    witness: np.ndarray | None = None


def potential_check(P, Q, n_samples=256, seed=0, tol=1e-8):
    """Sampled test of ``Image P[xi] = ker Q[xi]``."""
    if P.n_out != Q.n_in:
        raise SymbolError("potential output does not match annihilator input")
    worst, witness = 0.0, None
    for xi in sample_directions(Q.dim, n_samples, seed):
        dist = subspace_distance(image_space(eval_symbol(P, xi)),
                                 null_space(eval_symbol(Q, xi)))
        if dist > worst:
            worst, witness = dist, xi
    return PotentialReport(worst <= tol, worst, witness if worst > tol else None)


def spanning_check(Pstar, n_samples=64, seed=0):
    """Diagnostic: do the kernels of ``Pstar[xi]`` span the input space?"""
    vecs = [null_space(eval_symbol(Pstar, xi)) for xi in sample_directions(Pstar.dim, n_samples, seed)]
    stacked = np.concatenate(vecs, axis=1)
    return numerical_rank(stacked) == Pstar.n_in


# -- parabolic pairs ---------------------------------------------------------

@dataclass
class ParabolicPair:
    """Spatial blocks of the parabolic operator.

    ``Q`` has order ``k``; ``Pstar`` annihilates the image of ``Q*``.  In
    the pseudo (incompressible) case ``S`` is the side constraint, ``R`` its
    potential and ``Ptilde_star`` the annihilator used in place of ``Pstar``.
    """

    Q: OperatorSpec
    Pstar: OperatorSpec
    S: OperatorSpec | None = None
    R: OperatorSpec | None = None
    Ptilde_star: OperatorSpec | None = None
    name: str = ""

    def __post_init__(self):
        if self.Q.kind == "parabolic":
            raise SymbolError("Q must be a spatial operator")

    @property
    def d(self):
        return self.Q.dim

    @property
    def m(self):
        return self.Q.n_in

    @property
    def k(self):
        return self.Q.order

    @property
    def pseudo(self):
        return self.S is not None

    @cached_property
    def Qstar(self):
        return self.Q.adjoint()

    @property
    def annihilator(self):
        return self.Ptilde_star if self.pseudo else self.Pstar

    @property
    def ell(self):
        return self.annihilator.n_out

    def leray_symbol(self, xi_x):
        """Projection onto ``ker S[xi_x]``; identity where ``S[xi_x] = 0``."""
        xi_x = np.asarray(xi_x, dtype=float)
        if not self.pseudo:
            n = self.Q.n_out
            return np.broadcast_to(np.eye(n), xi_x.shape[:-1] + (n, n)).astype(complex)
        s = eval_symbol(self.S, xi_x)
        s_star = np.swapaxes(s, -1, -2)
        inner = moore_penrose(s @ s_star)
        return np.eye(s.shape[-1]) - s_star @ inner @ s

    def M(self, xi_x):
        """Symbol of ``Q* Pi_S Q`` (``Q* Q`` in the plain case), shape ``(..., m, m)``."""
        q = eval_symbol(self.Q, xi_x)
        qs = np.swapaxes(q, -1, -2)
        if self.pseudo:
            return qs @ self.leray_symbol(xi_x) @ q
        return qs @ q

    def annihilator_symbol(self, xi_x):
        return eval_symbol(self.annihilator, xi_x)

    def to_json(self):
        out = {"Q": self.Q.to_json(), "Pstar": self.Pstar.to_json()}
        for key in ("S", "R", "Ptilde_star"):
            op = getattr(self, key)
            if op is not None:
                out[key] = op.to_json()
        return out


def parabolic_symbol(pair, xi):
    """Block symbol ``[[2 pi i xi_t Id, -M[xi_x]], [P*[xi_x], 0]]`` of shape ``(..., m+l, 2m)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != pair.d + 1:
        raise SymbolError(f"expected {pair.d + 1} frequency components")
    xi_t, xi_x = xi[..., 0], xi[..., 1:]
    m, ell = pair.m, pair.ell
    out = np.zeros(xi.shape[:-1] + (m + ell, 2 * m), dtype=complex)
    out[..., :m, :m] = (TWO_PI_I * xi_t)[..., None, None] * np.eye(m)
    out[..., :m, m:] = -pair.M(xi_x)
    out[..., m:, :m] = pair.annihilator_symbol(xi_x)
    return out


def kernel_basis(pair, xi, tol=RANK_TOL):
    """Orthonormal basis ``(..., 2m, m)`` of ``ker A[xi]``.

    Raises :class:`KernelDimensionError` if the numerical kernel dimension
    differs from ``m`` at any of the given frequencies.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(np.all(xi == 0, axis=-1)):
        raise SymbolError("kernel_basis needs xi != 0")
    a = parabolic_symbol(pair, xi)
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    n = 2 * pair.m
    sfull = np.zeros(s.shape[:-1] + (n,))
    sfull[..., : s.shape[-1]] = s
    rank = np.sum(sfull > tol * sfull[..., :1], axis=-1)
    if np.any(n - rank != pair.m):
        bad = np.argwhere(np.atleast_1d(n - rank != pair.m))[0]
        where = xi if xi.ndim == 1 else xi[tuple(bad)]
        raise KernelDimensionError(
            f"kernel dimension {int(np.atleast_1d(n - rank)[tuple(bad)])} != m={pair.m} at xi={where}")
    return np.swapaxes(vh[..., pair.m:, :], -1, -2).conj()


@dataclass
class ConeSample:
    """Real pair in the characteristic cone.

    For ``Lambda3`` the kernel element is ``(w1, i w2)``.
    """

    label: str
    xi: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def complex_pair(self):
        w2 = 1j * self.w2 if self.label == "Lambda3" else self.w2.astype(complex)
        return np.concatenate([self.w1.astype(complex), w2])

    def residual(self, pair):
        a = parabolic_symbol(pair, self.xi)
        v = self.complex_pair()
        return float(np.linalg.norm(a @ v) / max(np.linalg.norm(v), 1e-300))


LABELS = {"L1": "Lambda1", "L2": "Lambda2", "L3": "Lambda3"}


def _unit(rng, n):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def cone_sample(pair, label, rng, xi=None):
    """Random real element of Lambda1, Lambda2 or Lambda3."""
    label = LABELS.get(label, label)
    m, d = pair.m, pair.d
    if label == "Lambda2":
        xi = np.concatenate([[rng.uniform(0.5, 2.0) * rng.choice([-1, 1])], np.zeros(d)]) if xi is None else xi
        return ConeSample(label, np.asarray(xi, float), np.zeros(m), rng.standard_normal(m))
    if label == "Lambda1":
        xi = np.concatenate([[0.0], _unit(rng, d)]) if xi is None else np.asarray(xi, float)
        xi_x = xi[1:]
        ann = eval_symbol(pair.annihilator, xi_x)
        ker_e = null_space((ann / TWO_PI_I ** pair.annihilator.order).real)
        ker_s = null_space(pair.M(xi_x).real)
        w1 = ker_e @ rng.standard_normal(ker_e.shape[1])
        w2 = ker_s @ rng.standard_normal(ker_s.shape[1])
        return ConeSample(label, xi, w1.real, w2.real)
    if label == "Lambda3":
        if xi is None:
            xi = np.concatenate([[rng.uniform(0.5, 2.0) * rng.choice([-1, 1])], _unit(rng, d)])
        xi = np.asarray(xi, float)
        w2 = rng.standard_normal(m)
        w1 = (pair.M(xi[1:]).real @ w2) / (2 * np.pi * xi[0])
        return ConeSample(label, xi, w1, w2)
    raise SymbolError(f"unknown cone label {label!r}")


# -- builtins ----------------------------------------------------------------

def _e(d, j):
    a = [0] * d
    a[j] = 1
    return tuple(a)


def divergence(d):
    """div on R^d vector fields."""
    return OperatorSpec("spatial-homogeneous", 1, (d, 1),
                        {_e(d, j): np.eye(d)[j][None] for j in range(d)}, name="div")


def gradient(d):
    return OperatorSpec("spatial-homogeneous", 1, (1, d),
                        {_e(d, j): np.eye(d)[j][:, None] for j in range(d)}, name="grad")


def curl(d):
    """Antisymmetric-pair curl ``(d_i u_j - d_j u_i)_{i<j}``."""
    pairs = curl_pairs(d)
    coeffs = {}
    for j in range(d):
        mat = np.zeros((len(pairs), d))
        for r, (a, b) in enumerate(pairs):
            if j == a:
                mat[r, b] += 1.0
            if j == b:
                mat[r, a] -= 1.0
        coeffs[_e(d, j)] = mat
    return OperatorSpec("spatial-homogeneous", 1, (d, len(pairs)), coeffs, name="curl")


def sym_divergence(d):
    """div acting on symmetric trace-free matrices stored in coordinates."""
    basis = sym0_basis(d)
    coeffs = {_e(d, j): basis[:, :, j].T for j in range(d)}
    return OperatorSpec("spatial-homogeneous", 1, (len(basis), d), coeffs, name="div_sym0")


def symdev_gradient(d):
    return sym_divergence(d).adjoint()


def fluid_annihilator(d):
    """``Laplace - (grad + grad^T) div`` from sym0 coordinates to full symmetric coordinates."""
    b0, bs = sym0_basis(d), sym_basis(d)
    coeffs = {}
    for i, j in itertools.combinations_with_replacement(range(d), 2):
        alpha = tuple(np.add(_e(d, i), _e(d, j)))
        mat = np.zeros((len(bs), len(b0)))
        for a, E in enumerate(b0):
            if i == j:
                lap = E.copy()
                w = np.outer(E[:, i], np.eye(d)[i])
                outm = lap - w - w.T
            else:
                ei, ej = np.eye(d)[i], np.eye(d)[j]
                w = np.outer(E @ ei, ej) + np.outer(E @ ej, ei)
                outm = -(w + w.T)
            mat[:, a] = np.tensordot(bs, outm, axes=([1, 2], [0, 1]))
        coeffs[alpha] = mat
    return OperatorSpec("spatial-homogeneous", 2, (len(b0), len(bs)), coeffs, name="Ptilde*")


def builtin(name):
    """Named parabolic pairs: ``heat-d2``, ``heat-d3``, ``fluid-d2``, ``fluid-d3``."""
    try:
        family, dim = name.split("-d")
        d = int(dim)
    except ValueError:
        raise SymbolError(f"unknown builtin operator {name!r}") from None
    if d not in (2, 3) or family not in ("heat", "fluid"):
        raise SymbolError(f"unknown builtin operator {name!r}")
    if family == "heat":
        return ParabolicPair(divergence(d), curl(d), name=name)
    ann = fluid_annihilator(d)
    return ParabolicPair(sym_divergence(d), ann, S=divergence(d), R=curl(d).adjoint(),
                         Ptilde_star=ann, name=name)
