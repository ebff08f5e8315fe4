import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree.grid import SpaceTimeField, make_grid, random_field
from afree.multipliers import (CutoffProfile, DecompositionError, apply_multiplier,
                               minimal_decomposition, neg_norm, sobolev_norm, split_spacetime,
                               splitter_weight, surrogate_norm, tensor_symbol)
from afree.multipliers import _Constraint


def test_cutoff_profile_shape():
    phi = CutoffProfile()
    x = np.linspace(0, 2, 201)
    v = phi(x)
    assert np.all(v[x <= 1 / 3] == 0) and np.all(v[x >= 2 / 3] == 1)
    assert np.all(np.diff(v) >= 0)


def test_sobolev_norm_single_mode():
    g = make_grid(2, 8, 8, T=1.0)
    t, x, y = g.points()
    f = SpaceTimeField(g, np.cos(2 * np.pi * (2 * t + x + 3 * y)))
    w = (1 + 4) ** (1.0 / 2) * (1 + 10) ** (-1.0 / 2)
    # two conjugate modes with coefficient 1/2 each
    assert sobolev_norm(f, 1.0, -1.0) == pytest.approx(w * np.sqrt(0.5), rel=1e-12)


def test_apply_multiplier_identity_and_derivative():
    g = make_grid(2, 8, 8)
    t, x, y = g.points()
    f = SpaceTimeField(g, np.sin(2 * np.pi * (t + 2 * x)))
    same = apply_multiplier(f, lambda L: np.ones(L.shape[:-1]), at_zero=1.0)
    assert np.allclose(same.values, f.values)
    dx = apply_multiplier(f, lambda L: 2j * np.pi * L[..., 1])
    assert np.allclose(dx.values, 4 * np.pi * np.cos(2 * np.pi * (t + 2 * x)), atol=1e-12)


@given(seed=st.integers(0, 10 ** 6), gamma=st.sampled_from([1.0, 2.0, 4.0]))
def test_split_reconstructs(seed, gamma):
    g = make_grid(2, 8, 8)
    f = random_field(g, 3, np.random.default_rng(seed))
    parts = split_spacetime(f, gamma)
    rebuilt = parts.temporal.values + parts.spatial.values + parts.mean.real.reshape(3, 1, 1, 1)
    assert np.max(np.abs(rebuilt - f.values)) <= 1e-12 * np.max(np.abs(f.values))


def test_splitter_weight_limits():
    g = make_grid(2, 16, 16)
    w = splitter_weight(g, 2)
    assert w[(0, 0, 0)] == 0
    # pure time frequencies are time dominated, pure space ones are not
    assert w[5, 0, 0] == 1.0 and w[0, 5, 0] == 0.0


def _single_mode_chi(g, m=2):
    t, x, y = g.points()
    vals = np.stack([np.cos(2 * np.pi * (t / g.T + x - 2 * y)), np.sin(2 * np.pi * (2 * t / g.T + y))])
    return SpaceTimeField(g, vals[:m])


@pytest.mark.parametrize("k", [1, 2])
def test_closed_form_matches_pinv_oracle(k):
    g = make_grid(2, 8, 8, T=0.7)
    chi = _single_mode_chi(g)
    dec = minimal_decomposition(chi, 2.0, 2.0, k)
    con = _Constraint(g, 2, k)
    gs = tensor_symbol(g, k)
    for idx in [(1, 1, -2), (2, 0, 1)]:
        it, ix, iy = (i % n for i, n in zip(idx, g.shape))
        row = np.concatenate([[2j * np.pi * g.xi_t[it]], gs[:, ix, iy]])[None]
        for c in range(2):
            target = chi.spectrum[c, it, ix, iy]
            sol = np.linalg.pinv(row) @ np.array([target])
            assert dec.eps.spectrum[c, it, ix, iy] == pytest.approx(sol[0], abs=1e-12)
    assert con.reach.sum() > 0
    assert dec.residual < 1e-12


def test_nonquadratic_decomposition_improves_and_reconstructs():
    g = make_grid(2, 8, 8)
    chi = random_field(g, 2, np.random.default_rng(5), zero_mean=True)
    base = minimal_decomposition(chi, 2.0, 2.0)
    dec = minimal_decomposition(chi, 3.0, 1.5)
    assert dec.residual < 1e-8
    assert dec.norm <= surrogate_norm(base.eps.values, base.sigma.values, 3.0, 1.5) + 1e-12


def test_decomposition_rejects_unreachable_content():
    g = make_grid(2, 8, 8)
    chi = SpaceTimeField(g, np.ones((1,) + g.shape))
    # the mean is dropped, so a constant is fine; a Nyquist-only signal is not reachable
    assert minimal_decomposition(chi).norm == 0.0
    t, x, y = g.points()
    nyq = SpaceTimeField(g, np.cos(np.pi * 8 * x))
    with pytest.raises(DecompositionError):
        minimal_decomposition(nyq)


@given(seed=st.integers(0, 10 ** 6), lam=st.floats(0.1, 10.0))
def test_neg_norm_homogeneous(seed, lam):
    g = make_grid(2, 8, 8)
    chi = random_field(g, 2, np.random.default_rng(seed))
    a = neg_norm(chi)
    b = neg_norm(chi * lam)
    assert b == pytest.approx(lam * a, rel=1e-10)
