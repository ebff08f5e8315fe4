import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree.grid import SpaceTimeField, make_grid, mean, random_field
from afree.projections import (A_residual_norm, KernelProjector, apply_A, leray_project,
                               operator_residual_norm, project_kernel_isotropic,
                               project_parabolic_linear, project_parabolic_nonlinear)
from afree.symbols import builtin, curl, divergence, eval_symbol

PAIRS = ["fluid-d2", "heat-d2"]


def _field(pair, seed, Nt=8, Nx=8):
    g = make_grid(pair.d, Nt, Nx)
    return random_field(g, 2 * pair.m, np.random.default_rng(seed))


@given(seed=st.integers(0, 10 ** 6), name=st.sampled_from(PAIRS))
def test_linear_projection_contract(seed, name):
    pair = builtin(name)
    w = _field(pair, seed)
    pw = project_parabolic_linear(pair, w)
    assert A_residual_norm(pair, pw) <= 1e-9 * w.norm()
    ppw = project_parabolic_linear(pair, pw)
    assert np.max(np.abs(ppw.values - pw.values)) <= 1e-9 * w.norm()
    assert np.max(np.abs(mean(pw) - mean(w))) <= 1e-15 * w.norm()


@pytest.mark.parametrize("pq", [(2.0, 2.0), (3.0, 1.5)])
def test_nonlinear_projection_contract(pq):
    pair = builtin("fluid-d2")
    w = _field(pair, 7)
    res = project_parabolic_nonlinear(pair, w, *pq, return_info=True)
    pw = res.field
    assert A_residual_norm(pair, pw) <= 1e-9 * w.norm()
    assert np.max(np.abs(project_parabolic_nonlinear(pair, pw, *pq).values - pw.values)) <= 1e-9 * w.norm()
    assert np.max(np.abs(mean(pw) - mean(w))) <= 1e-15 * w.norm()
    assert (w - pw).norm() <= 50 * operator_residual_norm(pair, w, *pq)


def test_projection_fixes_kernel_fields():
    pair = builtin("heat-d2")
    w = project_parabolic_linear(pair, _field(pair, 3))
    again = project_parabolic_nonlinear(pair, w, 3.0, 1.5)
    assert np.allclose(again.values, w.values, atol=1e-10)


def test_heat_kernel_field_is_a_gradient_flow():
    # d_t eps = grad div sigma and curl eps = 0 for a single travelling mode
    pair = builtin("heat-d2")
    g = make_grid(2, 8, 8)
    t, x, y = g.points()
    ph = 2 * np.pi * (t + x)
    eps = np.stack([2 * np.pi * np.cos(ph), 0 * ph])
    sig = np.stack([np.sin(ph), 0 * ph])
    w = SpaceTimeField(g, np.concatenate([eps, sig]))
    assert A_residual_norm(pair, w) < 1e-10
    assert np.allclose(project_parabolic_linear(pair, w).values, w.values, atol=1e-12)


def test_apply_A_channels():
    pair = builtin("fluid-d2")
    w = _field(pair, 1)
    out = apply_A(pair, w)
    assert out.m == pair.m + pair.ell
    with pytest.raises(ValueError):
        apply_A(pair, SpaceTimeField(w.grid, w.values[:3]))


@given(seed=st.integers(0, 10 ** 6))
def test_leray_projection(seed):
    g = make_grid(2, 4, 16)
    u = random_field(g, 2, np.random.default_rng(seed))
    pu = leray_project(u)
    div = eval_symbol(divergence(2), g.spatial_lattice)[None]
    d = np.einsum("...ij,j...->i...", div, pu.spectrum)
    assert np.max(np.abs(d)) < 1e-12
    assert np.allclose(leray_project(pu).values, pu.values, atol=1e-13)
    # orthogonal: the removed part is a gradient, hence orthogonal to pu
    assert abs(np.mean(np.sum((u.values - pu.values) * pu.values, axis=0))) < 1e-13


def test_isotropic_projection_curl_free():
    g = make_grid(2, 4, 8)
    u = random_field(g, 2, np.random.default_rng(2))
    pu = project_kernel_isotropic(u, curl(2))
    c = np.einsum("...ij,j...->i...", eval_symbol(curl(2), g.spatial_lattice)[None], pu.spectrum)
    assert np.max(np.abs(c)) < 1e-12


@pytest.mark.parametrize("name", ["fluid-d2", "heat-d2", "fluid-d3"])
def test_kernel_projector_symmetric_idempotent(name):
    pair = builtin(name)
    g = make_grid(pair.d, 4, 4) if pair.d == 3 else make_grid(2, 8, 8)
    rng = np.random.default_rng(0)
    P = KernelProjector(pair, g)
    a = rng.standard_normal((2 * pair.m,) + g.shape)
    b = rng.standard_normal((2 * pair.m,) + g.shape)
    pa = P(a)
    assert np.allclose(P(pa), pa, atol=1e-12)
    assert np.sum(pa * b) == pytest.approx(np.sum(a * P(b)), rel=1e-10)
    assert A_residual_norm(pair, SpaceTimeField(g, pa)) < 1e-10 * np.linalg.norm(a)
    assert np.allclose(pa.reshape(2 * pair.m, -1).mean(axis=1), 0.0, atol=1e-14)
