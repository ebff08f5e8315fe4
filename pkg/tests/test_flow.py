import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree.flow import (FlowError, SolveConfig, assemble_state, energy_report, forward_recursion,
                        I_value, leray_hopf_continuation, minimize_I, minimize_J, nonlinearity,
                        power_law_reference, recover_u_pi, residual_X, solve_regularized,
                        spatial_ops, taylor_green, taylor_green_amplitude, x5_margin)
from afree.grid import make_grid
from afree.integrands import (ConstitutiveLaw, DataSet, constitutive_integrand,
                              datadriven_integrand)


def test_taylor_green_decay_small_grid():
    mu = 0.05
    g = make_grid(2, 20, 16, T=0.1)
    state = solve_regularized(ConstitutiveLaw(2.0, mu0=mu), 0.0, taylor_green(g), g)
    # backward Euler with rate lam: (1 + dt lam)^-n; the convection of this mode is a gradient
    lam = 8 * np.pi ** 2 * mu / 2
    dt = g.T / g.Nt
    amps = np.array([taylor_green_amplitude(u) for u in state.u])
    assert np.allclose(amps, (1 + dt * lam) ** -np.arange(g.Nt + 1), rtol=1e-9)
    rep = residual_X(state)
    assert rep["in_X"], rep


def test_taylor_green_pressure():
    # for sigma = 0 the pressure balances the convection: pi = (cos 4 pi x + cos 4 pi y) / 4
    g = make_grid(2, 4, 32)
    ops = spatial_ops(2, 32)
    u = taylor_green(g)
    x, y = g.spatial_points()
    s = np.zeros((2, 32, 32))
    pi = ops.bwd(ops.pressure_hat(ops.fwd(s), ops.fwd(u)))
    assert np.max(np.abs(pi - 0.25 * (np.cos(4 * np.pi * x) + np.cos(4 * np.pi * y)))) < 1e-13


def test_taylor_green_nonlinearity_vanishes():
    g = make_grid(2, 4, 16)
    assert np.max(np.abs(nonlinearity(taylor_green(g)))) < 1e-12


@given(seed=st.integers(0, 10 ** 6), lam=st.floats(0.1, 5.0))
def test_nonlinearity_quadratic_and_mean_free(seed, lam):
    g = make_grid(2, 4, 8)
    ops = spatial_ops(2, 8)
    rng = np.random.default_rng(seed)
    u = ops.bwd(ops.clean(ops.leray_hat(ops.fwd(rng.standard_normal((2, 8, 8))))))
    th = nonlinearity(u)
    assert np.allclose(nonlinearity(lam * u), lam ** 2 * th, atol=1e-10 * (1 + lam ** 2))
    assert np.allclose(th.reshape(th.shape[0], -1).mean(axis=1), 0.0, atol=1e-12)


def test_convection_does_no_work():
    # dealiased products make int (u . grad u) . u vanish to roundoff
    ops = spatial_ops(2, 8)
    rng = np.random.default_rng(3)
    u = ops.bwd(ops.clean(ops.leray_hat(ops.fwd(rng.standard_normal((2, 8, 8))))))
    c = ops.bwd(ops.convection_hat(ops.fwd(u)))
    assert abs(np.mean(np.sum(c * u, axis=0))) < 1e-13


def test_recover_and_forward_recursion_agree():
    g = make_grid(2, 6, 8, T=0.1)
    st_ = solve_regularized(ConstitutiveLaw(3.0), 0.1, taylor_green(g, 0.5), g)
    u, pi = recover_u_pi(st_.eps, st_.sigma, st_.u0, g)
    assert np.allclose(u, st_.u, atol=1e-12)
    assert np.allclose(pi, st_.pi, atol=1e-10)
    eps, _ = forward_recursion(st_.sigma, st_.u0, g)
    assert np.allclose(eps, st_.eps, atol=1e-8)
    with pytest.raises(ValueError):
        recover_u_pi(st_.eps + 1.0, st_.sigma, st_.u0, g)


def test_rejects_compressible_initial_data():
    g = make_grid(2, 4, 8)
    x, y = g.spatial_points()
    u0 = np.stack([np.sin(2 * np.pi * x), 0 * x])
    with pytest.raises(ValueError):
        solve_regularized(ConstitutiveLaw(2.0), 0.0, u0, g)


def test_energy_residual_first_order():
    res = []
    for Nt in (20, 40):
        g = make_grid(2, Nt, 8, T=0.1)
        s = solve_regularized(ConstitutiveLaw(2.0), 0.0, taylor_green(g), g)
        res.append(np.max(np.abs(energy_report(s).balance_residual)))
    assert 1.7 <= res[0] / res[1] <= 2.3


def test_continuation_monotone_small():
    g = make_grid(2, 8, 8, T=0.1)
    out = leray_hopf_continuation(ConstitutiveLaw(2.5), taylor_green(g), g)
    assert out.monotone
    assert out.I_values[-1] <= 1e-3
    assert min(out.energy_margins) >= -1e-4
    with pytest.raises(ValueError):
        leray_hopf_continuation(ConstitutiveLaw(2.5), taylor_green(g), g, eta_schedule=(0.1, 0.2))


def test_minimize_I_not_worse_than_continuation():
    g = make_grid(2, 8, 8, T=0.1)
    law = ConstitutiveLaw(2.5)
    f = constitutive_integrand(law)
    cont = leray_hopf_continuation(law, taylor_green(g), g)
    res = minimize_I(f, taylor_green(g), g)
    assert res.value <= cont.I_values[-1] + 1e-10
    assert res.residuals["in_X"]


def test_zero_flow_with_zero_data_has_zero_cost():
    g = make_grid(2, 4, 8, T=0.1)
    ds = DataSet(np.zeros((1, 2)), np.zeros((1, 2)), 2.0)
    res = minimize_I(datadriven_integrand(ds), np.zeros((2, 8, 8)), g)
    assert res.value == 0.0
    assert np.all(res.state.u == 0.0)


def test_minimize_J_trivial_and_deterministic():
    g = make_grid(2, 4, 8, T=0.1)
    f = constitutive_integrand(ConstitutiveLaw(1.8))
    r1 = minimize_J(f, np.zeros((2, 8, 8)), g)
    assert r1.value == 0.0 and r1.C0 == 0.0 and r1.X5_margin >= 0
    ref_a = power_law_reference(1.8, taylor_green(g), g)
    ref_b = power_law_reference(1.8, taylor_green(g), g)
    assert ref_a[1] == ref_b[1]


def test_x5_margin_requires_coercivity():
    g = make_grid(2, 4, 8, T=0.1)
    st_ = solve_regularized(ConstitutiveLaw(2.0), 0.0, taylor_green(g), g)
    f = datadriven_integrand(DataSet(np.zeros((1, 2)), np.zeros((1, 2))))
    with pytest.raises(ValueError):
        x5_margin(st_, f, 1.0)


def test_variational_grid_cap():
    g = make_grid(2, 4, 66, T=0.1)
    with pytest.raises(ValueError):
        minimize_I(constitutive_integrand(ConstitutiveLaw(2.0)), taylor_green(g), g,
                   start=assemble_state(np.zeros((4, 2, 66, 66)), taylor_green(g), g, 2.0, 2.0))


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(C_E=1.5)
    with pytest.raises(ValueError):
        SolveConfig(eta_schedule=(0.1, 0.0))
    with pytest.raises(ValueError):
        SolveConfig(newton_tol=0.0)


def test_newton_failure_reports_step():
    g = make_grid(2, 4, 8, T=0.1)
    with pytest.raises(FlowError) as info:
        solve_regularized(ConstitutiveLaw(2.0), 0.0, taylor_green(g), g, SolveConfig(newton_max=0))
    assert info.value.diagnostics["step"] == 1


def test_I_value_zero_on_graph():
    g = make_grid(2, 6, 8, T=0.1)
    law = ConstitutiveLaw(3.0)
    s = solve_regularized(law, 0.0, taylor_green(g), g)
    assert I_value(s, constitutive_integrand(law)) < 1e-12


def test_random_pair_is_not_admissible():
    g = make_grid(2, 4, 8, T=0.1)
    rng = np.random.default_rng(0)
    st_ = solve_regularized(ConstitutiveLaw(2.0), 0.0, taylor_green(g), g)
    st_.eps = rng.standard_normal(st_.eps.shape)
    st_.sigma = rng.standard_normal(st_.sigma.shape)
    rep = residual_X(st_)
    assert rep["eqn"] > 1e-3 and not rep["flags"]["X2"] and not rep["in_X"]
