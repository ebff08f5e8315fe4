"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantities and
runtime.  Run ``python3 tests/test_acceptance.py`` for the summary alone.
"""

import time

import numpy as np
import pytest

from afree.convexity import circle_deviation, cone_convexity_test, jensen_test
from afree.flow import (SolveConfig, energy_report, leray_hopf_continuation, minimize_I,
                        minimize_J, power_law_reference, residual_X, solve_regularized,
                        taylor_green, taylor_green_amplitude)
from afree.grid import SpaceTimeField, make_grid, mean, random_field
from afree.integrands import (ConstitutiveLaw, DataSet, DW_eval, W_eval, constitutive_integrand,
                              datadriven_integrand, envelope_estimate, f_constitutive)
from afree.multipliers import split_spacetime
from afree.projections import (A_residual_norm, operator_residual_norm, project_parabolic_linear,
                               project_parabolic_nonlinear)
from afree.symbols import KernelDimensionError, builtin, cone_sample, kernel_basis


def _line(n, ok, detail, seconds, budget):
    status = "PASS" if ok and seconds < budget else "FAIL"
    return f"[{status}] criterion {n:2d}: {detail} ({seconds:.2f} s, budget {budget:g} s)"


# -- criteria -----------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    fails, total = 0, 0
    for name in ("fluid-d2", "fluid-d3", "heat-d2"):
        pair = builtin(name)
        D = pair.d + 1
        rng = np.random.default_rng(1)
        xs = rng.standard_normal((512, D))
        xs[:D] = np.eye(D)
        xs[D:2 * D] = -np.eye(D)
        for xi in xs:
            total += 1
            try:
                fails += kernel_basis(pair, xi).shape[-1] != pair.m
            except KernelDimensionError:
                fails += 1
    return fails == 0, f"kernel dimension failures {fails}/{total}", time.perf_counter() - t0, 5


def criterion_2():
    t0 = time.perf_counter()
    pair = builtin("fluid-d2")
    g = make_grid(2, 16, 16)
    rng = np.random.default_rng(2)
    worst = dict(res=0.0, idem=0.0, mean=0.0, C=0.0)
    for _ in range(100):
        w = random_field(g, 2 * pair.m, rng)
        nrm = w.norm()
        bound = operator_residual_norm(pair, w)
        for proj in (project_parabolic_linear, lambda pr, v: project_parabolic_nonlinear(pr, v, 2.0, 2.0)):
            pw = proj(pair, w)
            worst["res"] = max(worst["res"], A_residual_norm(pair, pw) / nrm)
            worst["idem"] = max(worst["idem"], np.max(np.abs(proj(pair, pw).values - pw.values)) / nrm)
            worst["mean"] = max(worst["mean"], np.max(np.abs(mean(pw) - mean(w))) / nrm)
            worst["C"] = max(worst["C"], (w - pw).norm() / bound)
    t_main = time.perf_counter() - t0
    # non-quadratic exponents on a subset (each field needs an iterative decomposition)
    t1 = time.perf_counter()
    C_nq = 0.0
    for _ in range(20):
        w = random_field(g, 2 * pair.m, rng)
        pw = project_parabolic_nonlinear(pair, w, 3.0, 1.5)
        C_nq = max(C_nq, (w - pw).norm() / operator_residual_norm(pair, w, 3.0, 1.5))
        worst["res"] = max(worst["res"], A_residual_norm(pair, pw) / w.norm())
    ok = (worst["res"] <= 1e-9 and worst["idem"] <= 1e-9 and worst["mean"] <= 1e-15
          and worst["C"] < 50 and C_nq < 50)
    detail = (f"residual {worst['res']:.1e}, idempotence {worst['idem']:.1e}, "
              f"mean drift {worst['mean']:.1e}, C {worst['C']:.3f} (p=q=2, 100 fields), "
              f"C {C_nq:.3f} (p=3, 20 fields in {time.perf_counter() - t1:.1f} s)")
    return ok, detail, t_main + time.perf_counter() - t1, 30


def criterion_3():
    t0 = time.perf_counter()
    pair = builtin("fluid-d2")
    g = make_grid(2, 16, 16)
    rng = np.random.default_rng(3)
    rec, afree = 0.0, 0.0
    for i in range(100):
        w = random_field(g, 2 * pair.m, rng)
        if i % 2:
            w = project_parabolic_linear(pair, w)
        parts = split_spacetime(w, 2.0)
        back = parts.temporal.values + parts.spatial.values + parts.mean.real.reshape(-1, 1, 1, 1)
        rec = max(rec, np.max(np.abs(back - w.values)) / np.max(np.abs(w.values)))
        if i % 2:
            for part in (parts.temporal, parts.spatial):
                afree = max(afree, A_residual_norm(pair, part) / w.norm())
    ok = rec <= 1e-12 and afree <= 1e-9
    return ok, f"reconstruction {rec:.1e}, A-free parts residual {afree:.1e}", time.perf_counter() - t0, 10


def criterion_4():
    t0 = time.perf_counter()
    pair = builtin("fluid-d2")
    g = make_grid(2, 16, 16)
    rng = np.random.default_rng(4)
    m = pair.m
    worst = 0.0
    for _ in range(100):
        w = project_parabolic_linear(pair, random_field(g, 2 * m, rng, zero_mean=True)).values
        w = w - w.reshape(2 * m, -1).mean(axis=1).reshape(-1, 1, 1, 1)
        z = rng.standard_normal(2 * m)
        e = w[:m] + z[:m].reshape(-1, 1, 1, 1)
        s = w[m:] + z[m:].reshape(-1, 1, 1, 1)
        worst = max(worst, abs(np.mean(np.sum(e * s, axis=0)) - z[:m] @ z[m:]))
    return worst <= 1e-8, f"max |mean (e+eps).(s+sig) - e.s| = {worst:.1e}", time.perf_counter() - t0, 10


def criterion_5():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    laws = [ConstitutiveLaw(1.5), ConstitutiveLaw(2.0), ConstitutiveLaw(3.0, mu0=0.5),
            ConstitutiveLaw(2.5, kappa=0.5, family="carreau-like")]
    n = 100_000 // len(laws)
    neg, on_graph, off_min = 0, 0.0, np.inf
    for law in laws:
        e = rng.standard_normal((n, 2)) * rng.uniform(0.01, 3.0, (n, 1))
        s = rng.standard_normal((n, 2)) * rng.uniform(0.01, 3.0, (n, 1))
        neg += int(np.sum(f_constitutive(law, e, s) < 0))
        sg = DW_eval(law, e)
        on_graph = max(on_graph, float(np.max(f_constitutive(law, e, sg) / (1 + W_eval(law, e)))))
        # off the graph by 1e-3 the gap must be strictly positive
        d = rng.standard_normal((n, 2))
        d *= 1e-3 / np.linalg.norm(d, axis=1, keepdims=True)
        off_min = min(off_min, float(np.min(f_constitutive(law, e, sg + d))))
    ok = neg == 0 and on_graph <= 1e-8 and off_min > 0
    detail = f"negative values {neg}, max gap on graph {on_graph:.1e}, min gap off graph {off_min:.1e}"
    return ok, detail, time.perf_counter() - t0, 5


def criterion_6():
    t0 = time.perf_counter()
    pair = builtin("fluid-d2")
    rng = np.random.default_rng(6)

    def convex(e, s):
        return np.sum(e * e, axis=-1) + np.sum(s * s, axis=-1)

    def neg_sigma2(e, s):
        return -np.sum(s * s, axis=-1)

    def dot(e, s):
        return np.sum(e * s, axis=-1)

    jv = sum(len(jensen_test(convex, pair, z, n_fields=20, seed=i).violations)
             for i, z in enumerate(rng.standard_normal((5, 4))))
    cone = cone_convexity_test(neg_sigma2, pair, n_dirs=50, n_base=10)
    lam2 = [v for v in cone.violations if v.label == "Lambda2"]
    dev = 0.0
    for _ in range(200):
        smp = cone_sample(pair, "Lambda3", rng)
        for R in (0.1, 1.0, 10.0):
            dev = max(dev, abs(circle_deviation(dot, pair, rng.standard_normal(4), smp.w1, smp.w2, R)))
    ok = jv == 0 and lam2 and cone.n_checked <= 10_000 and dev <= 1e-10
    detail = (f"convex Jensen violations {jv}, Lambda2 violations {len(lam2)} in {cone.n_checked} "
              f"samples, circle deviation of e.s {dev:.1e}")
    return bool(ok), detail, time.perf_counter() - t0, 60


def criterion_7():
    t0 = time.perf_counter()
    pair = builtin("fluid-d2")
    g = make_grid(2, 8, 8)
    rng = np.random.default_rng(7)
    f = constitutive_integrand(ConstitutiveLaw(2.0), m=2)
    worst = 0.0
    for _ in range(20):
        e, s = rng.standard_normal(2), rng.standard_normal(2)
        res = envelope_estimate(f, pair, e, s, g, budget=60, starts=1)
        worst = max(worst, 1 - res.value / res.base_value)
    a = np.array([1.0, 0.0])
    two = datadriven_integrand(DataSet(np.stack([a, -a]), np.zeros((2, 2)), 2.0))
    mid = envelope_estimate(two, pair, np.zeros(2), np.zeros(2), g, budget=200, starts=1).value
    ok = worst <= 0.01 and mid <= 1e-3
    detail = f"max relative drop below f (polyconvex) {worst:.1e}, two-point midpoint estimate {mid:.1e}"
    return ok, detail, time.perf_counter() - t0, 300


def criterion_8():
    t0 = time.perf_counter()
    mu = 0.01
    g = make_grid(2, 100, 32, T=0.1)
    st = solve_regularized(ConstitutiveLaw(2.0, mu0=mu), 0.0, taylor_green(g), g)
    exact = np.exp(-4 * np.pi ** 2 * mu * 0.1)
    err = abs(taylor_green_amplitude(st.u[-1]) / exact - 1)
    flags = residual_X(st)["in_X"]
    return err <= 1e-4 and flags, f"relative amplitude error {err:.2e} (mu0={mu}), in X {flags}", \
        time.perf_counter() - t0, 120


def criterion_9():
    t0 = time.perf_counter()
    ratios = {}
    for p, eta in ((2.0, 0.0), (3.0, 0.1)):
        cfg = SolveConfig(r_prime=4.0)
        res = []
        for Nt in (100, 200):
            g = make_grid(2, Nt, 16, T=0.1)
            st = solve_regularized(ConstitutiveLaw(p), eta, taylor_green(g), g, cfg)
            res.append(np.max(np.abs(energy_report(st, cfg).balance_residual)))
        ratios[p] = res[0] / res[1]
    ok = all(1.7 <= r <= 2.3 for r in ratios.values())
    detail = ", ".join(f"p={p:g} halving ratio {r:.3f}" for p, r in ratios.items())
    return ok, detail, time.perf_counter() - t0, 300


def _continuation_25():
    g = make_grid(2, 16, 16, T=0.1)
    return g, leray_hopf_continuation(ConstitutiveLaw(2.5), taylor_green(g), g, (1e-1, 3e-2, 1e-2))


def criterion_10():
    t0 = time.perf_counter()
    _, out = _continuation_25()
    margin = min(out.energy_margins)
    ok = out.monotone and out.I_values[-1] <= 1e-3 and margin >= -1e-4
    detail = f"I = {[float(f'{v:.2e}') for v in out.I_values]}, energy margin {margin:.1e}"
    return ok, detail, time.perf_counter() - t0, 600


def criterion_11():
    t0 = time.perf_counter()
    g, cont = _continuation_25()
    law = ConstitutiveLaw(2.5)
    res = minimize_I(constitutive_integrand(law), taylor_green(g), g)
    ref = cont.final

    def rel(a, b):
        return np.linalg.norm(a - b) / np.linalg.norm(b)

    de, ds = rel(res.state.eps, ref.eps), rel(res.state.sigma, ref.sigma)
    ok = res.value <= 1e-4 and max(de, ds) <= 1e-3 and res.residuals["in_X"]
    detail = (f"I = {res.value:.1e}, relative L2 distance to continuation endpoint "
              f"eps {de:.1e} sigma {ds:.1e}, in X {res.residuals['in_X']}")
    return ok, detail, time.perf_counter() - t0, 900


def criterion_12():
    t0 = time.perf_counter()
    g = make_grid(2, 16, 16, T=0.1)
    f = constitutive_integrand(ConstitutiveLaw(1.8))
    u0 = taylor_green(g)
    ref = power_law_reference(1.8, u0, g)
    res = minimize_J(f, u0, g, reference=ref)
    ok = res.X5_margin >= 0 and res.value <= res.C0 and res.residuals["in_X"]
    detail = (f"J = {res.value:.1e} <= C0 = {res.C0:.1e}, X5 margin {res.X5_margin:.3e}, "
              f"theta {res.theta:g}, in X {res.residuals['in_X']}")
    return ok, detail, time.perf_counter() - t0, 900


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


@pytest.mark.parametrize("n", range(1, 13))
def test_criterion(n, capsys):
    ok, detail, seconds, budget = CRITERIA[n - 1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, detail, seconds, budget))
    assert ok, detail
    assert seconds < budget, f"runtime {seconds:.1f} s over budget {budget} s"


if __name__ == "__main__":
    passed = 0
    for i, crit in enumerate(CRITERIA, 1):
        ok, detail, seconds, budget = crit()
        print(_line(i, ok, detail, seconds, budget), flush=True)
        passed += ok and seconds < budget
    print(f"{passed}/{len(CRITERIA)} criteria passed")
