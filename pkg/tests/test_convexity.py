import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree.convexity import (PolyconvexCertificate, circle_deviation, cone_convexity_test,
                             constitutive_certificate, implication_audit, jensen_test,
                             laminate_field, quasiaffine_integral_test, subharmonicity_test)
from afree.grid import SpaceTimeField, make_grid
from afree.integrands import ConstitutiveLaw, constitutive_integrand
from afree.projections import A_residual_norm
from afree.symbols import builtin, cone_sample

PAIR = builtin("fluid-d2")


def convex(e, s):
    return np.sum(e * e, axis=-1) + np.sum(s * s, axis=-1) ** 2


def neg_sigma2(e, s):
    return -np.sum(s * s, axis=-1)


def dot(e, s):
    return np.sum(e * s, axis=-1)


def test_convex_integrand_passes_jensen_and_cone():
    rng = np.random.default_rng(0)
    for z in rng.standard_normal((3, 4)):
        assert jensen_test(convex, PAIR, z, n_fields=10).passed
    assert cone_convexity_test(convex, PAIR, n_dirs=20, n_base=5).passed


def test_concave_in_stress_violates_along_temporal_cone():
    rep = cone_convexity_test(neg_sigma2, PAIR, n_dirs=20, n_base=5)
    labels = {v.label for v in rep.violations}
    assert "Lambda2" in labels
    # temporal cone elements carry no strain
    assert all(np.allclose(v.direction[:2], 0.0) for v in rep.violations if v.label == "Lambda2")


def test_jensen_detects_concavity():
    rep = jensen_test(neg_sigma2, PAIR, np.zeros(4), n_fields=3)
    assert not rep.passed and rep.worst_gap > 0


@given(seed=st.integers(0, 10 ** 6), R=st.floats(0.01, 100.0))
def test_dot_product_is_circle_harmonic(seed, R):
    rng = np.random.default_rng(seed)
    s = cone_sample(PAIR, "Lambda3", rng)
    z = rng.standard_normal(4)
    assert abs(circle_deviation(dot, PAIR, z, s.w1, s.w2, R)) <= 1e-10 * (1 + R * R)


def test_subharmonicity_report():
    assert subharmonicity_test(dot, PAIR, n_samples=20).passed
    assert subharmonicity_test(convex, PAIR, n_samples=20).passed
    with pytest.raises(ValueError):
        subharmonicity_test(dot, PAIR, radii=(0.0,))


@pytest.mark.parametrize("name", ["fluid-d2", "heat-d2"])
def test_quasiaffine_integral(name):
    assert quasiaffine_integral_test(builtin(name), make_grid(2, 8, 8), n_fields=10) < 1e-12


def test_laminate_is_two_valued_and_A_free():
    g = make_grid(2, 8, 8)
    rng = np.random.default_rng(1)
    for label, xi in (("Lambda1", np.array([0.0, 1.0, -1.0])), ("Lambda2", np.array([1.0, 0.0, 0.0]))):
        s = cone_sample(PAIR, label, rng, xi=xi)
        w = np.concatenate([s.w1, s.w2])
        lam = laminate_field(PAIR, g, xi, w)
        assert A_residual_norm(PAIR, SpaceTimeField(g, lam)) < 1e-10
        assert np.allclose(lam.reshape(4, -1).mean(axis=1), 0.0)
        flat = lam.reshape(4, -1)
        assert np.all(np.isclose(flat, w[:, None]).all(axis=0) | np.isclose(flat, -w[:, None]).all(axis=0))
    with pytest.raises(ValueError):
        laminate_field(PAIR, make_grid(2, 6, 8), np.array([1.0, 0, 0]), np.ones(4))


def test_audit_chain_for_certified_integrand():
    law = ConstitutiveLaw(2.0)
    f = constitutive_integrand(law, m=2)
    rep = implication_audit(f, PAIR, constitutive_certificate(law), n_fields=5, n_dirs=10, n_base=4)
    assert rep.poly is True
    assert rep.consistent and rep.jensen_violations == 0 and rep.cone_violations == 0


def test_audit_replays_cone_violation_as_laminate():
    rep = implication_audit(neg_sigma2, PAIR, n_fields=3, n_dirs=10, n_base=4)
    assert rep.cone_violations > 0 and rep.jensen_violations > 0
    assert rep.consistent
    assert "poly" in rep.to_dict()


def test_bad_certificate_rejected():
    cert = PolyconvexCertificate(lambda e, s, t: -t)
    assert not cert.check(dot, 2)
    cert = PolyconvexCertificate(lambda e, s, t: -np.sum(s * s, axis=-1))
    assert not cert.check(neg_sigma2, 2)
