import numpy as np
import pytest
from hypothesis import given, strategies as st

from afree.grid import (AliasingError, GridError, SpaceTimeField, backward, forward, make_grid, mean,
                        parabolic_rescale, random_field, spatial_backward, spatial_forward)


def test_rejects_bad_resolution():
    for bad in (dict(d=2, Nt=7, Nx=8), dict(d=2, Nt=8, Nx=2), dict(d=4, Nt=8, Nx=8)):
        with pytest.raises(GridError):
            make_grid(**bad)
    with pytest.raises(GridError):
        make_grid(2, 8, 8, T=0.0)


def test_frequency_tables():
    g = make_grid(2, 8, 6, T=0.5)
    assert g.xi_t[4] == 0.0 and g.xi_x[3] == 0.0
    assert np.allclose(g.xi_t[:4], np.arange(4) / 0.5)
    assert g.lattice.shape == (8, 6, 6, 3)
    assert g.nyquist_mask.sum() == 8 * 36 - 7 * 25


@given(m=st.integers(1, 5), seed=st.integers(0, 10 ** 6), d=st.sampled_from([2, 3]))
def test_round_trip(m, seed, d):
    g = make_grid(d, 4, 4 if d == 3 else 8)
    v = np.random.default_rng(seed).standard_normal((m,) + g.shape)
    back = backward(forward(v, g), g)
    assert np.max(np.abs(back - v)) <= 1e-12 * np.max(np.abs(v))
    assert np.max(np.abs(back.imag)) <= 1e-12


def test_spatial_round_trip(rng):
    v = rng.standard_normal((3, 5, 8, 8))
    assert np.allclose(spatial_backward(spatial_forward(v, 2), 2).real, v, atol=1e-13)


def test_mean_examples(rng):
    g = make_grid(2, 8, 8, T=2.0)
    c = SpaceTimeField(g, np.full((2,) + g.shape, 3.5))
    assert np.allclose(mean(c), [3.5, 3.5])
    t, x, y = g.points()
    wave = SpaceTimeField(g, np.cos(2 * np.pi * (t / g.T + 2 * x - y)))
    assert abs(mean(wave)[0]) < 1e-15
    f = random_field(g, 1, rng)
    # trapezoid rule on the periodic grid is the plain average
    assert abs(mean(f)[0].real - f.values.mean()) < 1e-14


def test_rescale_matches_physical_composition():
    g = make_grid(2, 16, 16, T=1.0)
    t, x, y = g.points()
    f = SpaceTimeField(g, np.sin(2 * np.pi * (t + x)) + 0.5 * np.cos(2 * np.pi * (2 * y)) + 0.25)
    r = parabolic_rescale(f, 2)
    exact = np.sin(2 * np.pi * (4 * t + 2 * x)) + 0.5 * np.cos(2 * np.pi * 4 * y) + 0.25
    assert np.max(np.abs(r.values - exact)) < 1e-12
    assert np.allclose(mean(r), mean(f), atol=1e-15)


def test_rescale_aliasing():
    g = make_grid(2, 8, 8)
    t, x, y = g.points()
    f = SpaceTimeField(g, np.cos(2 * np.pi * 2 * x))
    with pytest.raises(AliasingError):
        parabolic_rescale(f, 2)


@given(seed=st.integers(0, 10 ** 6))
def test_random_field_real_and_band_limited(seed):
    g = make_grid(2, 8, 8)
    f = random_field(g, 3, np.random.default_rng(seed), cutoff=2, zero_mean=True)
    spec = f.spectrum
    assert np.all(np.abs(spec[:, ~g.band_mask(2)]) < 1e-14)
    assert np.allclose(mean(f), 0.0, atol=1e-15)
    assert np.max(np.abs(backward(spec, g).imag)) < 1e-12


def test_field_arithmetic_and_shape_check(rng):
    g = make_grid(2, 4, 4)
    a = SpaceTimeField(g, rng.standard_normal((2,) + g.shape))
    assert np.allclose((a + a - 2 * a).values, 0.0)
    assert a.norm() == pytest.approx(np.sqrt(np.mean(np.sum(a.values ** 2, axis=0))))
    with pytest.raises(GridError):
        SpaceTimeField(g, np.zeros((2, 4, 4, 5)))
