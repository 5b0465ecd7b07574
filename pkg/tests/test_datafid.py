import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from energyrecon.datafid import (LIPSCHITZ_GRID, DivergenceSpline, FrechetSpline, ScaledL2, bspline3, grad_d,
                                 grad_d_wrt_coeffs, hess_d_diag, make_data_term, project_constraints,
                                 prox_apply, spline_basis)

from helpers import central_diff, rel_err

Q = 2.0


def _random_term(kind, prox_mode, seed):
    rng = np.random.default_rng(seed)
    term = make_data_term(kind, prox_mode=prox_mode)
    term.coeffs = term.coeffs + 0.2 * rng.normal(size=term.coeffs.shape)
    return term.project()


def _points(n, seed, lo=-1.8, hi=1.8):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)


def test_spline_basis_center_and_support():
    n = 31
    for j in (-5, 0, 7):
        assert spline_basis(j * Q / n, j, n, Q) == pytest.approx(2 / 3)
        assert spline_basis((j + 1) * Q / n, j, n, Q) == pytest.approx(1 / 6)
        assert spline_basis((j + 2) * Q / n, j, n, Q) == 0.0
        assert spline_basis((j - 2) * Q / n, j, n, Q) == 0.0


def test_bspline_partition_of_unity():
    t = np.random.default_rng(0).uniform(-10, 10, 200)
    total = sum(bspline3(t - j) for j in range(-14, 15))
    assert np.allclose(total, 1.0, atol=1e-14)


@pytest.mark.parametrize("deriv", [1, 2, 3])
def test_bspline_derivatives(deriv):
    t = np.random.default_rng(deriv).uniform(-2.2, 2.2, 50)
    t = t[np.min(np.abs(t[:, None] - np.arange(-2, 3)), axis=1) > 1e-3]
    assert np.allclose(bspline3(t, deriv), central_diff(lambda s: bspline3(s, deriv - 1), t, 1.0, 1e-6),
                       atol=1e-6)


def test_scaled_l2_zero_gradient_on_data():
    z = np.random.default_rng(0).random(10)
    assert np.array_equal(grad_d(ScaledL2(1.0), z, z), np.zeros(10))


def test_frechet_ramp_reproduces_identity():
    term = FrechetSpline(31, Q)
    knots = np.arange(-28, 29) * Q / 31
    assert np.allclose(term.profile(knots), knots, atol=1e-13)
    # direct sum over the basis with the ramp coefficients
    r = np.random.default_rng(1).uniform(-1.5, 1.5, 20)
    direct = sum(j * Q / 31 * spline_basis(r, j, 31, Q) for j in range(-40, 41))
    assert np.allclose(term.profile(r), direct, atol=1e-13)


def test_divergence_diagonal_vanishes():
    term = _random_term("divergence", False, 3)
    x = np.random.default_rng(2).uniform(-Q, Q, 100)
    assert np.array_equal(grad_d(term, x, x), np.zeros(100))


@pytest.mark.parametrize("kind", ["scaled-l2", "frechet", "divergence"])
def test_hessian_matches_finite_differences(kind):
    term = _random_term(kind, False, 4)
    ax, z = _points(40, 5)
    fd = central_diff(lambda a: grad_d(term, a, z), ax, 1.0, 1e-5)
    assert np.allclose(hess_d_diag(term, ax, z), fd, rtol=1e-6, atol=1e-6)


def test_scaled_l2_hessian_is_scale():
    assert np.array_equal(hess_d_diag(ScaledL2(2.5), np.zeros(3), np.ones(3)), np.full(3, 2.5))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-2.5, 2.5)))
def test_frechet_gradient_is_odd(r):
    term = _random_term("frechet", False, 6)
    z = np.zeros_like(r)
    assert np.allclose(grad_d(term, -r, z), -grad_d(term, r, z), atol=1e-13)


def test_gradient_mode_only_errors():
    with pytest.raises(ValueError):
        grad_d(make_data_term("frechet", prox_mode=True), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        hess_d_diag(make_data_term("divergence", prox_mode=True), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        prox_apply(make_data_term("frechet"), np.zeros(2), np.zeros(2), 0.1)


def test_scaled_l2_prox_limits():
    rng = np.random.default_rng(7)
    v, z = rng.random(8), rng.random(8)
    assert np.array_equal(prox_apply(ScaledL2(1.0), v, z, 0.0), v)
    assert np.allclose(prox_apply(ScaledL2(1.0), v, z, 1e12), z, atol=1e-10)


def test_scaled_l2_prox_is_minimizer():
    rng = np.random.default_rng(8)
    v, z, step, xi = rng.random(5), rng.random(5), 0.3, 1.7
    p = prox_apply(ScaledL2(xi), v, z, step)
    # optimality of 1/2|p - v|^2 + step * xi / 2 |p - z|^2
    assert np.allclose(p - v + step * xi * (p - z), 0.0, atol=1e-14)


@pytest.mark.parametrize("kind", ["frechet", "divergence"])
def test_prox_monotone_and_lipschitz_after_projection(kind):
    term = make_data_term(kind, prox_mode=True)
    term.coeffs = term.coeffs * 5 + np.random.default_rng(9).normal(size=term.coeffs.shape)
    term = project_constraints(term)
    assert term.max_grid_slope() <= 1 + 1e-9
    for n in (LIPSCHITZ_GRID, 8 * LIPSCHITZ_GRID + 1):
        v = np.linspace(-Q, Q, n)
        for zval in (-1.3, 0.0, 0.4, 1.9):
            p = prox_apply(term, v, np.full_like(v, zval), 0.1)
            slopes = np.diff(p) / np.diff(v)
            assert slopes.min() >= -1e-12
            assert slopes.max() <= 1 + 1e-9


def test_exact_slope_bounds_dense_sampling():
    rng = np.random.default_rng(22)
    for _ in range(10):
        term = FrechetSpline(11, Q, coeffs=np.sort(rng.random(11)) * 3)
        r = np.linspace(-Q, Q, 200001)
        sampled = np.max(term.profile(r, 1))
        assert sampled <= term.max_slope() + 1e-9
        assert sampled >= term.max_slope() - 1e-6


def test_projection_pav_example():
    term = FrechetSpline(3, Q, coeffs=[3.0, 1.0, 2.0])
    assert np.allclose(project_constraints(term).coeffs, [2.0, 2.0, 2.0])


def _brute_force_monotone_nonneg(c):
    """Projection onto {0 <= x_1 <= ... <= x_n} by enumerating pooled blocks."""
    n = len(c)
    best, best_d = None, np.inf
    for cuts in itertools.product([0, 1], repeat=n - 1):
        x, start = np.empty(n), 0
        for i in range(n):
            if i == n - 1 or cuts[i]:
                x[start:i + 1] = c[start:i + 1].mean()
                start = i + 1
        x = np.maximum(x, 0)
        if np.all(np.diff(x) >= -1e-12):
            d = np.sum((x - c) ** 2)
            if d < best_d:
                best, best_d = x, d
    return best


def test_projection_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(30):
        c = rng.normal(size=5)
        term = FrechetSpline(5, Q, coeffs=c)
        assert np.allclose(project_constraints(term).coeffs, _brute_force_monotone_nonneg(c),
                           atol=1e-12)


@pytest.mark.parametrize("kind,prox", [("frechet", False), ("frechet", True),
                                       ("divergence", False), ("divergence", True),
                                       ("scaled-l2", False)])
def test_projection_idempotent_and_feasible(kind, prox):
    term = make_data_term(kind, prox_mode=prox)
    term.coeffs = term.coeffs + np.random.default_rng(11).normal(size=term.coeffs.shape)
    once = project_constraints(term)
    twice = project_constraints(once)
    assert once.is_feasible()
    assert np.allclose(once.coeffs, twice.coeffs, atol=1e-14)
    assert project_constraints(once).coeffs is not once.coeffs


def test_feasible_coefficients_unchanged():
    term = make_data_term("frechet")
    assert np.array_equal(project_constraints(term).coeffs, term.coeffs)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-3, 3)), arrays(np.float64, 6, elements=st.floats(0, 3)))
def test_projection_nonexpansive_to_feasible_points(c, f):
    feasible = np.cumsum(f)
    p = project_constraints(FrechetSpline(6, Q, coeffs=c)).coeffs
    assert np.linalg.norm(p - feasible) <= np.linalg.norm(c - feasible) + 1e-9


def test_divergence_projection_columns():
    term = DivergenceSpline(4, Q, coeffs=np.random.default_rng(12).normal(size=(9, 9)))
    c = project_constraints(term).coeffs
    assert np.all(np.diff(c, axis=0) >= -1e-12)
    assert np.all(np.diag(c) == 0)


def test_scaled_l2_projection_floor():
    term = ScaledL2(1.0)
    term.coeffs[...] = -3.0
    assert project_constraints(term).xi > 0


@pytest.mark.parametrize("kind,prox", [("scaled-l2", False), ("frechet", False), ("divergence", False),
                                       ("frechet", True), ("divergence", True)])
def test_coefficient_vjp_matches_finite_differences(kind, prox):
    term = _random_term(kind, prox, 13)
    ax, z = _points(30, 14)
    up = np.random.default_rng(15).normal(size=30)
    step = 0.2
    vjp = grad_d_wrt_coeffs(term, ax, z, up, step=step)
    rng = np.random.default_rng(16)

    def out(c):
        t = term.copy()
        t.coeffs = c
        return np.sum((t.prox(ax, z, step) if prox else t.grad(ax, z)) * up)

    for _ in range(5):
        d = rng.normal(size=term.coeffs.shape)
        fd = central_diff(out, term.coeffs, d, 1e-6)
        assert abs(np.sum(vjp * d) - fd) <= 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("kind", ["scaled-l2", "frechet", "divergence"])
def test_hessian_coefficient_vjp(kind):
    term = _random_term(kind, False, 17)
    ax, z = _points(30, 18)
    up = np.random.default_rng(19).normal(size=30)
    d = np.random.default_rng(20).normal(size=term.coeffs.shape)

    def out(c):
        t = term.copy()
        t.coeffs = c
        return np.sum(t.hess_diag(ax, z) * up)

    fd = central_diff(out, term.coeffs, d, 1e-6)
    assert rel_err(np.sum(term.hess_coeff_vjp(ax, z, up) * d), fd) < 1e-6


def test_inputs_clamped_outside_range():
    term = _random_term("frechet", False, 21)
    z = np.zeros(2)
    assert np.allclose(grad_d(term, np.array([5.0, 50.0]), z), grad_d(term, np.array([Q, Q]), z))
    assert np.array_equal(hess_d_diag(term, np.array([3.0]), np.zeros(1)), [0.0])


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_data_term("huber")
