import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsde.errors import ConfigurationError, MissingDerivativeError
from fbsde.model import (
    PROBLEMS,
    AnalyticSolution,
    exact_yz,
    feynman_kac_residual,
    fd_dx,
    fd_dxx,
    get_problem,
    make_atan_problem,
    make_constant_problem,
    make_sin_problem,
)


def _periodic_pde_solve(T, t_eval, x_eval, m=256, steps=400):
    """Backward solve of u_t + u_xx/2 - u_x + u/2 = 0, u(T) = sin(T + x).

    Fourth-order periodic differences in x, Crank-Nicolson in time. Uses
    only the terminal data and the PDE, never the closed form.
    """
    h = 2 * math.pi / m
    x = x_eval + h * np.arange(m)
    eye = np.eye(m)
    shift = lambda k: np.roll(eye, k, axis=1)
    d1 = (-shift(2) + 8 * shift(1) - 8 * shift(-1) + shift(-2)) / (12 * h)
    d2 = (-shift(2) + 16 * shift(1) - 30 * eye + 16 * shift(-1) - shift(-2)) / (12 * h * h)
    A = 0.5 * d2 - d1 + 0.5 * eye
    dt = (T - t_eval) / steps
    step = np.linalg.solve(eye - 0.5 * dt * A, eye + 0.5 * dt * A)
    u = np.sin(T + x)
    for _ in range(steps):
        u = step @ u
    ux = d1 @ u
    return u[0], ux[0]


def test_exact_yz_sin_origin():
    prob, sol = make_sin_problem(1.0)
    y, z = exact_yz(sol, prob, 0.0, 0.0)
    assert y == 0.0
    np.testing.assert_array_equal(z, [1.0])


def test_exact_yz_constant_any_sigma():
    prob, sol = make_atan_problem()
    const = AnalyticSolution(
        u=lambda t, x: np.full(x.shape[0], 2.5), u_x=lambda t, x: np.zeros((x.shape[0], 1))
    )
    y, z = exact_yz(const, prob, 0.3, 1.7)
    assert y == 2.5
    np.testing.assert_array_equal(z, [0.0])


def test_exact_yz_matches_pde_solve():
    prob, sol = make_sin_problem(1.0)
    y, z = exact_yz(sol, prob, 0.5, 0.5)
    assert y == pytest.approx(0.841471, abs=5e-7)
    assert z[0] == pytest.approx(0.540302, abs=5e-7)
    y_fd, ux_fd = _periodic_pde_solve(1.0, 0.5, 0.5)
    assert abs(y - y_fd) < 1e-5
    assert abs(z[0] - ux_fd) < 1e-5


def test_exact_yz_batch_shapes():
    prob, sol = make_sin_problem(1.0, d=2)
    y, z = exact_yz(sol, prob, 0.1, np.zeros((5, 2)))
    assert y.shape == (5,)
    assert z.shape == (5, 2)


def test_residual_sin_point():
    prob, sol = make_sin_problem(1.0)
    assert abs(feynman_kac_residual(sol, prob, 0.3, -1.2)) < 1e-12


def test_residual_constant_is_zero():
    prob, sol = make_constant_problem(1.0, c=3.0)
    r = feynman_kac_residual(sol, prob, 0.2, np.linspace(-2, 2, 9)[:, None])
    assert np.all(r == 0.0)


def test_residual_detects_offset_generator():
    prob, sol = make_sin_problem(1.0)
    base = prob.generator
    bad = dataclasses.replace(prob, generator=lambda t, x, y, z: base(t, x, y, z) + 1.0)
    pts = np.linspace(-3, 3, 25)[:, None]
    np.testing.assert_allclose(feynman_kac_residual(sol, bad, 0.4, pts), 1.0, atol=1e-12)


def test_residual_needs_second_derivatives():
    prob, sol = make_sin_problem(1.0)
    partial = AnalyticSolution(u=sol.u, u_x=sol.u_x)
    with pytest.raises(MissingDerivativeError):
        feynman_kac_residual(partial, prob, 0.0, 0.0)


def test_sin_factory_examples():
    prob, sol = make_sin_problem(1.0)
    y, z = exact_yz(sol, prob, 0.0, prob.x0)
    assert (y, z[0]) == (0.0, 1.0)
    assert float(prob.phi(np.zeros((1, 1)))[0]) == pytest.approx(0.841471, abs=5e-7)
    rng = np.random.default_rng(3)
    t = rng.uniform(0, 1, 100)
    x = rng.uniform(-5, 5, 100)
    r = [feynman_kac_residual(sol, prob, ti, xi) for ti, xi in zip(t, x)]
    assert max(abs(v) for v in r) < 1e-12


@pytest.mark.parametrize("name", sorted(PROBLEMS))
def test_registry_residual_small(name):
    prob, sol = get_problem(name, T=1.0)
    rng = np.random.default_rng(7)
    worst = 0.0
    for t in rng.uniform(0, prob.horizon, 20):
        x = prob.x0 + rng.uniform(-5, 5, (50, prob.dim))
        worst = max(worst, np.abs(feynman_kac_residual(sol, prob, t, x)).max())
    assert worst < 1e-10


@pytest.mark.parametrize("name", ["sin1d", "atan1d"])
def test_exact_z_is_gradient_times_sigma(name):
    prob, sol = get_problem(name)
    t, x = 0.3, prob.x0 + 0.4
    _, z = exact_yz(sol, prob, t, x)
    sig = prob.sigma(t, x[None, :])[0, 0, 0]
    errs = []
    hs = [0.1, 0.05, 0.025, 0.0125]
    for h in hs:
        up, _ = exact_yz(sol, prob, t, x + h)
        dn, _ = exact_yz(sol, prob, t, x - h)
        errs.append(abs(z[0] - (up - dn) / (2 * h) * sig))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.1)


def test_exact_z_gbm_linear_in_x():
    # u is linear in x, so the central difference is exact up to rounding
    prob, sol = get_problem("gbm1d")
    x = np.array([1.3])
    _, z = exact_yz(sol, prob, 0.2, x)
    up, _ = exact_yz(sol, prob, 0.2, x + 0.1)
    dn, _ = exact_yz(sol, prob, 0.2, x - 0.1)
    assert z[0] == pytest.approx((up - dn) / 0.2 * 0.2 * 1.3, rel=1e-12)


def test_sigma_sigma_t_positive_semidefinite():
    for name in PROBLEMS:
        prob, _ = get_problem(name)
        pts = prob.x0 + np.linspace(-4, 4, 41)[:, None] * np.ones(prob.dim)
        s = prob.sigma(0.5, pts)
        a = np.einsum("pij,pkj->pik", s, s)
        np.testing.assert_allclose(a, np.swapaxes(a, 1, 2))
        assert np.linalg.eigvalsh(a).min() >= -1e-14


def test_atan_ellipticity_bound():
    prob, _ = make_atan_problem(s0=0.2)
    assert prob.min_ellipticity(0.0, np.linspace(-3, 3, 31)[:, None]) == pytest.approx(0.04)


def test_callbacks_are_pure():
    prob, _ = make_atan_problem()
    pts = np.linspace(-1, 1, 7)[:, None]
    np.testing.assert_array_equal(prob.sigma(0.2, pts), prob.sigma(0.2, pts))
    np.testing.assert_array_equal(prob.b(0.2, pts), prob.b(0.2, pts))


def test_fd_fallback_flag_and_accuracy():
    prob, _ = make_atan_problem()
    assert not prob.approximate_derivatives
    bare = prob.without_derivatives()
    assert bare.approximate_derivatives
    pts = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(bare.sigma_x(0.1, pts), prob.sigma_x(0.1, pts), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(bare.sigma_xx(0.1, pts), prob.sigma_xx(0.1, pts), rtol=1e-6, atol=1e-8)


def test_fd_helpers_on_polynomial():
    f = lambda t, x: (x[:, 0] ** 3)[:, None]
    pts = np.array([[0.5], [2.0]])
    np.testing.assert_allclose(fd_dx(f, 0.0, pts)[:, 0, 0], 3 * pts[:, 0] ** 2, rtol=1e-8)
    np.testing.assert_allclose(fd_dxx(f, 0.0, pts)[:, 0, 0, 0], 6 * pts[:, 0], rtol=1e-6)


def test_unknown_problem_lists_registry():
    with pytest.raises(ConfigurationError) as info:
        get_problem("nope")
    for name in PROBLEMS:
        assert name in str(info.value)


def test_problem_validation():
    prob, _ = make_sin_problem()
    with pytest.raises(ConfigurationError):
        dataclasses.replace(prob, horizon=-1.0)
    with pytest.raises(ConfigurationError):
        dataclasses.replace(prob, x0=np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(
    t=st.floats(0.0, 1.0),
    x=st.floats(-10.0, 10.0),
    y=st.floats(-5.0, 5.0),
)
def test_atan_generator_consistent_with_pde(t, x, y):
    # f(t,x,u,u_x sigma) must equal -(u_t + sigma^2 u_xx / 2) on the solution
    prob, sol = make_atan_problem()
    r = feynman_kac_residual(sol, prob, t, x)
    assert abs(r) < 1e-12
    # Lipschitz in y with constant 1/2
    pts = np.array([[x]])
    z = np.zeros((1, 1))
    f1 = prob.f(t, pts, np.array([y]), z)[0]
    f2 = prob.f(t, pts, np.array([y + 1.0]), z)[0]
    assert f2 - f1 == pytest.approx(0.5, abs=1e-12)
