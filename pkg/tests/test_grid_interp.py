import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fbsde.errors import ConfigurationError, DomainEscapeError
from fbsde.grid_interp import (
    GridFunction,
    SpaceGrid,
    build_grid,
    build_stencil,
    interpolate,
    regular_steps,
)
from fbsde.model import FbsdeProblem, make_sin_problem


def sampled(grid, func):
    return GridFunction(grid, func(grid.points()))


def test_grid_nodes_and_layout():
    g = SpaceGrid([0.0, -1.0], [1.0, 1.0], (3, 5))
    assert g.dim == 2 and g.size == 15
    np.testing.assert_allclose(g.h, [0.5, 0.5])
    pts = g.points()
    # row-major: last axis varies fastest
    np.testing.assert_array_equal(pts[1], [0.0, -0.5])
    np.testing.assert_array_equal(pts[5], [0.5, -1.0])
    i0, i1 = 2, 3
    np.testing.assert_array_equal(pts[i0 * 5 + i1], [1.0, 0.5])


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        SpaceGrid([1.0], [0.0], 5)
    with pytest.raises(ConfigurationError):
        SpaceGrid([0.0], [1.0], 1)
    with pytest.raises(ConfigurationError):
        SpaceGrid([0.0, 0.0], [1.0, 1.0], (4,))


def test_subgrid_shares_nodes():
    g = SpaceGrid([-4.0], [4.0], 257)
    sub = g.subgrid([10], [40])
    np.testing.assert_array_equal(sub.points(), g.points()[10:40])


def test_grid_function_invariants():
    g = SpaceGrid([0.0], [1.0], 8)
    with pytest.raises(ConfigurationError):
        GridFunction(g, np.zeros(7))
    with pytest.raises(ConfigurationError):
        GridFunction(g, np.r_[np.zeros(7), np.nan])
    gf = GridFunction(g, np.zeros(8))
    with pytest.raises(ValueError):
        gf.values[0] = 1.0


def test_constant_reproduced():
    g = SpaceGrid([-2.0], [2.0], 21)
    gf = sampled(g, lambda p: np.full(p.shape[0], 3.25))
    xs = np.linspace(-1.95, 1.95, 37)[:, None]
    np.testing.assert_allclose(interpolate(gf, xs), 3.25, rtol=1e-14)


def test_degree_six_polynomial_reproduced():
    rng = np.random.default_rng(5)
    coef = rng.uniform(-1, 1, 7)
    g = SpaceGrid([-1.0], [2.0], 31)
    gf = sampled(g, lambda p: np.polyval(coef, p[:, 0]))
    xs = rng.uniform(-1.0, 2.0, 100)
    exact = np.polyval(coef, xs)
    got = interpolate(gf, xs[:, None])
    assert np.all(np.abs(got - exact) <= 1e-12 * np.maximum(np.abs(exact), 1.0))


def test_tensor_polynomial_reproduced_2d():
    rng = np.random.default_rng(8)
    cx, cy = rng.uniform(-1, 1, 7), rng.uniform(-1, 1, 7)
    f = lambda p: np.polyval(cx, p[:, 0]) * np.polyval(cy, p[:, 1]) + p[:, 0] * p[:, 1] ** 5  # noqa: E731
    g = SpaceGrid([-1.0, -1.0], [1.0, 1.0], (15, 17))
    xs = rng.uniform(-1, 1, (100, 2))
    np.testing.assert_allclose(interpolate(sampled(g, f), xs), f(xs), rtol=1e-12, atol=1e-12)


def test_sin_error_bound():
    g = SpaceGrid([-3.0], [3.0], 61)  # h = 0.1
    gf = sampled(g, lambda p: np.sin(p[:, 0]))
    xs = np.linspace(-2.5, 2.5, 201)
    err = np.abs(interpolate(gf, xs[:, None]) - np.sin(xs)).max()
    assert err <= 1e-8


def test_node_values_exact():
    rng = np.random.default_rng(1)
    g = SpaceGrid([-1.3], [2.9], 43)
    vals = rng.standard_normal(43)
    gf = GridFunction(g, vals)
    np.testing.assert_array_equal(interpolate(gf, g.points()), vals)


def test_vector_values():
    g = SpaceGrid([0.0], [1.0], 11)
    gf = GridFunction(g, np.stack([g.points()[:, 0], 2 * g.points()[:, 0]], 1))
    np.testing.assert_allclose(interpolate(gf, 0.33), [0.33, 0.66], rtol=1e-14)


def test_slack_and_escape():
    g = SpaceGrid([0.0], [1.0], 11)
    gf = sampled(g, lambda p: p[:, 0] ** 3)
    # within one spacing: one-sided stencil, still exact for a cubic
    assert interpolate(gf, 1.05) == pytest.approx(1.05**3, rel=1e-12)
    st_ = build_stencil(g, np.array([[1.05], [0.5]]))
    assert st_.boundary_hits == 1
    with pytest.raises(DomainEscapeError) as info:
        interpolate(gf, 1.3)
    np.testing.assert_array_equal(info.value.x, [1.3])


def test_too_few_nodes_for_stencil():
    g = SpaceGrid([0.0], [1.0], 5)
    with pytest.raises(ConfigurationError):
        interpolate(GridFunction(g, np.zeros(5)), 0.5)


def test_interpolation_order_on_sin():
    hs = [0.2, 0.1, 0.05, 0.025]
    xs = np.linspace(-1.0, 1.0, 301)
    errs = []
    for h in hs:
        m = int(round(6.0 / h)) + 1
        gf = sampled(SpaceGrid([-3.0], [3.0], m), lambda p: np.sin(p[:, 0]))
        errs.append(np.abs(interpolate(gf, xs[:, None]) - np.sin(xs)).max())
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 6.5


@settings(max_examples=40, deadline=None)
@given(
    coef=hnp.arrays(float, 7, elements=st.floats(-10, 10)),
    lo=st.floats(-5, 5),
    width=st.floats(0.5, 10),
    m=st.integers(7, 60),
)
def test_polynomial_reproduction_property(coef, lo, width, m):
    g = SpaceGrid([lo], [lo + width], m)
    gf = sampled(g, lambda p: np.polyval(coef, p[:, 0]))
    xs = np.linspace(lo, lo + width, 23)
    exact = np.polyval(coef, xs)
    scale = np.polyval(np.abs(coef), np.abs(xs)) + 1.0
    assert np.all(np.abs(interpolate(gf, xs[:, None]) - exact) <= 1e-11 * scale)


# --- build_grid ------------------------------------------------------------


def test_build_grid_sin_examples():
    prob, _ = make_sin_problem(1.0)
    g = build_grid(prob, 1 / 16, 8.0)
    assert g.lo[0] <= -8.0 and g.hi[0] >= 8.0
    assert g.h[0] <= 1 / 16 + 1e-15
    assert g.m[0] >= 257
    # x0 is a node
    assert np.any(g.points()[:, 0] == 0.0)


def _ode_problem(b):
    return FbsdeProblem(
        dim=1,
        horizon=1.0,
        x0=np.zeros(1),
        drift=lambda t, x: np.full_like(x, b),
        diffusion=lambda t, x: np.zeros((x.shape[0], 1, 1)),
        generator=lambda t, x, y, z: np.zeros(x.shape[0]),
        terminal=lambda x: np.zeros(x.shape[0]),
    )


def test_build_grid_degenerate_floor():
    g = build_grid(_ode_problem(0.0), 0.1, 8.0)
    assert g.lo[0] == pytest.approx(-1.0) and g.hi[0] == pytest.approx(1.0)


def test_build_grid_covers_drift_cone():
    # b = 2 transports everything by 2T, which the cone expansion must cover
    g = build_grid(_ode_problem(2.0), 0.1, 8.0)
    assert g.hi[0] >= 2.0 + 1.0 - 1e-9


def test_build_grid_rejects_small_safety():
    prob, _ = make_sin_problem(1.0)
    with pytest.raises(ConfigurationError):
        build_grid(prob, 0.1, 3.0)


def test_build_grid_fixed_nodes():
    prob, _ = make_sin_problem(1.0)
    g = build_grid(prob, 0.1, 8.0, nodes=101)
    assert g.m == (101,)


def test_regular_steps():
    delta = 2.0 / (8 + math.sqrt(64 + 4.0))
    assert regular_steps(1.0, delta) == 8
