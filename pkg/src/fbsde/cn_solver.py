"""Backward sweep for decoupled FBSDEs: Euler micro-step at the terminal level,
Crank-Nicolson or general theta steps elsewhere, Picard for the implicit Y.

The partition has ``N - 1`` steps of width ``delta`` followed by a terminal
step of width ``delta**2``. Each level is stored on a box of the master grid;
boxes shrink backwards so that every quadrature image of a level-``n`` node
lies inside the level-``n+1`` box (plus one spacing of slack), which keeps
interpolation away from extrapolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from fbsde.errors import ConfigurationError, DomainEscapeError, PicardError
from fbsde.grid_interp import DEFAULT_DEGREE, GridFunction, SpaceGrid, build_stencil, interpolate
from fbsde.ito_taylor import euler_forward, weak2_forward
from fbsde.model import AnalyticSolution, FbsdeProblem, exact_yz
from fbsde.quadrature import HermiteRule, expectation, weighted_expectation


@dataclass(frozen=True)
class TimeGrid:
    N: int
    delta: float
    levels: np.ndarray
    horizon: float

    @classmethod
    def from_steps(cls, N: int, T: float) -> "TimeGrid":
        """Solve ``(N-1) delta + delta^2 = T`` for ``delta`` (positive root)."""
        if N < 1:
            raise ConfigurationError("need at least one time step")
        if not T > 0:
            raise ConfigurationError("horizon must be positive")
        k = N - 1
        delta = 2.0 * T / (k + math.sqrt(k * k + 4.0 * T))
        levels = np.empty(N + 1)
        levels[:N] = np.arange(N) * delta
        levels[N] = levels[N - 1] + delta * delta
        levels.setflags(write=False)
        return cls(N=N, delta=delta, levels=levels, horizon=T)


@dataclass(frozen=True)
class SchemeParams:
    theta1: float = 0.5
    theta2: float = 0.5
    theta3: float = 0.5
    theta4: float = -0.5
    picard_tol: float = 1e-12
    picard_max: int = 50
    name: str = "theta"

    def __post_init__(self):
        if not (0.0 <= self.theta1 <= 1.0 and 0.0 <= self.theta2 <= 1.0):
            raise ConfigurationError("theta1 and theta2 must lie in [0, 1]")
        if not 0.0 < self.theta3 <= 1.0:
            raise ConfigurationError("theta3 must lie in (0, 1]")
        if not (-1.0 <= self.theta4 <= 1.0 and abs(self.theta4) <= self.theta3):
            raise ConfigurationError("theta4 must lie in [-1, 1] with |theta4| <= theta3")
        if not self.picard_tol > 0 or self.picard_max < 1:
            raise ConfigurationError("picard_tol must be positive and picard_max >= 1")

    @classmethod
    def cn(cls, **kw) -> "SchemeParams":
        return cls(0.5, 0.5, 0.5, -0.5, name="cn", **kw)

    @classmethod
    def euler(cls, **kw) -> "SchemeParams":
        return cls(1.0, 1.0, 1.0, 0.0, name="euler", **kw)

    @property
    def thetas(self) -> tuple[float, float, float, float]:
        return (self.theta1, self.theta2, self.theta3, self.theta4)


CN = SchemeParams.cn()
EULER = SchemeParams.euler()


@dataclass(frozen=True)
class LevelResult:
    y: GridFunction
    z: GridFunction
    picard_iters: np.ndarray
    boundary_hits: int = 0


@dataclass
class SolutionLayers:
    tgrid: TimeGrid
    grid: SpaceGrid
    params: SchemeParams
    y_layers: list
    z_layers: list
    boxes: list
    picard_max: list
    boundary_hits: list
    gh_order: int
    degree: int
    synthetic_terminal_z: bool = True
    approximate_derivatives: bool = False
    min_ellipticity: float = float("nan")
    meta: dict = field(default_factory=dict)

    def y_at(self, n: int, x):
        return interpolate(self.y_layers[n], x, self.degree)

    def z_at(self, n: int, x):
        return interpolate(self.z_layers[n], x, self.degree)


def picard_bound(tol: float, contraction: float) -> int:
    """Iterations a contraction with this factor needs to reach ``tol`` from unit error."""
    if contraction <= 0.0:
        return 1
    return max(1, math.ceil(math.log(tol) / math.log(contraction)))


def picard_solve_y(known, f_eval: Callable, half_delta: float, tol: float = 1e-12, maxit: int = 50):
    """Fixed point of ``y -> known + half_delta * f_eval(y)`` starting from ``known``.

    Works elementwise on arrays; each entry freezes once its update falls
    below ``tol * max(1, |y|)``. Returns ``(y, iterations)``.
    """
    scalar = np.ndim(known) == 0
    known = np.atleast_1d(np.asarray(known, dtype=float))
    y = known.copy()
    iters = np.zeros(known.shape, dtype=np.int64)
    active = np.ones(known.shape, dtype=bool)
    diff = np.zeros(known.shape)
    for k in range(1, maxit + 1):
        y_new = known + half_delta * np.asarray(f_eval(y), dtype=float).reshape(known.shape)
        diff = np.abs(y_new - y)
        y = np.where(active, y_new, y)
        iters[active] = k
        active &= ~(diff <= tol * np.maximum(1.0, np.abs(y)))
        if not active.any():
            break
    else:
        res = float(diff[active].max())
        raise PicardError(
            f"Picard iteration did not converge in {maxit} iterations (last update {res:.3e})",
            residual=res,
            iterations=maxit,
        )
    if scalar:
        return float(y[0]), int(iters[0])
    return y, iters


@dataclass
class _Expectations:
    e_y: np.ndarray
    e_z: np.ndarray
    e_yw: np.ndarray
    e_f: np.ndarray
    e_fw: np.ndarray
    boundary_hits: int


def _expectations(prob, rule, delta, t_n, t_next, pts, next_y, next_z, degree):
    d = prob.dim
    P = pts.shape[0]
    dW, w = rule.increments(delta, d)
    imgs = weak2_forward(prob, delta)(t_n, pts, dW)
    Q = dW.shape[0]
    flat = imgs.reshape(P * Q, d)
    st = build_stencil(next_y.grid, flat, degree)
    y1 = st.apply(next_y.values)
    z1 = st.apply(next_z.values).reshape(P * Q, d)
    f1 = prob.f(t_next, flat, y1, z1).reshape(P, Q)
    y1 = y1.reshape(P, Q)
    z1 = z1.reshape(P, Q, d)
    return _Expectations(
        e_y=expectation(y1, w),
        e_z=expectation(z1, w),
        e_yw=weighted_expectation(y1, w, dW),
        e_f=expectation(f1, w),
        e_fw=weighted_expectation(f1, w, dW),
        boundary_hits=st.boundary_hits,
    )


def _solve_y(prob, t_n, pts, z, known, coef, params):
    def f_eval(y):
        return prob.f(t_n, pts, y, z)

    return picard_solve_y(known, f_eval, coef, params.picard_tol, params.picard_max)


def terminal_step(
    prob: FbsdeProblem,
    grid: SpaceGrid,
    rule: HermiteRule,
    delta: float,
    *,
    t: Optional[float] = None,
    params: SchemeParams = CN,
) -> LevelResult:
    """Level ``N-1`` from ``phi`` over the micro-step of width ``delta**2``.

    ``Z = E[phi(X^N) dW^T] / delta^2`` and ``Y = E[phi(X^N)] + delta^2 f(Y, Z)``.
    """
    step = delta * delta
    t = prob.horizon - step if t is None else t
    pts = grid.points()
    d = prob.dim
    P = pts.shape[0]
    dW, w = rule.increments(step, d)
    imgs = euler_forward(prob, step)(t, pts, dW)
    vals = prob.phi(imgs.reshape(-1, d)).reshape(P, dW.shape[0])
    z = weighted_expectation(vals, w, dW) / step
    y, iters = _solve_y(prob, t, pts, z, expectation(vals, w), step, params)
    return LevelResult(GridFunction(grid, y), GridFunction(grid, z), iters, 0)


def cn_step(
    prob: FbsdeProblem,
    grid: SpaceGrid,
    rule: HermiteRule,
    delta: float,
    t_n: float,
    next_layers,
    *,
    t_next: Optional[float] = None,
    degree: int = DEFAULT_DEGREE,
    params: SchemeParams = CN,
) -> LevelResult:
    """One Crank-Nicolson step onto the nodes of ``grid``.

    ``Z^n = -E[Z^{n+1}] + (2/delta) E[Y^{n+1} dW^T] + E[f^{n+1} dW^T]`` and
    ``Y^n = E[Y^{n+1}] + delta/2 f^n + delta/2 E[f^{n+1}]``, the latter by Picard.
    """
    next_y, next_z = next_layers
    t_next = t_n + delta if t_next is None else t_next
    pts = grid.points()
    ex = _expectations(prob, rule, delta, t_n, t_next, pts, next_y, next_z, degree)
    z = -ex.e_z + (2.0 / delta) * ex.e_yw + ex.e_fw
    half = 0.5 * delta
    known = ex.e_y + half * ex.e_f
    y, iters = _solve_y(prob, t_n, pts, z, known, half, params)
    return LevelResult(GridFunction(grid, y), GridFunction(grid, z), iters, ex.boundary_hits)


def theta_step(
    prob: FbsdeProblem,
    grid: SpaceGrid,
    rule: HermiteRule,
    delta: float,
    t_n: float,
    next_layers,
    params: SchemeParams,
    *,
    t_next: Optional[float] = None,
    degree: int = DEFAULT_DEGREE,
) -> LevelResult:
    """Generic theta step:

    ``Y^n = E[Y^{n+1}] + delta ((1-t1) E[f^{n+1}] + t1 f^n)`` and
    ``t3 delta Z^n = t4 delta E[Z^{n+1}] + (t3-t4) E[Y^{n+1} dW^T] + (1-t2) delta E[f^{n+1} dW^T]``.
    """
    t1, t2, t3, t4 = params.thetas
    next_y, next_z = next_layers
    t_next = t_n + delta if t_next is None else t_next
    pts = grid.points()
    ex = _expectations(prob, rule, delta, t_n, t_next, pts, next_y, next_z, degree)
    z = (t4 / t3) * ex.e_z + ((t3 - t4) / (t3 * delta)) * ex.e_yw + ((1.0 - t2) / t3) * ex.e_fw
    known = ex.e_y + (delta * (1.0 - t1)) * ex.e_f
    y, iters = _solve_y(prob, t_n, pts, z, known, delta * t1, params)
    return LevelResult(GridFunction(grid, y), GridFunction(grid, z), iters, ex.boundary_hits)


def _active_box(prob, rule, delta, t_n, grid, next_box):
    """Largest sub-box of ``next_box`` whose quadrature images stay inside it (+ one spacing)."""
    d = prob.dim
    start, stop = (np.array(b) for b in next_box)
    sub = grid.subgrid(start, stop)
    pts = sub.points()
    dW, _ = rule.increments(delta, d)
    imgs = weak2_forward(prob, delta)(t_n, pts, dW)
    h = grid.h
    lo = grid.lo + (np.asarray(next_box[0]) - 1) * h
    hi = grid.lo + (np.asarray(next_box[1])) * h
    ok = np.all((imgs >= lo) & (imgs <= hi), axis=(1, 2)).reshape(sub.m)
    lo_i = np.zeros(d, dtype=int)
    hi_i = np.array(sub.m)
    while True:
        region = ok[tuple(slice(a, b) for a, b in zip(lo_i, hi_i))]
        if region.size == 0 or np.any(hi_i <= lo_i):
            return None
        bad = ~region
        if not bad.any():
            break
        for k in range(d):
            other = tuple(i for i in range(d) if i != k)
            along = bad.any(axis=other) if other else bad
            if along[0]:
                lo_i[k] += 1
            if along[-1]:
                hi_i[k] -= 1
            if not (along[0] or along[-1]):
                lo_i[k] += 1
                hi_i[k] -= 1
    return (tuple(start + lo_i), tuple(start + hi_i))


def solve(
    prob: FbsdeProblem,
    tgrid: TimeGrid,
    sgrid: SpaceGrid,
    rule: HermiteRule,
    params: SchemeParams = CN,
    *,
    degree: int = DEFAULT_DEGREE,
    solution: Optional[AnalyticSolution] = None,
) -> SolutionLayers:
    """Full backward sweep: the terminal micro-step, then ``N - 1`` CN or theta steps.

    ``params.name == "cn"`` routes through :func:`cn_step`; anything else
    through :func:`theta_step`.
    """
    delta = tgrid.delta
    N = tgrid.N
    L = prob.lipschitz
    if max(params.theta1 * delta, delta * delta) * L >= 1.0:
        raise ConfigurationError(
            f"Picard contraction fails: theta1*delta*L = {params.theta1 * delta * L:.3g} >= 1"
        )
    full = (tuple([0] * prob.dim), tuple(sgrid.m))
    y_layers = [None] * (N + 1)
    z_layers = [None] * (N + 1)
    boxes = [None] * (N + 1)
    picard_max = [0] * (N + 1)
    hits = [0] * (N + 1)
    T = tgrid.levels[N]

    pts = sgrid.points()
    y_layers[N] = GridFunction(sgrid, prob.phi(pts))
    if solution is not None:
        z_layers[N] = GridFunction(sgrid, exact_yz(solution, prob, T, pts)[1])
    else:
        z_layers[N] = GridFunction(sgrid, np.zeros((pts.shape[0], prob.dim)))
    boxes[N] = full

    try:
        res = terminal_step(prob, sgrid, rule, delta, t=tgrid.levels[N - 1], params=params)
    except PicardError as exc:
        exc.level = N - 1
        raise
    y_layers[N - 1], z_layers[N - 1] = res.y, res.z
    boxes[N - 1] = full
    picard_max[N - 1] = int(res.picard_iters.max())

    step = cn_step if params.name == "cn" else None
    for n in range(N - 2, -1, -1):
        box = _active_box(prob, rule, delta, tgrid.levels[n], sgrid, boxes[n + 1])
        if box is None:
            raise DomainEscapeError(
                f"no grid node at level {n} keeps its quadrature images inside the grid; "
                "increase the grid radius"
            )
        sub = sgrid.subgrid(*box)
        layers = (y_layers[n + 1], z_layers[n + 1])
        try:
            if step is not None:
                res = step(prob, sub, rule, delta, tgrid.levels[n], layers,
                           t_next=tgrid.levels[n + 1], degree=degree, params=params)
            else:
                res = theta_step(prob, sub, rule, delta, tgrid.levels[n], layers, params,
                                 t_next=tgrid.levels[n + 1], degree=degree)
        except PicardError as exc:
            exc.level = n
            raise PicardError(f"level {n}: {exc}", exc.residual, exc.iterations, n) from exc
        except DomainEscapeError as exc:
            raise DomainEscapeError(f"level {n}: {exc}", exc.x) from exc
        y_layers[n], z_layers[n] = res.y, res.z
        boxes[n] = box
        picard_max[n] = int(res.picard_iters.max())
        hits[n] = res.boundary_hits

    g0 = y_layers[0].grid
    if np.any(prob.x0 < g0.lo - g0.h * 1e-9) or np.any(prob.x0 > g0.hi + g0.h * 1e-9):
        raise DomainEscapeError(
            f"x0 = {prob.x0.tolist()} is outside the level-0 region "
            f"[{g0.lo.tolist()}, {g0.hi.tolist()}]; increase the grid radius",
            x=prob.x0.copy(),
        )
    return SolutionLayers(
        tgrid=tgrid,
        grid=sgrid,
        params=params,
        y_layers=y_layers,
        z_layers=z_layers,
        boxes=boxes,
        picard_max=picard_max,
        boundary_hits=hits,
        gh_order=rule.order,
        degree=degree,
        synthetic_terminal_z=True,
        approximate_derivatives=prob.approximate_derivatives,
        min_ellipticity=prob.min_ellipticity(0.0, pts[:: max(1, pts.shape[0] // 64)]),
    )
