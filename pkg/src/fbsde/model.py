"""FBSDE problem definitions and analytic test problems.

Every callback is vectorised over a leading batch axis: states arrive as
arrays of shape ``(P, d)`` and results carry the same leading ``P``.

    drift(t, x)            -> (P, d)
    diffusion(t, x)        -> (P, d, d)
    generator(t, x, y, z)  -> (P,)      with y (P,), z (P, d)
    terminal(x)            -> (P,)

Derivative callbacks follow the trailing-axis convention: the derivative
index is appended after the value axes, so ``sigma_dx(t, x)[p, i, j, k]`` is
the partial of ``sigma_ij`` with respect to ``x_k``. Missing derivative
callbacks fall back to central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from fbsde.errors import ConfigurationError, MissingDerivativeError

Array = np.ndarray
_EPS = np.finfo(float).eps
# central first differences: eps^(1/3); second differences: eps^(1/4)
_H1 = _EPS ** (1.0 / 3.0)
_H2 = _EPS ** 0.25


def as_points(x, dim: int) -> tuple[Array, bool]:
    """Promote ``x`` to shape ``(P, dim)``; the flag says whether it was a single point."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ConfigurationError(f"state has length {arr.shape[0]}, expected {dim}")
        return arr[None, :], True
    if arr.shape[-1] != dim:
        raise ConfigurationError(f"state has trailing size {arr.shape[-1]}, expected {dim}")
    return arr.reshape(-1, dim), False


def _steps(x: Array, base: float) -> Array:
    h = base * np.maximum(1.0, np.abs(x))
    # make x +/- h exactly representable
    return (x + h) - x


def fd_dt(func: Callable, t: float, x: Array) -> Array:
    h = _steps(np.asarray(t, dtype=float), _H1)
    return (func(t + h, x) - func(t - h, x)) / (2.0 * h)


def fd_dx(func: Callable, t: float, x: Array) -> Array:
    """Central difference gradient of ``func(t, x)`` appended as a trailing axis."""
    d = x.shape[1]
    h = _steps(x, _H1)
    cols = []
    for k in range(d):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h[:, k]
        xm[:, k] -= h[:, k]
        diff = func(t, xp) - func(t, xm)
        scale = (2.0 * h[:, k]).reshape((-1,) + (1,) * (diff.ndim - 1))
        cols.append(diff / scale)
    return np.stack(cols, axis=-1)


def fd_dxx(func: Callable, t: float, x: Array) -> Array:
    d = x.shape[1]
    h = _steps(x, _H2)
    f0 = func(t, x)
    shape = lambda v: v.reshape((-1,) + (1,) * (f0.ndim - 1))  # noqa: E731
    out = np.empty(f0.shape + (d, d))
    for k in range(d):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h[:, k]
        xm[:, k] -= h[:, k]
        out[..., k, k] = (func(t, xp) - 2.0 * f0 + func(t, xm)) / shape(h[:, k] ** 2)
        for m in range(k + 1, d):
            pts = []
            for sk, sm in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                xs = x.copy()
                xs[:, k] += sk * h[:, k]
                xs[:, m] += sm * h[:, m]
                pts.append(func(t, xs))
            val = (pts[0] - pts[1] - pts[2] + pts[3]) / shape(4.0 * h[:, k] * h[:, m])
            out[..., k, m] = val
            out[..., m, k] = val
    return out


@dataclass(frozen=True)
class FbsdeProblem:
    dim: int
    horizon: float
    x0: Array
    drift: Callable
    diffusion: Callable
    generator: Callable
    terminal: Callable
    drift_dt: Optional[Callable] = None
    drift_dx: Optional[Callable] = None
    drift_dxx: Optional[Callable] = None
    sigma_dt: Optional[Callable] = None
    sigma_dx: Optional[Callable] = None
    sigma_dxx: Optional[Callable] = None
    # Lipschitz bound of the generator in (y, z), used for the Picard contraction check
    lipschitz: float = 1.0
    name: str = ""
    smoothness: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("dim must be a positive integer")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim,):
            raise ConfigurationError(f"x0 must have length {self.dim}")
        object.__setattr__(self, "x0", x0)

    @property
    def approximate_derivatives(self) -> bool:
        """True when any coefficient derivative comes from finite differences."""
        return any(
            cb is None
            for cb in (
                self.drift_dt,
                self.drift_dx,
                self.drift_dxx,
                self.sigma_dt,
                self.sigma_dx,
                self.sigma_dxx,
            )
        )

    def b(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float).reshape(x.shape[0], self.dim)

    def sigma(self, t, x):
        d = self.dim
        return np.asarray(self.diffusion(t, x), dtype=float).reshape(x.shape[0], d, d)

    def f(self, t, x, y, z):
        return np.asarray(self.generator(t, x, y, z), dtype=float)

    def phi(self, x):
        return np.asarray(self.terminal(x), dtype=float).reshape(x.shape[0])

    def b_t(self, t, x):
        if self.drift_dt is not None:
            return np.asarray(self.drift_dt(t, x), dtype=float).reshape(x.shape[0], self.dim)
        return fd_dt(self.b, t, x)

    def b_x(self, t, x):
        d = self.dim
        if self.drift_dx is not None:
            return np.asarray(self.drift_dx(t, x), dtype=float).reshape(x.shape[0], d, d)
        return fd_dx(self.b, t, x)

    def b_xx(self, t, x):
        d = self.dim
        if self.drift_dxx is not None:
            return np.asarray(self.drift_dxx(t, x), dtype=float).reshape(x.shape[0], d, d, d)
        return fd_dxx(self.b, t, x)

    def sigma_t(self, t, x):
        d = self.dim
        if self.sigma_dt is not None:
            return np.asarray(self.sigma_dt(t, x), dtype=float).reshape(x.shape[0], d, d)
        return fd_dt(self.sigma, t, x)

    def sigma_x(self, t, x):
        d = self.dim
        if self.sigma_dx is not None:
            return np.asarray(self.sigma_dx(t, x), dtype=float).reshape(x.shape[0], d, d, d)
        return fd_dx(self.sigma, t, x)

    def sigma_xx(self, t, x):
        d = self.dim
        if self.sigma_dxx is not None:
            return np.asarray(self.sigma_dxx(t, x), dtype=float).reshape(
                x.shape[0], d, d, d, d
            )
        return fd_dxx(self.sigma, t, x)

    def without_derivatives(self) -> "FbsdeProblem":
        """Copy of the problem that relies on finite-difference derivatives only."""
        return replace(
            self,
            drift_dt=None,
            drift_dx=None,
            drift_dxx=None,
            sigma_dt=None,
            sigma_dx=None,
            sigma_dxx=None,
        )

    def min_ellipticity(self, t, x) -> float:
        """Smallest eigenvalue of sigma sigma^T over the sampled points."""
        pts, _ = as_points(x, self.dim)
        s = self.sigma(t, pts)
        a = np.einsum("pij,pkj->pik", s, s)
        return float(np.linalg.eigvalsh(a).min())


@dataclass(frozen=True)
class AnalyticSolution:
    """Closed-form solution ``u`` of the associated parabolic PDE.

    ``u(t, x) -> (P,)``, ``u_x -> (P, d)``, ``u_t -> (P,)``, ``u_xx -> (P, d, d)``.
    """

    u: Callable
    u_x: Callable
    u_t: Optional[Callable] = None
    u_xx: Optional[Callable] = None


def exact_yz(sol: AnalyticSolution, prob: FbsdeProblem, t, x):
    """Return ``(u(t,x), u_x(t,x) sigma(t,x))``.

    A single state gives a scalar and a length-``d`` vector; a batch gives
    arrays of shape ``(P,)`` and ``(P, d)``.
    """
    pts, single = as_points(x, prob.dim)
    y = np.asarray(sol.u(t, pts), dtype=float).reshape(pts.shape[0])
    ux = np.asarray(sol.u_x(t, pts), dtype=float).reshape(pts.shape[0], prob.dim)
    z = np.einsum("pi,pij->pj", ux, prob.sigma(t, pts))
    if single:
        return float(y[0]), z[0]
    return y, z


def feynman_kac_residual(sol: AnalyticSolution, prob: FbsdeProblem, t, x):
    """Residual of ``u_t + 1/2 tr(sigma sigma^T u_xx) + b.u_x + f(t, x, u, u_x sigma)``."""
    if sol.u_t is None or sol.u_xx is None:
        raise MissingDerivativeError("feynman_kac_residual needs u_t and u_xx")
    pts, single = as_points(x, prob.dim)
    d = prob.dim
    n = pts.shape[0]
    u = np.asarray(sol.u(t, pts), dtype=float).reshape(n)
    ux = np.asarray(sol.u_x(t, pts), dtype=float).reshape(n, d)
    ut = np.asarray(sol.u_t(t, pts), dtype=float).reshape(n)
    uxx = np.asarray(sol.u_xx(t, pts), dtype=float).reshape(n, d, d)
    s = prob.sigma(t, pts)
    a = np.einsum("pij,pkj->pik", s, s)
    z = np.einsum("pi,pij->pj", ux, s)
    r = (
        ut
        + 0.5 * np.einsum("pij,pij->p", a, uxx)
        + np.einsum("pi,pi->p", prob.b(t, pts), ux)
        + prob.f(t, pts, u, z)
    )
    return float(r[0]) if single else r


# --------------------------------------------------------------------------
# stock problems


def _zeros_like_drift(d):
    return lambda t, x: np.zeros((x.shape[0], d))


def _const_sigma(d, scale=1.0):
    eye = scale * np.eye(d)
    return lambda t, x: np.broadcast_to(eye, (x.shape[0], d, d)).copy()


def _zero(*shape_tail):
    return lambda t, x: np.zeros((x.shape[0],) + shape_tail)


def make_sin_problem(T: float = 1.0, d: int = 1, x0=None):
    """``u(t,x) = sin(t + sum(x))`` with ``b = 0``, ``sigma = I``.

    The generator ``f = (d/2) y - mean(z)`` reduces to ``y/2 - z`` in one
    dimension. C-infinity with all derivatives bounded. ``x0`` defaults to
    the origin.
    """
    if not T > 0:
        raise ConfigurationError("T must be positive")

    def generator(t, x, y, z):
        return 0.5 * d * y - np.mean(z, axis=1)

    def u(t, x):
        return np.sin(t + x.sum(axis=1))

    def u_x(t, x):
        return np.repeat(np.cos(t + x.sum(axis=1))[:, None], d, axis=1)

    def u_t(t, x):
        return np.cos(t + x.sum(axis=1))

    def u_xx(t, x):
        return np.broadcast_to(-np.sin(t + x.sum(axis=1))[:, None, None], (x.shape[0], d, d))

    prob = FbsdeProblem(
        dim=d,
        horizon=T,
        x0=np.zeros(d) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float), (d,)),
        drift=_zeros_like_drift(d),
        diffusion=_const_sigma(d),
        generator=generator,
        terminal=lambda x: np.sin(T + x.sum(axis=1)),
        drift_dt=_zero(d),
        drift_dx=_zero(d, d),
        drift_dxx=_zero(d, d, d),
        sigma_dt=_zero(d, d),
        sigma_dx=_zero(d, d, d),
        sigma_dxx=_zero(d, d, d, d),
        lipschitz=max(0.5 * d, 1.0),
        name=f"sin{d}d",
        smoothness="C-infinity, all derivatives bounded",
    )
    return prob, AnalyticSolution(u=u, u_x=u_x, u_t=u_t, u_xx=u_xx)


def make_atan_problem(T: float = 1.0, s0: float = 0.2, x0: float = 0.5):
    """One-dimensional problem with state-dependent diffusion.

    ``b = 0``, ``sigma(x) = s0 sqrt(1 + x^2)`` (uniformly elliptic, bounded
    below by ``s0``), ``u(t,x) = exp(-t) atan(x)`` and
    ``f(t,x,y,z) = y/2 - z + h(t,x)`` with ``h`` chosen so the PDE holds.
    Lipschitz constant 1 in (y, z). C-infinity; sigma grows linearly while
    its derivatives stay bounded.
    """
    if not T > 0:
        raise ConfigurationError("T must be positive")
    if not s0 > 0:
        raise ConfigurationError("s0 must be positive")

    def diffusion(t, x):
        return (s0 * np.sqrt(1.0 + x[:, 0] ** 2)).reshape(-1, 1, 1)

    def sigma_dx(t, x):
        r = np.sqrt(1.0 + x[:, 0] ** 2)
        return (s0 * x[:, 0] / r).reshape(-1, 1, 1, 1)

    def sigma_dxx(t, x):
        return (s0 / (1.0 + x[:, 0] ** 2) ** 1.5).reshape(-1, 1, 1, 1, 1)

    def source(t, x):
        xs = x[:, 0]
        e = math.exp(-t)
        q = 1.0 + xs**2
        return 0.5 * e * np.arctan(xs) + s0**2 * xs * e / q + s0 * e / np.sqrt(q)

    def generator(t, x, y, z):
        return 0.5 * y - z[:, 0] + source(t, x)

    def u(t, x):
        return math.exp(-t) * np.arctan(x[:, 0])

    def u_x(t, x):
        return (math.exp(-t) / (1.0 + x[:, 0] ** 2)).reshape(-1, 1)

    def u_t(t, x):
        return -u(t, x)

    def u_xx(t, x):
        xs = x[:, 0]
        return (-2.0 * xs * math.exp(-t) / (1.0 + xs**2) ** 2).reshape(-1, 1, 1)

    prob = FbsdeProblem(
        dim=1,
        horizon=T,
        x0=np.array([x0]),
        drift=_zeros_like_drift(1),
        diffusion=diffusion,
        generator=generator,
        terminal=lambda x: math.exp(-T) * np.arctan(x[:, 0]),
        drift_dt=_zero(1),
        drift_dx=_zero(1, 1),
        drift_dxx=_zero(1, 1, 1),
        sigma_dt=_zero(1, 1),
        sigma_dx=sigma_dx,
        sigma_dxx=sigma_dxx,
        lipschitz=1.0,
        name="atan1d",
        smoothness="C-infinity; sigma unbounded (linear growth), sigma_x and sigma_xx bounded",
    )
    return prob, AnalyticSolution(u=u, u_x=u_x, u_t=u_t, u_xx=u_xx)


def make_constant_problem(T: float = 1.0, c: float = 1.5):
    """``phi = c``, ``f = 0``, ``b = 0``, ``sigma = 1``: solution ``Y = c, Z = 0``."""
    prob = FbsdeProblem(
        dim=1,
        horizon=T,
        x0=np.zeros(1),
        drift=_zeros_like_drift(1),
        diffusion=_const_sigma(1),
        generator=lambda t, x, y, z: np.zeros(np.shape(y)),
        terminal=lambda x: np.full(x.shape[0], c),
        drift_dt=_zero(1),
        drift_dx=_zero(1, 1),
        drift_dxx=_zero(1, 1, 1),
        sigma_dt=_zero(1, 1),
        sigma_dx=_zero(1, 1, 1),
        sigma_dxx=_zero(1, 1, 1, 1),
        lipschitz=0.0,
        name="const1d",
        smoothness="constant",
    )
    sol = AnalyticSolution(
        u=lambda t, x: np.full(x.shape[0], c),
        u_x=lambda t, x: np.zeros((x.shape[0], 1)),
        u_t=lambda t, x: np.zeros(x.shape[0]),
        u_xx=lambda t, x: np.zeros((x.shape[0], 1, 1)),
    )
    return prob, sol


def make_linear_problem(T: float = 1.0):
    """``phi(x) = x``, ``f = 0``, ``b = 0``, ``sigma = 1``: solution ``Y = x, Z = 1``."""
    prob = FbsdeProblem(
        dim=1,
        horizon=T,
        x0=np.zeros(1),
        drift=_zeros_like_drift(1),
        diffusion=_const_sigma(1),
        generator=lambda t, x, y, z: np.zeros(np.shape(y)),
        terminal=lambda x: x[:, 0].copy(),
        drift_dt=_zero(1),
        drift_dx=_zero(1, 1),
        drift_dxx=_zero(1, 1, 1),
        sigma_dt=_zero(1, 1),
        sigma_dx=_zero(1, 1, 1),
        sigma_dxx=_zero(1, 1, 1, 1),
        lipschitz=0.0,
        name="linear1d",
        smoothness="affine",
    )
    sol = AnalyticSolution(
        u=lambda t, x: x[:, 0].copy(),
        u_x=lambda t, x: np.ones((x.shape[0], 1)),
        u_t=lambda t, x: np.zeros(x.shape[0]),
        u_xx=lambda t, x: np.zeros((x.shape[0], 1, 1)),
    )
    return prob, sol


def make_gbm_problem(T: float = 1.0, mu: float = 0.05, s0: float = 0.2, x0: float = 1.0):
    """Geometric Brownian motion forward, ``phi(x) = x``, ``f = 0``.

    The backward solution is ``u(t,x) = x exp(mu (T - t))``. Degenerate at
    ``x = 0``, so not uniformly elliptic.
    """

    def u(t, x):
        return x[:, 0] * math.exp(mu * (T - t))

    prob = FbsdeProblem(
        dim=1,
        horizon=T,
        x0=np.array([x0]),
        drift=lambda t, x: mu * x,
        diffusion=lambda t, x: (s0 * x[:, 0]).reshape(-1, 1, 1),
        generator=lambda t, x, y, z: np.zeros(np.shape(y)),
        terminal=lambda x: x[:, 0].copy(),
        drift_dt=_zero(1),
        drift_dx=lambda t, x: np.full((x.shape[0], 1, 1), mu),
        drift_dxx=_zero(1, 1, 1),
        sigma_dt=_zero(1, 1),
        sigma_dx=lambda t, x: np.full((x.shape[0], 1, 1, 1), s0),
        sigma_dxx=_zero(1, 1, 1, 1),
        lipschitz=0.0,
        name="gbm1d",
        smoothness="affine coefficients; degenerate at the origin",
    )
    sol = AnalyticSolution(
        u=u,
        u_x=lambda t, x: np.full((x.shape[0], 1), math.exp(mu * (T - t))),
        u_t=lambda t, x: -mu * u(t, x),
        u_xx=lambda t, x: np.zeros((x.shape[0], 1, 1)),
    )
    return prob, sol


@dataclass(frozen=True)
class RegistryEntry:
    factory: Callable
    description: str = ""
    kwargs: dict = field(default_factory=dict)

    def build(self, T: float = 1.0):
        return self.factory(T, **self.kwargs)


PROBLEMS: dict[str, RegistryEntry] = {
    # x0 = 0 is avoided: the leading first-order error of rectangle-rule
    # schemes on this problem is proportional to sin(x) and vanishes there
    "sin1d": RegistryEntry(make_sin_problem, "u = sin(t + x), b = 0, sigma = 1", {"x0": 0.5}),
    "sin2d": RegistryEntry(
        make_sin_problem, "u = sin(t + x1 + x2), sigma = I", {"d": 2, "x0": 0.25}
    ),
    "atan1d": RegistryEntry(make_atan_problem, "u = exp(-t) atan(x), sigma = s0 sqrt(1+x^2)"),
    "const1d": RegistryEntry(make_constant_problem, "phi = 1.5, f = 0"),
    "linear1d": RegistryEntry(make_linear_problem, "phi = x, f = 0"),
    "gbm1d": RegistryEntry(make_gbm_problem, "GBM forward, phi = x, f = 0"),
}


def get_problem(name: str, T: float = 1.0):
    """Build ``(problem, solution)`` for a registered problem name."""
    try:
        entry = PROBLEMS[name]
    except KeyError:
        known = ", ".join(sorted(PROBLEMS))
        raise ConfigurationError(f"unknown problem {name!r}; registered: {known}") from None
    return entry.build(T)
