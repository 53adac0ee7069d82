"""Uniform tensor grids, per-level grid functions and local Lagrange interpolation.

Node storage is row-major over the tensor nodes: the flat index of
``(i_0, ..., i_{d-1})`` is ``sum_k i_k * prod_{l > k} m_l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fbsde.errors import ConfigurationError, DomainEscapeError
from fbsde.ito_taylor import weak2_forward
from fbsde.model import FbsdeProblem, as_points
from fbsde.quadrature import gauss_hermite

DEFAULT_DEGREE = 6
_SNAP = 8.0 * np.finfo(float).eps


@dataclass(frozen=True)
class SpaceGrid:
    lo: np.ndarray
    hi: np.ndarray
    m: tuple[int, ...]

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        m = (int(self.m),) * lo.size if np.isscalar(self.m) else tuple(int(k) for k in self.m)
        if lo.shape != hi.shape or len(m) != lo.size:
            raise ConfigurationError("lo, hi and m must agree in dimension")
        if not np.all(lo < hi):
            raise ConfigurationError("grid needs lo < hi in every dimension")
        if min(m) < 2:
            raise ConfigurationError("grid needs at least two nodes per dimension")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "m", m)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def h(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.m) - 1)

    @property
    def size(self) -> int:
        return math.prod(self.m)

    def axes(self) -> list[np.ndarray]:
        h = self.h
        return [self.lo[k] + np.arange(self.m[k]) * h[k] for k in range(self.dim)]

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def subgrid(self, start, stop) -> "SpaceGrid":
        """Box of nodes ``start[k] <= i_k < stop[k]``; nodes coincide with this grid's."""
        start = np.asarray(start, dtype=int)
        stop = np.asarray(stop, dtype=int)
        h = self.h
        return SpaceGrid(self.lo + start * h, self.lo + (stop - 1) * h, tuple(stop - start))


@dataclass(frozen=True)
class GridFunction:
    """Values on the nodes of ``grid``: shape ``(M,)`` for scalars or ``(M, k)``."""

    grid: SpaceGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[0] != self.grid.size:
            raise ConfigurationError(
                f"{v.shape[0]} values for a grid of {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("grid function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Stencil:
    """Flat node indices and Lagrange weights for a batch of evaluation points."""

    index: np.ndarray  # (P, K)
    weight: np.ndarray  # (P, K)
    boundary_hits: int

    def apply(self, values: np.ndarray) -> np.ndarray:
        gathered = values[self.index]
        if gathered.ndim == 2:
            return np.einsum("pk,pk->p", self.weight, gathered)
        return np.einsum("pk,pk...->p...", self.weight, gathered)


def _lagrange_weights(tau: np.ndarray, degree: int) -> np.ndarray:
    """Basis values on the nodes ``0..degree`` at local coordinates ``tau``."""
    out = np.empty(tau.shape + (degree + 1,))
    for a in range(degree + 1):
        num = np.ones_like(tau)
        den = 1.0
        for j in range(degree + 1):
            if j != a:
                num = num * (tau - j)
                den *= a - j
        out[..., a] = num / den
    return out


def build_stencil(grid: SpaceGrid, x, degree: int = DEFAULT_DEGREE) -> Stencil:
    pts, _ = as_points(x, grid.dim)
    if min(grid.m) < degree + 1:
        raise ConfigurationError(
            f"grid with {min(grid.m)} nodes cannot carry a degree-{degree} stencil"
        )
    h = grid.h
    P = pts.shape[0]
    index = np.zeros((P, 1), dtype=np.int64)
    weight = np.ones((P, 1))
    clipped = np.zeros(P, dtype=bool)
    for k in range(grid.dim):
        mk = grid.m[k]
        s = (pts[:, k] - grid.lo[k]) / h[k]
        near = np.rint(s)
        s = np.where(np.abs(s - near) <= _SNAP * np.maximum(1.0, np.abs(s)), near, s)
        bad = (s < -1.0 - 1e-12) | (s > mk + 1e-12) | ~np.isfinite(s)
        if bad.any():
            where = int(np.flatnonzero(bad)[0])
            raise DomainEscapeError(
                f"point {pts[where].tolist()} lies outside the grid "
                f"[{grid.lo.tolist()}, {grid.hi.tolist()}] plus one spacing; "
                "increase the grid radius",
                x=pts[where].copy(),
            )
        raw = np.floor(s + 0.5 - 0.5 * degree).astype(np.int64)
        start = np.clip(raw, 0, mk - 1 - degree)
        clipped |= start != raw
        w = _lagrange_weights(s - start, degree)
        idx = start[:, None] + np.arange(degree + 1)[None, :]
        index = (index[:, :, None] * mk + idx[:, None, :]).reshape(P, -1)
        weight = (weight[:, :, None] * w[:, None, :]).reshape(P, -1)
    return Stencil(index=index, weight=weight, boundary_hits=int(clipped.sum()))


def interpolate(gf: GridFunction, x, degree: int = DEFAULT_DEGREE):
    """Degree-``degree`` tensor Lagrange interpolation on the nearest nodes.

    Points within one spacing outside the grid use the one-sided boundary
    stencil; anything further raises :class:`DomainEscapeError`.
    """
    pts, single = as_points(x, gf.grid.dim)
    out = build_stencil(gf.grid, pts, degree).apply(gf.values)
    if single:
        out = out[0]
        return float(out) if out.ndim == 0 else out
    return out


def _coefficient_scale(prob: FbsdeProblem, radius: float = 1.0) -> tuple[float, float]:
    """Largest diffusion norm and drift norm over a small cloud around ``x0``."""
    d = prob.dim
    offsets = np.stack(np.meshgrid(*([[-radius, 0.0, radius]] * d), indexing="ij"), -1)
    cloud = prob.x0 + offsets.reshape(-1, d)
    sig = prob.sigma(0.0, cloud)
    sbar = float(np.linalg.norm(sig, ord=2, axis=(1, 2)).max())
    bbar = float(np.linalg.norm(prob.b(0.0, cloud), axis=1).max())
    return sbar, bbar


def regular_steps(T: float, delta: float) -> int:
    """Number of full-width steps in the partition ``(N-1) delta + delta^2 = T``."""
    return max(0, int(round((T - delta * delta) / delta)))


def build_grid(
    prob: FbsdeProblem,
    delta: float,
    safety_k: float = 8.0,
    *,
    gh_order: int = 8,
    degree: int = DEFAULT_DEGREE,
    nodes: int | None = None,
    floor: float = 1.0,
    samples: int = 9,
) -> SpaceGrid:
    """Uniform grid centred on ``x0`` that contains the backward sweep's dependence cone.

    The level-0 half-width is ``max(safety_k * sigma_bar * sqrt(T) + |b_bar| T, floor)``.
    The box is then pushed forward through every full-width weak order-2 step
    at the extreme quadrature increments, so each level's quadrature images
    stay inside the next level's computed region. Spacing is at most
    ``delta`` unless ``nodes`` fixes the count per dimension.
    """
    if safety_k < 4:
        raise ConfigurationError("safety_k must be at least 4")
    T = prob.horizon
    d = prob.dim
    sbar, bbar = _coefficient_scale(prob)
    r0 = max(safety_k * sbar * math.sqrt(T) + bbar * T, floor)
    lo = prob.x0 - r0
    hi = prob.x0 + r0

    forward = weak2_forward(prob, delta)
    dW, _ = gauss_hermite(gh_order).increments(delta, d)
    for n in range(regular_steps(T, delta)):
        axes = [np.linspace(lo[k], hi[k], samples) for k in range(d)]
        cloud = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], -1)
        imgs = forward(n * delta, cloud, dW).reshape(-1, d)
        new_lo = np.minimum(lo, imgs.min(axis=0))
        new_hi = np.maximum(hi, imgs.max(axis=0))
        # small relative margin against sampling between cloud points
        lo = new_lo - 0.05 * (lo - new_lo)
        hi = new_hi + 0.05 * (new_hi - hi)

    half = np.maximum(prob.x0 - lo, hi - prob.x0)
    if nodes is None:
        cells = np.maximum(np.ceil(half / delta).astype(int), (degree + 1) // 2 + 1)
        m = tuple(int(2 * c + 1) for c in cells)
    else:
        m = (int(nodes),) * d
    return SpaceGrid(prob.x0 - half, prob.x0 + half, m)
