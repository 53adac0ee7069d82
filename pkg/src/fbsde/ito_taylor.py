"""Multi-indices, the operators L^0 / L^j, Ito coefficient functions and the
forward one-step maps (Euler and weak order 2).

States are batches of shape ``(P, d)``; a single state of shape ``(d,)`` is
accepted everywhere and the leading axis is dropped from the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from fbsde.errors import ConfigurationError, MissingDerivativeError, UnsupportedIndexError
from fbsde.model import FbsdeProblem, as_points

Array = np.ndarray
MAX_INDEX_LENGTH = 2


@dataclass(frozen=True)
class MultiIndex:
    """Index ``(j_1, ..., j_l)`` with entries in ``{0, ..., d}``; 0 stands for time."""

    components: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(int(j) for j in self.components))
        if any(j < 0 for j in self.components):
            raise ConfigurationError("multi-index components must be non-negative")

    @property
    def length(self) -> int:
        return len(self.components)

    def minus_first(self) -> "MultiIndex":
        """``-alpha``: drop the first component."""
        return MultiIndex(self.components[1:])

    def minus_last(self) -> "MultiIndex":
        """``alpha-``: drop the last component."""
        return MultiIndex(self.components[:-1])

    def __repr__(self):
        return "v" if not self.components else repr(self.components)


EMPTY = MultiIndex(())


def gamma2(d: int) -> list[MultiIndex]:
    """All multi-indices of length at most 2, in a fixed enumeration order."""
    out = [EMPTY]
    out += [MultiIndex((j,)) for j in range(d + 1)]
    out += [MultiIndex((j1, j2)) for j1 in range(d + 1) for j2 in range(d + 1)]
    return out


@dataclass(frozen=True)
class Field:
    """A (possibly array-valued) function of ``(t, x)`` with its derivatives.

    ``value -> (P, *S)``, ``dt -> (P, *S)``, ``dx -> (P, *S, d)``,
    ``dxx -> (P, *S, d, d)``.
    """

    value: Callable
    dt: Optional[Callable] = None
    dx: Optional[Callable] = None
    dxx: Optional[Callable] = None


def _expand(coef: Array, ndim: int) -> Array:
    # insert value axes between the batch axis and the trailing derivative axes
    extra = ndim - coef.ndim
    return coef.reshape(coef.shape[:1] + (1,) * extra + coef.shape[1:])


def _L0(psi: Field, t, pts: Array, prob: FbsdeProblem) -> Array:
    if psi.dt is None or psi.dx is None or psi.dxx is None:
        raise MissingDerivativeError("L0 needs dt, dx and dxx of the field")
    dt = np.asarray(psi.dt(t, pts), dtype=float)
    dx = np.asarray(psi.dx(t, pts), dtype=float)
    dxx = np.asarray(psi.dxx(t, pts), dtype=float)
    b = prob.b(t, pts)
    s = prob.sigma(t, pts)
    a = np.einsum("pkj,plj->pkl", s, s)
    drift = (_expand(b, dx.ndim) * dx).sum(axis=-1)
    diff = 0.5 * (_expand(a, dxx.ndim) * dxx).sum(axis=(-2, -1))
    return dt + drift + diff


def _Lj(psi: Field, j: int, t, pts: Array, prob: FbsdeProblem) -> Array:
    if not 1 <= j <= prob.dim:
        raise ConfigurationError(f"channel {j} outside 1..{prob.dim}")
    if psi.dx is None:
        raise MissingDerivativeError("L^j needs dx of the field")
    dx = np.asarray(psi.dx(t, pts), dtype=float)
    col = prob.sigma(t, pts)[:, :, j - 1]
    return (_expand(col, dx.ndim) * dx).sum(axis=-1)


def apply_L0(psi: Field, t, x, prob: FbsdeProblem):
    """``L^0 psi = psi_t + sum_k b_k psi_{x_k} + 1/2 sum_{k,l} (sigma sigma^T)_{kl} psi_{x_k x_l}``."""
    pts, single = as_points(x, prob.dim)
    out = _L0(psi, t, pts, prob)
    return _squeeze(out, single)


def apply_Lj(psi: Field, j: int, t, x, prob: FbsdeProblem):
    """``L^j psi = sum_i sigma_{ij} psi_{x_i}`` for channel ``1 <= j <= d``."""
    pts, single = as_points(x, prob.dim)
    out = _Lj(psi, j, t, pts, prob)
    return _squeeze(out, single)


def _squeeze(out: Array, single: bool):
    if not single:
        return out
    out = out[0]
    return float(out) if out.ndim == 0 else out


def drift_field(prob: FbsdeProblem) -> Field:
    return Field(value=prob.b, dt=prob.b_t, dx=prob.b_x, dxx=prob.b_xx)


def sigma_column_field(prob: FbsdeProblem, j: int) -> Field:
    """Column ``j`` (1-based) of the diffusion matrix as a vector field."""
    c = j - 1
    return Field(
        value=lambda t, x: prob.sigma(t, x)[:, :, c],
        dt=lambda t, x: prob.sigma_t(t, x)[:, :, c],
        dx=lambda t, x: prob.sigma_x(t, x)[:, :, c, :],
        dxx=lambda t, x: prob.sigma_xx(t, x)[:, :, c, :, :],
    )


def _length_one_field(j: int, prob: FbsdeProblem) -> Field:
    return drift_field(prob) if j == 0 else sigma_column_field(prob, j)


def g_alpha(alpha: MultiIndex, t, x, prob: FbsdeProblem):
    """Ito coefficient function: ``x``, ``b``, ``sigma_{.j}``, then ``L^{j1} g_{-alpha}``."""
    if not isinstance(alpha, MultiIndex):
        alpha = MultiIndex(tuple(alpha))
    if alpha.length > MAX_INDEX_LENGTH:
        raise UnsupportedIndexError(
            f"multi-index {alpha!r} has length {alpha.length}; only l <= {MAX_INDEX_LENGTH} is supported"
        )
    if any(j > prob.dim for j in alpha.components):
        raise ConfigurationError(f"multi-index {alpha!r} has a component above d={prob.dim}")
    pts, single = as_points(x, prob.dim)
    if alpha.length == 0:
        out = pts.copy()
    elif alpha.length == 1:
        out = _length_one_field(alpha.components[0], prob).value(t, pts)
    else:
        j1 = alpha.components[0]
        inner = _length_one_field(alpha.minus_first().components[0], prob)
        out = _L0(inner, t, pts, prob) if j1 == 0 else _Lj(inner, j1, t, pts, prob)
    return _squeeze(np.asarray(out, dtype=float), single)


@dataclass(frozen=True)
class WienerIncrements:
    """Brownian increments ``dW (..., d)`` and double integrals ``I2 (..., d, d)``."""

    dW: Array
    I2: Array


def increments_from_dw(dW, delta: float, v=None) -> WienerIncrements:
    """Double Ito integrals from the increments, with the weak off-diagonal substitute.

    ``I2[j][j] = (dW_j^2 - delta) / 2`` and, for ``j1 != j2``,
    ``I2[j1][j2] = (dW_j1 dW_j2 + v[j1][j2]) / 2``. ``v=None`` sets the
    auxiliaries to their mean, zero.
    """
    dW = np.asarray(dW, dtype=float)
    d = dW.shape[-1]
    I2 = 0.5 * dW[..., :, None] * dW[..., None, :]
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape[-2:] != (d, d):
            raise ConfigurationError(f"auxiliaries must have trailing shape ({d}, {d})")
        I2 = I2 + 0.5 * v
    diag = 0.5 * (dW**2 - delta)
    idx = np.arange(d)
    I2 = np.array(I2, copy=True)
    I2[..., idx, idx] = diag
    return WienerIncrements(dW=dW, I2=I2)


def increments_from_gaussian(xi, v, delta: float) -> WienerIncrements:
    """``dW = sqrt(delta) xi`` plus double integrals; see :func:`increments_from_dw`.

    ``v`` must be antisymmetric with zero diagonal and off-diagonal entries
    in ``{-delta, +delta}`` (or ``None`` for the zero auxiliaries).
    """
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0:
        xi = xi.reshape(1)
    d = xi.shape[-1]
    if v is not None:
        v = np.asarray(v, dtype=float)
        if v.shape[-2:] != (d, d):
            raise ConfigurationError(
                f"auxiliary shape {v.shape} does not match dimension {d}"
            )
        off = ~np.eye(d, dtype=bool)
        if not (
            np.all(np.diagonal(v, axis1=-2, axis2=-1) == 0)
            and np.all(v == -np.swapaxes(v, -1, -2))
            and np.all(np.isclose(np.abs(v[..., off]), delta, rtol=1e-12, atol=0.0))
        ):
            raise ConfigurationError("auxiliaries must be antisymmetric with entries +/-delta")
    return increments_from_dw(np.sqrt(delta) * xi, delta, v)


def bernoulli_auxiliaries(rng: np.random.Generator, d: int, delta: float, size: int) -> Array:
    """Sample ``size`` antisymmetric auxiliary matrices with entries ``+/-delta``."""
    v = np.zeros((size, d, d))
    for j1 in range(d):
        for j2 in range(j1 + 1, d):
            s = delta * rng.choice((-1.0, 1.0), size=size)
            v[:, j1, j2] = s
            v[:, j2, j1] = -s
    return v


@dataclass(frozen=True)
class Weak2Coefficients:
    """Coefficients of the weak order-2 increment at a batch of states.

    ``increment = drift + lin . dW + second : I2`` with
    ``lin[i, j] = sigma_ij + 1/2 (L^j b_i + L^0 sigma_ij) delta`` and
    ``second[i, j1, j2] = L^{j1} sigma_{i j2}``.
    """

    drift: Array  # (P, d)
    lin: Array  # (P, d, d)
    second: Array  # (P, d, d, d)

    def increment(self, w: WienerIncrements) -> Array:
        dW = np.asarray(w.dW, dtype=float)
        I2 = np.asarray(w.I2, dtype=float)
        dW2 = dW.reshape(-1, dW.shape[-1])
        I22 = I2.reshape(-1, I2.shape[-2], I2.shape[-1])
        out = (
            self.drift[:, None, :]
            + np.einsum("pij,qj->pqi", self.lin, dW2)
            + np.einsum("pijk,qjk->pqi", self.second, I22)
        )
        return out


def weak2_coefficients(t_n, pts: Array, delta: float, prob: FbsdeProblem) -> Weak2Coefficients:
    d = prob.dim
    b = g_alpha(MultiIndex((0,)), t_n, pts, prob)
    sig = prob.sigma(t_n, pts)
    L0b = g_alpha(MultiIndex((0, 0)), t_n, pts, prob)
    P = pts.shape[0]
    lin = np.empty((P, d, d))
    second = np.empty((P, d, d, d))
    for j1 in range(1, d + 1):
        Ljb = g_alpha(MultiIndex((j1, 0)), t_n, pts, prob)
        L0s = g_alpha(MultiIndex((0, j1)), t_n, pts, prob)
        lin[:, :, j1 - 1] = sig[:, :, j1 - 1] + 0.5 * (Ljb + L0s) * delta
        for j2 in range(1, d + 1):
            second[:, :, j1 - 1, j2 - 1] = g_alpha(MultiIndex((j1, j2)), t_n, pts, prob)
    drift = b * delta + 0.5 * L0b * delta**2
    return Weak2Coefficients(drift=drift, lin=lin, second=second)


def _shape_result(out: Array, single_x: bool, single_w: bool) -> Array:
    if single_w:
        out = out[:, 0]
    if single_x:
        out = out[0]
    return out


def weak2_increment(t_n, x, w: WienerIncrements, delta: float, prob: FbsdeProblem) -> Array:
    """Weak order-2 Ito-Taylor increment ``phi^n`` so that ``X^{n+1} = X^n + phi^n``.

    Result shape is ``(P, Q, d)`` for ``P`` states and ``Q`` increment draws;
    single-state or single-draw inputs drop the corresponding axis.
    """
    pts, single_x = as_points(x, prob.dim)
    dW = np.asarray(w.dW, dtype=float)
    if dW.shape[-1] != prob.dim:
        raise ConfigurationError("increment dimension does not match the problem")
    coeffs = weak2_coefficients(t_n, pts, delta, prob)
    out = coeffs.increment(w)
    return _shape_result(out, single_x, dW.ndim == 1)


def euler_increment(t_n, x, dw, delta: float, prob: FbsdeProblem) -> Array:
    """``b delta + sigma dw``, broadcast like :func:`weak2_increment`."""
    pts, single_x = as_points(x, prob.dim)
    dw = np.asarray(dw, dtype=float)
    if dw.ndim == 0:
        dw = dw.reshape(1)
    if dw.shape[-1] != prob.dim:
        raise ConfigurationError("increment dimension does not match the problem")
    dw2 = dw.reshape(-1, prob.dim)
    out = prob.b(t_n, pts)[:, None, :] * delta + np.einsum("pij,qj->pqi", prob.sigma(t_n, pts), dw2)
    return _shape_result(out, single_x, dw.ndim == 1)


# Forward maps used on the quadrature path: forward(t, x (P, d), dW (Q, d)) -> (P, Q, d).


def weak2_forward(prob: FbsdeProblem, delta: float) -> Callable:
    def forward(t, x, dW):
        pts, _ = as_points(x, prob.dim)
        coeffs = weak2_coefficients(t, pts, delta, prob)
        return pts[:, None, :] + coeffs.increment(increments_from_dw(dW, delta))

    return forward


def euler_forward(prob: FbsdeProblem, step: float) -> Callable:
    def forward(t, x, dW):
        pts, _ = as_points(x, prob.dim)
        dW = np.asarray(dW, dtype=float).reshape(-1, prob.dim)
        return pts[:, None, :] + euler_increment(t, pts, dW, step, prob).reshape(
            pts.shape[0], dW.shape[0], prob.dim
        )

    return forward
