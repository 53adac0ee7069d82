"""Gauss-Hermite rules and the conditional expectations over a Brownian step.

Physicists' convention throughout: the rule integrates against
``exp(-x^2)``, the increment is ``dW = sqrt(2 delta) * node`` and each
dimension's weights are divided by ``sqrt(pi)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fbsde.errors import ConfigurationError, QuadratureBudgetError

MAX_ORDER = 64
MAX_DIM = 3
MAX_POINTS = 10**6


@dataclass(frozen=True)
class HermiteRule:
    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def tensor(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Tensor-product nodes ``(n^d, d)`` and probability weights ``(n^d,)``."""
        if d > MAX_DIM:
            raise QuadratureBudgetError(
                f"tensor Gauss-Hermite supports d <= {MAX_DIM}; got d={d}"
            )
        if self.order**d > MAX_POINTS:
            raise QuadratureBudgetError(
                f"{self.order}^{d} quadrature points exceed the budget of {MAX_POINTS}"
            )
        grids = np.meshgrid(*([self.nodes] * d), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=-1)
        wgrids = np.meshgrid(*([self.weights / math.sqrt(math.pi)] * d), indexing="ij")
        weights = functools.reduce(np.multiply, [g.ravel() for g in wgrids])
        return nodes, weights

    def increments(self, delta: float, d: int) -> tuple[np.ndarray, np.ndarray]:
        """Brownian increments ``sqrt(2 delta) * nodes`` and their weights."""
        nodes, weights = self.tensor(d)
        return math.sqrt(2.0 * delta) * nodes, weights


@functools.lru_cache(maxsize=None)
def _hermgauss(n: int):
    x, w = np.polynomial.hermite.hermgauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_hermite(n: int) -> HermiteRule:
    """Order-``n`` Gauss-Hermite rule for the weight ``exp(-x^2)``."""
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_ORDER:
        raise ConfigurationError(f"Gauss-Hermite order must be in 1..{MAX_ORDER}, got {n!r}")
    x, w = _hermgauss(int(n))
    return HermiteRule(order=int(n), nodes=x, weights=w)


def expectation(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum over the quadrature axis (axis 1) of ``values (P, Q, ...)``."""
    # einsum keeps a fixed per-node summation order; BLAS blocking would not
    return np.einsum("q,pq...->p...", weights, values)


def weighted_expectation(values: np.ndarray, weights: np.ndarray, dW: np.ndarray) -> np.ndarray:
    """``E[g dW^T]``: values ``(P, Q, ...)`` times ``dW (Q, d)`` -> ``(P, ..., d)``."""
    return np.einsum("pq...,qd->p...d", values, weights[:, None] * dW)


def _images(x, t_n, delta, rule, forward):
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, pts.shape[-1]) if pts.ndim else pts.reshape(1, 1)
    d = pts.shape[1]
    dW, w = rule.increments(delta, d)
    imgs = forward(t_n, pts, dW)
    return imgs, dW, w, single


def _evaluate(g: Callable, imgs: np.ndarray) -> np.ndarray:
    P, Q, d = imgs.shape
    vals = np.asarray(g(imgs.reshape(P * Q, d)), dtype=float)
    return vals.reshape((P, Q) + vals.shape[1:])


def cond_expect(g: Callable, x, t_n: float, delta: float, rule: HermiteRule, forward: Callable):
    """``E[g(X^{n+1}) | X^n = x]`` by tensor Gauss-Hermite quadrature over ``dW``.

    ``forward(t_n, x, dW)`` maps states ``(P, d)`` and increments ``(Q, d)``
    to images ``(P, Q, d)``; ``g`` takes a flat batch of states.
    """
    imgs, dW, w, single = _images(x, t_n, delta, rule, forward)
    out = expectation(_evaluate(g, imgs), w)
    return out[0] if single else out


def cond_expect_weighted(
    g: Callable, x, t_n: float, delta: float, rule: HermiteRule, forward: Callable
):
    """``E[g(X^{n+1}) dW^T | X^n = x]``; a trailing length-``d`` axis is appended."""
    imgs, dW, w, single = _images(x, t_n, delta, rule, forward)
    out = weighted_expectation(_evaluate(g, imgs), w, dW)
    return out[0] if single else out


def brownian_forward(t, x, dW):
    """``x + dW``: the forward map of ``dX = dW``."""
    return np.asarray(x)[:, None, :] + np.asarray(dW)[None, :, :]
