"""Residuals, per-piece errors and the k-step accumulators.

The additive accumulator realizes the integral error functional; the max
accumulator realizes the uniform-metric error. Custom monotone accumulators
are supported so the dynamic program stays applicable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import linflow
from .exceptions import DomainError


@lru_cache(maxsize=32)
def _leggauss(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


@dataclass(frozen=True)
class QuadratureRule:
    """Composite Gauss-Legendre rule: `order` nodes on each of `panels` panels."""

    order: int = 5
    panels: int = 1

    def __post_init__(self):
        if self.order < 1 or self.panels < 1:
            raise DomainError("quadrature order and panel count must be positive")

    def nodes_weights(self, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
        x, w = _leggauss(self.order)
        edges = np.linspace(a, b, self.panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1:] - edges[:-1])
        nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        weights = (half[:, None] * w[None, :]).ravel()
        return nodes, weights


def chebyshev_lobatto(m: int, a: float, b: float) -> np.ndarray:
    """m Chebyshev-Lobatto points on [a, b], ascending, endpoints included."""
    if m < 2:
        raise DomainError("need at least 2 sample points")
    j = np.arange(m)
    x = np.cos(np.pi * j / (m - 1))[::-1]
    return 0.5 * (a + b) + 0.5 * (b - a) * x


def squared_norm(r: np.ndarray) -> np.ndarray:
    """Default integrand: squared Euclidean norm over the last axis."""
    r = np.asarray(r, dtype=float)
    return np.einsum("...n,...n->...", r, r)


@dataclass(frozen=True)
class Integrand:
    """Nonnegative continuous G with G(0) = 0, applied to residual vectors."""

    fn: Callable = squared_norm
    name: str = "squared_norm"

    def __call__(self, r) -> np.ndarray:
        return np.asarray(self.fn(r), dtype=float)


@dataclass(frozen=True)
class ErrorAccumulator:
    """Binary accumulation g(accumulated, piece_error) with initial value."""

    kind: str
    g: Callable
    initial: float = 0.0

    @classmethod
    def additive(cls) -> "ErrorAccumulator":
        return cls("additive", lambda a, e: a + e, 0.0)

    @classmethod
    def uniform_max(cls) -> "ErrorAccumulator":
        return cls("uniform_max", np.maximum, 0.0)

    @classmethod
    def custom(cls, g: Callable, initial: float = 0.0, check_samples: int = 24) -> "ErrorAccumulator":
        """Custom accumulator; monotonicity is spot-checked on a sample grid."""
        pts = np.linspace(0.0, 3.0, check_samples)
        for a in pts:
            va = np.asarray([g(a, e) for e in pts], dtype=float)
            ve = np.asarray([g(e, a) for e in pts], dtype=float)
            if np.any(np.diff(va) < -1e-12) or np.any(np.diff(ve) < -1e-12):
                raise DomainError("custom accumulator g must be nondecreasing in both arguments")
        return cls("custom", g, initial)


def accumulate(acc: ErrorAccumulator, e_prev: float, e_k: float) -> float:
    """g(E_{k-1}, e_k); both arguments must be nonnegative."""
    if e_prev < 0.0 or e_k < 0.0:
        raise DomainError("accumulated and piece errors must be nonnegative")
    return float(acc.g(e_prev, e_k))


def residual(piece, f, t, quad: QuadratureRule | None = None, substeps: int = 8) -> np.ndarray:
    """A_i(t) y(t) + b_i(t) - f(y(t), t) with y from piece propagation."""
    t = float(t)
    y = linflow.propagate_piece(piece, t, quad=quad, substeps=substeps)
    return piece.A_at(t) @ y + piece.b_at(t) - np.asarray(f(y, t), dtype=float).reshape(y.shape)


def residual_many(piece, f, ts, quad: QuadratureRule | None = None, substeps: int = 8) -> np.ndarray:
    """Residual at several times; f must accept batched states (T, n)."""
    ts = np.asarray(ts, dtype=float)
    y = linflow.propagate_piece_many(piece, ts, quad=quad, substeps=substeps)
    A = piece.A_at(ts)
    b = piece.b_at(ts)
    F = np.asarray(f(y, ts), dtype=float)
    if F.shape != y.shape:
        F = np.broadcast_to(F, y.shape)
    return np.einsum("kij,kj->ki", A, y) + b - F


def piece_error_additive(piece, f, G: Integrand | None = None, quad: QuadratureRule | None = None) -> float:
    """integral over the piece of G(residual(t)) dt, by quadrature."""
    G = G or Integrand()
    quad = quad or QuadratureRule()
    nodes, weights = quad.nodes_weights(piece.t0, piece.t1)
    r = residual_many(piece, f, nodes, quad=quad)
    vals = G(r)
    return float(np.dot(weights, vals))


def piece_error_uniform(piece, f, samples: int = 33) -> float:
    """max over Chebyshev-Lobatto sample points of ||residual(t)||."""
    ts = chebyshev_lobatto(samples, piece.t0, piece.t1)
    r = residual_many(piece, f, ts)
    return float(np.sqrt(squared_norm(r).max()))


def total_error(
    model,
    f,
    G: Integrand | None = None,
    acc: ErrorAccumulator | None = None,
    quad: QuadratureRule | None = None,
    uniform_samples: int = 33,
) -> float:
    """Fold per-piece errors through the accumulator over all pieces.

    Additive (and custom) accumulators use the integral piece error with G;
    the max accumulator uses the uniform piece error.
    """
    acc = acc or ErrorAccumulator.additive()
    total = acc.initial
    for piece in model.pieces:
        if acc.kind == "uniform_max":
            e_k = piece_error_uniform(piece, f, samples=uniform_samples)
        else:
            e_k = piece_error_additive(piece, f, G=G, quad=quad)
        total = accumulate(acc, total, e_k)
    return float(total)
