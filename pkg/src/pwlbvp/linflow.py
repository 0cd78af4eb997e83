"""Propagation of linear ODE pieces.

Matrix exponentials, fundamental matrices Phi(t, s) of y' = A(t) y, and the
variation-of-constants solution of the inhomogeneous system. Time-varying
coefficients are integrated with a classical 4th-order one-step method; the
convolution integral in piece propagation uses Gauss-Legendre panels with a
fundamental matrix per quadrature node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .exceptions import DomainError


def mat_exp(M) -> np.ndarray:
    """Matrix exponential e^M (scaling-and-squaring with a Pade core)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("mat_exp expects a square matrix")
    if not np.all(np.isfinite(M)):
        raise DomainError("mat_exp requires finite entries")
    return scipy.linalg.expm(M)


def affine_flow_const(A: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(e^{dt A}, W) with W = integral_0^dt e^{u A} du.

    For constant b, y(t0+dt) = e^{dt A} y(t0) + W b.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = A
    big[:n, n:] = np.eye(n)
    E = mat_exp(dt * big)
    return E[:n, :n], E[:n, n:]


def _sample_matrix(A, ts: np.ndarray, n: int | None = None) -> np.ndarray:
    """Sample a (constant or callable) matrix coefficient at times ts."""
    if not callable(A):
        A = np.asarray(A, dtype=float)
        return np.broadcast_to(A, (ts.size,) + A.shape).copy()
    try:
        out = np.asarray(A(ts), dtype=float)
        if out.ndim == 3 and out.shape[0] == ts.size:
            return out
    except Exception:
        pass
    rows = [np.asarray(A(float(t)), dtype=float) for t in ts]
    return np.stack(rows, axis=0)


def _sample_vector(b, ts: np.ndarray, n: int) -> np.ndarray:
    if not callable(b):
        b = np.asarray(b, dtype=float)
        return np.broadcast_to(b, (ts.size, n)).copy()
    try:
        out = np.asarray(b(ts), dtype=float)
        if out.ndim == 2 and out.shape == (ts.size, n):
            return out
    except Exception:
        pass
    rows = [np.asarray(b(float(t)), dtype=float).reshape(n) for t in ts]
    return np.stack(rows, axis=0)


def _rk4_sample_times(grid: np.ndarray) -> np.ndarray:
    """Endpoints and midpoints of every step of `grid`, interleaved."""
    S = grid.size - 1
    ts = np.empty(2 * S + 1)
    ts[0::2] = grid
    ts[1::2] = 0.5 * (grid[:-1] + grid[1:])
    return ts


def integrate_affine(A, b, grid: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """Solve y' = A(t) y + b(t), y(grid[0]) = y0, at every grid point.

    One 4th-order step per consecutive grid pair; accuracy is controlled by
    grid density. Returns (len(grid), n).
    """
    grid = np.asarray(grid, dtype=float)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    n = y0.size
    ts = _rk4_sample_times(grid)
    As = _sample_matrix(A, ts, n)
    bs = _sample_vector(b, ts, n)
    h = np.diff(grid)
    path = kernels.active().rk4_affine(As, bs[:, :, None], y0[:, None], h)
    return path[:, :, 0]


def integrate_flow(A, b, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fundamental matrix Phi(t, grid[0]) and zero-IV particular solution.

    Integrates the augmented system [Phi | u]' = A [Phi | u] + [0 | b] in a
    single pass. Returns (Phis (T, n, n), us (T, n)).
    """
    grid = np.asarray(grid, dtype=float)
    ts = _rk4_sample_times(grid)
    A0 = _sample_matrix(A, ts[:1], None)
    n = A0.shape[1]
    As = _sample_matrix(A, ts, n)
    bs = _sample_vector(b, ts, n)
    B = np.zeros((ts.size, n, n + 1))
    B[:, :, n] = bs
    M0 = np.zeros((n, n + 1))
    M0[:, :n] = np.eye(n)
    h = np.diff(grid)
    path = kernels.active().rk4_affine(As, B, M0, h)
    return path[:, :, :n], path[:, :, n]


@dataclass(frozen=True)
class FundamentalMatrix:
    """Phi(t, s): state-transition matrix of y' = A(t) y."""

    source: float
    target: float
    matrix: np.ndarray
    substeps: int

    def __matmul__(self, other):
        if isinstance(other, FundamentalMatrix):
            return self.matrix @ other.matrix
        return self.matrix @ other


def fundamental_matrix(A, s: float, t: float, substeps: int = 8) -> FundamentalMatrix:
    """Phi(t, s); exact matrix exponential for constant A, RK4 otherwise."""
    if t < s:
        raise DomainError("fundamental_matrix requires s <= t")
    if not callable(A):
        A = np.asarray(A, dtype=float)
        return FundamentalMatrix(s, t, mat_exp((t - s) * A), 0)
    n = np.asarray(A(float(s)), dtype=float).shape[0]
    if t == s:
        return FundamentalMatrix(s, t, np.eye(n), 0)
    grid = np.linspace(s, t, substeps + 1)
    Phis, _ = integrate_flow(A, np.zeros(n), grid)
    return FundamentalMatrix(s, t, Phis[-1], substeps)


def _poly_antiderivative_local(b_coeffs: np.ndarray, s) -> np.ndarray:
    """integral_0^s of sum_j c_j sigma^j dsigma, batched over s."""
    s = np.asarray(s, dtype=float)
    p1 = b_coeffs.shape[0]
    powers = np.stack([s ** (j + 1) / (j + 1) for j in range(p1)], axis=-1)
    return powers @ b_coeffs


def propagate_piece_many(piece, ts, quad=None, substeps: int = 8) -> np.ndarray:
    """Vectorized propagate_piece over target times within the piece."""
    ts = np.asarray(ts, dtype=float)
    if np.any(ts < piece.t0 - 1e-12) or np.any(ts > piece.t1 + 1e-12):
        raise DomainError("target time outside the piece interval")
    if piece.A_is_zero():
        s = piece.local(ts)
        return piece.theta + piece.length * _poly_antiderivative_local(piece.b_coeffs, s)
    return np.stack([propagate_piece(piece, float(t), quad=quad, substeps=substeps) for t in ts], axis=0)


def propagate_piece(piece, t: float, quad=None, substeps: int = 8) -> np.ndarray:
    """y(t) = Phi(t, t0) theta + integral_{t0}^t Phi(t, s) b(s) ds.

    A = 0 pieces integrate the polynomial b exactly; constant A with constant
    b uses the augmented matrix exponential; the general case evaluates the
    convolution by Gauss-Legendre quadrature with a fundamental matrix per
    node.
    """
    t = float(t)
    if t < piece.t0 - 1e-12 or t > piece.t1 + 1e-12:
        raise DomainError(f"time {t} outside the piece interval [{piece.t0}, {piece.t1}]")
    t = min(max(t, piece.t0), piece.t1)
    if t == piece.t0:
        return piece.theta.copy()
    if piece.A_is_zero():
        s = piece.local(t)
        return piece.theta + piece.length * _poly_antiderivative_local(piece.b_coeffs, s)
    dt = t - piece.t0
    if piece.A_is_constant():
        A0 = piece.A_coeffs[0]
        if piece.b_is_constant():
            E, W = affine_flow_const(A0, dt)
            return E @ piece.theta + W @ piece.b_coeffs[0]
        if quad is None:
            from .errfun import QuadratureRule

            quad = QuadratureRule()
        nodes, weights = quad.nodes_weights(piece.t0, t)
        y = mat_exp(dt * A0) @ piece.theta
        bvals = piece.b_at(nodes)
        for j, (sj, wj) in enumerate(zip(nodes, weights)):
            y = y + wj * (mat_exp((t - sj) * A0) @ bvals[j])
        return y
    if quad is None:
        from .errfun import QuadratureRule

        quad = QuadratureRule()
    A_fn = lambda tau: piece.A_at(tau)
    nodes, weights = quad.nodes_weights(piece.t0, t)
    y = fundamental_matrix(A_fn, piece.t0, t, substeps).matrix @ piece.theta
    bvals = piece.b_at(nodes)
    for j, (sj, wj) in enumerate(zip(nodes, weights)):
        sub = max(2, int(round(substeps * (t - sj) / piece.length)))
        Phi = fundamental_matrix(A_fn, float(sj), t, sub).matrix
        y = y + wj * (Phi @ bvals[j])
    return y


def variation_of_constants(A, b, eta, t: float, substeps: int = 32) -> np.ndarray:
    """y(t; eta) = Phi(t, 0) eta + integral_0^t Phi(t, s) b(s) ds.

    Computed by direct 4th-order integration of y' = A(t) y + b(t) from
    y(0) = eta, which is exactly linear in (eta, b).
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError("variation_of_constants requires t in [0, 1]")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if t == 0.0:
        return eta.copy()
    grid = np.linspace(0.0, t, max(1, substeps) + 1)
    return integrate_affine(A, b, grid, eta)[-1]
