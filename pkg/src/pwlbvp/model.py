"""Core problem, mesh and piecewise-model types.

The central object is :class:`PwlModel`: per mesh interval a linear ODE piece
``y' = A_i(t) y + b_i(t)`` with initial value ``theta_i``, where the matrix
and vector coefficients are polynomials in the local coordinate
``s = (t - t_i) / (t_{i+1} - t_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DomainError


def _as_vector(x, n: int | None = None) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if n is not None and v.shape != (n,):
        raise DomainError(f"expected vector of length {n}, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Mesh:
    """Strictly increasing node points t_0 = 0 < ... < t_N = 1."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 3:
            raise DomainError("mesh needs at least N >= 2 intervals (3 nodes)")
        if not (np.all(np.diff(nodes) > 0) and nodes[0] == 0.0 and nodes[-1] == 1.0):
            raise DomainError("mesh nodes must strictly increase from 0 to 1")

    @classmethod
    def uniform(cls, n_intervals: int) -> "Mesh":
        if n_intervals < 2:
            raise DomainError("N >= 2 intervals required")
        return cls(np.linspace(0.0, 1.0, n_intervals + 1))

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    def interval(self, i: int) -> tuple[float, float]:
        return float(self.nodes[i]), float(self.nodes[i + 1])

    def index_of(self, t) -> np.ndarray:
        """Piece index containing t (the last piece owns t = 1)."""
        idx = np.searchsorted(self.nodes, np.asarray(t), side="right") - 1
        return np.clip(idx, 0, self.N - 1)


@dataclass(frozen=True)
class Basis:
    """Monomial basis phi_j(s) = s^j on the local coordinate of a piece."""

    degree: int
    kind: str = "monomial"

    def __post_init__(self):
        if self.degree < 0:
            raise DomainError("basis degree must be nonnegative")
        if self.kind != "monomial":
            raise DomainError(f"unsupported basis kind {self.kind!r}")

    def eval_all(self, s) -> np.ndarray:
        """Values phi_0(s) ... phi_p(s), stacked on the first axis."""
        s = np.asarray(s, dtype=float)
        return np.stack([s**j for j in range(self.degree + 1)], axis=0)

    def gram(self) -> np.ndarray:
        p = self.degree
        i = np.arange(p + 1)
        return 1.0 / (i[:, None] + i[None, :] + 1.0)


class BoundaryCondition:
    """Separable (beta0(x(0)) = beta1(x(1)) = 0) or general beta(x0, x1) = 0."""

    __slots__ = ("kind", "beta0", "beta1", "beta")

    def __init__(self, kind, beta0=None, beta1=None, beta=None):
        if kind not in ("separable", "general"):
            raise DomainError("boundary kind must be 'separable' or 'general'")
        if kind == "separable" and (beta0 is None or beta1 is None):
            raise DomainError("separable boundary needs beta0 and beta1")
        if kind == "general" and beta is None:
            raise DomainError("general boundary needs beta")
        self.kind = kind
        self.beta0 = beta0
        self.beta1 = beta1
        self.beta = beta

    @classmethod
    def separable(cls, beta0, beta1) -> "BoundaryCondition":
        return cls("separable", beta0=beta0, beta1=beta1)

    @classmethod
    def general(cls, beta) -> "BoundaryCondition":
        return cls("general", beta=beta)

    def as_general(self) -> Callable:
        """Single scalar function with the same zero set.

        For a separable condition this is beta0(a)^2 + beta1(b)^2.
        """
        if self.kind == "general":
            return self.beta
        b0, b1 = self.beta0, self.beta1
        return lambda a, b: np.asarray(b0(a)) ** 2 + np.asarray(b1(b)) ** 2

    def residual(self, theta0, thetaN) -> float:
        """|beta| at the endpoint pair (general form for separable input)."""
        return float(abs(self.as_general()(theta0, thetaN)))


@dataclass(frozen=True)
class Problem:
    """A two-point boundary value problem x' = f(x, t) on [0, 1].

    ``field_f(x, t)`` must accept batched states ``(..., n)`` with matching
    times unless ``vectorized=False``, in which case a loop fallback is used.
    ``jacobian_f`` is optional; finite differences are substituted downstream.
    """

    dim: int
    field_f: Callable
    boundary: BoundaryCondition
    state_box: np.ndarray
    jacobian_f: Callable | None = None
    vectorized: bool = True
    spec: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        box = np.asarray(self.state_box, dtype=float).reshape(self.dim, 2)
        if not np.all(box[:, 1] > box[:, 0]):
            raise DomainError("state_box must have positive extent per dimension")
        object.__setattr__(self, "state_box", box)

    def field_many(self, x: np.ndarray, t) -> np.ndarray:
        """Evaluate f at batched states x (..., n) and times t (broadcastable)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.vectorized:
            out = np.asarray(self.field_f(x, t), dtype=float)
            if out.shape != x.shape:
                out = np.broadcast_to(out, x.shape).copy()
            return out
        flat = x.reshape(-1, self.dim)
        tt = np.broadcast_to(t, x.shape[:-1]).reshape(-1)
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            out[i] = _as_vector(self.field_f(flat[i], float(tt[i])), self.dim)
        return out.reshape(x.shape)

    def inflated_box(self, factor: float = 0.5) -> np.ndarray:
        width = self.state_box[:, 1] - self.state_box[:, 0]
        out = self.state_box.copy()
        out[:, 0] -= factor * width
        out[:, 1] += factor * width
        return out


@dataclass(frozen=True)
class Piece:
    """One interval of the model: y' = A(t) y + b(t), y(t0) = theta.

    ``A_coeffs[j]`` / ``b_coeffs[j]`` multiply the local monomial s^j.
    """

    t0: float
    t1: float
    A_coeffs: np.ndarray  # (p+1, n, n)
    b_coeffs: np.ndarray  # (p+1, n)
    theta: np.ndarray  # (n,)

    def __post_init__(self):
        A = np.asarray(self.A_coeffs, dtype=float)
        b = np.asarray(self.b_coeffs, dtype=float)
        th = np.asarray(self.theta, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise DomainError("A_coeffs must have shape (p+1, n, n)")
        if b.shape != (A.shape[0], A.shape[1]):
            raise DomainError("b_coeffs must have shape (p+1, n)")
        if th.shape != (A.shape[1],):
            raise DomainError("theta must have shape (n,)")
        if not self.t1 > self.t0:
            raise DomainError("piece interval must have positive length")
        object.__setattr__(self, "A_coeffs", A)
        object.__setattr__(self, "b_coeffs", b)
        object.__setattr__(self, "theta", th)

    @property
    def dim(self) -> int:
        return self.A_coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.A_coeffs.shape[0] - 1

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    def local(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=float) - self.t0) / self.length

    def A_at(self, t) -> np.ndarray:
        """A(t); batched t of shape (...) gives (..., n, n)."""
        s = self.local(t)
        phi = Basis(self.degree).eval_all(s)  # (p+1, ...)
        return np.tensordot(np.moveaxis(phi, 0, -1), self.A_coeffs, axes=([-1], [0]))

    def b_at(self, t) -> np.ndarray:
        s = self.local(t)
        phi = Basis(self.degree).eval_all(s)
        return np.tensordot(np.moveaxis(phi, 0, -1), self.b_coeffs, axes=([-1], [0]))

    def A_is_zero(self) -> bool:
        return bool(np.all(self.A_coeffs == 0.0))

    def A_is_constant(self) -> bool:
        return self.degree == 0 or bool(np.all(self.A_coeffs[1:] == 0.0))

    def b_is_constant(self) -> bool:
        return self.degree == 0 or bool(np.all(self.b_coeffs[1:] == 0.0))


@dataclass(frozen=True)
class PwlModel:
    """Piecewise linear-ODE model over a mesh, with explicit terminal value."""

    mesh: Mesh
    pieces: tuple[Piece, ...]
    theta_N: np.ndarray

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if len(pieces) != self.mesh.N:
            raise DomainError("model needs exactly one piece per mesh interval")
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "theta_N", _as_vector(self.theta_N, pieces[0].dim))

    @property
    def dim(self) -> int:
        return self.pieces[0].dim

    def node_values(self) -> np.ndarray:
        """theta_i at every node, (N+1, n)."""
        vals = [p.theta for p in self.pieces]
        vals.append(self.theta_N)
        return np.stack(vals, axis=0)

    def node_slopes(self) -> np.ndarray:
        """Model derivative at every node (right limit; left limit at t=1)."""
        out = np.empty((self.mesh.N + 1, self.dim))
        for i, p in enumerate(self.pieces):
            out[i] = p.A_at(p.t0) @ p.theta + p.b_at(p.t0)
        last = self.pieces[-1]
        out[-1] = last.A_at(last.t1) @ self.theta_N + last.b_at(last.t1)
        return out


def hermite_model(mesh: Mesh, values: np.ndarray, slopes: np.ndarray) -> PwlModel:
    """Build the A = 0 model whose trajectory is the cubic Hermite interpolant
    of (values, slopes) at the mesh nodes."""
    values = np.asarray(values, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
        slopes = slopes[:, None]
    N = mesh.N
    n = values.shape[1]
    if values.shape != (N + 1, n) or slopes.shape != (N + 1, n):
        raise DomainError("values/slopes must have shape (N+1, n)")
    pieces = []
    for i in range(N):
        t0, t1 = mesh.interval(i)
        h = t1 - t0
        th0, th1 = values[i], values[i + 1]
        v0, v1 = slopes[i], slopes[i + 1]
        # derivative of the cubic Hermite interpolant, as monomials in s
        c0 = v0
        c1 = 6.0 * (th1 - th0) / h - 4.0 * v0 - 2.0 * v1
        c2 = 6.0 * (th0 - th1) / h + 3.0 * v0 + 3.0 * v1
        A = np.zeros((3, n, n))
        b = np.stack([c0, c1, c2], axis=0)
        pieces.append(Piece(t0, t1, A, b, th0))
    return PwlModel(mesh, tuple(pieces), values[-1])


def eval_model(model: PwlModel, t) -> np.ndarray:
    """Trajectory value y(t); exactly theta_i at nodes and theta_N at t = 1."""
    from . import linflow

    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time {t} outside [0, 1]")
    if t == 1.0:
        return model.theta_N.copy()
    i = int(model.mesh.index_of(t))
    return linflow.propagate_piece(model.pieces[i], t)


def _zero_A_stack(model: PwlModel):
    """Stacked coefficients for the all-pieces-A=0 fast path (cached)."""
    cache = getattr(model, "_zero_A_cache", None)
    if cache is None:
        degrees = {p.degree for p in model.pieces}
        if len(degrees) == 1 and all(p.A_is_zero() for p in model.pieces):
            cache = (
                np.stack([p.b_coeffs for p in model.pieces]),  # (N, p+1, n)
                np.stack([p.theta for p in model.pieces]),  # (N, n)
                np.array([p.t0 for p in model.pieces]),
                np.array([p.length for p in model.pieces]),
            )
        else:
            cache = False
        object.__setattr__(model, "_zero_A_cache", cache)
    return cache


def eval_model_many(model: PwlModel, ts) -> np.ndarray:
    """Vectorized eval_model; returns (len(ts), n)."""
    from . import linflow

    ts = np.asarray(ts, dtype=float)
    if np.any(ts < 0.0) or np.any(ts > 1.0):
        raise DomainError("times outside [0, 1]")
    idx = model.mesh.index_of(ts)
    stack = _zero_A_stack(model)
    if stack is not False:
        b, th, t0, h = stack
        s = (ts - t0[idx]) / h[idx]
        p1 = b.shape[1]
        powers = np.stack([s ** (j + 1) / (j + 1) for j in range(p1)], axis=-1)  # (T, p+1)
        out = th[idx] + h[idx][:, None] * np.einsum("tj,tjn->tn", powers, b[idx])
    else:
        out = np.empty((ts.size, model.dim))
        for i in range(model.mesh.N):
            sel = idx == i
            if np.any(sel):
                out[sel] = linflow.propagate_piece_many(model.pieces[i], ts[sel])
    at_end = ts == 1.0
    if np.any(at_end):
        out[at_end] = model.theta_N
    return out


def model_derivative(model: PwlModel, t) -> np.ndarray:
    """A_i(t) y(t) + b_i(t) for the piece containing t."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time {t} outside [0, 1]")
    i = int(model.mesh.index_of(t))
    p = model.pieces[i]
    y = model.theta_N if t == 1.0 else eval_model(model, t)
    return p.A_at(t) @ y + p.b_at(t)


def model_derivative_many(model: PwlModel, ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=float)
    idx = model.mesh.index_of(ts)
    stack = _zero_A_stack(model)
    if stack is not False:
        b, _, t0, h = stack
        s = (ts - t0[idx]) / h[idx]
        p1 = b.shape[1]
        powers = np.stack([s**j for j in range(p1)], axis=-1)
        return np.einsum("tj,tjn->tn", powers, b[idx])
    ys = eval_model_many(model, ts)
    out = np.empty_like(ys)
    for i in range(model.mesh.N):
        sel = idx == i
        if np.any(sel):
            p = model.pieces[i]
            A = p.A_at(ts[sel])  # (k, n, n)
            bv = p.b_at(ts[sel])  # (k, n)
            out[sel] = np.einsum("kij,kj->ki", A, ys[sel]) + bv
    return out


@dataclass(frozen=True)
class ValidationReport:
    value_violations: tuple[tuple[int, float], ...]
    slope_violations: tuple[tuple[int, float], ...]
    beta_residual: float

    @property
    def ok(self) -> bool:
        return not self.value_violations and not self.slope_violations


def validate_model(model: PwlModel, eps: float, boundary: BoundaryCondition | None = None) -> ValidationReport:
    """Report node continuity violations above eps and the boundary residual."""
    from . import linflow

    value_bad = []
    slope_bad = []
    vals = model.node_values()
    for i, p in enumerate(model.pieces):
        nxt = vals[i + 1]
        end = linflow.propagate_piece(p, p.t1)
        gap = float(np.linalg.norm(end - nxt))
        if gap > eps:
            value_bad.append((i + 1, gap))
        if i < model.mesh.N - 1:
            q = model.pieces[i + 1]
            left = p.A_at(p.t1) @ nxt + p.b_at(p.t1)
            right = q.A_at(q.t0) @ nxt + q.b_at(q.t0)
            gap = float(np.linalg.norm(left - right))
            if gap > eps:
                slope_bad.append((i + 1, gap))
    beta_res = 0.0
    if boundary is not None:
        beta_res = boundary.residual(vals[0], vals[-1])
    return ValidationReport(tuple(value_bad), tuple(slope_bad), beta_res)
