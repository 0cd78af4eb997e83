"""Built-in problem registry, expression-defined problems and control extraction."""

from __future__ import annotations

import numpy as np

from . import expr as exprmod
from .exceptions import DomainError
from .model import BoundaryCondition, Problem, eval_model_many, model_derivative_many


def _box(spec, n: int) -> np.ndarray:
    box = np.asarray(spec, dtype=float)
    if box.ndim == 1:
        box = np.tile(box.reshape(1, 2), (n, 1))
    return box.reshape(n, 2)


def linear_scalar(a: float = 1.0, x0: float = 1.0, box=(-3.0, 3.0)) -> Problem:
    """x' = a x with x(0) = x0."""
    a = float(a)
    x0 = float(x0)
    return Problem(
        dim=1,
        field_f=lambda x, t: a * x,
        jacobian_f=lambda x, t: np.broadcast_to(np.array([[a]]), np.shape(x)[:-1] + (1, 1)).copy(),
        boundary=BoundaryCondition.separable(lambda v: v[..., 0] - x0, lambda v: np.zeros(np.shape(v)[:-1])),
        state_box=_box(box, 1),
        spec={"builtin": "linear_scalar", "params": {"a": a, "x0": x0}},
    )


def linear_system(L, c=None, x0=None, box=(-3.0, 3.0)) -> Problem:
    """x' = L x + c with x(0) = x0 (free right end)."""
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    c = np.zeros(n) if c is None else np.asarray(c, dtype=float).reshape(n)
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n)

    def field(x, t):
        return np.einsum("ij,...j->...i", L, np.asarray(x, dtype=float)) + c

    def jac(x, t):
        return np.broadcast_to(L, np.shape(x)[:-1] + (n, n)).copy()

    return Problem(
        dim=n,
        field_f=field,
        jacobian_f=jac,
        boundary=BoundaryCondition.separable(
            lambda v: np.sum((v - x0) ** 2, axis=-1),
            lambda v: np.zeros(np.shape(v)[:-1]),
        ),
        state_box=_box(box, n),
        spec={"builtin": "linear_system", "params": {"L": L.tolist(), "c": c.tolist(), "x0": x0.tolist()}},
    )


def logistic(r: float = 1.0, x0: float = 0.2, box=(-0.25, 1.25)) -> Problem:
    """x' = r x (1 - x) with x(0) = x0 (free right end)."""
    r = float(r)
    x0 = float(x0)
    return Problem(
        dim=1,
        field_f=lambda x, t: r * x * (1.0 - x),
        jacobian_f=lambda x, t: (r * (1.0 - 2.0 * x))[..., None],
        boundary=BoundaryCondition.separable(lambda v: v[..., 0] - x0, lambda v: np.zeros(np.shape(v)[:-1])),
        state_box=_box(box, 1),
        spec={"builtin": "logistic", "params": {"r": r, "x0": x0}},
    )


def bratu_system(lam: float = 1.0, box=((-0.2, 0.4), (-1.2, 1.2))) -> Problem:
    """First-order Bratu system: x1' = x2, x2' = -lam exp(x1), x1(0) = x1(1) = 0."""
    lam = float(lam)

    def field(x, t):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = -lam * np.exp(x[..., 0])
        return out

    def jac(x, t):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -lam * np.exp(x[..., 0])
        return J

    return Problem(
        dim=2,
        field_f=field,
        jacobian_f=jac,
        boundary=BoundaryCondition.separable(lambda v: v[..., 0], lambda v: v[..., 0]),
        state_box=_box(box, 2),
        spec={"builtin": "bratu_system", "params": {"lam": lam}},
    )


def sum_boundary(slope: float = 1.0, K: float = 1.0, box=(-2.0, 2.0)) -> Problem:
    """Scalar x' = slope with the coupled condition x(0) + x(1) = K."""
    slope = float(slope)
    K = float(K)
    return Problem(
        dim=1,
        field_f=lambda x, t: np.broadcast_to(slope, np.shape(x)).copy(),
        jacobian_f=lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 1)),
        boundary=BoundaryCondition.general(lambda a, b: a[..., 0] + b[..., 0] - K),
        state_box=_box(box, 1),
        spec={"builtin": "sum_boundary", "params": {"slope": slope, "K": K}},
    )


BUILTINS = {
    "linear_scalar": linear_scalar,
    "linear_system": linear_system,
    "logistic": logistic,
    "bratu_system": bratu_system,
    "sum_boundary": sum_boundary,
}


def builtin(name: str, **params) -> Problem:
    """Instantiate a registered problem by name."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise DomainError(f"unknown builtin problem {name!r}; known: {sorted(BUILTINS)}") from None
    return factory(**params)


def expression_problem(
    dim: int,
    field_exprs: list[str],
    beta0: str | None = None,
    beta1: str | None = None,
    beta: str | None = None,
    state_box=(-3.0, 3.0),
) -> Problem:
    """Problem whose field and boundary functions are DSL expressions.

    Field expressions use variables t and x1..xn; a general boundary
    expression uses x1..xn for the left endpoint and y1..yn for the right.
    """
    if len(field_exprs) != dim:
        raise DomainError(f"need {dim} field expressions, got {len(field_exprs)}")
    trees = [exprmod.parse_expression(s) for s in field_exprs]

    def field(x, t):
        x = np.asarray(x, dtype=float)
        cols = [exprmod.eval_expression(tree, t, x) for tree in trees]
        return np.stack([np.broadcast_to(c, x.shape[:-1]) for c in cols], axis=-1)

    if beta is not None:
        # rewrite y_i -> x_{n+i} and evaluate on the stacked endpoint pair
        tree_b = exprmod.parse_expression(_shift_right_endpoint(beta, dim))

        def beta_general(a, b):
            ab = np.concatenate([np.asarray(a, dtype=float), np.asarray(b, dtype=float)], axis=-1)
            return exprmod.eval_expression(tree_b, 0.0, ab)

        boundary = BoundaryCondition.general(beta_general)
    else:
        if beta0 is None or beta1 is None:
            raise DomainError("expression problem needs beta (general) or beta0 and beta1 (separable)")
        t0 = exprmod.parse_expression(beta0)
        t1 = exprmod.parse_expression(beta1)
        boundary = BoundaryCondition.separable(
            lambda v: exprmod.eval_expression(t0, 0.0, v),
            lambda v: exprmod.eval_expression(t1, 1.0, v),
        )
    return Problem(
        dim=dim,
        field_f=field,
        jacobian_f=None,
        boundary=boundary,
        state_box=_box(state_box, dim),
        spec={
            "dim": dim,
            "field": list(field_exprs),
            "beta0": beta0,
            "beta1": beta1,
            "beta": beta,
            "state_box": np.asarray(_box(state_box, dim)).tolist(),
        },
    )


def _shift_right_endpoint(text: str, dim: int) -> str:
    import re

    def sub(m):
        return f"x{int(m.group(1)) + dim}"

    return re.sub(r"\by(\d+)\b", sub, text)


def make_control(model, problem: Problem):
    """Control u(t) = x'(t) - f(x(t), t) along the model trajectory.

    By construction x' = f(x, t) + u(t) holds identically on the model, so a
    solved model of the uncontrolled problem has u = 0 and the control energy
    integral of |u|^2 equals the additive error with the squared-norm
    integrand.
    """

    def u(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        x = eval_model_many(model, ts)
        dx = model_derivative_many(model, ts)
        return dx - problem.field_many(x, ts)

    return u
