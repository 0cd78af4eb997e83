"""Quasilinearized Newton-Raphson refinement with boundary-value updating.

Each iteration linearizes the field about the current trajectory, solves the
linear correction ODE by variation of constants, picks the correction's
initial value from the boundary condition, and re-projects the corrected
trajectory onto the piecewise model by Hermite resampling at the mesh nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linflow
from .errfun import QuadratureRule, chebyshev_lobatto, squared_norm
from .exceptions import DomainError, PointwiseUnavailable
from .model import Mesh, Problem, PwlModel, eval_model_many, hermite_model, model_derivative_many

_SQRT_EPS = float(np.sqrt(np.finfo(float).eps))


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 20
    residual_tol: float = 1e-8
    boundary_tol: float = 1e-8
    eta_strategy: str = "closed_form"  # gradient | newton | closed_form
    boundary_strategy: str = "gradient"  # gradient | newton
    line_search_bound: float = 4.0
    line_search_tol: float | None = None  # default 1e-6 * line_search_bound
    substeps: int = 8
    quad: QuadratureRule = field(default_factory=QuadratureRule)
    uniform_samples: int = 33
    cond_limit: float = 1e8
    max_newton: int = 20
    box_inflation: float = 0.5

    def __post_init__(self):
        if self.residual_tol <= 0 or self.boundary_tol <= 0:
            raise DomainError("tolerances must be positive")
        if self.line_search_bound <= 0:
            raise DomainError("line-search interval bound M must be positive")
        if self.eta_strategy not in ("gradient", "newton", "closed_form"):
            raise DomainError("eta_strategy must be gradient, newton or closed_form")
        if self.boundary_strategy not in ("gradient", "newton"):
            raise DomainError("boundary_strategy must be gradient or newton")

    @property
    def ls_tol(self) -> float:
        return self.line_search_tol if self.line_search_tol is not None else 1e-6 * self.line_search_bound


def jacobian_at(problem: Problem, x, t: float) -> np.ndarray:
    """d_x f at a single state; analytic if supplied, else central differences."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if problem.jacobian_f is not None:
        return np.asarray(problem.jacobian_f(x, t), dtype=float).reshape(problem.dim, problem.dim)
    return jacobian_many(problem, x[None, :], np.asarray([t]))[0]


def jacobian_many(problem: Problem, X: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Batched Jacobians (T, n, n) at states X (T, n) and times ts (T,)."""
    X = np.asarray(X, dtype=float)
    ts = np.asarray(ts, dtype=float)
    n = problem.dim
    if problem.jacobian_f is not None:
        J = np.asarray(problem.jacobian_f(X, ts), dtype=float)
        return J.reshape(X.shape[:-1] + (n, n))
    J = np.empty(X.shape[:-1] + (n, n))
    base = problem.field_many(X, ts)
    if not np.all(np.isfinite(base)):
        raise DomainError("field produced non-finite values while differencing")
    for j in range(n):
        h = _SQRT_EPS * (1.0 + np.abs(X[..., j]))
        Xp = X.copy()
        Xm = X.copy()
        Xp[..., j] += h
        Xm[..., j] -= h
        diff = (problem.field_many(Xp, ts) - problem.field_many(Xm, ts)) / (2.0 * h)[..., None]
        J[..., :, j] = diff
    if not np.all(np.isfinite(J)):
        raise DomainError("finite-difference Jacobian is non-finite")
    return J


@dataclass
class SampledCurve:
    """Curve represented by (value, derivative) samples, Hermite-interpolated."""

    times: np.ndarray
    values: np.ndarray  # (T, n)
    derivs: np.ndarray  # (T, n)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0 = self.times[idx]
        h = self.times[idx + 1] - t0
        s = (t - t0) / h
        s2, s3 = s * s, s**3
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        return (
            h00[:, None] * self.values[idx]
            + (h * h10)[:, None] * self.derivs[idx]
            + h01[:, None] * self.values[idx + 1]
            + (h * h11)[:, None] * self.derivs[idx + 1]
        )

    def derivative(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0 = self.times[idx]
        h = self.times[idx + 1] - t0
        s = (t - t0) / h
        s2 = s * s
        d00 = (6 * s2 - 6 * s) / h
        d10 = 3 * s2 - 4 * s + 1
        d01 = (-6 * s2 + 6 * s) / h
        d11 = 3 * s2 - 2 * s
        return (
            d00[:, None] * self.values[idx]
            + d10[:, None] * self.derivs[idx]
            + d01[:, None] * self.values[idx + 1]
            + d11[:, None] * self.derivs[idx + 1]
        )


@dataclass
class RefineState:
    """Linearization of the field about the current model trajectory.

    ``A_field(ts)``/``b_field(ts)`` are rebuilt from the current model on
    every iteration, so they are never stale.
    """

    problem: Problem
    model: PwlModel
    cfg: RefineConfig

    def x(self, ts) -> np.ndarray:
        return eval_model_many(self.model, ts)

    def xp(self, ts) -> np.ndarray:
        return model_derivative_many(self.model, ts)

    def A_field(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return jacobian_many(self.problem, self.x(ts), ts)

    def b_field(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return self.problem.field_many(self.x(ts), ts) - self.xp(ts)

    def integration_grid(self, extra: np.ndarray | None = None) -> np.ndarray:
        nodes = self.model.mesh.nodes
        sub = self.cfg.substeps
        grid = np.unique(
            np.concatenate(
                [np.linspace(nodes[i], nodes[i + 1], sub + 1) for i in range(nodes.size - 1)]
                + ([np.asarray(extra, dtype=float)] if extra is not None else [])
            )
        )
        return grid


def make_state(model: PwlModel, problem: Problem, cfg: RefineConfig | None = None) -> RefineState:
    return RefineState(problem=problem, model=model, cfg=cfg or RefineConfig())


def _global_quadrature(mesh: Mesh, quad: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = [], []
    for i in range(mesh.N):
        t0, t1 = mesh.interval(i)
        n, w = quad.nodes_weights(t0, t1)
        nodes.append(n)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def _curve_from_integration(state: RefineState, eta: np.ndarray, substeps: int | None = None) -> SampledCurve:
    """Solve y' = A(t) y + b(t), y(0) = eta, on the refined mesh grid."""
    sub = substeps if substeps is not None else state.cfg.substeps
    nodes = state.model.mesh.nodes
    grid = np.unique(np.concatenate([np.linspace(nodes[i], nodes[i + 1], sub + 1) for i in range(nodes.size - 1)]))
    vals = linflow.integrate_affine(state.A_field, state.b_field, grid, np.asarray(eta, dtype=float))
    derivs = np.einsum("tij,tj->ti", state.A_field(grid), vals) + state.b_field(grid)
    return SampledCurve(grid, vals, derivs)


def correction_zero_iv(state: RefineState, substeps: int | None = None) -> SampledCurve:
    """Correction with zero initial value: y(t) = int_0^t Phi(t, s) b(s) ds."""
    return _curve_from_integration(state, np.zeros(state.problem.dim), substeps)


def correction_with_eta(state: RefineState, eta, substeps: int | None = None) -> SampledCurve:
    """Correction y(t; eta) = Phi(t, 0) eta + int_0^t Phi(t, s) b(s) ds."""
    return _curve_from_integration(state, np.asarray(eta, dtype=float), substeps)


def correction_pointwise_newton(state: RefineState, samples: int | None = None) -> SampledCurve:
    """Pointwise correction y(t) = -A(t)^{-1} b(t).

    Requires A(t) uniformly well conditioned on the sample grid; note this
    correction modifies the initial value (y(0) != 0 in general). The sampled
    derivative is a centered-difference estimate.
    """
    grid = state.integration_grid()
    if samples is not None:
        grid = np.linspace(0.0, 1.0, samples)
    A = state.A_field(grid)
    b = state.b_field(grid)
    conds = np.linalg.cond(A)
    bad = np.nonzero(~(conds < state.cfg.cond_limit))[0]
    if bad.size:
        t_bad = float(grid[bad[0]])
        raise PointwiseUnavailable(t_bad, f"pointwise mode unavailable: A(t) near-singular at t = {t_bad:.6g}")
    vals = -np.linalg.solve(A, b[..., None])[..., 0]
    derivs = np.gradient(vals, grid, axis=0)
    return SampledCurve(grid, vals, derivs)


def apply_correction(x_model: PwlModel, y_curve, mesh: Mesh, f) -> PwlModel:
    """x + y re-projected onto the model class by Hermite node resampling.

    Node values are x(t_i) + y(t_i); node slopes are re-collocated to
    f(new value, t_i).
    """
    ts = mesh.nodes
    xvals = eval_model_many(x_model, ts)
    yvals = y_curve(ts) if callable(y_curve) else np.asarray(y_curve, dtype=float)
    new_vals = xvals + yvals
    slopes = np.stack([np.asarray(f(new_vals[i], float(t)), dtype=float).reshape(-1) for i, t in enumerate(ts)])
    return hermite_model(mesh, new_vals, slopes)


# ---------------------------------------------------------------------------
# eta machinery: minimize F(eta) = int_0^1 |y'(t; eta)|^2 dt


def _flow_at(state: RefineState, emit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Phi(t, 0), u(t)) at the emit times, one integration pass."""
    grid = state.integration_grid(extra=emit)
    Phis, us = linflow.integrate_flow(state.A_field, state.b_field, grid)
    idx = np.searchsorted(grid, emit)
    return Phis[idx], us[idx]


def eta_objective(state: RefineState, eta, substeps: int | None = None, quad: QuadratureRule | None = None) -> float:
    """F(eta) = int_0^1 |A(t) y(t; eta) + b(t)|^2 dt by mesh-panel quadrature."""
    quad = quad or state.cfg.quad
    tq, wq = _global_quadrature(state.model.mesh, quad)
    grid = state.integration_grid(extra=tq)
    vals = linflow.integrate_affine(state.A_field, state.b_field, grid, np.asarray(eta, dtype=float))
    idx = np.searchsorted(grid, tq)
    y = vals[idx]
    yp = np.einsum("tij,tj->ti", state.A_field(tq), y) + state.b_field(tq)
    return float(np.dot(wq, squared_norm(yp)))


def _fd_gradient(fn, x0: np.ndarray, h_scale: float = 1e-6) -> np.ndarray:
    n = x0.size
    g = np.empty(n)
    for j in range(n):
        h = h_scale * (1.0 + abs(float(x0[j])))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def _fd_hessian(fn, x0: np.ndarray, h_scale: float = 1e-4) -> np.ndarray:
    n = x0.size
    H = np.empty((n, n))
    f0 = fn(x0)
    hs = np.array([h_scale * (1.0 + abs(float(x0[j]))) for j in range(n)])
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = hs[i]
        H[i, i] = (fn(x0 + ei) - 2.0 * f0 + fn(x0 - ei)) / hs[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = hs[j]
            H[i, j] = H[j, i] = (fn(x0 + ei + ej) - fn(x0 + ei - ej) - fn(x0 - ei + ej) + fn(x0 - ei - ej)) / (
                4.0 * hs[i] * hs[j]
            )
    return 0.5 * (H + H.T)


def golden_section(fn, a: float, b: float, tol: float) -> float:
    """Bracketed scalar minimization on [a, b]; returns the argmin."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = fn(x1), fn(x2)
    while b - a > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = fn(x2)
    return 0.5 * (a + b)


def eta_quadratic_terms(state: RefineState, quad: QuadratureRule | None = None):
    """Exact quadratic expansion of F: (H, g, c) with F(eta) = eta'H eta/2... .

    Returns (H, grad0, const) where F(eta) = const + grad0 . eta
    + 0.5 eta' H eta; H = 2 int D'D, grad0 = 2 int D'd0 with D = A Phi and
    d0 = A u + b.
    """
    quad = quad or state.cfg.quad
    tq, wq = _global_quadrature(state.model.mesh, quad)
    Phis, us = _flow_at(state, tq)
    A = state.A_field(tq)
    b = state.b_field(tq)
    d0 = np.einsum("tij,tj->ti", A, us) + b
    D = np.einsum("tij,tjk->tik", A, Phis)
    H = 2.0 * np.einsum("t,tin,tim->nm", wq, D, D)
    grad0 = 2.0 * np.einsum("t,tin,ti->n", wq, D, d0)
    const = float(np.dot(wq, squared_norm(d0)))
    return H, grad0, const


def optimal_eta(state: RefineState, strategy: str | None = None, cfg: RefineConfig | None = None):
    """Minimizer of F(eta) under the configured strategy.

    Returns (eta, info). A singular Hessian falls back to the gradient
    strategy with info["fallback"] = True.
    """
    cfg = cfg or state.cfg
    strategy = strategy or cfg.eta_strategy
    n = state.problem.dim
    F = lambda eta: eta_objective(state, eta, quad=cfg.quad)
    if strategy == "closed_form":
        H, g, _ = eta_quadratic_terms(state, cfg.quad)
        try:
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned")
            eta = np.linalg.solve(H, -g)
            return eta, {"strategy": "closed_form", "fallback": False}
        except np.linalg.LinAlgError:
            eta, info = optimal_eta(state, "gradient", cfg)
            info = dict(info, fallback=True, warning="singular Hessian; fell back to gradient")
            return eta, info
    if strategy == "newton":
        eta = np.zeros(n)
        for it in range(cfg.max_newton):
            g = _fd_gradient(F, eta)
            H = _fd_hessian(F, eta)
            try:
                if np.linalg.cond(H) > 1e12:
                    raise np.linalg.LinAlgError("ill-conditioned")
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                eta, info = optimal_eta(state, "gradient", cfg)
                info = dict(info, fallback=True, warning="singular Hessian; fell back to gradient")
                return eta, info
            eta = eta + step
            if np.linalg.norm(step) < 1e-10 * (1.0 + np.linalg.norm(eta)):
                return eta, {"strategy": "newton", "iterations": it + 1, "fallback": False}
        return eta, {"strategy": "newton", "iterations": cfg.max_newton, "fallback": False}
    if strategy == "gradient":
        g = _fd_gradient(F, np.zeros(n))
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            return np.zeros(n), {"strategy": "gradient", "h": 0.0, "fallback": False}
        M = cfg.line_search_bound
        h = golden_section(lambda hh: F(-hh * g), 0.0, M, cfg.ls_tol)
        return -h * g, {"strategy": "gradient", "h": h, "fallback": False}
    raise DomainError(f"unknown eta strategy {strategy!r}")


# ---------------------------------------------------------------------------
# boundary-driven eta updates


def _boundary_setup(state: RefineState, problem: Problem):
    """Phi(1,0), the zero-IV terminal shift, endpoint values and beta partials."""
    Phis, us = _flow_at(state, np.asarray([1.0]))
    Phi10 = Phis[0]
    w = us[0]
    theta0 = eval_model_many(state.model, np.asarray([0.0]))[0]
    thetaN = eval_model_many(state.model, np.asarray([1.0]))[0]
    thetaN_hat = thetaN + w
    beta = problem.boundary.as_general()
    bval = float(beta(theta0, thetaN_hat))
    d0 = _fd_gradient(lambda a: float(beta(a, thetaN_hat)), theta0.copy())
    dN = _fd_gradient(lambda c: float(beta(theta0, c)), thetaN_hat.copy())
    return Phi10, theta0, thetaN_hat, beta, bval, d0, dN


def _ray_box_cap(problem: Problem, cfg: RefineConfig, theta0, thetaN_hat, Phi10, d) -> float:
    """Largest step along the ray keeping both updated endpoints in the inflated box."""
    box = problem.inflated_box(cfg.box_inflation)
    M = cfg.line_search_bound

    def inside(h: float) -> bool:
        a = theta0 + h * d
        c = thetaN_hat + Phi10 @ (h * d)
        return bool(np.all(a >= box[:, 0]) and np.all(a <= box[:, 1]) and np.all(c >= box[:, 0]) and np.all(c <= box[:, 1]))

    if inside(M):
        return M
    lo, hi = 0.0, M
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    return lo


def boundary_eta_step(state: RefineState, problem: Problem, cfg: RefineConfig | None = None):
    """Gradient-style boundary update for the correction's initial value.

    eta = -h beta(theta_0, thetaN_hat) [d_theta0 beta + Phi(1,0) d_thetaN beta]
    with the multiplier h from a bracketed scalar search on [0, M] minimizing
    beta^2 after the update, capped so the endpoints stay in the inflated
    state box. Returns (eta, info); info["stalled"] is set when no step
    decreases beta^2.
    """
    cfg = cfg or state.cfg
    Phi10, theta0, thetaN_hat, beta, bval, d0, dN = _boundary_setup(state, problem)
    n = theta0.size
    if bval == 0.0:
        return np.zeros(n), {"h": 0.0, "beta": 0.0, "stalled": False}
    d = -bval * (d0 + Phi10 @ dN)
    if not np.any(d):
        return np.zeros(n), {"h": 0.0, "beta": bval, "stalled": True}

    def phi(h: float) -> float:
        return float(beta(theta0 + h * d, thetaN_hat + Phi10 @ (h * d))) ** 2

    M_eff = _ray_box_cap(problem, cfg, theta0, thetaN_hat, Phi10, d)
    if M_eff <= 0.0:
        return np.zeros(n), {"h": 0.0, "beta": bval, "stalled": True}
    h = golden_section(phi, 0.0, M_eff, cfg.ls_tol)
    if phi(h) >= bval * bval:
        return np.zeros(n), {"h": 0.0, "beta": bval, "stalled": True}
    return h * d, {"h": h, "beta": bval, "stalled": False}


def boundary_eta_newton(state: RefineState, problem: Problem, cfg: RefineConfig | None = None):
    """Newton iteration on beta^2 as a function of the correction's initial value.

    Finite-difference gradient and Hessian of
    F(eta) = beta(theta_0 + eta, thetaN_hat + Phi(1,0) eta)^2; a singular
    Hessian falls back to the gradient step.
    """
    cfg = cfg or state.cfg
    Phi10, theta0, thetaN_hat, beta, bval, _, _ = _boundary_setup(state, problem)
    n = theta0.size
    if bval == 0.0:
        return np.zeros(n), {"iterations": 0, "beta": 0.0, "fallback": False}

    def F(eta: np.ndarray) -> float:
        return float(beta(theta0 + eta, thetaN_hat + Phi10 @ eta)) ** 2

    eta = np.zeros(n)
    for it in range(cfg.max_newton):
        g = _fd_gradient(F, eta)
        H = _fd_hessian(F, eta)
        try:
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned")
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            eta_g, info = boundary_eta_step(state, problem, cfg)
            return eta_g, dict(info, fallback=True)
        eta = eta + step
        if np.linalg.norm(step) < 1e-12 * (1.0 + np.linalg.norm(eta)):
            break
    return eta, {"iterations": it + 1, "beta": bval, "fallback": False}


# ---------------------------------------------------------------------------
# the refinement loop


@dataclass
class ConvergenceLog:
    entries: list = field(default_factory=list)
    flag: str = "max_iterations"
    best_index: int = 0

    def to_dict(self) -> dict:
        return {"entries": self.entries, "flag": self.flag, "best_index": self.best_index}


def _residual_metrics(state: RefineState) -> tuple[float, float]:
    tq, wq = _global_quadrature(state.model.mesh, state.cfg.quad)
    b = state.b_field(tq)
    l2 = float(np.sqrt(np.dot(wq, squared_norm(b))))
    mesh = state.model.mesh
    samples = np.concatenate(
        [chebyshev_lobatto(state.cfg.uniform_samples, *mesh.interval(i)) for i in range(mesh.N)]
    )
    sup = float(np.sqrt(squared_norm(state.b_field(samples)).max()))
    return l2, sup


def refine_loop(initial: PwlModel, problem: Problem, cfg: RefineConfig | None = None) -> tuple[PwlModel, ConvergenceLog]:
    """Iterate quasilinearized corrections until residual and boundary tolerances.

    Logs (residual L2, residual sup, |beta|, |eta|, h) per iteration. Stops on
    convergence, max iterations, or divergence (three consecutive residual
    increases); always returns the best iterate seen (including the input).
    """
    cfg = cfg or RefineConfig()
    mesh = initial.mesh
    beta = problem.boundary.as_general()
    model = initial
    log = ConvergenceLog()
    iterates = [initial]
    resids = []
    grow = 0
    flag = "max_iterations"
    for it in range(cfg.max_iterations + 1):
        state = make_state(model, problem, cfg)
        r_l2, r_sup = _residual_metrics(state)
        vals = model.node_values()
        bval = float(abs(beta(vals[0], vals[-1])))
        resids.append(r_l2)
        entry = {
            "iteration": it,
            "residual_l2": r_l2,
            "residual_sup": r_sup,
            "abs_beta": bval,
            "eta_norm": 0.0,
            "h": 0.0,
        }
        if r_l2 <= cfg.residual_tol and bval <= cfg.boundary_tol:
            log.entries.append(entry)
            flag = "converged"
            break
        if len(resids) >= 2 and resids[-1] > resids[-2] * (1.0 + 1e-9):
            grow += 1
            if grow >= 3:
                log.entries.append(entry)
                flag = "diverged"
                break
        else:
            grow = 0
        if it == cfg.max_iterations:
            log.entries.append(entry)
            break
        if cfg.boundary_strategy == "newton":
            eta, info = boundary_eta_newton(state, problem, cfg)
        else:
            eta, info = boundary_eta_step(state, problem, cfg)
        entry["eta_norm"] = float(np.linalg.norm(eta))
        entry["h"] = float(info.get("h", 0.0))
        log.entries.append(entry)
        y = correction_with_eta(state, eta)
        model = apply_correction(model, y, mesh, problem.field_f)
        iterates.append(model)
    log.flag = flag
    log.best_index = int(np.argmin(resids))
    return iterates[log.best_index], log
