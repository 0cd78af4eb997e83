"""Dynamic programming over discretized node states.

The DP state at mesh node k is the pair (theta_k, v_k) of trajectory value
and slope on a finite grid. Interior continuity then holds by construction
(Hermite transition mode) or up to eps_cont (Exponential mode with constant
candidate matrices), so the admissible-set bookkeeping reduces to boundary
filters at the first and last node.

Stage tables are filled forward with argmin back-links and read out by
backtracking; ties always resolve to the smallest flattened state index so
results are deterministic and comparable with the brute-force oracle.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, linflow
from .errfun import ErrorAccumulator, Integrand, QuadratureRule, chebyshev_lobatto, piece_error_additive, piece_error_uniform
from .exceptions import DomainError, GuardExceeded, InfeasibleDiscretization
from .model import Mesh, Piece, Problem, PwlModel

BRUTE_FORCE_GUARD = 1_000_000


# ---------------------------------------------------------------------------
# state grids


@dataclass(frozen=True)
class StateGrid:
    """Per-dimension value grids for node states theta and node slopes v.

    Grids are either shared by all nodes (from :func:`discretize_states`) or
    node-dependent (from :func:`refine_tube`).
    """

    shared_theta: tuple | None = None
    shared_v: tuple | None = None
    node_theta: tuple | None = None  # tuple over nodes of per-dim axis tuples
    node_v: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "_cache", {})
        for axes in self._all_axes():
            for ax in axes:
                if ax.size < 1 or np.any(np.diff(ax) <= 0):
                    raise DomainError("grid axes must be sorted and duplicate-free")

    def _all_axes(self):
        if self.shared_theta is not None:
            yield self.shared_theta
            yield self.shared_v
        else:
            yield from self.node_theta
            yield from self.node_v

    @property
    def per_node(self) -> bool:
        return self.node_theta is not None

    @property
    def dim(self) -> int:
        axes = self.shared_theta if self.shared_theta is not None else self.node_theta[0]
        return len(axes)

    def theta_axes_at(self, k: int) -> tuple:
        return self.shared_theta if self.shared_theta is not None else self.node_theta[k]

    def v_axes_at(self, k: int) -> tuple:
        return self.shared_v if self.shared_v is not None else self.node_v[k]

    def counts_at(self, k: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return (
            tuple(ax.size for ax in self.theta_axes_at(k)),
            tuple(ax.size for ax in self.v_axes_at(k)),
        )

    def n_states_at(self, k: int) -> int:
        tc, vc = self.counts_at(k)
        return int(np.prod(tc) * np.prod(vc))

    def theta_points_at(self, k: int) -> np.ndarray:
        """Cartesian product of the theta axes at node k, (Q_theta, n)."""
        key = ("tp", k if self.per_node else -1)
        if key not in self._cache:
            axes = self.theta_axes_at(k)
            grids = np.meshgrid(*axes, indexing="ij")
            self._cache[key] = np.stack([g.ravel() for g in grids], axis=-1)
        return self._cache[key]

    def states_at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """All (theta, v) states at node k as (thetas (Q, n), vs (Q, n)).

        Flattened in row-major order over (theta_1, ..., theta_n, v_1, ...,
        v_n); this order defines the deterministic tie-break.
        """
        key = ("st", k if self.per_node else -1)
        if key not in self._cache:
            axes = list(self.theta_axes_at(k)) + list(self.v_axes_at(k))
            n = self.dim
            grids = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=-1)
            self._cache[key] = (np.ascontiguousarray(pts[:, :n]), np.ascontiguousarray(pts[:, n:]))
        return self._cache[key]


def discretize_states(box, vbox, counts) -> StateGrid:
    """Uniform shared grids including box endpoints.

    ``counts`` is a pair (theta_counts, v_counts) of per-dimension counts,
    each a sequence or a single int applied to every dimension.
    """
    box = np.asarray(box, dtype=float)
    vbox = np.asarray(vbox, dtype=float)
    box = box.reshape(-1, 2)
    vbox = vbox.reshape(-1, 2)
    tc, vc = counts
    n = box.shape[0]
    tc = [int(tc)] * n if np.isscalar(tc) else [int(c) for c in tc]
    vc = [int(vc)] * n if np.isscalar(vc) else [int(c) for c in vc]
    if len(tc) != n or len(vc) != n or vbox.shape[0] != n:
        raise DomainError("counts and boxes must agree with the state dimension")
    if any(c < 2 for c in tc + vc):
        raise DomainError("need at least 2 grid points per dimension")
    if np.any(box[:, 1] <= box[:, 0]) or np.any(vbox[:, 1] <= vbox[:, 0]):
        raise DomainError("boxes must be nondegenerate")
    theta = tuple(np.linspace(box[d, 0], box[d, 1], tc[d]) for d in range(n))
    v = tuple(np.linspace(vbox[d, 0], vbox[d, 1], vc[d]) for d in range(n))
    return StateGrid(shared_theta=theta, shared_v=v)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DpState:
    """State at node k: trajectory value theta and slope v on the grid."""

    k: int
    theta: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class DpConfig:
    accumulator: ErrorAccumulator = field(default_factory=ErrorAccumulator.additive)
    integrand: Integrand = field(default_factory=Integrand)
    quad: QuadratureRule = field(default_factory=QuadratureRule)
    uniform_samples: int = 33
    eps_beta: float | None = None
    eps_cont: float | None = None
    mode: str = "hermite"
    candidate_A: tuple = ()
    theta_counts: object = 21
    v_counts: object = 11
    v_box: object = None
    tube_iterations: int = 0
    tube_shrink: float = 0.5

    def __post_init__(self):
        if self.mode not in ("hermite", "exponential"):
            raise DomainError("mode must be 'hermite' or 'exponential'")
        if self.eps_beta is not None and self.eps_beta <= 0:
            raise DomainError("eps_beta must be positive")
        if self.eps_cont is not None and self.eps_cont <= 0:
            raise DomainError("eps_cont must be positive")
        if not 0.0 < self.tube_shrink <= 1.0:
            raise DomainError("tube_shrink must be in (0, 1]")
        cand = tuple(np.asarray(A, dtype=float) for A in self.candidate_A)
        object.__setattr__(self, "candidate_A", cand)


def _batch_scalar(fn, pts: np.ndarray) -> np.ndarray:
    """Evaluate a scalar function of a state vector on a batch (..., n)."""
    try:
        out = np.asarray(fn(pts), dtype=float)
        if out.shape == pts.shape[:-1]:
            return out
    except Exception:
        pass
    flat = pts.reshape(-1, pts.shape[-1])
    vals = np.array([float(fn(p)) for p in flat])
    return vals.reshape(pts.shape[:-1])


def _batch_scalar2(fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Evaluate beta(a, b) on broadcastable batches of endpoint vectors."""
    try:
        out = np.asarray(fn(a, b), dtype=float)
        if out.shape == np.broadcast_shapes(a.shape[:-1], b.shape[:-1]):
            return out
    except Exception:
        pass
    A = np.broadcast_to(a, np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + a.shape[-1:])
    B = np.broadcast_to(b, A.shape)
    flatA = A.reshape(-1, A.shape[-1])
    flatB = B.reshape(-1, B.shape[-1])
    vals = np.array([float(fn(x, y)) for x, y in zip(flatA, flatB)])
    return vals.reshape(A.shape[:-1])


def _max_spacing(grid: StateGrid, N: int, which: str) -> float:
    worst = 0.0
    nodes = range(N + 1) if grid.per_node else [0]
    for k in nodes:
        axes = grid.theta_axes_at(k) if which == "theta" else grid.v_axes_at(k)
        for ax in axes:
            if ax.size > 1:
                worst = max(worst, float(np.max(np.diff(ax))))
    return worst


def _lipschitz_estimate(fn, pts: np.ndarray, step: float) -> float:
    """Max finite-difference slope of a scalar state function over samples."""
    if pts.shape[0] > 256:
        stride = int(np.ceil(pts.shape[0] / 256))
        pts = pts[::stride]
    base = _batch_scalar(fn, pts)
    worst = 0.0
    for d in range(pts.shape[1]):
        shifted = pts.copy()
        shifted[:, d] += step
        vals = _batch_scalar(fn, shifted)
        worst = max(worst, float(np.max(np.abs(vals - base))) / step)
    return worst


def resolve_eps(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig) -> tuple[float, float]:
    """Concrete (eps_beta, eps_cont) for this instance.

    Auto eps_beta is half the largest theta-grid spacing times a sampled
    Lipschitz estimate of the boundary function; auto eps_cont is 1e-9 in
    Hermite mode (continuity is exact by construction) and half the largest
    grid spacing in Exponential mode (grid-snap slack).
    """
    N = mesh.N
    sp_theta = _max_spacing(grid, N, "theta")
    sp_v = _max_spacing(grid, N, "v")
    eps_beta = cfg.eps_beta
    if eps_beta is None:
        step = max(sp_theta, 1e-6)
        bc = problem.boundary
        if bc.kind == "separable":
            L = max(
                _lipschitz_estimate(bc.beta0, grid.theta_points_at(0), step),
                _lipschitz_estimate(bc.beta1, grid.theta_points_at(N), step),
            )
        else:
            pts0 = grid.theta_points_at(0)
            ptsN = grid.theta_points_at(N)
            mid = ptsN[ptsN.shape[0] // 2]
            L = max(
                _lipschitz_estimate(lambda a: bc.beta(a, mid), pts0, step),
                _lipschitz_estimate(lambda b: bc.beta(pts0[pts0.shape[0] // 2], b), ptsN, step),
            )
        eps_beta = 0.5 * sp_theta * max(L, 1e-8) + 1e-12
    eps_cont = cfg.eps_cont
    if eps_cont is None:
        eps_cont = 1e-9 if cfg.mode == "hermite" else 0.5 * max(sp_theta, sp_v) + 1e-12
    return float(eps_beta), float(eps_cont)


# ---------------------------------------------------------------------------
# transitions and stage costs


def transition_piece(sigma_prev: DpState, sigma_next: DpState, mode: str, mesh: Mesh, k: int, A=None, eps_cont: float = 1e-9):
    """Piece joining two node states, or None if the transition is inadmissible.

    Hermite mode: A = 0 and b the derivative of the cubic Hermite interpolant,
    so value and slope continuity hold exactly at both nodes. Exponential
    mode: constant candidate A with b = v_prev - A theta_prev, admissible only
    if the endpoint value and slope land within eps_cont of the next state.
    """
    t0, t1 = mesh.interval(k - 1)
    h = t1 - t0
    th0 = np.asarray(sigma_prev.theta, dtype=float)
    v0 = np.asarray(sigma_prev.v, dtype=float)
    th1 = np.asarray(sigma_next.theta, dtype=float)
    v1 = np.asarray(sigma_next.v, dtype=float)
    n = th0.size
    if mode == "hermite":
        c0 = v0
        c1 = 6.0 * (th1 - th0) / h - 4.0 * v0 - 2.0 * v1
        c2 = 6.0 * (th0 - th1) / h + 3.0 * v0 + 3.0 * v1
        return Piece(t0, t1, np.zeros((3, n, n)), np.stack([c0, c1, c2]), th0)
    if mode == "exponential":
        if A is None:
            raise DomainError("exponential transition needs a candidate matrix A")
        A = np.asarray(A, dtype=float).reshape(n, n)
        b = v0 - A @ th0
        piece = Piece(t0, t1, A[None, :, :], b[None, :], th0)
        end = linflow.propagate_piece(piece, t1)
        if np.linalg.norm(end - th1) > eps_cont:
            return None
        if np.linalg.norm(A @ th1 + b - v1) > eps_cont:
            return None
        return piece
    raise DomainError(f"unknown transition mode {mode!r}")


def stage_cost(sigma_prev: DpState, sigma_next: DpState, f, G: Integrand, quad: QuadratureRule, mode: str = "hermite", accumulator: ErrorAccumulator | None = None, mesh: Mesh | None = None, k: int | None = None, A=None, eps_cont: float = 1e-9, uniform_samples: int = 33) -> float:
    """Per-transition piece error; +inf for an inadmissible transition."""
    acc = accumulator or ErrorAccumulator.additive()
    if mesh is None or k is None:
        raise DomainError("stage_cost needs the mesh and the stage index k")
    piece = transition_piece(sigma_prev, sigma_next, mode, mesh, k, A=A, eps_cont=eps_cont)
    if piece is None:
        return float("inf")
    if acc.kind == "uniform_max":
        return piece_error_uniform(piece, f, samples=uniform_samples)
    return piece_error_additive(piece, f, G=G, quad=quad)


def _field_on_tensor(problem: Problem, y: np.ndarray, ts: np.ndarray) -> np.ndarray:
    tb = np.broadcast_to(ts, y.shape[:-1])
    return problem.field_many(y, tb)


def stage_cost_matrix(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig, k: int, eps_cont: float):
    """All transition costs into stage k: (E, choice).

    E has shape (P, Q) over flattened predecessor/successor states, +inf for
    inadmissible transitions; ``choice`` holds the argmin candidate-matrix
    index in exponential mode (None in Hermite mode).
    """
    t0, t1 = mesh.interval(k - 1)
    h = t1 - t0
    thp, vp = grid.states_at(k - 1)
    thq, vq = grid.states_at(k)
    uniform = cfg.accumulator.kind == "uniform_max"
    if uniform:
        ts = chebyshev_lobatto(cfg.uniform_samples, t0, t1)
        w = None
    else:
        ts, w = cfg.quad.nodes_weights(t0, t1)
    if cfg.mode == "hermite":
        E = _hermite_cost(problem, cfg, thp, vp, thq, vq, ts, w, t0, h, uniform)
        return np.where(np.isfinite(E), E, np.inf), None
    return _exponential_cost(problem, cfg, thp, vp, thq, vq, ts, w, t0, h, uniform, eps_cont)


def _hermite_cost(problem, cfg, thp, vp, thq, vq, ts, w, t0, h, uniform):
    ker = kernels.active()
    P, n = thp.shape
    Q = thq.shape[0]
    M = ts.size
    s = (ts - t0) / h
    default_G = getattr(cfg.integrand.fn, "__name__", "") == "squared_norm"
    E = np.empty((P, Q))
    block = max(1, int(4_000_000 // max(1, Q * M * n)))
    for i0 in range(0, P, block):
        i1 = min(P, i0 + block)
        y, yp = ker.hermite_pair(thp[i0:i1], vp[i0:i1], thq, vq, s, h)
        resid = yp - _field_on_tensor(problem, y, ts)
        resid = np.ascontiguousarray(resid)
        if uniform:
            E[i0:i1] = ker.pair_cost_max(resid)
        elif default_G:
            E[i0:i1] = ker.pair_cost_sq(resid, w)
        else:
            E[i0:i1] = np.tensordot(cfg.integrand(resid), w, axes=([-1], [0]))
    return E


def _exponential_cost(problem, cfg, thp, vp, thq, vq, ts, w, t0, h, uniform, eps_cont):
    if not cfg.candidate_A:
        raise DomainError("exponential mode needs a nonempty candidate_A set")
    P, n = thp.shape
    Q = thq.shape[0]
    default_G = getattr(cfg.integrand.fn, "__name__", "") == "squared_norm"
    Ebest = np.full((P, Q), np.inf)
    choice = np.full((P, Q), -1, dtype=np.int64)
    for c, A in enumerate(cfg.candidate_A):
        A = np.asarray(A, dtype=float).reshape(n, n)
        b = vp - thp @ A.T  # (P, n)
        ys = np.empty((P, ts.size, n))
        for m, tm in enumerate(ts):
            Em, Wm = linflow.affine_flow_const(A, float(tm) - t0)
            ys[:, m, :] = thp @ Em.T + b @ Wm.T
        yps = ys @ A.T + b[:, None, :]
        resid = yps - _field_on_tensor(problem, ys, ts)
        if uniform:
            cost = np.sqrt(np.einsum("pmn,pmn->pm", resid, resid).max(axis=1))
        elif default_G:
            cost = np.einsum("pmn,pmn->pm", resid, resid) @ w
        else:
            cost = np.tensordot(cfg.integrand(resid), w, axes=([-1], [0]))
        Eend, Wend = linflow.affine_flow_const(A, h)
        yend = thp @ Eend.T + b @ Wend.T  # (P, n)
        val_err = np.linalg.norm(yend[:, None, :] - thq[None, :, :], axis=-1)
        slope_gap = b[:, None, :] + (thq @ A.T - vq)[None, :, :]
        slope_err = np.linalg.norm(slope_gap, axis=-1)
        adm = (val_err <= eps_cont) & (slope_err <= eps_cont)
        cost_pq = np.where(adm, np.where(np.isfinite(cost), cost, np.inf)[:, None], np.inf)
        better = cost_pq < Ebest
        choice = np.where(better, c, choice)
        Ebest = np.where(better, cost_pq, Ebest)
    return Ebest, choice


# ---------------------------------------------------------------------------
# boundary admissibility


def _expand_theta_mask(mask_theta: np.ndarray, grid: StateGrid, k: int) -> np.ndarray:
    _, vc = grid.counts_at(k)
    return np.repeat(mask_theta, int(np.prod(vc)))


def _initial_mask(problem: Problem, grid: StateGrid, N: int, eps_beta: float) -> np.ndarray:
    bc = problem.boundary
    pts0 = grid.theta_points_at(0)
    if bc.kind == "separable":
        vals = _batch_scalar(bc.beta0, pts0)
        mask = np.abs(vals) <= eps_beta
    else:
        ptsN = grid.theta_points_at(N)
        vals = _batch_scalar2(bc.beta, pts0[:, None, :], ptsN[None, :, :])
        mask = np.any(np.abs(vals) <= eps_beta, axis=1)
    return _expand_theta_mask(mask, grid, 0)


def _terminal_theta_mask(problem: Problem, grid: StateGrid, N: int, eps_beta: float) -> np.ndarray:
    bc = problem.boundary
    ptsN = grid.theta_points_at(N)
    if bc.kind == "separable":
        vals = _batch_scalar(bc.beta1, ptsN)
        return np.abs(vals) <= eps_beta
    pts0 = grid.theta_points_at(0)
    vals = _batch_scalar2(bc.beta, pts0[:, None, :], ptsN[None, :, :])
    return np.any(np.abs(vals) <= eps_beta, axis=0)


def _pair_beta_mask(problem: Problem, grid: StateGrid, N: int, eps_beta: float) -> np.ndarray:
    """|beta| <= eps over (node-0 state, node-N state) pairs (theta parts)."""
    bc = problem.boundary
    th0, _ = grid.states_at(0)
    thN, _ = grid.states_at(N)
    vals = _batch_scalar2(bc.as_general(), th0[:, None, :], thN[None, :, :])
    return np.abs(vals) <= eps_beta


# ---------------------------------------------------------------------------
# accumulation helpers shared by tabulation and the oracle


def _g_apply(acc: ErrorAccumulator, prefix: np.ndarray, E: np.ndarray) -> np.ndarray:
    """g(prefix, E) elementwise with +inf propagation."""
    if acc.kind == "additive":
        return prefix + E
    if acc.kind == "uniform_max":
        return np.maximum(prefix, E)
    ok = np.isfinite(prefix) & np.isfinite(E)
    safe = acc.g(np.where(np.isfinite(prefix), prefix, 0.0), np.where(np.isfinite(E), E, 0.0))
    return np.where(ok, safe, np.inf)


def _relax(acc: ErrorAccumulator, S_prev: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ker = kernels.active()
    if acc.kind == "additive":
        return ker.relax_additive(S_prev, E)
    if acc.kind == "uniform_max":
        return ker.relax_max(S_prev, E)
    M = _g_apply(acc, S_prev[:, None], E)
    arg = np.argmin(M, axis=0)
    return M[arg, np.arange(E.shape[1])], arg.astype(np.int64)


# ---------------------------------------------------------------------------
# forward tabulation


@dataclass
class DpTables:
    kind: str  # "separable" | "general"
    mesh: Mesh
    grid: StateGrid
    cfg: DpConfig
    eps_beta: float
    eps_cont: float
    stage_values: list  # k=1..N
    back_links: list  # k=1..N
    choices: list  # chosen candidate index per target state (or None)
    initial_mask: np.ndarray
    terminal_theta_mask: np.ndarray
    sigma0_indices: np.ndarray | None = None  # general case
    pair_mask: np.ndarray | None = None  # general case, (n0, Q_N)
    meta: dict = field(default_factory=dict)


def _check_bellman_inputs(problem, mesh, grid, cfg, expect_kind):
    if problem.boundary.kind != expect_kind:
        raise DomainError(f"boundary kind must be {expect_kind!r} for this tabulation")
    if mesh.N < 2:
        raise DomainError("N >= 2 intervals required")


def forward_tabulate_separable(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig) -> DpTables:
    """Fill S_k tables for separable boundary conditions."""
    _check_bellman_inputs(problem, mesh, grid, cfg, "separable")
    eps_beta, eps_cont = resolve_eps(problem, mesh, grid, cfg)
    N = mesh.N
    acc = cfg.accumulator
    m0 = _initial_mask(problem, grid, N, eps_beta)
    if not m0.any():
        raise InfeasibleDiscretization(
            "initial_boundary",
            f"no grid state satisfies |beta0| <= {eps_beta:.3g} at the left endpoint",
        )
    mN = _terminal_theta_mask(problem, grid, N, eps_beta)
    if not mN.any():
        raise InfeasibleDiscretization(
            "terminal_boundary",
            f"no grid state satisfies |beta1| <= {eps_beta:.3g} at the right endpoint",
        )
    S_prev = np.where(m0, acc.initial, np.inf)
    stage_values, back_links, choices, meta_stages = [], [], [], []
    for k in range(1, N + 1):
        tic = time.perf_counter()
        E, choice = stage_cost_matrix(problem, mesh, grid, cfg, k, eps_cont)
        S, bp = _relax(acc, S_prev, E)
        csel = None if choice is None else choice[bp, np.arange(E.shape[1])]
        stage_values.append(S)
        back_links.append(bp)
        choices.append(csel)
        meta_stages.append(
            {
                "stage": k,
                "states": int(E.shape[1]),
                "admissible_transitions": int(np.isfinite(E).sum()),
                "seconds": time.perf_counter() - tic,
            }
        )
        S_prev = S
    return DpTables(
        kind="separable",
        mesh=mesh,
        grid=grid,
        cfg=cfg,
        eps_beta=eps_beta,
        eps_cont=eps_cont,
        stage_values=stage_values,
        back_links=back_links,
        choices=choices,
        initial_mask=m0,
        terminal_theta_mask=_expand_theta_mask(mN, grid, N),
        meta={"stages": meta_stages},
    )


def forward_tabulate_general(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig) -> DpTables:
    """Fill S_k(sigma_0, sigma_k) tables for general boundary conditions."""
    _check_bellman_inputs(problem, mesh, grid, cfg, "general")
    eps_beta, eps_cont = resolve_eps(problem, mesh, grid, cfg)
    N = mesh.N
    acc = cfg.accumulator
    m0 = _initial_mask(problem, grid, N, eps_beta)
    if not m0.any():
        raise InfeasibleDiscretization(
            "initial_boundary",
            f"no left-endpoint grid state admits any right-endpoint value with |beta| <= {eps_beta:.3g}",
        )
    mN_theta = _terminal_theta_mask(problem, grid, N, eps_beta)
    if not mN_theta.any():
        raise InfeasibleDiscretization(
            "terminal_boundary",
            f"no right-endpoint grid state admits any left-endpoint value with |beta| <= {eps_beta:.3g}",
        )
    sigma0 = np.nonzero(m0)[0]
    stage_values, back_links, choices, meta_stages = [], [], [], []
    E1, choice1 = stage_cost_matrix(problem, mesh, grid, cfg, 1, eps_cont)
    S = _g_apply(acc, np.full((sigma0.size, 1), acc.initial), E1[sigma0, :])
    stage_values.append(S)
    back_links.append(np.broadcast_to(sigma0[:, None], S.shape).copy())
    choices.append(None if choice1 is None else choice1[sigma0, :])
    meta_stages.append({"stage": 1, "states": int(S.shape[1]), "sigma0_slice": int(sigma0.size), "admissible_transitions": int(np.isfinite(E1).sum())})
    for k in range(2, N + 1):
        tic = time.perf_counter()
        E, choice = stage_cost_matrix(problem, mesh, grid, cfg, k, eps_cont)
        Q = E.shape[1]
        S_new = np.empty((sigma0.size, Q))
        bp = np.empty((sigma0.size, Q), dtype=np.int64)
        csel = None if choice is None else np.empty((sigma0.size, Q), dtype=np.int64)
        for i in range(sigma0.size):
            S_new[i], bp[i] = _relax(acc, stage_values[-1][i], E)
            if csel is not None:
                csel[i] = choice[bp[i], np.arange(Q)]
        stage_values.append(S_new)
        back_links.append(bp)
        choices.append(csel)
        meta_stages.append(
            {
                "stage": k,
                "states": int(Q),
                "admissible_transitions": int(np.isfinite(E).sum()),
                "seconds": time.perf_counter() - tic,
            }
        )
    pair = _pair_beta_mask(problem, grid, N, eps_beta)[sigma0, :]
    return DpTables(
        kind="general",
        mesh=mesh,
        grid=grid,
        cfg=cfg,
        eps_beta=eps_beta,
        eps_cont=eps_cont,
        stage_values=stage_values,
        back_links=back_links,
        choices=choices,
        initial_mask=m0,
        terminal_theta_mask=_expand_theta_mask(mN_theta, grid, N),
        sigma0_indices=sigma0,
        pair_mask=pair,
        meta={"stages": meta_stages},
    )


def extract_path(tables: DpTables) -> tuple[float, list[int], list[int | None]]:
    """Optimal cost, node state indices (len N+1) and per-piece candidate ids."""
    N = tables.mesh.N
    if tables.kind == "separable":
        S_N = np.where(tables.terminal_theta_mask, tables.stage_values[-1], np.inf)
        q = int(np.argmin(S_N))
        cost = float(S_N[q])
        if not np.isfinite(cost):
            raise InfeasibleDiscretization(
                "transition_admissibility",
                "no admissible transition path reaches an admissible terminal state",
            )
        path = [q]
        for k in range(N, 0, -1):
            path.append(int(tables.back_links[k - 1][path[-1]]))
        path.reverse()
        choices = [None if tables.choices[k - 1] is None else int(tables.choices[k - 1][path[k]]) for k in range(1, N + 1)]
        return cost, path, choices
    S_N = np.where(tables.pair_mask, tables.stage_values[-1], np.inf)
    flat = int(np.argmin(S_N))
    cost = float(S_N.ravel()[flat])
    if not np.isfinite(cost):
        raise InfeasibleDiscretization(
            "transition_admissibility",
            "no admissible transition path links a boundary-compatible endpoint pair",
        )
    i0, q = divmod(flat, S_N.shape[1])
    path = [q]
    for k in range(N, 1, -1):
        path.append(int(tables.back_links[k - 1][i0, path[-1]]))
    path.append(int(tables.sigma0_indices[i0]))
    path.reverse()
    choices = []
    for k in range(1, N + 1):
        ch = tables.choices[k - 1]
        choices.append(None if ch is None else int(ch[i0, path[k]]))
    return cost, path, choices


def backtrack(tables: DpTables, problem: Problem, cfg: DpConfig | None = None) -> PwlModel:
    """Assemble the optimal model by following the argmin back-links."""
    cfg = cfg or tables.cfg
    cost, path, choices = extract_path(tables)
    return _assemble_model(tables, problem, cfg, path, choices)


def _assemble_model(tables: DpTables, problem: Problem, cfg: DpConfig, path: list[int], choices: list) -> PwlModel:
    mesh = tables.mesh
    grid = tables.grid
    pieces = []
    for k in range(1, mesh.N + 1):
        thp, vp = grid.states_at(k - 1)
        thq, vq = grid.states_at(k)
        sp = DpState(k - 1, thp[path[k - 1]], vp[path[k - 1]])
        sq = DpState(k, thq[path[k]], vq[path[k]])
        A = None
        if cfg.mode == "exponential":
            A = cfg.candidate_A[choices[k - 1]]
        # tiny slack: the matrix admissibility check and this scalar recheck
        # may differ in the last ulp at the threshold
        piece = transition_piece(sp, sq, cfg.mode, mesh, k, A=A, eps_cont=tables.eps_cont * (1.0 + 1e-9))
        if piece is None:
            raise InfeasibleDiscretization("transition_admissibility", "backtracked transition became inadmissible")
        pieces.append(piece)
    thN, _ = grid.states_at(mesh.N)
    return PwlModel(mesh, tuple(pieces), thN[path[-1]])


# ---------------------------------------------------------------------------
# brute-force oracle


@dataclass(frozen=True)
class BruteForceResult:
    cost: float
    path: tuple[int, ...]
    choices: tuple


def brute_force_solve(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig) -> BruteForceResult:
    """Exhaustive enumeration over admissible state sequences.

    Independent of the forward tabulation: folds the accumulated error along
    every sequence and selects by (cost, stagewise-optimal prefixes,
    reversed-lexicographic index) — the same deterministic choice the DP
    backtracking realizes. Used only as a test oracle.
    """
    N = mesh.N
    sizes = [grid.n_states_at(k) for k in range(N + 1)]
    total = 1
    for s in sizes:
        total *= s
        if total > BRUTE_FORCE_GUARD:
            raise GuardExceeded(f"state-sequence count exceeds {BRUTE_FORCE_GUARD}")
    eps_beta, eps_cont = resolve_eps(problem, mesh, grid, cfg)
    acc = cfg.accumulator
    mats = []
    choice_mats = []
    for k in range(1, N + 1):
        E, choice = stage_cost_matrix(problem, mesh, grid, cfg, k, eps_cont)
        mats.append(E)
        choice_mats.append(choice)

    m0 = _initial_mask(problem, grid, N, eps_beta)
    if not m0.any():
        raise InfeasibleDiscretization("initial_boundary", "no admissible initial grid state")
    mN_theta = _terminal_theta_mask(problem, grid, N, eps_beta)
    if not mN_theta.any():
        raise InfeasibleDiscretization("terminal_boundary", "no admissible terminal grid state")
    general = problem.boundary.kind == "general"

    prefix = np.where(m0, acc.initial, np.inf)
    prefixes = []
    cur = prefix
    for k in range(1, N + 1):
        E = mats[k - 1]
        expand = E.reshape((1,) * (cur.ndim - 1) + E.shape)
        cur = _g_apply(acc, cur[..., None], expand)
        prefixes.append(cur)

    if general:
        pair = _pair_beta_mask(problem, grid, N, eps_beta)  # (Q0, QN)
        mask_total = pair.reshape((sizes[0],) + (1,) * (N - 1) + (sizes[N],))
    else:
        mN = _expand_theta_mask(mN_theta, grid, N)
        mask_total = mN.reshape((1,) * N + (sizes[N],))
    total_cost = np.where(mask_total, cur, np.inf)
    best = float(np.min(total_cost))
    if not np.isfinite(best):
        raise InfeasibleDiscretization("transition_admissibility", "no admissible sequence")

    cand = total_cost == best
    for k in range(1, N + 1):
        P = prefixes[k - 1]
        if general:
            axes = tuple(range(1, k))
            S_opt = P.min(axis=axes, keepdims=True) if axes else P
        else:
            axes = tuple(range(0, k))
            S_opt = P.min(axis=axes, keepdims=True)
        consistent = P == S_opt
        cand = cand & consistent.reshape(P.shape + (1,) * (N - k))

    # tie-break: smallest sigma_0 first in the general case, then sigma_N,
    # sigma_{N-1}, ..., matching the flattened DP argmin and back-link order.
    order = ([0] if general else []) + list(range(N, 0, -1)) + ([] if general else [0])
    path = [None] * (N + 1)
    rem = cand
    for axis in order:
        proj = np.any(rem, axis=tuple(a for a in range(N + 1) if a != axis))
        i = int(np.argmax(proj))
        path[axis] = i
        rem = np.take(rem, [i], axis=axis)
    choices = tuple(
        None if choice_mats[k - 1] is None else int(choice_mats[k - 1][path[k - 1], path[k]])
        for k in range(1, N + 1)
    )
    return BruteForceResult(cost=best, path=tuple(path), choices=choices)


# ---------------------------------------------------------------------------
# tube refinement and orchestration


def refine_tube(previous: PwlModel, grid: StateGrid, shrink: float, counts=None) -> StateGrid:
    """Per-node grids re-centered on the incumbent solution.

    Half-widths shrink by the given factor; odd point counts keep the
    incumbent (theta_k, v_k) exactly on the new grid, which makes the DP cost
    nonincreasing across tube iterations.
    """
    if not 0.0 < shrink <= 1.0:
        raise DomainError("shrink factor must be in (0, 1]")
    N = previous.mesh.N
    values = previous.node_values()
    slopes = previous.node_slopes()
    n = previous.dim
    if counts is None:
        tc = [grid.theta_axes_at(0)[d].size for d in range(n)]
        vc = [grid.v_axes_at(0)[d].size for d in range(n)]
    else:
        tc, vc = counts
        tc = [int(tc)] * n if np.isscalar(tc) else [int(c) for c in tc]
        vc = [int(vc)] * n if np.isscalar(vc) else [int(c) for c in vc]
    node_theta = []
    node_v = []
    for k in range(N + 1):
        th_axes = []
        v_axes = []
        for d in range(n):
            ax = grid.theta_axes_at(k)[d]
            hw = shrink * 0.5 * float(ax[-1] - ax[0])
            c = float(values[k, d])
            th_axes.append(np.linspace(c - hw, c + hw, tc[d]))
            axv = grid.v_axes_at(k)[d]
            hwv = shrink * 0.5 * float(axv[-1] - axv[0])
            cv = float(slopes[k, d])
            v_axes.append(np.linspace(cv - hwv, cv + hwv, vc[d]))
        node_theta.append(tuple(th_axes))
        node_v.append(tuple(v_axes))
    return StateGrid(node_theta=tuple(node_theta), node_v=tuple(node_v))


@dataclass
class DpStats:
    solves: list = field(default_factory=list)
    tube_costs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"solves": self.solves, "tube_costs": self.tube_costs}


def auto_v_box(problem: Problem, samples_per_dim: int = 7, time_samples: int = 9) -> np.ndarray:
    """Slope-grid box from sampled field values over the state box."""
    n = problem.dim
    axes = [np.linspace(problem.state_box[d, 0], problem.state_box[d, 1], samples_per_dim) for d in range(n)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)  # (S, n)
    ts = np.linspace(0.0, 1.0, time_samples)
    F = problem.field_many(pts[:, None, :].repeat(time_samples, axis=1), np.broadcast_to(ts, (pts.shape[0], time_samples)))
    vmin = F.min(axis=(0, 1))
    vmax = F.max(axis=(0, 1))
    span = vmax - vmin
    pad = 0.1 * span + np.where(span > 0, 0.0, 0.5 + 0.1 * np.abs(vmax))
    return np.stack([vmin - pad, vmax + pad], axis=-1)


def _tabulate(problem: Problem, mesh: Mesh, grid: StateGrid, cfg: DpConfig) -> DpTables:
    if problem.boundary.kind == "separable":
        return forward_tabulate_separable(problem, mesh, grid, cfg)
    return forward_tabulate_general(problem, mesh, grid, cfg)


def solve_dp(problem: Problem, mesh: Mesh, cfg: DpConfig, grid: StateGrid | None = None) -> tuple[PwlModel, float, DpStats]:
    """Discretize, tabulate, backtrack, then optionally iterate tube grids."""
    if grid is None:
        v_box = cfg.v_box if cfg.v_box is not None else auto_v_box(problem)
        grid = discretize_states(problem.state_box, v_box, (cfg.theta_counts, cfg.v_counts))
    stats = DpStats()
    model = None
    cost = np.inf
    for it in range(cfg.tube_iterations + 1):
        tic = time.perf_counter()
        tables = _tabulate(problem, mesh, grid, cfg)
        cost, path, choices = extract_path(tables)
        model = _assemble_model(tables, problem, cfg, path, choices)
        thetas = [grid.states_at(k)[0][path[k]].tolist() for k in range(mesh.N + 1)]
        vs = [grid.states_at(k)[1][path[k]].tolist() for k in range(mesh.N + 1)]
        stats.solves.append(
            {
                "tube_iteration": it,
                "cost": cost,
                "path": list(path),
                "path_theta": thetas,
                "path_v": vs,
                "eps_beta": tables.eps_beta,
                "eps_cont": tables.eps_cont,
                "stages": tables.meta["stages"],
                "seconds": time.perf_counter() - tic,
            }
        )
        stats.tube_costs.append(cost)
        if it < cfg.tube_iterations:
            grid = refine_tube(model, grid, cfg.tube_shrink)
    return model, cost, stats


def stiffness_diagnostics(model: PwlModel, problem: Problem, samples: int = 5) -> list[dict]:
    """Eigenvalue summary of the Jacobian field along the model trajectory.

    Per piece: extremal real parts and largest imaginary part of the
    eigenvalues of d_x f(y(t), t), plus the largest absolute eigenvalue of a
    finite-difference estimate of its time derivative (spectrum drift).
    """
    from .refine import jacobian_at

    out = []
    for i, piece in enumerate(model.pieces):
        ts = np.linspace(piece.t0, piece.t1, samples)
        delta = 1e-4 * piece.length
        max_re, min_re, max_im, drift = -np.inf, np.inf, 0.0, 0.0
        for t in ts:
            y = linflow.propagate_piece(piece, float(t))
            J = jacobian_at(problem, y, float(t))
            ev = np.linalg.eigvals(J)
            max_re = max(max_re, float(ev.real.max()))
            min_re = min(min_re, float(ev.real.min()))
            max_im = max(max_im, float(np.abs(ev.imag).max()))
            tp = min(float(t) + delta, piece.t1)
            tm = max(float(t) - delta, piece.t0)
            Jp = jacobian_at(problem, linflow.propagate_piece(piece, tp), tp)
            Jm = jacobian_at(problem, linflow.propagate_piece(piece, tm), tm)
            Adot = (Jp - Jm) / (tp - tm)
            drift = max(drift, float(np.abs(np.linalg.eigvals(Adot)).max()))
        out.append(
            {
                "piece": i,
                "t0": piece.t0,
                "t1": piece.t1,
                "max_real": max_re,
                "min_real": min_re,
                "max_abs_imag": max_im,
                "max_abs_eig_drift": drift,
            }
        )
    return out
