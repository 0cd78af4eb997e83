"""Pure-numpy implementations of the hot numeric kernels.

Semantics are shared with the numba twin in ``_kernels_numba``; the active
implementation is selected by ``pwlbvp.kernels`` (env var ``PWLBVP_BACKEND``).
All reductions use first-occurrence argmin so tie-breaking is identical on
both backends.
"""

import numpy as np

NAME = "numpy"


def rk4_affine(A, B, y0, h):
    """Integrate Y' = A(t) Y + B(t) through a fixed step sequence.

    A: (2S+1, n, n) samples at step endpoints and midpoints
       (step j uses indices 2j, 2j+1, 2j+2).
    B: (2S+1, n, m) source samples, same layout.
    y0: (n, m) initial state.
    h: (S,) step sizes.
    Returns (S+1, n, m) states at the step boundaries.
    """
    S = h.shape[0]
    n, m = y0.shape
    out = np.empty((S + 1, n, m))
    y = y0.astype(np.float64, copy=True)
    out[0] = y
    for j in range(S):
        a0 = A[2 * j]
        am = A[2 * j + 1]
        a1 = A[2 * j + 2]
        b0 = B[2 * j]
        bm = B[2 * j + 1]
        b1 = B[2 * j + 2]
        hj = h[j]
        k1 = a0 @ y + b0
        k2 = am @ (y + 0.5 * hj * k1) + bm
        k3 = am @ (y + 0.5 * hj * k2) + bm
        k4 = a1 @ (y + hj * k3) + b1
        y = y + (hj / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[j + 1] = y
    return out


def hermite_pair(theta_p, v_p, theta_q, v_q, s, h):
    """Cubic Hermite values/derivatives for all (prev, next) state pairs.

    theta_p, v_p: (P, n); theta_q, v_q: (Q, n); s: (M,) local coordinates in
    [0, 1]; h: interval length. Returns (y, yp), each (P, Q, M, n); ``yp`` is
    the time derivative.
    """
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    d00 = (6.0 * s2 - 6.0 * s) / h
    d10 = 3.0 * s2 - 4.0 * s + 1.0
    d01 = (-6.0 * s2 + 6.0 * s) / h
    d11 = 3.0 * s2 - 2.0 * s

    # prev-state contribution (P, M, n); next-state contribution (Q, M, n)
    val_prev = theta_p[:, None, :] * h00[None, :, None] + (h * v_p)[:, None, :] * h10[None, :, None]
    val_next = theta_q[:, None, :] * h01[None, :, None] + (h * v_q)[:, None, :] * h11[None, :, None]
    der_prev = theta_p[:, None, :] * d00[None, :, None] + v_p[:, None, :] * d10[None, :, None]
    der_next = theta_q[:, None, :] * d01[None, :, None] + v_q[:, None, :] * d11[None, :, None]
    y = val_prev[:, None, :, :] + val_next[None, :, :, :]
    yp = der_prev[:, None, :, :] + der_next[None, :, :, :]
    return y, yp


def pair_cost_sq(resid, w):
    """Weighted squared-norm cost: sum_m w[m] * |resid[..., m, :]|^2.

    resid: (P, Q, M, n); w: (M,). Returns (P, Q).
    """
    sq = np.einsum("pqmn,pqmn->pqm", resid, resid)
    return sq @ w


def pair_cost_max(resid):
    """Max Euclidean norm over sample nodes. resid: (P, Q, M, n) -> (P, Q)."""
    sq = np.einsum("pqmn,pqmn->pqm", resid, resid)
    return np.sqrt(sq.max(axis=2))


def relax_additive(S_prev, E):
    """One additive Bellman stage: S[q] = min_p S_prev[p] + E[p, q].

    Returns (S, argmin) with first-occurrence (smallest p) tie-break.
    """
    M = S_prev[:, None] + E
    arg = np.argmin(M, axis=0)
    return M[arg, np.arange(E.shape[1])], arg.astype(np.int64)


def relax_max(S_prev, E):
    """One max-accumulator Bellman stage: S[q] = min_p max(S_prev[p], E[p, q])."""
    M = np.maximum(S_prev[:, None], E)
    arg = np.argmin(M, axis=0)
    return M[arg, np.arange(E.shape[1])], arg.astype(np.int64)
