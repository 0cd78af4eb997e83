"""Numba-jitted twins of the kernels in ``_kernels_numpy``.

No fastmath: the Bellman relaxations must use plain IEEE + and max with
first-occurrence argmin so DP tables match the brute-force oracle's fold
exactly within a backend.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def rk4_affine(A, B, y0, h):
    S = h.shape[0]
    n, m = y0.shape
    out = np.empty((S + 1, n, m))
    y = y0.copy().astype(np.float64)
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


@njit(cache=True)
def hermite_pair(theta_p, v_p, theta_q, v_q, s, h):
    P, n = theta_p.shape
    Q = theta_q.shape[0]
    M = s.shape[0]
    y = np.empty((P, Q, M, n))
    yp = np.empty((P, Q, M, n))
    for m in range(M):
        sm = s[m]
        s2 = sm * sm
        s3 = s2 * sm
        h00 = 2.0 * s3 - 3.0 * s2 + 1.0
        h10 = (s3 - 2.0 * s2 + sm) * h
        h01 = -2.0 * s3 + 3.0 * s2
        h11 = (s3 - s2) * h
        d00 = (6.0 * s2 - 6.0 * sm) / h
        d10 = 3.0 * s2 - 4.0 * sm + 1.0
        d01 = (-6.0 * s2 + 6.0 * sm) / h
        d11 = 3.0 * s2 - 2.0 * sm
        for p in range(P):
            for q in range(Q):
                for d in range(n):
                    y[p, q, m, d] = (
                        theta_p[p, d] * h00
                        + v_p[p, d] * h10
                        + theta_q[q, d] * h01
                        + v_q[q, d] * h11
                    )
                    yp[p, q, m, d] = (
                        theta_p[p, d] * d00
                        + v_p[p, d] * d10
                        + theta_q[q, d] * d01
                        + v_q[q, d] * d11
                    )
    return y, yp


@njit(cache=True)
def pair_cost_sq(resid, w):
    P, Q, M, n = resid.shape
    out = np.zeros((P, Q))
    for p in range(P):
        for q in range(Q):
            acc = 0.0
            for m in range(M):
                sq = 0.0
                for d in range(n):
                    r = resid[p, q, m, d]
                    sq += r * r
                acc += sq * w[m]
            out[p, q] = acc
    return out


@njit(cache=True)
def pair_cost_max(resid):
    P, Q, M, n = resid.shape
    out = np.zeros((P, Q))
    for p in range(P):
        for q in range(Q):
            best = 0.0
            for m in range(M):
                sq = 0.0
                for d in range(n):
                    r = resid[p, q, m, d]
                    sq += r * r
                if sq > best:
                    best = sq
            out[p, q] = np.sqrt(best)
    return out


@njit(cache=True)
def relax_additive(S_prev, E):
    P, Q = E.shape
    S = np.empty(Q)
    arg = np.empty(Q, dtype=np.int64)
    for q in range(Q):
        best = S_prev[0] + E[0, q]
        bi = 0
        for p in range(1, P):
            c = S_prev[p] + E[p, q]
            if c < best:
                best = c
                bi = p
        S[q] = best
        arg[q] = bi
    return S, arg


@njit(cache=True)
def relax_max(S_prev, E):
    P, Q = E.shape
    S = np.empty(Q)
    arg = np.empty(Q, dtype=np.int64)
    for q in range(Q):
        a = S_prev[0]
        b = E[0, q]
        best = a if a > b else b
        bi = 0
        for p in range(1, P):
            a = S_prev[p]
            b = E[p, q]
            c = a if a > b else b
            if c < best:
                best = c
                bi = p
        S[q] = best
        arg[q] = bi
    return S, arg
