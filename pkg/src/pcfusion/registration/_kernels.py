"""Fused per-correspondence loops for the ICP normal equations and costs."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _moved(src, R, t, k):
    x = src[k]
    return (R[0, 0] * x[0] + R[0, 1] * x[1] + R[0, 2] * x[2] + t[0],
            R[1, 0] * x[0] + R[1, 1] * x[1] + R[1, 2] * x[2] + t[1],
            R[2, 0] * x[0] + R[2, 1] * x[1] + R[2, 2] * x[2] + t[2])


@njit(cache=True)
def p2plane_cost(src, R, t, tgt, nrm, si, tj):
    c = 0.0
    for k in range(si.shape[0]):
        p0, p1, p2 = _moved(src, R, t, si[k])
        q = tgt[tj[k]]
        n = nrm[tj[k]]
        r = n[0] * (p0 - q[0]) + n[1] * (p1 - q[1]) + n[2] * (p2 - q[2])
        c += r * r
    return c


@njit(cache=True)
def p2plane_system(src, R, t, tgt, nrm, si, tj):
    """``(J^T J, J^T r)`` with ``J = [p x n, n]``."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    J = np.empty(6)
    for k in range(si.shape[0]):
        p0, p1, p2 = _moved(src, R, t, si[k])
        q = tgt[tj[k]]
        n = nrm[tj[k]]
        r = n[0] * (p0 - q[0]) + n[1] * (p1 - q[1]) + n[2] * (p2 - q[2])
        J[0] = p1 * n[2] - p2 * n[1]
        J[1] = p2 * n[0] - p0 * n[2]
        J[2] = p0 * n[1] - p1 * n[0]
        J[3] = n[0]
        J[4] = n[1]
        J[5] = n[2]
        for a in range(6):
            g[a] += J[a] * r
            for b in range(a, 6):
                H[a, b] += J[a] * J[b]
    for a in range(6):
        for b in range(a):
            H[a, b] = H[b, a]
    return H, g


@njit(cache=True)
def gicp_precisions(src_cov, tgt_cov, R, si, tj):
    """``(C_B + R C_A R^T)^-1`` per correspondence (closed-form symmetric 3x3 inverse)."""
    n = si.shape[0]
    out = np.empty((n, 3, 3))
    RC = np.empty((3, 3))
    C = np.empty((3, 3))
    for k in range(n):
        A = src_cov[si[k]]
        B = tgt_cov[tj[k]]
        for i in range(3):
            for j in range(3):
                RC[i, j] = R[i, 0] * A[0, j] + R[i, 1] * A[1, j] + R[i, 2] * A[2, j]
        for i in range(3):
            for j in range(3):
                C[i, j] = B[i, j] + RC[i, 0] * R[j, 0] + RC[i, 1] * R[j, 1] + RC[i, 2] * R[j, 2]
        a, b, c = C[0, 0], C[0, 1], C[0, 2]
        d, e, f = C[1, 1], C[1, 2], C[2, 2]
        c00 = d * f - e * e
        c01 = c * e - b * f
        c02 = b * e - c * d
        det = a * c00 + b * c01 + c * c02
        inv = 1.0 / det
        out[k, 0, 0] = c00 * inv
        out[k, 0, 1] = c01 * inv
        out[k, 0, 2] = c02 * inv
        out[k, 1, 0] = c01 * inv
        out[k, 1, 1] = (a * f - c * c) * inv
        out[k, 1, 2] = (b * c - a * e) * inv
        out[k, 2, 0] = c02 * inv
        out[k, 2, 1] = (b * c - a * e) * inv
        out[k, 2, 2] = (a * d - b * b) * inv
    return out


@njit(cache=True)
def gicp_cost(src, R, t, tgt, M, si, tj):
    c = 0.0
    for k in range(si.shape[0]):
        p0, p1, p2 = _moved(src, R, t, si[k])
        q = tgt[tj[k]]
        d0, d1, d2 = q[0] - p0, q[1] - p1, q[2] - p2
        m = M[k]
        c += (d0 * (m[0, 0] * d0 + m[0, 1] * d1 + m[0, 2] * d2)
              + d1 * (m[1, 0] * d0 + m[1, 1] * d1 + m[1, 2] * d2)
              + d2 * (m[2, 0] * d0 + m[2, 1] * d1 + m[2, 2] * d2))
    return c


@njit(cache=True)
def gicp_system(src, R, t, tgt, M, si, tj):
    """``(sum J^T M J, sum J^T M d)`` with ``d = q - T p`` and ``J = [[p]x, -I]``."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    J = np.zeros((3, 6))
    MJ = np.empty((3, 6))
    for k in range(si.shape[0]):
        p0, p1, p2 = _moved(src, R, t, si[k])
        q = tgt[tj[k]]
        d = (q[0] - p0, q[1] - p1, q[2] - p2)
        J[0, 1] = -p2
        J[0, 2] = p1
        J[1, 0] = p2
        J[1, 2] = -p0
        J[2, 0] = -p1
        J[2, 1] = p0
        J[0, 3] = -1.0
        J[1, 4] = -1.0
        J[2, 5] = -1.0
        m = M[k]
        for i in range(3):
            for c in range(6):
                MJ[i, c] = m[i, 0] * J[0, c] + m[i, 1] * J[1, c] + m[i, 2] * J[2, c]
        for a in range(6):
            g[a] += MJ[0, a] * d[0] + MJ[1, a] * d[1] + MJ[2, a] * d[2]
            for b in range(a, 6):
                H[a, b] += J[0, a] * MJ[0, b] + J[1, a] * MJ[1, b] + J[2, a] * MJ[2, b]
    for a in range(6):
        for b in range(a):
            H[a, b] = H[b, a]
    return H, g
