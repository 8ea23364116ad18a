"""Axis-aligned bounding volume hierarchy over mesh triangles.

Two queries are supported: nearest ray hit (Moller-Trumbore, determinant
epsilon 1e-12) and closest point on the surface. Both return the same answer
as a brute-force loop over every triangle; ties go to the lower triangle index.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .types import TriangleMesh

DET_EPS = 1e-12
LEAF_SIZE = 4


@njit(cache=True)
def _build(corners, leaf_size):
    m = corners.shape[0]
    cent = np.empty((m, 3))
    tmin = np.empty((m, 3))
    tmax = np.empty((m, 3))
    for i in range(m):
        for a in range(3):
            lo = min(corners[i, 0, a], corners[i, 1, a], corners[i, 2, a])
            hi = max(corners[i, 0, a], corners[i, 1, a], corners[i, 2, a])
            tmin[i, a] = lo
            tmax[i, a] = hi
            cent[i, a] = (corners[i, 0, a] + corners[i, 1, a] + corners[i, 2, a]) / 3.0
    order = np.arange(m)
    cap = 2 * m + 1
    bmin = np.empty((cap, 3))
    bmax = np.empty((cap, 3))
    left = -np.ones(cap, np.int64)
    right = -np.ones(cap, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    n_nodes = 1
    start[0] = 0
    count[0] = m
    stack = np.empty(cap, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        c = count[node]
        for a in range(3):
            lo = np.inf
            hi = -np.inf
            for k in range(s, s + c):
                t = order[k]
                lo = min(lo, tmin[t, a])
                hi = max(hi, tmax[t, a])
            bmin[node, a] = lo
            bmax[node, a] = hi
        if c <= leaf_size:
            continue
        # split on the widest centroid extent at the median
        best_axis = 0
        best_ext = -1.0
        for a in range(3):
            lo = np.inf
            hi = -np.inf
            for k in range(s, s + c):
                v = cent[order[k], a]
                lo = min(lo, v)
                hi = max(hi, v)
            if hi - lo > best_ext:
                best_ext = hi - lo
                best_axis = a
        seg = order[s : s + c].copy()
        keys = np.empty(c)
        for k in range(c):
            keys[k] = cent[seg[k], best_axis]
        perm = np.argsort(keys, kind="mergesort")
        for k in range(c):
            order[s + k] = seg[perm[k]]
        half = c // 2
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        start[l_node] = s
        count[l_node] = half
        start[r_node] = s + half
        count[r_node] = c - half
        left[node] = l_node
        right[node] = r_node
        stack[sp] = l_node
        sp += 1
        stack[sp] = r_node
        sp += 1
    return order, bmin[:n_nodes], bmax[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes]


@njit(cache=True, inline="always")
def _moller_trumbore(o0, o1, o2, d0, d1, d2, tri):
    v0 = tri[0]
    e10 = tri[1, 0] - v0[0]
    e11 = tri[1, 1] - v0[1]
    e12 = tri[1, 2] - v0[2]
    e20 = tri[2, 0] - v0[0]
    e21 = tri[2, 1] - v0[1]
    e22 = tri[2, 2] - v0[2]
    p0 = d1 * e22 - d2 * e21
    p1 = d2 * e20 - d0 * e22
    p2 = d0 * e21 - d1 * e20
    det = e10 * p0 + e11 * p1 + e12 * p2
    if abs(det) < DET_EPS:
        return np.inf
    inv = 1.0 / det
    s0 = o0 - v0[0]
    s1 = o1 - v0[1]
    s2 = o2 - v0[2]
    u = (s0 * p0 + s1 * p1 + s2 * p2) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    q0 = s1 * e12 - s2 * e11
    q1 = s2 * e10 - s0 * e12
    q2 = s0 * e11 - s1 * e10
    v = (d0 * q0 + d1 * q1 + d2 * q2) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e20 * q0 + e21 * q1 + e22 * q2) * inv


@njit(cache=True, error_model="numpy")
def _raycast(corners, order, bmin, bmax, left, right, start, count, origins, dirs, t_min):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_i = -np.ones(n, np.int64)
    stack = np.empty(128, np.int64)
    for r in range(n):
        o0, o1, o2 = origins[r, 0], origins[r, 1], origins[r, 2]
        d0, d1, d2 = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        i0, i1, i2 = 1.0 / d0, 1.0 / d1, 1.0 / d2
        best = np.inf
        best_i = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            # slab test
            ta = (bmin[node, 0] - o0) * i0
            tb = (bmax[node, 0] - o0) * i0
            lo = min(ta, tb)
            hi = max(ta, tb)
            ta = (bmin[node, 1] - o1) * i1
            tb = (bmax[node, 1] - o1) * i1
            lo = max(lo, min(ta, tb))
            hi = min(hi, max(ta, tb))
            ta = (bmin[node, 2] - o2) * i2
            tb = (bmax[node, 2] - o2) * i2
            lo = max(lo, min(ta, tb))
            hi = min(hi, max(ta, tb))
            if np.isnan(lo) or np.isnan(hi):
                lo = -np.inf
                hi = np.inf
            if hi < lo or hi < t_min or lo > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = order[k]
                    t = _moller_trumbore(o0, o1, o2, d0, d1, d2, corners[tri])
                    if t >= t_min and (t < best or (t == best and tri < best_i)):
                        best = t
                        best_i = tri
            else:
                stack[sp] = left[node]
                sp += 1
                stack[sp] = right[node]
                sp += 1
        out_t[r] = best
        out_i[r] = best_i
    return out_t, out_i


@njit(cache=True)
def _raycast_brute(corners, origins, dirs, t_min):
    n = origins.shape[0]
    out_t = np.full(n, np.inf)
    out_i = -np.ones(n, np.int64)
    for r in range(n):
        best = np.inf
        best_i = -1
        for tri in range(corners.shape[0]):
            t = _moller_trumbore(origins[r, 0], origins[r, 1], origins[r, 2],
                                 dirs[r, 0], dirs[r, 1], dirs[r, 2], corners[tri])
            if t >= t_min and t < best:
                best = t
                best_i = tri
        out_t[r] = best
        out_i[r] = best_i
    return out_t, out_i


@njit(cache=True, inline="always")
def closest_point_on_triangle(p, a, b, c):
    """Closest point of triangle abc to p (region tests after Ericson)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab[0] * ap[0] + ab[1] * ap[1] + ab[2] * ap[2]
    d2 = ac[0] * ap[0] + ac[1] * ap[1] + ac[2] * ap[2]
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()
    bp = p - b
    d3 = ab[0] * bp[0] + ab[1] * bp[1] + ab[2] * bp[2]
    d4 = ac[0] * bp[0] + ac[1] * bp[1] + ac[2] * bp[2]
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab[0] * cp[0] + ab[1] * cp[1] + ab[2] * cp[2]
    d6 = ac[0] * cp[0] + ac[1] * cp[1] + ac[2] * cp[2]
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for a in range(3):
        if p[a] < lo[a]:
            s += (lo[a] - p[a]) ** 2
        elif p[a] > hi[a]:
            s += (p[a] - hi[a]) ** 2
    return s


@njit(cache=True)
def _closest(corners, order, bmin, bmax, left, right, start, count, queries):
    n = queries.shape[0]
    out_d2 = np.full(n, np.inf)
    out_i = -np.ones(n, np.int64)
    out_c = np.zeros((n, 3))
    stack = np.empty(256, np.int64)
    for q in range(n):
        p = queries[q]
        best = np.inf
        best_i = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, bmin[node], bmax[node]) > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = order[k]
                    cp = closest_point_on_triangle(p, corners[tri, 0], corners[tri, 1], corners[tri, 2])
                    d2 = (p[0] - cp[0]) ** 2 + (p[1] - cp[1]) ** 2 + (p[2] - cp[2]) ** 2
                    if d2 < best or (d2 == best and tri < best_i):
                        best = d2
                        best_i = tri
                        out_c[q] = cp
            else:
                # visit the nearer child first
                l_node = left[node]
                r_node = right[node]
                dl = _box_dist2(p, bmin[l_node], bmax[l_node])
                dr = _box_dist2(p, bmin[r_node], bmax[r_node])
                if dl <= dr:
                    stack[sp] = r_node
                    sp += 1
                    stack[sp] = l_node
                    sp += 1
                else:
                    stack[sp] = l_node
                    sp += 1
                    stack[sp] = r_node
                    sp += 1
        out_d2[q] = best
        out_i[q] = best_i
    return np.sqrt(out_d2), out_i, out_c


class Bvh:
    """Immutable BVH over the triangles of a mesh."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE):
        self.mesh = mesh
        self._corners = np.ascontiguousarray(mesh.corners, dtype=np.float64)
        (self._order, self._bmin, self._bmax, self._left, self._right,
         self._start, self._count) = _build(self._corners, leaf_size)

    @property
    def node_count(self) -> int:
        return len(self._left)

    def _nodes(self):
        return (self._order, self._bmin, self._bmax, self._left, self._right, self._start, self._count)

    def raycast(self, origins: np.ndarray, directions: np.ndarray, t_min: float = 0.0):
        """Nearest hit per ray.

        Directions need not be unit length; ``t`` is in units of the direction
        vector. Misses report ``t = inf`` and triangle ``-1``.
        """
        o, d = _broadcast_rays(origins, directions)
        return _raycast(self._corners, *self._nodes(), o, d, float(t_min))

    def closest_points(self, queries: np.ndarray):
        """``(distance, triangle_index, closest_point)`` for each query point."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        return _closest(self._corners, *self._nodes(), q)


def _broadcast_rays(origins, directions):
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    o = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape))
    return o, d


def raycast_brute_force(mesh: TriangleMesh, origins, directions, t_min: float = 0.0):
    """Reference ray cast that tests every triangle."""
    o, d = _broadcast_rays(origins, directions)
    return _raycast_brute(np.ascontiguousarray(mesh.corners), o, d, float(t_min))
