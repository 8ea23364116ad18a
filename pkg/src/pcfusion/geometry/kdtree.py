"""Exact nearest-neighbour index over a point cloud.

Backed by :class:`scipy.spatial.cKDTree`. Results are exact and ties in
distance are broken by the lower point index so answers match a linear scan.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyInput, InvalidParameter
from .types import PointCloud


class KdTree:
    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise EmptyInput("cannot build a KD-tree over an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def knn(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of each query row.

        Args:
            queries: (Q, 3) query points.
            k: neighbour count; clamped to the number of indexed points.

        Returns:
            ``(distances, indices)``, each (Q, k), sorted by (distance, index).
        """
        if k < 1:
            raise InvalidParameter("k must be >= 1")
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        k = min(k, len(self.points))
        # one extra neighbour reveals ties straddling the k-th slot
        k_probe = min(k + 1, len(self.points))
        d, i = self._tree.query(q, k=k_probe)
        d = d.reshape(len(q), k_probe)
        i = i.reshape(len(q), k_probe)
        order = np.lexsort((i, d), axis=1)
        d = np.take_along_axis(d, order, axis=1)
        i = np.take_along_axis(i, order, axis=1)
        if k_probe > k:
            tied = np.flatnonzero(d[:, k] == d[:, k - 1])
            for row in tied:
                d[row, :k], i[row, :k] = self._resolve_ties(q[row], d[row, k - 1], k)
        return d[:, :k], i[:, :k]

    def _resolve_ties(self, query: np.ndarray, radius: float, k: int):
        cand = np.asarray(self._tree.query_ball_point(query, radius * (1 + 1e-12) + 1e-300), dtype=np.int64)
        dist = np.linalg.norm(self.points[cand] - query, axis=1)
        order = np.lexsort((cand, dist))[:k]
        return dist[order], cand[order]

    def nearest(self, queries: np.ndarray, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Single nearest neighbour with an optional distance gate.

        Queries with no neighbour within ``max_distance`` get distance ``inf``
        and index ``-1``.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if np.isinf(max_distance):
            d, i = self.knn(q, 1)
            return d[:, 0], i[:, 0]
        d, i = self._tree.query(q, k=1, distance_upper_bound=max_distance)
        i = np.where(np.isfinite(d), i, -1)
        return d, i

    def radius(self, query: np.ndarray, r: float) -> np.ndarray:
        """Indices within distance ``r`` (closed ball) of one query, sorted by (distance, index)."""
        q = np.asarray(query, dtype=float).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        if len(cand) == 0:
            return cand
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        keep = dist <= r
        cand, dist = cand[keep], dist[keep]
        return cand[np.lexsort((cand, dist))]


def build_kdtree(cloud: PointCloud) -> KdTree:
    if len(cloud) == 0:
        raise EmptyInput("cannot build a KD-tree over an empty cloud")
    return KdTree(cloud.points)
