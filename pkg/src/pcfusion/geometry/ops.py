"""Spatial primitives over point clouds: downsampling, normals, filtering, cropping."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from ..errors import InsufficientPoints, InvalidParameter
from .kdtree import KdTree
from .types import Aabb, PointCloud, RigidTransform

logger = logging.getLogger(__name__)

DEFAULT_NORMAL_K = 30


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    The grid is anchored at the origin (voxel index ``floor(p / voxel_size)``).
    Output order follows the lexicographic order of voxel indices. Normals, if
    present, are averaged and renormalised (a voxel whose normals cancel keeps
the normal of its first point); covariances are dropped.
    """
    if not voxel_size > 0:
        raise InvalidParameter(f"voxel_size must be > 0, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    points = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((m, 3))
        np.add.at(nsum, inverse, cloud.normals)
        norm = np.linalg.norm(nsum, axis=1)
        bad = norm <= 1e-12
        if np.any(bad):
            # opposed normals cancelled: fall back to the voxel's first member
            first = np.full(m, len(cloud))
            np.minimum.at(first, inverse, np.arange(len(cloud)))
            nsum[bad] = cloud.normals[first[bad]]
            norm[bad] = 1.0
        normals = nsum / norm[:, None]
    return PointCloud(points, normals, validate=False)


def neighborhood_covariances(points: np.ndarray, neighbor_idx: np.ndarray) -> np.ndarray:
    """(N, 3, 3) covariance of each point's neighbourhood (population normalisation)."""
    nb = points[neighbor_idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / neighbor_idx.shape[1]


def smallest_eigenvectors(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and the eigenvector of the smallest eigenvalue, batched."""
    w, v = np.linalg.eigh(cov)
    return w, v[:, :, 0]


def estimate_normals(
    cloud: PointCloud,
    k: int = DEFAULT_NORMAL_K,
    viewpoint: Optional[np.ndarray] = None,
) -> PointCloud:
    """PCA normals from the k nearest neighbours (the point itself included).

    Without a viewpoint the sign is whatever the eigen-solver returns and
    should be treated as arbitrary. With one, every normal is flipped so that
    ``n . (viewpoint - p) >= 0``.
    """
    if len(cloud) < 3:
        raise InsufficientPoints("normal estimation needs at least 3 points")
    if k < 3:
        raise InvalidParameter("k must be >= 3")
    if len(cloud) < k:
        raise InsufficientPoints(f"cloud has {len(cloud)} points, fewer than k={k}")
    _, idx = KdTree(cloud.points).knn(cloud.points, k)
    _, normals = smallest_eigenvectors(neighborhood_covariances(cloud.points, idx))
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    if viewpoint is not None:
        to_view = np.asarray(viewpoint, dtype=float) - cloud.points
        flip = np.einsum("ij,ij->i", normals, to_view) < 0
        normals[flip] *= -1.0
    return PointCloud(cloud.points, normals, cloud.covariances, validate=False)


def statistical_outlier_filter(cloud: PointCloud, k: int, std_ratio: float) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds ``mean + std_ratio * std`` of all such means.

    ``std_ratio = inf`` disables the filter. Retained points keep their order.
    """
    if k < 1:
        raise InvalidParameter("k must be >= 1")
    if k >= len(cloud):
        raise InsufficientPoints(f"k={k} must be smaller than the point count {len(cloud)}")
    if np.isinf(std_ratio):
        return cloud
    d, _ = KdTree(cloud.points).knn(cloud.points, k + 1)
    mean_d = d[:, 1:].mean(axis=1)
    mu = mean_d.mean()
    sigma = mean_d.std()
    # absorbs float noise when all means agree mathematically
    slack = 1e-12 * max(mu, 1e-300)
    keep = mean_d <= mu + std_ratio * sigma + slack
    logger.debug("outlier filter removed %d of %d points", int((~keep).sum()), len(cloud))
    return cloud.select(np.flatnonzero(keep))


def crop(cloud: PointCloud, box: Aabb) -> PointCloud:
    return cloud.select(np.flatnonzero(box.contains(cloud.points)))


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Rigidly move points; normals rotate, covariances conjugate ``R C R^T``."""
    R, t = T.R, T.t
    if np.array_equal(T.matrix, np.eye(4)):
        return cloud
    points = cloud.points @ R.T + t
    normals = None if cloud.normals is None else cloud.normals @ R.T
    cov = None
    if cloud.covariances is not None:
        cov = np.einsum("ij,njk,lk->nil", R, cloud.covariances, R)
    return PointCloud(points, normals, cov, validate=False)
