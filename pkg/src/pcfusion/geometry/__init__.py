from .kdtree import KdTree, build_kdtree
from .ops import (
    apply_transform,
    crop,
    estimate_normals,
    statistical_outlier_filter,
    voxel_downsample,
)
from .types import Aabb, PointCloud, RigidTransform, TriangleMesh, compose

__all__ = [
    "Aabb",
    "KdTree",
    "PointCloud",
    "RigidTransform",
    "TriangleMesh",
    "apply_transform",
    "build_kdtree",
    "compose",
    "crop",
    "estimate_normals",
    "statistical_outlier_filter",
    "voxel_downsample",
]
