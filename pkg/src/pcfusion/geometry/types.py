"""Core immutable geometry containers.

All coordinates are float64 meters. Arrays handed to the constructors are
copied and frozen (``writeable=False``) so instances can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from ..errors import InvalidParameter
from . import se3

NORMAL_TOL = 1e-9
ROTATION_TOL = 1e-9


def _frozen(a, shape_tail: tuple[int, ...], name: str, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.shape[1:] != shape_tail:
        raise InvalidParameter(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


class PointCloud:
    """Ordered 3D points with optional unit normals and per-point covariances."""

    __slots__ = ("points", "normals", "covariances")

    def __init__(self, points, normals=None, covariances=None, *, validate: bool = True):
        self.points = _frozen(points, (3,), "points")
        n = len(self.points)
        self.normals = None if normals is None else _frozen(normals, (3,), "normals")
        self.covariances = None if covariances is None else _frozen(covariances, (3, 3), "covariances")
        if validate:
            if not np.all(np.isfinite(self.points)):
                raise InvalidParameter("point coordinates must be finite")
            if self.normals is not None:
                if len(self.normals) != n:
                    raise InvalidParameter("normal count must equal point count")
                if n and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0)) > NORMAL_TOL:
                    raise InvalidParameter("normals must be unit length")
            if self.covariances is not None:
                if len(self.covariances) != n:
                    raise InvalidParameter("covariance count must equal point count")
                if n:
                    C = self.covariances
                    if np.max(np.abs(C - np.transpose(C, (0, 2, 1)))) > 1e-9 * max(1.0, np.abs(C).max()):
                        raise InvalidParameter("covariances must be symmetric")
                    if np.min(np.linalg.eigvalsh(C)) < -1e-9 * max(1.0, np.abs(C).max()):
                        raise InvalidParameter("covariances must be positive semi-definite")

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        extras = [name for name in ("normals", "covariances") if getattr(self, name) is not None]
        return f"PointCloud(n={len(self)}{', ' + ', '.join(extras) if extras else ''})"

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask_or_index) -> "PointCloud":
        """Subset by boolean mask or integer index array, keeping attribute alignment."""
        idx = np.asarray(mask_or_index)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.covariances is None else self.covariances[idx],
            validate=False,
        )

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.covariances)

    def with_covariances(self, covariances) -> "PointCloud":
        return PointCloud(self.points, self.normals, covariances)

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        normals = None
        if clouds and all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return PointCloud(pts, normals, validate=False)


class TriangleMesh:
    """Indexed triangle set. Triangle normals follow counter-clockwise winding."""

    __slots__ = ("vertices", "triangles", "__dict__")

    def __init__(self, vertices, triangles, *, validate: bool = True):
        self.vertices = _frozen(vertices, (3,), "vertices")
        self.triangles = _frozen(triangles, (3,), "triangles", dtype=np.int64)
        if validate:
            if not np.all(np.isfinite(self.vertices)):
                raise InvalidParameter("vertex coordinates must be finite")
            if len(self.triangles):
                if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                    raise InvalidParameter("triangle index out of range")
                if np.any(self.areas <= 0.0):
                    bad = int(np.flatnonzero(self.areas <= 0.0)[0])
                    raise InvalidParameter(f"degenerate triangle {bad} (zero area)")

    def __len__(self) -> int:
        return len(self.triangles)

    def __repr__(self) -> str:
        return f"TriangleMesh(vertices={len(self.vertices)}, triangles={len(self.triangles)})"

    @cached_property
    def corners(self) -> np.ndarray:
        """(M, 3, 3) array of triangle corner coordinates."""
        c = self.vertices[self.triangles]
        c.setflags(write=False)
        return c

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def triangle_normals(self) -> np.ndarray:
        n = self._cross / np.linalg.norm(self._cross, axis=1, keepdims=True)
        n.setflags(write=False)
        return n

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @property
    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        return (self.centroids * self.areas[:, None]).sum(axis=0) / self.areas.sum()

    def transformed(self, T: "RigidTransform") -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles, validate=False)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose stored as a homogeneous 4x4 matrix."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        M = np.array(self.matrix, dtype=np.float64, copy=True)
        if M.shape != (4, 4):
            raise InvalidParameter(f"transform must be 4x4, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise InvalidParameter("transform entries must be finite")
        R = M[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise InvalidParameter("rotation block is not orthonormal with det 1")
        if np.max(np.abs(M[3] - [0.0, 0.0, 0.0, 1.0])) > 0.0:
            raise InvalidParameter("bottom row must be (0, 0, 0, 1)")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, R, t) -> "RigidTransform":
        M = np.eye(4)
        M[:3, :3] = R
        M[:3, 3] = t
        return cls(M)

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls.from_rt(np.eye(3), t)

    @classmethod
    def from_twist(cls, xi) -> "RigidTransform":
        M = se3.exp(xi)
        M[:3, :3] = se3.project_to_so3(M[:3, :3])
        return cls(M)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls.from_rt(se3.project_to_so3(se3.so3_exp(np.asarray(rotvec, float))), t)

    @property
    def R(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b).apply(p) == a.apply(b.apply(p))``."""
        M = self.matrix @ other.matrix
        M[3] = (0.0, 0.0, 0.0, 1.0)
        return RigidTransform(M)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(se3.inverse(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def log(self) -> np.ndarray:
        return se3.log(self.matrix)

    @property
    def rotation_angle(self) -> float:
        return se3.rotation_angle(self.R)

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()

    def __eq__(self, other) -> bool:
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def compose(*transforms: RigidTransform) -> RigidTransform:
    """``compose(a, b, c)`` applies ``c`` first, then ``b``, then ``a``."""
    out = RigidTransform.identity()
    for T in transforms:
        out = out @ T
    return out


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.array(self.min, dtype=float).reshape(3)
        hi = np.array(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise InvalidParameter("Aabb requires min <= max componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, points: np.ndarray) -> "Aabb":
        return cls(points.min(axis=0), points.max(axis=0))

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.min) & (points <= self.max), axis=1)
