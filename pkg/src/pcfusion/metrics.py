"""Distance measures between a test cloud and a reference (cloud or mesh).

Point-to-point: Chamfer, Hausdorff, Earth Mover's. Point-to-plane against
local fits of the reference neighbourhood: least-squares plane, quadric
surface, 2.5D Delaunay patch. Signed cloud-to-mesh. Every measure returns a
:class:`DistanceReport`; per-point results that cannot be computed are NaN,
excluded from the statistics and counted in ``flagged``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment
from scipy.spatial import Delaunay, QhullError
from scipy.spatial.distance import cdist

from .errors import (
    CollinearNeighborhood,
    EmptyInput,
    InsufficientData,
    InsufficientPoints,
    InvalidParameter,
    SizeMismatch,
    TooLarge,
)
from .geometry.bvh import Bvh, closest_point_on_triangle
from .geometry.kdtree import KdTree
from .geometry.types import PointCloud, TriangleMesh

EMD_MAX_POINTS = 2048
DEFAULT_K_PLANE = 20
DEFAULT_K_TRIANGULATION = 12
HISTOGRAM_BINS = 50
QUADRIC_COND_CAP = 1e8
_RANK_TOL = 1e-12


class MetricKind(str, enum.Enum):
    CHAMFER = "chamfer"
    HAUSDORFF = "hausdorff"
    EARTH_MOVERS = "emd"
    PLANE_LSQ = "plane-lsq"
    PLANE_QUADRATIC = "plane-quadratic"
    PLANE_TRIANGULATION = "plane-triangulation"
    CLOUD_TO_MESH = "cloud-to-mesh"

    @classmethod
    def parse(cls, name: str) -> "MetricKind":
        key = name.lower().replace("_", "-")
        aliases = {
            "earth-movers": cls.EARTH_MOVERS, "earthmovers": cls.EARTH_MOVERS,
            "lsq": cls.PLANE_LSQ, "least-squares": cls.PLANE_LSQ,
            "quadratic": cls.PLANE_QUADRATIC, "quadric": cls.PLANE_QUADRATIC,
            "triangulation": cls.PLANE_TRIANGULATION,
            "c2m": cls.CLOUD_TO_MESH, "cloudtomesh": cls.CLOUD_TO_MESH,
        }
        try:
            return cls(key)
        except ValueError:
            if key in aliases:
                return aliases[key]
        raise InvalidParameter(f"unknown metric '{name}'")

    @property
    def needs_mesh(self) -> bool:
        return self is MetricKind.CLOUD_TO_MESH


@dataclass
class DistanceReport:
    """Per-point distances plus summaries.

    ``per_point`` is None for the Earth Mover's distance; its statistics are
    taken over the matched pair distances instead. Histogram counts cover the
    valid (unflagged) values.
    """

    metric: MetricKind
    scalar: float
    per_point: Optional[np.ndarray]
    mean: float
    std: float
    histogram: tuple[np.ndarray, np.ndarray]
    flagged: int = 0
    samples: np.ndarray = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        edges, counts = self.histogram
        return {
            "metric": self.metric.value,
            "scalar": self.scalar,
            "mean": self.mean,
            "std": self.std,
            "n_points": None if self.per_point is None else int(len(self.per_point)),
            "flagged": int(self.flagged),
            "histogram": {"bin_edges": edges.tolist(), "counts": counts.tolist()},
            "params": self.params,
        }


def _report(metric, scalar, per_point, samples, params) -> DistanceReport:
    valid = samples[np.isfinite(samples)]
    flagged = int(len(samples) - len(valid))
    if len(valid):
        lo, hi = float(valid.min()), float(valid.max())
        # pad ranges too narrow for finite bins (e.g. all distances equal up to rounding)
        hi = max(hi, lo + 1e-9 * max(1.0, abs(lo)))
        counts, edges = np.histogram(valid, bins=HISTOGRAM_BINS, range=(lo, hi))
        mean = float(np.mean(valid))
        std = float(np.std(valid, ddof=1)) if len(valid) > 1 else 0.0
    else:
        counts, edges = np.zeros(HISTOGRAM_BINS, dtype=np.int64), np.zeros(HISTOGRAM_BINS + 1)
        mean = std = float("nan")
    return DistanceReport(metric, float(scalar), per_point, mean, std, (edges, counts), flagged, samples, params)


def _nonempty(*clouds: PointCloud) -> None:
    for c in clouds:
        if len(c) == 0:
            raise EmptyInput("distance metrics need non-empty clouds")


def _nn_distances(a: PointCloud, b: PointCloud) -> np.ndarray:
    d, _ = KdTree(b.points).nearest(a.points)
    return d


# --------------------------------------------------------------------------- point-to-point

def chamfer(a: PointCloud, b: PointCloud, squared: bool = False) -> DistanceReport:
    """Symmetric Chamfer distance ``(mean_a d(a, b) + mean_b d(b, a)) / 2``.

    ``per_point`` holds the directed distances from ``a``.
    """
    _nonempty(a, b)
    dab = _nn_distances(a, b)
    dba = _nn_distances(b, a)
    if squared:
        dab, dba = dab ** 2, dba ** 2
    scalar = 0.5 * (np.mean(dab) + np.mean(dba))
    return _report(MetricKind.CHAMFER, scalar, dab, dab, {"squared": bool(squared)})


def hausdorff(a: PointCloud, b: PointCloud) -> DistanceReport:
    """Symmetric Hausdorff distance, the larger of the two directed maxima."""
    _nonempty(a, b)
    dab = _nn_distances(a, b)
    dba = _nn_distances(b, a)
    scalar = max(float(dab.max()), float(dba.max()))
    return _report(MetricKind.HAUSDORFF, scalar, dab, dab, {"directed_ab": float(dab.max()),
                                                              "directed_ba": float(dba.max())})


def earth_movers(a: PointCloud, b: PointCloud, max_points: int = EMD_MAX_POINTS) -> DistanceReport:
    """Exact optimal-bijection mean distance (linear assignment on Euclidean costs)."""
    _nonempty(a, b)
    if len(a) != len(b):
        raise SizeMismatch(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) > max_points:
        raise TooLarge(f"EMD limited to {max_points} points, got {len(a)}")
    cost = cdist(a.points, b.points)
    rows, cols = linear_sum_assignment(cost)
    matched = cost[rows, cols]
    return _report(MetricKind.EARTH_MOVERS, matched.mean(), None, matched, {"max_points": max_points})


# --------------------------------------------------------------------------- local plane fits

def _neighbors(query: PointCloud, reference: PointCloud, k: int, minimum: int) -> np.ndarray:
    _nonempty(query, reference)
    if k < minimum:
        raise InvalidParameter(f"k must be >= {minimum}, got {k}")
    if len(reference) < k:
        raise InsufficientPoints(f"reference has {len(reference)} points, k = {k}")
    _, idx = KdTree(reference.points).knn(query.points, k)
    return idx


def local_frames(neighborhoods: np.ndarray):
    """Centroids, eigenvalues (ascending) and eigenvectors of each (k, 3) neighbourhood."""
    c = neighborhoods.mean(axis=1)
    d = neighborhoods - c[:, None, :]
    cov = np.einsum("nki,nkj->nij", d, d) / neighborhoods.shape[1]
    w, v = np.linalg.eigh(cov)
    return c, w, v


def _rank_ok(w: np.ndarray) -> np.ndarray:
    # rank >= 2: the middle eigenvalue must be resolvable against the largest
    return w[:, 1] > _RANK_TOL * np.maximum(w[:, 2], 1e-300)


def plane_distance_lsq(query: PointCloud, reference: PointCloud, k: int = DEFAULT_K_PLANE) -> DistanceReport:
    """Unsigned distance to the orthogonal least-squares plane of the ``k`` nearest reference points."""
    idx = _neighbors(query, reference, k, 3)
    c, w, v = local_frames(reference.points[idx])
    n = v[:, :, 0]
    dist = np.abs(np.einsum("ij,ij->i", n, query.points - c))
    dist[~_rank_ok(w)] = np.nan
    return _report(MetricKind.PLANE_LSQ, np.nanmean(dist) if np.isfinite(dist).any() else np.nan,
                   dist, dist, {"k": k})


@njit(cache=True)
def _quadric_value(coef, x, y):
    a, b, c, d, e, f = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    return a * x * x + b * x * y + c * y * y + d * x + e * y + f


@njit(cache=True)
def _project_on_quadric(coef, u, v, w):
    """Minimise (x-u)^2 + (y-v)^2 + (f(x,y)-w)^2 by damped Newton from (u, v).

    Where the Hessian is indefinite the step is shifted to a descent direction;
    at a stationary point with negative curvature the search moves along the
    most negative curvature direction.
    """
    a, b, c, d, e = coef[0], coef[1], coef[2], coef[3], coef[4]
    x, y = u, v
    fz = _quadric_value(coef, x, y) - w
    D = (x - u) ** 2 + (y - v) ** 2 + fz * fz
    scale = 1.0 + abs(u) + abs(v) + abs(w)
    for _ in range(200):
        fx = 2 * a * x + b * y + d
        fy = b * x + 2 * c * y + e
        gx = 2 * (x - u) + 2 * fz * fx
        gy = 2 * (y - v) + 2 * fz * fy
        hxx = 2 + 2 * (fx * fx + fz * 2 * a)
        hxy = 2 * (fx * fy + fz * b)
        hyy = 2 + 2 * (fy * fy + fz * 2 * c)
        tr = hxx + hyy
        disc = np.sqrt(max((hxx - hyy) ** 2 / 4 + hxy * hxy, 0.0))
        lmin = tr / 2 - disc
        gnorm = np.sqrt(gx * gx + gy * gy)
        if lmin > 1e-12 * max(abs(tr), 1.0):
            det = hxx * hyy - hxy * hxy
            sx = -(hyy * gx - hxy * gy) / det
            sy = -(hxx * gy - hxy * gx) / det
        elif gnorm > 1e-14 * scale:
            shift = -lmin + 1e-3 * max(abs(tr), 1.0)
            h0, h1 = hxx + shift, hyy + shift
            det = h0 * h1 - hxy * hxy
            sx = -(h1 * gx - hxy * gy) / det
            sy = -(h0 * gy - hxy * gx) / det
        else:
            # stationary with negative curvature: eigenvector of lmin
            if abs(hxy) > 1e-300:
                vx, vy = lmin - hyy, hxy
            elif hxx <= hyy:
                vx, vy = 1.0, 0.0
            else:
                vx, vy = 0.0, 1.0
            nv = np.sqrt(vx * vx + vy * vy)
            sx, sy = 0.1 * scale * vx / nv, 0.1 * scale * vy / nv
        best_D = D
        best_x, best_y = x, y
        for sign in (1.0, -1.0):
            t = 1.0
            for _ in range(60):
                nx, ny = x + sign * t * sx, y + sign * t * sy
                nfz = _quadric_value(coef, nx, ny) - w
                nD = (nx - u) ** 2 + (ny - v) ** 2 + nfz * nfz
                if nD < best_D:
                    best_D, best_x, best_y = nD, nx, ny
                    break
                t *= 0.5
            if best_D < D and lmin > 1e-12 * max(abs(tr), 1.0):
                break
        if not best_D < D:
            break
        moved = abs(best_x - x) + abs(best_y - y)
        x, y, D = best_x, best_y, best_D
        fz = _quadric_value(coef, x, y) - w
        if moved <= 1e-15 * scale:
            break
    return np.sqrt(D), x, y


@njit(cache=True)
def _quadric_distances(query, nb_points, centroids, frames, cond_cap):
    n, k = nb_points.shape[0], nb_points.shape[1]
    out = np.empty(n)
    fallback = np.zeros(n, dtype=np.bool_)
    A = np.empty((k, 6))
    z = np.empty(k)
    for i in range(n):
        nrm = frames[i, :, 0]
        e2 = frames[i, :, 1]
        e1 = frames[i, :, 2]
        c = centroids[i]
        s = 0.0
        for j in range(k):
            p = nb_points[i, j] - c
            X = p[0] * e1[0] + p[1] * e1[1] + p[2] * e1[2]
            Y = p[0] * e2[0] + p[1] * e2[1] + p[2] * e2[2]
            z[j] = p[0] * nrm[0] + p[1] * nrm[1] + p[2] * nrm[2]
            A[j, 0] = X
            A[j, 1] = Y
            s = max(s, abs(X), abs(Y))
        s = max(s, 1e-300)
        for j in range(k):
            X = A[j, 0] / s
            Y = A[j, 1] / s
            A[j, 0] = X * X
            A[j, 1] = X * Y
            A[j, 2] = Y * Y
            A[j, 3] = X
            A[j, 4] = Y
            A[j, 5] = 1.0
        q = query[i] - c
        u = q[0] * e1[0] + q[1] * e1[1] + q[2] * e1[2]
        v = q[0] * e2[0] + q[1] * e2[1] + q[2] * e2[2]
        w = q[0] * nrm[0] + q[1] * nrm[1] + q[2] * nrm[2]
        U, sv, Vt = np.linalg.svd(A, False)
        if sv[5] <= 0.0 or sv[0] / sv[5] > cond_cap:
            out[i] = abs(w)
            fallback[i] = True
            continue
        coef_s = Vt.T @ ((U.T @ z) / sv)
        # undo the coordinate scaling
        coef = np.empty(6)
        coef[0] = coef_s[0] / (s * s)
        coef[1] = coef_s[1] / (s * s)
        coef[2] = coef_s[2] / (s * s)
        coef[3] = coef_s[3] / s
        coef[4] = coef_s[4] / s
        coef[5] = coef_s[5]
        out[i] = _project_on_quadric(coef, u, v, w)[0]
    return out, fallback


def plane_distance_quadratic(query: PointCloud, reference: PointCloud, k: int = DEFAULT_K_PLANE,
                             cond_cap: float = QUADRIC_COND_CAP) -> DistanceReport:
    """Distance to a quadric ``z' = ax'^2 + bx'y' + cy'^2 + dx' + ey' + f`` fitted in the local plane frame.

    Fits whose design matrix condition number exceeds ``cond_cap`` fall back to
    the least-squares plane distance; their count is in ``params["fallback"]``.
    """
    idx = _neighbors(query, reference, k, 6)
    nb = reference.points[idx]
    c, w, v = local_frames(nb)
    dist, fallback = _quadric_distances(np.ascontiguousarray(query.points), np.ascontiguousarray(nb),
                                        c, np.ascontiguousarray(v), float(cond_cap))
    dist[~_rank_ok(w)] = np.nan
    scalar = np.nanmean(dist) if np.isfinite(dist).any() else np.nan
    return _report(MetricKind.PLANE_QUADRATIC, scalar, dist, dist,
                   {"k": k, "cond_cap": cond_cap, "fallback": int(fallback.sum())})


def local_triangulation(neighbors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a (k, 3) neighbourhood onto its least-squares plane and Delaunay-triangulate it.

    Returns ``(uv, simplices)``.

    Raises:
        CollinearNeighborhood: the projected points do not span a plane.
    """
    c, w, v = local_frames(neighbors[None])
    if not _rank_ok(w)[0]:
        raise CollinearNeighborhood("neighbourhood is collinear or coincident")
    return _triangulate(neighbors, c[0], v[0])


def _triangulate(neighbors, center, frame):
    d = neighbors - center
    uv = np.column_stack([d @ frame[:, 2], d @ frame[:, 1]])
    try:
        tri = Delaunay(uv)
    except QhullError as exc:
        raise CollinearNeighborhood(str(exc).splitlines()[0]) from exc
    return uv, tri.simplices


@njit(cache=True)
def _min_triangle_distance(p, pts, simplices):
    best = np.inf
    for s in range(simplices.shape[0]):
        cp = closest_point_on_triangle(p, pts[simplices[s, 0]], pts[simplices[s, 1]], pts[simplices[s, 2]])
        d = np.sqrt(((p - cp) ** 2).sum())
        if d < best:
            best = d
    return best


def plane_distance_triangulation(query: PointCloud, reference: PointCloud,
                                 k: int = DEFAULT_K_TRIANGULATION) -> DistanceReport:
    """Distance to the closest triangle of the 2.5D Delaunay mesh over the ``k`` nearest reference points."""
    idx = _neighbors(query, reference, k, 3)
    nbs = reference.points[idx]
    c, w, v = local_frames(nbs)
    ok = _rank_ok(w)
    dist = np.full(len(query), np.nan)
    for i in np.flatnonzero(ok):
        nb = nbs[i]
        try:
            _, simplices = _triangulate(nb, c[i], v[i])
        except CollinearNeighborhood:
            continue
        dist[i] = _min_triangle_distance(query.points[i], nb, simplices.astype(np.int64))
    scalar = np.nanmean(dist) if np.isfinite(dist).any() else np.nan
    return _report(MetricKind.PLANE_TRIANGULATION, scalar, dist, dist, {"k": k})


# --------------------------------------------------------------------------- mesh

def cloud_to_mesh(query: PointCloud, mesh: TriangleMesh, bvh: Optional[Bvh] = None) -> DistanceReport:
    """Signed distance to the closest triangle; positive on the side its normal points to."""
    _nonempty(query)
    if len(mesh) == 0:
        raise EmptyInput("cloud_to_mesh needs a non-empty mesh")
    bvh = bvh or Bvh(mesh)
    dist, tri, closest = bvh.closest_points(query.points)
    side = np.einsum("ij,ij->i", query.points - closest, mesh.triangle_normals[tri])
    signed = np.where(side < 0, -dist, dist)
    return _report(MetricKind.CLOUD_TO_MESH, signed.mean(), signed, signed, {})


def fit_gaussian(report: DistanceReport) -> tuple[float, float]:
    """Sample mean and unbiased standard deviation of the valid distances."""
    values = report.samples if report.samples is not None else report.per_point
    if values is None:
        raise InsufficientData("report carries no distances")
    values = values[np.isfinite(values)]
    if len(values) < 2:
        raise InsufficientData(f"need at least 2 finite distances, got {len(values)}")
    return float(np.mean(values)), float(np.std(values, ddof=1))


def compute_metric(
    kind: MetricKind | str,
    query: PointCloud,
    reference: PointCloud | TriangleMesh,
    *,
    k: Optional[int] = None,
    squared: bool = False,
) -> DistanceReport:
    """Dispatch on ``kind``; ``reference`` is a mesh for cloud-to-mesh and a cloud otherwise."""
    kind = MetricKind.parse(kind) if isinstance(kind, str) else kind
    if kind is MetricKind.CLOUD_TO_MESH:
        if not isinstance(reference, TriangleMesh):
            raise InvalidParameter("cloud-to-mesh needs a mesh reference")
        return cloud_to_mesh(query, reference)
    if isinstance(reference, TriangleMesh):
        raise InvalidParameter(f"{kind.value} needs a point-cloud reference")
    if kind is MetricKind.CHAMFER:
        return chamfer(query, reference, squared)
    if kind is MetricKind.HAUSDORFF:
        return hausdorff(query, reference)
    if kind is MetricKind.EARTH_MOVERS:
        return earth_movers(query, reference)
    if kind is MetricKind.PLANE_LSQ:
        return plane_distance_lsq(query, reference, k or DEFAULT_K_PLANE)
    if kind is MetricKind.PLANE_QUADRATIC:
        return plane_distance_quadratic(query, reference, k or DEFAULT_K_PLANE)
    return plane_distance_triangulation(query, reference, k or DEFAULT_K_TRIANGULATION)
