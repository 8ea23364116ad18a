"""Virtual structured-light scanner.

Viewpoints are placed on a sphere around the object by Poisson-disc dart
throwing and pruned greedily to a small set that still sees every triangle.
Each view is rendered by casting one pinhole ray per (strided) pixel against a
BVH. Camera frames follow the OpenCV convention: +z forward, +x right, +y down.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyScan, InvalidParameter, PlacementFailure
from .geometry import se3
from .geometry.bvh import Bvh
from .geometry.types import PointCloud, RigidTransform, TriangleMesh

logger = logging.getLogger(__name__)

DEFAULT_STRIDE = 4
DEFAULT_VIEWS = 8


@dataclass(frozen=True)
class CameraModel:
    """Pinhole sensor with a depth-of-field window (defaults: 1920x1200, 38.70 x 24.75 deg, 0.35-0.70 m)."""

    width: int = 1920
    height: int = 1200
    fov_x: float = 38.70
    fov_y: float = 24.75
    dof_near: float = 0.350
    dof_far: float = 0.700

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameter("image size must be positive")
        if not (0 < self.fov_x < 180 and 0 < self.fov_y < 180):
            raise InvalidParameter("field of view must lie in (0, 180) degrees")
        if not 0 < self.dof_near < self.dof_far:
            raise InvalidParameter("need 0 < dof_near < dof_far")

    @property
    def fx(self) -> float:
        return 0.5 * self.width / np.tan(np.radians(self.fov_x) / 2)

    @property
    def fy(self) -> float:
        return 0.5 * self.height / np.tan(np.radians(self.fov_y) / 2)

    @property
    def default_radius(self) -> float:
        return 0.5 * (self.dof_near + self.dof_far)

    def pixel_directions(self, stride: int = 1) -> np.ndarray:
        """Camera-frame ray directions with unit z, row-major over the strided pixel grid."""
        if stride < 1:
            raise InvalidParameter("stride must be >= 1")
        u = np.arange(0, self.width, stride) + 0.5
        v = np.arange(0, self.height, stride) + 0.5
        U, V = np.meshgrid(u, v)
        x = (U.ravel() - 0.5 * self.width) / self.fx
        y = (V.ravel() - 0.5 * self.height) / self.fy
        return np.column_stack([x, y, np.ones_like(x)])

    def in_frustum(self, cam_points: np.ndarray) -> np.ndarray:
        z = cam_points[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (
                (z >= self.dof_near)
                & (z <= self.dof_far)
                & (np.abs(cam_points[:, 0] / z) <= 0.5 * self.width / self.fx)
                & (np.abs(cam_points[:, 1] / z) <= 0.5 * self.height / self.fy)
            )
        return ok


def look_at(eye: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Camera-to-world pose at ``eye`` looking at ``target``.

    World +z projected into the image plane is "up" (camera -y); when the
    view axis is parallel to z, +x is used instead.
    """
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    if abs(z @ up) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    up = up - (up @ z) * z
    up /= np.linalg.norm(up)
    y = -up
    x = np.cross(y, z)
    R = np.column_stack([x, y, z])
    return RigidTransform.from_rt(se3.project_to_so3(R), eye)


def render_scan(
    mesh: TriangleMesh,
    camera_pose: RigidTransform,
    cam: CameraModel = CameraModel(),
    stride: int = DEFAULT_STRIDE,
    bvh: Optional[Bvh] = None,
) -> PointCloud:
    """Ray-cast one view; points and normals are returned in the camera frame.

    Returns:
        Hit points in pixel scan order whose depth lies inside the DOF window.
        Normals come from the hit triangle, flipped to face the camera.
    """
    if len(mesh) == 0:
        raise EmptyScan("mesh has no triangles")
    bvh = bvh or Bvh(mesh)
    d_cam = cam.pixel_directions(stride)
    d_world = d_cam @ camera_pose.R.T
    t, tri = bvh.raycast(camera_pose.t, d_world, t_min=1e-9)
    keep = (tri >= 0) & (t >= cam.dof_near) & (t <= cam.dof_far)
    if not np.any(keep):
        raise EmptyScan("no surface inside the depth-of-field window")
    pts = d_cam[keep] * t[keep, None]
    n = mesh.triangle_normals[tri[keep]] @ camera_pose.R
    flip = np.einsum("ij,ij->i", n, pts) > 0
    n[flip] *= -1.0
    return PointCloud(pts, n, validate=False)


def visible_triangles(
    mesh: TriangleMesh,
    camera_pose: RigidTransform,
    cam: CameraModel = CameraModel(),
    bvh: Optional[Bvh] = None,
) -> np.ndarray:
    """Boolean mask of triangles whose centroid is inside the frustum and unoccluded."""
    bvh = bvh or Bvh(mesh)
    cents = mesh.centroids
    cam_pts = camera_pose.inverse().apply(cents)
    cand = np.flatnonzero(cam.in_frustum(cam_pts))
    mask = np.zeros(len(mesh), dtype=bool)
    if len(cand) == 0:
        return mask
    dirs = cents[cand] - camera_pose.t
    t, tri = bvh.raycast(camera_pose.t, dirs, t_min=1e-9)
    mask[cand] = (tri == cand) | (t >= 1.0 - 1e-9)
    return mask


def _angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(a @ b.T, -1.0, 1.0))


def _dart_throw(rng: np.random.Generator, min_angle: float, max_failures: int) -> np.ndarray:
    accepted: list[np.ndarray] = []
    failures = 0
    while failures < max_failures:
        u = se3.random_unit_vectors(rng, 1)[0]
        if accepted and np.min(_angular_distance(np.asarray(accepted), u[None])) < min_angle:
            failures += 1
            continue
        accepted.append(u)
        failures = 0
    return np.asarray(accepted).reshape(-1, 3)


def _chain_order(vis: np.ndarray, picks: Sequence[int], exhaustive_max: int = 9) -> list[int]:
    """Order views so each consecutive pair shares as many visible triangles as possible.

    Consecutive scans become odometry edges, so the weakest link matters: up to
    ``exhaustive_max`` views every open tour is scored by its smallest
    consecutive overlap (ties by total overlap, then first in enumeration
    order). Larger sets use a greedy tour from the first pick.
    """
    picks = list(picks)
    shared = (vis[picks][:, None, :] & vis[picks][None, :, :]).sum(axis=2)
    n = len(picks)
    if n <= 2:
        return picks
    if n <= exhaustive_max:
        perms = np.array([p for p in itertools.permutations(range(n)) if p[0] < p[-1]])
        links = shared[perms[:, :-1], perms[:, 1:]]
        weakest, total = links.min(axis=1), links.sum(axis=1)
        best = perms[max(range(len(perms)), key=lambda k: (weakest[k], total[k]))]
        return [picks[k] for k in best]
    order, remaining = [0], list(range(1, n))
    while remaining:
        nxt = remaining[int(np.argmax(shared[order[-1], remaining]))]
        order.append(nxt)
        remaining.remove(nxt)
    return [picks[k] for k in order]


@dataclass
class ViewpointPlan:
    poses: list[RigidTransform]
    coverage: np.ndarray  # (views, triangles) visibility
    candidates: int

    @property
    def covered_fraction(self) -> float:
        return float(self.coverage.any(axis=0).mean())


def plan_viewpoints(
    mesh: TriangleMesh,
    radius: float,
    min_separation: float,
    seed: int = 0,
    cam: CameraModel = CameraModel(),
    n_views: Optional[int] = None,
    max_failures: int = 300,
) -> ViewpointPlan:
    """Poisson-disc candidates on a sphere, then greedy coverage pruning.

    Args:
        mesh: object to observe; the sphere is centred on its surface centroid.
        radius: sphere radius (camera distance) in meters.
        min_separation: minimum geodesic distance between candidates, meters.
        seed: RNG seed.
        cam: sensor model used for the frustum and DOF test.
        n_views: force exactly this many views. Extra views are added by
            farthest-point spreading, surplus ones dropped by lowest coverage gain.
        max_failures: consecutive dart rejections before sampling stops.
    """
    if min_separation <= 0:
        raise InvalidParameter("min_separation must be > 0")
    rng = np.random.default_rng(seed)
    dirs = _dart_throw(rng, min_separation / radius, max_failures)
    if len(dirs) < 2:
        raise PlacementFailure(f"min_separation {min_separation} leaves room for fewer than 2 viewpoints")
    center = mesh.centroid
    bvh = Bvh(mesh)
    poses = [look_at(center - radius * d, center) for d in dirs]
    vis = np.array([visible_triangles(mesh, P, cam, bvh) for P in poses])
    coverable = vis.any(axis=0)

    picks: list[int] = []
    covered = np.zeros(len(mesh), dtype=bool)
    while True:
        gain = (vis & ~covered).sum(axis=1)
        gain[picks] = -1
        best = int(np.argmax(gain))
        if gain[best] <= 0:
            break
        picks.append(best)
        covered |= vis[best]
        if covered[coverable].all():
            break
    if n_views is not None:
        if n_views > len(dirs):
            raise PlacementFailure(f"only {len(dirs)} candidates for {n_views} requested views")
        picks = picks[:n_views]
        while len(picks) < n_views:
            rest = [i for i in range(len(dirs)) if i not in picks]
            spread = _angular_distance(dirs[rest], dirs[picks]).min(axis=1)
            picks.append(rest[int(np.argmax(spread))])
    ordered = _chain_order(vis, picks)
    logger.info("viewpoints: %d candidates -> %d views, coverage %.3f of coverable triangles",
                len(dirs), len(ordered), vis[ordered].any(axis=0)[coverable].mean())
    return ViewpointPlan([poses[i] for i in ordered], vis[ordered], len(dirs))


def poisson_viewpoints(
    mesh: TriangleMesh,
    radius: float,
    min_separation: float,
    seed: int = 0,
    cam: CameraModel = CameraModel(),
) -> list[RigidTransform]:
    return plan_viewpoints(mesh, radius, min_separation, seed, cam).poses


@dataclass(frozen=True)
class Scan:
    cloud: PointCloud
    gt_pose: RigidTransform
    perturbed_pose: RigidTransform


@dataclass(frozen=True)
class ScanSet:
    """Partial scans in camera frames with their ground-truth camera-to-world poses."""

    scans: tuple[Scan, ...]
    mesh: TriangleMesh
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scans)

    @property
    def clouds(self) -> list[PointCloud]:
        return [s.cloud for s in self.scans]

    @property
    def gt_poses(self) -> list[RigidTransform]:
        return [s.gt_pose for s in self.scans]

    @property
    def perturbed_poses(self) -> list[RigidTransform]:
        return [s.perturbed_pose for s in self.scans]


def default_separation(radius: float, n_views: int) -> float:
    """Candidate spacing that yields roughly four darts per requested view."""
    return 0.5 * radius * np.sqrt(4.0 * np.pi / max(n_views, 1))


def simulate_scans(
    mesh: TriangleMesh,
    n_views: int = DEFAULT_VIEWS,
    cam: CameraModel = CameraModel(),
    stride: int = DEFAULT_STRIDE,
    seed: int = 0,
    radius: Optional[float] = None,
    min_separation: Optional[float] = None,
) -> ScanSet:
    radius = cam.default_radius if radius is None else radius
    sep = default_separation(radius, n_views) if min_separation is None else min_separation
    plan = plan_viewpoints(mesh, radius, sep, seed, cam, n_views=n_views)
    bvh = Bvh(mesh)
    scans = tuple(Scan(render_scan(mesh, P, cam, stride, bvh), P, P) for P in plan.poses)
    meta = {
        "n_views": n_views,
        "stride": stride,
        "radius_m": radius,
        "min_separation_m": sep,
        "camera": asdict(cam),
        "coverage": plan.covered_fraction,
        "points_per_scan": [len(s.cloud) for s in scans],
    }
    return ScanSet(scans, mesh, seed, meta)


def random_perturbation(
    rng: np.random.Generator,
    translation_mm: tuple[float, float],
    rotation_deg: tuple[float, float],
    pivot: np.ndarray = np.zeros(3),
) -> tuple[RigidTransform, float, float]:
    """Rigid motion with uniform random axis/direction and uniform magnitudes in the given ranges.

    The rotation acts about ``pivot``. Returns the transform together with the
    drawn rotation angle (radians) and translation length (meters).
    """
    t_dir = se3.random_unit_vectors(rng, 1)[0]
    t_mag = rng.uniform(*translation_mm) * 1e-3
    axis = se3.random_unit_vectors(rng, 1)[0]
    angle = np.radians(rng.uniform(*rotation_deg))
    R = se3.project_to_so3(se3.so3_exp(axis * angle))
    pivot = np.asarray(pivot, float)
    t = pivot - R @ pivot + t_mag * t_dir
    return RigidTransform.from_rt(R, t), angle, t_mag


def perturb_poses(
    scans: ScanSet,
    translation_mm: tuple[float, float] | float,
    rotation_deg: tuple[float, float] | float,
    seed: int = 0,
) -> ScanSet:
    """Attach randomly perturbed copies of the ground-truth poses.

    Each perturbation is applied in the world frame, rotating about the mesh
    centroid: ``perturbed = delta @ gt``. Scalar bounds mean ``[0, bound]``.
    """
    t_rng = (0.0, float(translation_mm)) if np.isscalar(translation_mm) else tuple(map(float, translation_mm))
    r_rng = (0.0, float(rotation_deg)) if np.isscalar(rotation_deg) else tuple(map(float, rotation_deg))
    if min(t_rng + r_rng) < 0 or t_rng[0] > t_rng[1] or r_rng[0] > r_rng[1]:
        raise InvalidParameter("perturbation bounds must satisfy 0 <= lo <= hi")
    rng = np.random.default_rng(seed)
    pivot = scans.mesh.centroid
    new_scans = []
    drawn = []
    for s in scans.scans:
        delta, angle, mag = random_perturbation(rng, t_rng, r_rng, pivot)
        new_scans.append(replace(s, perturbed_pose=delta @ s.gt_pose))
        drawn.append({"rotation_rad": angle, "translation_m": mag, "delta": delta.to_list()})
    meta = dict(scans.meta)
    meta["perturbation"] = {
        "translation_mm": list(t_rng),
        "rotation_deg": list(r_rng),
        "seed": seed,
        "frame": "world, rotation about mesh centroid (perturbed = delta @ gt)",
        "pivot": pivot.tolist(),
        "drawn": drawn,
    }
    return ScanSet(tuple(new_scans), scans.mesh, scans.seed, meta)
