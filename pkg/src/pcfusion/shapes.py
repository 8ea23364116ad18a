"""Procedural benchmark surfaces and the perturbed metric-evaluation pairs.

Four height fields over the unit square (plane, slope, sine wave, triangular
wave) plus a closed "bunny" test object built from smoothly blended ellipsoids.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateOutput, EmptyInput, InvalidParameter
from .geometry.types import PointCloud, RigidTransform, TriangleMesh

GT_OFFSET = 0.5
DEFAULT_SEGMENTS = 16
DEFAULT_SAMPLES = 1000

SLOPE_RISE = 0.5
SINE_AMPLITUDE = 0.1
SINE_CYCLES = 2.0
TRI_AMPLITUDE = 0.1
TRI_CYCLES = 4.0


class ShapeKind(str, enum.Enum):
    PLANE = "plane"
    SLOPE = "slope"
    SINE_WAVE = "sine"
    TRIANGULAR_WAVE = "triangular"

    @classmethod
    def parse(cls, name: str) -> "ShapeKind":
        key = name.lower().replace("_", "").replace("-", "")
        aliases = {"plane": cls.PLANE, "slope": cls.SLOPE, "sine": cls.SINE_WAVE,
                   "sinewave": cls.SINE_WAVE, "triangular": cls.TRIANGULAR_WAVE,
                   "triangularwave": cls.TRIANGULAR_WAVE, "tri": cls.TRIANGULAR_WAVE}
        if key not in aliases:
            raise InvalidParameter(f"unknown shape '{name}'")
        return aliases[key]


SHAPE_PARAMETERS = {
    ShapeKind.PLANE: {},
    ShapeKind.SLOPE: {"rise_m": SLOPE_RISE},
    ShapeKind.SINE_WAVE: {"amplitude_m": SINE_AMPLITUDE, "cycles": SINE_CYCLES},
    ShapeKind.TRIANGULAR_WAVE: {"amplitude_m": TRI_AMPLITUDE, "cycles": TRI_CYCLES},
}


def triangle_wave(s: np.ndarray) -> np.ndarray:
    """Unit-period triangle wave in [-1, 1] with ``tri(0) = 0`` and a peak at 0.25."""
    return 4.0 * np.abs(np.mod(s - 0.25, 1.0) - 0.5) - 1.0


def height(kind: ShapeKind, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if kind is ShapeKind.PLANE:
        return np.zeros_like(x)
    if kind is ShapeKind.SLOPE:
        return SLOPE_RISE * x
    if kind is ShapeKind.SINE_WAVE:
        return SINE_AMPLITUDE * np.sin(2.0 * np.pi * SINE_CYCLES * x)
    if kind is ShapeKind.TRIANGULAR_WAVE:
        return TRI_AMPLITUDE * triangle_wave(TRI_CYCLES * x)
    raise InvalidParameter(f"unknown shape {kind!r}")


def make_shape_mesh(kind: ShapeKind, segments: int = DEFAULT_SEGMENTS) -> TriangleMesh:
    """``segments x segments`` quad grid over [0, 1]^2, two CCW triangles per quad (normals +z side)."""
    if segments < 1:
        raise InvalidParameter("segments must be >= 1")
    g = np.linspace(0.0, 1.0, segments + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), height(kind, X.ravel(), Y.ravel())])
    idx = np.arange((segments + 1) ** 2).reshape(segments + 1, segments + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    v01 = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    return TriangleMesh(verts, tris)


def sample_surface(mesh: TriangleMesh, n: int, seed: int | np.random.Generator = 0) -> PointCloud:
    """Area-uniform random samples; triangle picked proportional to area, barycentric-uniform inside."""
    if len(mesh) == 0:
        raise EmptyInput("cannot sample an empty mesh")
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    areas = mesh.areas
    tri = rng.choice(len(mesh), size=n, p=areas / areas.sum())
    r = rng.random((n, 2))
    flip = r.sum(axis=1) > 1.0
    r[flip] = 1.0 - r[flip]
    c = mesh.corners[tri]
    pts = c[:, 0] + r[:, :1] * (c[:, 1] - c[:, 0]) + r[:, 1:] * (c[:, 2] - c[:, 0])
    return PointCloud(pts, mesh.triangle_normals[tri], validate=False)


@dataclass(frozen=True)
class PerturbationSpec:
    noise_std: float = 0.0
    hole_radius: float = 0.0
    sampling_factor: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("noise_std", "hole_radius"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidParameter(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 <= self.sampling_factor <= 1.0:
            raise InvalidParameter(f"sampling_factor must lie in [0, 1], got {self.sampling_factor}")


@dataclass(frozen=True)
class MetricPair:
    reference: PointCloud
    test: PointCloud
    gt_distance: float
    mesh: TriangleMesh
    meta: dict

    def __iter__(self):
        return iter((self.reference, self.test, self.gt_distance))


def remove_hole(cloud: PointCloud, radius: float) -> PointCloud:
    """Drop points closer than ``radius`` (in x, y) to the cloud's x,y centroid."""
    if radius <= 0 or len(cloud) == 0:
        return cloud
    c = cloud.points[:, :2].mean(axis=0)
    keep = np.linalg.norm(cloud.points[:, :2] - c, axis=1) >= radius
    return cloud.select(np.flatnonzero(keep))


def make_metric_pair(
    kind: ShapeKind,
    spec: PerturbationSpec,
    n_points: int = DEFAULT_SAMPLES,
    segments: int = DEFAULT_SEGMENTS,
) -> MetricPair:
    """Reference samples and a copy lifted by 0.5 m, then holed, noised and thinned (in that order)."""
    sample_ss, noise_ss, sub_ss = np.random.SeedSequence(spec.rng_seed).spawn(3)
    mesh = make_shape_mesh(kind, segments)
    reference = sample_surface(mesh, n_points, np.random.default_rng(sample_ss))
    test = PointCloud(reference.points + [0.0, 0.0, GT_OFFSET], reference.normals, validate=False)

    test = remove_hole(test, spec.hole_radius)
    pts = test.points
    if spec.noise_std > 0:
        pts = pts + np.random.default_rng(noise_ss).normal(0.0, spec.noise_std, size=pts.shape)
    n_keep = int(round((1.0 - spec.sampling_factor) * len(pts)))
    if n_keep < len(pts):
        keep = np.sort(np.random.default_rng(sub_ss).choice(len(pts), size=n_keep, replace=False))
    else:
        keep = np.arange(len(pts))
    normals = None if spec.noise_std > 0 or test.normals is None else test.normals[keep]
    test = PointCloud(pts[keep], normals, validate=False)
    if len(test) < 2:
        raise DegenerateOutput(f"perturbations left {len(test)} test points (need >= 2)")
    meta = {
        "shape": kind.value,
        "shape_parameters": SHAPE_PARAMETERS[kind],
        "segments": segments,
        "n_reference": len(reference),
        "n_test": len(test),
        "gt_distance": GT_OFFSET,
        "perturbation": asdict(spec),
        "perturbation_order": ["hole", "noise", "subsample"],
        "noise_model": "isotropic gaussian on x, y, z",
        "perturbed_cloud": "test",
    }
    return MetricPair(reference, test, GT_OFFSET, mesh, meta)


# --------------------------------------------------------------------------- bunny

# (center, radii) in meters; blended with a polynomial smooth-min
_BUNNY_PARTS = (
    ((0.000, 0.000, 0.045), (0.070, 0.052, 0.048)),   # body
    ((0.055, 0.000, 0.095), (0.036, 0.032, 0.032)),   # head
    ((0.050, 0.016, 0.150), (0.011, 0.007, 0.040)),   # ear
    ((0.040, -0.018, 0.145), (0.011, 0.007, 0.038)),  # ear
    ((-0.072, 0.000, 0.060), (0.018, 0.018, 0.018)),  # tail
    ((0.045, 0.025, 0.008), (0.030, 0.013, 0.010)),   # front paw
    ((0.045, -0.025, 0.008), (0.030, 0.013, 0.010)),  # front paw
    ((-0.030, 0.040, 0.020), (0.040, 0.015, 0.022)),  # haunch
    ((-0.030, -0.040, 0.020), (0.040, 0.015, 0.022)), # haunch
)
_BLEND = 0.012


def _bunny_field(P: np.ndarray) -> np.ndarray:
    field = None
    for center, radii in _BUNNY_PARTS:
        r = np.asarray(radii)
        q = (P - np.asarray(center)) / r
        d = (np.linalg.norm(q, axis=-1) - 1.0) * r.min()
        if field is None:
            field = d
        else:
            h = np.clip(0.5 + 0.5 * (d - field) / _BLEND, 0.0, 1.0)
            field = d * (1 - h) + field * h - _BLEND * h * (1 - h)
    return field


def make_bunny_mesh(resolution: float = 0.002) -> TriangleMesh:
    """Closed, outward-oriented bunny-like test object centred on its surface centroid.

    Roughly 0.17 m long and 0.19 m tall, comparable to a desk-scale scan target.
    """
    from skimage.measure import marching_cubes

    lo = np.array([-0.11, -0.08, -0.03])
    hi = np.array([0.11, 0.08, 0.21])
    axes = [np.arange(lo[a], hi[a] + resolution, resolution) for a in range(3)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vol = _bunny_field(G)
    verts, faces, _, _ = marching_cubes(vol, level=0.0, spacing=(resolution,) * 3)
    verts = verts + lo
    # marching cubes can emit coincident vertices on saddle cells; weld them
    _, first, weld = np.unique(np.round(verts / (resolution * 1e-3)), axis=0, return_index=True, return_inverse=True)
    verts = verts[first]
    faces = weld.reshape(-1)[faces].astype(np.int64)
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 2] != faces[:, 0])]
    c = verts[faces]
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    faces = faces[np.linalg.norm(cross, axis=1) > 1e-14]
    signed_volume = np.einsum("ij,ij->i", verts[faces[:, 0]], np.cross(verts[faces[:, 1]], verts[faces[:, 2]])).sum()
    if signed_volume < 0:
        faces = faces[:, ::-1].copy()
    used, inverse = np.unique(faces, return_inverse=True)
    mesh = TriangleMesh(verts[used], inverse.reshape(-1, 3))
    return mesh.transformed(RigidTransform.from_translation(-mesh.centroid))


BUILTIN_MESHES = {"bunny": make_bunny_mesh}


def builtin_mesh(name: str) -> Optional[TriangleMesh]:
    factory = BUILTIN_MESHES.get(name.lower())
    return None if factory is None else factory()
