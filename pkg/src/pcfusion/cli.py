"""Command line entry point.

Every subcommand takes its options from flags and, optionally, from a YAML
file given with ``--config`` (keys are the long flag names, with ``-`` or
``_``); flags win. ``run`` executes a whole pipeline config and ``replay``
re-executes a stage from its manifest.

Exit codes: 0 success, 1 user or configuration error, 2 algorithm failure.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import glob
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml
from jsonschema import Draft7Validator

from . import __version__
from .errors import (
    ConfigError,
    EmptyInput,
    InvalidParameter,
    IoError,
    MissingNormals,
    ParseError,
    PcFusionError,
    SizeMismatch,
    TooLarge,
)
from .evaluation import (
    SWEEPS,
    TABLE1_RANGES,
    ExperimentSpec,
    cell_seed,
    run_metric_benchmark,
    run_registration_benchmark,
)
from .geometry import io as gio
from .geometry.ops import apply_transform, crop, estimate_normals, statistical_outlier_filter, voxel_downsample
from .geometry.types import Aabb, PointCloud, RigidTransform, TriangleMesh
from .metrics import MetricKind, compute_metric
from .registration.multiview import MultiviewMethod, run_multiview
from .registration.posegraph import PoseGraphParams
from .scanner import perturb_poses, simulate_scans
from .shapes import BUILTIN_MESHES, PerturbationSpec, ShapeKind, make_bunny_mesh, make_metric_pair, make_shape_mesh

logger = logging.getLogger("pcfusion")

EXIT_OK, EXIT_USER, EXIT_FAILURE = 0, 1, 2
USER_ERRORS = (ConfigError, IoError, ParseError, InvalidParameter, EmptyInput, SizeMismatch, TooLarge,
               MissingNormals)
UNITS = {"m": 1.0, "mm": 1e-3}
METHOD_NAMES = [m.value for m in MultiviewMethod]
METRIC_NAMES = [m.value for m in MetricKind]
SHAPE_NAMES = [k.value for k in ShapeKind]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- small helpers

def _floats(text: str, n: Optional[int] = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in str(text).replace(":", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got '{text}'")
    return vals


def _pair(text) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        text = ",".join(map(str, text))
    return _floats(text, 2)


def _box(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        text = ",".join(map(str, text))
    return _floats(text, 6)


def _ranges(text) -> tuple[tuple[float, float], ...]:
    if isinstance(text, (list, tuple)):
        return tuple(_pair(r) for r in text)
    out = []
    for chunk in str(text).split(","):
        lo, sep, hi = chunk.partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"range '{chunk}' must look like lo:hi")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _names(text, universe: Sequence[str], parse: Callable[[str], object]) -> tuple[str, ...]:
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    items = [s.strip() for s in items if str(s).strip()]
    if items == ["all"]:
        return tuple(universe)
    return tuple(parse(s).value for s in items)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _need(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise IoError(f"{what} file not found: {p}")
    return p


def _scale_cloud(cloud: PointCloud, s: float) -> PointCloud:
    if s == 1.0:
        return cloud
    return PointCloud(cloud.points * s, cloud.normals, validate=False)


def _scale_mesh(mesh: TriangleMesh, s: float) -> TriangleMesh:
    return mesh if s == 1.0 else TriangleMesh(mesh.vertices * s, mesh.triangles, validate=False)


def _scale_pose(T: RigidTransform, s: float) -> RigidTransform:
    return T if s == 1.0 else RigidTransform.from_rt(T.R, T.t * s)


def load_cloud(path, scale: float = 1.0) -> PointCloud:
    cloud, _ = gio.read_ply(_need(path))
    return _scale_cloud(cloud, scale)


def save_cloud(path, cloud: PointCloud, scale: float = 1.0, **kw) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gio.write_ply(path, _scale_cloud(cloud, 1.0 / scale), **kw)
    return path


def load_mesh(spec: str, scale: float = 1.0) -> TriangleMesh:
    """A mesh file, or the name of a built-in mesh (``bunny``, or a shape kind)."""
    if spec in BUILTIN_MESHES:
        return BUILTIN_MESHES[spec]()
    if not Path(spec).exists() and spec in SHAPE_NAMES:
        return make_shape_mesh(ShapeKind.parse(spec))
    return _scale_mesh(gio.read_mesh(_need(spec)), scale)


def save_mesh(path, mesh: TriangleMesh, scale: float = 1.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gio.write_mesh(path, _scale_mesh(mesh, 1.0 / scale))
    return path


def load_poses(path, scale: float = 1.0) -> list[RigidTransform]:
    return [_scale_pose(T, scale) for T in gio.read_poses(_need(path))]


def save_poses(path, poses, scale: float = 1.0, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gio.write_poses(path, [_scale_pose(T, 1.0 / scale) for T in poses], meta)
    return path


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _expand(paths: Sequence[str]) -> list[str]:
    out = []
    for p in paths:
        hits = sorted(glob.glob(p)) if any(c in p for c in "*?[") else [p]
        if not hits:
            raise IoError(f"no files match '{p}'")
        out += hits
    return out


# --------------------------------------------------------------------------- commands
# Each returns (inputs, outputs) so the caller can write a manifest.

def cmd_synth_shape(a, scale):
    spec = PerturbationSpec(a.noise_std, a.hole_radius, a.sampling_factor, a.seed)
    pair = make_metric_pair(ShapeKind.parse(a.kind), spec, a.n_points, a.segments)
    out = Path(a.out_dir)
    outputs = [
        save_cloud(out / "reference.ply", pair.reference, scale),
        save_cloud(out / "test.ply", pair.test, scale),
        save_mesh(out / "reference.obj", pair.mesh, scale),
        _write_json(out / "meta.json", {**pair.meta, "gt_distance": pair.gt_distance / scale,
                                        "unit": a.unit}),
    ]
    return [], outputs


def cmd_synth_mesh(a, scale):
    mesh = make_bunny_mesh(a.resolution) if a.kind == "bunny" else make_shape_mesh(ShapeKind.parse(a.kind), a.segments)
    return [], [save_mesh(a.out, mesh, scale)]


def cmd_scan(a, scale):
    inputs = [] if a.mesh in BUILTIN_MESHES else [_need(a.mesh)]
    mesh = load_mesh(a.mesh, scale)
    scans = simulate_scans(mesh, a.views, stride=a.stride, seed=a.seed)
    perturbed = perturb_poses(scans, a.perturb, a.perturb, seed=cell_seed(a.seed, 1))
    out = Path(a.out_dir)
    outputs = [save_cloud(out / f"scan_{k:03d}.ply", c, scale) for k, c in enumerate(scans.clouds)]
    outputs.append(save_poses(out / "gt_poses.json", scans.gt_poses, scale, {"scan": scans.meta}))
    outputs.append(save_poses(out / "perturbed_poses.json", perturbed.perturbed_poses, scale,
                              {"perturbation": perturbed.meta["perturbation"]}))
    outputs.append(save_mesh(out / "mesh.obj", mesh, scale))
    return inputs, outputs


def cmd_preprocess(a, scale):
    inputs = _expand(a.inputs)
    if not inputs:
        raise ConfigError("preprocess needs at least one input cloud", "inputs")
    out_dir = Path(a.out_dir)
    box = None
    if a.crop is not None:
        b = np.asarray(a.crop, float) * scale
        box = Aabb(b[:3], b[3:])
    outputs = []
    for path in inputs:
        cloud = load_cloud(path, scale)
        n0 = len(cloud)
        if box is not None:
            cloud = crop(cloud, box)
        if a.outlier_k > 0 and len(cloud) > a.outlier_k:
            cloud = statistical_outlier_filter(cloud, a.outlier_k, a.std_ratio)
        if a.voxel_size:
            cloud = voxel_downsample(cloud, a.voxel_size * scale)
        if len(cloud) == 0:
            raise EmptyInput(f"preprocessing removed every point of {path}")
        if cloud.normals is None and len(cloud) >= a.normals_k:
            cloud = estimate_normals(cloud, a.normals_k, viewpoint=np.zeros(3))
        logger.info("%s: %d -> %d points", path, n0, len(cloud))
        outputs.append(save_cloud(out_dir / Path(path).name, cloud, scale))
    return inputs, outputs


def _with_normals(cloud: PointCloud, k: int) -> PointCloud:
    # scans live in their camera frame, so the origin orients normals
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, k, viewpoint=np.zeros(3))


def cmd_register(a, scale):
    if not a.init:
        raise ConfigError("register needs --init poses.json", "init")
    paths = _expand(a.scans)
    clouds = [_with_normals(load_cloud(p, scale), a.normals_k) for p in paths]
    init = load_poses(a.init, scale)
    if len(init) != len(clouds):
        raise ConfigError(f"{a.init} holds {len(init)} poses for {len(clouds)} scans", "init")
    params = PoseGraphParams(
        voxel_size=None if a.voxel_size is None else a.voxel_size * scale,
        distance_multiplier=a.distance_mult,
        prune_divisor=a.prune_div,
        workers=a.workers,
    )
    res = run_multiview(clouds, init, a.method, params)
    logger.info("%s finished in %.2fs (converged=%s)", res.method.value, res.runtime_s, res.converged)
    fused = PointCloud.concatenate([apply_transform(c, T) for c, T in zip(clouds, res.poses)])
    outputs = [save_cloud(a.out, fused, scale)]
    if a.out_poses:
        report = res.report()
        report["voxel_size"] = report["voxel_size"] / scale
        report["scans"] = [Path(p).name for p in paths]
        outputs.append(save_poses(a.out_poses, res.poses, scale, report))
    return [*paths, a.init], outputs


def cmd_measure(a, scale):
    kind = MetricKind.parse(a.metric)
    ref_path = a.reference
    mesh_ref = Path(ref_path).suffix.lower() in (".obj", ".stl")
    if kind.needs_mesh and not mesh_ref:
        raise ConfigError("cloud-to-mesh needs an .obj or .stl reference", "reference")
    query = load_cloud(a.query, scale)
    reference = load_mesh(ref_path, scale) if mesh_ref else load_cloud(ref_path, scale)
    if mesh_ref and not kind.needs_mesh:
        raise ConfigError(f"{kind.value} needs a point-cloud reference", "reference")
    rep = compute_metric(kind, query, reference, k=a.k, squared=a.squared)
    doc = rep.to_dict()
    # report lengths in the caller's unit
    f = (1.0 / scale) ** (2 if (a.squared and kind is MetricKind.CHAMFER) else 1)
    for key in ("scalar", "mean", "std"):
        doc[key] = doc[key] * f
    doc["histogram"]["bin_edges"] = [e * f for e in doc["histogram"]["bin_edges"]]
    doc.update(query=Path(a.query).name, reference=Path(ref_path).name, unit=a.unit)
    outputs = [_write_json(a.out, doc)]
    if a.per_point:
        if rep.per_point is None:
            raise ConfigError(f"{kind.value} has no per-point distances", "per_point")
        outputs.append(save_cloud(a.per_point, query, scale, scalars={"distance": rep.per_point * f}))
    logger.info("%s = %.9g", kind.value, doc["scalar"])
    return [a.query, ref_path], outputs


def _write_bench(res, out, timings) -> list[Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.to_csv())
    made = [out]
    if timings:
        Path(timings).write_text(res.timings_csv())
        made.append(Path(timings))
    return made


def cmd_eval_registration(a, scale):
    inputs = [] if a.mesh in BUILTIN_MESHES else [_need(a.mesh)]
    spec = ExperimentSpec(
        scenario="registration",
        methods=_names(a.methods, METHOD_NAMES, MultiviewMethod.parse),
        ranges=a.ranges,
        repetitions=a.reps,
        seed=a.seed,
        n_views=a.views,
        stride=a.stride,
        unit=a.unit,
    )
    res = run_registration_benchmark(spec, mesh=load_mesh(a.mesh, scale))
    return inputs, _write_bench(res, a.out, a.timings)


def cmd_eval_metrics(a, scale):
    spec = ExperimentSpec(
        scenario="metrics",
        methods=_names(a.metrics, METRIC_NAMES, MetricKind.parse),
        shapes=_names(a.shapes, SHAPE_NAMES, ShapeKind.parse),
        sweeps=tuple(s for s in _names(a.sweeps, SWEEPS, lambda s: _Sweep(s))),
        repetitions=a.reps,
        seed=a.seed,
        n_points=a.n_points,
    )
    res = run_metric_benchmark(spec)
    return [], _write_bench(res, a.out, a.timings)


class _Sweep:
    def __init__(self, name: str):
        if name not in SWEEPS:
            raise InvalidParameter(f"unknown sweep '{name}' (choose from {', '.join(SWEEPS)})")
        self.value = name


def convert(in_path, out_path, *, ascii: bool = False, float32: bool = False) -> Path:
    """Re-encode geometry between PLY, OBJ, STL and pose JSON."""
    src, dst = Path(in_path), Path(out_path)
    si, so = src.suffix.lower(), dst.suffix.lower()
    _need(src)
    dst.parent.mkdir(parents=True, exist_ok=True)
    if si == ".json" and so == ".json":
        gio.write_poses(dst, gio.read_poses(src))
    elif si == ".ply" and so == ".ply":
        cloud, extras = gio.read_ply(src)
        gio.write_ply(dst, cloud, binary=not ascii, dtype="float" if float32 else "double", scalars=extras)
    elif si in (".obj", ".stl") and so in (".obj", ".stl"):
        gio.write_mesh(dst, gio.read_mesh(src))
    elif si in (".obj", ".stl") and so == ".ply":
        mesh = gio.read_mesh(src)
        gio.write_ply(dst, PointCloud(mesh.vertices), binary=not ascii, dtype="float" if float32 else "double")
    else:
        raise InvalidParameter(f"cannot convert {si or 'unknown'} to {so or 'unknown'}")
    return dst


def cmd_convert(a, scale):
    if not a.input or not a.output:
        raise ConfigError("convert needs an input and an output path", "input" if not a.input else "output")
    return [a.input], [convert(a.input, a.output, ascii=a.ascii, float32=a.float32)]


def cmd_report(a, scale):
    from .plots import render_report

    if not (a.registration_csv or a.metrics_csv or a.measure_json):
        raise ConfigError("report needs at least one of --registration-csv, --metrics-csv, --measure-json")
    inputs = [str(_need(p)) for p in (a.registration_csv, a.metrics_csv, a.measure_json) if p]
    made = render_report(a.out_dir, registration_csv=a.registration_csv, metrics_csv=a.metrics_csv,
                         measure_json=a.measure_json)
    return inputs, made


# --------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, seed: bool = False) -> None:
    p.add_argument("--config", help="YAML file with default values for this command's options")
    p.add_argument("--manifest", help="write a manifest (inputs hash, parameters, outputs) to this path")
    p.add_argument("--unit", choices=sorted(UNITS), default="m",
                   help="length unit of files and length flags; internal math is in meters")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="master random seed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pcfusion", description="Multiview point cloud registration and surface deviation metrics.")
    ap.add_argument("--version", action="version", version=f"pcfusion {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    ap.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    # synth
    sp = sub.add_parser("synth", help="generate synthetic shapes and meshes")
    ss = sp.add_subparsers(dest="what", metavar="WHAT", parser_class=_Parser)
    p = ss.add_parser("shape", help="reference / test cloud pair with a known 0.5 m offset")
    p.add_argument("--kind", choices=SHAPE_NAMES, default="plane", help="surface shape")
    p.add_argument("--noise-std", type=float, default=0.0, help="isotropic gaussian noise on the test cloud (m)")
    p.add_argument("--hole-radius", type=float, default=0.0, help="radius of the hole cut in the test cloud (m)")
    p.add_argument("--sampling-factor", type=float, default=0.0, help="fraction of test points removed, in [0, 1]")
    p.add_argument("--n-points", type=int, default=1000, help="surface samples before perturbation")
    p.add_argument("--segments", type=int, default=16, help="mesh resolution along x")
    p.add_argument("--out-dir", default=".", help="writes reference.ply, test.ply, reference.obj, meta.json")
    _common(p, seed=True)
    p.set_defaults(func=cmd_synth_shape, stage="synth")
    p = ss.add_parser("mesh", help="write a built-in mesh (bunny or a shape)")
    p.add_argument("--kind", choices=["bunny", *SHAPE_NAMES], default="bunny")
    p.add_argument("--resolution", type=float, default=0.002, help="bunny marching-cubes cell size (m)")
    p.add_argument("--segments", type=int, default=16, help="shape mesh resolution along x")
    p.add_argument("--out", default="mesh.obj", help="output .obj or .stl")
    _common(p)
    p.set_defaults(func=cmd_synth_mesh, stage="synth")

    # scan
    p = sub.add_parser("scan", help="ray-cast partial scans of a mesh from Poisson-disc viewpoints")
    p.add_argument("--mesh", default="bunny", help="mesh file (.obj/.stl) or built-in name")
    p.add_argument("--views", type=int, default=8, help="number of viewpoints")
    p.add_argument("--stride", type=int, default=4, help="pixel stride of the rendered image")
    p.add_argument("--perturb", type=_pair, default=(0.0, 0.0), metavar="LO,HI",
                   help="perturbation range: translation in mm and rotation in degrees")
    p.add_argument("--out-dir", default="scans",
                   help="writes scan_###.ply, gt_poses.json, perturbed_poses.json, mesh.obj")
    _common(p, seed=True)
    p.set_defaults(func=cmd_scan, stage="scan")

    # preprocess
    p = sub.add_parser("preprocess", help="crop and statistical outlier filter")
    p.add_argument("inputs", nargs="*", help="input .ply clouds (globs allowed)")
    p.add_argument("--crop", type=_box, metavar="X0,Y0,Z0,X1,Y1,Z1", help="keep points inside this box")
    p.add_argument("--outlier-k", type=int, default=20, help="neighbours for the outlier filter (0 disables)")
    p.add_argument("--std-ratio", type=float, default=2.0, help="outlier cutoff in standard deviations")
    p.add_argument("--voxel-size", type=float, help="optional voxel downsampling")
    p.add_argument("--normals-k", type=int, default=30, help="neighbours for normals when the input has none")
    p.add_argument("--out-dir", default="preprocessed", help="output directory (file names are kept)")
    _common(p)
    p.set_defaults(func=cmd_preprocess, stage="preprocess")

    # register
    p = sub.add_parser("register", help="multiview registration into one fused cloud")
    p.add_argument("scans", nargs="*", help="scan .ply files in capture order (globs allowed)")
    p.add_argument("--method", choices=METHOD_NAMES, default="refined-pose-graph")
    p.add_argument("--voxel-size", type=float, help="voxel size V (default: automatic from cloud size)")
    p.add_argument("--distance-mult", type=float, default=2.0,
                   help="max correspondence distance = V * M")
    p.add_argument("--prune-div", type=float, default=3.0, help="edge prune threshold = V / P")
    p.add_argument("--init", help="initial poses JSON (one 4x4 per scan)")
    p.add_argument("--normals-k", type=int, default=30, help="neighbours for normals when a scan has none")
    p.add_argument("--workers", type=int, default=1, help="threads for pairwise registration")
    p.add_argument("--out", default="fused.ply", help="fused cloud of all scans at the estimated poses")
    p.add_argument("--out-poses", default="est_poses.json", help="estimated per-scan poses")
    _common(p)
    p.set_defaults(func=cmd_register, stage="register")

    # measure
    p = sub.add_parser("measure", help="distance between a query cloud and a reference cloud or mesh")
    p.add_argument("--metric", choices=METRIC_NAMES, default="cloud-to-mesh")
    p.add_argument("--query", help="query cloud (.ply)")
    p.add_argument("--reference", help="reference cloud (.ply) or mesh (.obj/.stl)")
    p.add_argument("--k", type=int, help="neighbourhood size for the local surface metrics")
    p.add_argument("--squared", action="store_true", help="squared Chamfer distance")
    p.add_argument("--out", default="report.json", help="scalar, mean, std, histogram, flagged count")
    p.add_argument("--per-point", help="write the query cloud with a 'distance' field to this .ply")
    _common(p)
    p.set_defaults(func=cmd_measure, stage="measure")

    # eval
    sp = sub.add_parser("eval", help="benchmarks")
    es = sp.add_subparsers(dest="what", metavar="WHAT", parser_class=_Parser)
    p = es.add_parser("registration", help="transform error per perturbation range and method")
    p.add_argument("--mesh", default="bunny", help="mesh file or built-in name")
    p.add_argument("--ranges", type=_ranges, metavar="LO:HI,...",
                   default=TABLE1_RANGES, help="perturbation ranges in mm / deg")
    p.add_argument("--methods", default="all", help="comma list of methods or 'all'")
    p.add_argument("--reps", type=int, default=10, help="repetitions per range")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--out", default="table1.csv", help="result CSV")
    p.add_argument("--timings", help="optional CSV of wall-clock runtimes")
    _common(p, seed=True)
    p.set_defaults(func=cmd_eval_registration, stage="eval")
    p = es.add_parser("metrics", help="metric deviation across noise / hole / sampling sweeps")
    p.add_argument("--shapes", default="all", help="comma list of shapes or 'all'")
    p.add_argument("--sweeps", default=",".join(SWEEPS), help="comma list of noise, hole, sampling")
    p.add_argument("--metrics", default="all", help="comma list of metrics or 'all'")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--n-points", type=int, default=1000)
    p.add_argument("--out", default="fig4.csv", help="result CSV")
    p.add_argument("--timings", help="optional CSV of wall-clock runtimes")
    _common(p, seed=True)
    p.set_defaults(func=cmd_eval_metrics, stage="eval")

    # convert
    p = sub.add_parser("convert", help="convert between .ply, .obj, .stl and pose .json")
    p.add_argument("input", nargs="?", help=".ply, .obj, .stl or poses .json")
    p.add_argument("output", nargs="?", help="target file; its extension picks the format")
    p.add_argument("--ascii", action="store_true", help="ASCII PLY output")
    p.add_argument("--float32", action="store_true", help="single-precision PLY output")
    _common(p)
    p.set_defaults(func=cmd_convert, stage="convert")

    # report
    p = sub.add_parser("report", help="render figures from eval CSVs and measure reports")
    p.add_argument("--registration-csv")
    p.add_argument("--metrics-csv")
    p.add_argument("--measure-json")
    p.add_argument("--out-dir", default="figures")
    _common(p)
    p.set_defaults(func=cmd_report, stage="report")

    # pipeline
    p = sub.add_parser("run", help="run a pipeline config (YAML)")
    p.add_argument("pipeline", help="pipeline YAML")
    p.add_argument("--workdir", help="directory for relative paths (default: the config's directory)")
    p.add_argument("--seed", type=int, help="override the config's master seed")
    p.set_defaults(func=None, stage="run")
    p = sub.add_parser("replay", help="re-run a stage from its manifest")
    p.add_argument("manifest_path", metavar="MANIFEST")
    p.set_defaults(func=None, stage="replay")
    return ap


def _leaf(parser: argparse.ArgumentParser, words: Sequence[str]) -> argparse.ArgumentParser:
    for w in words:
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        parser = sub.choices[w]
    return parser


_SKIP = {"help", "config", "manifest"}


def _options(parser) -> list[argparse.Action]:
    return [a for a in parser._actions
            if a.dest not in _SKIP and not isinstance(a, (argparse._SubParsersAction, argparse._HelpAction))]


def command_schema(parser) -> dict:
    """JSON schema for a config block of one (leaf) command."""
    props = {}
    for a in _options(parser):
        if isinstance(a, argparse._StoreTrueAction):
            s = {"type": "boolean"}
        elif a.choices:
            s = {"enum": list(a.choices)}
        elif a.type is int:
            s = {"type": "integer"}
        elif a.type is float:
            s = {"type": "number"}
        elif a.type in (_pair, _box):
            s = {"anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "number"}}]}
        elif a.type is _ranges:
            s = {"anyOf": [{"type": "string"},
                           {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                       "minItems": 2, "maxItems": 2}}]}
        elif a.dest in ("methods", "metrics", "shapes", "sweeps"):
            universe = {"methods": METHOD_NAMES, "metrics": METRIC_NAMES,
                        "shapes": SHAPE_NAMES, "sweeps": list(SWEEPS)}[a.dest]
            s = {"anyOf": [{"type": "string", "pattern": r"^(all|[a-z\-]+(,[a-z\-]+)*)$"},
                           {"type": "array", "items": {"enum": ["all", *universe]}}]}
        else:
            s = {"type": "string"}
        if a.nargs == "*":
            s = {"anyOf": [s, {"type": "array", "items": s}]}
        if a.default is None and not a.choices:
            s = {"anyOf": [s, {"type": "null"}]}
        props[a.dest] = s
    return {"type": "object", "properties": props, "additionalProperties": False}


def _normalise_keys(block: dict) -> dict:
    return {str(k).replace("-", "_"): v for k, v in (block or {}).items()}


def _validate(block: dict, schema: dict, where: str) -> None:
    errors = sorted(Draft7Validator(schema).iter_errors(block), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        path = ".".join([where, *map(str, e.absolute_path)]) if where else ".".join(map(str, e.absolute_path))
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            path = ".".join(p for p in (path, extra[0] if extra else "") if p)
            raise ConfigError("unknown option", path)
        raise ConfigError(f"invalid value: {e.message}", path)


def _coerce(parser, block: dict) -> dict:
    """Apply each option's type converter to config-file values."""
    actions = {a.dest: a for a in _options(parser)}
    out = {}
    for k, v in block.items():
        a = actions[k]
        if v is not None and a.type in (_pair, _box, _ranges):
            try:
                v = a.type(v)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for '{k}': {exc}", k)
        elif v is not None and a.type is float:
            v = float(v)
        out[k] = v
    return out


def _explicit(parser, argv_tail: Sequence[str]) -> set[str]:
    """Dests given on the command line (as opposed to defaults)."""
    shadow = copy.deepcopy(parser)
    for a in shadow._actions:
        a.default = argparse.SUPPRESS
    ns, _ = shadow.parse_known_args(argv_tail)
    return set(vars(ns))


def _path_keys(stage: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(input keys, output keys) holding paths, per leaf command."""
    return {
        "synth shape": ((), ("out_dir",)),
        "synth mesh": ((), ("out",)),
        "scan": (("mesh",), ("out_dir",)),
        "preprocess": (("inputs",), ("out_dir",)),
        "register": (("scans", "init"), ("out", "out_poses")),
        "measure": (("query", "reference"), ("out", "per_point")),
        "eval registration": (("mesh",), ("out", "timings")),
        "eval metrics": ((), ("out", "timings")),
        "convert": (("input",), ("output",)),
        "report": (("registration_csv", "metrics_csv", "measure_json"), ("out_dir",)),
    }[stage]


def _files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += sorted(q for q in p.rglob("*") if q.is_file())
        elif p.exists():
            out.append(p)
    return out


def _manifest(name: str, params: dict, inputs, outputs, runtime: float, base: Optional[Path] = None) -> dict:
    def rel(p: Path) -> str:
        if base is not None:
            try:
                return str(Path(p).resolve().relative_to(base.resolve()))
            except ValueError:
                pass
        return str(p)

    return {
        "tool": f"pcfusion {__version__}",
        "command": name,
        "params": {k: v for k, v in sorted(params.items())},
        "inputs": {rel(p): sha256(p) for p in _files(inputs)},
        "outputs": {rel(p): sha256(p) for p in _files(outputs)},
        "timing": {"started_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                   "runtime_s": round(runtime, 3)},
    }


def _params(ns: argparse.Namespace, parser) -> dict:
    keep = {a.dest for a in _options(parser)}
    out = {}
    for k in sorted(keep):
        v = getattr(ns, k, None)
        if isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[k] = v
    return out


def execute(words: Sequence[str], parser, ns: argparse.Namespace, base: Optional[Path] = None) -> dict:
    """Run one leaf command; returns its manifest."""
    scale = UNITS[getattr(ns, "unit", "m")]
    t0 = time.perf_counter()
    inputs, outputs = ns.func(ns, scale)
    manifest = _manifest(" ".join(words), _params(ns, parser), inputs, outputs, time.perf_counter() - t0, base)
    if getattr(ns, "manifest", None):
        _write_json(ns.manifest, manifest)
    return manifest


def _command_words(argv: Sequence[str], root) -> list[str]:
    words, parser = [], root
    for tok in argv:
        subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
        if not subs:
            break
        if tok in subs[0].choices:
            words.append(tok)
            parser = subs[0].choices[tok]
    return words


def _namespace_for(words: Sequence[str], block: dict, root=None) -> tuple[argparse.Namespace, argparse.ArgumentParser]:
    """Defaults of a leaf command overlaid with a (validated) config block."""
    root = root or build_parser()
    leaf = _leaf(root, words)
    block = _normalise_keys(block)
    _validate(block, command_schema(leaf), "")
    ns = root.parse_args(list(words))
    for k, v in _coerce(leaf, block).items():
        setattr(ns, k, v)
    return ns, leaf


# --------------------------------------------------------------------------- pipeline

def pipeline_schema() -> dict:
    root = build_parser()
    stage_schemas = {
        "synth": command_schema(_leaf(root, ["synth", "shape"])),
        "scan": command_schema(_leaf(root, ["scan"])),
        "preprocess": command_schema(_leaf(root, ["preprocess"])),
        "register": command_schema(_leaf(root, ["register"])),
        "measure": command_schema(_leaf(root, ["measure"])),
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "registration": command_schema(_leaf(root, ["eval", "registration"])),
            "metrics": command_schema(_leaf(root, ["eval", "metrics"])),
        }},
    }
    for s in stage_schemas.values():
        s["properties"].pop("unit", None)
    stage_item = {"type": "object", "minProperties": 1, "maxProperties": 1,
                  "properties": stage_schemas, "additionalProperties": False}
    return {
        "type": "object",
        "required": ["stages"],
        "additionalProperties": False,
        "properties": {
            "seed": {"type": "integer"},
            "unit": {"enum": sorted(UNITS)},
            "workdir": {"type": "string"},
            "stages": {"type": "array", "minItems": 1, "items": stage_item},
        },
    }


def load_pipeline(path) -> dict:
    text = _need(path, "pipeline config").read_text()
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML in {path}: {exc}", f"line {mark.line + 1}" if mark else "")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path} must hold a mapping", "")
    return cfg


def _normalise_pipeline(cfg: dict) -> dict:
    cfg = dict(cfg)
    stages = []
    for item in cfg.get("stages") or []:
        if not isinstance(item, dict):
            stages.append(item)
            continue
        norm = {}
        for name, block in item.items():
            if name == "eval" and isinstance(block, dict):
                norm[name] = {k: _normalise_keys(v) for k, v in block.items()}
            else:
                norm[name] = _normalise_keys(block) if isinstance(block, dict) or block is None else block
        stages.append(norm)
    cfg["stages"] = stages
    return cfg


def _check_order(stages: list[dict]) -> None:
    rank = {"synth": 0, "scan": 0, "preprocess": 1, "register": 2, "measure": 3, "eval": 4}
    last = -1
    for k, item in enumerate(stages):
        name = next(iter(item))
        if rank[name] < last:
            raise ConfigError(f"stage '{name}' is out of order (synth|scan -> preprocess -> register -> "
                              "measure -> eval)", f"stages.{k}")
        last = rank[name]


def _resolve(ns, stage: str, base: Path) -> None:
    ins, outs = _path_keys(stage)
    for key in (*ins, *outs):
        v = getattr(ns, key, None)
        if v is None:
            continue
        if key == "mesh" and v in BUILTIN_MESHES:
            continue
        if isinstance(v, list):
            setattr(ns, key, [str(base / p) for p in v])
        else:
            setattr(ns, key, str(base / v))


def run_pipeline(config, workdir=None, seed: Optional[int] = None) -> list[dict]:
    """Validate and execute a pipeline config; returns the stage manifests.

    ``config`` is a mapping or a YAML path. Stage manifests land in
    ``<workdir>/manifests``. A failing stage raises with its name attached.
    """
    base_default = Path(".")
    if not isinstance(config, dict):
        base_default = Path(config).resolve().parent
        config = load_pipeline(config)
    cfg = _normalise_pipeline(config)
    _validate(cfg, pipeline_schema(), "")
    _check_order(cfg["stages"])
    base = Path(workdir or cfg.get("workdir") or base_default)
    if cfg.get("workdir") and workdir is None and not Path(cfg["workdir"]).is_absolute():
        base = base_default / cfg["workdir"]
    base.mkdir(parents=True, exist_ok=True)
    master = cfg.get("seed", 0) if seed is None else seed
    unit = cfg.get("unit", "m")
    root = build_parser()

    jobs = []
    for k, item in enumerate(cfg["stages"]):
        name, block = next(iter(item.items()))
        if name == "eval":
            jobs += [(k, ["eval", what], sub) for what, sub in (block or {}).items()]
        elif name == "synth":
            jobs.append((k, ["synth", "shape"], block))
        else:
            jobs.append((k, [name], block))

    manifests = []
    for n, (k, words, block) in enumerate(jobs):
        label = " ".join(words)
        block = dict(block or {})
        try:
            ns, leaf = _namespace_for(words, block, root)
        except ConfigError as exc:
            raise ConfigError(f"stage '{label}': {exc}", f"stages.{k}.{exc.field}".rstrip(".")) from exc
        if hasattr(ns, "seed") and "seed" not in block:
            ns.seed = cell_seed(master, k)
        ns.unit = unit
        ns.manifest = None
        _resolve(ns, label, base)
        logger.info("stage %d: %s", n, label)
        try:
            for key in _path_keys(label)[0]:
                v = getattr(ns, key, None)
                if v is None or (key == "mesh" and v in BUILTIN_MESHES):
                    continue
                if isinstance(v, list):
                    _expand(v)
                else:
                    _need(v, f"stage '{label}' input")
            m = execute(words, leaf, ns, base)
        except PcFusionError as exc:
            exc.args = (f"stage '{label}' failed: {exc}",) + exc.args[1:]
            exc.stage = label
            raise
        mpath = base / "manifests" / f"{n:02d}_{label.replace(' ', '_')}.json"
        _write_json(mpath, m)
        manifests.append(m)
    return manifests


def replay(manifest_path) -> dict:
    doc = json.loads(_need(manifest_path, "manifest").read_text())
    words = doc["command"].split()
    ns, leaf = _namespace_for(words, doc["params"])
    ns.manifest = None
    return execute(words, leaf, ns)


# --------------------------------------------------------------------------- main

def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else (logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg = logging.getLogger("pcfusion")
    pkg.handlers[:] = [handler]
    pkg.setLevel(level)
    pkg.propagate = False


def _run(argv: Sequence[str]) -> int:
    root = build_parser()
    ns = root.parse_args(argv)
    _setup_logging(ns.verbose, ns.quiet)
    if ns.command is None:
        root.print_help(sys.stderr)
        return EXIT_USER
    words = _command_words(argv, root)
    leaf = _leaf(root, words)
    if ns.stage == "run":
        for m in run_pipeline(ns.pipeline, ns.workdir, ns.seed):
            logger.info("%s: %d outputs", m["command"], len(m["outputs"]))
        return EXIT_OK
    if ns.stage == "replay":
        replay(ns.manifest_path)
        return EXIT_OK
    if getattr(ns, "func", None) is None:
        leaf.print_help(sys.stderr)
        return EXIT_USER
    if ns.config:
        block = _normalise_keys(yaml.safe_load(_need(ns.config, "config").read_text()) or {})
        _validate(block, command_schema(leaf), "")
        tail = argv[argv.index(words[-1]) + 1:]
        given = _explicit(leaf, tail)
        for k, v in _coerce(leaf, block).items():
            if k not in given:
                setattr(ns, k, v)
    execute(words, leaf, ns)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except (*USER_ERRORS, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except PcFusionError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
