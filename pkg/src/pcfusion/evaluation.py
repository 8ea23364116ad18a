"""Benchmarks: transform error across registration methods and perturbation
ranges, and metric deviation across noise / hole / sampling sweeps.

Every cell draws its randomness from ``SeedSequence(seed, spawn_key=cell)``,
so rows do not depend on execution order. Result CSVs hold only
deterministic values; wall-clock timings go to a separate timing table.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateOutput, InvalidParameter, PcFusionError, SizeMismatch
from .geometry import se3
from .geometry.types import RigidTransform, TriangleMesh
from .metrics import MetricKind, compute_metric
from .registration.multiview import MultiviewMethod, run_multiview
from .registration.posegraph import PoseGraphParams
from .scanner import ScanSet, perturb_poses, simulate_scans
from .shapes import GT_OFFSET, PerturbationSpec, ShapeKind, make_bunny_mesh, make_metric_pair

logger = logging.getLogger(__name__)

TABLE1_RANGES = ((0.0, 1.0), (1.0, 3.0), (3.0, 6.0), (6.0, 10.0), (10.0, 15.0))
NOISE_LEVELS = (0.01, 0.025, 0.05, 0.075, 0.1)
HOLE_RADII = (0.1, 0.25, 0.5, 0.75, 1.0)
SAMPLING_FACTORS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
SWEEPS = ("noise", "hole", "sampling")


@dataclass(frozen=True)
class TransformError:
    per_scan: list[float]
    mean_abs: float
    rotation_deg: float
    translation_m: float


def gauge_fix(poses: Sequence[RigidTransform]) -> list[RigidTransform]:
    inv0 = poses[0].inverse()
    return [inv0 @ T for T in poses]


def transform_error(gt: Sequence[RigidTransform], est: Sequence[RigidTransform], unit: str = "m") -> TransformError:
    """Elementwise mean absolute difference of gauge-fixed 4x4 poses.

    ``per_scan`` covers every scan (entry 0 is zero by construction); the
    summaries average over scans 1..n-1. With ``unit="mm"`` translation
    entries are compared in millimetres; ``translation_m`` stays in meters.
    """
    if len(gt) != len(est):
        raise SizeMismatch(f"{len(gt)} ground-truth poses vs {len(est)} estimates")
    if unit not in ("m", "mm"):
        raise InvalidParameter("unit must be 'm' or 'mm'")
    if len(gt) == 0:
        return TransformError([], 0.0, 0.0, 0.0)
    scale = 1000.0 if unit == "mm" else 1.0
    G, E = gauge_fix(gt), gauge_fix(est)
    per_scan, rot, trans = [], [], []
    for g, e in zip(G, E):
        a, b = g.matrix.copy(), e.matrix.copy()
        a[:3, 3] *= scale
        b[:3, 3] *= scale
        per_scan.append(float(np.mean(np.abs(a - b))))
        rot.append(np.degrees(se3.rotation_angle(g.R.T @ e.R)))
        trans.append(float(np.linalg.norm(g.t - e.t)))
    if len(gt) == 1:
        return TransformError(per_scan, 0.0, 0.0, 0.0)
    return TransformError(per_scan, float(np.mean(per_scan[1:])), float(np.mean(rot[1:])),
                          float(np.mean(trans[1:])))


@dataclass(frozen=True)
class ExperimentSpec:
    """One benchmark: ``scenario`` is ``"registration"`` or ``"metrics"``.

    Registration uses ``methods``, ``ranges`` (mm and degrees share one
    interval), ``n_views`` and ``stride``; metrics uses ``methods`` as metric
    names together with ``shapes`` and ``sweeps``.
    """

    scenario: str
    methods: tuple[str, ...] = ()
    ranges: tuple[tuple[float, float], ...] = TABLE1_RANGES
    repetitions: int = 10
    seed: int = 0
    n_views: int = 8
    stride: int = 4
    unit: str = "m"
    shapes: tuple[str, ...] = tuple(k.value for k in ShapeKind)
    sweeps: tuple[str, ...] = SWEEPS
    noise_levels: tuple[float, ...] = NOISE_LEVELS
    hole_radii: tuple[float, ...] = HOLE_RADII
    sampling_factors: tuple[float, ...] = SAMPLING_FACTORS
    n_points: int = 1000
    params: PoseGraphParams = field(default_factory=PoseGraphParams)

    def __post_init__(self):
        if self.scenario not in ("registration", "metrics"):
            raise InvalidParameter(f"unknown scenario '{self.scenario}'")
        if self.repetitions < 1:
            raise InvalidParameter("repetitions must be >= 1")
        for lo, hi in self.ranges:
            if not 0 <= lo <= hi:
                raise InvalidParameter(f"bad perturbation range [{lo}, {hi}]")
        for s in self.sweeps:
            if s not in SWEEPS:
                raise InvalidParameter(f"unknown sweep '{s}'")
        if not self.methods:
            default = [m.value for m in MultiviewMethod] if self.scenario == "registration" \
                else [m.value for m in MetricKind]
            object.__setattr__(self, "methods", tuple(default))

    def sweep_values(self, sweep: str) -> tuple[float, ...]:
        return {"noise": self.noise_levels, "hole": self.hole_radii, "sampling": self.sampling_factors}[sweep]


def cell_seed(master: int, *key: int) -> int:
    """Independent 63-bit seed for a benchmark cell."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _fmt_range(r) -> str:
    return f"{r[0]:g}:{r[1]:g}"


@dataclass
class BenchmarkResult:
    rows: list[dict]
    columns: list[str]
    timings: list[dict] = field(default_factory=list)
    timing_columns: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        return _csv(self.rows, self.columns)

    def timings_csv(self) -> str:
        return _csv(self.timings, self.timing_columns)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return v


REGISTRATION_COLUMNS = ["range", "method", "repetition", "seed", "status",
                        "mean_abs", "rotation_deg", "translation_m"]


def run_registration_benchmark(
    spec: ExperimentSpec,
    mesh: Optional[TriangleMesh] = None,
    scans: Optional[ScanSet] = None,
) -> BenchmarkResult:
    """Perturb, register and score every (range, repetition, method) cell.

    The scan set is rendered once (from ``spec.seed``) and shared by all cells;
    each (range, repetition) draws its own perturbation. A failed registration
    becomes a row with ``status`` naming the error.
    """
    if spec.scenario != "registration":
        raise InvalidParameter("spec is not a registration benchmark")
    methods = [MultiviewMethod.parse(m) for m in spec.methods]
    if scans is None:
        mesh = mesh if mesh is not None else make_bunny_mesh()
        scans = simulate_scans(mesh, spec.n_views, stride=spec.stride, seed=spec.seed)
    rows, timings = [], []
    for ri, rg in enumerate(spec.ranges):
        for rep in range(spec.repetitions):
            seed = cell_seed(spec.seed, ri, rep)
            perturbed = perturb_poses(scans, rg, rg, seed=seed)
            for method in methods:
                row = {"range": _fmt_range(rg), "method": method.value, "repetition": rep, "seed": seed}
                t0 = time.perf_counter()
                try:
                    res = run_multiview(perturbed.clouds, perturbed.perturbed_poses, method, spec.params)
                    err = transform_error(perturbed.gt_poses, res.poses, spec.unit)
                    row.update(status="ok", mean_abs=err.mean_abs, rotation_deg=err.rotation_deg,
                               translation_m=err.translation_m)
                except PcFusionError as exc:
                    row.update(status=type(exc).__name__, mean_abs=float("nan"), rotation_deg=float("nan"),
                               translation_m=float("nan"))
                runtime = time.perf_counter() - t0
                rows.append(row)
                timings.append({**{k: row[k] for k in ("range", "method", "repetition", "seed")},
                                "runtime_s": runtime})
                logger.info("range %s rep %d %s: %s (%.1fs)", row["range"], rep, method.value,
                            row.get("mean_abs"), runtime)
    return BenchmarkResult(rows, REGISTRATION_COLUMNS, timings,
                           ["range", "method", "repetition", "seed", "runtime_s"])


def summarize(rows: Iterable[dict], keys: Sequence[str], value: str) -> dict[tuple, float]:
    """Mean of ``value`` over rows grouped by ``keys`` (NaN and missing values skipped)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        v = r.get(value)
        if isinstance(v, float) and np.isfinite(v):
            groups.setdefault(tuple(r[k] for k in keys), []).append(v)
    return {k: float(np.mean(v)) for k, v in groups.items()}


METRIC_COLUMNS = ["shape", "metric", "sweep", "value", "deviation", "deviation_std", "n_valid", "n_missing"]


def _pair_for(shape: ShapeKind, sweep: str, value: float, seed: int, n_points: int):
    kw = {"noise": "noise_std", "hole": "hole_radius", "sampling": "sampling_factor"}[sweep]
    return make_metric_pair(shape, PerturbationSpec(**{kw: value, "rng_seed": seed}), n_points)


def run_metric_benchmark(spec: ExperimentSpec) -> BenchmarkResult:
    """Per (shape, sweep, value, metric): mean and std of ``|estimate - 0.5|`` over repetitions.

    All metrics of one repetition see the same perturbed pair. Degenerate
    cells (too few points left, size mismatch for EMD, ...) count as missing.
    """
    if spec.scenario != "metrics":
        raise InvalidParameter("spec is not a metric benchmark")
    shapes = [ShapeKind.parse(s) for s in spec.shapes]
    metrics = [MetricKind.parse(m) for m in spec.methods]
    rows, timings = [], []
    for si, shape in enumerate(ShapeKind):
        if shape not in shapes:
            continue
        for wi, sweep in enumerate(SWEEPS):
            if sweep not in spec.sweeps:
                continue
            for vi, value in enumerate(spec.sweep_values(sweep)):
                devs: dict[MetricKind, list[float]] = {m: [] for m in metrics}
                missing = {m: 0 for m in metrics}
                elapsed = {m: 0.0 for m in metrics}
                for rep in range(spec.repetitions):
                    seed = cell_seed(spec.seed, si, wi, vi, rep)
                    try:
                        pair = _pair_for(shape, sweep, value, seed, spec.n_points)
                    except DegenerateOutput:
                        for m in metrics:
                            missing[m] += 1
                        continue
                    for m in metrics:
                        t0 = time.perf_counter()
                        try:
                            ref = pair.mesh if m.needs_mesh else pair.reference
                            est = compute_metric(m, pair.test, ref).scalar
                        except PcFusionError:
                            est = float("nan")
                        elapsed[m] += time.perf_counter() - t0
                        if np.isfinite(est):
                            devs[m].append(abs(est - GT_OFFSET))
                        else:
                            missing[m] += 1
                for m in metrics:
                    d = np.asarray(devs[m])
                    rows.append({
                        "shape": shape.value, "metric": m.value, "sweep": sweep, "value": float(value),
                        "deviation": float(d.mean()) if len(d) else float("nan"),
                        "deviation_std": float(d.std(ddof=1)) if len(d) > 1 else float("nan"),
                        "n_valid": int(len(d)), "n_missing": int(missing[m]),
                    })
                    timings.append({"shape": shape.value, "metric": m.value, "sweep": sweep,
                                    "value": float(value), "runtime_s": elapsed[m]})
    return BenchmarkResult(rows, METRIC_COLUMNS, timings, ["shape", "metric", "sweep", "value", "runtime_s"])


def metric_table(rows: Iterable[dict]) -> dict[tuple[str, str, str, float], float]:
    """``(shape, metric, sweep, value) -> deviation`` lookup."""
    return {(r["shape"], r["metric"], r["sweep"], r["value"]): r["deviation"] for r in rows}
