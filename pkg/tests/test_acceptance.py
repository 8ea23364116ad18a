"""Acceptance criteria, one PASS/FAIL line per criterion in the terminal summary.

Criteria that this implementation does not meet are marked ``xfail(strict=True)``
with the measured reason; they still record a FAIL line.
"""
import json
import time

import numpy as np
import pytest
import yaml

from conftest import record
from pcfusion.cli import main
from pcfusion.evaluation import (
    GT_OFFSET,
    ExperimentSpec,
    metric_table,
    run_metric_benchmark,
    run_registration_benchmark,
    summarize,
)
from pcfusion.geometry.bvh import Bvh, closest_point_on_triangle
from pcfusion.geometry.kdtree import KdTree
from pcfusion.geometry.types import PointCloud, RigidTransform
from pcfusion.metrics import MetricKind, compute_metric, earth_movers
from pcfusion.registration.icp import IcpMethod
from pcfusion.registration.posegraph import (
    Edge,
    EdgeKind,
    Node,
    PoseGraph,
    PoseGraphParams,
    build_pose_graph,
    chain_poses,
    optimize_pose_graph_full,
)
from pcfusion.shapes import PerturbationSpec, ShapeKind, make_metric_pair

from oracles import brute_knn, brute_raycast, exhaustive_emd, rigid, triangle_distance_by_sampling
from test_icp import wall
from test_scanner import sphere_mesh

METHODS = ("global-icp", "pose-graph", "refined-pose-graph")
SHAPES = [k.value for k in ShapeKind]
METRICS = [m.value for m in MetricKind]


# --------------------------------------------------------------------------- C1 registration ordering

@pytest.fixture(scope="module")
def table1():
    t0 = time.perf_counter()
    res = run_registration_benchmark(ExperimentSpec("registration", repetitions=10, n_views=8, stride=4, seed=0))
    runtime = time.perf_counter() - t0
    means = summarize(res.rows, ["range", "method"], "mean_abs")
    failed = sum(r["status"] != "ok" for r in res.rows)
    return means, runtime, failed


def _ranges(means):
    return sorted({k[0] for k in means}, key=lambda r: float(r.split(":")[0]))


@pytest.mark.slow
def test_c1_refined_lowest_in_every_range(table1):
    means, _, failed = table1
    detail = []
    ok = True
    for rng in _ranges(means):
        vals = [means.get((rng, m), np.nan) for m in METHODS]
        ok &= bool(vals[2] < vals[0] and vals[2] < vals[1])
        detail.append(f"{rng} " + "/".join(f"{v:.2e}" for v in vals))
    record("C1", "refined lowest", ok, "; ".join(detail) + f"; failed cells {failed}")
    assert ok


@pytest.mark.slow
def test_c1_gap_at_largest_range(table1):
    means, _, _ = table1
    rng = _ranges(means)[-1]
    gap = min(means[(rng, "global-icp")], means[(rng, "pose-graph")]) / means[(rng, "refined-pose-graph")]
    assert record("C1", "gap >= 5x at " + rng, gap >= 5.0, f"{gap:.1f}x")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="8 views x 5 ranges x 10 reps x 3 methods measured 1186 s on one core; "
                   "half of it is KD-tree correspondence search already gated by the ICP distance")
def test_c1_runtime(table1):
    _, runtime, _ = table1
    assert record("C1", "runtime < 600 s", runtime < 600.0, f"{runtime:.0f} s")


# --------------------------------------------------------------------------- C2 zero perturbation

@pytest.fixture(scope="module")
def zero_range():
    t0 = time.perf_counter()
    res = run_registration_benchmark(ExperimentSpec("registration", ranges=((0.0, 0.0),), repetitions=1,
                                                    n_views=8, stride=4, seed=0))
    return {r["method"]: r for r in res.rows}, time.perf_counter() - t0


P2PLANE_BIAS = ("point-to-plane ICP started at ground truth settles 4e-5 (pose graph) to 5.5e-5 (global) "
                "away from it on rendered scans; only the generalized variant reaches 1e-6")


@pytest.mark.parametrize("method", [
    pytest.param("global-icp", marks=pytest.mark.xfail(strict=True, reason=P2PLANE_BIAS)),
    pytest.param("pose-graph", marks=pytest.mark.xfail(strict=True, reason=P2PLANE_BIAS)),
    "refined-pose-graph",
])
def test_c2_zero_perturbation_exact(zero_range, method):
    rows, _ = zero_range
    err = rows[method]["mean_abs"]
    assert record("C2", method, rows[method]["status"] == "ok" and err < 1e-6, f"{err:.2e}")


def test_c2_runtime(zero_range):
    _, runtime = zero_range
    assert record("C2", "runtime < 30 s", runtime < 30.0, f"{runtime:.1f} s")


# --------------------------------------------------------------------------- C3 plane fixture

def test_c3_plane_fixture_exact():
    t0 = time.perf_counter()
    pair = make_metric_pair(ShapeKind.PLANE, PerturbationSpec(rng_seed=0), n_points=1000)
    ok = True
    detail = []
    for m in MetricKind:
        ref = pair.mesh if m.needs_mesh else pair.reference
        val = compute_metric(m, pair.test, ref).scalar
        tol = 1e-7 if m is MetricKind.PLANE_QUADRATIC else 1e-9
        ok &= abs(val - GT_OFFSET) <= tol
        detail.append(f"{m.value} {abs(val - GT_OFFSET):.1e}")
    runtime = time.perf_counter() - t0
    record("C3", "all metrics 0.5", ok, ", ".join(detail))
    record("C3", "runtime < 10 s", runtime < 10.0, f"{runtime:.1f} s")
    assert ok and runtime < 10.0


# --------------------------------------------------------------------------- C4 metric sweep claims

@pytest.fixture(scope="module")
def fig4():
    t0 = time.perf_counter()
    res = run_metric_benchmark(ExperimentSpec("metrics", repetitions=10, seed=0))
    return metric_table(res.rows), time.perf_counter() - t0


@pytest.mark.slow
def test_c4_runtime(fig4):
    _, runtime = fig4
    assert record("C4", "runtime < 300 s", runtime < 300.0, f"{runtime:.0f} s")


@pytest.mark.slow
@pytest.mark.parametrize("shape", SHAPES)
def test_c4a_hausdorff_above_chamfer_at_high_noise(fig4, shape):
    t, _ = fig4
    h, c = t[(shape, "hausdorff", "noise", 0.1)], t[(shape, "chamfer", "noise", 0.1)]
    assert record("C4", f"(a) {shape}", h > c, f"hausdorff {h:.4f} > chamfer {c:.4f}")


C4B_XFAIL = {
    ("sine", "hole"): "cutting a 0.5 m hole removes the crests nearest the lifted surface; "
                      "the deviation drops from 0.0670 to 0.0559, a 0.0111 m spread",
}


@pytest.mark.slow
@pytest.mark.parametrize("sweep,limit", [("sampling", 0.9), ("hole", 0.5)])
@pytest.mark.parametrize("shape", SHAPES)
def test_c4b_cloud_to_mesh_band(fig4, shape, sweep, limit, request):
    # curved shapes sit below 0.5 even unperturbed (nearest-surface distance),
    # so the band is the spread of the deviation across the sweep
    if (shape, sweep) in C4B_XFAIL:
        request.applymarker(pytest.mark.xfail(strict=True, reason=C4B_XFAIL[shape, sweep]))
    t, _ = fig4
    vals = [v for (s, m, w, x), v in t.items() if s == shape and m == "cloud-to-mesh" and w == sweep and x <= limit]
    spread = max(vals) - min(vals)
    ok = len(vals) > 1 and bool(np.all(np.isfinite(vals))) and spread <= 0.01
    assert record("C4", f"(b) {shape} {sweep}", ok,
                  f"{min(vals):.4f}..{max(vals):.4f}, spread {spread:.4f} m over {len(vals)} values")


C4C_XFAIL = {
    "hausdorff": "the maximum comes from the noise tail; on the triangular wave the nearest reference "
                 "point is closer than 0.5 m, which offsets it, so triangular 0.141 < plane 0.167",
}


@pytest.mark.slow
@pytest.mark.parametrize("metric", METRICS)
def test_c4c_triangular_at_least_plane(fig4, metric, request):
    if metric in C4C_XFAIL:
        request.applymarker(pytest.mark.xfail(strict=True, reason=C4C_XFAIL[metric]))
    t, _ = fig4
    tri, pl = t[("triangular", metric, "noise", 0.05)], t[("plane", metric, "noise", 0.05)]
    assert record("C4", f"(c) {metric}", tri >= pl, f"triangular {tri:.4f} vs plane {pl:.4f}")


# --------------------------------------------------------------------------- C5 thin wall

def _cross_side_fractions(method):
    a, b = wall(1), wall(2)
    # a 5 mm coarse voxel would fuse both sides of a 3 mm wall, so only the fine pass runs
    params = PoseGraphParams(method=method, coarse_stages=())
    fractions = []

    def cb(i, j, stage, it, si, tj, T):
        # j is registered onto i; a side is the sheet a point was sampled on
        fractions.append(np.mean((b.points[si, 2] > 0.0015) != (a.points[tj, 2] > 0.0015)))

    build_pose_graph([a, b], [RigidTransform.identity(), RigidTransform.from_translation([0, 0, 0.0015])],
                     params, callback=cb)
    return fractions


def test_c5_thin_wall():
    p2pl = _cross_side_fractions(IcpMethod.POINT_TO_PLANE)
    gicp = _cross_side_fractions(IcpMethod.GENERALIZED)
    ok_a = record("C5", "point-to-plane >= 10% cross-side", max(p2pl) >= 0.10, f"max {max(p2pl):.2f}")
    ok_b = record("C5", "generalized 0 cross-side", max(gicp) == 0.0, f"max {max(gicp):.2f} over {len(gicp)} its")
    assert ok_a and ok_b


# --------------------------------------------------------------------------- C6 oracle suite

def test_c6_oracle_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)

    kd_ok = True
    for _ in range(100):
        pts = rng.normal(size=(int(rng.integers(1, 2000)), 3))
        q = rng.normal(size=(50, 3))
        k = int(rng.integers(1, 9))
        d, i = KdTree(pts).knn(q, k)
        bd, bi = brute_knn(pts, q, min(k, len(pts)))
        kd_ok &= np.array_equal(i, bi) and np.allclose(d, bd, rtol=0, atol=1e-12)
    record("C6", "kd-tree 100 clouds", kd_ok)

    sphere = sphere_mesh(200)
    origins = rng.normal(size=(1000, 3)) * 0.05 + [0, 0, -0.4]
    dirs = rng.normal(size=(1000, 3)) * 0.06 - origins
    t, tri = Bvh(sphere).raycast(origins, dirs, t_min=1e-9)
    bt, btri = brute_raycast(sphere.vertices, sphere.triangles, origins, dirs, 1e-9)
    hit = np.isfinite(bt)
    same = np.array_equal(tri >= 0, hit) and np.allclose(t[hit], bt[hit], rtol=0, atol=1e-9)
    # a ray through a shared edge may report either neighbour at the same t
    ids = np.mean(tri[hit] == btri[hit])
    record("C6", "bvh 1000 rays", same and ids > 0.99, f"{hit.sum()} hits, ids agree {ids:.3f}")

    emd_ok = True
    for n in range(1, 8):
        for _ in range(5):
            a, b = rng.random((n, 3)), rng.random((n, 3))
            emd_ok &= abs(earth_movers(PointCloud(a), PointCloud(b)).scalar - exhaustive_emd(a, b)) <= 1e-9
    record("C6", "emd n<=7", emd_ok)

    tri_ok = True
    for _ in range(100):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        d = np.linalg.norm(p - closest_point_on_triangle(p, a, b, c))
        ref, h = triangle_distance_by_sampling(p, a, b, c)
        tri_ok &= d <= ref + 1e-9 and ref - d <= h
    record("C6", "point-triangle 100 pairs", tri_ok)

    runtime = time.perf_counter() - t0
    record("C6", "runtime < 120 s", runtime < 120.0, f"{runtime:.1f} s")
    assert kd_ok and same and ids > 0.99 and emd_ok and tri_ok and runtime < 120.0


# --------------------------------------------------------------------------- C7 pose graph robustness

def test_c7_corrupted_loop_closure_pruned():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    poses = [np.eye(4)] + [rigid(rng.normal(size=3), rng.uniform(-0.5, 0.5), rng.normal(scale=0.1, size=3))
                           for _ in range(7)]
    pairs = [(i, i + 1) for i in range(7)] + [(i, i + 2) for i in range(6)] + [(0, 7)]

    def graph(corrupt):
        edges = []
        for i, j in pairs:
            if (i, j) == (0, 7) and not corrupt:
                continue
            Z = np.linalg.inv(poses[i]) @ poses[j]
            if (i, j) == (0, 7):
                Z = Z @ rigid([1, 0, 0], 0.0, [1.0, 0, 0])
            kind = EdgeKind.ODOMETRY if j == i + 1 else EdgeKind.LOOP_CLOSURE
            edges.append(Edge(i, j, RigidTransform(Z), 1e4 * np.eye(6), kind, n_correspondences=1000))
        start = chain_poses(edges, 8)
        return PoseGraph([Node(k, P) for k, P in enumerate(start)], edges, 0.001)

    bad = optimize_pose_graph_full(graph(True), 0.001 / 3)
    clean = optimize_pose_graph_full(graph(False), 0.001 / 3)
    dev = max(np.abs(a.matrix - b.matrix).max() for a, b in zip(bad.poses, clean.poses))
    runtime = time.perf_counter() - t0
    ok = (0, 7) in bad.pruned and dev < 1e-6 and runtime < 10.0
    record("C7", "pruned and matches clean chain", ok,
           f"pruned {bad.pruned}, max pose deviation {dev:.1e}, {runtime:.2f} s")
    assert ok


# --------------------------------------------------------------------------- C8 CLI determinism

def _cli_session(root):
    """Run every subcommand once under ``root``; returns the exit codes."""
    r = str(root)
    p = lambda *parts: "/".join([r, *parts])
    cmds = [
        ["synth", "shape", "--kind", "sine", "--noise-std", "0.02", "--seed", "3", "--out-dir", p("shape")],
        ["synth", "mesh", "--kind", "bunny", "--resolution", "0.004", "--out", p("bunny.obj")],
        ["scan", "--mesh", p("bunny.obj"), "--views", "4", "--stride", "16", "--perturb", "0,1", "--seed", "5",
         "--out-dir", p("scans")],
        ["preprocess", p("scans", "scan_*.ply"), "--outlier-k", "10", "--out-dir", p("clean")],
        ["register", p("clean", "scan_*.ply"), "--init", p("scans", "perturbed_poses.json"),
         "--out", p("fused.ply"), "--out-poses", p("est_poses.json")],
        ["measure", "--metric", "cloud-to-mesh", "--query", p("fused.ply"), "--reference", p("bunny.obj"),
         "--out", p("measure.json"), "--per-point", p("per_point.ply")],
        ["eval", "registration", "--mesh", p("bunny.obj"), "--ranges", "0:1", "--reps", "1", "--views", "4",
         "--stride", "16", "--methods", "refined-pose-graph", "--seed", "2", "--out", p("table.csv")],
        ["eval", "metrics", "--shapes", "plane,triangular", "--sweeps", "noise", "--reps", "2",
         "--n-points", "200", "--seed", "2", "--out", p("sweep.csv")],
        ["convert", p("shape", "test.ply"), p("test_ascii.ply"), "--ascii"],
        ["report", "--registration-csv", p("table.csv"), "--metrics-csv", p("sweep.csv"),
         "--measure-json", p("measure.json"), "--out-dir", p("figures")],
    ]
    codes = []
    for k, c in enumerate(cmds):
        codes.append(main([*c, "--manifest", p("manifests", f"{k:02d}.json")]))
    cfg = {"seed": 4, "stages": [
        {"synth": {"kind": "triangular", "noise_std": 0.01, "out_dir": "pipe_shape"}},
        {"measure": {"metric": "plane-lsq", "query": "pipe_shape/test.ply",
                     "reference": "pipe_shape/reference.ply", "out": "pipe_report.json"}}]}
    (root / "pipe.yaml").write_text(yaml.safe_dump(cfg))
    codes.append(main(["run", p("pipe.yaml")]))
    (root / "measure.json").rename(root / "measure_first.json")
    codes.append(main(["replay", p("manifests", "05.json")]))
    return codes


def _snapshot(root):
    out = {}
    for f in sorted(root.rglob("*")):
        if not f.is_file() or f.name == "pipe.yaml":
            continue
        rel = str(f.relative_to(root))
        data = f.read_bytes()
        if f.suffix == ".json" and "manifests" in f.parts:
            doc = json.loads(data.decode().replace(str(root), "<root>"))
            doc.pop("timing")
            data = json.dumps(doc, sort_keys=True).encode()
        out[rel] = data
    return out


@pytest.mark.slow
def test_c8_cli_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    codes = _cli_session(a) + _cli_session(b)
    sa, sb = _snapshot(a), _snapshot(b)
    differ = sorted(k for k in set(sa) | set(sb) if sa.get(k) != sb.get(k))
    commands = {json.loads((a / "manifests" / f).read_text())["command"] for f in sorted(
        p.name for p in (a / "manifests").iterdir())}
    ok = all(c == 0 for c in codes) and not differ and (a / "measure.json").read_bytes() == (
        a / "measure_first.json").read_bytes()
    record("C8", "byte-identical reruns", ok,
           f"{len(sa)} artifacts from {len(commands)} subcommands plus run and replay; differing: {differ or 'none'}")
    assert ok
