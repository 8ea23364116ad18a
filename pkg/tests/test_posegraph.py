import numpy as np
import pytest

from pcfusion.errors import DisconnectedSet, GraphConstructionFailure, InvalidParameter
from pcfusion.geometry import se3
from pcfusion.geometry.types import PointCloud, RigidTransform
from pcfusion.registration.global_icp import global_icp, global_icp_full
from pcfusion.registration.icp import IcpMethod, IcpParams
from pcfusion.registration.multiview import MultiviewMethod, run_multiview
from pcfusion.registration.posegraph import (
    Edge,
    EdgeKind,
    Node,
    PoseGraph,
    PoseGraphParams,
    _jacobians,
    _residual,
    _Term,
    build_pose_graph,
    chain_poses,
    optimize_pose_graph,
    optimize_pose_graph_full,
)

from oracles import rigid
from test_icp import corner


def to_frame(cloud, pose):
    inv = np.linalg.inv(pose)
    return PointCloud(cloud.points @ inv[:3, :3].T + inv[:3, 3], cloud.normals @ inv[:3, :3].T)


@pytest.fixture(scope="module")
def crops():
    """Three overlapping corner crops expressed in three different sensor frames."""
    c = corner()
    masks = [c.points[:, 0] < 0.07, c.points[:, 1] < 0.07, c.points[:, 2] < 0.07]
    gt = [rigid([0, 0, 1], 0.0, [0, 0, 0]), rigid([1, 2, 0], 0.3, [0.05, 0.01, -0.02]),
          rigid([0, 1, 3], -0.4, [-0.03, 0.04, 0.01])]
    clouds = [to_frame(c.select(m), T) for m, T in zip(masks, gt)]
    return clouds, [RigidTransform(T) for T in gt]


# --------------------------------------------------------------------------- graph construction

def test_three_clouds_two_odometry_edges(crops):
    clouds, gt = crops
    g = build_pose_graph(clouds, gt)
    odo = [(e.i, e.j) for e in g.edges if e.kind is EdgeKind.ODOMETRY]
    loops = [e for e in g.edges if e.kind is EdgeKind.LOOP_CLOSURE]
    assert odo == [(0, 1), (1, 2)]
    assert [(e.i, e.j) for e in loops] == [(0, 2)]
    assert loops[0].fitness >= PoseGraphParams().fitness_floor
    strict = build_pose_graph(clouds, gt, PoseGraphParams(fitness_floor=min(1.0, loops[0].fitness + 1e-6)))
    assert all(e.kind is EdgeKind.ODOMETRY for e in strict.edges)


def test_edges_compose_consistently_at_ground_truth(crops):
    clouds, gt = crops
    g = build_pose_graph(clouds, gt)
    T = {(e.i, e.j): e.transform.matrix for e in g.edges}
    assert np.abs(T[0, 1] @ T[1, 2] - T[0, 2]).max() < 1e-6
    for e in g.edges:
        info = e.information
        assert np.allclose(info, info.T) and np.linalg.eigvalsh(info).min() > -1e-6 * np.abs(info).max()


def test_single_cloud_rejected(crops):
    with pytest.raises(InvalidParameter):
        build_pose_graph(crops[0][:1], crops[1][:1])


def test_disjoint_odometry_pair_fails(crops):
    clouds, gt = crops
    far = [gt[0], gt[1] @ RigidTransform.from_translation([5.0, 0, 0]), gt[2]]
    with pytest.raises(GraphConstructionFailure):
        build_pose_graph(clouds, far)


def test_callback_sees_every_stage(crops):
    clouds, gt = crops
    stages = set()
    build_pose_graph(clouds[:2], gt[:2], callback=lambda i, j, s, it, si, tj, T: stages.add((i, j, s)))
    assert stages == {(0, 1, 0), (0, 1, 1)}


def test_params_derivations():
    p = PoseGraphParams(voxel_size=0.002, distance_multiplier=2, prune_divisor=4)
    assert p.max_correspondence_distance(0.002) == pytest.approx(0.004)
    assert p.edge_prune_threshold(0.002) == pytest.approx(0.0005)
    assert PoseGraphParams().resolve_voxel(100_000) == (0.002, True)
    assert PoseGraphParams().resolve_voxel(99_999) == (0.001, False)
    with pytest.raises(InvalidParameter):
        PoseGraphParams(distance_multiplier=5)
    with pytest.raises(InvalidParameter):
        PoseGraphParams(prune_divisor=1)


# --------------------------------------------------------------------------- optimization

def random_poses(n, seed):
    rng = np.random.default_rng(seed)
    out = [np.eye(4)]
    for _ in range(n - 1):
        out.append(rigid(rng.normal(size=3), rng.uniform(-0.5, 0.5), rng.normal(scale=0.1, size=3)))
    return out


def graph_from(poses, pairs, corrupt=None, start=None):
    edges = []
    for i, j in pairs:
        Z = np.linalg.inv(poses[i]) @ poses[j]
        if (i, j) == corrupt:
            Z = Z @ rigid([1, 0, 0], 0.0, [1.0, 0, 0])
        kind = EdgeKind.ODOMETRY if j == i + 1 else EdgeKind.LOOP_CLOSURE
        edges.append(Edge(i, j, RigidTransform(Z), 1e4 * np.eye(6), kind, n_correspondences=1000))
    start = start or chain_poses(edges, len(poses))
    return PoseGraph([Node(k, P) for k, P in enumerate(start)], edges, 0.001)


PAIRS = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3), (2, 4)]


def test_consistent_graph_reproduces_chain():
    poses = random_poses(5, 0)
    g = graph_from(poses, PAIRS)
    res = optimize_pose_graph_full(g, 0.001 / 3)
    assert res.pruned == []
    chain = chain_poses(g.edges, 5)
    for a, b in zip(res.poses, chain):
        assert np.abs(a.matrix - b.matrix).max() < 1e-9


def test_consistent_graph_from_perturbed_start():
    poses = random_poses(5, 1)
    rng = np.random.default_rng(2)
    start = [RigidTransform.identity()] + [
        RigidTransform(se3.exp(rng.normal(scale=1e-3, size=6)) @ P) for P in poses[1:]]
    res = optimize_pose_graph(graph_from(poses, PAIRS, start=start), 0.001 / 3)
    for a, b in zip(res, poses):
        assert np.abs(a.matrix - b).max() < 1e-9


def test_gross_loop_closure_is_pruned():
    poses = random_poses(5, 3)
    bad = optimize_pose_graph_full(graph_from(poses, PAIRS + [(0, 4)], corrupt=(0, 4)), 0.001 / 3)
    clean = optimize_pose_graph_full(graph_from(poses, PAIRS), 0.001 / 3)
    assert (0, 4) in bad.pruned
    assert bad.weights[(0, 4)] == 0.0
    assert all(bad.weights[e] == 1.0 for e in [(0, 1), (1, 2), (2, 3), (3, 4)])
    for a, b in zip(bad.poses, clean.poses):
        assert np.abs(a.matrix - b.matrix).max() < 1e-6


def test_single_node_graph():
    g = PoseGraph([Node(0, RigidTransform.identity())], [])
    assert optimize_pose_graph(g, 0.001) == [RigidTransform.identity()]


def test_broken_chain_rejected():
    poses = random_poses(3, 4)
    g = graph_from(poses, [(0, 1), (1, 2)])
    g.edges.pop(1)
    with pytest.raises(GraphConstructionFailure):
        optimize_pose_graph(g, 0.001)


def test_edge_kind_rules():
    with pytest.raises(InvalidParameter):
        Edge(0, 2, RigidTransform.identity(), np.eye(6), EdgeKind.ODOMETRY)
    with pytest.raises(InvalidParameter):
        Edge(0, 1, RigidTransform.identity(), np.eye(6), EdgeKind.LOOP_CLOSURE)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(5)
    poses = random_poses(3, 6)
    Z = np.linalg.inv(poses[1]) @ poses[2] @ se3.exp(rng.normal(scale=1e-4, size=6))
    term = _Term(1, 2, np.linalg.inv(Z), np.eye(6), 1, False)
    e = _residual(term, poses)
    Ji, Jj = _jacobians(term, poses, e)
    h = 1e-7
    for node, J in ((1, Ji), (2, Jj)):
        num = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = [P.copy() for P in poses]
            minus = [P.copy() for P in poses]
            plus[node] = se3.exp(d) @ poses[node]
            minus[node] = se3.exp(-d) @ poses[node]
            num[:, k] = (_residual(term, plus) - _residual(term, minus)) / (2 * h)
        assert np.abs(num - J).max() < 1e-6 * max(1.0, np.abs(J).max())


# --------------------------------------------------------------------------- global ICP

def egg_crate(x0, x1, spacing=0.002):
    x, y = np.meshgrid(np.arange(x0, x1, spacing), np.arange(0, 0.1, spacing))
    x, y = x.ravel(), y.ravel()
    k, a = 2 * np.pi / 0.05, 0.01
    z = a * np.sin(k * x) * np.sin(k * y)
    n = np.c_[-a * k * np.cos(k * x) * np.sin(k * y), -a * k * np.sin(k * x) * np.cos(k * y), np.ones_like(x)]
    return PointCloud(np.c_[x, y, z], n / np.linalg.norm(n, axis=1, keepdims=True))


@pytest.fixture(scope="module")
def strips():
    return [egg_crate(0.0, 0.12), egg_crate(0.06, 0.18), egg_crate(0.12, 0.24)]


def test_global_icp_fixed_point(strips):
    # a gate below the grid spacing pairs only coincident samples: zero residual
    I = [RigidTransform.identity()] * 3
    out = global_icp(strips, I, IcpParams(0.001), None)
    for T in out:
        assert np.abs(T.matrix - np.eye(4)).max() < 1e-9


def test_global_icp_strips_offset(strips):
    init = [RigidTransform.identity(), RigidTransform.from_translation([0.001, 0, 0]),
            RigidTransform.from_translation([0.001, -0.001, 0.001])]
    out = global_icp_full(strips, init, IcpParams(0.005), None)
    for T in out.poses:
        assert np.linalg.norm(T.t) < 1e-3
        assert T.rotation_angle < 1e-3
    assert {(0, 1), (1, 2)} <= set(out.pairs)


def test_global_icp_two_clouds_offset_five_mm(strips):
    a = strips[0]
    init = [RigidTransform.identity(), RigidTransform.from_translation([0.005, 0, 0])]
    out = global_icp(strips[:1] * 2, init, IcpParams(0.01), None)
    rel = init[1].inverse() @ out[1]
    assert np.allclose(rel.t, [-0.005, 0, 0], atol=1e-4)
    assert len(a) > 0


def test_global_icp_disconnected(strips):
    far = [RigidTransform.identity(), RigidTransform.identity(), RigidTransform.from_translation([5, 0, 0])]
    with pytest.raises(DisconnectedSet):
        global_icp(strips, far, IcpParams(0.005), None)


# --------------------------------------------------------------------------- multiview front end

@pytest.mark.parametrize("method", list(MultiviewMethod))
def test_zero_perturbation_returns_ground_truth(crops, method):
    clouds, gt = crops
    res = run_multiview(clouds, gt, method)
    for a, b in zip(res.poses, gt):
        assert np.abs(a.matrix - b.matrix).max() < 1e-6


def test_method_names():
    assert MultiviewMethod.parse("RefinedPoseGraph") is MultiviewMethod.REFINED_POSE_GRAPH
    assert MultiviewMethod.parse("global_icp") is MultiviewMethod.GLOBAL_ICP
    with pytest.raises(InvalidParameter):
        MultiviewMethod.parse("bundle")


def test_refined_uses_generalized_pairwise(crops):
    clouds, gt = crops
    res = run_multiview(clouds, gt, "refined-pose-graph")
    assert res.graph is not None and res.report()["method"] == "refined-pose-graph"
    assert IcpMethod.GENERALIZED.value == "generalized"
