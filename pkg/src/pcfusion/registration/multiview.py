"""Multiview registration front end: Global ICP, Pose Graph and Refined Pose Graph."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from ..errors import InvalidParameter
from ..geometry.types import PointCloud, RigidTransform
from .global_icp import global_icp_full
from .icp import IcpMethod, IcpParams
from .posegraph import PoseGraph, PoseGraphParams, build_pose_graph, optimize_pose_graph_full


class MultiviewMethod(str, enum.Enum):
    GLOBAL_ICP = "global-icp"
    POSE_GRAPH = "pose-graph"
    REFINED_POSE_GRAPH = "refined-pose-graph"

    @classmethod
    def parse(cls, name: str) -> "MultiviewMethod":
        key = name.lower().replace("_", "-")
        aliases = {"globalicp": cls.GLOBAL_ICP, "posegraph": cls.POSE_GRAPH,
                   "refinedposegraph": cls.REFINED_POSE_GRAPH}
        try:
            return cls(key)
        except ValueError:
            pass
        if key.replace("-", "") in aliases:
            return aliases[key.replace("-", "")]
        raise InvalidParameter(f"unknown registration method '{name}'")


@dataclass
class MultiviewResult:
    poses: list[RigidTransform]
    method: MultiviewMethod
    voxel_size: float
    runtime_s: float
    converged: bool
    pruned: list[tuple[int, int]] = field(default_factory=list)
    graph: Optional[PoseGraph] = field(default=None, repr=False)

    def report(self) -> dict:
        out = {
            "method": self.method.value,
            "voxel_size": self.voxel_size,
            "converged": self.converged,
            "pruned_edges": [list(p) for p in self.pruned],
        }
        if self.graph is not None:
            out["edges"] = [
                {"i": e.i, "j": e.j, "kind": e.kind.value, "fitness": e.fitness, "weight": e.weight}
                for e in self.graph.edges
            ]
        return out


def run_multiview(
    clouds: Sequence[PointCloud],
    init_poses: Sequence[RigidTransform],
    method: MultiviewMethod | str,
    params: PoseGraphParams = PoseGraphParams(),
) -> MultiviewResult:
    """Register all clouds; returned poses share the gauge of ``init_poses[0]``."""
    method = MultiviewMethod.parse(method) if isinstance(method, str) else method
    if len(clouds) < 2:
        raise InvalidParameter("multiview registration needs at least 2 clouds")
    if len(init_poses) != len(clouds):
        raise InvalidParameter("one initial pose per cloud is required")
    t0 = time.perf_counter()
    voxel, down = params.resolve_voxel(max(len(c) for c in clouds))
    if method is MultiviewMethod.GLOBAL_ICP:
        poses = list(init_poses)
        for vm, gm in params.coarse_stages:
            coarse = replace(params.icp_params(voxel, gm), method=IcpMethod.POINT_TO_PLANE)
            poses = global_icp_full(clouds, poses, coarse, voxel * vm).poses
        icp = replace(params.icp_params(voxel), method=IcpMethod.POINT_TO_PLANE)
        res = global_icp_full(clouds, poses, icp, voxel if down else None)
        return MultiviewResult(res.poses, method, voxel, time.perf_counter() - t0, res.converged)

    pairwise = IcpMethod.POINT_TO_PLANE if method is MultiviewMethod.POSE_GRAPH else IcpMethod.GENERALIZED
    params = replace(params, method=pairwise)
    graph = build_pose_graph(clouds, init_poses, params)
    res = optimize_pose_graph_full(graph, params.edge_prune_threshold(voxel))
    anchor = init_poses[0]
    poses = [anchor @ T for T in res.poses]
    return MultiviewResult(poses, method, voxel, time.perf_counter() - t0, res.converged, res.pruned, res.graph)


def register_multiview(
    clouds: Sequence[PointCloud],
    init_poses: Sequence[RigidTransform],
    method: MultiviewMethod | str,
    params: PoseGraphParams = PoseGraphParams(),
) -> list[RigidTransform]:
    return run_multiview(clouds, init_poses, method, params).poses


__all__ = ["IcpParams", "MultiviewMethod", "MultiviewResult", "register_multiview", "run_multiview"]
